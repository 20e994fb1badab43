use std::ffi::OsString;
use std::path::PathBuf;

use serde_json::Value;

use crate::{CliError, CliResult};

const SUBCOMMANDS: [&str; 6] = ["generate", "train", "eval", "sweep-p", "ablate", "analyze"];

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn flag_value(key: &str, v: &Value) -> CliResult<Option<String>> {
    Ok(match v {
        Value::Null => None,
        Value::Bool(b) => Some(if *b { "on" } else { "off" }.to_owned()),
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => {
            let parts = items
                .iter()
                .map(|i| match i {
                    Value::Number(n) => Ok(n.to_string()),
                    Value::String(s) => Ok(s.clone()),
                    _ => Err(CliError::Usage(format!("config key {key:?}: list items must be numbers or strings"))),
                })
                .collect::<CliResult<Vec<_>>>()?;
            Some(parts.join(","))
        }
        Value::Object(_) => return Err(CliError::Usage(format!("config key {key:?}: nested objects are not flags"))),
    })
}

/// Splices the flags of a `--config` JSON object in right after the
/// subcommand, so that flags given on the command line come later and win.
pub fn merge_config_file(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|_| CliError::Missing(path.clone()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Malformed(format!("{}: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(CliError::Malformed(format!("{}: expected a JSON object", path.display())));
    };
    let mut extra = Vec::new();
    for (k, v) in &map {
        let flag = k.replace('_', "-");
        if flag == "config" {
            continue;
        }
        if let Some(val) = flag_value(k, v)? {
            extra.push(OsString::from(format!("--{flag}={val}")));
        }
    }
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(argv);
    };
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_flags_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"episodes": 5, "p_grid": [0, 0.5], "forget": false}"#).unwrap();
        let argv = os(&["navmem", "--config", cfg.to_str().unwrap(), "generate", "--episodes", "9"]);
        let out = merge_config_file(argv).unwrap();
        let s: Vec<String> = out.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        assert_eq!(s[3], "generate");
        assert!(s.contains(&"--episodes=5".to_owned()));
        assert!(s.contains(&"--p-grid=0,0.5".to_owned()));
        assert!(s.contains(&"--forget=off".to_owned()));
        assert_eq!(&s[s.len() - 2..], ["--episodes", "9"]);
    }

    #[test]
    fn nested_objects_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"rules": {"a": 1}}"#).unwrap();
        let err = merge_config_file(os(&["navmem", "generate", "--config", cfg.to_str().unwrap()])).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }
}
