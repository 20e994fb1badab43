//! Multi-goal episode specs: rejection-sampled generation under the five
//! placement rules, an independent rule-by-rule validator, and the MGEP1
//! dataset file.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Rng, Stream};
use crate::sim::{distance_field, generate_world, AgentPose, Cell, GridWorld, Heading};

pub const DATASET_FORMAT: &str = "MGEP1";
pub const MAX_GOALS: usize = 4;

/// Thresholds in cells; recorded in every dataset header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRules {
    /// Minimum BFS hops start→g1 and between successive goals.
    pub min_separation: u32,
    /// Maximum BFS hops between successive goals.
    pub max_separation: u32,
    /// The final goal must lie within this many BFS hops of an earlier goal.
    pub final_near: u32,
    /// Chebyshev radius around each goal that must be obstacle-free.
    pub clear_radius: usize,
    pub max_attempts: usize,
}

impl Default for EpisodeRules {
    fn default() -> Self {
        Self {
            min_separation: 6,
            max_separation: 40,
            final_near: 12,
            clear_radius: 1,
            max_attempts: 2000,
        }
    }
}

mod goal_list {
    use super::Cell;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(goals: &[Cell], s: S) -> Result<S::Ok, S::Error> {
        goals.iter().map(|c| [c.x, c.y]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Cell>, D::Error> {
        let raw = Vec::<[usize; 2]>::deserialize(d)?;
        Ok(raw.into_iter().map(|[x, y]| Cell::new(x, y)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub id: usize,
    /// Index into the dataset header's world list.
    pub world: usize,
    pub start: AgentPose,
    #[serde(with = "goal_list")]
    pub goals: Vec<Cell>,
}

impl EpisodeSpec {
    pub fn difficulty(&self) -> usize {
        self.goals.len()
    }
}

fn goal_area_clear(world: &GridWorld, c: Cell, radius: usize) -> bool {
    let r = radius as i64;
    (-r..=r).all(|dy| (-r..=r).all(|dx| c.offset(dx, dy).is_some_and(|n| world.is_free(n))))
}

fn hops(field: &[Option<u32>], world: &GridWorld, c: Cell) -> Option<u32> {
    field[world.index(c)]
}

/// Samples a start pose and `n_goals` goals satisfying every rule.
pub fn generate_episode(world: &GridWorld, n_goals: usize, rules: &EpisodeRules, rng: &mut Rng, id: usize, world_index: usize) -> Result<EpisodeSpec> {
    if !(1..=MAX_GOALS).contains(&n_goals) {
        return Err(Error::Domain(format!("goal count {n_goals} outside 1..={MAX_GOALS}")));
    }
    let comps = world.components();
    let Some(main) = comps.first() else {
        return Err(Error::Generation(format!("world {} has no free cells", world.id)));
    };
    let candidates: Vec<Cell> = main
        .iter()
        .copied()
        .filter(|&c| goal_area_clear(world, c, rules.clear_radius))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Generation(format!("world {} has no goal-eligible cells", world.id)));
    }
    'attempt: for _ in 0..rules.max_attempts {
        let start_cell = *main.choose(rng).expect("nonempty component");
        let heading = Heading::ALL[rng.random_range(0..4)];
        let mut goals: Vec<Cell> = Vec::with_capacity(n_goals);
        let mut fields: Vec<Vec<Option<u32>>> = Vec::with_capacity(n_goals);
        let mut prev_field = distance_field(world, &[start_cell]);
        for k in 0..n_goals {
            let first = k == 0;
            let last = k + 1 == n_goals && n_goals >= 2;
            let pool: Vec<Cell> = candidates
                .iter()
                .copied()
                .filter(|&c| match hops(&prev_field, world, c) {
                    Some(h) => h >= rules.min_separation && (first || h <= rules.max_separation),
                    None => false,
                })
                .filter(|&c| !last || fields.iter().any(|f| hops(f, world, c).is_some_and(|h| h <= rules.final_near)))
                .collect();
            let Some(&g) = pool.choose(rng) else {
                continue 'attempt;
            };
            goals.push(g);
            prev_field = distance_field(world, &[g]);
            fields.push(prev_field.clone());
        }
        return Ok(EpisodeSpec {
            id,
            world: world_index,
            start: AgentPose::new(start_cell, heading),
            goals,
        });
    }
    Err(Error::Generation(format!(
        "world {} yielded no valid {n_goals}-goal episode in {} attempts",
        world.id, rules.max_attempts
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleCheck {
    pub rule: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub episode: usize,
    /// Start and goals are free cells and the goal count is in range.
    pub well_formed: bool,
    pub rules: Vec<RuleCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.well_formed && self.rules.iter().all(|r| r.passed)
    }
}

/// Re-checks every rule from scratch with fresh BFS fields. Never fails;
/// problems are reported.
pub fn validate_episode(world: &GridWorld, spec: &EpisodeSpec, rules: &EpisodeRules) -> ValidationReport {
    let in_world = |c: Cell| world.in_bounds(c) && world.is_free(c);
    let well_formed = (1..=MAX_GOALS).contains(&spec.goals.len())
        && in_world(spec.start.cell())
        && spec.goals.iter().all(|&g| in_world(g));
    let mut points = vec![spec.start.cell()];
    points.extend(&spec.goals);
    let fields: Vec<Vec<Option<u32>>> = if well_formed {
        points.iter().map(|&c| distance_field(world, &[c])).collect()
    } else {
        Vec::new()
    };
    let dist = |a: usize, b: usize| -> Option<u32> { fields.get(a).and_then(|f| f[world.index(points[b])]) };

    let blocked_goals: Vec<String> = spec
        .goals
        .iter()
        .filter(|&&g| !world.in_bounds(g) || !goal_area_clear(world, g, rules.clear_radius))
        .map(|g| g.to_string())
        .collect();
    let r1 = RuleCheck {
        rule: 1,
        name: "goal surroundings clear",
        passed: blocked_goals.is_empty(),
        detail: if blocked_goals.is_empty() { String::new() } else { format!("obstacles near {}", blocked_goals.join(", ")) },
    };

    let mut gaps = Vec::new();
    if well_formed {
        for k in 0..spec.goals.len() {
            match dist(k, k + 1) {
                Some(h) if h < rules.min_separation => gaps.push(format!("leg {k}: {h} < {}", rules.min_separation)),
                Some(h) if k > 0 && h > rules.max_separation => gaps.push(format!("leg {k}: {h} > {}", rules.max_separation)),
                None => gaps.push(format!("leg {k}: unreachable")),
                _ => {}
            }
        }
    }
    let r2 = RuleCheck {
        rule: 2,
        name: "goal separation",
        passed: well_formed && gaps.is_empty(),
        detail: gaps.join("; "),
    };

    let r3 = RuleCheck {
        rule: 3,
        name: "single layer",
        passed: true,
        detail: String::new(),
    };

    let mut unreachable = Vec::new();
    if well_formed {
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                if dist(a, b).is_none() {
                    unreachable.push(format!("{}-{}", points[a], points[b]));
                }
            }
        }
    }
    let r4 = RuleCheck {
        rule: 4,
        name: "mutually reachable",
        passed: well_formed && unreachable.is_empty(),
        detail: unreachable.join(", "),
    };

    let n = spec.goals.len();
    let final_ok = n < 2 || (well_formed && (1..n).any(|k| dist(k, n).is_some_and(|h| h <= rules.final_near)));
    let r5 = RuleCheck {
        rule: 5,
        name: "final goal near an earlier goal",
        passed: final_ok,
        detail: if final_ok { String::new() } else { format!("no earlier goal within {} hops", rules.final_near) },
    };

    ValidationReport {
        episode: spec.id,
        well_formed,
        rules: vec![r1, r2, r3, r4, r5],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    /// World files, relative to the dataset file's directory.
    pub world_files: Vec<String>,
    pub cell_size: f64,
    pub thresholds: EpisodeRules,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<EpisodeSpec>,
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "dataset".into(),
            detail: e.to_string(),
        })?;
        if ds.header.format != DATASET_FORMAT {
            return Err(Error::Format {
                what: "dataset".into(),
                detail: format!("format {:?}, expected {DATASET_FORMAT:?}", ds.header.format),
            });
        }
        if let Some(e) = ds.episodes.iter().find(|e| e.world >= ds.header.world_files.len()) {
            return Err(Error::Format {
                what: "dataset".into(),
                detail: format!("episode {} names world {} of {}", e.id, e.world, ds.header.world_files.len()),
            });
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads the dataset and its worlds from the files next to it.
    pub fn load_with_worlds(path: &Path) -> Result<(Self, Vec<GridWorld>)> {
        let ds = Self::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let worlds = ds
            .header
            .world_files
            .iter()
            .map(|f| GridWorld::load(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        Ok((ds, worlds))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub worlds: usize,
    pub width: usize,
    pub height: usize,
    pub density: f64,
    pub goals: usize,
    pub episodes: usize,
    pub seed: u64,
    pub rules: EpisodeRules,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            worlds: 10,
            width: 15,
            height: 15,
            density: 0.2,
            goals: 1,
            episodes: 100,
            seed: 0,
            rules: EpisodeRules::default(),
        }
    }
}

pub fn world_file_name(i: usize) -> String {
    format!("world_{i:03}.txt")
}

/// Worlds come from the world stream, episode `e` from the episode stream
/// and lives in world `e mod worlds`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Dataset, Vec<GridWorld>)> {
    if cfg.worlds == 0 {
        return Err(Error::Domain("a dataset needs at least one world".into()));
    }
    let worlds = (0..cfg.worlds)
        .map(|i| {
            let seed = derive_seed(cfg.seed, Stream::World, i as u64);
            let mut w = generate_fit_world(seed, cfg.width, cfg.height, cfg.density, cfg.goals, &cfg.rules)?;
            w.id = world_file_name(i).trim_end_matches(".txt").to_owned();
            Ok(w)
        })
        .collect::<Result<Vec<_>>>()?;
    let episodes = (0..cfg.episodes)
        .map(|e| {
            let w = e % cfg.worlds;
            let mut rng = stream(cfg.seed, Stream::Episode, e as u64);
            generate_episode(&worlds[w], cfg.goals, &cfg.rules, &mut rng, e, w)
        })
        .collect::<Result<Vec<_>>>()?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        world_files: (0..cfg.worlds).map(world_file_name).collect(),
        cell_size: worlds[0].cell_size,
        thresholds: cfg.rules,
        seed: cfg.seed,
    };
    Ok((Dataset { header, episodes }, worlds))
}

const WORLD_RESEEDS: u64 = 64;

/// Like `generate_world`, but moves on to derived seeds until the world can
/// host an `n_goals` episode under `rules`.
pub fn generate_fit_world(seed: u64, width: usize, height: usize, density: f64, n_goals: usize, rules: &EpisodeRules) -> Result<GridWorld> {
    let mut last = None;
    for k in 0..WORLD_RESEEDS {
        let s = if k == 0 { seed } else { derive_seed(seed, Stream::World, k) };
        let w = generate_world(s, width, height, density)?;
        match generate_episode(&w, n_goals, rules, &mut stream(s, Stream::Episode, u64::MAX), 0, 0) {
            Ok(_) => return Ok(w),
            Err(Error::Generation(e)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "no world from seed {seed} hosts a {n_goals}-goal episode: {}",
        last.unwrap_or_default()
    )))
}

/// Writes the worlds and `dataset.json` into `dir`; returns the dataset path.
pub fn write_dataset(dir: &Path, ds: &Dataset, worlds: &[GridWorld]) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (w, f) in worlds.iter().zip(&ds.header.world_files) {
        w.save(&dir.join(f))?;
    }
    let path = dir.join("dataset.json");
    ds.save(&path)?;
    Ok(path)
}
