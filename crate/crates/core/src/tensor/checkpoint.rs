//! Flat binary checkpoint: `MGCK1`, entry count, then per entry
//! `name_len name rows cols payload`. Integers are u32 little-endian,
//! payload is row-major f64 little-endian. Entries are written in name order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Scalar, Tensor2D};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MGCK1";

pub fn encode_checkpoint<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = bytes;
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let count = read_u32(&mut r)?;
    let mut params = ParamStore::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(bad(&format!("entries not sorted/unique at {name:?}")));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            data.push(T::of(f64::from_le_bytes(b)));
        }
        params.insert(name.clone(), Tensor2D::from_vec(rows, cols, data)?);
        prev = Some(name);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes after last entry"));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode_checkpoint(params))
        .map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn bad(detail: &str) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.to_owned(),
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| bad("unexpected end of file"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("b", Tensor2D::from_vec(1, 1, vec![1.5]).unwrap());
        ps.insert("a", Tensor2D::from_vec(1, 2, vec![-2.0, 0.25]).unwrap());
        let bytes = encode_checkpoint(&ps);
        let mut expect = b"MGCK1".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(b"a");
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend((-2.0f64).to_le_bytes());
        expect.extend(0.25f64.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(b"b");
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1.5f64.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn truncated_and_bad_magic_are_format_errors() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor2D::zeros(2, 2));
        let bytes = encode_checkpoint(&ps);
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f64>(&wrong),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip(entries in prop::collection::btree_map("[a-z.]{1,12}", (1usize..4, 1usize..4, -1e6f64..1e6), 0..6)) {
            let mut ps = ParamStore::<f64>::new();
            for (name, (r, c, v)) in &entries {
                ps.insert(name.clone(), Tensor2D::from_fn(*r, *c, |i, j| v + (i * 7 + j) as f64));
            }
            let back: ParamStore<f64> = decode_checkpoint(&encode_checkpoint(&ps)).unwrap();
            prop_assert_eq!(back, ps);
        }
    }
}
