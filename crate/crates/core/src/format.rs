//! Little-endian container primitives shared by the checkpoint, dataset and
//! tuned-model files.
//!
//! Every container is `magic (8 bytes) | version: u32 | header_len: u64 |
//! header text | body`. The header is canonical `key = value` lines sorted by
//! key. Named tensors are encoded as `name_len: u32 | name | rank: u32 |
//! dims: u64 * rank | f64 payload`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Renders a canonical header: one `key = value` line per entry, key-sorted.
pub fn canonical_text(entries: &BTreeMap<String, String>) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn parse_canonical_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("header line {} is not `key = value`", n + 1)))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("duplicate header key {k}")));
        }
    }
    Ok(out)
}

pub(crate) fn write_preamble(
    w: &mut impl Write,
    magic: &[u8; 8],
    version: u32,
    header: &BTreeMap<String, String>,
) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, version)?;
    let text = canonical_text(header);
    write_u64(w, text.len() as u64)?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

pub(crate) fn read_preamble(
    r: &mut impl Read,
    magic: &[u8; 8],
    version: u32,
) -> Result<BTreeMap<String, String>> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(Error::Format(format!("unsupported format version {v}, expected {version}")));
    }
    let len = read_u64(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let text = String::from_utf8(buf).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    parse_canonical_text(&text)
}

pub(crate) fn write_named_tensors<'t>(
    w: &mut impl Write,
    tensors: impl ExactSizeIterator<Item = (&'t str, &'t Tensor)>,
) -> Result<()> {
    write_u64(w, tensors.len() as u64)?;
    for (name, t) in tensors {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            write_u64(w, d as u64)?;
        }
        write_f64s(w, t.data())?;
    }
    Ok(())
}

pub(crate) fn read_named_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let count = read_u64(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("tensor {name} has implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().product();
        let data = read_f64s(r, n)?;
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub(crate) fn header_get<'h>(h: &'h BTreeMap<String, String>, key: &str) -> Result<&'h str> {
    h.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("header is missing `{key}`")))
}

pub(crate) fn header_parse<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = header_get(h, key)?;
    raw.parse()
        .map_err(|_| Error::Format(format!("header `{key}` has unparsable value `{raw}`")))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let mut h = BTreeMap::new();
        h.insert("b".to_string(), "2".to_string());
        h.insert("a".to_string(), "x y".to_string());
        let text = canonical_text(&h);
        assert_eq!(text, "a = x y\nb = 2\n");
        assert_eq!(parse_canonical_text(&text).unwrap(), h);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        write_preamble(&mut buf, b"AAAAAAAA", 1, &BTreeMap::new()).unwrap();
        assert!(matches!(
            read_preamble(&mut buf.as_slice(), b"BBBBBBBB", 1),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_preamble(&mut buf.as_slice(), b"AAAAAAAA", 2),
            Err(Error::Format(_))
        ));
    }
}
