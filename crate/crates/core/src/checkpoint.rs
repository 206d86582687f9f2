//! ORSC checkpoints: named ORST tensors for every parameter and the Adam
//! moments.
//!
//! Layout (little-endian): magic `ORSC`, u32 version, u32 entry count,
//! then per entry a u32 name length, the UTF-8 name and an ORST tensor.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::AdamState;

pub const MAGIC: &[u8; 4] = b"ORSC";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";
const STEP: &str = "adam.t";

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn write_entries<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_orst(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return format_err("not an ORSC checkpoint (bad magic)");
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return format_err(format!("unsupported ORSC version {version}"));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 4096 {
            return format_err(format!("entry name of {len} bytes"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        out.push((name, Tensor::read_orst(&mut r)?));
    }
    Ok(out)
}

pub fn checkpoint_entries(store: &ParamStore, adam: &AdamState) -> Result<Vec<(String, Tensor)>> {
    let mut entries = Vec::with_capacity(3 * store.len() + 1);
    for (name, t) in store.iter() {
        entries.push((format!("{PARAM}{name}"), Tensor::new(t.shape().to_vec(), t.data().to_vec())?));
    }
    for (k, (name, t)) in store.iter().enumerate() {
        entries.push((format!("{MOMENT1}{name}"), Tensor::new(t.shape().to_vec(), adam.m[k].clone())?));
        entries.push((format!("{MOMENT2}{name}"), Tensor::new(t.shape().to_vec(), adam.v[k].clone())?));
    }
    entries.push((STEP.into(), Tensor::scalar(adam.t as f64)));
    Ok(entries)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, adam: &AdamState) -> Result<()> {
    let entries = checkpoint_entries(store, adam)?;
    write_entries(BufWriter::new(File::create(path)?), &entries)
}

/// Loads parameters into `store` (names and shapes must match exactly)
/// and returns the stored optimizer state.
pub fn restore(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<AdamState> {
    let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
    let mut adam = AdamState::new(store);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let Some(p) = map.remove(&format!("{PARAM}{name}")) else {
            return format_err(format!("checkpoint lacks parameter `{name}`"));
        };
        store.load(name, &p)?;
        for (prefix, slot) in [(MOMENT1, &mut adam.m[k]), (MOMENT2, &mut adam.v[k])] {
            let Some(t) = map.remove(&format!("{prefix}{name}")) else {
                return format_err(format!("checkpoint lacks `{prefix}{name}`"));
            };
            if t.numel() != slot.len() {
                return format_err(format!("`{prefix}{name}` has {} values, expected {}", t.numel(), slot.len()));
            }
            slot.copy_from_slice(t.data());
        }
    }
    let Some(t) = map.remove(STEP) else {
        return format_err("checkpoint lacks the optimizer step");
    };
    let step = t.data().first().copied().unwrap_or(-1.0);
    if !(step >= 0.0 && step.fract() == 0.0) {
        return format_err(format!("invalid optimizer step {step}"));
    }
    adam.t = step as u64;
    if let Some(extra) = map.keys().next() {
        return format_err(format!("checkpoint entry `{extra}` does not belong to this model"));
    }
    Ok(adam)
}

pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<AdamState> {
    let entries = read_entries(BufReader::new(File::open(path)?))?;
    restore(store, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        s.add("a.b", Tensor::new(vec![2], vec![-0.5, 0.25]).unwrap());
        s
    }

    #[test]
    fn round_trip() {
        let s = store();
        let mut adam = AdamState::new(&s);
        adam.t = 7;
        adam.m[1] = vec![0.1, 0.2];
        adam.v[0] = vec![1e-3; 4];
        let mut buf = Vec::new();
        write_entries(&mut buf, &checkpoint_entries(&s, &adam).unwrap()).unwrap();
        assert_eq!(&buf[..4], b"ORSC");
        let mut fresh = ParamStore::new();
        fresh.add("a.w", Tensor::zeros(&[2, 2]));
        fresh.add("a.b", Tensor::zeros(&[2]));
        let back = restore(&mut fresh, read_entries(&buf[..]).unwrap()).unwrap();
        assert_eq!(back, adam);
        assert_eq!(fresh.flatten(), s.flatten());
    }

    #[test]
    fn rejects_mismatched_model() {
        let s = store();
        let entries = checkpoint_entries(&s, &AdamState::new(&s)).unwrap();
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(&[4]));
        other.add("a.b", Tensor::zeros(&[2]));
        assert!(restore(&mut other, entries.clone()).is_err());
        let mut smaller = ParamStore::new();
        smaller.add("a.w", Tensor::zeros(&[2, 2]));
        assert!(restore(&mut smaller, entries).is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_entries(&b"ORSTxxxxxxxx"[..]).is_err());
    }
}
