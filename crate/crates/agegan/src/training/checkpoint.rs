//! Checkpoint directory layout: a human-readable `manifest.json` next to
//! one parameter blob per network (plus optimizer-moment blobs).
//!
//! Blob format: `u32` entry count, then per entry a length-prefixed
//! layer name (u32 + UTF-8 bytes), a `u32` value count, and the values as
//! little-endian 32-bit floats. Everything is written to a temp file and
//! renamed into place.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::nn::ParamSet;
use crate::{scalar, to_f64, Error, Real, Result};

pub fn write_blob(path: &Path, entries: &[(String, Vec<f32>)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, values) in entries {
            let bytes = name.as_bytes();
            f.write_all(&(bytes.len() as u32).to_le_bytes())?;
            f.write_all(bytes)?;
            f.write_all(&(values.len() as u32).to_le_bytes())?;
            for v in values {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<IndexMap<String, Vec<f32>>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |f: &mut dyn Read| -> Result<u32> {
        f.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let count = read_u32(&mut f)?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::CheckpointMismatch("non-UTF-8 layer name".into()))?;
        let n = read_u32(&mut f)? as usize;
        let mut values = Vec::with_capacity(n);
        let mut vbuf = [0u8; 4];
        for _ in 0..n {
            f.read_exact(&mut vbuf)?;
            values.push(f32::from_le_bytes(vbuf));
        }
        out.insert(name, values);
    }
    Ok(out)
}

/// Snapshot a network's full state (parameters + batch-norm statistics)
/// as 32-bit entries.
pub fn net_entries<S: Real>(net: &dyn ParamSet<S>) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    net.for_each_state(&mut |name, vals| {
        out.push((
            name.to_string(),
            vals.iter().map(|v| to_f64(*v) as f32).collect(),
        ));
    });
    out
}

/// Fill a freshly initialized network from blob entries; every entry must
/// exist with the right length.
pub fn load_net<S: Real>(
    net: &mut dyn ParamSet<S>,
    map: &IndexMap<String, Vec<f32>>,
    what: &str,
) -> Result<()> {
    let mut err: Option<Error> = None;
    let mut seen = 0usize;
    net.for_each_state_mut(&mut |name, vals| {
        if err.is_some() {
            return;
        }
        match map.get(name) {
            Some(stored) if stored.len() == vals.len() => {
                for (dst, src) in vals.iter_mut().zip(stored.iter()) {
                    *dst = scalar(*src as f64);
                }
                seen += 1;
            }
            Some(stored) => {
                err = Some(Error::CheckpointMismatch(format!(
                    "{what}: entry {name} has {} values, expected {}",
                    stored.len(),
                    vals.len()
                )));
            }
            None => {
                err = Some(Error::CheckpointMismatch(format!(
                    "{what}: missing entry {name}"
                )));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != map.len() {
        return Err(Error::CheckpointMismatch(format!(
            "{what}: blob has {} entries, network consumed {seen}",
            map.len()
        )));
    }
    Ok(())
}

/// Adam moment vectors as blob entries.
pub fn moment_entries<S: Real>(moments: &IndexMap<String, Vec<S>>) -> Vec<(String, Vec<f32>)> {
    moments
        .iter()
        .map(|(k, v)| {
            (
                k.clone(),
                v.iter().map(|x| to_f64(*x) as f32).collect(),
            )
        })
        .collect()
}

pub fn moments_from_blob<S: Real>(map: IndexMap<String, Vec<f32>>) -> IndexMap<String, Vec<S>> {
    map.into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|x| scalar(x as f64)).collect()))
        .collect()
}
