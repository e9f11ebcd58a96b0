//! Parameter registry checkpoints.
//!
//! Two files per checkpoint: `<stem>.bin` holds every value as little-endian
//! `f64`, back to back in registry order; `<stem>.manifest` is plain text:
//!
//! ```text
//! ewm-lab-checkpoint v1
//! <name>\t<dim,dim,...>\t<offset>\t<count>
//! ```
//!
//! Offsets and counts are in elements, not bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

pub const CHECKPOINT_HEADER: &str = "ewm-lab-checkpoint v1";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("manifest"))
}

pub fn save_checkpoint(store: &ParamStore, stem: &Path) -> Result<()> {
    let (bin, manifest) = paths(stem);
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    let mut text = String::from(CHECKPOINT_HEADER);
    text.push('\n');
    let mut offset = 0;
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let n = p.value.len();
        writeln!(text, "{}\t{}\t{}\t{}", p.name, dims.join(","), offset, n).expect("string write");
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += n;
    }
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(())
}

/// Load values into an already-constructed store with the same layout.
pub fn load_checkpoint(store: &mut ParamStore, stem: &Path) -> Result<()> {
    let (bin, manifest) = paths(stem);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(CHECKPOINT_HEADER) => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported header {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut seen = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dims, offset, count] = fields[..] else {
            return Err(Error::Checkpoint(format!("malformed line `{line}`")));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad number `{s}` in `{line}`")))
        };
        let shape = dims.split(',').map(parse).collect::<Result<Vec<_>>>()?;
        let (offset, count) = (parse(offset)?, parse(count)?);
        let id = store.id(name)?;
        let p = store.get_mut(id);
        if p.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?}, model expects {:?}",
                p.value.shape()
            )));
        }
        let bytes = blob
            .get(offset * 8..(offset + count) * 8)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: blob too short")))?;
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {seen} parameters, model has {}",
            store.len()
        )));
    }
    Ok(())
}
