//! Named-tensor container: a UTF-8 manifest plus one blob of little-endian `f32`.
//!
//! ```text
//! <dir>/manifest.tsv   #lyricfusion-tensors v1
//!                      name <TAB> f32 <TAB> 128x257 <TAB> byte-offset
//! <dir>/tensors.bin    concatenated little-endian f32 values
//! ```
//! Scalars are written with shape `scalar`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const BLOB_FILE: &str = "tensors.bin";
const HEADER: &str = "#lyricfusion-tensors v1";

pub fn write_container<'a>(dir: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    let mut blob = BufWriter::new(fs::File::create(dir.join(BLOB_FILE))?);
    let mut offset = 0usize;
    for (name, t) in entries {
        if name.is_empty() || name.contains(['\t', '\n', '\r']) {
            return Err(Error::Config(format!("invalid tensor name {name:?}")));
        }
        let shape = if t.shape().is_empty() {
            "scalar".to_string()
        } else {
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        };
        manifest.push_str(&format!("{name}\tf32\t{shape}\t{offset}\n"));
        for v in t.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += t.len() * 4;
    }
    blob.flush()?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn read_container(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingInput(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let where_ = manifest_path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: where_.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => return Err(parse_err(1, "missing or unsupported header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        if fields[1] != "f32" {
            return Err(parse_err(i + 1, format!("unsupported dtype {}", fields[1])));
        }
        let shape: Vec<usize> = if fields[2] == "scalar" {
            Vec::new()
        } else {
            fields[2]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(i + 1, format!("bad shape: {e}")))?
        };
        let offset: usize = fields[3]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("bad offset: {e}")))?;
        let n: usize = shape.iter().product();
        let end = offset + n * 4;
        if end > blob.len() {
            return Err(parse_err(i + 1, "tensor extends past end of blob".into()));
        }
        let data = blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((fields[0].to_string(), Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Writes every entry of `store` (trainable and buffers) as `f32`.
pub fn save_params<T: Real>(store: &ParamStore<T>, dir: &Path) -> Result<()> {
    let converted: Vec<(String, Tensor<f32>)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.cast::<f32>()))
        .collect();
    write_container(dir, converted.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Overwrites the entries of `store` from a container. Every store entry must be present
/// with a matching shape.
pub fn load_params<T: Real>(store: &mut ParamStore<T>, dir: &Path) -> Result<()> {
    let entries = read_container(dir)?;
    let mut found = vec![false; store.len()];
    for (name, t) in entries {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::State(format!("checkpoint has unknown tensor `{name}`")))?;
        store.set(id, t.cast())?;
        found[id.index()] = true;
    }
    if let Some(missing) = found.iter().position(|f| !f) {
        let name = store.iter().nth(missing).map(|(_, p)| p.name.clone()).unwrap_or_default();
        return Err(Error::State(format!("checkpoint is missing tensor `{name}`")));
    }
    Ok(())
}
