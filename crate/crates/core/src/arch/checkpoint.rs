//! `SCNK` checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "SCNK" | version | spec_len | spec JSON (spec_len bytes) | record_count |
//!   record_count x ( name_len | name UTF-8 | n | c | h | w | n*c*h*w f32 LE )
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::model::SCNetModel;
use super::spec::ModelSpec;

pub const MAGIC: &[u8; 4] = b"SCNK";
pub const VERSION: u32 = 1;

pub fn encode(model: &SCNetModel<f32>) -> Vec<u8> {
    let spec = serde_json::to_vec(model.spec()).expect("spec serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Rebuilds the model described by the embedded spec and fills every
/// parameter. Missing, extra, duplicated or mis-shaped records are errors.
pub fn decode(bytes: &[u8]) -> Result<SCNetModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an SCNK file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = r.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad model spec: {e}")))?;
    let mut model = SCNetModel::<f32>::new(spec)?;
    let expected = model.params().len();
    let records = r.u32()? as usize;
    let mut seen = std::collections::HashSet::new();
    for _ in 0..records {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_owned();
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let shape = Shape::from_dims(dims);
        let payload = r.take(4 * shape.len())?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        model.params_mut().assign(&name, t)?;
    }
    if seen.len() != expected {
        let missing: Vec<&str> = model
            .params()
            .names()
            .filter(|n| !seen.contains(*n))
            .collect();
        return Err(Error::Checkpoint(format!(
            "missing parameters: {}",
            missing.join(", ")
        )));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &SCNetModel<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SCNetModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
