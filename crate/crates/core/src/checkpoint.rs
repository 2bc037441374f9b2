//! Flat binary tensor archive.
//!
//! Layout: a text manifest (one line per tensor: name, dtype, shape, byte
//! offset into the payload, element count), a `---` separator line, then the
//! raw little-endian float payloads in manifest order. Saving the result of a
//! load reproduces the archive byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, REAL_DTYPE};

const MAGIC: &str = "TENSORS1";

pub struct Archive {
    /// (name, shape, values) in insertion order.
    pub entries: Vec<(String, Vec<usize>, Vec<Real>)>,
}

impl Default for Archive {
    fn default() -> Self {
        Self::new()
    }
}

impl Archive {
    pub fn new() -> Self {
        Archive { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: Vec<Real>) {
        self.entries.push((name.to_string(), shape.to_vec(), values));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[Real])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn from_params(params: &ParamSet) -> Self {
        let mut a = Archive::new();
        for (_, e) in params.iter() {
            a.push(&e.name, &e.shape, e.value.clone());
        }
        a
    }

    /// Writes parameter values back into `params`, validating that every
    /// parameter is present with the expected shape.
    pub fn load_into(&self, params: &mut ParamSet) -> Result<()> {
        for id in params.ids() {
            let name = params.name(id).to_string();
            let want = params.shape(id).to_vec();
            let (shape, values) = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if shape != want.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    shape, want
                )));
            }
            params.set_value(id, values.to_vec())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        manifest.push_str(&format!("{}\n", self.entries.len()));
        let mut offset = 0usize;
        for (name, shape, values) in &self.entries {
            let dims = if shape.is_empty() {
                "scalar".to_string()
            } else {
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            manifest.push_str(&format!("{name} {REAL_DTYPE} {dims} {offset} {}\n", values.len()));
            offset += values.len() * std::mem::size_of::<Real>();
        }
        manifest.push_str("---\n");

        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(manifest.as_bytes())?;
        for (_, _, values) in &self.entries {
            let mut bytes = Vec::with_capacity(values.len() * std::mem::size_of::<Real>());
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path)?;
        let sep = b"---\n";
        let head_end = find_subslice(&raw, sep)
            .ok_or_else(|| Error::Checkpoint("missing manifest separator".into()))?;
        let manifest = std::str::from_utf8(&raw[..head_end])
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let payload = &raw[head_end + sep.len()..];

        let mut lines = manifest.lines();
        let magic = lines.next().ok_or_else(|| Error::Checkpoint("empty archive".into()))?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic `{magic}`")));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| Error::Checkpoint("bad tensor count".into()))?;

        let mut archive = Archive::new();
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 5 {
                return Err(Error::Checkpoint(format!("bad manifest line `{line}`")));
            }
            let (name, dtype, dims, off_s, len_s) =
                (fields[0], fields[1], fields[2], fields[3], fields[4]);
            if dtype != REAL_DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has dtype {dtype}, this build uses {REAL_DTYPE}"
                )));
            }
            let shape: Vec<usize> = if dims == "scalar" {
                vec![]
            } else {
                dims.split('x')
                    .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad dims `{dims}`"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = off_s.parse().map_err(|_| Error::Checkpoint("bad offset".into()))?;
            let len: usize = len_s.parse().map_err(|_| Error::Checkpoint("bad length".into()))?;
            let width = std::mem::size_of::<Real>();
            let end = offset + len * width;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` payload out of bounds")));
            }
            let mut values = Vec::with_capacity(len);
            for i in 0..len {
                let b = &payload[offset + i * width..offset + (i + 1) * width];
                values.push(Real::from_le_bytes(b.try_into().unwrap()));
            }
            let expect: usize = shape.iter().product();
            if expect != len {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: shape {:?} vs {len} elements",
                    shape
                )));
            }
            archive.push(name, &shape, values);
        }
        Ok(archive)
    }
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");

        let mut a = Archive::new();
        a.push("enc/w", &[2, 3], vec![1.0, -2.0, 3.5, 0.25, -0.125, 9.75]);
        a.push("opt/t", &[1], vec![42.0]);
        a.save(&p1).unwrap();

        let b = Archive::load(&p1).unwrap();
        b.save(&p2).unwrap();

        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn load_validates_shapes_against_model() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let mut a = Archive::new();
        a.push("w", &[2], vec![1.0, 2.0]);
        a.save(&p).unwrap();

        let mut ps = ParamSet::new();
        ps.add("w", &[3], vec![0.0; 3]).unwrap();
        let loaded = Archive::load(&p).unwrap();
        assert!(loaded.load_into(&mut ps).is_err());

        let mut ok = ParamSet::new();
        ok.add("w", &[2], vec![0.0; 2]).unwrap();
        loaded.load_into(&mut ok).unwrap();
        assert_eq!(ok.value(ok.id("w").unwrap()), &[1.0, 2.0]);
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        Archive::new().save(&p).unwrap();
        let mut ps = ParamSet::new();
        ps.add("w", &[1], vec![0.0]).unwrap();
        assert!(Archive::load(&p).unwrap().load_into(&mut ps).is_err());
    }
}
