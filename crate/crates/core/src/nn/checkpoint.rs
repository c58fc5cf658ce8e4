//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"LRLW"  u32 version  u32 entry_count
//! entry:   u32 name_len  name (utf-8)  u32 ndim  u64 dim[ndim]  f64 value[prod(dim)] (row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LRLW";
pub const VERSION: u32 = 1;

const MOMENT1_PREFIX: &str = "adam.m/";
const MOMENT2_PREFIX: &str = "adam.v/";
const ADAM_STEPS: &str = "adam.steps";

/// A decoded checkpoint: named matrices in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.push((name.into(), value));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(name, Matrix::from_elem((1, 1), value));
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).filter(|m| m.len() == 1).map(|m| m[[0, 0]])
    }

    /// Weights of `ps` under `prefix`, plus Adam state when `with_optimizer`.
    pub fn add_store(&mut self, prefix: &str, ps: &ParamStore, with_optimizer: bool) {
        for id in ps.ids() {
            self.push(format!("{prefix}{}", ps.name(id)), ps.value(id).clone());
        }
        if with_optimizer {
            for id in ps.ids() {
                let (m, v) = ps.moments(id);
                self.push(format!("{prefix}{MOMENT1_PREFIX}{}", ps.name(id)), m.clone());
                self.push(format!("{prefix}{MOMENT2_PREFIX}{}", ps.name(id)), v.clone());
            }
            self.push_scalar(format!("{prefix}{ADAM_STEPS}"), ps.adam_steps() as f64);
        }
    }

    /// Overwrite the weights of `ps` from entries under `prefix`; every
    /// parameter must be present with a matching shape. Adam state is
    /// restored if present.
    pub fn load_store(&self, prefix: &str, ps: &mut ParamStore) -> Result<()> {
        let steps = self.scalar(&format!("{prefix}{ADAM_STEPS}"));
        for id in ps.ids().collect::<Vec<_>>() {
            let name = ps.name(id).to_owned();
            let key = format!("{prefix}{name}");
            let value = self
                .get(&key)
                .ok_or_else(|| Error::Shape(format!("checkpoint has no entry {key}")))?;
            if value.shape() != ps.value(id).shape() {
                return Err(Error::Shape(format!(
                    "{key}: checkpoint shape {:?}, network expects {:?}",
                    value.shape(),
                    ps.value(id).shape()
                )));
            }
            ps.value_mut(id).assign(value);
            if let Some(steps) = steps {
                let m = self.get(&format!("{prefix}{MOMENT1_PREFIX}{name}"));
                let v = self.get(&format!("{prefix}{MOMENT2_PREFIX}{name}"));
                if let (Some(m), Some(v)) = (m, v) {
                    ps.restore_moments(id, m.clone(), v.clone(), steps as u64)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, m) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&2u32.to_le_bytes())?;
            for &d in m.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| format!("reading header: {e}"))?;
        if &magic != MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = read_u32(&mut r)?;
        let mut out = Checkpoint::default();
        for k in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| format!("entry {k} name: {e}"))?;
            let name = String::from_utf8(name).map_err(|_| format!("entry {k}: name is not utf-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|e| format!("{name} dims: {e}"))?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(format!("{name}: unsupported rank {ndim}")),
            };
            let total = rows
                .checked_mul(cols)
                .filter(|t| *t <= 1 << 32)
                .ok_or_else(|| format!("{name}: implausible shape {dims:?}"))?;
            let mut data = Vec::with_capacity(total);
            let mut b = [0u8; 8];
            for _ in 0..total {
                r.read_exact(&mut b).map_err(|e| format!("{name} data: {e}"))?;
                data.push(f64::from_le_bytes(b));
            }
            let m = Matrix::from_shape_vec((rows, cols), data).map_err(|e| format!("{name}: {e}"))?;
            out.entries.push((name, m));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Checkpoint {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        Self::read_from(BufReader::new(file)).map_err(|reason| Error::Checkpoint {
            path: path.to_owned(),
            reason,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| format!("truncated: {e}"))?;
    Ok(u32::from_le_bytes(b))
}
