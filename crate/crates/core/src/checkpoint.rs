//! Versioned binary checkpoint: magic, format version, config hash, epoch,
//! seed, then named parameter blobs and Adam moments as little-endian f32.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"RSFC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    /// Epochs completed when the checkpoint was written.
    pub epoch: u64,
    pub seed: u64,
    pub adam_step: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn capture(
        store: &ParamStore<f32>,
        adam: &AdamState,
        config_hash: [u8; 32],
        epoch: u64,
        seed: u64,
    ) -> Self {
        Checkpoint {
            config_hash,
            epoch,
            seed,
            adam_step: adam.step,
            params: store
                .entries()
                .map(|(_, e)| {
                    (
                        e.name.clone(),
                        e.tensor.shape().to_vec(),
                        e.tensor.data().to_vec(),
                    )
                })
                .collect(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    /// Restores parameter values and optimizer state into an initialized
    /// model of the same architecture.
    pub fn restore(&self, store: &mut ParamStore<f32>, adam: &mut AdamState) -> Result<()> {
        let values: HashMap<String, Tensor<f32>> = self
            .params
            .iter()
            .map(|(name, shape, data)| {
                Tensor::new(shape.clone(), data.clone()).map(|t| (name.clone(), t))
            })
            .collect::<Result<_>>()?;
        store.load_values(&values)?;
        if self.adam_m.len() != adam.m.len() || self.adam_v.len() != adam.v.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match the parameter registry".into(),
            ));
        }
        adam.step = self.adam_step;
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config_hash);
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.adam_step.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for blob in self.adam_m.iter().chain(self.adam_v.iter()) {
            for v in blob {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic bytes",
                path.display()
            )));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(cur.take(32)?);
        let epoch = cur.u64()?;
        let seed = cur.u64()?;
        let adam_step = cur.u64()?;
        let n = cur.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            params.push((name, shape, cur.f32s(numel)?));
        }
        let mut adam_m = Vec::with_capacity(n);
        for (_, shape, _) in &params {
            adam_m.push(cur.f32s(shape.iter().product())?);
        }
        let mut adam_v = Vec::with_capacity(n);
        for (_, shape, _) in &params {
            adam_v.push(cur.f32s(shape.iter().product())?);
        }
        if cur.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config_hash,
            epoch,
            seed,
            adam_step,
            params,
            adam_m,
            adam_v,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("a.w", Tensor::full(&[2, 3], 1.25), true);
        store.register("a.b", Tensor::full(&[3], -0.5), false);
        let mut adam = AdamState::new(&store);
        adam.step = 17;
        adam.m[0][1] = 0.125;
        let ck = Checkpoint::capture(&store, &adam, [7u8; 32], 4, 99);
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.epoch, 4);
        assert_eq!(back.seed, 99);
        assert_eq!(back.adam_step, 17);
        assert_eq!(back.config_hash, [7u8; 32]);
        assert_eq!(back.params, ck.params);
        assert_eq!(back.adam_m, ck.adam_m);

        let mut store2: ParamStore<f32> = ParamStore::new();
        store2.register("a.w", Tensor::zeros(&[2, 3]), true);
        store2.register("a.b", Tensor::zeros(&[3]), false);
        let mut adam2 = AdamState::new(&store2);
        back.restore(&mut store2, &mut adam2).unwrap();
        assert_eq!(store2.get(store2.id_by_name("a.w").unwrap()).data(), &[1.25; 6]);
        assert_eq!(adam2.step, 17);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
