//! Binary checkpoint: magic `CVQC`, version, config text, epoch, RNG state,
//! importance vector and named parameter tensors. Integers are big-endian,
//! floats are little-endian `f64`.

use std::path::Path;

use crate::config::Config;
use crate::controller::ChannelImportance;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CVQC";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Completed training epochs.
    pub epoch: u64,
    pub rng_seed: u64,
    /// ChaCha word position after the last completed epoch.
    pub rng_word_pos: u128,
    pub importance: Vec<f64>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        self.config.model.validate()?;
        let c = self.config.model.codec.latent_channels;
        if self.importance.len() != c {
            return Err(Error::Incompatible(format!(
                "importance of {} channels for {c} latent channels",
                self.importance.len()
            )));
        }
        Ok(Model {
            config: self.config.model.clone(),
            params: self.params.clone(),
            importance: ChannelImportance::new(self.importance.clone(), self.config.model.importance)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_be_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.extend_from_slice(&self.rng_seed.to_be_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_be_bytes());
        out.extend_from_slice(&(self.importance.len() as u32).to_be_bytes());
        for w in &self.importance {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_be_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_be_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptStream("not a checkpoint (bad magic)".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Incompatible(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::CorruptStream("config is not UTF-8".into()))?;
        let config = Config::parse(text)?;
        let epoch = u64::from_be_bytes(r.array()?);
        let rng_seed = u64::from_be_bytes(r.array()?);
        let rng_word_pos = u128::from_be_bytes(r.array()?);
        let n = r.u32()? as usize;
        let importance = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = u16::from_be_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptStream("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            if count > (bytes.len() - r.pos) / 8 {
                return Err(Error::CorruptStream(format!("parameter {name} overruns the file")));
            }
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptStream("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            epoch,
            rng_seed,
            rng_word_pos,
            importance,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptStream("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let config = Config::toy();
        let model = Model::init(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        Checkpoint {
            config,
            epoch: 7,
            rng_seed: 3,
            rng_word_pos: 12345,
            importance: model.importance.weights().to_vec(),
            params: model.params,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cvqc");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Incompatible(_))));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn model_requires_matching_importance() {
        let mut ck = sample();
        assert!(ck.model().is_ok());
        ck.importance.pop();
        assert!(ck.model().is_err());
    }
}
