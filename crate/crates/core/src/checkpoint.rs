//! Binary checkpoints.
//!
//! Layout, little-endian: magic `SCVE`, `u32` version, the run config as a
//! length-prefixed UTF-8 string and its hash likewise, `u64` training step,
//! `u64` skipped-update counts for the AR and NAR optimizers, `u32` record
//! count, then records of (`u32` name length, name, `u32` rows, `u32` cols,
//! `f32` payload). Records cover both parameter stores and both sets of
//! Adam moments (`opt.<ar|nar>.<m|v>/<parameter>`).

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::train::{Models, Trainer};
use crate::nn::optim::Adam;
use crate::nn::{ParamStore, Tensor2};

pub const MAGIC: &[u8; 4] = b"SCVE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: String,
    pub step: u64,
    pub ar_skipped: u64,
    pub nar_skipped: u64,
    pub records: Vec<(String, Tensor2<f32>)>,
}

fn params(ps: &ParamStore<f32>, out: &mut Vec<(String, Tensor2<f32>)>) {
    out.extend(ps.iter().map(|(n, t)| (n.to_string(), t.clone())));
}

fn moments(tag: &str, ps: &ParamStore<f32>, opt: &Adam<f32>, out: &mut Vec<(String, Tensor2<f32>)>) {
    for ((name, _), (m, v)) in ps.iter().zip(opt.m.iter().zip(&opt.v)) {
        out.push((format!("opt.{tag}.m/{name}"), m.clone()));
        out.push((format!("opt.{tag}.v/{name}"), v.clone()));
    }
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer, cfg: &RunConfig) -> Self {
        let mut records = Vec::new();
        params(&tr.models.ar_ps, &mut records);
        params(&tr.models.nar_ps, &mut records);
        moments("ar", &tr.models.ar_ps, &tr.ar_opt, &mut records);
        moments("nar", &tr.models.nar_ps, &tr.nar_opt, &mut records);
        Self {
            config_text: cfg.to_text(),
            config_hash: cfg.hash(),
            step: tr.step as u64,
            ar_skipped: tr.ar_opt.skipped as u64,
            nar_skipped: tr.nar_opt.skipped as u64,
            records,
        }
    }

    /// The run config stored in the checkpoint, checked against its hash.
    pub fn config(&self) -> Result<RunConfig> {
        let cfg = RunConfig::parse(&self.config_text)?;
        if cfg.hash() != self.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: cfg.hash(),
                found: self.config_hash.clone(),
            });
        }
        Ok(cfg)
    }

    fn find(&self, name: &str) -> Result<&Tensor2<f32>> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks {name}")))
    }

    fn fill(&self, ps: &mut ParamStore<f32>) -> Result<()> {
        let names: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            ps.assign(&n, self.find(&n)?.clone())?;
        }
        Ok(())
    }

    fn fill_moments(&self, tag: &str, ps: &ParamStore<f32>, opt: &mut Adam<f32>) -> Result<()> {
        for (i, (name, _)) in ps.iter().enumerate() {
            opt.m[i] = self.find(&format!("opt.{tag}.m/{name}"))?.clone();
            opt.v[i] = self.find(&format!("opt.{tag}.v/{name}"))?.clone();
        }
        Ok(())
    }

    /// Parameters only, for inference.
    pub fn models(&self) -> Result<(RunConfig, Models<f32>)> {
        let cfg = self.config()?;
        let mut m = Models::new(&cfg.model, cfg.seed)?;
        self.fill(&mut m.ar_ps)?;
        self.fill(&mut m.nar_ps)?;
        Ok((cfg, m))
    }

    /// Full training state; `cfg` must hash to the stored config hash.
    pub fn restore(&self, cfg: &RunConfig) -> Result<Trainer> {
        if cfg.hash() != self.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: cfg.hash(),
                found: self.config_hash.clone(),
            });
        }
        let mut tr = Trainer::new(&cfg.model, cfg.adam.clone(), cfg.sampling.clone(), cfg.seed)?;
        self.fill(&mut tr.models.ar_ps)?;
        self.fill(&mut tr.models.nar_ps)?;
        self.fill_moments("ar", &tr.models.ar_ps, &mut tr.ar_opt)?;
        self.fill_moments("nar", &tr.models.nar_ps, &mut tr.nar_opt)?;
        tr.step = self.step as usize;
        tr.ar_opt.step = tr.step;
        tr.nar_opt.step = tr.step;
        tr.ar_opt.skipped = self.ar_skipped as usize;
        tr.nar_opt.skipped = self.nar_skipped as usize;
        Ok(tr)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        for s in [&self.config_text, &self.config_hash] {
            b.extend_from_slice(&(s.len() as u32).to_le_bytes());
            b.extend_from_slice(s.as_bytes());
        }
        for v in [self.step, self.ar_skipped, self.nar_skipped] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            b.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let config_text = r.string()?;
        let config_hash = r.string()?;
        let step = r.u64()?;
        let ar_skipped = r.u64()?;
        let nar_skipped = r.u64()?;
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r
                .take(rows * cols * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push((name, Tensor2::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Self {
            config_text,
            config_hash,
            step,
            ar_skipped,
            nar_skipped,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        // Write then rename, so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, "truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "bad UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model = ModelConfig {
            d_model: 8,
            d_style: 4,
            style_tokens: 3,
            style_heads: 2,
            heads: 2,
            ff_hidden: 8,
            ar_blocks: 1,
            nar_blocks: 1,
            codebook_size: 6,
        };
        cfg
    }

    #[test]
    fn bytes_roundtrip_bit_exact() {
        let cfg = tiny_cfg();
        let mut tr = Trainer::new(&cfg.model, cfg.adam.clone(), cfg.sampling.clone(), 3).unwrap();
        tr.step = 17;
        tr.ar_opt.m[0].data_mut()[0] = f32::from_bits(0x3f80_0001);
        let ck = Checkpoint::from_trainer(&tr, &cfg);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore(&cfg).unwrap();
        assert_eq!(restored.step, 17);
        for ((_, a), (_, b)) in restored.models.nar_ps.iter().zip(tr.models.nar_ps.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(restored.ar_opt.m[0].data()[0].to_bits(), 0x3f80_0001);
    }

    #[test]
    fn hash_mismatch_and_corruption() {
        let cfg = tiny_cfg();
        let tr = Trainer::new(&cfg.model, cfg.adam.clone(), cfg.sampling.clone(), 3).unwrap();
        let ck = Checkpoint::from_trainer(&tr, &cfg);
        let mut other = cfg.clone();
        other.adam.lr = 5e-4;
        assert!(matches!(ck.restore(&other), Err(Error::ConfigHashMismatch { .. })));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, Path::new("x")).is_err());
    }
}
