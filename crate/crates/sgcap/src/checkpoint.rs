//! Binary checkpoint container shared by the captioner and the VSE network.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SGCK"  u32 version  u32 kind  u64 seed
//! u32 len + UTF-8 config snapshot (key = value text)
//! u32 min_count  u32 n_words  { u32 len + UTF-8 word }      vocabulary, index order
//! u32 n_params   { u32 len + UTF-8 name, u32 ndim, u64 dims… }
//! f64 payload in manifest order
//! ```

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgcap_core::features::Vocabulary;
use sgcap_core::vse::Vse;
use sgcap_core::{Captioner, ParamSet, Tensor};

use crate::config::RunConfig;
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"SGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Captioner,
    Vse,
}

impl ModelKind {
    fn tag(self) -> u32 {
        match self {
            ModelKind::Captioner => 0,
            ModelKind::Vse => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Captioner),
            1 => Some(ModelKind::Vse),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub seed: u64,
    pub config: String,
    pub vocab: Vocabulary,
    pub params: ParamSet,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            bail!("truncated at byte {} reading {what}", self.pos);
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into()?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into()?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec()).with_context(|| format!("{what} at byte {at} is not UTF-8"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.tag().to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.vocab.min_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab.words().len() as u32).to_le_bytes());
        for w in self.vocab.words() {
            put_str(&mut out, w);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
        }
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            bail!("not a checkpoint (bad magic)");
        }
        let version = r.u32("version")?;
        ensure!(version == VERSION, "unsupported checkpoint version {version}");
        let tag = r.u32("kind")?;
        let kind = ModelKind::from_tag(tag).with_context(|| format!("unknown model kind {tag}"))?;
        let seed = r.u64("seed")?;
        let config = r.string("config snapshot")?;
        let min_count = r.u32("vocabulary min_count")? as usize;
        let n_words = r.u32("vocabulary size")?;
        let words = (0..n_words).map(|_| r.string("vocabulary word")).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_tokens(words, min_count)?;
        let n_params = r.u32("parameter count")?;
        let mut manifest = Vec::new();
        for _ in 0..n_params {
            let name = r.string("parameter name")?;
            let ndim = r.u32("parameter rank")?;
            let shape = (0..ndim).map(|_| Ok(r.u64("parameter extent")? as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut params = ParamSet::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n, &name)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).with_context(|| format!("parameter {name}"))?;
            ensure!(params.find(&name).is_none(), "duplicate parameter {name}");
            params.add(name, t);
        }
        ensure!(r.pos == bytes.len(), "{} trailing bytes after payload", bytes.len() - r.pos);
        Ok(Checkpoint {
            kind,
            seed,
            config,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("{}: invalid checkpoint", path.display()))
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse_str(&self.config).context("checkpoint config snapshot")
    }

    pub fn captioner(cfg: &RunConfig, vocab: Vocabulary, model: &Captioner) -> Self {
        Checkpoint {
            kind: ModelKind::Captioner,
            seed: cfg.seed,
            config: cfg.to_text(),
            vocab,
            params: model.params.clone(),
        }
    }

    pub fn vse(cfg: &RunConfig, vocab: Vocabulary, model: &Vse) -> Self {
        Checkpoint {
            kind: ModelKind::Vse,
            seed: cfg.seed,
            config: cfg.to_text(),
            vocab,
            params: model.params.clone(),
        }
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        ensure!(self.kind == kind, "checkpoint holds a {:?} model, expected {kind:?}", self.kind);
        Ok(())
    }

    /// Rebuilds the captioner described by the snapshot and loads its weights.
    pub fn to_captioner(&self) -> Result<Captioner> {
        self.expect(ModelKind::Captioner)?;
        let cfg = self.run_config()?;
        let mut model = Captioner::new(cfg.model_config(self.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0))?;
        load_params(&mut model.params, &self.params)?;
        Ok(model)
    }

    pub fn to_vse(&self) -> Result<Vse> {
        self.expect(ModelKind::Vse)?;
        let cfg = self.run_config()?;
        let mut model = Vse::new(cfg.vse_config(self.vocab.len()), &mut ChaCha8Rng::seed_from_u64(0))?;
        load_params(&mut model.params, &self.params)?;
        Ok(model)
    }
}

/// Copies `from` into `into`; names, order and shapes must agree exactly.
fn load_params(into: &mut ParamSet, from: &ParamSet) -> Result<()> {
    ensure!(
        into.len() == from.len(),
        "checkpoint has {} parameters, model expects {}",
        from.len(),
        into.len()
    );
    for ((expected, _), (name, t)) in into.clone().iter().zip(from.iter()) {
        ensure!(expected == name, "parameter {name} found where {expected} was expected");
        into.set(name, t.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.add("w", Tensor::matrix(2, 2, vec![0.1, -1e-300, 3.5, f64::MIN_POSITIVE]).unwrap());
        params.add("b", Tensor::vector(vec![1.0 / 3.0]).unwrap());
        Checkpoint {
            kind: ModelKind::Vse,
            seed: 77,
            config: "seed = 77\n".into(),
            vocab: Vocabulary::from_tokens(["dog".to_string(), "cat".to_string()], 2).unwrap(),
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(format!("{:#}", Checkpoint::from_bytes(&bad).unwrap_err()).contains("kind"));
    }
}
