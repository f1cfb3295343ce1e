//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DIPNCKPT"
//! version      u32
//! fingerprint  u32 length + UTF-8
//! step         u64
//! rng          32-byte seed, u64 stream, u128 word position
//! params       u32 count, then per entry: name, rank u32, dims u32*, f32 data
//! stats        u32 count, then per entry: name, channels u32, updates u64, f32 mean, f32 var
//! optimizers   u32 count, then per entry: name, step u64, u32 count,
//!              then per moment entry: name, first moment blob, second moment blob
//! config       u32 length + UTF-8
//! crc32        u32 over every preceding byte
//! ```
//!
//! A name is a u32 length followed by UTF-8 bytes; a blob is the rank/dims
//! header plus f32 data as in `params`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::RunningStats;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIPNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    /// First and second moments per parameter name.
    pub moments: IndexMap<String, (Tensor<f32>, Tensor<f32>)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub step: u64,
    pub rng: RngState,
    pub params: IndexMap<String, Tensor<f32>>,
    pub stats: IndexMap<String, RunningStats<f32>>,
    pub optimizers: IndexMap<String, OptimizerSnapshot>,
    /// Resolved run configuration, `key = value` lines.
    pub config: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn blob(&mut self, t: &Tensor<f32>) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.floats(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            return Err(Error::CorruptCheckpoint(format!("implausible length {n}")));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid UTF-8".into()))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn blob(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::CorruptCheckpoint(format!("rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.len()?);
        }
        let n: usize = dims.iter().product();
        let data = self.floats(n)?;
        Tensor::new(&dims, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.fingerprint);
        w.u64(self.step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.blob(t);
        }
        w.u32(self.stats.len() as u32);
        for (name, s) in &self.stats {
            w.str(name);
            w.u32(s.mean.len() as u32);
            w.u64(s.updates);
            w.floats(&s.mean);
            w.floats(&s.var);
        }
        w.u32(self.optimizers.len() as u32);
        for (name, o) in &self.optimizers {
            w.str(name);
            w.u64(o.step);
            w.u32(o.moments.len() as u32);
            for (p, (m, v)) in &o.moments {
                w.str(p);
                w.blob(m);
                w.blob(v);
            }
        }
        w.str(&self.config);
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 8 || &buf[..8] != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::CorruptCheckpoint("CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let fingerprint = r.str()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut params = IndexMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            params.insert(name, r.blob()?);
        }
        let mut stats = IndexMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let c = r.len()?;
            let updates = r.u64()?;
            let mean = r.floats(c)?;
            let var = r.floats(c)?;
            stats.insert(name, RunningStats { mean, var, updates });
        }
        let mut optimizers = IndexMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let ostep = r.u64()?;
            let mut moments = IndexMap::new();
            for _ in 0..r.u32()? {
                let p = r.str()?;
                let m = r.blob()?;
                let v = r.blob()?;
                moments.insert(p, (m, v));
            }
            optimizers.insert(name, OptimizerSnapshot { step: ostep, moments });
        }
        let config = r.str()?;
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            fingerprint,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
            stats,
            optimizers,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and rejects a file whose fingerprint differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                found: c.fingerprint,
                expected: expected.to_string(),
            });
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint {
            fingerprint: "transform(c=4)".into(),
            step: 17,
            config: "seed = 3\n".into(),
            ..Default::default()
        };
        c.rng.seed[3] = 9;
        c.rng.word_pos = 123456789012345678901234;
        c.params
            .insert("a.weight".into(), Tensor::new(&[2, 1, 1, 2], vec![1.5, -2.0, 0.25, 3.0]).unwrap());
        c.params.insert("a.bias".into(), Tensor::new(&[2], vec![0.0, 1e-7]).unwrap());
        c.stats.insert(
            "bn".into(),
            RunningStats {
                mean: vec![0.1, 0.2],
                var: vec![1.0, 2.0],
                updates: 4,
            },
        );
        let mut o = OptimizerSnapshot {
            step: 17,
            ..Default::default()
        };
        o.moments.insert(
            "a.bias".into(),
            (
                Tensor::new(&[2], vec![0.5, 0.5]).unwrap(),
                Tensor::new(&[2], vec![0.1, 0.2]).unwrap(),
            ),
        );
        c.optimizers.insert("gen".into(), o);
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = sample().to_bytes();
        for i in 8..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(Checkpoint::from_bytes(&b).is_err(), "byte {i}");
        }
    }

    #[test]
    fn version_and_fingerprint_are_checked() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 2;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 2, .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        sample().save(&p).unwrap();
        assert!(Checkpoint::load_expecting(&p, "transform(c=4)").is_ok());
        assert!(matches!(
            Checkpoint::load_expecting(&p, "transform(c=8)"),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..5]).is_err());
    }
}
