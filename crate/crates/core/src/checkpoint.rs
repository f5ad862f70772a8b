//! Versioned binary checkpoints for an ensemble and its label confusion model.
//!
//! Layout (integers are little-endian `u32`, floats little-endian `f64`):
//!
//! ```text
//! "CLDL" | version | tag_len | tag bytes | C | d | N
//! N x member blob
//! LCM blob (param count 0 when there is no LCM)
//! ```
//!
//! A blob is a parameter count followed by, per parameter: name length, name
//! bytes, rank, extents, raw data. The LCM blob ends with a rank-0 parameter
//! named `gamma`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lcm::LabelConfusionModel;
use crate::models::{Architecture, Ensemble, Param, SubModel};
use crate::tensor::Array;

pub const MAGIC: &[u8; 4] = b"CLDL";
pub const VERSION: u32 = 1;
const GAMMA: &str = "gamma";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub ensemble: Ensemble,
    pub lcm: Option<LabelConfusionModel>,
}

impl Checkpoint {
    pub fn new(ensemble: Ensemble, lcm: Option<LabelConfusionModel>) -> Result<Self> {
        if let Some(l) = &lcm {
            if l.classes() != ensemble.classes() || l.repr_dim() != ensemble.repr_dim() {
                return Err(Error::InvalidArgument(
                    "label confusion model does not match the ensemble's C and d".into(),
                ));
            }
        }
        Ok(Checkpoint { ensemble, lcm })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.out.extend_from_slice(MAGIC);
        w.u32(VERSION)?;
        w.str(self.ensemble.arch().tag())?;
        w.u32_of(self.ensemble.classes())?;
        w.u32_of(self.ensemble.repr_dim())?;
        w.u32_of(self.ensemble.len())?;
        for m in self.ensemble.members() {
            w.blob(&m.params().iter().collect::<Vec<_>>())?;
        }
        match &self.lcm {
            Some(l) => {
                let gamma = Param::new(GAMMA, Array::scalar(l.gamma()));
                w.blob(&l.params().iter().chain([&gamma]).collect::<Vec<_>>())?;
            }
            None => w.u32(0)?,
        }
        Ok(w.out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing CLDL magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!(
                "version {version} is not supported (expected {VERSION})"
            )));
        }
        let arch: Architecture = r.string()?.parse().map_err(|e: Error| bad(e.to_string()))?;
        let (classes, repr_dim, n) = (r.usize()?, r.usize()?, r.usize()?);
        let members = (0..n)
            .map(|_| SubModel::from_params(arch, r.blob()?).map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let ensemble = Ensemble::new(members).map_err(|e| bad(e.to_string()))?;
        if ensemble.classes() != classes || ensemble.repr_dim() != repr_dim {
            return Err(bad("header C or d disagrees with member parameters"));
        }
        let mut lcm_params = r.blob()?;
        let lcm = if lcm_params.is_empty() {
            None
        } else {
            let gamma = lcm_params
                .pop()
                .filter(|p| p.name == GAMMA && p.value.rank() == 0);
            let gamma = gamma.ok_or_else(|| bad("LCM blob does not end with gamma"))?;
            Some(
                LabelConfusionModel::from_params(lcm_params, gamma.value.item())
                    .map_err(|e| bad(e.to_string()))?,
            )
        };
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Checkpoint::new(ensemble, lcm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u32_of(&mut self, v: usize) -> Result<()> {
        self.u32(u32::try_from(v).map_err(|_| bad(format!("{v} does not fit in u32")))?)
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u32_of(s.len())?;
        self.out.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn blob(&mut self, params: &[&Param]) -> Result<()> {
        self.u32_of(params.len())?;
        for p in params {
            self.str(&p.name)?;
            self.u32_of(p.value.rank())?;
            for &e in p.value.shape() {
                self.u32_of(e)?;
            }
            for v in p.value.data() {
                self.out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }

    fn blob(&mut self) -> Result<Vec<Param>> {
        let count = self.usize()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.usize()?;
            let shape = (0..rank)
                .map(|_| self.usize())
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| bad("parameter size overflows"))?;
            let raw = self.take(
                n.checked_mul(8)
                    .ok_or_else(|| bad("parameter size overflows"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Param::new(
                name,
                Array::new(shape, data).map_err(|e| bad(e.to_string()))?,
            ));
        }
        Ok(params)
    }
}
