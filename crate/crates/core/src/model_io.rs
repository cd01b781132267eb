//! Versioned binary container for [`FactorModel`].
//!
//! Layout, all integers and floats little-endian:
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0  | 8 | magic `b"FGTMODEL"` |
//! | 8  | 4 | format version (u32, currently 1) |
//! | 12 | 8 | users m (u64) |
//! | 20 | 8 | items n (u64) |
//! | 28 | 8 | rank k (u64) |
//! | 36 | 8 | lambda (f64) |
//! | 44 | 1 | confidence scheme: 0 linear, 1 binary |
//! | 45 | 8 | scheme parameter: alpha (linear) or low value (binary) (f64) |
//! | 53 | 8 | passes run (u64) |
//! | 61 | 8 | init seed (u64) |
//! | 69 | 8·m·k | user factors, row-major (f64) |
//! | .. | 8·n·k | item factors, row-major (f64) |

use std::fs;
use std::path::Path;

use crate::als::{ConfidenceScheme, FactorModel, Factors};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FGTMODEL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 69;

pub fn encode(model: &FactorModel) -> Vec<u8> {
    let k = model.k();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * k * (model.num_users() + model.num_items()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.num_users() as u64).to_le_bytes());
    out.extend_from_slice(&(model.num_items() as u64).to_le_bytes());
    out.extend_from_slice(&(k as u64).to_le_bytes());
    out.extend_from_slice(&model.lambda.to_le_bytes());
    let (tag, param) = match model.scheme {
        ConfidenceScheme::Linear { alpha } => (0u8, alpha),
        ConfidenceScheme::Binary { low } => (1u8, low),
    };
    out.push(tag);
    out.extend_from_slice(&param.to_le_bytes());
    out.extend_from_slice(&(model.passes_run as u64).to_le_bytes());
    out.extend_from_slice(&model.init_seed.to_le_bytes());
    for v in model.users.as_slice().iter().chain(model.items.as_slice()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated container at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format(format!("{what} does not fit in usize")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<FactorModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let m = r.usize("user count")?;
    let n = r.usize("item count")?;
    let k = r.usize("rank")?;
    let lambda = r.f64()?;
    let tag = r.take(1)?[0];
    let param = r.f64()?;
    let scheme = match tag {
        0 => ConfidenceScheme::Linear { alpha: param },
        1 => ConfidenceScheme::Binary { low: param },
        t => return Err(Error::Format(format!("unknown confidence scheme tag {t}"))),
    };
    let passes_run = r.usize("passes")?;
    let init_seed = r.u64()?;
    let expected = m
        .checked_add(n)
        .and_then(|rows| rows.checked_mul(k))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("factor sizes overflow".into()))?;
    if bytes.len() - r.pos != expected {
        return Err(Error::Format(format!(
            "expected {expected} factor bytes, found {}",
            bytes.len() - r.pos
        )));
    }
    let mut read_factors = |rows: usize| -> Result<Factors> {
        let data = (0..rows * k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Factors::from_vec(rows, k, data)
    };
    let users = read_factors(m)?;
    let items = read_factors(n)?;
    Ok(FactorModel {
        users,
        items,
        lambda,
        scheme,
        passes_run,
        init_seed,
    })
}

pub fn save(model: &FactorModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<FactorModel> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
