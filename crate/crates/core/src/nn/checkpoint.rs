//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TDSCKPT\0"
//! version  u32
//! schema   u64      schema hash of the dataset the model was trained on
//! rng      3 × u64  seed, next span, optimizer step
//! meta     u32 count, then (u32 len, utf-8 key, u32 len, utf-8 value)*
//! blobs    u32 count, then (u32 len, utf-8 name, u64 rows, u64 cols, rows·cols × f64)*
//! ```
//!
//! Round trips are bit-exact: floats are stored as their raw IEEE-754 bits.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::matrix::Matrix;
use super::param::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TDSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the counter-based RNG streams; enough to resume a run exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub next_span: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub schema_hash: u64,
    pub rng: RngState,
    pub meta: BTreeMap<String, String>,
    pub blobs: Vec<(String, Matrix)>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const ADAM_STEP: &str = "adam.step/";

impl Checkpoint {
    /// Captures parameter values and Adam moments from a store.
    pub fn from_store(
        store: &ParamStore,
        schema_hash: u64,
        rng: RngState,
        meta: BTreeMap<String, String>,
    ) -> Self {
        let mut blobs = Vec::with_capacity(store.len() * 4);
        for p in store.params() {
            blobs.push((p.name.clone(), p.value.clone()));
        }
        for (p, s) in store.params().iter().zip(store.adam_states()) {
            blobs.push((format!("{ADAM_M}{}", p.name), s.m.clone()));
            blobs.push((format!("{ADAM_V}{}", p.name), s.v.clone()));
            // Step counts stored as exact f64 (< 2^53).
            blobs.push((
                format!("{ADAM_STEP}{}", p.name),
                Matrix::from_rows(&[&[s.step as f64]]),
            ));
        }
        Self {
            version: FORMAT_VERSION,
            schema_hash,
            rng,
            meta,
            blobs,
        }
    }

    /// Restores values and optimizer moments into a store of the same layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let lookup: BTreeMap<&str, &Matrix> =
            self.blobs.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let mut values = Vec::with_capacity(store.len());
        let mut moments = Vec::with_capacity(store.len());
        for p in store.params() {
            let get = |key: &str| -> Result<Matrix> {
                lookup
                    .get(key)
                    .map(|m| (*m).clone())
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing blob {key}")))
            };
            values.push((p.name.clone(), get(&p.name)?));
            let step = get(&format!("{ADAM_STEP}{}", p.name))?;
            moments.push((
                get(&format!("{ADAM_M}{}", p.name))?,
                get(&format!("{ADAM_V}{}", p.name))?,
                step.get(0, 0) as u64,
            ));
        }
        store.restore_from(values, moments)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("writing checkpoint", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&self.version.to_le_bytes()).map_err(io)?;
        w.write_all(&self.schema_hash.to_le_bytes()).map_err(io)?;
        for x in [self.rng.seed, self.rng.next_span, self.rng.step] {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&(self.meta.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (k, v) in &self.meta {
            write_str(&mut w, k).map_err(io)?;
            write_str(&mut w, v).map_err(io)?;
        }
        w.write_all(&(self.blobs.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (name, m) in &self.blobs {
            write_str(&mut w, name).map_err(io)?;
            w.write_all(&(m.rows() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&(m.cols() as u64).to_le_bytes()).map_err(io)?;
            let mut buf = Vec::with_capacity(m.data().len() * 8);
            for x in m.data() {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses a checkpoint; `expected_schema` rejects checkpoints from other datasets.
    pub fn read_from<R: Read>(mut r: R, expected_schema: Option<u64>) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let schema_hash = read_u64(&mut r, "schema hash")?;
        if let Some(expected) = expected_schema {
            if expected != schema_hash {
                return Err(Error::Format(format!(
                    "checkpoint schema hash {schema_hash:016x} does not match {expected:016x}"
                )));
            }
        }
        let rng = RngState {
            seed: read_u64(&mut r, "rng seed")?,
            next_span: read_u64(&mut r, "rng span")?,
            step: read_u64(&mut r, "rng step")?,
        };
        let n_meta = read_u32(&mut r, "meta count")?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.insert(k, v);
        }
        let n_blobs = read_u32(&mut r, "blob count")?;
        let mut blobs = Vec::with_capacity(n_blobs as usize);
        for i in 0..n_blobs {
            let name = read_str(&mut r)?;
            let rows = read_u64(&mut r, "rows")? as usize;
            let cols = read_u64(&mut r, "cols")? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&l| l <= (1 << 32))
                .ok_or_else(|| Error::Format(format!("blob {i} has absurd shape")))?;
            let mut buf = vec![0u8; len * 8];
            read_exact(&mut r, &mut buf, &format!("blob {name}"))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            blobs.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io("reading checkpoint", e))? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            version,
            schema_hash,
            rng,
            meta,
            blobs,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path, expected_schema: Option<u64>) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(std::io::BufReader::new(f), expected_schema)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("checkpoint truncated while reading {what}"))
        } else {
            Error::io(format!("reading checkpoint {what}"), e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r, "string length")? as usize;
    if len > 1 << 20 {
        return Err(Error::Format("string field too long".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, "string")?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-utf8 string field".into()))
}
