//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GOGN" | version u32 | config_len u32 | config text (key = value lines)
//! epoch u32 | best_valid_auc f64 (NaN when absent) | seed u64
//! record_count u32
//! per record: name_len u32 | name | rank u32 | dims u32 * rank | values f32 * numel
//! crc32 u32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::model::GoGNNModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GOGN";
pub const VERSION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMeta {
    pub epoch: u32,
    pub best_valid_auc: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated while reading {what} at byte {offset}")]
    Truncated { what: String, offset: usize },
    #[error("{what} is not valid UTF-8")]
    Utf8 { what: String },
    #[error("embedded configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("record `{name}`: shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("record `{0}` has no matching model parameter")]
    UnknownRecord(String),
    #[error("record `{0}` appears twice")]
    DuplicateRecord(String),
    #[error("model parameter `{0}` has no record")]
    MissingRecord(String),
    #[error("record `{0}` holds non-finite values")]
    NonFinite(String),
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes a model. Values are narrowed to 32-bit floats.
pub fn to_bytes(model: &GoGNNModel, meta: &TrainingMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &model.config.to_text());
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.best_valid_auc.unwrap_or(f64::NAN).to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    put_u32(&mut out, model.store.len());
    for id in model.store.ids() {
        let t = model.store.get(id);
        put_str(&mut out, model.store.name(id));
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                what: what.to_string(),
                offset: self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Utf8 {
            what: what.to_string(),
        })
    }
}

/// Parses a checkpoint. The model is rebuilt from the embedded
/// configuration and every parameter must be matched by exactly one
/// record of the same shape.
pub fn from_bytes(buf: &[u8]) -> Result<(GoGNNModel, TrainingMeta), CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r
        .take(4, "magic")
        .map_err(|_| CheckpointError::BadMagic(buf.to_vec()))?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let found = r.u32("version")?;
    if found != VERSION {
        return Err(CheckpointError::Version { found });
    }
    if buf.len() < r.pos + 4 {
        return Err(CheckpointError::Truncated {
            what: "checksum".into(),
            offset: buf.len(),
        });
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: body,
        pos: r.pos,
    };
    let text = r.string("configuration")?;
    let config = TrainConfig::parse(&text)?;
    let epoch = r.u32("epoch")?;
    let auc = f64::from_le_bytes(r.array("best validation AUC")?);
    let seed = u64::from_le_bytes(r.array("seed")?);
    let meta = TrainingMeta {
        epoch,
        best_valid_auc: (!auc.is_nan()).then_some(auc),
        seed,
    };
    let count = r.u32("record count")? as usize;
    let mut model = GoGNNModel::new(&config)?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let name = r.string(&format!("record {k} name"))?;
        let rank = r.u32(&format!("record `{name}` rank"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32(&format!("record `{name}` shape"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Truncated {
                what: format!("record `{name}` values"),
                offset: r.pos,
            })?;
        let raw = r.take(numel, &format!("record `{name}` values"))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))))
            .collect();
        records.push((name, shape, data));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Trailing(body.len() - r.pos));
    }
    install(&mut model, records)?;
    Ok((model, meta))
}

fn install(
    model: &mut GoGNNModel,
    records: Vec<(String, Vec<usize>, Vec<f64>)>,
) -> Result<(), CheckpointError> {
    let mut seen = vec![false; model.store.len()];
    for (name, shape, data) in records {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| CheckpointError::UnknownRecord(name.clone()))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(CheckpointError::DuplicateRecord(name));
        }
        let expected = model.store.get(id).shape().to_vec();
        if expected != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected,
                found: shape,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        let t = Tensor::new(&shape, data).expect("element count matches shape");
        model.store.set(id, t);
    }
    if let Some(id) = model.store.ids().find(|id| !seen[id.index()]) {
        return Err(CheckpointError::MissingRecord(
            model.store.name(id).to_string(),
        ));
    }
    Ok(())
}

/// Copies the parameters of a checkpoint into an existing model whose
/// configuration may differ. Used to report cross-configuration loads.
pub fn load_parameters(
    model: &mut GoGNNModel,
    buf: &[u8],
) -> Result<TrainingMeta, CheckpointError> {
    let (loaded, meta) = from_bytes(buf)?;
    let records = loaded
        .store
        .ids()
        .map(|id| {
            let t = loaded.store.get(id);
            (
                loaded.store.name(id).to_string(),
                t.shape().to_vec(),
                t.data().to_vec(),
            )
        })
        .collect();
    let mut staged = model.clone();
    install(&mut staged, records)?;
    *model = staged;
    Ok(meta)
}

pub fn save(model: &GoGNNModel, meta: &TrainingMeta, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model, meta)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(GoGNNModel, TrainingMeta), CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&buf)
}
