//! Binary checkpoints: `DARL` magic, a config echo that pins the parameter
//! schema, the named tensors as little-endian f32, optional optimizer state,
//! the step counter, and the training RNG state. Saving is deterministic
//! byte-for-byte; loading rebuilds the model from the embedded echo and
//! rejects anything that does not line up.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::Model;
use crate::config::{Config, ConfigError};
use crate::train::OptState;
use tensor_core::Real;

pub const MAGIC: [u8; 4] = *b"DARL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config echo invalid: {0}")]
    Echo(#[from] ConfigError),
    #[error("checkpoint parameter mismatch: {0}")]
    Param(String),
    #[error("config mismatch at `{key}`: checkpoint has `{stored}`, current run has `{current}`")]
    SchemaMismatch {
        key: String,
        stored: String,
        current: String,
    },
}

pub struct Loaded<F: Real> {
    pub model: Model<F>,
    pub opt: Option<OptState<F>>,
    pub step: u64,
    pub rng: Option<ChaCha8Rng>,
    pub echo: BTreeMap<String, String>,
}

pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &Model<F>,
    opt: Option<&OptState<F>>,
    step: u64,
    rng: Option<&ChaCha8Rng>,
    echo: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION);

    let mut echo_text = String::new();
    for (k, v) in echo {
        echo_text.push_str(k);
        echo_text.push_str(" = ");
        echo_text.push_str(v);
        echo_text.push('\n');
    }
    put_u32(&mut buf, echo_text.len() as u32);
    buf.extend_from_slice(echo_text.as_bytes());

    put_u32(&mut buf, model.store.len() as u32);
    for (name, t) in model.store.iter() {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape.len() as u32);
        for &e in &t.shape {
            put_u32(&mut buf, e as u32);
        }
        for v in &t.values {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }

    match opt {
        Some(state) => {
            assert_eq!(state.v.len(), model.store.len(), "optimizer state misaligned");
            buf.push(1);
            for slot in &state.v {
                for v in slot {
                    buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
        }
        None => buf.push(0),
    }

    put_u64(&mut buf, step);

    match rng {
        Some(r) => {
            buf.push(1);
            buf.extend_from_slice(&r.get_seed());
            buf.extend_from_slice(&r.get_word_pos().to_le_bytes());
        }
        None => buf.push(0),
    }

    let mut file = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&buf).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Loaded<F>, CheckpointError> {
    let data = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = Reader { data: &data, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let echo_len = r.u32()? as usize;
    let echo_text = std::str::from_utf8(r.take(echo_len)?)
        .map_err(|_| CheckpointError::Corrupt("config echo is not UTF-8".into()))?;
    let mut echo = BTreeMap::new();
    for line in echo_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Corrupt(format!("bad echo line `{line}`")))?;
        echo.insert(k.trim().to_string(), v.trim().to_string());
    }

    let mut cfg = Config::default();
    cfg.adopt_schema(&echo)?;
    let settings = cfg.settings()?;
    let mut model: Model<F> = Model::new(settings.model, settings.route, 0);

    let n_params = r.u32()? as usize;
    if n_params != model.store.len() {
        return Err(CheckpointError::Param(format!(
            "checkpoint has {n_params} tensors, schema expects {}",
            model.store.len()
        )));
    }
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut numel = 1usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = r.u32()? as usize;
            shape.push(e);
            numel *= e;
        }
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(F::from_f64(r.f32()? as f64));
        }
        model
            .store
            .load_values(&name, values)
            .map_err(CheckpointError::Param)?;
    }

    let has_opt = r.u8()? == 1;
    let mut opt_v = Vec::new();
    if has_opt {
        for id in model.store.ids().collect::<Vec<_>>() {
            let numel = model.store.tensor(id).numel();
            let mut slot = Vec::with_capacity(numel);
            for _ in 0..numel {
                slot.push(F::from_f64(r.f32()? as f64));
            }
            opt_v.push(slot);
        }
    }

    let step = r.u64()?;

    let has_rng = r.u8()? == 1;
    let rng = if has_rng {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let mut pos_bytes = [0u8; 16];
        pos_bytes.copy_from_slice(r.take(16)?);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(u128::from_le_bytes(pos_bytes));
        Some(rng)
    } else {
        None
    };

    if r.pos != data.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            data.len() - r.pos
        )));
    }

    Ok(Loaded {
        model,
        opt: if has_opt {
            Some(OptState { v: opt_v, step })
        } else {
            None
        },
        step,
        rng,
        echo,
    })
}

/// Reject a checkpoint whose schema echo disagrees with the current config.
pub fn verify_schema(
    echo: &BTreeMap<String, String>,
    current: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    for (k, cur) in current {
        match echo.get(k) {
            Some(stored) if stored == cur => {}
            Some(stored) => {
                return Err(CheckpointError::SchemaMismatch {
                    key: k.clone(),
                    stored: stored.clone(),
                    current: cur.clone(),
                })
            }
            None => {
                return Err(CheckpointError::SchemaMismatch {
                    key: k.clone(),
                    stored: "<absent>".into(),
                    current: cur.clone(),
                })
            }
        }
    }
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Corrupt(format!(
                "wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
