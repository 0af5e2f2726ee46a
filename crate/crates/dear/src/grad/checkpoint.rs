//! Versioned binary checkpoint container.
//!
//! Byte layout (all integers little-endian, all tensor data float-32
//! little-endian, row-major):
//!
//! ```text
//! offset  size        field
//! 0       8           magic "DEARCKPT"
//! 8       4           u32 format version (currently 1)
//! 12      4           u32 meta_len
//! 16      meta_len    UTF-8 JSON metadata object
//! ...     4           u32 tensor_count
//! per tensor:
//!         2           u16 name_len
//!                     name bytes (UTF-8)
//!         4           u32 channels
//!         4           u32 len
//!         4*c*len     f32 data
//! ...     1           u8 has_adam (0 or 1)
//! if has_adam == 1:
//!         8           u64 step
//!         8,8,8,8     f64 learning_rate, beta1, beta2, epsilon
//!         4           u32 moment_count
//! per moment:
//!                     name (u16 len + bytes), u32 channels, u32 len,
//!                     f32 first-moment data, f32 second-moment data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DearError, Result};
use crate::grad::adam::AdamState;
use crate::grad::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DEARCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors plus optional optimizer state and a JSON metadata object.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
    pub adam: Option<AdamCheckpoint>,
}

/// Serialized Adam state: hyperparameters, step counter, and per-parameter
/// moment pairs keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamCheckpoint {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl AdamCheckpoint {
    pub fn from_state(state: &AdamState, names: &[String]) -> Self {
        Self {
            step: state.step,
            learning_rate: state.learning_rate,
            beta1: state.beta1,
            beta2: state.beta2,
            epsilon: state.epsilon,
            moments: names
                .iter()
                .cloned()
                .zip(
                    state
                        .first_moments()
                        .iter()
                        .cloned()
                        .zip(state.second_moments().iter().cloned()),
                )
                .map(|(n, (m, v))| (n, m, v))
                .collect(),
        }
    }

    pub fn into_state(self) -> AdamState {
        let (m, v) = self
            .moments
            .into_iter()
            .map(|(_, m, v)| (m, v))
            .unzip();
        AdamState::restore(
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.step,
            m,
            v,
        )
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| DearError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| DearError::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).expect("json meta serializes");
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_name(w, name)?;
            write_tensor(w, t)?;
        }
        match &self.adam {
            None => w.write_all(&[0u8])?,
            Some(a) => {
                w.write_all(&[1u8])?;
                w.write_all(&a.step.to_le_bytes())?;
                for v in [a.learning_rate, a.beta1, a.beta2, a.epsilon] {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&(a.moments.len() as u32).to_le_bytes())?;
                for (name, m, v) in &a.moments {
                    write_name(w, name)?;
                    w.write_all(&(m.channels() as u32).to_le_bytes())?;
                    w.write_all(&(m.len() as u32).to_le_bytes())?;
                    write_f32_data(w, m)?;
                    write_f32_data(w, v)?;
                }
            }
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| DearError::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r)
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(DearError::BadCheckpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(DearError::BadCheckpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(r, &mut meta_bytes)?;
        let meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| DearError::BadCheckpoint(format!("bad metadata json: {e}")))?;

        let tensor_count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = read_name(r)?;
            let t = read_tensor(r)?;
            tensors.push((name, t));
        }

        let mut flag = [0u8; 1];
        read_exact(r, &mut flag)?;
        let adam = if flag[0] == 1 {
            let mut step_bytes = [0u8; 8];
            read_exact(r, &mut step_bytes)?;
            let step = u64::from_le_bytes(step_bytes);
            let mut hyper = [0f64; 4];
            for h in &mut hyper {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                *h = f64::from_le_bytes(b);
            }
            let count = read_u32(r)? as usize;
            let mut moments = Vec::with_capacity(count);
            for _ in 0..count {
                let name = read_name(r)?;
                let channels = read_u32(r)? as usize;
                let len = read_u32(r)? as usize;
                let m = read_f32_tensor(r, channels, len)?;
                let v = read_f32_tensor(r, channels, len)?;
                moments.push((name, m, v));
            }
            Some(AdamCheckpoint {
                step,
                learning_rate: hyper[0],
                beta1: hyper[1],
                beta2: hyper[2],
                epsilon: hyper[3],
                moments,
            })
        } else if flag[0] == 0 {
            None
        } else {
            return Err(DearError::BadCheckpoint("bad adam flag".into()));
        };

        Ok(Checkpoint {
            meta,
            tensors,
            adam,
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DearError::BadCheckpoint(format!("missing tensor '{name}'")))
    }
}

fn write_name(w: &mut impl Write, name: &str) -> std::io::Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(t.channels() as u32).to_le_bytes())?;
    w.write_all(&(t.len() as u32).to_le_bytes())?;
    write_f32_data(w, t)
}

fn write_f32_data(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| DearError::BadCheckpoint("truncated checkpoint".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let mut lb = [0u8; 2];
    read_exact(r, &mut lb)?;
    let mut bytes = vec![0u8; u16::from_le_bytes(lb) as usize];
    read_exact(r, &mut bytes)?;
    String::from_utf8(bytes).map_err(|_| DearError::BadCheckpoint("non-utf8 tensor name".into()))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let channels = read_u32(r)? as usize;
    let len = read_u32(r)? as usize;
    read_f32_tensor(r, channels, len)
}

fn read_f32_tensor(r: &mut impl Read, channels: usize, len: usize) -> Result<Tensor> {
    let numel = channels
        .checked_mul(len)
        .ok_or_else(|| DearError::BadCheckpoint("tensor shape overflow".into()))?;
    let mut data = Vec::with_capacity(numel);
    let mut b = [0u8; 4];
    for _ in 0..numel {
        read_exact(r, &mut b)?;
        data.push(f64::from(f32::from_le_bytes(b)));
    }
    Tensor::from_vec(channels, len, data)
}
