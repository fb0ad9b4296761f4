//! Model checkpoints.
//!
//! All integers and floats are little-endian; strings are a `u32` byte
//! length followed by UTF-8. Layout:
//!
//! ```text
//! magic    b"FDEPTHCK"
//! version  u32
//! config   channel_scale u32, height u32, width u32,
//!          dilation count u32 + u32 each, memory string, epsilon f64
//! step     u64
//! adam     lr f64, beta1 f64, beta2 f64, eps f64, step u64
//! tensors  count u32, then per tensor:
//!          name string, n c h w as u32, values as f64
//! moments  count u32, then per tensor: name string, first and second
//!          moment with the tensor layout above minus the name
//! ```
//!
//! Parameters are stored as `f64`, so both `f32` and `f64` models round-trip
//! exactly. Tensors appear in sorted name order, which makes saving
//! deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, ModelParams};
use crate::optim::{AdamConfig, AdamState};
use crate::params::Parameters;
use crate::tensor::{Scalar, Shape, Tensor};

use super::{read_file, write_file, Reader};

const FORMAT: &str = "checkpoint";
pub const MAGIC: &[u8; 8] = b"FDEPTHCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format {
        format: FORMAT,
        detail: format!("value {v} does not fit 32 bits"),
    })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) -> Result<()> {
    for d in t.shape().dims() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
    }
    Ok(())
}

fn get_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format {
        format: FORMAT,
        detail: "string is not UTF-8".into(),
    })
}

fn get_tensor<T: Scalar>(r: &mut Reader<'_>) -> Result<Tensor<T>> {
    let d = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
    let shape = Shape::new(d[0], d[1], d[2], d[3]);
    let n = shape.numel();
    if n.checked_mul(8).map_or(true, |b| b > r.remaining()) {
        return Err(Error::Truncated {
            format: FORMAT,
            expected: n.saturating_mul(8),
            found: r.remaining(),
        });
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(T::lit(r.f64()?));
    }
    Tensor::from_vec(shape, data)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>, adam: AdamState<T>) -> Self {
        let step = adam.step;
        Checkpoint {
            config,
            params,
            adam,
            step,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        put_u32(&mut out, c.channel_scale)?;
        put_u32(&mut out, c.height)?;
        put_u32(&mut out, c.width)?;
        put_u32(&mut out, c.dilations.len())?;
        for &d in &c.dilations {
            put_u32(&mut out, d)?;
        }
        put_str(&mut out, &c.memory)?;
        out.extend_from_slice(&c.confidence_epsilon.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let a = self.adam.config;
        for v in [a.lr, a.beta1, a.beta2, a.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());

        let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
        self.params
            .for_each_tensor(&mut |name, t| tensors.push((name.to_string(), t.clone())));
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        put_u32(&mut out, tensors.len())?;
        for (name, t) in &tensors {
            put_str(&mut out, name)?;
            put_tensor(&mut out, t)?;
        }
        put_u32(&mut out, self.adam.moments.len())?;
        for (name, (m, v)) in &self.adam.moments {
            put_str(&mut out, name)?;
            put_tensor(&mut out, m)?;
            put_tensor(&mut out, v)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, FORMAT);
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::BadMagic { format: FORMAT });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let channel_scale = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let nd = r.u32()? as usize;
        let dilations = (0..nd).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let memory = get_str(&mut r)?;
        let confidence_epsilon = r.f64()?;
        let config = ModelConfig {
            channel_scale,
            height,
            width,
            dilations,
            memory,
            confidence_epsilon,
        };
        let step = r.u64()?;
        let adam_config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let adam_step = r.u64()?;

        let count = r.u32()? as usize;
        let mut stored = BTreeMap::new();
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let t = get_tensor::<T>(&mut r)?;
            if stored.insert(name.clone(), t).is_some() {
                return Err(Error::Format {
                    format: FORMAT,
                    detail: format!("duplicate tensor `{name}`"),
                });
            }
        }
        let mut moments = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = get_str(&mut r)?;
            let m = get_tensor::<T>(&mut r)?;
            let v = get_tensor::<T>(&mut r)?;
            moments.insert(name, (m, v));
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                format: FORMAT,
                detail: format!("{} trailing bytes", r.remaining()),
            });
        }

        let model = Model::new(config.clone())?;
        let mut params = model.init_params::<T>(0)?;
        let mut failure = None;
        params.for_each_tensor_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            match stored.remove(name) {
                Some(s) if s.shape() == t.shape() => *t = s,
                Some(s) => {
                    failure = Some(Error::shape(
                        "load_checkpoint",
                        format!("`{name}` stored as {:?}, model expects {:?}", s.shape(), t.shape()),
                    ))
                }
                None => {
                    failure = Some(Error::Format {
                        format: FORMAT,
                        detail: format!("missing tensor `{name}`"),
                    })
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(name) = stored.keys().next() {
            return Err(Error::Format {
                format: FORMAT,
                detail: format!("unexpected tensor `{name}`"),
            });
        }
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState {
                config: adam_config,
                step: adam_step,
                moments,
            },
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_file(path.as_ref())?)
    }
}
