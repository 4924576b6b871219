//! `RIMCKPT1` checkpoints.
//!
//! ```text
//! magic        8 bytes "RIMCKPT1"
//! config       9 × u64: time_steps, hidden_channels, kernel_in, kernel_hidden,
//!              kernel_out, standardize_inputs, iteration, adam_steps, has_optimizer
//! input_std    f64
//! n_tensors    u64
//! tensors      n × (u64 name length, UTF-8 name, KSLAB001 tensor)
//! ```
//!
//! Optimizer moments are stored as `adam.m.<name>` / `adam.v.<name>`.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use super::array::Array;
use super::model::{RimConfig, RimModel};
use super::train::Adam;
use crate::error::{LabError, Result};
use crate::tensorfile::{Tensor, TensorData};

pub const MAGIC: &[u8; 8] = b"RIMCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: RimModel,
    pub iteration: usize,
    pub optimizer: Option<Adam>,
}

fn to_tensor(a: &Array) -> Tensor {
    Tensor { dims: a.shape.clone(), data: TensorData::F64(a.data.clone()) }
}

fn from_tensor(t: Tensor) -> Result<Array> {
    match t.data {
        TensorData::F64(v) => Ok(Array::new(t.dims, v)),
        _ => Err(LabError::Format("checkpoint tensors must be f64".into())),
    }
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.model.config;
        let mut out = MAGIC.to_vec();
        let ints = [
            cfg.time_steps,
            cfg.hidden_channels,
            cfg.kernel_sizes.0,
            cfg.kernel_sizes.1,
            cfg.kernel_sizes.2,
            cfg.standardize_inputs as usize,
            self.iteration,
            self.optimizer.as_ref().map_or(0, |a| a.steps as usize),
            self.optimizer.is_some() as usize,
        ];
        for v in ints {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.model.input_std.to_le_bytes());

        let names = self.model.parameter_names();
        let mut tensors: Vec<(String, &Array)> = names.iter().cloned().zip(&self.model.params).collect();
        if let Some(adam) = &self.optimizer {
            tensors.extend(names.iter().map(|n| format!("adam.m.{n}")).zip(&adam.m));
            tensors.extend(names.iter().map(|n| format!("adam.v.{n}")).zip(&adam.v));
        }
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, a) in tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            to_tensor(a).write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(LabError::Format("not a RIMCKPT1 checkpoint".into()));
        }
        let mut ints = [0usize; 9];
        for v in ints.iter_mut() {
            *v = read_u64(&mut r)? as usize;
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let input_std = f64::from_le_bytes(b);
        let config = RimConfig {
            time_steps: ints[0],
            hidden_channels: ints[1],
            kernel_sizes: (ints[2], ints[3], ints[4]),
            standardize_inputs: ints[5] != 0,
        };
        let n = read_u64(&mut r)? as usize;
        let mut tensors = HashMap::new();
        for _ in 0..n {
            let len = read_u64(&mut r)? as usize;
            if len > r.len() {
                return Err(LabError::Format("truncated tensor name".into()));
            }
            let name = std::str::from_utf8(&r[..len])
                .map_err(|_| LabError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            r = &r[len..];
            tensors.insert(name, from_tensor(Tensor::read_from(&mut r)?)?);
        }
        if !r.is_empty() {
            return Err(LabError::Format("trailing bytes after checkpoint".into()));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| LabError::Format(format!("checkpoint lacks tensor {name}")))
        };
        let names = config.parameter_specs().into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        let params = names.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
        let model = RimModel { config, params, input_std };
        model.validate().map_err(|e| LabError::Format(e.to_string()))?;
        let optimizer = if ints[8] != 0 {
            Some(Adam {
                m: names.iter().map(|n| take(&format!("adam.m.{n}"))).collect::<Result<_>>()?,
                v: names.iter().map(|n| take(&format!("adam.v.{n}"))).collect::<Result<_>>()?,
                steps: ints[7] as u64,
            })
        } else {
            None
        };
        Ok(Self { model, iteration: ints[6], optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RimConfig {
        RimConfig { time_steps: 2, hidden_channels: 2, ..Default::default() }
    }

    #[test]
    fn roundtrip_with_and_without_optimizer() {
        let mut model = RimModel::new(cfg(), 1).unwrap();
        model.input_std = 0.37;
        let bare = Checkpoint { model: model.clone(), iteration: 0, optimizer: None };
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes()).unwrap(), bare);
        let mut adam = Adam::new(&model.params);
        adam.steps = 12;
        adam.m[0].data[0] = 0.5;
        let full = Checkpoint { model, iteration: 12, optimizer: Some(adam) };
        let bytes = full.to_bytes();
        assert_eq!(&bytes[..8], b"RIMCKPT1");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), full);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let ck = Checkpoint { model: RimModel::zeros(cfg()).unwrap(), iteration: 0, optimizer: None };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[3] = b'x';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(LabError::Format(_))));
        let mut wrong_hidden = bytes;
        wrong_hidden[16] = 5;
        assert!(Checkpoint::from_bytes(&wrong_hidden).is_err());
    }
}
