//! Adam over the flat parameter vector with one learning rate per parameter class.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamClass, ParamLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Position rate at the first iteration, multiplied by the scene extent.
    pub position_init: f64,
    /// Position rate reached at the last iteration (log-linear decay).
    pub position_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sigma_d: f64,
    pub sh_dc: f64,
    /// Higher-order SH coefficients.
    pub sh_rest: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sigma_d: 1e-2,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
        }
    }
}

impl LearningRates {
    /// Rate for `class` at `iteration` of `total`.
    pub fn rate(&self, class: ParamClass, iteration: usize, total: usize, extent: f64) -> f64 {
        match class {
            ParamClass::Position => {
                let t = if total <= 1 {
                    0.0
                } else {
                    (iteration as f64 / (total - 1) as f64).clamp(0.0, 1.0)
                };
                let log = (1.0 - t) * self.position_init.ln() + t * self.position_final.ln();
                log.exp() * extent
            }
            ParamClass::LogScale => self.log_scale,
            ParamClass::Rotation => self.rotation,
            ParamClass::Opacity => self.opacity,
            ParamClass::SigmaD => self.sigma_d,
            ParamClass::ShDc => self.sh_dc,
            ParamClass::ShRest => self.sh_rest,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

const MAGIC: &[u8; 8] = b"CLODADAM";

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One update of `params` in place; `rates[c]` is the rate for the
    /// class with index `c` in [`ParamClass::ALL`]. Classes whose `frozen`
    /// entry is true are left untouched.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        layout: &ParamLayout,
        rates: &[f64; 7],
        frozen: &[bool; 7],
    ) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let c = class_index(layout.class_of(i));
            if frozen[c] {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= rates[c] * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Little-endian binary dump: magic, step, length, moments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 16 * self.m.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for v in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("optimizer state: {msg}"));
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("bad header"));
        }
        let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if bytes.len() != 24 + 16 * len {
            return Err(bad("length does not match header"));
        }
        let vals: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut adam = Adam::new(len);
        adam.step = step;
        adam.m.copy_from_slice(&vals[..len]);
        adam.v.copy_from_slice(&vals[len..]);
        Ok(adam)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn class_index(class: ParamClass) -> usize {
    ParamClass::ALL.iter().position(|&c| c == class).unwrap()
}
