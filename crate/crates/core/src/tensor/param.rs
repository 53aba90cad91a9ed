//! Trainable parameters, He initialization, SGD with momentum and a small
//! binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::rng_for;

const MAGIC: &[u8; 8] = b"PFOACKPT";
const VERSION: u32 = 1;

/// I.i.d. `N(0, 2 / fan_in)` draws.
pub fn he_init(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::Validation("he_init needs fan_in > 0".into()));
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let mut rng = rng_for(seed, 0x4e5f_1a17);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub momentum: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let momentum = vec![0.0; value.numel()];
        Self {
            name: name.into(),
            value,
            momentum,
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a parameter and return its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Validation(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `v <- momentum * v + g; p <- p - lr * v`, with `g` including the
    /// optional L2 term. A missing gradient counts as zero.
    pub fn step(&self, param: &mut Parameter, grad: Option<&[f64]>) -> Result<()> {
        if let Some(g) = grad {
            if g.len() != param.value.numel() {
                return Err(Error::Shape(format!(
                    "gradient of length {} for parameter {} with {} values",
                    g.len(),
                    param.name,
                    param.value.numel()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Autodiff(format!("non-finite gradient for {}", param.name)));
            }
        }
        let values = param.value.data_mut();
        for (i, (p, v)) in values.iter_mut().zip(param.momentum.iter_mut()).enumerate() {
            let g = grad.map_or(0.0, |g| g[i]) + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

/// Write parameter values (little-endian `f64`) plus a JSON manifest and
/// arbitrary metadata. Momentum buffers are not saved.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let entries = store
        .params()
        .iter()
        .map(|p| {
            let e = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.numel();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        params: entries,
        meta: meta.clone(),
    })?;
    let mut buf = Vec::with_capacity(24 + manifest.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for p in store.params() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Load(format!("{}: {why}", path.display()));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let body = buf.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let data = &buf[20 + mlen..];
    let mut store = ParamStore::new();
    for e in manifest.params {
        let n: usize = e.shape.iter().product();
        let bytes = data
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| bad(&format!("truncated data for {}", e.name)))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(e.name, Tensor::new(&e.shape, values)?)?;
    }
    Ok((store, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter {
        Parameter::new("p", Tensor::new(&[1], vec![v]).unwrap())
    }

    #[test]
    fn sgd_single_step_without_momentum() {
        let mut p = scalar_param(0.0);
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        opt.step(&mut p, Some(&[1.0])).unwrap();
        assert!((p.value.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_momentum_steps() {
        let mut p = scalar_param(0.0);
        let opt = Sgd {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        opt.step(&mut p, Some(&[1.0])).unwrap();
        opt.step(&mut p, Some(&[1.0])).unwrap();
        assert!((p.value.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_only_decays_velocity() {
        let mut p = scalar_param(3.0);
        p.momentum[0] = 0.0;
        let opt = Sgd {
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        opt.step(&mut p, Some(&[0.0])).unwrap();
        assert_eq!(p.value.data()[0], 3.0);
        p.momentum[0] = 2.0;
        let before = p.value.data()[0];
        opt.step(&mut p, None).unwrap();
        assert!((p.momentum[0] - 1.8).abs() < 1e-15);
        assert!((p.value.data()[0] - (before - 0.5 * 1.8)).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let mut p = scalar_param(0.0);
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!(matches!(opt.step(&mut p, Some(&[f64::NAN])), Err(Error::Autodiff(_))));
    }

    #[test]
    fn he_init_moments_and_determinism() {
        let n = 100_000;
        let t = he_init(&[n], 200, 11).unwrap();
        let d = t.data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.01).abs() < 0.05 * 0.01, "variance {var}");
        assert!(mean.abs() < 3.0 * 0.1 / (n as f64).sqrt(), "mean {mean}");
        assert_eq!(he_init(&[n], 200, 11).unwrap(), t);
        assert_ne!(he_init(&[n], 200, 12).unwrap(), t);
        assert!(he_init(&[2], 0, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        store.add("a", he_init(&[2, 3], 3, 1).unwrap()).unwrap();
        store.add("b", Tensor::new(&[1], vec![-0.125]).unwrap()).unwrap();
        let meta = serde_json::json!({"kind": "test"});
        save_checkpoint(&path, &store, &meta).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(m, meta);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Load(_))));
        assert!(store.add("a", Tensor::scalar(0.0)).is_err());
    }
}
