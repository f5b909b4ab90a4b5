use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Ctx, Layer};
use super::layers::{LayerSpec, Mode, Param};
use super::Tensor;
use crate::{Error, Result};

const CHECKPOINT_FORMAT: &str = "spectraseg-network";

/// Ordered layer list plus its parameter store.
pub struct Network {
    layers: Vec<Layer>,
    caches: Vec<Option<Cache>>,
    bn_momentum: f64,
    recalibration_batches: usize,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("layers", &self.specs())
            .field("parameters", &self.count_parameters())
            .finish()
    }
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    params: l.params.clone(),
                    running: l.running.clone(),
                })
                .collect(),
            caches: self.layers.iter().map(|_| None).collect(),
            bn_momentum: self.bn_momentum,
            recalibration_batches: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    layers: Vec<LayerSpec>,
    bn_momentum: f64,
    parameter_values: usize,
    buffer_values: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A network together with free-form metadata (model kind, training info).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: serde_json::Value,
}

impl Network {
    /// He-initialized weights, unit/zero batch-norm affine parameters.
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut saved = std::collections::BTreeSet::new();
        for (i, s) in specs.iter().enumerate() {
            match *s {
                LayerSpec::SaveSkip { slot } => {
                    saved.insert(slot);
                }
                LayerSpec::ConcatSkip { slot } if !saved.remove(&slot) => {
                    return Err(Error::Shape {
                        layer: format!("#{i} concat_skip"),
                        detail: format!("slot {slot} was never saved"),
                    });
                }
                LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => {
                    return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
                }
                _ => {}
            }
        }
        let mut rng = crate::rng::rng_for(seed, &[0x6e6e]);
        let layers: Vec<Layer> = specs.into_iter().map(|s| Layer::init(s, &mut rng)).collect();
        let caches = layers.iter().map(|_| None).collect();
        Ok(Self {
            layers,
            caches,
            bn_momentum: 0.1,
            recalibration_batches: 0,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn bn_momentum(&self) -> f64 {
        self.bn_momentum
    }

    pub fn set_bn_momentum(&mut self, m: f64) {
        self.bn_momentum = m;
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.spec.parameter_count()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    /// Parameters of layer `idx` (weight then bias, or scale then shift).
    pub fn layer_params_mut(&mut self, idx: usize) -> &mut [Param] {
        &mut self.layers[idx].params
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let n: usize = self.params().map(|p| p.value.len()).sum();
        if n != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "network holds {n} parameters, got {}",
                values.len()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let k = p.value.len();
            p.value.copy_from_slice(&values[off..off + k]);
            off += k;
        }
        Ok(())
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params().flat_map(|p| p.grad.iter().copied()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Runs the layer list. Training mode caches activations for
    /// [`Network::backward`] and needs `rng` when the net has dropout.
    pub fn forward(&mut self, x: Tensor, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut ctx = Ctx {
            mode,
            rng,
            skips: Vec::new(),
        };
        if mode == Mode::Recalibrate {
            self.recalibration_batches += 1;
        }
        let mut x = x;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let f = layer.forward(i, x, &mut ctx)?;
            if let (Some((mean, var, m)), Some((rm, rv))) = (f.batch_stats, layer.running.as_mut()) {
                let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                let rate = match mode {
                    Mode::Recalibrate => 1.0 / self.recalibration_batches as f64,
                    _ => self.bn_momentum,
                };
                for c in 0..mean.len() {
                    rm[c] += rate * (mean[c] - rm[c]);
                    rv[c] += rate * (var[c] * unbias - rv[c]);
                }
            }
            self.caches[i] = f.cache;
            x = f.out;
        }
        Ok(x)
    }

    /// Evaluation-mode forward on shared parameters.
    pub fn predict(&self, x: Tensor) -> Result<Tensor> {
        let mut ctx = Ctx {
            mode: Mode::Eval,
            rng: None,
            skips: Vec::new(),
        };
        let mut x = x;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(i, x, &mut ctx)?.out;
        }
        Ok(x)
    }

    /// Accumulates parameter gradients for the last training-mode forward and
    /// returns the gradient with respect to its input.
    pub fn backward(&mut self, dy: Tensor) -> Result<Tensor> {
        if self.caches.iter().any(Option::is_none) {
            return Err(Error::BackwardWithoutForward);
        }
        let mut skip_grads = Vec::new();
        let mut g = dy;
        for i in (0..self.layers.len()).rev() {
            let cache = self.caches[i].take().expect("checked above");
            g = self.layers[i].backward(i, cache, g, &mut skip_grads)?;
        }
        Ok(g)
    }

    /// Clears running batch-norm statistics ahead of a recalibration pass.
    pub fn begin_recalibration(&mut self) {
        self.recalibration_batches = 0;
        for l in &mut self.layers {
            if let Some((m, v)) = l.running.as_mut() {
                m.fill(0.0);
                v.fill(0.0);
            }
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.running.is_some())
    }

    fn buffers(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some((m, v)) = &l.running {
                out.extend_from_slice(m);
                out.extend_from_slice(v);
            }
        }
        out
    }

    fn set_buffers(&mut self, values: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            if let Some((m, v)) = l.running.as_mut() {
                let k = m.len();
                m.copy_from_slice(&values[off..off + k]);
                v.copy_from_slice(&values[off + k..off + 2 * k]);
                off += 2 * k;
            }
        }
    }

    /// JSON topology line followed by little-endian `f64` parameters and
    /// batch-norm running statistics.
    pub fn to_bytes(&self, meta: &serde_json::Value) -> Result<Vec<u8>> {
        let params = self.flat_params();
        let buffers = self.buffers();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            layers: self.specs(),
            bn_momentum: self.bn_momentum,
            parameter_values: params.len(),
            buffer_values: buffers.len(),
            meta: meta.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for v in params.iter().chain(&buffers) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("checkpoint has no header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::MalformedHeader(format!("unknown format {}", header.format)));
        }
        let mut net = Network::new(header.layers, 0)?;
        net.bn_momentum = header.bn_momentum;
        let payload = &bytes[nl + 1..];
        let expected = 8 * (header.parameter_values + header.buffer_values);
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected || net.buffers().len() != header.buffer_values {
            return Err(Error::DimensionMismatch("checkpoint payload does not match topology".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        net.set_flat_params(&values[..header.parameter_values])?;
        net.set_buffers(&values[header.parameter_values..]);
        Ok(Checkpoint {
            network: net,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes(meta)?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_net() -> Network {
        Network::new(
            vec![
                LayerSpec::Dense { inputs: 3, outputs: 4 },
                LayerSpec::BatchNorm { features: 4 },
                LayerSpec::Elu,
                LayerSpec::Dropout { p: 0.1 },
                LayerSpec::Dense { inputs: 4, outputs: 2 },
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut net = Network::new(vec![LayerSpec::Dense { inputs: 3, outputs: 3 }], 0).unwrap();
        let p = net.layer_params_mut(0);
        p[0].value = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        p[1].value = vec![0.0; 3];
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(net.predict(x.clone()).unwrap(), x);
    }

    #[test]
    fn one_by_one_dense_gradient_by_hand() {
        let mut net = Network::new(vec![LayerSpec::Dense { inputs: 1, outputs: 1 }], 0).unwrap();
        let p = net.layer_params_mut(0);
        p[0].value = vec![2.0];
        p[1].value = vec![0.5];
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let y = net.forward(x, Mode::Train, None).unwrap();
        assert_eq!(y.data(), &[6.5]);
        // d(w·x+b)/dw = x, /db = 1, /dx = w; scaled by the upstream 1.5.
        let dx = net.backward(Tensor::new(vec![1, 1], vec![1.5]).unwrap()).unwrap();
        assert_eq!(net.flat_grads(), vec![4.5, 1.5]);
        assert_eq!(dx.data(), &[3.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen()).collect()).unwrap();
        net.forward(x, Mode::Train, Some(&mut rng)).unwrap();
        net.backward(Tensor::zeros(vec![5, 2])).unwrap();
        assert!(net.flat_grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = small_net();
        assert!(matches!(
            net.backward(Tensor::zeros(vec![1, 2])),
            Err(Error::BackwardWithoutForward)
        ));
        let x = Tensor::zeros(vec![2, 3]);
        net.forward(x.clone(), Mode::Eval, None).unwrap();
        assert!(net.backward(Tensor::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut net = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen()).collect()).unwrap();
        net.forward(x.clone(), Mode::Train, Some(&mut rng)).unwrap();
        let meta = serde_json::json!({"kind": "test"});
        let bytes = net.to_bytes(&meta).unwrap();
        let back = Network::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, meta);
        let a = net.predict(x.clone()).unwrap();
        let b = back.network.predict(x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(matches!(
            Network::from_bytes(&bytes[..bytes.len() - 4]),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn unmatched_skip_rejected() {
        assert!(Network::new(vec![LayerSpec::ConcatSkip { slot: 0 }], 0).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let net = small_net();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.1, 0.0, 1.0]).unwrap();
        assert_eq!(net.predict(x.clone()).unwrap(), net.predict(x).unwrap());
    }
}
