//! Central finite-difference checks of analytic gradients.
//!
//! Networks are checked on the scalar `L = Σ r ⊙ net(x)` with a fixed random
//! `r`, in training mode with a dropout stream replayed from the same seed at
//! every evaluation. Relative error is `|a − n| / max(|a|, |n|, floor)`; the
//! floor keeps vanishing gradients from turning rounding noise into failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LossOutput, Mode, Network, Tensor};
use crate::Result;

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const FLOOR: f64 = 1e-3;
/// Entries checked per parameter tensor (sampled when larger).
const MAX_ENTRIES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err {
            self.max_rel_err = e;
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn entries(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_ENTRIES {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, MAX_ENTRIES).into_vec()
    }
}

/// Checks parameter and input gradients of `net` at `x`.
pub fn check_network(net: &mut Network, x: &Tensor, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = net.forward(x.clone(), Mode::Train, Some(&mut ChaCha8Rng::seed_from_u64(seed)))?;
    let r: Vec<f64> = (0..probe.len()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let r_t = Tensor::new(probe.shape().to_vec(), r.clone())?;

    let objective = |net: &mut Network, x: Tensor| -> Result<f64> {
        let y = net.forward(x, Mode::Train, Some(&mut ChaCha8Rng::seed_from_u64(seed)))?;
        Ok(y.data().iter().zip(&r).map(|(a, b)| a * b).sum())
    };

    net.zero_grad();
    net.forward(x.clone(), Mode::Train, Some(&mut ChaCha8Rng::seed_from_u64(seed)))?;
    let dx = net.backward(r_t)?;
    let grads = net.flat_grads();
    let mut report = GradCheckReport::new();

    let mut params = net.flat_params();
    let mut offset = 0;
    let sizes: Vec<usize> = net.params().map(|p| p.value.len()).collect();
    for (pi, &len) in sizes.iter().enumerate() {
        for i in entries(len, &mut rng) {
            let k = offset + i;
            let orig = params[k];
            params[k] = orig + EPS;
            net.set_flat_params(&params)?;
            let up = objective(net, x.clone())?;
            params[k] = orig - EPS;
            net.set_flat_params(&params)?;
            let down = objective(net, x.clone())?;
            params[k] = orig;
            net.set_flat_params(&params)?;
            report.record(grads[k], (up - down) / (2.0 * EPS), || format!("parameter {pi}[{i}]"));
        }
        offset += len;
    }

    for i in entries(x.len(), &mut rng) {
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let up = objective(net, xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= EPS;
        let down = objective(net, xm)?;
        report.record(dx.data()[i], (up - down) / (2.0 * EPS), || format!("input[{i}]"));
    }
    Ok(report)
}

/// Checks a loss's gradient with respect to its logits.
pub fn check_loss(
    loss: impl Fn(&Tensor) -> Result<LossOutput>,
    logits: &Tensor,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let analytic = loss(logits)?.grad;
    let mut report = GradCheckReport::new();
    for i in entries(logits.len(), &mut rng) {
        let mut up = logits.clone();
        up.data_mut()[i] += EPS;
        let mut down = logits.clone();
        down.data_mut()[i] -= EPS;
        let n = (loss(&up)?.value - loss(&down)?.value) / (2.0 * EPS);
        report.record(analytic.data()[i], n, || format!("logit[{i}]"));
    }
    Ok(report)
}
