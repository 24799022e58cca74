//! Per-class binary cross-entropy and the Adam optimizer.

use crate::error::{Error, Result};
use crate::model::{Network, ParamGrads};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Mean of `per_class`, which equals the mean over every element.
    pub total: f64,
    pub per_class: Vec<f64>,
}

impl LossReport {
    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> Result<LossReport> {
        let first = reports.first().ok_or_else(|| Error::Config("cannot average zero loss reports".into()))?;
        let c = first.per_class.len();
        let mut per_class = vec![0.0; c];
        for r in reports {
            if r.per_class.len() != c {
                return Err(Error::shape("loss reports with different class counts"));
            }
            for (acc, v) in per_class.iter_mut().zip(&r.per_class) {
                *acc += v;
            }
        }
        let n = reports.len() as f64;
        per_class.iter_mut().for_each(|v| *v /= n);
        Ok(LossReport::from_per_class(per_class))
    }

    pub fn from_per_class(per_class: Vec<f64>) -> Self {
        let total = per_class.iter().sum::<f64>() / per_class.len() as f64;
        Self { total, per_class }
    }
}

fn check_pair(o: &Tensor, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if !o.same_shape(t) {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", o.shape(), t.shape())));
    }
    o.dims4()
}

#[inline]
fn clamp_prob(o: f64) -> f64 {
    o.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy per class over `(N, H, W)`; total is the mean over classes.
pub fn bce_loss(o: &Tensor, t: &Tensor) -> Result<LossReport> {
    let (n, c, h, w) = check_pair(o, t)?;
    let plane = h * w;
    let mut per_class = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in per_class.iter_mut().enumerate() {
            let off = (b * c + ch) * plane;
            for (&p, &y) in o.data()[off..off + plane].iter().zip(&t.data()[off..off + plane]) {
                let p = clamp_prob(p);
                *acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
    }
    let count = (n * plane) as f64;
    per_class.iter_mut().for_each(|v| *v /= count);
    Ok(LossReport::from_per_class(per_class))
}

/// `d total / d O`; zero where the clamp is active.
pub fn bce_grad(o: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_pair(o, t)?;
    let count = o.len() as f64;
    let data = o
        .data()
        .iter()
        .zip(t.data())
        .map(
            |(&p, &y)| {
                if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                    0.0
                } else {
                    (p - y) / (p * (1.0 - p)) / count
                }
            },
        )
        .collect();
    Tensor::from_vec(o.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn for_network(config: AdamConfig, net: &Network) -> Self {
        let shapes: Vec<&[usize]> = net.trainable().into_iter().map(Tensor::shape).collect();
        Self::new(config, &shapes)
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if !p.same_shape(g) || !m.same_shape(g) {
                return Err(Error::shape(format!("adam: param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((th, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut Network, grads: &ParamGrads) -> Result<()> {
        self.step(&mut net.trainable_mut(), &grads.tensors)
    }
}
