//! Central finite-difference checks of every backward pass.
//!
//! Each check builds a scalar loss `L = Σ r ⊙ f(x)` with a random projection `r`
//! (or the BCE objective for the whole network), perturbs every input and parameter
//! element by `±h`, and compares `(L(+h) − L(−h)) / 2h` to the analytic gradient.
//! The relative error is `|a − fd| / max(|a|, |fd|, 1e-8)`.

use crate::error::Result;
use crate::layers::{
    batchnorm_apply, batchnorm_backward, conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward,
    maxunpool2_backward, maxunpool2_forward, relu, relu_backward, sigmoid, sigmoid_backward, BnParams, ConvParams,
    Mode,
};
use crate::model::{NetConfig, Network};
use crate::objective::{bce_grad, bce_loss};
use crate::tensor::{Prng, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max relative error between `analytic` and central differences of `loss` over every element of `x`.
fn compare(x: &Tensor, analytic: &Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - STEP;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

pub fn check_conv(rng: &mut Prng) -> Result<CheckResult> {
    let x = rng.normal_tensor(&[2, 3, 6, 6], 0.0, 1.0)?;
    let p =
        ConvParams { weight: rng.normal_tensor(&[4, 3, 3, 3], 0.0, 0.5)?, bias: rng.normal_tensor(&[4], 0.0, 0.5)? };
    let r = rng.normal_tensor(&[2, 4, 6, 6], 0.0, 1.0)?;
    let (_, cache) = conv2d_forward(&x, &p)?;
    let g = conv2d_backward(cache, &r)?;
    let l_x = |xi: &Tensor| dot(&conv2d_forward(xi, &p).unwrap().0, &r);
    let mut worst = compare(&x, &g.input, l_x);
    worst = worst.max(compare(&p.weight, &g.weight, |w| {
        dot(&conv2d_forward(&x, &ConvParams { weight: w.clone(), bias: p.bias.clone() }).unwrap().0, &r)
    }));
    worst = worst.max(compare(&p.bias, &g.bias, |b| {
        dot(&conv2d_forward(&x, &ConvParams { weight: p.weight.clone(), bias: b.clone() }).unwrap().0, &r)
    }));
    Ok(CheckResult { name: "conv2d".into(), max_rel_err: worst, checked: x.len() + p.weight.len() + p.bias.len() })
}

pub fn check_batchnorm(rng: &mut Prng, mode: Mode) -> Result<CheckResult> {
    let x = rng.normal_tensor(&[2, 3, 6, 6], 0.5, 2.0)?;
    let mut p = BnParams::new(3, 0.1, 1e-5);
    p.gamma = rng.normal_tensor(&[3], 1.0, 0.5)?;
    p.beta = rng.normal_tensor(&[3], 0.0, 0.5)?;
    p.running_mean = rng.normal_tensor(&[3], 0.0, 0.5)?;
    p.running_var = rng.uniform_tensor(&[3], 0.5, 2.0)?;
    let r = rng.normal_tensor(&[2, 3, 6, 6], 0.0, 1.0)?;
    let (_, cache, _) = batchnorm_apply(&x, &p, mode)?;
    let g = batchnorm_backward(cache, &r)?;
    let mut worst = compare(&x, &g.input, |xi| dot(&batchnorm_apply(xi, &p, mode).unwrap().0, &r));
    worst = worst.max(compare(&p.gamma, &g.gamma, |gm| {
        let q = BnParams { gamma: gm.clone(), ..p.clone() };
        dot(&batchnorm_apply(&x, &q, mode).unwrap().0, &r)
    }));
    worst = worst.max(compare(&p.beta, &g.beta, |bt| {
        let q = BnParams { beta: bt.clone(), ..p.clone() };
        dot(&batchnorm_apply(&x, &q, mode).unwrap().0, &r)
    }));
    let name = match mode {
        Mode::Train => "batchnorm(train)",
        Mode::Infer => "batchnorm(infer)",
    };
    Ok(CheckResult { name: name.into(), max_rel_err: worst, checked: x.len() + 6 })
}

pub fn check_relu(rng: &mut Prng) -> Result<CheckResult> {
    // keep inputs well clear of the kink
    let x = rng.normal_tensor(&[2, 3, 6, 6], 0.0, 1.0)?.map(|v| if v.abs() < 1e-2 { v + 0.1 } else { v });
    let r = rng.normal_tensor(&[2, 3, 6, 6], 0.0, 1.0)?;
    let (_, cache) = relu(&x);
    let g = relu_backward(cache, &r)?;
    let worst = compare(&x, &g, |xi| dot(&relu(xi).0, &r));
    Ok(CheckResult { name: "relu".into(), max_rel_err: worst, checked: x.len() })
}

pub fn check_sigmoid(rng: &mut Prng) -> Result<CheckResult> {
    let x = rng.normal_tensor(&[2, 3, 6, 6], 0.0, 2.0)?;
    let r = rng.normal_tensor(&[2, 3, 6, 6], 0.0, 1.0)?;
    let (_, cache) = sigmoid(&x);
    let g = sigmoid_backward(cache, &r)?;
    let worst = compare(&x, &g, |xi| dot(&sigmoid(xi).0, &r));
    Ok(CheckResult { name: "sigmoid".into(), max_rel_err: worst, checked: x.len() })
}

/// Gradient through `unpool(pool(x))`.
pub fn check_pool_unpool(rng: &mut Prng) -> Result<CheckResult> {
    let x = rng.normal_tensor(&[2, 3, 6, 6], 0.0, 1.0)?;
    let r = rng.normal_tensor(&[2, 3, 6, 6], 0.0, 1.0)?;
    let f = |xi: &Tensor| -> Tensor {
        let (v, idx) = maxpool2_forward(xi).unwrap();
        maxunpool2_forward(&v, &idx, 6, 6).unwrap()
    };
    let (_, idx) = maxpool2_forward(&x)?;
    let g = maxpool2_backward(&idx, &maxunpool2_backward(&idx, &r)?)?;
    let worst = compare(&x, &g, |xi| dot(&f(xi), &r));
    Ok(CheckResult { name: "maxpool+unpool".into(), max_rel_err: worst, checked: x.len() })
}

/// BCE ∘ forward(train) on the desk network with a `2×3×8×8` input, `samples` parameters.
pub fn check_network(rng: &mut Prng, samples: usize) -> Result<CheckResult> {
    let mut net = Network::build(&NetConfig::desk(), rng)?;
    // non-trivial affine parameters so every gradient path is exercised
    for b in net.encoder.iter_mut().chain(net.decoder.iter_mut()).flatten() {
        b.bn.gamma = rng.normal_tensor(b.bn.gamma.shape(), 1.0, 0.2)?;
        b.bn.beta = rng.normal_tensor(b.bn.beta.shape(), 0.0, 0.2)?;
        b.conv.bias = rng.normal_tensor(b.conv.bias.shape(), 0.0, 0.1)?;
    }
    let x = rng.normal_tensor(&[2, 3, 8, 8], 0.0, 1.0)?;
    let target = rng.uniform_tensor(&[2, 7, 8, 8], 0.0, 1.0)?.map(|v| if v < 0.3 { 1.0 } else { 0.0 });

    let (probs, mut cache) = net.forward(&x, Mode::Train)?;
    let grads = net.backward(&mut cache, &bce_grad(&probs, &target)?)?;

    let sizes: Vec<usize> = net.trainable().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut flat = rng.next_below(total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let analytic = grads.tensors[which].data()[flat];
        let eval = |delta: f64| -> Result<f64> {
            let mut probe = net.clone();
            probe.trainable_mut()[which].data_mut()[flat] += delta;
            let (p, _) = probe.forward(&x, Mode::Train)?;
            Ok(bce_loss(&p, &target)?.total)
        };
        let fd = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic, fd));
    }
    Ok(CheckResult { name: "network(bce)".into(), max_rel_err: worst, checked: samples })
}

/// Every layer check plus the end-to-end network check.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Prng::new(seed);
    Ok(vec![
        check_conv(&mut rng)?,
        check_batchnorm(&mut rng, Mode::Train)?,
        check_batchnorm(&mut rng, Mode::Infer)?,
        check_relu(&mut rng)?,
        check_pool_unpool(&mut rng)?,
        check_sigmoid(&mut rng)?,
        check_network(&mut rng, 50)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_checks_pass() {
        let mut rng = Prng::new(123);
        for r in [
            check_conv(&mut rng).unwrap(),
            check_batchnorm(&mut rng, Mode::Train).unwrap(),
            check_batchnorm(&mut rng, Mode::Infer).unwrap(),
            check_relu(&mut rng).unwrap(),
            check_pool_unpool(&mut rng).unwrap(),
            check_sigmoid(&mut rng).unwrap(),
        ] {
            assert!(r.passed(), "{} max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        // a deliberately wrong derivative must be caught
        let x = Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let wrong = x.map(|v| 2.0 * v.cos());
        assert!(compare(&x, &wrong, |xi| xi.data().iter().map(|v| v.sin()).sum()) > 0.1);
        let right = x.map(f64::cos);
        assert!(compare(&x, &right, |xi| xi.data().iter().map(|v| v.sin()).sum()) < 1e-8);
    }
}
