//! Gradient attacks in continuous [0,1] image space: single-step sign
//! (FGSM), iterated projected steps (PGD), and momentum-accumulated
//! iterated steps (MI-FGSM), plus white-box and transfer evaluation.
//!
//! All three methods share one step loop, so the single-step cases
//! coincide bitwise: PGD with steps=1, step_size=epsilon, and no random
//! start reproduces FGSM exactly. The attack loss is batch-mean
//! cross-entropy; the mean's 1/n factor scales every per-example
//! gradient uniformly, so sign steps and per-example L1 normalization
//! are unchanged by it.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{self, NetworkParams};
use crate::tensor::{Primitive, Tensor, ValueGraph};
use crate::{Error, Result};

/// Slack on the L-infinity ball check: absorbs the rounding of the
/// projection arithmetic itself, nothing more.
pub const BALL_TOL: f64 = 1e-9;

const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    MiFgsm,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::MiFgsm => "mifgsm",
        }
    }

    pub const ALL: [AttackMethod; 3] = [AttackMethod::Fgsm, AttackMethod::Pgd, AttackMethod::MiFgsm];
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "pgd" => Ok(AttackMethod::Pgd),
            "mifgsm" | "mi-fgsm" => Ok(AttackMethod::MiFgsm),
            other => Err(Error::invalid(format!(
                "unknown attack method '{other}' (expected fgsm, pgd, or mifgsm)"
            ))),
        }
    }
}

/// Budget and schedule of one attack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttackConfig {
    /// L-infinity budget in [0,1] units.
    pub epsilon: f64,
    /// Iteration count for the iterated methods.
    pub steps: usize,
    /// Per-iteration step size for the iterated methods.
    pub step_size: f64,
    /// Momentum decay, used by mifgsm only.
    pub momentum_decay: f64,
    /// Uniform random start inside the ball, used by pgd only.
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: 0.007,
            momentum_decay: 1.0,
            random_start: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!(
                "epsilon {} must be in [0,1]",
                self.epsilon
            )));
        }
        if self.steps < 1 {
            return Err(Error::invalid("steps must be at least 1".to_string()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!(
                "step_size {} must be positive",
                self.step_size
            )));
        }
        if !(self.momentum_decay >= 0.0) || !self.momentum_decay.is_finite() {
            return Err(Error::invalid(format!(
                "momentum_decay {} must be >= 0",
                self.momentum_decay
            )));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Batch-mean cross-entropy gradient with respect to the input batch.
fn input_gradient(params: &NetworkParams, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut g = ValueGraph::new();
    let gp = params.insert(&mut g);
    let xid = g.leaf(x.clone());
    let (_, logits) = model::forward_on(&mut g, &gp, xid)?;
    let ce = g.apply(
        Primitive::SoftmaxCrossEntropy {
            labels: labels.to_vec(),
        },
        &[logits],
    )?;
    let grads = g.backward(ce)?;
    Ok(grads
        .wrt(xid)
        .cloned()
        .expect("input feeds the loss, so its gradient exists"))
}

struct StepPlan {
    steps: usize,
    step_size: f64,
    random_start: bool,
    momentum: Option<f64>,
}

/// Grow an adversarial batch from `x` against `params`.
///
/// The returned batch satisfies the L-infinity budget within `BALL_TOL`
/// and lies in [0,1]; both are asserted before returning. FGSM ignores
/// steps, step_size, and random_start: it is defined as one signed step
/// of size epsilon from the clean input.
pub fn generate_adversarial(
    method: AttackMethod,
    params: &NetworkParams,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid(format!(
            "attack input must be [n,c,h,w], got shape {:?}",
            x.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(
            "attack input must lie in [0,1]".to_string(),
        ));
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }

    let plan = match method {
        AttackMethod::Fgsm => StepPlan {
            steps: 1,
            step_size: cfg.epsilon,
            random_start: false,
            momentum: None,
        },
        AttackMethod::Pgd => StepPlan {
            steps: cfg.steps,
            step_size: cfg.step_size,
            random_start: cfg.random_start,
            momentum: None,
        },
        // The momentum method starts from the clean input in its
        // standard form; random_start does not apply to it.
        AttackMethod::MiFgsm => StepPlan {
            steps: cfg.steps,
            step_size: cfg.step_size,
            random_start: false,
            momentum: Some(cfg.momentum_decay),
        },
    };

    let eps = cfg.epsilon;
    let x0 = x.data();
    let mut cur: Vec<f64> = x0.to_vec();
    if plan.random_start {
        for (v, &orig) in cur.iter_mut().zip(x0.iter()) {
            *v = (orig + rng.random_range(-eps..eps)).clamp(0.0, 1.0);
        }
    }

    let example_len = c * h * w;
    let mut velocity = vec![0.0; x0.len()];
    for step in 0..plan.steps {
        let cur_t = Tensor::new(x.shape().to_vec(), cur.clone())?;
        let grad = input_gradient(params, &cur_t, labels)?;
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "adversarial gradient at step {step} of {}",
                method.name()
            )));
        }
        let gd = grad.data();
        let dir: &[f64] = match plan.momentum {
            None => gd,
            Some(mu) => {
                // Per-example L1-normalized accumulation; a zero-gradient
                // example contributes nothing this step.
                for i in 0..n {
                    let lo = i * example_len;
                    let hi = lo + example_len;
                    let l1: f64 = gd[lo..hi].iter().map(|v| v.abs()).sum();
                    if l1 == 0.0 {
                        for v in &mut velocity[lo..hi] {
                            *v *= mu;
                        }
                    } else {
                        for (v, &gv) in velocity[lo..hi].iter_mut().zip(&gd[lo..hi]) {
                            *v = mu * *v + gv / l1;
                        }
                    }
                }
                &velocity
            }
        };
        for ((v, &d), &orig) in cur.iter_mut().zip(dir.iter()).zip(x0.iter()) {
            let stepped = *v + plan.step_size * sign(d);
            let lo = (orig - eps).max(0.0);
            let hi = (orig + eps).min(1.0);
            *v = stepped.clamp(lo, hi);
        }
    }

    let out = Tensor::new(x.shape().to_vec(), cur)?;
    let dist = out.linf_dist(x)?;
    if dist > eps + BALL_TOL {
        return Err(Error::invalid(format!(
            "projection violated the budget: distance {dist} > epsilon {eps}"
        )));
    }
    if out.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(
            "projection left the [0,1] range".to_string(),
        ));
    }
    Ok(out)
}

fn slice_rows(x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let shape = x.shape();
    let row: usize = shape[1..].iter().product();
    let mut sub = shape.to_vec();
    sub[0] = hi - lo;
    Tensor::new(sub, x.data()[lo * row..hi * row].to_vec())
}

/// Fraction of examples still classified to their true label after the
/// attack. Generation and prediction run in batches of at most 128.
pub fn evaluate_robustness(
    params: &NetworkParams,
    images: &Tensor,
    labels: &[usize],
    method: AttackMethod,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    transfer_attack(params, params, images, labels, method, cfg, rng)
}

/// Adversarial examples grown on `surrogate`, accuracy measured on
/// `target`. With surrogate == target this is white-box evaluation.
pub fn transfer_attack(
    surrogate: &NetworkParams,
    target: &NetworkParams,
    images: &Tensor,
    labels: &[usize],
    method: AttackMethod,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (sc, tc) = (&surrogate.config, &target.config);
    if (sc.in_channels, sc.height, sc.width) != (tc.in_channels, tc.height, tc.width) {
        return Err(Error::invalid(format!(
            "surrogate input geometry {}x{}x{} does not match target {}x{}x{}",
            sc.in_channels, sc.height, sc.width, tc.in_channels, tc.height, tc.width
        )));
    }
    let &[n, ..] = images.shape() else {
        return Err(Error::invalid(format!(
            "evaluation batch must be [n,c,h,w], got shape {:?}",
            images.shape()
        )));
    };
    if n == 0 || labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for a non-empty batch of {n}",
            labels.len()
        )));
    }
    let mut correct = 0usize;
    let mut lo = 0;
    while lo < n {
        let hi = (lo + EVAL_BATCH).min(n);
        let chunk = slice_rows(images, lo, hi)?;
        let chunk_labels = &labels[lo..hi];
        let adv = generate_adversarial(method, surrogate, &chunk, chunk_labels, cfg, rng)?;
        let preds = model::predict(target, &adv)?;
        correct += preds
            .iter()
            .zip(chunk_labels)
            .filter(|(p, y)| p == y)
            .count();
        lo = hi;
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NetworkConfig, OptimizerState};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_config() -> NetworkConfig {
        NetworkConfig {
            in_channels: 1,
            height: 8,
            width: 8,
            num_classes: 2,
        }
    }

    fn toy_params(seed: u64) -> NetworkParams {
        NetworkParams::init(toy_config(), seed).unwrap()
    }

    fn toy_batch(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..n * 64).map(|_| r.random_range(0.0..=1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2usize)).collect();
        (Tensor::new(vec![n, 1, 8, 8], data).unwrap(), labels)
    }

    /// Bright images are class 1, dark images class 0; linearly
    /// separable, so a few plain cross-entropy steps suffice.
    fn separable_batch(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
        let mut r = rng(seed);
        let mut data = Vec::with_capacity(n * 64);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let base = if label == 0 { 0.42 } else { 0.58 };
            for _ in 0..64 {
                data.push(base + r.random_range(-0.05..0.05));
            }
            labels.push(label);
        }
        (Tensor::new(vec![n, 1, 8, 8], data).unwrap(), labels)
    }

    fn train_undefended(params: &mut NetworkParams, x: &Tensor, y: &[usize], steps: usize) {
        let mut state = OptimizerState::new(params, 0.05);
        for _ in 0..steps {
            let mut g = ValueGraph::new();
            let gp = params.insert(&mut g);
            let xid = g.leaf(x.clone());
            let (_, logits) = model::forward_on(&mut g, &gp, xid).unwrap();
            let ce = g
                .apply(
                    Primitive::SoftmaxCrossEntropy { labels: y.to_vec() },
                    &[logits],
                )
                .unwrap();
            let grads = g.backward(ce).unwrap();
            let gvec: Vec<Tensor> = gp
                .ids
                .iter()
                .map(|id| grads.wrt(*id).cloned().unwrap())
                .collect();
            model::sgd_step(params, &gvec, &mut state, 0.05, 0.9, 0.0).unwrap();
        }
    }

    #[test]
    fn zero_epsilon_returns_input_unchanged() {
        let params = toy_params(1);
        let (x, y) = toy_batch(2, 3);
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        for method in AttackMethod::ALL {
            let adv = generate_adversarial(method, &params, &x, &y, &cfg, &mut rng(3)).unwrap();
            assert_eq!(adv, x, "{}", method.name());
        }
    }

    #[test]
    fn fgsm_matches_finite_difference_sign_oracle() {
        let params = toy_params(4);
        let (x, y) = toy_batch(5, 2);
        let eps = 0.05;
        let cfg = AttackConfig {
            epsilon: eps,
            ..AttackConfig::default()
        };
        let adv =
            generate_adversarial(AttackMethod::Fgsm, &params, &x, &y, &cfg, &mut rng(6)).unwrap();

        let loss_at = |t: &Tensor| -> f64 {
            let mut g = ValueGraph::new();
            let gp = params.insert(&mut g);
            let xid = g.leaf(t.clone());
            let (_, logits) = model::forward_on(&mut g, &gp, xid).unwrap();
            let ce = g
                .apply(
                    Primitive::SoftmaxCrossEntropy { labels: y.clone() },
                    &[logits],
                )
                .unwrap();
            g.scalar(ce).unwrap()
        };

        let h = 1e-4;
        let mut confident = 0;
        for i in 0..x.numel() {
            let v = x.data()[i];
            let plus = loss_at(&x.with_value_at(i, v + h));
            let minus = loss_at(&x.with_value_at(i, v - h));
            let fd = (plus - minus) / (2.0 * h);
            if fd.abs() > 1e-6 {
                let expected = (v + eps * sign(fd)).clamp(0.0, 1.0);
                assert!(
                    (adv.data()[i] - expected).abs() <= 1e-12,
                    "coordinate {i}: got {}, oracle {expected}",
                    adv.data()[i]
                );
                confident += 1;
            } else {
                assert!((adv.data()[i] - v).abs() <= eps + BALL_TOL);
            }
        }
        assert!(confident > x.numel() / 2, "oracle exercised {confident} coords");
    }

    #[test]
    fn single_step_pgd_reproduces_fgsm_bitwise() {
        let params = toy_params(7);
        let (x, y) = toy_batch(8, 3);
        let eps = 8.0 / 255.0;
        let fgsm_cfg = AttackConfig {
            epsilon: eps,
            ..AttackConfig::default()
        };
        let pgd_cfg = AttackConfig {
            epsilon: eps,
            steps: 1,
            step_size: eps,
            random_start: false,
            ..AttackConfig::default()
        };
        let a = generate_adversarial(AttackMethod::Fgsm, &params, &x, &y, &fgsm_cfg, &mut rng(9))
            .unwrap();
        let b = generate_adversarial(AttackMethod::Pgd, &params, &x, &y, &pgd_cfg, &mut rng(10))
            .unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn all_methods_respect_ball_and_range() {
        let params = toy_params(11);
        let (x, y) = toy_batch(12, 4);
        let cfg = AttackConfig {
            epsilon: 0.1,
            steps: 5,
            step_size: 0.03,
            ..AttackConfig::default()
        };
        for method in AttackMethod::ALL {
            let adv =
                generate_adversarial(method, &params, &x, &y, &cfg, &mut rng(13)).unwrap();
            assert!(adv.linf_dist(&x).unwrap() <= cfg.epsilon + BALL_TOL);
            assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn random_start_is_seed_deterministic() {
        let params = toy_params(14);
        let (x, y) = toy_batch(15, 2);
        let cfg = AttackConfig::default();
        let a = generate_adversarial(AttackMethod::Pgd, &params, &x, &y, &cfg, &mut rng(16))
            .unwrap();
        let b = generate_adversarial(AttackMethod::Pgd, &params, &x, &y, &cfg, &mut rng(16))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_model_gradient_leaves_input_unchanged() {
        let mut params = toy_params(17);
        for t in [
            &mut params.conv1_w,
            &mut params.conv1_b,
            &mut params.conv2_w,
            &mut params.conv2_b,
            &mut params.fc_w,
            &mut params.fc_b,
            &mut params.head_w,
            &mut params.head_b,
        ] {
            *t = Tensor::zeros(t.shape());
        }
        let (x, y) = toy_batch(18, 2);
        let cfg = AttackConfig {
            random_start: false,
            ..AttackConfig::default()
        };
        for method in [AttackMethod::Fgsm, AttackMethod::MiFgsm] {
            let adv = generate_adversarial(method, &params, &x, &y, &cfg, &mut rng(19)).unwrap();
            assert_eq!(adv, x, "{}", method.name());
        }
    }

    #[test]
    fn iterated_attack_dominates_single_step_on_trained_toy() {
        let (x, y) = separable_batch(20, 64);
        let mut params = toy_params(21);
        train_undefended(&mut params, &x, &y, 40);
        let clean: f64 = {
            let preds = model::predict(&params, &x).unwrap();
            preds.iter().zip(&y).filter(|(p, l)| p == l).count() as f64 / y.len() as f64
        };
        assert!(clean >= 0.95, "toy model failed to train: {clean}");

        let cfg = AttackConfig {
            epsilon: 0.15,
            steps: 20,
            step_size: 0.02,
            ..AttackConfig::default()
        };
        let acc_pgd =
            evaluate_robustness(&params, &x, &y, AttackMethod::Pgd, &cfg, &mut rng(22)).unwrap();
        let acc_fgsm =
            evaluate_robustness(&params, &x, &y, AttackMethod::Fgsm, &cfg, &mut rng(23)).unwrap();
        let success_pgd = 1.0 - acc_pgd;
        let success_fgsm = 1.0 - acc_fgsm;
        assert!(
            success_pgd >= success_fgsm,
            "pgd {success_pgd} vs fgsm {success_fgsm}"
        );
        assert!(acc_pgd < clean, "attack had no effect");
    }

    #[test]
    fn attack_success_is_monotone_in_epsilon() {
        let (x, y) = separable_batch(24, 64);
        let mut params = toy_params(25);
        train_undefended(&mut params, &x, &y, 40);
        let mut last = -1.0;
        for eps in [0.02, 0.08, 0.2] {
            let cfg = AttackConfig {
                epsilon: eps,
                steps: 10,
                step_size: eps / 4.0,
                ..AttackConfig::default()
            };
            let acc = evaluate_robustness(&params, &x, &y, AttackMethod::Pgd, &cfg, &mut rng(26))
                .unwrap();
            let success = 1.0 - acc;
            assert!(
                success >= last - 1e-12,
                "success fell from {last} to {success} at eps {eps}"
            );
            last = success;
        }
    }

    #[test]
    fn zero_epsilon_evaluation_equals_clean_accuracy() {
        let params = toy_params(27);
        let (x, y) = toy_batch(28, 6);
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let robust =
            evaluate_robustness(&params, &x, &y, AttackMethod::Pgd, &cfg, &mut rng(29)).unwrap();
        let preds = model::predict(&params, &x).unwrap();
        let clean = preds.iter().zip(&y).filter(|(p, l)| p == l).count() as f64 / y.len() as f64;
        assert_eq!(robust, clean);
    }

    #[test]
    fn self_transfer_equals_white_box() {
        let params = toy_params(30);
        let (x, y) = toy_batch(31, 5);
        let cfg = AttackConfig::default();
        let white =
            evaluate_robustness(&params, &x, &y, AttackMethod::Pgd, &cfg, &mut rng(32)).unwrap();
        let transfer =
            transfer_attack(&params, &params, &x, &y, AttackMethod::Pgd, &cfg, &mut rng(32))
                .unwrap();
        assert_eq!(white, transfer);
    }

    #[test]
    fn transfer_rejects_mismatched_geometry() {
        let a = toy_params(33);
        let b = NetworkParams::init(
            NetworkConfig {
                in_channels: 3,
                height: 8,
                width: 8,
                num_classes: 2,
            },
            34,
        )
        .unwrap();
        let (x, y) = toy_batch(35, 2);
        let err = transfer_attack(&a, &b, &x, &y, AttackMethod::Fgsm, &AttackConfig::default(), &mut rng(36));
        assert!(err.is_err());
    }

    #[test]
    fn non_finite_gradient_aborts_with_diagnostic() {
        let mut params = toy_params(37);
        params.conv1_w = Tensor::filled(params.conv1_w.shape(), f64::INFINITY);
        let (x, y) = toy_batch(38, 2);
        let err = generate_adversarial(
            AttackMethod::Fgsm,
            &params,
            &x,
            &y,
            &AttackConfig::default(),
            &mut rng(39),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let params = toy_params(40);
        let (x, y) = toy_batch(41, 2);
        let bad_range = x.map(|v| v + 2.0);
        assert!(generate_adversarial(
            AttackMethod::Fgsm,
            &params,
            &bad_range,
            &y,
            &AttackConfig::default(),
            &mut rng(42)
        )
        .is_err());

        let bad_eps = AttackConfig {
            epsilon: 1.5,
            ..AttackConfig::default()
        };
        assert!(generate_adversarial(AttackMethod::Fgsm, &params, &x, &y, &bad_eps, &mut rng(43))
            .is_err());

        let bad_steps = AttackConfig {
            steps: 0,
            ..AttackConfig::default()
        };
        assert!(generate_adversarial(AttackMethod::Pgd, &params, &x, &y, &bad_steps, &mut rng(44))
            .is_err());

        assert!("cw".parse::<AttackMethod>().is_err());
        assert_eq!("mi-fgsm".parse::<AttackMethod>().unwrap(), AttackMethod::MiFgsm);
    }
}
