//! The training loop: per batch, grow adversarial examples, slice them
//! into bit-plane patterns, take one optimizer step on the combined
//! loss. The baseline defense is the same loop with both extra loss
//! weights at zero, which degenerates to cross-entropy on adversarial
//! examples; with a zero budget that in turn degenerates to standard
//! training. Everything is deterministic under (config, data): seeds
//! for the data stream, the training attack, and the evaluation probe
//! are derived per purpose and epoch from the run seed.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::{self, AttackConfig, AttackMethod};
use crate::data::Dataset;
use crate::losses::{self, LossConfig};
use crate::model::{self, NetworkConfig, NetworkParams, OptimizerState};
use crate::tensor::Tensor;
use crate::{Error, Result};

const EVAL_BATCH: usize = 128;

/// Evaluation-time iteration count for the iterated attacks.
pub const EVAL_ATTACK_STEPS: usize = 20;

/// One full training run's knobs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Training-time attack; iterated projected steps.
    pub attack: AttackConfig,
    pub loss: LossConfig,
    /// Bit planes kept in the natural pattern.
    pub k: u8,
    /// Learning-rate decay points as fractions of total epochs.
    pub milestones: Vec<f64>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random crop and flip on the clean batch, before the attack.
    pub augment: bool,
    /// Examples from the head of the eval set probed per epoch.
    pub probe_size: usize,
    /// Iterations of the per-epoch robustness probe.
    pub probe_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            seed: 0,
            attack: AttackConfig::default(),
            loss: LossConfig::default(),
            k: 2,
            milestones: vec![0.5, 0.75],
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            augment: true,
            probe_size: 500,
            probe_steps: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1".to_string()));
        }
        if self.k > 8 {
            return Err(Error::invalid(format!("K {} must be in [0,8]", self.k)));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum {} must be in [0,1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self
            .milestones
            .iter()
            .any(|m| !(0.0..=1.0).contains(m))
        {
            return Err(Error::invalid(format!(
                "milestones {:?} must be fractions in [0,1]",
                self.milestones
            )));
        }
        if self.probe_size < 1 || self.probe_steps < 1 {
            return Err(Error::invalid(
                "probe_size and probe_steps must be at least 1".to_string(),
            ));
        }
        self.attack.validate()?;
        self.loss.validate()
    }
}

/// One completed epoch. Wall time stays in memory; it is skipped on
/// serialization so metric files are reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_pd: f64,
    pub loss_mg_soft: f64,
    pub loss_total: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::invalid(format!("metrics serialization: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }
}

pub struct TrainOutcome {
    pub params: NetworkParams,
    pub metrics: RunMetrics,
}

/// Stateless seed derivation: one independent stream per purpose and
/// epoch, all reproducible from the run seed.
fn split_mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, purpose: u64, epoch: usize) -> u64 {
    split_mix(split_mix(base ^ purpose) ^ epoch as u64)
}

const SEED_DATA: u64 = 1;
const SEED_ATTACK: u64 = 2;
const SEED_PROBE: u64 = 3;
const SEED_EVAL: u64 = 4;

fn at_batch(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(s) => {
            Error::NonFinite(format!("epoch {epoch}, batch {batch}: {s}"))
        }
        other => other,
    }
}

/// Fraction of `set[lo..hi]` classified to the true label.
pub fn accuracy(params: &NetworkParams, set: &Dataset, lo: usize, hi: usize) -> Result<f64> {
    if lo >= hi || hi > set.len() {
        return Err(Error::invalid(format!(
            "range {lo}..{hi} invalid for dataset of {}",
            set.len()
        )));
    }
    let mut correct = 0usize;
    let mut at = lo;
    while at < hi {
        let end = (at + EVAL_BATCH).min(hi);
        let chunk = set.slice_tensor(at, end)?;
        let preds = model::predict(params, &chunk)?;
        correct += preds
            .iter()
            .zip(&set.labels()[at..end])
            .filter(|(p, y)| p == y)
            .count();
        at = end;
    }
    Ok(correct as f64 / (hi - lo) as f64)
}

fn check_datasets(cfg: &TrainConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<NetworkConfig> {
    cfg.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::invalid("datasets must be non-empty".to_string()));
    }
    if train_set.dims() != eval_set.dims() {
        return Err(Error::invalid(format!(
            "train dims {:?} and eval dims {:?} differ",
            train_set.dims(),
            eval_set.dims()
        )));
    }
    if train_set.class_count() != eval_set.class_count() {
        return Err(Error::invalid(format!(
            "train classes {} and eval classes {} differ",
            train_set.class_count(),
            eval_set.class_count()
        )));
    }
    let (c, h, w) = train_set.dims().expect("non-empty");
    let net = NetworkConfig {
        in_channels: c,
        height: h,
        width: w,
        num_classes: train_set.class_count(),
    };
    net.validate()?;
    Ok(net)
}

/// Full training run with the combined loss. With both extra weights
/// at zero this is exactly the baseline defense.
pub fn train_f2at(
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<TrainOutcome> {
    let net = check_datasets(cfg, train_set, eval_set)?;
    let mut params = NetworkParams::init(net, cfg.seed)?;
    let mut opt = OptimizerState::new(&params, cfg.base_lr);
    let mut records = Vec::with_capacity(cfg.epochs);

    let probe_hi = cfg.probe_size.min(eval_set.len());
    for epoch0 in 0..cfg.epochs {
        let started = Instant::now();
        let epoch = epoch0 + 1;
        let lr = model::lr_at_epoch(cfg.base_lr, epoch0, cfg.epochs, &cfg.milestones);
        let mut attack_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_ATTACK, epoch0));
        let data_seed = derive_seed(cfg.seed, SEED_DATA, epoch0);

        let (mut sum_ce, mut sum_pd, mut sum_mg) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (b, (clean, labels)) in train_set
            .batches(cfg.batch_size, data_seed, true, cfg.augment)?
            .enumerate()
        {
            let adv = attacks::generate_adversarial(
                AttackMethod::Pgd,
                &params,
                &clean,
                &labels,
                &cfg.attack,
                &mut attack_rng,
            )
            .map_err(|e| at_batch(e, epoch, b))?;

            let mut g = crate::tensor::ValueGraph::new();
            let gp = params.insert(&mut g);
            let (total, breakdown) =
                losses::build_total_loss(&mut g, &gp, &adv, &labels, &cfg.loss, cfg.k)
                    .map_err(|e| at_batch(e, epoch, b))?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {b}: loss value {}",
                    breakdown.total
                )));
            }
            let grads = g.backward(total)?;
            let gvec: Vec<Tensor> = gp
                .ids
                .iter()
                .map(|id| grads.wrt(*id).cloned().expect("parameters are leaves"))
                .collect();
            model::sgd_step(&mut params, &gvec, &mut opt, lr, cfg.momentum, cfg.weight_decay)?;

            sum_ce += breakdown.ce;
            sum_pd += breakdown.pd;
            sum_mg += breakdown.mg_soft;
            batches += 1;
        }

        let nb = batches as f64;
        let (loss_ce, loss_pd, loss_mg_soft) = (sum_ce / nb, sum_pd / nb, sum_mg / nb);
        // Recombined from the means so the recorded decomposition
        // identity holds exactly.
        let loss_total = loss_ce + cfg.loss.alpha * loss_pd + cfg.loss.gamma * loss_mg_soft;

        let clean_acc = accuracy(&params, eval_set, 0, eval_set.len())?;
        let probe_cfg = AttackConfig {
            steps: cfg.probe_steps,
            ..cfg.attack
        };
        let probe_images = eval_set.slice_tensor(0, probe_hi)?;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_PROBE, epoch0));
        let robust_acc = attacks::evaluate_robustness(
            &params,
            &probe_images,
            &eval_set.labels()[..probe_hi],
            AttackMethod::Pgd,
            &probe_cfg,
            &mut probe_rng,
        )?;

        records.push(EpochRecord {
            epoch,
            lr,
            loss_ce,
            loss_pd,
            loss_mg_soft,
            loss_total,
            clean_acc,
            robust_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome {
        params,
        metrics: RunMetrics { records },
    })
}

/// Baseline defense: cross-entropy on adversarial examples only. The
/// same loop as `train_f2at` with both extra weights zeroed, bit for
/// bit.
pub fn train_sat(
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<TrainOutcome> {
    let mut sat = cfg.clone();
    sat.loss.alpha = 0.0;
    sat.loss.gamma = 0.0;
    train_f2at(&sat, train_set, eval_set)
}

/// Accuracy of one trained model against the evaluation attack grid:
/// single-step sign, iterated projected (at `EVAL_ATTACK_STEPS`), and
/// momentum iterated.
#[derive(Clone, Debug, Serialize)]
pub struct AttackCell {
    pub method: String,
    pub steps: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub clean_acc: f64,
    pub cells: Vec<AttackCell>,
}

pub fn evaluate_grid(
    params: &NetworkParams,
    eval_set: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::invalid("evaluation set is empty".to_string()));
    }
    let clean_acc = accuracy(params, eval_set, 0, eval_set.len())?;
    let images = eval_set.slice_tensor(0, eval_set.len())?;
    let mut cells = Vec::new();
    for method in AttackMethod::ALL {
        let steps = match method {
            AttackMethod::Fgsm => 1,
            _ => EVAL_ATTACK_STEPS,
        };
        let cfg = AttackConfig {
            steps,
            ..*attack
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_EVAL, steps));
        let acc = attacks::evaluate_robustness(
            params,
            &images,
            eval_set.labels(),
            method,
            &cfg,
            &mut rng,
        )?;
        cells.push(AttackCell {
            method: method.name().to_string(),
            steps,
            accuracy: acc,
        });
    }
    Ok(EvalReport { clean_acc, cells })
}

/// One row of the plane-count sweep.
#[derive(Clone, Debug, Serialize)]
pub struct KSweepRow {
    pub k: u8,
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub mifgsm_acc: f64,
}

/// One full training run per K, rows in ascending K order.
pub fn k_sweep(
    cfg: &TrainConfig,
    k_values: &[u8],
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<Vec<KSweepRow>> {
    if k_values.is_empty() {
        return Err(Error::invalid("k_sweep needs at least one K".to_string()));
    }
    if let Some(&bad) = k_values.iter().find(|&&k| k > 8) {
        return Err(Error::invalid(format!("K {bad} must be in [0,8]")));
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let mut run_cfg = cfg.clone();
        run_cfg.k = k;
        let outcome = train_f2at(&run_cfg, train_set, eval_set)?;
        let report = evaluate_grid(&outcome.params, eval_set, &cfg.attack, cfg.seed)?;
        let find = |name: &str| {
            report
                .cells
                .iter()
                .find(|c| c.method == name)
                .expect("grid covers all methods")
                .accuracy
        };
        rows.push(KSweepRow {
            k,
            clean_acc: report.clean_acc,
            fgsm_acc: find("fgsm"),
            pgd_acc: find("pgd"),
            mifgsm_acc: find("mifgsm"),
        });
    }
    Ok(rows)
}

/// Per-variant prediction census on the evaluation set: how often each
/// class is predicted, how confident the top softmax is, and the
/// per-example decision margin.
#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticVariant {
    pub name: String,
    pub class_frequency: Vec<usize>,
    pub confidences: Vec<f64>,
    pub margins: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    pub variants: Vec<DiagnosticVariant>,
}

fn census(
    name: &str,
    params: &NetworkParams,
    images: &Tensor,
    labels: &[usize],
    class_count: usize,
) -> Result<DiagnosticVariant> {
    let n = images.shape()[0];
    let mut class_frequency = vec![0usize; class_count];
    let mut confidences = Vec::with_capacity(n);
    let mut margins = Vec::with_capacity(n);
    let row_len: usize = images.shape()[1..].iter().product();
    let mut at = 0;
    while at < n {
        let end = (at + EVAL_BATCH).min(n);
        let chunk = Tensor::new(
            {
                let mut s = images.shape().to_vec();
                s[0] = end - at;
                s
            },
            images.data()[at * row_len..end * row_len].to_vec(),
        )?;
        let (_, logits) = model::forward(params, &chunk)?;
        let preds = model::argmax_rows(&logits)?;
        for p in &preds {
            class_frequency[*p] += 1;
        }
        let c = logits.shape()[1];
        for i in 0..(end - at) {
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            confidences.push(1.0 / z);
        }
        margins.extend(losses::margins_of(&logits, &labels[at..end])?);
        at = end;
    }
    Ok(DiagnosticVariant {
        name: name.to_string(),
        class_frequency,
        confidences,
        margins,
    })
}

pub fn diagnostics(
    params: &NetworkParams,
    eval_set: &Dataset,
    methods: &[AttackMethod],
    attack: &AttackConfig,
    seed: u64,
) -> Result<DiagnosticsReport> {
    if eval_set.is_empty() {
        return Err(Error::invalid("evaluation set is empty".to_string()));
    }
    let images = eval_set.slice_tensor(0, eval_set.len())?;
    let labels = eval_set.labels();
    let classes = eval_set.class_count();
    let mut variants = vec![census("clean", params, &images, labels, classes)?];
    for (i, method) in methods.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_EVAL, i));
        let mut adv_parts = Vec::with_capacity(images.numel());
        let row_len: usize = images.shape()[1..].iter().product();
        let mut at = 0;
        while at < eval_set.len() {
            let end = (at + EVAL_BATCH).min(eval_set.len());
            let chunk = eval_set.slice_tensor(at, end)?;
            let adv = attacks::generate_adversarial(
                *method,
                params,
                &chunk,
                &labels[at..end],
                attack,
                &mut rng,
            )?;
            adv_parts.extend_from_slice(adv.data());
            at = end;
        }
        debug_assert_eq!(adv_parts.len(), eval_set.len() * row_len);
        let mut shape = images.shape().to_vec();
        shape[0] = eval_set.len();
        let adv_images = Tensor::new(shape, adv_parts)?;
        variants.push(census(method.name(), params, &adv_images, labels, classes)?);
    }
    Ok(DiagnosticsReport { variants })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    /// Small enough to run in seconds: 16 train/8 eval examples of
    /// 3x8x8, two classes, two attack steps.
    fn micro_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            attack: AttackConfig {
                steps: 2,
                ..AttackConfig::default()
            },
            probe_size: 8,
            probe_steps: 1,
            ..TrainConfig::default()
        }
    }

    fn micro_sets() -> (Dataset, Dataset) {
        (
            synth_dataset(100, 16, 2, 8).unwrap(),
            synth_dataset(101, 8, 2, 8).unwrap(),
        )
    }

    #[test]
    fn zero_epochs_is_rejected_and_one_epoch_yields_one_record() {
        let (train, eval) = micro_sets();
        let mut cfg = micro_config();
        cfg.epochs = 0;
        assert!(train_f2at(&cfg, &train, &eval).is_err());
        cfg.epochs = 1;
        let out = train_f2at(&cfg, &train, &eval).unwrap();
        assert_eq!(out.metrics.records.len(), 1);
        assert_eq!(out.metrics.records[0].epoch, 1);
    }

    #[test]
    fn baseline_equals_zero_weight_run_bit_for_bit() {
        let (train, eval) = micro_sets();
        let cfg = micro_config();
        let mut zeroed = cfg.clone();
        zeroed.loss.alpha = 0.0;
        zeroed.loss.gamma = 0.0;
        let a = train_sat(&cfg, &train, &eval).unwrap();
        let b = train_f2at(&zeroed, &train, &eval).unwrap();
        assert_eq!(
            a.metrics.to_jsonl().unwrap(),
            b.metrics.to_jsonl().unwrap()
        );
        assert_eq!(
            model::checkpoint_bytes(&a.params),
            model::checkpoint_bytes(&b.params)
        );
    }

    #[test]
    fn identical_configs_produce_identical_runs() {
        let (train, eval) = micro_sets();
        let cfg = micro_config();
        let a = train_f2at(&cfg, &train, &eval).unwrap();
        let b = train_f2at(&cfg, &train, &eval).unwrap();
        assert_eq!(
            a.metrics.to_jsonl().unwrap(),
            b.metrics.to_jsonl().unwrap()
        );
        assert_eq!(
            model::checkpoint_bytes(&a.params),
            model::checkpoint_bytes(&b.params)
        );
    }

    #[test]
    fn recorded_decomposition_identity_is_exact() {
        let (train, eval) = micro_sets();
        let mut cfg = micro_config();
        cfg.epochs = 2;
        let out = train_f2at(&cfg, &train, &eval).unwrap();
        for r in &out.metrics.records {
            let recombined =
                r.loss_ce + cfg.loss.alpha * r.loss_pd + cfg.loss.gamma * r.loss_mg_soft;
            assert!((r.loss_total - recombined).abs() <= 1e-12);
        }
    }

    #[test]
    fn learning_rate_follows_the_milestone_schedule() {
        let (train, eval) = micro_sets();
        let mut cfg = micro_config();
        cfg.epochs = 4;
        let out = train_f2at(&cfg, &train, &eval).unwrap();
        let lrs: Vec<f64> = out.metrics.records.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.01, 0.001]);
    }

    #[test]
    fn wall_time_is_not_serialized() {
        let (train, eval) = micro_sets();
        let out = train_f2at(&micro_config(), &train, &eval).unwrap();
        assert!(out.metrics.records[0].wall_seconds > 0.0);
        assert!(!out.metrics.to_jsonl().unwrap().contains("wall"));
    }

    #[test]
    fn mismatched_datasets_are_rejected() {
        let train = synth_dataset(100, 16, 2, 8).unwrap();
        let eval_other_side = synth_dataset(101, 8, 2, 12).unwrap();
        assert!(train_f2at(&micro_config(), &train, &eval_other_side).is_err());
        let eval_other_classes = synth_dataset(101, 9, 3, 8).unwrap();
        assert!(train_f2at(&micro_config(), &train, &eval_other_classes).is_err());
    }

    #[test]
    fn uniform_logit_model_census_is_flat() {
        let (_, eval) = micro_sets();
        let (c, h, w) = eval.dims().unwrap();
        let net = NetworkConfig {
            in_channels: c,
            height: h,
            width: w,
            num_classes: 2,
        };
        let mut params = NetworkParams::init(net, 7).unwrap();
        params.head_w = Tensor::zeros(params.head_w.shape());
        params.head_b = Tensor::zeros(params.head_b.shape());
        let report = diagnostics(&params, &eval, &[], &AttackConfig::default(), 0).unwrap();
        let clean = &report.variants[0];
        // Equal logits: the tie breaks to class 0 everywhere, and every
        // confidence is exactly 1/num_classes.
        assert_eq!(clean.class_frequency, vec![eval.len(), 0]);
        assert!(clean.confidences.iter().all(|&p| p == 0.5));
        assert!(clean.margins.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn diagnostics_counts_sum_to_dataset_size() {
        let (train, eval) = micro_sets();
        let out = train_f2at(&micro_config(), &train, &eval).unwrap();
        let report = diagnostics(
            &out.params,
            &eval,
            &[AttackMethod::Fgsm, AttackMethod::Pgd],
            &AttackConfig::default(),
            3,
        )
        .unwrap();
        assert_eq!(report.variants.len(), 3);
        for v in &report.variants {
            assert_eq!(v.class_frequency.iter().sum::<usize>(), eval.len());
            assert!(v.confidences.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(v.margins.len(), eval.len());
        }
    }

    #[test]
    fn k_sweep_emits_one_sorted_row_per_k() {
        let (train, eval) = micro_sets();
        let rows = k_sweep(&micro_config(), &[8, 2], &train, &eval).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].k, 2);
        assert_eq!(rows[1].k, 8);
        assert!(k_sweep(&micro_config(), &[9], &train, &eval).is_err());
        assert!(k_sweep(&micro_config(), &[], &train, &eval).is_err());
    }

    #[test]
    fn evaluate_grid_covers_all_methods() {
        let (train, eval) = micro_sets();
        let out = train_sat(&micro_config(), &train, &eval).unwrap();
        let report = evaluate_grid(&out.params, &eval, &AttackConfig::default(), 0).unwrap();
        let names: Vec<&str> = report.cells.iter().map(|c| c.method.as_str()).collect();
        assert_eq!(names, vec!["fgsm", "pgd", "mifgsm"]);
        assert_eq!(report.cells[1].steps, EVAL_ATTACK_STEPS);
        for cell in &report.cells {
            assert!((0.0..=1.0).contains(&cell.accuracy));
        }
    }
}
