//! Training losses: cross-entropy, margin, smooth margin, and the
//! pattern-dependent contrastive term.
//!
//! Losses here use natural logarithms (nats); the information measures
//! elsewhere use bits. The combined objective skips a component entirely
//! when its weight is exactly zero, so a run with both extra weights at
//! zero records the same tape, and therefore the same bits, as plain
//! adversarial training.

use serde::Serialize;

use crate::bitplane;
use crate::model::{self, GraphParams, NetworkParams};
use crate::tensor::{NodeId, Primitive, Tensor, ValueGraph};
use crate::{Error, Result};

/// Quantization depth of the image pipeline: byte images.
pub const IMAGE_DEPTH: u8 = 8;

/// Weights and temperatures of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    /// Weight of the pattern-dependent term.
    pub alpha: f64,
    /// Weight of the smooth margin term.
    pub gamma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Smooth-max sharpness.
    pub upsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            gamma: 1.0,
            tau: 0.07,
            upsilon: 0.995,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("tau {} must be positive", self.tau)));
        }
        if !(self.upsilon > 0.0) || !self.upsilon.is_finite() {
            return Err(Error::invalid(format!(
                "upsilon {} must be positive",
                self.upsilon
            )));
        }
        Ok(())
    }
}

/// Per-component values of one combined-loss evaluation, in nats.
/// Components whose weight was exactly zero report 0 and are absent
/// from the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pd: f64,
    pub mg_soft: f64,
    pub total: f64,
}

/// Decision margin of one example: the true logit minus the best rival
/// logit. Positive exactly when the example is classified correctly
/// with room to spare.
pub fn margin(logits: &Tensor, label: usize) -> Result<f64> {
    let &[c] = logits.shape() else {
        return Err(Error::invalid(format!(
            "margin needs a logit vector, got shape {:?}",
            logits.shape()
        )));
    };
    if c < 2 {
        return Err(Error::invalid("margin needs at least 2 classes".to_string()));
    }
    if label >= c {
        return Err(Error::invalid(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    let d = logits.data();
    let rival = d
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(d[label] - rival)
}

/// Margin per row of a logit matrix.
pub fn margins_of(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let &[n, c] = logits.shape() else {
        return Err(Error::invalid(format!(
            "margins_of needs [n,c], got shape {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    (0..n)
        .map(|i| {
            let row = Tensor::new(vec![c], logits.data()[i * c..(i + 1) * c].to_vec())?;
            margin(&row, labels[i])
        })
        .collect()
}

/// Records the hard margin loss: mean over the batch of
/// (max over all logits) - (true logit). Nonnegative; zero exactly when
/// every example's true logit is the row maximum.
pub fn margin_loss_on(g: &mut ValueGraph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let best = g.apply(Primitive::MaxLastAxis, &[logits])?;
    let own = g.apply(
        Primitive::TakeLabel {
            labels: labels.to_vec(),
        },
        &[logits],
    )?;
    let gap = g.apply(Primitive::Sub, &[best, own])?;
    g.apply(Primitive::MeanReduce, &[gap])
}

/// Records the smooth margin loss: the negative batch mean of
/// true logit - (1/upsilon) ln sum over rivals of exp(upsilon rival).
/// As upsilon grows this approaches the negative mean margin from above.
pub fn soft_margin_loss_on(
    g: &mut ValueGraph,
    logits: NodeId,
    labels: &[usize],
    upsilon: f64,
) -> Result<NodeId> {
    if !(upsilon > 0.0) || !upsilon.is_finite() {
        return Err(Error::invalid(format!("upsilon {upsilon} must be positive")));
    }
    let own = g.apply(
        Primitive::TakeLabel {
            labels: labels.to_vec(),
        },
        &[logits],
    )?;
    let rivals = g.apply(
        Primitive::DropLabel {
            labels: labels.to_vec(),
        },
        &[logits],
    )?;
    let scaled = g.apply(Primitive::Scale { factor: upsilon }, &[rivals])?;
    let lse = g.apply(Primitive::LogSumExp, &[scaled])?;
    let smooth_max = g.apply(
        Primitive::Scale {
            factor: 1.0 / upsilon,
        },
        &[lse],
    )?;
    let inner = g.apply(Primitive::Sub, &[own, smooth_max])?;
    let mean = g.apply(Primitive::MeanReduce, &[inner])?;
    g.apply(Primitive::Scale { factor: -1.0 }, &[mean])
}

/// Records the pattern-dependent contrastive loss over feature matrices
/// [n,d]: for each example j, the positive is the cosine between its
/// natural-pattern feature and its adversarial feature; the candidates
/// are the cosines between every perturbed-pattern feature in the batch
/// (own index included) and that adversarial feature.
pub fn pattern_dependent_on(
    g: &mut ValueGraph,
    f_nat: NodeId,
    f_pert: NodeId,
    f_adv: NodeId,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau {tau} must be positive")));
    }
    let shape = g.tensor(f_adv).shape().to_vec();
    for id in [f_nat, f_pert] {
        if g.tensor(id).shape() != shape {
            return Err(Error::invalid(format!(
                "feature shapes {:?} and {:?} differ",
                g.tensor(id).shape(),
                shape
            )));
        }
    }
    let &[n, _d] = shape.as_slice() else {
        return Err(Error::invalid(format!(
            "pattern-dependent loss needs [n,d] features, got {shape:?}"
        )));
    };

    let nat_rows: Vec<NodeId> = (0..n)
        .map(|i| g.apply(Primitive::Row { index: i }, &[f_nat]))
        .collect::<Result<_>>()?;
    let pert_rows: Vec<NodeId> = (0..n)
        .map(|i| g.apply(Primitive::Row { index: i }, &[f_pert]))
        .collect::<Result<_>>()?;
    let adv_rows: Vec<NodeId> = (0..n)
        .map(|i| g.apply(Primitive::Row { index: i }, &[f_adv]))
        .collect::<Result<_>>()?;

    let inv_tau = 1.0 / tau;
    let mut terms = Vec::with_capacity(n);
    for j in 0..n {
        let pos = g.apply(Primitive::Cosine, &[nat_rows[j], adv_rows[j]])?;
        let neg_pos = g.apply(Primitive::Scale { factor: -inv_tau }, &[pos])?;
        let mut cands = Vec::with_capacity(n);
        for pert_row in &pert_rows {
            cands.push(g.apply(Primitive::Cosine, &[*pert_row, adv_rows[j]])?);
        }
        let stacked = g.apply(Primitive::Stack, &cands)?;
        let scaled = g.apply(Primitive::Scale { factor: inv_tau }, &[stacked])?;
        let lse = g.apply(Primitive::LogSumExp, &[scaled])?;
        terms.push(g.apply(Primitive::Add, &[neg_pos, lse])?);
    }
    let all = g.apply(Primitive::Stack, &terms)?;
    g.apply(Primitive::MeanReduce, &[all])
}

/// Pattern-dependent loss straight from feature matrices.
pub fn pattern_dependent_from_features(
    f_nat: &Tensor,
    f_pert: &Tensor,
    f_adv: &Tensor,
    tau: f64,
) -> Result<f64> {
    let mut g = ValueGraph::new();
    let a = g.leaf(f_nat.clone());
    let b = g.leaf(f_pert.clone());
    let c = g.leaf(f_adv.clone());
    let node = pattern_dependent_on(&mut g, a, b, c, tau)?;
    g.scalar(node)
}

/// Pattern-dependent loss of a model on three image batches.
pub fn pattern_dependent_loss(
    params: &NetworkParams,
    x_nat: &Tensor,
    x_pert: &Tensor,
    x_adv: &Tensor,
    tau: f64,
) -> Result<f64> {
    let mut g = ValueGraph::new();
    let gp = params.insert(&mut g);
    let nat = g.leaf(x_nat.clone());
    let pert = g.leaf(x_pert.clone());
    let adv = g.leaf(x_adv.clone());
    let f_nat = model::extractor(&mut g, &gp, nat)?;
    let f_pert = model::extractor(&mut g, &gp, pert)?;
    let f_adv = model::extractor(&mut g, &gp, adv)?;
    let node = pattern_dependent_on(&mut g, f_nat, f_pert, f_adv, tau)?;
    g.scalar(node)
}

/// Hard margin loss of a logit matrix.
pub fn margin_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = ValueGraph::new();
    let l = g.leaf(logits.clone());
    let node = margin_loss_on(&mut g, l, labels)?;
    g.scalar(node)
}

/// Smooth margin loss of a logit matrix.
pub fn soft_margin_loss(logits: &Tensor, labels: &[usize], upsilon: f64) -> Result<f64> {
    let mut g = ValueGraph::new();
    let l = g.leaf(logits.clone());
    let node = soft_margin_loss_on(&mut g, l, labels, upsilon)?;
    g.scalar(node)
}

/// Records the combined objective on one tape and reports its pieces.
///
/// Cross-entropy is taken on the adversarial batch. When alpha is
/// nonzero, the batch is quantized and split at plane `k`; the
/// pattern-dependent term compares extractor features of the natural,
/// perturbed, and adversarial batches. When gamma is nonzero, the smooth
/// margin term is taken on the logits of the natural-pattern batch.
/// A component with weight exactly zero is not recorded at all.
pub fn build_total_loss(
    g: &mut ValueGraph,
    gp: &GraphParams,
    adv: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
    k: u8,
) -> Result<(NodeId, LossBreakdown)> {
    cfg.validate()?;
    let adv_id = g.leaf(adv.clone());
    let (f_adv, logits_adv) = model::forward_on(g, gp, adv_id)?;
    let ce = g.apply(
        Primitive::SoftmaxCrossEntropy {
            labels: labels.to_vec(),
        },
        &[logits_adv],
    )?;

    let mut total = ce;
    let mut pd_value = 0.0;
    let mut mg_value = 0.0;

    let needs_nat = cfg.alpha != 0.0 || cfg.gamma != 0.0;
    let mut f_nat_id = None;
    if needs_nat {
        let (nat_t, pert_t) = bitplane::slice_batch(adv, IMAGE_DEPTH, k)?;
        let nat = g.leaf(nat_t);
        let f_nat = model::extractor(g, gp, nat)?;
        f_nat_id = Some(f_nat);
        if cfg.alpha != 0.0 {
            let pert = g.leaf(pert_t);
            let f_pert = model::extractor(g, gp, pert)?;
            let pd = pattern_dependent_on(g, f_nat, f_pert, f_adv, cfg.tau)?;
            pd_value = g.scalar(pd)?;
            let scaled = g.apply(Primitive::Scale { factor: cfg.alpha }, &[pd])?;
            total = g.apply(Primitive::Add, &[total, scaled])?;
        }
    }
    if cfg.gamma != 0.0 {
        let f_nat = f_nat_id.expect("natural features exist when gamma is nonzero");
        let logits_nat = model::head(g, gp, f_nat)?;
        let mg = soft_margin_loss_on(g, logits_nat, labels, cfg.upsilon)?;
        mg_value = g.scalar(mg)?;
        let scaled = g.apply(Primitive::Scale { factor: cfg.gamma }, &[mg])?;
        total = g.apply(Primitive::Add, &[total, scaled])?;
    }

    let breakdown = LossBreakdown {
        ce: g.scalar(ce)?,
        pd: pd_value,
        mg_soft: mg_value,
        total: g.scalar(total)?,
    };
    Ok((total, breakdown))
}

/// Combined loss of a model on one batch, values only.
///
/// `clean` is the unperturbed batch the adversarial one was grown from;
/// it anchors the shape contract (the attack already enforced the
/// perturbation ball before this point).
pub fn total_loss(
    params: &NetworkParams,
    clean: &Tensor,
    adv: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
    k: u8,
) -> Result<LossBreakdown> {
    if clean.shape() != adv.shape() {
        return Err(Error::invalid(format!(
            "clean shape {:?} and adversarial shape {:?} differ",
            clean.shape(),
            adv.shape()
        )));
    }
    let mut g = ValueGraph::new();
    let gp = params.insert(&mut g);
    let (_, breakdown) = build_total_loss(&mut g, &gp, adv, labels, cfg, k)?;
    Ok(breakdown)
}
