//! Thin Python bindings: flat buffers plus explicit dims in, plain
//! tuples and dicts out. All heavy lifting stays in the core crate.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use f2at::attacks::{self, AttackConfig, AttackMethod};
use f2at::bitplane::{self, QuantImage};
use f2at::data;
use f2at::infotheory::{self, JointTable, RandomSystem};
use f2at::losses::{self, LossConfig};
use f2at::model::{self, NetworkParams};
use f2at::tensor::Tensor;
use f2at::train::{self, TrainConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image(data: Vec<u16>, depth: u8, c: usize, h: usize, w: usize) -> PyResult<QuantImage> {
    QuantImage::new(depth, c, h, w, data).map_err(err)
}

fn batch_tensor(images: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> PyResult<Tensor> {
    Tensor::new(vec![n, c, h, w], images).map_err(err)
}

fn logits_tensor(logits: Vec<f64>, n: usize, classes: usize) -> PyResult<Tensor> {
    Tensor::new(vec![n, classes], logits).map_err(err)
}

/// Highest representable level for a bit depth.
#[pyfunction]
fn max_value(depth: u8) -> PyResult<u16> {
    if depth == 0 || depth > 16 {
        return Err(err(format!("depth {depth} must be in [1,16]")));
    }
    Ok(bitplane::max_value(depth))
}

/// Round-half-up quantization of [0,1] values to integer levels.
#[pyfunction]
fn quantize(values: Vec<f64>, depth: u8, c: usize, h: usize, w: usize) -> PyResult<Vec<u16>> {
    let t = Tensor::new(vec![c, h, w], values).map_err(err)?;
    Ok(bitplane::quantize(&t, depth).map_err(err)?.data().to_vec())
}

/// Integer levels back to [0,1] values.
#[pyfunction]
fn dequantize(data: Vec<u16>, depth: u8, c: usize, h: usize, w: usize) -> PyResult<Vec<f64>> {
    Ok(bitplane::dequantize(&image(data, depth, c, h, w)?).data().to_vec())
}

/// Split into (natural, perturbed) patterns at plane count k.
#[pyfunction]
fn slice(
    data: Vec<u16>,
    depth: u8,
    c: usize,
    h: usize,
    w: usize,
    k: u8,
) -> PyResult<(Vec<u16>, Vec<u16>)> {
    let pair = bitplane::slice(&image(data, depth, c, h, w)?, k).map_err(err)?;
    Ok((pair.natural.data().to_vec(), pair.perturbed.data().to_vec()))
}

/// Fraction of positions whose natural pattern an attack disturbed.
#[pyfunction]
fn discrepancy_ratio(
    clean: Vec<Vec<u16>>,
    adv: Vec<Vec<u16>>,
    depth: u8,
    c: usize,
    h: usize,
    w: usize,
    k: u8,
) -> PyResult<f64> {
    let pack = |rows: Vec<Vec<u16>>| -> PyResult<Vec<QuantImage>> {
        rows.into_iter().map(|r| image(r, depth, c, h, w)).collect()
    };
    bitplane::discrepancy_ratio(&pack(clean)?, &pack(adv)?, k).map_err(err)
}

/// Residuals of the entropy and mutual-information identities on one
/// distribution. `probs` is a flat joint table over 2 or 3 variables.
#[pyfunction]
fn verify_identities(py: Python<'_>, probs: Vec<f64>, sizes: Vec<usize>) -> PyResult<Py<PyDict>> {
    let names: Vec<String> = ["X", "Y", "F"][..sizes.len().min(3)]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let table = JointTable::new(names, sizes, probs).map_err(err)?;
    let rep = infotheory::verify_identities(&table).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("lemma1_source_entropy", rep.lemma1.via_source_entropy)?;
    out.set_item("lemma1_target_entropy", rep.lemma1.via_target_entropy)?;
    out.set_item("lemma1_joint_entropy", rep.lemma1.via_joint_entropy)?;
    if let Some(l2) = rep.lemma2 {
        out.set_item("lemma2_cond_entropy_chain", l2.cond_entropy_chain)?;
        out.set_item("lemma2_mi_chain", l2.mi_chain)?;
    }
    Ok(out.into())
}

/// Residuals of the decomposition and sufficiency theorems on a seeded
/// random pattern system.
#[pyfunction]
fn verify_theorems(
    py: Python<'_>,
    seed: u64,
    nat_size: usize,
    pert_size: usize,
    f_size: usize,
) -> PyResult<Py<PyDict>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sys = RandomSystem::random(&mut rng, nat_size, pert_size, f_size).map_err(err)?;
    let rep = infotheory::verify_theorems(&sys).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("decomposition_residual", rep.decomposition_residual)?;
    out.set_item("pattern_sufficiency_residual", rep.pattern_sufficiency_residual)?;
    out.set_item("triple_mi", rep.triple_mi)?;
    out.set_item("approximation_gap", rep.approximation_gap)?;
    Ok(out.into())
}

/// Mean hinge shortfall of the true class against the best rival.
#[pyfunction]
fn margin_loss(logits: Vec<f64>, n: usize, classes: usize, labels: Vec<usize>) -> PyResult<f64> {
    losses::margin_loss(&logits_tensor(logits, n, classes)?, &labels).map_err(err)
}

/// Smooth-max margin loss at sharpness upsilon.
#[pyfunction]
fn soft_margin_loss(
    logits: Vec<f64>,
    n: usize,
    classes: usize,
    labels: Vec<usize>,
    upsilon: f64,
) -> PyResult<f64> {
    losses::soft_margin_loss(&logits_tensor(logits, n, classes)?, &labels, upsilon).map_err(err)
}

/// Per-example margins logit[y] - best rival.
#[pyfunction]
fn margins(logits: Vec<f64>, n: usize, classes: usize, labels: Vec<usize>) -> PyResult<Vec<f64>> {
    losses::margins_of(&logits_tensor(logits, n, classes)?, &labels).map_err(err)
}

/// Contrastive alignment of adversarial features to natural-pattern
/// features against perturbed-pattern candidates.
#[pyfunction]
fn pattern_dependent_loss(
    f_nat: Vec<f64>,
    f_pert: Vec<f64>,
    f_adv: Vec<f64>,
    n: usize,
    dim: usize,
    tau: f64,
) -> PyResult<f64> {
    let fit = |v: Vec<f64>| Tensor::new(vec![n, dim], v).map_err(err);
    losses::pattern_dependent_from_features(&fit(f_nat)?, &fit(f_pert)?, &fit(f_adv)?, tau)
        .map_err(err)
}

/// Deterministic synthetic dataset; returns (images, labels, (c, h, w)).
#[pyfunction]
fn synth_dataset(
    seed: u64,
    n: usize,
    class_count: usize,
    side: usize,
) -> PyResult<(Vec<Vec<u16>>, Vec<usize>, (usize, usize, usize))> {
    let set = data::synth_dataset(seed, n, class_count, side).map_err(err)?;
    let dims = set.dims().ok_or_else(|| err("empty dataset"))?;
    let images = set.images().iter().map(|i| i.data().to_vec()).collect();
    Ok((images, set.labels().to_vec(), dims))
}

/// A trained network: load from disk or train on synthetic data.
#[pyclass]
struct Model {
    params: NetworkParams,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let params = model::load_checkpoint(std::path::Path::new(path)).map_err(err)?;
        Ok(Model { params })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(&self.params, std::path::Path::new(path)).map_err(err)
    }

    /// Class logits for a flat [n,c,h,w] batch of [0,1] values.
    fn logits(&self, images: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> PyResult<Vec<Vec<f64>>> {
        let batch = batch_tensor(images, n, c, h, w)?;
        let (_, logits) = model::forward(&self.params, &batch).map_err(err)?;
        let classes = logits.shape()[1];
        Ok(logits.data().chunks(classes).map(|r| r.to_vec()).collect())
    }

    /// Penultimate feature rows for a flat [n,c,h,w] batch.
    fn features(&self, images: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> PyResult<Vec<Vec<f64>>> {
        let batch = batch_tensor(images, n, c, h, w)?;
        let (features, _) = model::forward(&self.params, &batch).map_err(err)?;
        let dim = features.shape()[1];
        Ok(features.data().chunks(dim).map(|r| r.to_vec()).collect())
    }

    fn predict(&self, images: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> PyResult<Vec<usize>> {
        model::predict(&self.params, &batch_tensor(images, n, c, h, w)?).map_err(err)
    }

    /// Adversarial counterpart of a batch under one attack method.
    #[pyo3(signature = (images, labels, n, c, h, w, method="pgd", epsilon=8.0/255.0, steps=10, step_size=0.007, random_start=true, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn attack(
        &self,
        images: Vec<f64>,
        labels: Vec<usize>,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        method: &str,
        epsilon: f64,
        steps: usize,
        step_size: f64,
        random_start: bool,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let batch = batch_tensor(images, n, c, h, w)?;
        let method: AttackMethod = method.parse().map_err(err)?;
        let cfg = AttackConfig {
            epsilon,
            steps,
            step_size,
            random_start,
            ..AttackConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adv = attacks::generate_adversarial(method, &self.params, &batch, &labels, &cfg, &mut rng)
            .map_err(err)?;
        Ok(adv.data().to_vec())
    }
}

/// Train on the synthetic task; returns (model, per-epoch metrics JSONL).
#[pyfunction]
#[pyo3(signature = (seed=0, n=2000, eval_n=500, class_count=2, side=8, epochs=10, batch_size=128, k=2, alpha=0.1, gamma=1.0, tau=0.07, upsilon=0.995, epsilon=8.0/255.0, steps=10, step_size=0.007, base_lr=0.1, augment=true, sat=false))]
#[allow(clippy::too_many_arguments)]
fn train_synth(
    seed: u64,
    n: usize,
    eval_n: usize,
    class_count: usize,
    side: usize,
    epochs: usize,
    batch_size: usize,
    k: u8,
    alpha: f64,
    gamma: f64,
    tau: f64,
    upsilon: f64,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    base_lr: f64,
    augment: bool,
    sat: bool,
) -> PyResult<(Model, String)> {
    let set = data::synth_dataset(seed, n + eval_n, class_count, side).map_err(err)?;
    let (train_set, eval_set) = set.split_at(n).map_err(err)?;
    let cfg = TrainConfig {
        epochs,
        batch_size,
        seed,
        attack: AttackConfig {
            epsilon,
            steps,
            step_size,
            ..AttackConfig::default()
        },
        loss: LossConfig {
            alpha,
            gamma,
            tau,
            upsilon,
        },
        k,
        base_lr,
        augment,
        ..TrainConfig::default()
    };
    let outcome = if sat {
        train::train_sat(&cfg, &train_set, &eval_set).map_err(err)?
    } else {
        train::train_f2at(&cfg, &train_set, &eval_set).map_err(err)?
    };
    let jsonl = outcome.metrics.to_jsonl().map_err(err)?;
    Ok((Model { params: outcome.params }, jsonl))
}

#[pymodule]
fn f2at_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(max_value, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(slice, m)?)?;
    m.add_function(wrap_pyfunction!(discrepancy_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(verify_identities, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theorems, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(soft_margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(margins, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_dependent_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_synth, m)?)?;
    Ok(())
}
