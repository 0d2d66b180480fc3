//! Command-line interface: one entry point with subcommands wiring the
//! library end to end. Every run resolves its full configuration
//! (defaults, then config file, then explicit flags), validates it,
//! writes a manifest of the resolved values first, and only then
//! computes. Re-running with `--config <manifest>` reproduces the run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{self, AttackConfig, AttackMethod};
use crate::bitplane::{self, QuantImage};
use crate::data::{self, Dataset};
use crate::infotheory::{JointTable, RandomSystem};
use crate::losses::LossConfig;
use crate::model::{self, NetworkParams};
use crate::train::{self, TrainConfig};
use crate::{Error, Result};

/// Residual bound the verification subcommand enforces on exact
/// identities.
const IDENTITY_TOL: f64 = 1e-12;

#[derive(Parser)]
#[command(name = "f2at", version, about = "Bit-plane feature-focusing adversarial training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct CommonFlags {
    /// Flat `key = value` config file; explicit flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to $F2AT_OUT, then the working dir.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Default)]
struct DataFlags {
    /// synth, cifar10, or idx.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the dataset files (cifar10 and idx).
    #[arg(long, value_name = "DIR")]
    data_path: Option<PathBuf>,
    /// Training examples (synth).
    #[arg(long)]
    n: Option<usize>,
    /// Evaluation examples (synth size; truncation elsewhere).
    #[arg(long)]
    eval_n: Option<usize>,
    /// Image side length (synth).
    #[arg(long)]
    side: Option<usize>,
    /// Class count (synth).
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Default)]
struct BudgetFlags {
    /// Perturbation budget; accepts decimals and fractions like 8/255.
    #[arg(long)]
    epsilon: Option<String>,
    /// Attack iterations.
    #[arg(long)]
    steps: Option<usize>,
    /// Attack step size.
    #[arg(long)]
    step_size: Option<f64>,
}

#[derive(Args, Default)]
struct LossFlags {
    /// Pattern-dependent loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Smooth margin loss weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Smooth-max sharpness.
    #[arg(long)]
    upsilon: Option<f64>,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Bit planes kept in the natural pattern.
    #[arg(long)]
    k: Option<u8>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Random crop and flip on clean batches (true/false).
    #[arg(long)]
    augment: Option<bool>,
    /// Eval examples probed for robustness each epoch.
    #[arg(long)]
    probe_size: Option<usize>,
    /// Probe attack iterations.
    #[arg(long)]
    probe_steps: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split an image (or a perturbed dataset) into bit-plane patterns.
    Slice {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        /// Bit planes kept in the natural pattern.
        #[arg(long)]
        k: Option<u8>,
        /// Raw image file: header line `R C H W`, then base-10 pixels.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Perturbation magnitude for dataset mode.
        #[arg(long)]
        epsilon: Option<String>,
    },
    /// Check the information identities and theorem residuals.
    #[command(name = "mi-verify")]
    MiVerify {
        #[command(flatten)]
        common: CommonFlags,
        /// Random tables per identity.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Attack a checkpoint and dump per-example outcomes.
    Attack {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        budget: BudgetFlags,
        /// fgsm, pgd, or mifgsm.
        #[arg(long)]
        attack: Option<String>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Generate on this checkpoint instead (transfer attack).
        #[arg(long, value_name = "FILE")]
        surrogate: Option<PathBuf>,
    },
    /// Train a defense and write checkpoint plus metrics.
    Train {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        budget: BudgetFlags,
        #[command(flatten)]
        loss: LossFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// f2at or sat.
        #[arg(long)]
        method: Option<String>,
    },
    /// Accuracy of checkpoints against the attack grid.
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        budget: BudgetFlags,
        /// Checkpoint to evaluate; repeatable.
        #[arg(long = "checkpoint", value_name = "FILE")]
        checkpoints: Vec<PathBuf>,
    },
    /// One full training run per plane count K.
    Ksweep {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        budget: BudgetFlags,
        #[command(flatten)]
        loss: LossFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Comma-separated plane counts, e.g. 2,4,8.
        #[arg(long)]
        k_list: Option<String>,
    },
    /// Prediction census of a checkpoint: class frequencies,
    /// confidences, margins.
    Report {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        budget: BudgetFlags,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DatasetKind {
    Synth,
    Cifar10,
    Idx,
}

impl DatasetKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(DatasetKind::Synth),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "idx" => Ok(DatasetKind::Idx),
            other => Err(Error::invalid(format!(
                "unknown dataset '{other}' (expected synth, cifar10, or idx)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            DatasetKind::Synth => "synth",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Idx => "idx",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TrainMethod {
    F2at,
    Sat,
}

impl TrainMethod {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "f2at" => Ok(TrainMethod::F2at),
            "sat" => Ok(TrainMethod::Sat),
            other => Err(Error::invalid(format!(
                "unknown method '{other}' (expected f2at or sat)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            TrainMethod::F2at => "f2at",
            TrainMethod::Sat => "sat",
        }
    }
}

/// Budget values accept plain decimals and `a/b` fractions, so the
/// canonical 8/255 can be written exactly.
fn parse_epsilon(s: &str) -> Result<f64> {
    let bad = || Error::invalid(format!("invalid epsilon '{s}'"));
    let t = s.trim();
    if let Some((a, b)) = t.split_once('/') {
        let num: f64 = a.trim().parse().map_err(|_| bad())?;
        let den: f64 = b.trim().parse().map_err(|_| bad())?;
        if den == 0.0 {
            return Err(bad());
        }
        Ok(num / den)
    } else {
        t.parse().map_err(|_| bad())
    }
}

fn parse_k_list(s: &str) -> Result<Vec<u8>> {
    let ks: Vec<u8> = s
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<u8>()
                .map_err(|_| Error::invalid(format!("invalid K '{}' in k-list", tok.trim())))
        })
        .collect::<Result<_>>()?;
    if ks.is_empty() {
        return Err(Error::invalid("k-list is empty".to_string()));
    }
    if let Some(bad) = ks.iter().find(|&&k| k > 8) {
        return Err(Error::invalid(format!("K {bad} in k-list must be in [0,8]")));
    }
    Ok(ks)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("invalid value '{value}' for {key}")))
}

/// Fully resolved run settings: every knob has a materialized value.
#[derive(Clone, Debug)]
struct Settings {
    seed: u64,
    out_dir: Option<PathBuf>,
    dataset: DatasetKind,
    data_path: Option<PathBuf>,
    n: usize,
    eval_n: usize,
    side: usize,
    classes: usize,
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
    momentum: f64,
    weight_decay: f64,
    augment: bool,
    probe_size: usize,
    probe_steps: usize,
    method: TrainMethod,
    attack: AttackMethod,
    k_list: Vec<u8>,
    trials: usize,
    input: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
    surrogate: Option<PathBuf>,
    declared_subcommand: Option<String>,
}

impl Default for Settings {
    fn default() -> Self {
        let attack = AttackConfig::default();
        let loss = LossConfig::default();
        let tc = TrainConfig::default();
        Settings {
            seed: 0,
            out_dir: None,
            dataset: DatasetKind::Synth,
            data_path: None,
            n: 2000,
            eval_n: 500,
            side: 8,
            classes: 2,
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            k: tc.k,
            alpha: loss.alpha,
            gamma: loss.gamma,
            tau: loss.tau,
            upsilon: loss.upsilon,
            epsilon: attack.epsilon,
            steps: attack.steps,
            step_size: attack.step_size,
            base_lr: tc.base_lr,
            momentum: tc.momentum,
            weight_decay: tc.weight_decay,
            augment: tc.augment,
            probe_size: tc.probe_size,
            probe_steps: tc.probe_steps,
            method: TrainMethod::F2at,
            attack: AttackMethod::Pgd,
            k_list: vec![2, 8],
            trials: 100,
            input: None,
            checkpoints: Vec::new(),
            surrogate: None,
            declared_subcommand: None,
        }
    }
}

const DATA_KEYS: &[&str] = &["dataset", "data-path", "n", "eval-n", "side", "classes"];
const BUDGET_KEYS: &[&str] = &["epsilon", "steps", "step-size"];
const LOSS_KEYS: &[&str] = &["alpha", "gamma", "tau", "upsilon"];
const TRAIN_KEYS: &[&str] = &[
    "method",
    "epochs",
    "batch-size",
    "k",
    "base-lr",
    "momentum",
    "weight-decay",
    "augment",
    "probe-size",
    "probe-steps",
];

impl Settings {
    /// One setter shared by the config-file reader and the manifest
    /// replay path; unknown keys are rejected by name.
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "out-dir" => self.out_dir = Some(PathBuf::from(value)),
            "dataset" => self.dataset = DatasetKind::parse(value)?,
            "data-path" => self.data_path = Some(PathBuf::from(value)),
            "n" => self.n = parse_value(key, value)?,
            "eval-n" => self.eval_n = parse_value(key, value)?,
            "side" => self.side = parse_value(key, value)?,
            "classes" => self.classes = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch-size" => self.batch_size = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "upsilon" => self.upsilon = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_epsilon(value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "step-size" => self.step_size = parse_value(key, value)?,
            "base-lr" => self.base_lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight-decay" => self.weight_decay = parse_value(key, value)?,
            "augment" => self.augment = parse_value(key, value)?,
            "probe-size" => self.probe_size = parse_value(key, value)?,
            "probe-steps" => self.probe_steps = parse_value(key, value)?,
            "method" => self.method = TrainMethod::parse(value)?,
            "attack" => self.attack = value.parse()?,
            "k-list" => self.k_list = parse_k_list(value)?,
            "trials" => self.trials = parse_value(key, value)?,
            "input" => self.input = Some(PathBuf::from(value)),
            "checkpoint" => {
                self.checkpoints = value.split(',').map(|p| PathBuf::from(p.trim())).collect()
            }
            "surrogate" => self.surrogate = Some(PathBuf::from(value)),
            "subcommand" => self.declared_subcommand = Some(value.to_string()),
            "tool-version" => {}
            other => {
                return Err(Error::invalid(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(
                    path.to_path_buf(),
                    format!("line {}: expected `key = value`, got '{line}'", lineno + 1),
                ));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn apply_common(&mut self, f: &CommonFlags) -> Result<()> {
        if let Some(p) = &f.config {
            self.apply_file(p)?;
        }
        if let Some(s) = f.seed {
            self.seed = s;
        }
        if let Some(d) = &f.out_dir {
            self.out_dir = Some(d.clone());
        }
        Ok(())
    }

    fn apply_data(&mut self, f: &DataFlags) -> Result<()> {
        if let Some(d) = &f.dataset {
            self.dataset = DatasetKind::parse(d)?;
        }
        if let Some(p) = &f.data_path {
            self.data_path = Some(p.clone());
        }
        if let Some(v) = f.n {
            self.n = v;
        }
        if let Some(v) = f.eval_n {
            self.eval_n = v;
        }
        if let Some(v) = f.side {
            self.side = v;
        }
        if let Some(v) = f.classes {
            self.classes = v;
        }
        Ok(())
    }

    fn apply_budget(&mut self, f: &BudgetFlags) -> Result<()> {
        if let Some(e) = &f.epsilon {
            self.epsilon = parse_epsilon(e)?;
        }
        if let Some(v) = f.steps {
            self.steps = v;
        }
        if let Some(v) = f.step_size {
            self.step_size = v;
        }
        Ok(())
    }

    fn apply_loss(&mut self, f: &LossFlags) {
        if let Some(v) = f.alpha {
            self.alpha = v;
        }
        if let Some(v) = f.gamma {
            self.gamma = v;
        }
        if let Some(v) = f.tau {
            self.tau = v;
        }
        if let Some(v) = f.upsilon {
            self.upsilon = v;
        }
    }

    fn apply_train(&mut self, f: &TrainFlags) {
        if let Some(v) = f.epochs {
            self.epochs = v;
        }
        if let Some(v) = f.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = f.k {
            self.k = v;
        }
        if let Some(v) = f.base_lr {
            self.base_lr = v;
        }
        if let Some(v) = f.momentum {
            self.momentum = v;
        }
        if let Some(v) = f.weight_decay {
            self.weight_decay = v;
        }
        if let Some(v) = f.augment {
            self.augment = v;
        }
        if let Some(v) = f.probe_size {
            self.probe_size = v;
        }
        if let Some(v) = f.probe_steps {
            self.probe_steps = v;
        }
    }

    fn check_subcommand(&self, name: &str) -> Result<()> {
        if let Some(declared) = &self.declared_subcommand {
            if declared != name {
                return Err(Error::invalid(format!(
                    "config declares subcommand '{declared}' but '{name}' was invoked"
                )));
            }
        }
        Ok(())
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| {
            std::env::var_os("F2AT_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."))
        })
    }

    fn render(&self, key: &str) -> Option<String> {
        match key {
            "seed" => Some(self.seed.to_string()),
            "out-dir" => Some(self.out_dir().display().to_string()),
            "dataset" => Some(self.dataset.name().to_string()),
            "data-path" => self.data_path.as_ref().map(|p| p.display().to_string()),
            "n" => Some(self.n.to_string()),
            "eval-n" => Some(self.eval_n.to_string()),
            "side" => Some(self.side.to_string()),
            "classes" => Some(self.classes.to_string()),
            "epochs" => Some(self.epochs.to_string()),
            "batch-size" => Some(self.batch_size.to_string()),
            "k" => Some(self.k.to_string()),
            "alpha" => Some(self.alpha.to_string()),
            "gamma" => Some(self.gamma.to_string()),
            "tau" => Some(self.tau.to_string()),
            "upsilon" => Some(self.upsilon.to_string()),
            "epsilon" => Some(self.epsilon.to_string()),
            "steps" => Some(self.steps.to_string()),
            "step-size" => Some(self.step_size.to_string()),
            "base-lr" => Some(self.base_lr.to_string()),
            "momentum" => Some(self.momentum.to_string()),
            "weight-decay" => Some(self.weight_decay.to_string()),
            "augment" => Some(self.augment.to_string()),
            "probe-size" => Some(self.probe_size.to_string()),
            "probe-steps" => Some(self.probe_steps.to_string()),
            "method" => Some(self.method.name().to_string()),
            "attack" => Some(self.attack.name().to_string()),
            "k-list" => Some(
                self.k_list
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            "trials" => Some(self.trials.to_string()),
            "input" => self.input.as_ref().map(|p| p.display().to_string()),
            "checkpoint" => {
                if self.checkpoints.is_empty() {
                    None
                } else {
                    Some(
                        self.checkpoints
                            .iter()
                            .map(|p| p.display().to_string())
                            .collect::<Vec<_>>()
                            .join(","),
                    )
                }
            }
            "surrogate" => self.surrogate.as_ref().map(|p| p.display().to_string()),
            _ => None,
        }
    }

    /// Materializes the resolved configuration. Feeding the result back
    /// through `--config` reproduces this run.
    fn manifest(&self, subcommand: &str, keys: &[&str]) -> String {
        let mut out = String::from("# run manifest; replay with --config <this file>\n");
        out.push_str(&format!("tool-version = {}\n", env!("CARGO_PKG_VERSION")));
        out.push_str(&format!("subcommand = {subcommand}\n"));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("out-dir = {}\n", self.out_dir().display()));
        for key in keys {
            if let Some(v) = self.render(key) {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.step_size,
            ..AttackConfig::default()
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            attack: self.attack_config(),
            loss: LossConfig {
                alpha: self.alpha,
                gamma: self.gamma,
                tau: self.tau,
                upsilon: self.upsilon,
            },
            k: self.k,
            milestones: vec![0.5, 0.75],
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment: self.augment,
            probe_size: self.probe_size,
            probe_steps: self.probe_steps,
        }
    }

    fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Synth => {
                data::synth_dataset(self.seed, self.n + self.eval_n, self.classes, self.side)?
                    .split_at(self.n)
            }
            DatasetKind::Cifar10 => {
                let path = self.data_path.as_ref().ok_or_else(|| {
                    Error::invalid("dataset cifar10 needs --data-path".to_string())
                })?;
                data::load_cifar10_dir(path)
            }
            DatasetKind::Idx => {
                let path = self
                    .data_path
                    .as_ref()
                    .ok_or_else(|| Error::invalid("dataset idx needs --data-path".to_string()))?;
                data::load_idx_dir(path)
            }
        }
    }

    fn load_eval(&self) -> Result<Dataset> {
        let (_, eval) = self.load_datasets()?;
        if self.eval_n < eval.len() {
            Ok(eval.split_at(self.eval_n)?.0)
        } else {
            Ok(eval)
        }
    }
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| Error::io(path.clone(), e))?;
    Ok(path)
}

fn check_geometry(params: &NetworkParams, set: &Dataset) -> Result<()> {
    let cfg = &params.config;
    let dims = set
        .dims()
        .ok_or_else(|| Error::invalid("dataset is empty".to_string()))?;
    if dims != (cfg.in_channels, cfg.height, cfg.width) {
        return Err(Error::invalid(format!(
            "checkpoint expects {}x{}x{} images but the dataset has {}x{}x{}",
            cfg.in_channels, cfg.height, cfg.width, dims.0, dims.1, dims.2
        )));
    }
    if set.class_count() != cfg.num_classes {
        return Err(Error::invalid(format!(
            "checkpoint has {} classes but the dataset has {}",
            cfg.num_classes,
            set.class_count()
        )));
    }
    Ok(())
}

/// Parses argv and runs one subcommand; returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let line = e
                .to_string()
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .to_string();
            eprintln!("{line}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Slice {
            common,
            data,
            k,
            input,
            epsilon,
        } => {
            let mut s = Settings::default();
            s.apply_common(&common)?;
            s.check_subcommand("slice")?;
            s.apply_data(&data)?;
            if let Some(k) = k {
                s.k = k;
            }
            if let Some(p) = input {
                s.input = Some(p);
            }
            if let Some(e) = epsilon {
                s.epsilon = parse_epsilon(&e)?;
            }
            run_slice(&s)
        }
        Cmd::MiVerify { common, trials } => {
            let mut s = Settings::default();
            s.apply_common(&common)?;
            s.check_subcommand("mi-verify")?;
            if let Some(t) = trials {
                s.trials = t;
            }
            run_mi_verify(&s)
        }
        Cmd::Attack {
            common,
            data,
            budget,
            attack,
            checkpoint,
            surrogate,
        } => {
            let mut s = Settings::default();
            s.apply_common(&common)?;
            s.check_subcommand("attack")?;
            s.apply_data(&data)?;
            s.apply_budget(&budget)?;
            if let Some(a) = attack {
                s.attack = a.parse()?;
            }
            if let Some(c) = checkpoint {
                s.checkpoints = vec![c];
            }
            if let Some(p) = surrogate {
                s.surrogate = Some(p);
            }
            run_attack(&s)
        }
        Cmd::Train {
            common,
            data,
            budget,
            loss,
            train,
            method,
        } => {
            let mut s = Settings::default();
            s.apply_common(&common)?;
            s.check_subcommand("train")?;
            s.apply_data(&data)?;
            s.apply_budget(&budget)?;
            s.apply_loss(&loss);
            s.apply_train(&train);
            if let Some(m) = method {
                s.method = TrainMethod::parse(&m)?;
            }
            run_train(&s)
        }
        Cmd::Eval {
            common,
            data,
            budget,
            checkpoints,
        } => {
            let mut s = Settings::default();
            s.apply_common(&common)?;
            s.check_subcommand("eval")?;
            s.apply_data(&data)?;
            s.apply_budget(&budget)?;
            if !checkpoints.is_empty() {
                s.checkpoints = checkpoints;
            }
            run_eval(&s)
        }
        Cmd::Ksweep {
            common,
            data,
            budget,
            loss,
            train,
            k_list,
        } => {
            let mut s = Settings::default();
            s.apply_common(&common)?;
            s.check_subcommand("ksweep")?;
            s.apply_data(&data)?;
            s.apply_budget(&budget)?;
            s.apply_loss(&loss);
            s.apply_train(&train);
            if let Some(l) = k_list {
                s.k_list = parse_k_list(&l)?;
            }
            run_ksweep(&s)
        }
        Cmd::Report {
            common,
            data,
            budget,
            checkpoint,
        } => {
            let mut s = Settings::default();
            s.apply_common(&common)?;
            s.check_subcommand("report")?;
            s.apply_data(&data)?;
            s.apply_budget(&budget)?;
            if let Some(c) = checkpoint {
                s.checkpoints = vec![c];
            }
            run_report(&s)
        }
    }
}

/// Raw image file: header `R C H W`, then C*H*W base-10 pixel values.
fn read_raw_image(path: &Path) -> Result<QuantImage> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut tokens = text.split_whitespace();
    let mut header = [0usize; 4];
    for (i, name) in ["R", "C", "H", "W"].iter().enumerate() {
        let tok = tokens.next().ok_or_else(|| {
            Error::format(path.to_path_buf(), format!("missing header field {name}"))
        })?;
        header[i] = tok.parse().map_err(|_| {
            Error::format(path.to_path_buf(), format!("invalid header field {name}: '{tok}'"))
        })?;
    }
    let [r, c, h, w] = header;
    if r == 0 || r > 16 {
        return Err(Error::format(
            path.to_path_buf(),
            format!("depth {r} must be in [1,16]"),
        ));
    }
    let mut values = Vec::with_capacity(c * h * w);
    for tok in tokens {
        let v: u16 = tok.parse().map_err(|_| {
            Error::format(path.to_path_buf(), format!("invalid pixel value '{tok}'"))
        })?;
        values.push(v);
    }
    if values.len() != c * h * w {
        return Err(Error::format(
            path.to_path_buf(),
            format!("{} pixel values for {c}x{h}x{w}", values.len()),
        ));
    }
    QuantImage::new(r as u8, c, h, w, values)
}

fn format_plane(img: &QuantImage) -> String {
    let (c, h, w) = img.dims();
    let mut out = String::new();
    for ch in 0..c {
        for y in 0..h {
            let row: Vec<String> = (0..w)
                .map(|x| img.data()[(ch * h + y) * w + x].to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}

fn run_slice(s: &Settings) -> Result<()> {
    if s.k > 8 {
        return Err(Error::invalid(format!("K {} must be in [0,8]", s.k)));
    }
    let dir = s.out_dir();
    let keys: Vec<&str> = ["k", "input"]
        .iter()
        .chain(DATA_KEYS)
        .chain(&["epsilon"])
        .copied()
        .collect();
    write_out(&dir, "manifest.txt", &s.manifest("slice", &keys))?;

    if let Some(input) = &s.input {
        let img = read_raw_image(input)?;
        let pair = bitplane::slice(&img, s.k)?;
        let (c, h, w) = img.dims();
        let mut out = format!("{} {} {c} {h} {w}\n", img.depth(), s.k);
        out.push_str(&format_plane(&pair.natural));
        out.push_str(&format_plane(&pair.perturbed));
        let path = write_out(&dir, "patterns.txt", &out)?;
        println!("wrote {}", path.display());
        return Ok(());
    }

    // Dataset mode: quantized uniform perturbations at the budget, then
    // the fraction of natural-pattern positions they disturb, per K.
    let set = s.load_eval()?;
    if set.is_empty() {
        return Err(Error::invalid("dataset is empty".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed_51ce);
    let clean: Vec<QuantImage> = set.images().to_vec();
    let mut adv = Vec::with_capacity(clean.len());
    for img in &clean {
        let t = bitplane::dequantize(img);
        let mut noisy = t.data().to_vec();
        for v in noisy.iter_mut() {
            *v = (*v + rng.random_range(-s.epsilon..=s.epsilon)).clamp(0.0, 1.0);
        }
        let noisy = crate::tensor::Tensor::new(t.shape().to_vec(), noisy)?;
        adv.push(bitplane::quantize(&noisy, img.depth())?);
    }
    let mut csv = String::from("k,ratio\n");
    for k in 1..=8u8 {
        let ratio = bitplane::discrepancy_ratio(&clean, &adv, k)?;
        csv.push_str(&format!("{k},{ratio}\n"));
        println!("K={k}: discrepancy ratio {ratio:.6}");
    }
    let path = write_out(&dir, "discrepancy.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_mi_verify(s: &Settings) -> Result<()> {
    if s.trials == 0 {
        return Err(Error::invalid("trials must be at least 1".to_string()));
    }
    let dir = s.out_dir();
    write_out(&dir, "manifest.txt", &s.manifest("mi-verify", &["trials"]))?;

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut maxima: Vec<(&str, f64, usize)> = Vec::new();
    let bump = |maxima: &mut Vec<(&str, f64, usize)>, name: &'static str, v: f64| {
        match maxima.iter_mut().find(|(n, _, _)| *n == name) {
            Some(slot) => {
                slot.1 = slot.1.max(v);
                slot.2 += 1;
            }
            None => maxima.push((name, v, 1)),
        }
    };

    for t in 0..s.trials {
        let vars: &[&str] = if t % 2 == 0 {
            &["X", "Y", "F"]
        } else {
            &["X", "Y"]
        };
        let sizes: Vec<usize> = vars.iter().map(|_| rng.random_range(2..=4)).collect();
        let zero_fraction = if t % 3 == 0 { 0.2 } else { 0.0 };
        let table = JointTable::random(&mut rng, vars, &sizes, zero_fraction)?;
        let rep = crate::infotheory::verify_identities(&table)?;
        bump(&mut maxima, "lemma1-source-entropy", rep.lemma1.via_source_entropy);
        bump(&mut maxima, "lemma1-target-entropy", rep.lemma1.via_target_entropy);
        bump(&mut maxima, "lemma1-joint-entropy", rep.lemma1.via_joint_entropy);
        if let Some(l2) = rep.lemma2 {
            bump(&mut maxima, "lemma2-cond-entropy-chain", l2.cond_entropy_chain);
            bump(&mut maxima, "lemma2-mi-chain", l2.mi_chain);
        }
    }

    let mut triple_max = 0.0f64;
    let sys_trials = s.trials.div_ceil(2);
    for _ in 0..sys_trials {
        let nat = rng.random_range(2..=4);
        let pert = rng.random_range(2..=4);
        let f = rng.random_range(2..=4);
        let sys = RandomSystem::random(&mut rng, nat, pert, f)?;
        let rep = crate::infotheory::verify_theorems(&sys)?;
        bump(&mut maxima, "theorem1-decomposition", rep.decomposition_residual);
        bump(
            &mut maxima,
            "theorem2-pattern-sufficiency",
            rep.pattern_sufficiency_residual,
        );
        bump(
            &mut maxima,
            "theorem2-gap-consistency",
            (rep.approximation_gap - rep.triple_mi.abs()).abs(),
        );
        triple_max = triple_max.max(rep.triple_mi.abs());
    }

    let mut jsonl = String::new();
    for (name, residual, trials) in &maxima {
        jsonl.push_str(&format!(
            "{{\"identity\":\"{name}\",\"trials\":{trials},\"max_residual\":{residual:e}}}\n"
        ));
        println!("{name}: max residual {residual:.3e} over {trials} trials");
    }
    jsonl.push_str(&format!(
        "{{\"quantity\":\"theorem2-triple-mi\",\"trials\":{sys_trials},\"max_abs\":{triple_max:e},\"note\":\"reported, not asserted\"}}\n"
    ));
    println!("theorem2-triple-mi: max |value| {triple_max:.3e} over {sys_trials} trials (reported, not asserted)");
    let path = write_out(&dir, "mi_verify.jsonl", &jsonl)?;
    println!("wrote {}", path.display());

    if let Some((name, residual, _)) = maxima
        .iter()
        .find(|(_, residual, _)| *residual > IDENTITY_TOL)
    {
        return Err(Error::invalid(format!(
            "identity {name} residual {residual:e} exceeds {IDENTITY_TOL:e}"
        )));
    }
    Ok(())
}

fn run_attack(s: &Settings) -> Result<()> {
    let [checkpoint] = s.checkpoints.as_slice() else {
        return Err(Error::invalid(
            "attack needs exactly one --checkpoint".to_string(),
        ));
    };
    let cfg = s.attack_config();
    cfg.validate()?;
    let dir = s.out_dir();
    let keys: Vec<&str> = DATA_KEYS
        .iter()
        .chain(BUDGET_KEYS)
        .chain(&["attack", "checkpoint", "surrogate"])
        .copied()
        .collect();
    write_out(&dir, "manifest.txt", &s.manifest("attack", &keys))?;

    let target = model::load_checkpoint(checkpoint)?;
    let surrogate = match &s.surrogate {
        Some(p) => Some(model::load_checkpoint(p)?),
        None => None,
    };
    let generator = surrogate.as_ref().unwrap_or(&target);
    let set = s.load_eval()?;
    check_geometry(&target, &set)?;
    check_geometry(generator, &set)?;

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut csv =
        String::from("index,true_label,clean_prediction,adversarial_prediction,linf_distance\n");
    let mut correct = 0usize;
    let chunk_size = 128;
    let mut at = 0;
    while at < set.len() {
        let end = (at + chunk_size).min(set.len());
        let clean = set.slice_tensor(at, end)?;
        let labels = &set.labels()[at..end];
        let clean_preds = model::predict(&target, &clean)?;
        let adv = attacks::generate_adversarial(s.attack, generator, &clean, labels, &cfg, &mut rng)?;
        let adv_preds = model::predict(&target, &adv)?;
        let row_len: usize = clean.shape()[1..].iter().product();
        for i in 0..(end - at) {
            let linf = clean.data()[i * row_len..(i + 1) * row_len]
                .iter()
                .zip(&adv.data()[i * row_len..(i + 1) * row_len])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                at + i,
                labels[i],
                clean_preds[i],
                adv_preds[i],
                linf
            ));
            if adv_preds[i] == labels[i] {
                correct += 1;
            }
        }
        at = end;
    }
    let path = write_out(&dir, "attack.csv", &csv)?;
    println!(
        "{} on {} examples: robust accuracy {:.4}",
        s.attack.name(),
        set.len(),
        correct as f64 / set.len() as f64
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn run_train(s: &Settings) -> Result<()> {
    let cfg = s.train_config();
    cfg.validate()?;
    let dir = s.out_dir();
    let keys: Vec<&str> = DATA_KEYS
        .iter()
        .chain(BUDGET_KEYS)
        .chain(LOSS_KEYS)
        .chain(TRAIN_KEYS)
        .copied()
        .collect();
    write_out(&dir, "manifest.txt", &s.manifest("train", &keys))?;

    let (train_set, eval_set) = s.load_datasets()?;
    let outcome = match s.method {
        TrainMethod::F2at => train::train_f2at(&cfg, &train_set, &eval_set)?,
        TrainMethod::Sat => train::train_sat(&cfg, &train_set, &eval_set)?,
    };
    let metrics_path = write_out(&dir, "metrics.jsonl", &outcome.metrics.to_jsonl()?)?;
    let ckpt_path = dir.join("checkpoint.f2at");
    model::save_checkpoint(&outcome.params, &ckpt_path)?;
    if let Some(last) = outcome.metrics.records.last() {
        println!(
            "{} epoch {}: clean {:.4}, robust {:.4} (probe)",
            s.method.name(),
            last.epoch,
            last.clean_acc,
            last.robust_acc
        );
    }
    println!("wrote {}", metrics_path.display());
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn run_eval(s: &Settings) -> Result<()> {
    if s.checkpoints.is_empty() {
        return Err(Error::invalid(
            "eval needs at least one --checkpoint".to_string(),
        ));
    }
    let cfg = s.attack_config();
    cfg.validate()?;
    let dir = s.out_dir();
    let keys: Vec<&str> = DATA_KEYS
        .iter()
        .chain(&["epsilon", "step-size", "checkpoint"])
        .copied()
        .collect();
    write_out(&dir, "manifest.txt", &s.manifest("eval", &keys))?;

    let set = s.load_eval()?;
    let mut csv = String::from("checkpoint,clean_acc,fgsm_acc,pgd_acc,mifgsm_acc\n");
    for ckpt in &s.checkpoints {
        let params = model::load_checkpoint(ckpt)?;
        check_geometry(&params, &set)?;
        let report = train::evaluate_grid(&params, &set, &cfg, s.seed)?;
        let find = |name: &str| {
            report
                .cells
                .iter()
                .find(|c| c.method == name)
                .map_or(f64::NAN, |c| c.accuracy)
        };
        let label = ckpt
            .file_stem()
            .map(|v| v.to_string_lossy().into_owned())
            .unwrap_or_else(|| ckpt.display().to_string());
        let line = format!(
            "{label},{},{},{},{}",
            report.clean_acc,
            find("fgsm"),
            find("pgd"),
            find("mifgsm")
        );
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    let path = write_out(&dir, "eval.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_ksweep(s: &Settings) -> Result<()> {
    let cfg = s.train_config();
    cfg.validate()?;
    if s.k_list.is_empty() {
        return Err(Error::invalid("k-list is empty".to_string()));
    }
    let dir = s.out_dir();
    let keys: Vec<&str> = DATA_KEYS
        .iter()
        .chain(BUDGET_KEYS)
        .chain(LOSS_KEYS)
        .chain(&[
            "epochs",
            "batch-size",
            "base-lr",
            "momentum",
            "weight-decay",
            "augment",
            "probe-size",
            "probe-steps",
            "k-list",
        ])
        .copied()
        .collect();
    write_out(&dir, "manifest.txt", &s.manifest("ksweep", &keys))?;

    let (train_set, eval_set) = s.load_datasets()?;
    let rows = train::k_sweep(&cfg, &s.k_list, &train_set, &eval_set)?;
    let mut csv = String::from("k,clean_acc,fgsm_acc,pgd_acc,mifgsm_acc\n");
    for r in &rows {
        let line = format!(
            "{},{},{},{},{}",
            r.k, r.clean_acc, r.fgsm_acc, r.pgd_acc, r.mifgsm_acc
        );
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    let path = write_out(&dir, "ksweep.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_report(s: &Settings) -> Result<()> {
    let [checkpoint] = s.checkpoints.as_slice() else {
        return Err(Error::invalid(
            "report needs exactly one --checkpoint".to_string(),
        ));
    };
    let cfg = s.attack_config();
    cfg.validate()?;
    let dir = s.out_dir();
    let keys: Vec<&str> = DATA_KEYS
        .iter()
        .chain(BUDGET_KEYS)
        .chain(&["checkpoint"])
        .copied()
        .collect();
    write_out(&dir, "manifest.txt", &s.manifest("report", &keys))?;

    let params = model::load_checkpoint(checkpoint)?;
    let set = s.load_eval()?;
    check_geometry(&params, &set)?;
    let report = train::diagnostics(&params, &set, &AttackMethod::ALL, &cfg, s.seed)?;

    let mut freq = String::from("variant,class,count\n");
    let mut conf = String::from("variant,index,confidence\n");
    let mut marg = String::from("variant,index,margin\n");
    for v in &report.variants {
        for (class, count) in v.class_frequency.iter().enumerate() {
            freq.push_str(&format!("{},{class},{count}\n", v.name));
        }
        for (i, p) in v.confidences.iter().enumerate() {
            conf.push_str(&format!("{},{i},{p}\n", v.name));
        }
        for (i, m) in v.margins.iter().enumerate() {
            marg.push_str(&format!("{},{i},{m}\n", v.name));
        }
    }
    for (name, content) in [
        ("class_frequency.csv", &freq),
        ("confidence_histogram.csv", &conf),
        ("margins.csv", &marg),
    ] {
        let path = write_out(&dir, name, content)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
