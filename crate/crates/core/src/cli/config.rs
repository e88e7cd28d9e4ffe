//! Flat key=value run configuration.
//!
//! One namespace per pipeline stage (`data.*`, `attack.*`, `train.*`,
//! `unlearn.*`, `eval.*`), INI-style files with `#` comments, unknown keys
//! rejected, and every run echoes its fully resolved configuration so the
//! echoed file reproduces the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hypergrad::{LinSolveConfig, SolveMethod};
use crate::inner_max::InnerConfig;
use crate::model::{Activation, MlpSpec, OptimKind, TrainConfig};
use crate::poison::{PoisonMode, PoisonPlan, TriggerKind, TriggerSpec};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::unlearn::UnlearnConfig;

/// (key, default, help) rows; the single source of truth for what exists.
const SCHEMA: &[(&str, &str, &str)] = &[
    ("data.classes", "4", "number of classes C"),
    ("data.dim", "16", "feature dimension d"),
    ("data.per_class", "500", "samples per class before splitting"),
    ("data.spread", "0.08", "gaussian blob spread"),
    ("data.split", "0.5,0.25,0.25", "train/defense/test fractions"),
    ("data.seed", "7", "data generation and split seed"),
    (
        "attack.mode",
        "single_target",
        "single_target | all_to_all | multi_trigger",
    ),
    ("attack.trigger", "patch", "patch | blend | noise"),
    ("attack.ratio", "0.2", "poison ratio"),
    (
        "attack.targets",
        "1",
        "comma list of target labels (one per trigger; ignored for all_to_all)",
    ),
    (
        "attack.patch_dims",
        "13,14,15",
        "masked feature indices; ';' separates per-trigger groups",
    ),
    ("attack.patch_value", "0.9", "pattern value on masked dims"),
    ("attack.blend_alpha", "0.2", "blend trigger mixing weight"),
    ("attack.seed", "11", "poison sampling / pattern seed"),
    ("train.hidden", "64,32", "hidden layer widths"),
    ("train.activation", "relu", "relu | sigmoid"),
    ("train.epochs", "50", "training epochs"),
    ("train.lr", "0.01", "training learning rate"),
    ("train.batch", "32", "training batch size"),
    ("train.optimizer", "adam", "adam | sgd"),
    ("train.seed", "17", "init and shuffle seed"),
    ("unlearn.method", "ibau", "ibau | naive"),
    ("unlearn.rounds", "5", "outer rounds K"),
    ("unlearn.outer_lr", "0.1", "outer step size beta"),
    ("unlearn.outer_opt", "sgd", "sgd | adam"),
    ("unlearn.inner_lr", "0.1", "inner ascent step alpha"),
    ("unlearn.inner_steps", "5", "inner iterations T"),
    ("unlearn.norm_bound", "10", "l2 bound C_delta on the perturbation"),
    ("unlearn.clamp", "true", "clip x + delta into [0,1]"),
    ("unlearn.solver", "cg", "cg | fixed_point"),
    ("unlearn.solver_rounds", "5", "linear solver rounds"),
    ("unlearn.fp_step", "0.1", "fixed-point solver step"),
    ("unlearn.solver_tol", "1e-12", "solver early-exit residual"),
    ("unlearn.fallback", "true", "zero the indirect term on divergence"),
    ("unlearn.batch", "0", "clean rows per round (0 = full set)"),
    ("unlearn.naive_steps", "1", "per-sample ascent steps (naive method)"),
    (
        "unlearn.eval_each_round",
        "true",
        "record ACC/ASR after every round when attack files are available",
    ),
    ("unlearn.seed", "23", "batch-draw seed"),
    ("eval.gamma", "0.5", "margin for the ramp-loss risk"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = SCHEMA
            .iter()
            .map(|(k, v, _)| (k.to_string(), v.to_string()))
            .collect();
        RunConfig { values }
    }
}

impl RunConfig {
    /// Defaults overlaid with an optional config file.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|_| {
                Error::Config(format!("cannot read config file {}", path.display()))
            })?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected key=value, got {raw:?}",
                        path.display(),
                        idx + 1
                    ))
                })?;
                cfg.set(key.trim(), value.trim())?;
            }
        }
        Ok(cfg)
    }

    /// Set one key, rejecting anything outside the schema.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !SCHEMA.iter().any(|(k, _, _)| *k == key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a `--set key=value` pair.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
        self.set(key.trim(), value.trim())
    }

    /// A master seed re-seeds every stage deterministically.
    pub fn apply_master_seed(&mut self, seed: u64) {
        for (offset, key) in ["data.seed", "attack.seed", "train.seed", "unlearn.seed"]
            .iter()
            .enumerate()
        {
            self.values
                .insert(key.to_string(), (seed + offset as u64).to_string());
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} missing from schema"))
    }

    pub fn usize_of(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} must be an integer, got {:?}", self.get(key))))
    }

    pub fn u64_of(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} must be an integer, got {:?}", self.get(key))))
    }

    pub fn f64_of(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} must be a number, got {:?}", self.get(key))))
    }

    pub fn bool_of(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!(
                "{key} must be true/false, got {other:?}"
            ))),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: bad number {s:?}")))
            })
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: bad integer {s:?}")))
            })
            .collect()
    }

    /// Serialize every resolved key, sorted, with the schema help inline.
    pub fn echo(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for (key, value) in &self.values {
            let help = SCHEMA
                .iter()
                .find(|(k, _, _)| k == key)
                .map(|(_, _, h)| *h)
                .unwrap_or("");
            out.push_str(&format!("{key}={value}  # {help}\n"));
        }
        out
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        fs::write(path, self.echo()).map_err(|e| Error::io(path, e))
    }

    // ---- typed stage views -------------------------------------------------

    pub fn split_fractions(&self) -> Result<Vec<f64>> {
        self.f64_list("data.split")
    }

    pub fn activation(&self) -> Result<Activation> {
        match self.get("train.activation") {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!(
                "train.activation must be relu|sigmoid, got {other:?}"
            ))),
        }
    }

    pub fn mlp_spec(&self, input_dim: usize, classes: usize) -> Result<MlpSpec> {
        let mut dims = vec![input_dim];
        dims.extend(self.usize_list("train.hidden")?);
        dims.push(classes);
        Ok(MlpSpec::new(dims, self.activation()?))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.get("train.optimizer") {
            "adam" => OptimKind::Adam,
            "sgd" => OptimKind::Sgd,
            other => {
                return Err(Error::Config(format!(
                    "train.optimizer must be adam|sgd, got {other:?}"
                )))
            }
        };
        Ok(TrainConfig {
            lr: self.f64_of("train.lr")?,
            epochs: self.usize_of("train.epochs")?,
            batch_size: self.usize_of("train.batch")?,
            optimizer,
            seed: self.u64_of("train.seed")?,
        })
    }

    pub fn unlearn_config(&self) -> Result<UnlearnConfig> {
        let outer_opt = match self.get("unlearn.outer_opt") {
            "adam" => OptimKind::Adam,
            "sgd" => OptimKind::Sgd,
            other => {
                return Err(Error::Config(format!(
                    "unlearn.outer_opt must be adam|sgd, got {other:?}"
                )))
            }
        };
        let method = match self.get("unlearn.solver") {
            "cg" => SolveMethod::ConjugateGradient,
            "fixed_point" => SolveMethod::FixedPoint,
            other => {
                return Err(Error::Config(format!(
                    "unlearn.solver must be cg|fixed_point, got {other:?}"
                )))
            }
        };
        Ok(UnlearnConfig {
            rounds: self.usize_of("unlearn.rounds")?,
            inner: InnerConfig {
                step_size: self.f64_of("unlearn.inner_lr")?,
                iterations: self.usize_of("unlearn.inner_steps")?,
                norm_bound: self.f64_of("unlearn.norm_bound")?,
                clamp_valid_range: self.bool_of("unlearn.clamp")?,
            },
            linsolve: LinSolveConfig {
                method,
                rounds: self.usize_of("unlearn.solver_rounds")?,
                fp_step: self.f64_of("unlearn.fp_step")?,
                tol: self.f64_of("unlearn.solver_tol")?,
                fallback_on_divergence: self.bool_of("unlearn.fallback")?,
            },
            outer_lr: self.f64_of("unlearn.outer_lr")?,
            outer_opt,
            batch_size: self.usize_of("unlearn.batch")?,
            seed: self.u64_of("unlearn.seed")?,
            naive_per_sample_steps: self.usize_of("unlearn.naive_steps")?,
        })
    }

    pub fn use_naive_method(&self) -> Result<bool> {
        match self.get("unlearn.method") {
            "ibau" => Ok(false),
            "naive" => Ok(true),
            other => Err(Error::Config(format!(
                "unlearn.method must be ibau|naive, got {other:?}"
            ))),
        }
    }

    fn patch_dim_groups(&self, dim: usize) -> Result<Vec<Vec<usize>>> {
        let mut groups = Vec::new();
        for group in self.get("attack.patch_dims").split(';') {
            let mut dims = Vec::new();
            for s in group.split(',') {
                let idx: usize = s.trim().parse().map_err(|_| {
                    Error::Config(format!("attack.patch_dims: bad index {s:?}"))
                })?;
                if idx >= dim {
                    return Err(Error::Config(format!(
                        "attack.patch_dims index {idx} out of range for dim {dim}"
                    )));
                }
                dims.push(idx);
            }
            groups.push(dims);
        }
        Ok(groups)
    }

    fn build_trigger(
        &self,
        kind: TriggerKind,
        dims: &[usize],
        dim: usize,
        rng: &mut SeededRng,
    ) -> Result<TriggerSpec> {
        let mut mask = vec![0.0; dim];
        for &d in dims {
            mask[d] = 1.0;
        }
        let mask = Tensor::from_vec(&[dim], mask);
        let value = self.f64_of("attack.patch_value")?;
        Ok(match kind {
            TriggerKind::Patch => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::Config(format!(
                        "attack.patch_value must be in [0,1], got {value}"
                    )));
                }
                TriggerSpec::patch(mask, Tensor::filled(&[dim], value))
            }
            TriggerKind::Noise => {
                let pattern = Tensor::from_vec(
                    &[dim],
                    (0..dim).map(|_| rng.next_f64()).collect(),
                );
                TriggerSpec::noise(mask, pattern)
            }
            TriggerKind::Blend => {
                let alpha = self.f64_of("attack.blend_alpha")?;
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!(
                        "attack.blend_alpha must be in [0,1], got {alpha}"
                    )));
                }
                let pattern = Tensor::from_vec(
                    &[dim],
                    (0..dim).map(|_| rng.next_f64()).collect(),
                );
                TriggerSpec::blend(pattern, alpha)
            }
        })
    }

    /// Resolve the attack configuration into a concrete poison plan for data
    /// of the given dimension and class count.
    pub fn poison_plan(&self, dim: usize, classes: usize) -> Result<PoisonPlan> {
        let mode = match self.get("attack.mode") {
            "single_target" => PoisonMode::SingleTarget,
            "all_to_all" => PoisonMode::AllToAll,
            "multi_trigger" => PoisonMode::MultiTrigger,
            other => {
                return Err(Error::Config(format!(
                    "attack.mode must be single_target|all_to_all|multi_trigger, got {other:?}"
                )))
            }
        };
        let kind = match self.get("attack.trigger") {
            "patch" => TriggerKind::Patch,
            "blend" => TriggerKind::Blend,
            "noise" => TriggerKind::Noise,
            other => {
                return Err(Error::Config(format!(
                    "attack.trigger must be patch|blend|noise, got {other:?}"
                )))
            }
        };
        let targets = self.usize_list("attack.targets")?;
        for &t in &targets {
            if t >= classes {
                return Err(Error::Config(format!(
                    "attack target {t} out of range [0, {classes})"
                )));
            }
        }
        let seed = self.u64_of("attack.seed")?;
        let mut rng = SeededRng::new(seed);
        let groups = self.patch_dim_groups(dim)?;

        let entry_count = match mode {
            PoisonMode::SingleTarget | PoisonMode::AllToAll => 1,
            PoisonMode::MultiTrigger => targets.len(),
        };
        if targets.len() < entry_count {
            return Err(Error::Config(format!(
                "attack.targets has {} entries, need {entry_count}",
                targets.len()
            )));
        }
        if groups.len() < entry_count {
            return Err(Error::Config(format!(
                "attack.patch_dims has {} groups, need {entry_count}",
                groups.len()
            )));
        }

        let mut entries = Vec::with_capacity(entry_count);
        for e in 0..entry_count {
            let trigger = self.build_trigger(kind, &groups[e], dim, &mut rng)?;
            entries.push((trigger, targets[e]));
        }
        Ok(PoisonPlan {
            mode,
            entries,
            poison_ratio: self.f64_of("attack.ratio")?,
            seed,
        })
    }
}
