//! In-memory end-to-end runs: generate data, poison, train, defend,
//! evaluate. The CLI commands and the sweep axes are thin wrappers over
//! these helpers, and the integration suite drives them directly.

use crate::cli::config::RunConfig;
use crate::error::Result;
use crate::metrics::{
    accuracy, asr_all_to_all, asr_single_target, empirical_margin_risk, error_gap, MetricsReport,
};
use crate::model::{train, MlpSpec, Params};
use crate::poison::{make_synthetic_blobs, poison_dataset, split, Dataset, PoisonMode, PoisonPlan};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::unlearn::{ibau, naive_unlearn, EvalSnapshot, RoundRecord, UnlearnConfig};

/// The three clean splits of a generated corpus.
#[derive(Debug, Clone)]
pub struct DeskData {
    pub train: Dataset,
    pub defense: Dataset,
    pub test: Dataset,
}

pub fn generate_data(cfg: &RunConfig) -> Result<DeskData> {
    let classes = cfg.usize_of("data.classes")?;
    let dim = cfg.usize_of("data.dim")?;
    let per_class = cfg.usize_of("data.per_class")?;
    let spread = cfg.f64_of("data.spread")?;
    let seed = cfg.u64_of("data.seed")?;
    let fractions = cfg.split_fractions()?;
    if fractions.len() != 3 {
        return Err(crate::error::Error::Config(format!(
            "data.split needs 3 fractions (train/defense/test), got {}",
            fractions.len()
        )));
    }
    let mut rng = SeededRng::new(seed);
    let full = make_synthetic_blobs(classes, dim, per_class, spread, &mut rng);
    let mut parts = split(&full, &fractions, seed.wrapping_add(1))?;
    let test = parts.pop().unwrap();
    let defense = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(DeskData {
        train,
        defense,
        test,
    })
}

/// Everything the defense starts from: the data, the attack, and the
/// poisoned model.
#[derive(Debug, Clone)]
pub struct DeskSetup {
    pub spec: MlpSpec,
    pub data: DeskData,
    pub plan: PoisonPlan,
    pub poisoned_train: Dataset,
    pub poisoned_params: Params,
    pub train_history: Vec<f64>,
}

pub fn build_setup(cfg: &RunConfig) -> Result<DeskSetup> {
    let data = generate_data(cfg)?;
    let classes = data.train.class_count;
    let plan = cfg.poison_plan(data.train.dim(), classes)?;
    let (poisoned_train, _) = poison_dataset(&data.train, &plan)?;
    let spec = cfg.mlp_spec(data.train.dim(), classes)?;
    let train_cfg = cfg.train_config()?;
    let (poisoned_params, train_history) = train(&poisoned_train, &spec, &train_cfg);
    Ok(DeskSetup {
        spec,
        data,
        plan,
        poisoned_train,
        poisoned_params,
        train_history,
    })
}

/// ASR of one plan entry on the clean test set, following the entry's label
/// mapping.
pub fn entry_asr(
    spec: &MlpSpec,
    params: &Params,
    plan: &PoisonPlan,
    entry: usize,
    test: &Dataset,
) -> Result<f64> {
    let (trigger, target) = &plan.entries[entry];
    match plan.mode {
        PoisonMode::AllToAll => Ok(asr_all_to_all(spec, params, test, trigger)),
        _ => asr_single_target(spec, params, test, trigger, *target),
    }
}

/// Full metrics report for a model under a known attack plan. `defense_set`
/// enables the error-gap diagnostic (risk on the unlearning data vs unseen
/// test data).
pub fn evaluate_model(
    spec: &MlpSpec,
    params: &Params,
    plan: &PoisonPlan,
    test: &Dataset,
    defense_set: Option<&Dataset>,
    gamma: f64,
) -> Result<MetricsReport> {
    let acc = accuracy(spec, params, test);
    let mut asr_per_entry = Vec::with_capacity(plan.entries.len());
    let mut total = 0.0;
    for (i, (_, target)) in plan.entries.iter().enumerate() {
        let asr = entry_asr(spec, params, plan, i, test)?;
        asr_per_entry.push((i, *target, asr));
        total += asr;
    }
    let asr_overall = total / plan.entries.len() as f64;
    let margin_risk = Some((
        gamma,
        empirical_margin_risk(spec, params, test, &Tensor::zeros(&[test.dim()]), gamma),
    ));
    let gap = defense_set.map(|d| error_gap(spec, params, d, test));
    Ok(MetricsReport {
        acc,
        asr_overall,
        asr_per_entry,
        margin_risk,
        error_gap: gap,
    })
}

/// Run the configured defense. When `with_eval` is set, every round is
/// scored against the test set with the attack plan (the hook is the only
/// place attack knowledge touches the defense loop).
pub fn defend_with(
    setup: &DeskSetup,
    unlearn_cfg: &UnlearnConfig,
    clean: &Dataset,
    naive: bool,
    with_eval: bool,
) -> Result<(Params, Vec<RoundRecord>)> {
    let spec = &setup.spec;
    let plan = &setup.plan;
    let test = &setup.data.test;
    let mut hook = |params: &Params| {
        let acc = accuracy(spec, params, test);
        let asr: Vec<f64> = (0..plan.entries.len())
            .map(|i| entry_asr(spec, params, plan, i, test).unwrap_or(f64::NAN))
            .collect();
        EvalSnapshot {
            acc,
            asr_per_trigger: asr,
        }
    };
    let hook_opt: Option<&mut dyn FnMut(&Params) -> EvalSnapshot> = if with_eval {
        Some(&mut hook)
    } else {
        None
    };
    if naive {
        naive_unlearn(spec, &setup.poisoned_params, clean, unlearn_cfg, hook_opt)
    } else {
        ibau(spec, &setup.poisoned_params, clean, unlearn_cfg, hook_opt)
    }
}

/// Outcome of a full pipeline run.
#[derive(Debug, Clone)]
pub struct FullRun {
    pub setup: DeskSetup,
    pub before: MetricsReport,
    pub sanitized: Params,
    pub records: Vec<RoundRecord>,
    pub after: MetricsReport,
}

/// Generate, poison, train, defend, and evaluate in one go.
pub fn run_full(cfg: &RunConfig) -> Result<FullRun> {
    let setup = build_setup(cfg)?;
    let gamma = cfg.f64_of("eval.gamma")?;
    let before = evaluate_model(
        &setup.spec,
        &setup.poisoned_params,
        &setup.plan,
        &setup.data.test,
        Some(&setup.data.defense),
        gamma,
    )?;
    let unlearn_cfg = cfg.unlearn_config()?;
    let naive = cfg.use_naive_method()?;
    let with_eval = cfg.bool_of("unlearn.eval_each_round")?;
    let (sanitized, records) =
        defend_with(&setup, &unlearn_cfg, &setup.data.defense, naive, with_eval)?;
    let after = evaluate_model(
        &setup.spec,
        &sanitized,
        &setup.plan,
        &setup.data.test,
        Some(&setup.data.defense),
        gamma,
    )?;
    Ok(FullRun {
        setup,
        before,
        sanitized,
        records,
        after,
    })
}
