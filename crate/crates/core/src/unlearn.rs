//! The outer loops that turn a poisoned model into a sanitized one using
//! nothing but clean data.
//!
//! [`ibau`] alternates the inner universal-perturbation ascent with an outer
//! descent step along the implicit hypergradient, re-initializing the
//! perturbation to zero every round and using the same clean batch for both
//! halves of a round. [`naive_unlearn`] is the adversarial-training baseline
//! it is compared against: per-sample accumulated perturbations followed by
//! a decoupled gradient step that treats the perturbation as a constant.
//!
//! Neither signature accepts trigger or target information; the optional
//! evaluation hook is the only place attack knowledge can enter, and it only
//! observes parameters.

use std::time::Instant;

use crate::autodiff::{backward, Tape};
use crate::error::Result;
use crate::hypergrad::{implicit_hypergrad, LinSolveConfig};
use crate::inner_max::{naive_universal, pga_universal, BatchObjective, InnerConfig};
use crate::model::{build_perturbed_loss, MlpSpec, OptimKind, Optimizer, Params};
use crate::poison::Dataset;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct UnlearnConfig {
    /// Outer rounds (K). Zero returns the input parameters unchanged.
    pub rounds: usize,
    pub inner: InnerConfig,
    pub linsolve: LinSolveConfig,
    /// Outer step size (beta).
    pub outer_lr: f64,
    pub outer_opt: OptimKind,
    /// Clean rows drawn per round; 0 means the full clean set.
    pub batch_size: usize,
    pub seed: u64,
    /// Ascent steps each sample contributes in the naive baseline.
    pub naive_per_sample_steps: usize,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            rounds: 5,
            inner: InnerConfig::default(),
            linsolve: LinSolveConfig::default(),
            outer_lr: 0.1,
            outer_opt: OptimKind::Sgd,
            batch_size: 0,
            seed: 23,
            naive_per_sample_steps: 1,
        }
    }
}

/// Attack-side measurements taken by the optional evaluation hook.
#[derive(Debug, Clone)]
pub struct EvalSnapshot {
    pub acc: f64,
    pub asr_per_trigger: Vec<f64>,
}

/// Diagnostics for one outer round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub delta_norm: f64,
    /// Inner objective at delta = 0 for this round's batch.
    pub h_before: f64,
    /// Inner objective at the returned perturbation.
    pub h_after: f64,
    pub direct_norm: f64,
    pub indirect_norm: f64,
    pub fallback: bool,
    pub wall_time_s: f64,
    pub eval: Option<EvalSnapshot>,
}

pub type EvalHook<'a> = &'a mut dyn FnMut(&Params) -> EvalSnapshot;

/// Cycles seeded permutations of the clean set; full-batch mode hands out
/// the identity order.
struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: SeededRng,
}

impl BatchCycler {
    fn new(n: usize, batch_size: usize, seed: u64) -> BatchCycler {
        let batch = if batch_size == 0 || batch_size >= n {
            n
        } else {
            batch_size
        };
        let mut cycler = BatchCycler {
            order: (0..n).collect(),
            pos: 0,
            batch,
            rng: SeededRng::new(seed),
        };
        if cycler.batch < n {
            cycler.rng.shuffle(&mut cycler.order);
        }
        cycler
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.batch == n {
            return self.order.clone();
        }
        if self.pos + self.batch > n {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

fn eval_inner_objective(
    spec: &MlpSpec,
    params: &Params,
    x: &Tensor,
    y: &[usize],
    delta: &Tensor,
    clamp: bool,
) -> f64 {
    use crate::inner_max::AscentObjective;
    BatchObjective {
        spec,
        params,
        x,
        y,
        clamp,
    }
    .value(delta)
}

/// Gradient of H(delta, theta) with respect to the parameters only, the
/// decoupled update the naive baseline takes.
fn perturbed_param_grads(
    spec: &MlpSpec,
    params: &Params,
    x: &Tensor,
    y: &[usize],
    delta: &Tensor,
    clamp: bool,
) -> Params {
    let tape = Tape::new();
    let graph = build_perturbed_loss(&tape, spec, params, x, y, delta, clamp);
    let grads = backward(graph.loss, &graph.param_vars);
    let entries = params
        .entries
        .iter()
        .zip(&graph.param_vars)
        .map(|((name, t), var)| {
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            (name.clone(), g)
        })
        .collect();
    Params { entries }
}

enum Method {
    Implicit,
    Naive,
}

fn run_outer_loop(
    method: Method,
    spec: &MlpSpec,
    params: &Params,
    clean_set: &Dataset,
    cfg: &UnlearnConfig,
    mut eval_hook: Option<EvalHook<'_>>,
) -> Result<(Params, Vec<RoundRecord>)> {
    assert!(!clean_set.is_empty(), "clean set must be nonempty");
    assert!(cfg.outer_lr > 0.0, "outer step size must be positive");
    assert_eq!(
        spec.input_dim(),
        clean_set.dim(),
        "model input dim != clean data dim"
    );
    let mut theta = params.clone();
    if cfg.rounds == 0 {
        return Ok((theta, Vec::new()));
    }
    let mut optimizer = Optimizer::new(cfg.outer_opt, cfg.outer_lr, &theta);
    let mut cycler = BatchCycler::new(clean_set.len(), cfg.batch_size, cfg.seed);
    let mut records = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let start = Instant::now();
        let indices = cycler.next_batch();
        let (bx, by) = clean_set.gather(&indices);

        let with_round = |e: crate::error::Error| match e {
            crate::error::Error::Numeric { stage, msg } => crate::error::Error::Numeric {
                stage: format!("round {round}, {stage}"),
                msg,
            },
            other => other,
        };

        let record = match method {
            Method::Implicit => {
                let perturb =
                    pga_universal(spec, &theta, &bx, &by, &cfg.inner).map_err(with_round)?;
                let h_after = eval_inner_objective(
                    spec,
                    &theta,
                    &bx,
                    &by,
                    &perturb.delta,
                    cfg.inner.clamp_valid_range,
                );
                let report = implicit_hypergrad(
                    spec,
                    &theta,
                    &perturb.delta,
                    &bx,
                    &by,
                    cfg.inner.clamp_valid_range,
                    &cfg.linsolve,
                )
                .map_err(with_round)?;
                optimizer.step(&mut theta, &report.hypergrad);
                RoundRecord {
                    round,
                    delta_norm: perturb.final_norm,
                    h_before: perturb.loss_trace[0],
                    h_after,
                    direct_norm: report.direct_norm,
                    indirect_norm: report.indirect_norm,
                    fallback: report.fallback_used,
                    wall_time_s: 0.0,
                    eval: None,
                }
            }
            Method::Naive => {
                let perturb = naive_universal(
                    spec,
                    &theta,
                    &bx,
                    &by,
                    &cfg.inner,
                    cfg.naive_per_sample_steps,
                )
                .map_err(with_round)?;
                let grads = perturbed_param_grads(
                    spec,
                    &theta,
                    &bx,
                    &by,
                    &perturb.delta,
                    cfg.inner.clamp_valid_range,
                );
                optimizer.step(&mut theta, &grads);
                RoundRecord {
                    round,
                    delta_norm: perturb.final_norm,
                    h_before: perturb.loss_trace[0],
                    h_after: *perturb.loss_trace.last().unwrap(),
                    direct_norm: grads.l2_norm(),
                    indirect_norm: 0.0,
                    fallback: false,
                    wall_time_s: 0.0,
                    eval: None,
                }
            }
        };

        let mut record = record;
        record.eval = eval_hook.as_mut().map(|hook| hook(&theta));
        record.wall_time_s = start.elapsed().as_secs_f64();
        records.push(record);
    }
    Ok((theta, records))
}

/// Implicit-hypergradient unlearning: K rounds of inner ascent, truncated
/// Hessian solve, and an outer optimizer step.
pub fn ibau(
    spec: &MlpSpec,
    params: &Params,
    clean_set: &Dataset,
    cfg: &UnlearnConfig,
    eval_hook: Option<EvalHook<'_>>,
) -> Result<(Params, Vec<RoundRecord>)> {
    run_outer_loop(Method::Implicit, spec, params, clean_set, cfg, eval_hook)
}

/// Adversarial-training baseline: per-sample accumulated universal
/// perturbations plus a gradient step that ignores the perturbation's
/// dependence on the parameters.
pub fn naive_unlearn(
    spec: &MlpSpec,
    params: &Params,
    clean_set: &Dataset,
    cfg: &UnlearnConfig,
    eval_hook: Option<EvalHook<'_>>,
) -> Result<(Params, Vec<RoundRecord>)> {
    run_outer_loop(Method::Naive, spec, params, clean_set, cfg, eval_hook)
}

/// One row of the norm-bound ablation table.
#[derive(Debug, Clone)]
pub struct NormBoundRow {
    pub c_delta: f64,
    pub acc: f64,
    pub asr: f64,
}

/// Run [`ibau`] once per norm bound (same seed and config otherwise) and
/// measure the outcome with the supplied closure. Rows come back sorted by
/// bound regardless of input order.
pub fn sweep_norm_bound(
    spec: &MlpSpec,
    params: &Params,
    clean_set: &Dataset,
    bounds: &[f64],
    cfg: &UnlearnConfig,
    eval: &mut dyn FnMut(&Params) -> (f64, f64),
) -> Result<Vec<NormBoundRow>> {
    assert!(
        bounds.iter().all(|&b| b > 0.0),
        "norm bounds must be positive"
    );
    let mut sorted = bounds.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::with_capacity(sorted.len());
    for bound in sorted {
        let mut run_cfg = cfg.clone();
        run_cfg.inner.norm_bound = bound;
        let (sanitized, _) = ibau(spec, params, clean_set, &run_cfg, None)?;
        let (acc, asr) = eval(&sanitized);
        rows.push(NormBoundRow {
            c_delta: bound,
            acc,
            asr,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergrad::{implicit_hypergrad_at, HvpMode, QuadraticBilevel};
    use crate::model::{train, Activation, TrainConfig};
    use crate::poison::make_synthetic_blobs;

    fn setup() -> (MlpSpec, Params, Dataset) {
        let mut rng = SeededRng::new(71);
        let ds = make_synthetic_blobs(3, 6, 40, 0.06, &mut rng);
        let spec = MlpSpec::new(vec![6, 16, 8, 3], Activation::Relu);
        let (params, _) = train(
            &ds,
            &spec,
            &TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
        );
        (spec, params, ds)
    }

    #[test]
    fn zero_rounds_returns_params_unchanged() {
        let (spec, params, ds) = setup();
        let cfg = UnlearnConfig {
            rounds: 0,
            ..UnlearnConfig::default()
        };
        let (out, records) = ibau(&spec, &params, &ds, &cfg, None).unwrap();
        assert_eq!(out, params);
        assert!(records.is_empty());

        let (out, records) = naive_unlearn(&spec, &params, &ds, &cfg, None).unwrap();
        assert_eq!(out, params);
        assert!(records.is_empty());
    }

    #[test]
    fn records_respect_norm_bound_and_timing() {
        let (spec, params, ds) = setup();
        let cfg = UnlearnConfig {
            rounds: 3,
            ..UnlearnConfig::default()
        };
        let (_, records) = ibau(&spec, &params, &ds, &cfg, None).unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            assert!(r.delta_norm <= cfg.inner.norm_bound + 1e-9);
            assert!(r.wall_time_s > 0.0);
            assert!(r.h_before.is_finite() && r.h_after.is_finite());
        }
    }

    #[test]
    fn ibau_deterministic_under_seed() {
        let (spec, params, ds) = setup();
        let cfg = UnlearnConfig {
            rounds: 2,
            batch_size: 32,
            ..UnlearnConfig::default()
        };
        let (p1, r1) = ibau(&spec, &params, &ds, &cfg, None).unwrap();
        let (p2, r2) = ibau(&spec, &params, &ds, &cfg, None).unwrap();
        assert_eq!(p1, p2);
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.delta_norm, b.delta_norm);
            assert_eq!(a.h_before, b.h_before);
            assert_eq!(a.h_after, b.h_after);
            assert_eq!(a.direct_norm, b.direct_norm);
            assert_eq!(a.indirect_norm, b.indirect_norm);
        }
    }

    #[test]
    fn naive_same_seed_identical_records() {
        let (spec, params, ds) = setup();
        let cfg = UnlearnConfig {
            rounds: 2,
            ..UnlearnConfig::default()
        };
        let (p1, r1) = naive_unlearn(&spec, &params, &ds, &cfg, None).unwrap();
        let (p2, r2) = naive_unlearn(&spec, &params, &ds, &cfg, None).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.len(), r2.len());
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.h_after, b.h_after);
        }
    }

    #[test]
    fn eval_hook_sees_every_round() {
        let (spec, params, ds) = setup();
        let cfg = UnlearnConfig {
            rounds: 2,
            ..UnlearnConfig::default()
        };
        let mut calls = 0usize;
        let mut hook = |_: &Params| {
            calls += 1;
            EvalSnapshot {
                acc: 1.0,
                asr_per_trigger: vec![0.0],
            }
        };
        let (_, records) = ibau(&spec, &params, &ds, &cfg, Some(&mut hook)).unwrap();
        assert_eq!(calls, 2);
        assert!(records.iter().all(|r| r.eval.is_some()));
    }

    #[test]
    fn quadratic_oracle_outer_descent_is_monotone() {
        // K outer SGD steps with exact hypergradients must shrink psi when
        // the step size is below the curvature bound.
        let mut rng = SeededRng::new(73);
        let d = 6;
        let p = 4;
        let prob = QuadraticBilevel::from_parts(
            Tensor::eye(d),
            Tensor::randn(&[d, p], &mut rng, 0.0, 0.3),
            Tensor::randn(&[d], &mut rng, 0.0, 1.0),
            1.0,
            1.0,
            1.0,
        );
        let mut theta: Vec<f64> = (0..p).map(|_| rng.next_gaussian()).collect();
        let beta = 0.1;
        let mut last = prob.psi_star(&theta);
        for _ in 0..10 {
            let point = prob.at(&theta);
            let delta_star = prob.inner_optimum(&theta);
            let hg = implicit_hypergrad_at(
                &point,
                &delta_star,
                &LinSolveConfig {
                    rounds: d,
                    ..LinSolveConfig::default()
                },
                HvpMode::Analytic,
            )
            .unwrap();
            for (t, g) in theta.iter_mut().zip(&hg.hypergrad) {
                *t -= beta * g;
            }
            let now = prob.psi_star(&theta);
            assert!(now < last, "psi must decrease: {now} vs {last}");
            last = now;
        }
    }

    #[test]
    fn sweep_rows_sorted_ascending() {
        let (spec, params, ds) = setup();
        let cfg = UnlearnConfig {
            rounds: 1,
            ..UnlearnConfig::default()
        };
        let mut eval = |_: &Params| (0.9, 0.1);
        let rows =
            sweep_norm_bound(&spec, &params, &ds, &[4.0, 1.0, 2.0], &cfg, &mut eval).unwrap();
        let bounds: Vec<f64> = rows.iter().map(|r| r.c_delta).collect();
        assert_eq!(bounds, vec![1.0, 2.0, 4.0]);

        let single = sweep_norm_bound(&spec, &params, &ds, &[3.0], &cfg, &mut eval).unwrap();
        assert_eq!(single.len(), 1);
    }
}
