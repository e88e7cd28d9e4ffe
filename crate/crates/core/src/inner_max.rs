//! The inner maximization: search for a single universal perturbation that
//! drives the batch loss up within an l2 ball.
//!
//! [`pga_universal`] is projected gradient ascent on the shared perturbation
//! (the defense's inner loop); [`naive_universal`] is the per-sample
//! accumulation scheme used by the unstable adversarial-training baseline.
//! Both operate through [`AscentObjective`], so the same loops run against
//! the real network objective and against closed-form quadratic fixtures.

use crate::autodiff::{backward, Tape};
use crate::error::{Error, Result};
use crate::model::{build_perturbed_loss, MlpSpec, Params};
use crate::tensor::Tensor;

/// Hyperparameters of the inner maximizer.
#[derive(Debug, Clone)]
pub struct InnerConfig {
    /// Ascent step size (alpha).
    pub step_size: f64,
    /// Iteration count (T).
    pub iterations: usize,
    /// l2 norm bound on the perturbation (C_delta).
    pub norm_bound: f64,
    /// Clip `x + delta` into [0, 1] before the network.
    pub clamp_valid_range: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            step_size: 0.1,
            iterations: 5,
            norm_bound: 10.0,
            clamp_valid_range: true,
        }
    }
}

impl InnerConfig {
    fn validate(&self) {
        assert!(self.step_size > 0.0, "step size must be positive");
        assert!(self.iterations >= 1, "need at least one iteration");
        assert!(self.norm_bound > 0.0, "norm bound must be positive");
    }
}

/// Result of an inner maximization run.
#[derive(Debug, Clone)]
pub struct PerturbResult {
    pub delta: Tensor,
    /// Objective values along the run. For [`pga_universal`] this is H at the
    /// start of each of the T iterations; [`naive_universal`] records the
    /// full-batch H before and after its pass.
    pub loss_trace: Vec<f64>,
    pub final_norm: f64,
}

/// Scale `delta` onto the l2 ball of radius `c_delta`:
/// `delta * min(1, c_delta / ||delta||)`.
pub fn project_l2(delta: &Tensor, c_delta: f64) -> Tensor {
    assert!(c_delta > 0.0, "norm bound must be positive");
    let norm = delta.l2_norm();
    if norm <= c_delta {
        delta.clone()
    } else {
        delta.scale(c_delta / norm)
    }
}

/// Anything projected gradient ascent can climb: a scalar objective of a
/// perturbation vector with its gradient.
pub trait AscentObjective {
    fn dim(&self) -> usize;
    fn value_and_grad(&self, delta: &Tensor) -> (f64, Tensor);

    fn value(&self, delta: &Tensor) -> f64 {
        self.value_and_grad(delta).0
    }
}

/// The real inner objective: mean cross-entropy of `f_theta(x + delta)`
/// against the true labels (the defender never sees attacker targets).
pub struct BatchObjective<'a> {
    pub spec: &'a MlpSpec,
    pub params: &'a Params,
    pub x: &'a Tensor,
    pub y: &'a [usize],
    pub clamp: bool,
}

impl AscentObjective for BatchObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.input_dim()
    }

    fn value_and_grad(&self, delta: &Tensor) -> (f64, Tensor) {
        let tape = Tape::new();
        let graph = build_perturbed_loss(
            &tape, self.spec, self.params, self.x, self.y, delta, self.clamp,
        );
        let value = graph.loss.value().scalar();
        let delta_var = graph.delta_var.expect("perturbed graph has a delta leaf");
        let grads = backward(graph.loss, &[delta_var]);
        let grad = grads
            .get(&delta_var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(delta.shape()));
        (value, grad)
    }
}

impl BatchObjective<'_> {
    /// Same objective restricted to one row of the batch.
    fn single_row(&self, i: usize) -> (Tensor, Vec<usize>) {
        (
            Tensor::from_vec(&[1, self.x.ncols()], self.x.row(i).data().to_vec()),
            vec![self.y[i]],
        )
    }
}

/// Projected gradient ascent for a universal perturbation over any
/// [`AscentObjective`]. Starts at zero, takes `cfg.iterations` steps of
/// `delta += alpha * grad` each followed by the l2 projection, and records
/// the objective at the start of every iteration.
pub fn pga_universal_on(obj: &dyn AscentObjective, cfg: &InnerConfig) -> Result<PerturbResult> {
    cfg.validate();
    let mut delta = Tensor::zeros(&[obj.dim()]);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let (value, grad) = obj.value_and_grad(&delta);
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::numeric(
                format!("inner ascent iteration {t}"),
                format!("non-finite loss or gradient (loss = {value})"),
            ));
        }
        trace.push(value);
        delta = project_l2(&delta.add(&grad.scale(cfg.step_size)), cfg.norm_bound);
    }
    let final_norm = delta.l2_norm();
    Ok(PerturbResult {
        delta,
        loss_trace: trace,
        final_norm,
    })
}

/// [`pga_universal_on`] over the network batch objective.
pub fn pga_universal(
    spec: &MlpSpec,
    params: &Params,
    x: &Tensor,
    y: &[usize],
    cfg: &InnerConfig,
) -> Result<PerturbResult> {
    assert!(!y.is_empty(), "batch must be nonempty");
    let obj = BatchObjective {
        spec,
        params,
        x,
        y,
        clamp: cfg.clamp_valid_range,
    };
    pga_universal_on(&obj, cfg)
}

/// The baseline universal-perturbation generator: one pass over the batch
/// where each sample runs `per_sample_steps` ascent steps on its own loss
/// starting from the current universal delta, the increments are folded back
/// in, and the result is projected after every sample.
pub fn naive_universal(
    spec: &MlpSpec,
    params: &Params,
    x: &Tensor,
    y: &[usize],
    cfg: &InnerConfig,
    per_sample_steps: usize,
) -> Result<PerturbResult> {
    cfg.validate();
    assert!(!y.is_empty(), "batch must be nonempty");
    let full = BatchObjective {
        spec,
        params,
        x,
        y,
        clamp: cfg.clamp_valid_range,
    };
    let mut delta = Tensor::zeros(&[spec.input_dim()]);
    let mut trace = vec![full.value(&delta)];

    for i in 0..y.len() {
        let (xi, yi) = full.single_row(i);
        let sample = BatchObjective {
            spec,
            params,
            x: &xi,
            y: &yi,
            clamp: cfg.clamp_valid_range,
        };
        let mut local = delta.clone();
        for s in 0..per_sample_steps {
            let (value, grad) = sample.value_and_grad(&local);
            if !value.is_finite() || !grad.is_finite() {
                return Err(Error::numeric(
                    format!("naive perturbation sample {i} step {s}"),
                    format!("non-finite loss or gradient (loss = {value})"),
                ));
            }
            local = local.add(&grad.scale(cfg.step_size));
        }
        // Fold the sample's increment into the universal perturbation.
        let increment = local.sub(&delta);
        delta = project_l2(&delta.add(&increment), cfg.norm_bound);
    }
    trace.push(full.value(&delta));
    let final_norm = delta.l2_norm();
    Ok(PerturbResult {
        delta,
        loss_trace: trace,
        final_norm,
    })
}
