//! Attack and generalization metrics: clean accuracy, attack success rates
//! for each label-mapping scheme, ramp-loss margin risk, error gap, and
//! cross-run stability statistics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{forward, predict, MlpSpec, Params};
use crate::poison::{apply_trigger, Dataset, TriggerSpec};
use crate::tensor::Tensor;

/// Evaluation summary for one model.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub asr_overall: f64,
    /// (trigger index, target label, asr) per plan entry; the target is the
    /// entry's nominal target and unused for all-to-all.
    pub asr_per_entry: Vec<(usize, usize, f64)>,
    /// (gamma, value) when margin risk was requested.
    pub margin_risk: Option<(f64, f64)>,
    pub error_gap: Option<f64>,
}

/// Mean/std/min/max of a metric across runs. Population standard deviation.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Fraction of rows predicted correctly.
pub fn accuracy(spec: &MlpSpec, params: &Params, dataset: &Dataset) -> f64 {
    assert!(!dataset.is_empty(), "dataset must be nonempty");
    let preds = predict(spec, params, &dataset.x);
    let correct = preds.iter().zip(&dataset.y).filter(|(p, y)| p == y).count();
    correct as f64 / dataset.len() as f64
}

fn triggered_predictions(
    spec: &MlpSpec,
    params: &Params,
    dataset: &Dataset,
    trigger: &TriggerSpec,
) -> Vec<usize> {
    let d = dataset.dim();
    let mut stamped = Vec::with_capacity(dataset.len() * d);
    for i in 0..dataset.len() {
        let row = apply_trigger(&dataset.x.row(i), trigger);
        stamped.extend_from_slice(row.data());
    }
    let x = Tensor::from_vec(&[dataset.len(), d], stamped);
    predict(spec, params, &x)
}

/// Attack success rate for a single-target trigger: among test rows whose
/// true label differs from the target, the fraction pushed to the target by
/// the trigger. Errors when every row already carries the target label.
pub fn asr_single_target(
    spec: &MlpSpec,
    params: &Params,
    clean_test: &Dataset,
    trigger: &TriggerSpec,
    target: usize,
) -> Result<f64> {
    assert!(!clean_test.is_empty(), "test set must be nonempty");
    let preds = triggered_predictions(spec, params, clean_test, trigger);
    let mut hits = 0usize;
    let mut denom = 0usize;
    for (i, &p) in preds.iter().enumerate() {
        if clean_test.y[i] == target {
            continue;
        }
        denom += 1;
        if p == target {
            hits += 1;
        }
    }
    if denom == 0 {
        return Err(Error::Config(format!(
            "asr denominator empty: every test row already has label {target}"
        )));
    }
    Ok(hits as f64 / denom as f64)
}

/// Attack success rate for the all-to-all mapping: fraction of all rows the
/// trigger pushes to `(y + 1) mod C`.
pub fn asr_all_to_all(
    spec: &MlpSpec,
    params: &Params,
    clean_test: &Dataset,
    trigger: &TriggerSpec,
) -> f64 {
    assert!(!clean_test.is_empty(), "test set must be nonempty");
    let c = clean_test.class_count;
    let preds = triggered_predictions(spec, params, clean_test, trigger);
    let hits = preds
        .iter()
        .enumerate()
        .filter(|(i, &p)| p == (clean_test.y[*i] + 1) % c)
        .count();
    hits as f64 / clean_test.len() as f64
}

/// Margin-based ramp loss:
/// 0 for r < -gamma, `1 + r / gamma` on [-gamma, 0], 1 for r > 0.
pub fn ramp_loss(r: f64, gamma: f64) -> f64 {
    assert!(gamma > 0.0, "gamma must be positive, got {gamma}");
    if r < -gamma {
        0.0
    } else if r <= 0.0 {
        1.0 + r / gamma
    } else {
        1.0
    }
}

/// Margin operator `M(v, y) = v_y - max_{j != y} v_j`.
fn margin(logits_row: &[f64], y: usize) -> f64 {
    let mut best_other = f64::NEG_INFINITY;
    for (j, &v) in logits_row.iter().enumerate() {
        if j != y {
            best_other = best_other.max(v);
        }
    }
    logits_row[y] - best_other
}

/// Empirical margin risk: mean ramp loss of negated margins on inputs
/// perturbed by `delta` (pass zeros for the clean risk). Ties (margin 0)
/// count as full loss.
pub fn empirical_margin_risk(
    spec: &MlpSpec,
    params: &Params,
    dataset: &Dataset,
    delta: &Tensor,
    gamma: f64,
) -> f64 {
    assert!(gamma > 0.0, "gamma must be positive");
    assert_eq!(delta.len(), dataset.dim(), "delta length != data dim");
    let d = dataset.dim();
    let mut shifted = Vec::with_capacity(dataset.len() * d);
    for i in 0..dataset.len() {
        let row = dataset.x.row(i).add(delta).clamp01();
        shifted.extend_from_slice(row.data());
    }
    let x = Tensor::from_vec(&[dataset.len(), d], shifted);
    let logits = forward(spec, params, &x);
    let c = logits.ncols();
    let mut total = 0.0;
    for i in 0..dataset.len() {
        let row = &logits.data()[i * c..(i + 1) * c];
        total += ramp_loss(-margin(row, dataset.y[i]), gamma);
    }
    total / dataset.len() as f64
}

/// `|test error - train error|`, symmetric in its arguments.
pub fn error_gap(
    spec: &MlpSpec,
    params: &Params,
    train_set: &Dataset,
    test_set: &Dataset,
) -> f64 {
    let acc_train = accuracy(spec, params, train_set);
    let acc_test = accuracy(spec, params, test_set);
    ((1.0 - acc_test) - (1.0 - acc_train)).abs()
}

/// Population statistics over a series of runs.
pub fn stability_stats(series: &[f64]) -> StabilityStats {
    assert!(!series.is_empty(), "need at least one run");
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    StabilityStats {
        mean,
        std: var.sqrt(),
        min: series.iter().cloned().fold(f64::INFINITY, f64::min),
        max: series.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}
