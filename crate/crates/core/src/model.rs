//! The classifier under attack and repair: a plain MLP with a deterministic
//! training loop.
//!
//! Two forward paths exist on purpose: [`forward`] runs inference on raw
//! tensors, while [`build_loss`] / [`build_perturbed_loss`] record the same
//! computation on a tape so gradients can flow to parameters and to a
//! universal input perturbation. A unit test pins the two paths to bitwise
//! agreement.

use crate::autodiff::{backward, cross_entropy_mean, Tape, Var};
use crate::poison::Dataset;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Layer widths `[d, h1, ..., C]` plus the hidden activation.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> MlpSpec {
        assert!(
            layer_dims.len() >= 3,
            "need at least one hidden layer: [d, h.., C]"
        );
        assert!(
            *layer_dims.last().unwrap() >= 2,
            "class count must be >= 2"
        );
        assert!(layer_dims.iter().all(|&d| d >= 1));
        MlpSpec {
            layer_dims,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Reconstruct a spec from checkpointed parameters; the activation is not
    /// stored in checkpoints so it must be supplied.
    pub fn from_params(params: &Params, activation: Activation) -> MlpSpec {
        let mut dims = Vec::new();
        for (i, (name, t)) in params.entries.iter().enumerate() {
            if i % 2 == 0 {
                assert!(name.starts_with('w'), "unexpected tensor order");
                dims.push(t.shape()[0]);
            }
        }
        let last_w = &params.entries[params.entries.len() - 2].1;
        dims.push(last_w.shape()[1]);
        MlpSpec::new(dims, activation)
    }
}

/// Ordered named weight and bias tensors: `w0, b0, w1, b1, ...` where `wk`
/// has shape `[in, out]` and `bk` shape `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn total_len(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    /// Concatenate all entries into one flat vector (fixed entry order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild a same-shaped collection from a flat vector.
    pub fn unflatten_like(&self, flat: &[f64]) -> Params {
        assert_eq!(flat.len(), self.total_len(), "flat length mismatch");
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for (name, t) in &self.entries {
            let n = t.len();
            entries.push((
                name.clone(),
                Tensor::from_vec(t.shape(), flat[offset..offset + n].to_vec()),
            ));
            offset += n;
        }
        Params { entries }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.is_finite())
    }
}

/// He-style init: weights ~ N(0, sqrt(2 / fan_in)), biases zero.
pub fn init_params(spec: &MlpSpec, rng: &mut SeededRng) -> Params {
    let mut entries = Vec::new();
    for k in 0..spec.layer_count() {
        let (fan_in, fan_out) = (spec.layer_dims[k], spec.layer_dims[k + 1]);
        let std = (2.0 / fan_in as f64).sqrt();
        entries.push((
            format!("w{k}"),
            Tensor::randn(&[fan_in, fan_out], rng, 0.0, std),
        ));
        entries.push((format!("b{k}"), Tensor::zeros(&[fan_out])));
    }
    Params { entries }
}

fn activate_tensor(spec: &MlpSpec, t: &Tensor) -> Tensor {
    match spec.activation {
        Activation::Relu => t.map(|x| x.max(0.0)),
        Activation::Sigmoid => t.map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }),
    }
}

/// Deterministic logits for a batch `x` (n x d).
pub fn forward(spec: &MlpSpec, params: &Params, x: &Tensor) -> Tensor {
    assert_eq!(
        x.ncols(),
        spec.input_dim(),
        "input width {} != model input dim {}",
        x.ncols(),
        spec.input_dim()
    );
    let mut h = x.clone();
    for k in 0..spec.layer_count() {
        let w = &params.entries[2 * k].1;
        let b = &params.entries[2 * k + 1].1;
        let z = h.matmul(w);
        let cols = z.ncols();
        let mut zd = z.data().to_vec();
        for (idx, v) in zd.iter_mut().enumerate() {
            *v += b.data()[idx % cols];
        }
        h = Tensor::from_vec(z.shape(), zd);
        if k + 1 < spec.layer_count() {
            h = activate_tensor(spec, &h);
        }
    }
    h
}

/// Predicted labels: row-wise argmax of the logits, lowest index on ties.
pub fn predict(spec: &MlpSpec, params: &Params, x: &Tensor) -> Vec<usize> {
    forward(spec, params, x).argmax_rows()
}

/// Handles into a recorded loss graph.
pub struct LossGraph<'t> {
    pub loss: Var<'t>,
    pub param_vars: Vec<Var<'t>>,
    /// The universal-perturbation leaf; present only for perturbed graphs.
    pub delta_var: Option<Var<'t>>,
}

fn activate_var<'t>(spec: &MlpSpec, v: Var<'t>) -> Var<'t> {
    match spec.activation {
        Activation::Relu => v.relu(),
        Activation::Sigmoid => v.sigmoid(),
    }
}

/// Record mean cross-entropy of `f_theta(x + delta)` on `tape`, with `delta`
/// a rank-1 perturbation broadcast over all rows. When `clamp` is set the
/// perturbed batch is clipped to the valid [0, 1] range before the net.
pub fn build_perturbed_loss<'t>(
    tape: &'t Tape,
    spec: &MlpSpec,
    params: &Params,
    x: &Tensor,
    y: &[usize],
    delta: &Tensor,
    clamp: bool,
) -> LossGraph<'t> {
    assert_eq!(delta.len(), spec.input_dim(), "delta length != input dim");
    let x_var = tape.leaf(x.clone(), false);
    let delta_var = tape.leaf(delta.clone(), true);
    let mut h = x_var.add_row(delta_var);
    if clamp {
        h = h.clamp01();
    }
    let mut param_vars = Vec::with_capacity(params.entries.len());
    for (_, t) in &params.entries {
        param_vars.push(tape.leaf(t.clone(), true));
    }
    for k in 0..spec.layer_count() {
        h = h.matmul(param_vars[2 * k]).add_row(param_vars[2 * k + 1]);
        if k + 1 < spec.layer_count() {
            h = activate_var(spec, h);
        }
    }
    let loss = cross_entropy_mean(h, y);
    LossGraph {
        loss,
        param_vars,
        delta_var: Some(delta_var),
    }
}

/// Record the plain training loss (no perturbation, no clamp).
pub fn build_loss<'t>(
    tape: &'t Tape,
    spec: &MlpSpec,
    params: &Params,
    x: &Tensor,
    y: &[usize],
) -> LossGraph<'t> {
    let zero = Tensor::zeros(&[spec.input_dim()]);
    let mut graph = build_perturbed_loss(tape, spec, params, x, y, &zero, false);
    graph.delta_var = None;
    graph
}

/// Gradient of the batch loss with respect to every parameter tensor,
/// returned in `Params` layout. Also yields the loss value.
pub fn loss_and_param_grads(
    spec: &MlpSpec,
    params: &Params,
    x: &Tensor,
    y: &[usize],
) -> (f64, Params) {
    let tape = Tape::new();
    let graph = build_loss(&tape, spec, params, x, y);
    let loss = graph.loss.value().scalar();
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
    (loss, Params { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// SGD or Adam (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) over a `Params`
/// collection. State tensors follow the entry order of the parameters.
#[derive(Debug)]
pub struct Optimizer {
    kind: OptimKind,
    lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, params: &Params) -> Optimizer {
        assert!(lr > 0.0, "learning rate must be positive");
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Optimizer {
            kind,
            lr,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        assert_eq!(params.entries.len(), grads.entries.len());
        match self.kind {
            OptimKind::Sgd => {
                for ((_, p), (_, g)) in params.entries.iter_mut().zip(&grads.entries) {
                    *p = p.sub(&g.scale(self.lr));
                }
            }
            OptimKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (k, ((_, p), (_, g))) in
                    params.entries.iter_mut().zip(&grads.entries).enumerate()
                {
                    self.m[k] = self.m[k]
                        .scale(ADAM_BETA1)
                        .add(&g.scale(1.0 - ADAM_BETA1));
                    self.v[k] = self.v[k]
                        .scale(ADAM_BETA2)
                        .add(&g.hadamard(g).scale(1.0 - ADAM_BETA2));
                    let update = Tensor::from_vec(
                        p.shape(),
                        self.m[k]
                            .data()
                            .iter()
                            .zip(self.v[k].data())
                            .map(|(&m, &v)| {
                                let mh = m / bc1;
                                let vh = v / bc2;
                                self.lr * mh / (vh.sqrt() + ADAM_EPS)
                            })
                            .collect(),
                    );
                    *p = p.sub(&update);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs: 50,
            batch_size: 32,
            optimizer: OptimKind::Adam,
            seed: 17,
        }
    }
}

/// Standard mini-batch training. A fresh permutation is drawn per epoch from
/// the seeded generator, so identical configs produce bitwise-identical
/// parameters. Returns the trained parameters and the mean loss per epoch.
pub fn train(dataset: &Dataset, spec: &MlpSpec, cfg: &TrainConfig) -> (Params, Vec<f64>) {
    assert!(!dataset.is_empty(), "dataset must be nonempty");
    assert!(cfg.lr > 0.0, "lr must be > 0");
    assert!(cfg.batch_size >= 1, "batch size must be >= 1");
    let mut rng = SeededRng::new(cfg.seed);
    let mut params = init_params(spec, &mut rng);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &params);
    let mut history = Vec::with_capacity(cfg.epochs);

    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (bx, by) = dataset.gather(chunk);
            let (loss, grads) = loss_and_param_grads(spec, &params, &bx, &by);
            opt.step(&mut params, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    (params, history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rel_error;
    use crate::poison::make_synthetic_blobs;

    fn tiny_spec() -> MlpSpec {
        MlpSpec::new(vec![4, 6, 3], Activation::Relu)
    }

    #[test]
    fn init_biases_zero_and_seed_deterministic() {
        let spec = tiny_spec();
        let p1 = init_params(&spec, &mut SeededRng::new(5));
        let p2 = init_params(&spec, &mut SeededRng::new(5));
        assert_eq!(p1, p2);
        for (name, t) in &p1.entries {
            if name.starts_with('b') {
                assert!(t.data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn init_weight_stddev_near_he() {
        let spec = MlpSpec::new(vec![100, 120, 2], Activation::Relu);
        let p = init_params(&spec, &mut SeededRng::new(8));
        let w = &p.entries[0].1; // 100 x 120 = 12000 samples
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let expected = (2.0f64 / 100.0).sqrt();
        assert!(
            (std - expected).abs() / expected < 0.10,
            "std {std} vs {expected}"
        );
    }

    #[test]
    fn forward_zero_params_gives_zero_logits() {
        let spec = tiny_spec();
        let mut p = init_params(&spec, &mut SeededRng::new(1));
        for (_, t) in p.entries.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let x = Tensor::randn(&[3, 4], &mut SeededRng::new(2), 0.5, 0.2);
        let logits = forward(&spec, &p, &x);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        // Zero logits tie-break to label 0.
        assert_eq!(predict(&spec, &p, &x), vec![0, 0, 0]);
    }

    #[test]
    fn forward_identical_rows_identical_logits() {
        let spec = tiny_spec();
        let p = init_params(&spec, &mut SeededRng::new(3));
        let row = vec![0.1, 0.9, 0.4, 0.2];
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let x = Tensor::from_vec(&[2, 4], data);
        let logits = forward(&spec, &p, &x);
        assert_eq!(logits.row(0), logits.row(1));
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        // 1 hidden layer, relu, hand-sized numbers.
        let spec = MlpSpec::new(vec![2, 2, 2], Activation::Relu);
        let params = Params {
            entries: vec![
                (
                    "w0".into(),
                    Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 2.0, 0.5]),
                ),
                ("b0".into(), Tensor::from_vec(&[2], vec![0.5, -0.25])),
                (
                    "w1".into(),
                    Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -1.0, 1.0]),
                ),
                ("b1".into(), Tensor::from_vec(&[2], vec![0.0, 1.0])),
            ],
        };
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
        // z1 = [1*1+2*2+0.5, 1*(-1)+2*0.5-0.25] = [5.5, -0.25]; relu -> [5.5, 0]
        // logits = [5.5*1+0*(-1), 5.5*0+0*1] + [0, 1] = [5.5, 1.0]
        let logits = forward(&spec, &params, &x);
        assert_eq!(logits.data(), &[5.5, 1.0]);
    }

    #[test]
    fn graph_forward_matches_plain_forward_bitwise() {
        let spec = tiny_spec();
        let p = init_params(&spec, &mut SeededRng::new(4));
        let x = Tensor::randn(&[5, 4], &mut SeededRng::new(6), 0.4, 0.2).clamp01();
        let y = vec![0usize, 1, 2, 0, 1];
        let plain = forward(&spec, &p, &x);

        let tape = Tape::new();
        let delta = Tensor::zeros(&[4]);
        // Rebuild logits through the tape path: same ops, no clamp.
        let x_var = tape.leaf(x.clone(), false);
        let d_var = tape.leaf(delta, false);
        let mut h = x_var.add_row(d_var);
        let mut pv = Vec::new();
        for (_, t) in &p.entries {
            pv.push(tape.leaf(t.clone(), false));
        }
        for k in 0..spec.layer_count() {
            h = h.matmul(pv[2 * k]).add_row(pv[2 * k + 1]);
            if k + 1 < spec.layer_count() {
                h = h.relu();
            }
        }
        assert_eq!(h.value(), plain);
        // And the fused loss graph evaluates finitely.
        let tape2 = Tape::new();
        let graph = build_loss(&tape2, &spec, &p, &x, &y);
        assert!(graph.loss.value().scalar().is_finite());
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let spec = MlpSpec::new(vec![3, 5, 4, 2], Activation::Relu);
        let params = init_params(&spec, &mut SeededRng::new(7));
        let x = Tensor::randn(&[4, 3], &mut SeededRng::new(9), 0.5, 0.25);
        let y = vec![0usize, 1, 1, 0];
        let (_, grads) = loss_and_param_grads(&spec, &params, &x, &y);

        let eval = |p: &Params| {
            let tape = Tape::new();
            build_loss(&tape, &spec, p, &x, &y).loss.value().scalar()
        };
        let flat = params.flatten();
        let gflat = grads.flatten();
        let mut max_err = 0.0f64;
        for i in 0..flat.len() {
            let h = 1e-6 * (1.0 + flat[i].abs());
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (eval(&params.unflatten_like(&plus)) - eval(&params.unflatten_like(&minus)))
                / (2.0 * h);
            max_err = max_err.max(rel_error(gflat[i], fd));
        }
        assert!(max_err <= 1e-5, "max rel err {max_err}");
    }

    #[test]
    fn train_zero_epochs_returns_init() {
        let ds = make_synthetic_blobs(3, 4, 20, 0.05, &mut SeededRng::new(10));
        let spec = tiny_spec();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (params, history) = train(&ds, &spec, &cfg);
        assert!(history.is_empty());
        let init = init_params(&spec, &mut SeededRng::new(cfg.seed));
        assert_eq!(params, init);
    }

    #[test]
    fn train_separable_blobs_to_high_accuracy() {
        let ds = make_synthetic_blobs(2, 6, 40, 0.03, &mut SeededRng::new(12));
        let spec = MlpSpec::new(vec![6, 16, 8, 2], Activation::Relu);
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let (params, history) = train(&ds, &spec, &cfg);
        assert!(history.iter().all(|l| l.is_finite()));
        assert!(history.last().unwrap() < history.first().unwrap());
        let preds = predict(&spec, &params, &ds.x);
        let correct = preds
            .iter()
            .zip(&ds.y)
            .filter(|(p, y)| p == y)
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn train_bitwise_deterministic() {
        let ds = make_synthetic_blobs(3, 4, 15, 0.05, &mut SeededRng::new(14));
        let spec = tiny_spec();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&ds, &spec, &cfg);
        let (p2, h2) = train(&ds, &spec, &cfg);
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn predict_agrees_with_argmax_oracle() {
        let mut rng = SeededRng::new(15);
        let logits = Tensor::randn(&[20, 5], &mut rng, 0.0, 1.0);
        let preds = logits.argmax_rows();
        for (i, &p) in preds.iter().enumerate() {
            for j in 0..5 {
                assert!(logits.get2(i, j) <= logits.get2(i, p) || j == p);
            }
        }
    }
}
