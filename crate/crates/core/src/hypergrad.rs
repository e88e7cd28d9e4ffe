//! Implicit hypergradient assembly.
//!
//! The outer objective is `psi(theta) = H(delta(theta), theta)` where
//! `delta(theta)` approximately maximizes the inner problem. Its gradient
//! splits into a direct term and an indirect term routed through the response
//! Jacobian, which the implicit function theorem expresses with the inverse
//! inner Hessian:
//!
//! ```text
//! grad psi = grad_2 H + (grad delta)^T grad_1 H
//!          = grad_2 H - (grad_21 H) (grad_1^2 H)^{-1} grad_1 H
//! ```
//!
//! The linear system is posed as `M v = grad_1 H` with `M = -grad_1^2 H`,
//! which is positive definite near an inner maximum so conjugate gradients
//! apply; the sign flip is absorbed so the indirect term becomes
//! `+(grad_21 H) v`. Hessian-vector and mixed products are central finite
//! differences of first-order gradients; no second-order tape exists
//! anywhere. A quadratic bilevel fixture with closed-form answers verifies
//! the whole assembly.

use crate::error::{Error, Result};
use crate::model::{build_perturbed_loss, MlpSpec, Params};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    FixedPoint,
    ConjugateGradient,
}

/// How Hessian-vector products are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvpMode {
    /// Central differences of first-order gradients.
    FiniteDiff,
    /// Exact products supplied by the problem (oracle fixtures only).
    Analytic,
}

/// Settings for the truncated linear solve.
#[derive(Debug, Clone)]
pub struct LinSolveConfig {
    pub method: SolveMethod,
    /// Iteration budget (the paper-style round count, often written theta
    /// with a hook; 5 by default).
    pub rounds: usize,
    /// Step size of the fixed-point iteration.
    pub fp_step: f64,
    /// Early-exit residual tolerance.
    pub tol: f64,
    /// Zero the indirect term instead of failing when the solve diverges.
    pub fallback_on_divergence: bool,
}

impl Default for LinSolveConfig {
    fn default() -> Self {
        LinSolveConfig {
            method: SolveMethod::ConjugateGradient,
            rounds: 5,
            fp_step: 0.1,
            tol: 1e-12,
            fallback_on_divergence: true,
        }
    }
}

/// A bilevel objective pinned at a specific theta: gradients of H with
/// respect to the perturbation and the (flattened) parameters, plus optional
/// exact second-order products for oracle problems.
pub trait BilevelPoint {
    fn delta_dim(&self) -> usize;
    fn theta_dim(&self) -> usize;
    /// grad_1 H(delta, theta).
    fn grad_delta(&self, delta: &Tensor) -> Tensor;
    /// grad_2 H(delta, theta), flattened.
    fn grad_theta(&self, delta: &Tensor) -> Vec<f64>;

    fn hvp_delta_analytic(&self, _delta: &Tensor, _v: &Tensor) -> Option<Tensor> {
        None
    }
    fn cross_vp_analytic(&self, _delta: &Tensor, _v: &Tensor) -> Option<Vec<f64>> {
        None
    }
}

/// Finite-difference step for direction probes: `1e-4 * (1 + |delta|_inf)`
/// applied to a unit-normalized direction.
fn fd_step(delta: &Tensor) -> f64 {
    1e-4 * (1.0 + delta.max_abs())
}

/// Inner Hessian-vector product `grad_1^2 H(delta, theta) . v`.
///
/// `v = 0` returns zeros without touching the objective.
pub fn hvp_delta(point: &dyn BilevelPoint, delta: &Tensor, v: &Tensor, mode: HvpMode) -> Tensor {
    assert_eq!(v.len(), point.delta_dim(), "v length != delta dim");
    let norm = v.l2_norm();
    if norm == 0.0 {
        return Tensor::zeros(v.shape());
    }
    if mode == HvpMode::Analytic {
        return point
            .hvp_delta_analytic(delta, v)
            .expect("analytic HVP requested but not provided by this problem");
    }
    let eps = fd_step(delta);
    let unit = v.scale(1.0 / norm);
    let plus = point.grad_delta(&delta.add(&unit.scale(eps)));
    let minus = point.grad_delta(&delta.sub(&unit.scale(eps)));
    plus.sub(&minus).scale(norm / (2.0 * eps))
}

/// Mixed product `grad_21 H(delta, theta) . v`: the derivative of grad_2 H
/// along the delta-direction `v`, which is the transpose application needed
/// by the indirect term.
pub fn cross_vp(
    point: &dyn BilevelPoint,
    delta: &Tensor,
    v: &Tensor,
    mode: HvpMode,
) -> Vec<f64> {
    assert_eq!(v.len(), point.delta_dim(), "v length != delta dim");
    let norm = v.l2_norm();
    if norm == 0.0 {
        return vec![0.0; point.theta_dim()];
    }
    if mode == HvpMode::Analytic {
        return point
            .cross_vp_analytic(delta, v)
            .expect("analytic cross product requested but not provided");
    }
    let eps = fd_step(delta);
    let unit = v.scale(1.0 / norm);
    let plus = point.grad_theta(&delta.add(&unit.scale(eps)));
    let minus = point.grad_theta(&delta.sub(&unit.scale(eps)));
    let scale = norm / (2.0 * eps);
    plus.iter()
        .zip(&minus)
        .map(|(&p, &m)| (p - m) * scale)
        .collect()
}

#[derive(Debug, Clone)]
pub struct LinSolveOutcome {
    pub v: Tensor,
    /// Explicitly recomputed `||M v - rhs||` with the same operator.
    pub residual_norm: f64,
    pub rounds_used: usize,
    /// Residual grew past 10x its initial value (or went non-finite).
    pub diverged: bool,
}

/// Approximately solve `M v = rhs` for a positive definite operator `M`
/// supplied as a closure. Conjugate gradients truncate at `cfg.rounds`;
/// the fixed-point method iterates `v <- v - fp_step (M v - rhs)`. Both start
/// from zero. On non-positive curvature CG stops at the current iterate.
/// Divergence is reported, never thrown.
pub fn solve_linear(
    op: &dyn Fn(&Tensor) -> Tensor,
    rhs: &Tensor,
    cfg: &LinSolveConfig,
) -> LinSolveOutcome {
    assert!(cfg.rounds >= 1, "solver rounds must be >= 1");
    let dim = rhs.len();
    let mut v = Tensor::zeros(&[dim]);
    let res0 = rhs.l2_norm();
    if res0 == 0.0 {
        return LinSolveOutcome {
            v,
            residual_norm: 0.0,
            rounds_used: 0,
            diverged: false,
        };
    }
    let mut diverged = false;
    let mut rounds_used = 0;

    match cfg.method {
        SolveMethod::ConjugateGradient => {
            let mut r = rhs.clone();
            let mut p = r.clone();
            let mut rs = r.dot(&r);
            for _ in 0..cfg.rounds {
                if rs.sqrt() <= cfg.tol {
                    break;
                }
                let mp = op(&p);
                let pmp = p.dot(&mp);
                if !pmp.is_finite() {
                    diverged = true;
                    break;
                }
                if pmp <= 0.0 {
                    // Non-positive curvature: M is not PD along p.
                    break;
                }
                let alpha = rs / pmp;
                v = v.add(&p.scale(alpha));
                r = r.sub(&mp.scale(alpha));
                rounds_used += 1;
                let rs_new = r.dot(&r);
                if !rs_new.is_finite() || rs_new.sqrt() > 10.0 * res0 {
                    diverged = true;
                    break;
                }
                let beta = rs_new / rs;
                p = r.add(&p.scale(beta));
                rs = rs_new;
            }
        }
        SolveMethod::FixedPoint => {
            assert!(cfg.fp_step > 0.0, "fixed-point step must be positive");
            for _ in 0..cfg.rounds {
                let r = op(&v).sub(rhs);
                let rn = r.l2_norm();
                if !rn.is_finite() || rn > 10.0 * res0 {
                    diverged = true;
                    break;
                }
                if rn <= cfg.tol {
                    break;
                }
                v = v.sub(&r.scale(cfg.fp_step));
                rounds_used += 1;
            }
        }
    }

    let residual = op(&v).sub(rhs);
    let residual_norm = residual.l2_norm();
    if !residual_norm.is_finite() || residual_norm > 10.0 * res0 {
        diverged = true;
    }
    LinSolveOutcome {
        v,
        residual_norm,
        rounds_used,
        diverged,
    }
}

/// Flat-vector hypergradient with solver diagnostics.
#[derive(Debug, Clone)]
pub struct HypergradVec {
    pub hypergrad: Vec<f64>,
    pub direct_norm: f64,
    pub indirect_norm: f64,
    pub linear_residual_norm: f64,
    pub solver_rounds_used: usize,
    pub fallback_used: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn ensure_finite_slice(stage: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(stage, "non-finite values"))
    }
}

/// Assemble the implicit hypergradient at a (possibly suboptimal) delta:
/// direct term `grad_2 H`, then solve `M v = grad_1 H` with `M = -grad_1^2 H`
/// and add the indirect term `(grad_21 H) v`. A diverged solve with fallback
/// enabled zeroes the indirect term and flags it.
pub fn implicit_hypergrad_at(
    point: &dyn BilevelPoint,
    delta: &Tensor,
    cfg: &LinSolveConfig,
    mode: HvpMode,
) -> Result<HypergradVec> {
    let rhs = point.grad_delta(delta);
    if !rhs.is_finite() {
        return Err(Error::numeric("inner gradient (rhs)", "non-finite values"));
    }
    let direct = point.grad_theta(delta);
    ensure_finite_slice("direct gradient", &direct)?;

    let op = |v: &Tensor| hvp_delta(point, delta, v, mode).scale(-1.0);
    let outcome = solve_linear(&op, &rhs, cfg);

    let (indirect, fallback_used) = if outcome.diverged && cfg.fallback_on_divergence {
        (vec![0.0; point.theta_dim()], true)
    } else {
        if !outcome.v.is_finite() {
            return Err(Error::numeric("linear solve", "non-finite solution"));
        }
        let cross = cross_vp(point, delta, &outcome.v, mode);
        ensure_finite_slice("cross product", &cross)?;
        (cross, false)
    };

    let hypergrad: Vec<f64> = direct
        .iter()
        .zip(&indirect)
        .map(|(&d, &i)| d + i)
        .collect();
    ensure_finite_slice("hypergradient assembly", &hypergrad)?;
    Ok(HypergradVec {
        direct_norm: norm(&direct),
        indirect_norm: norm(&indirect),
        linear_residual_norm: outcome.residual_norm,
        solver_rounds_used: outcome.rounds_used,
        fallback_used,
        hypergrad,
    })
}

/// Hypergradient in `Params` layout, for the network objective.
#[derive(Debug, Clone)]
pub struct HypergradReport {
    pub hypergrad: Params,
    pub direct_norm: f64,
    pub indirect_norm: f64,
    pub linear_residual_norm: f64,
    pub solver_rounds_used: usize,
    pub fallback_used: bool,
}

/// The network bilevel objective at fixed parameters: H is the mean
/// cross-entropy of `f_theta(x + delta)` over the batch.
pub struct MlpBilevelPoint<'a> {
    pub spec: &'a MlpSpec,
    pub params: &'a Params,
    pub x: &'a Tensor,
    pub y: &'a [usize],
    pub clamp: bool,
}

impl BilevelPoint for MlpBilevelPoint<'_> {
    fn delta_dim(&self) -> usize {
        self.spec.input_dim()
    }

    fn theta_dim(&self) -> usize {
        self.params.total_len()
    }

    fn grad_delta(&self, delta: &Tensor) -> Tensor {
        let tape = crate::autodiff::Tape::new();
        let graph = build_perturbed_loss(
            &tape, self.spec, self.params, self.x, self.y, delta, self.clamp,
        );
        let dv = graph.delta_var.expect("delta leaf");
        let grads = crate::autodiff::backward(graph.loss, &[dv]);
        grads
            .get(&dv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(delta.shape()))
    }

    fn grad_theta(&self, delta: &Tensor) -> Vec<f64> {
        let tape = crate::autodiff::Tape::new();
        let graph = build_perturbed_loss(
            &tape, self.spec, self.params, self.x, self.y, delta, self.clamp,
        );
        let grads = crate::autodiff::backward(graph.loss, &graph.param_vars);
        let mut flat = Vec::with_capacity(self.theta_dim());
        for ((_, t), var) in self.params.entries.iter().zip(&graph.param_vars) {
            match grads.get(var) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        flat
    }
}

/// Implicit hypergradient of the network objective at `delta`, reported in
/// parameter layout. Second-order products are finite differences here;
/// there is nothing analytic about a real network.
pub fn implicit_hypergrad(
    spec: &MlpSpec,
    params: &Params,
    delta: &Tensor,
    x: &Tensor,
    y: &[usize],
    clamp: bool,
    cfg: &LinSolveConfig,
) -> Result<HypergradReport> {
    assert!(!y.is_empty(), "batch must be nonempty");
    let point = MlpBilevelPoint {
        spec,
        params,
        x,
        y,
        clamp,
    };
    let flat = implicit_hypergrad_at(&point, delta, cfg, HvpMode::FiniteDiff)?;
    Ok(HypergradReport {
        hypergrad: params.unflatten_like(&flat.hypergrad),
        direct_norm: flat.direct_norm,
        indirect_norm: flat.indirect_norm,
        linear_residual_norm: flat.linear_residual_norm,
        solver_rounds_used: flat.solver_rounds_used,
        fallback_used: flat.fallback_used,
    })
}

/// Optimal inner step size and contraction factor for a mu-strongly concave,
/// L-smooth inner problem: `alpha = 2 / (L + mu)`,
/// `q = max(1 - alpha mu, alpha L - 1) = (kappa - 1) / (kappa + 1)`.
pub fn contraction_rate(mu: f64, l: f64) -> (f64, f64) {
    assert!(mu > 0.0, "mu must be positive, got {mu}");
    assert!(l >= mu, "L must be >= mu, got L = {l}, mu = {mu}");
    let alpha = 2.0 / (l + mu);
    let q = (1.0 - alpha * mu).max(alpha * l - 1.0);
    (alpha, q)
}

// ---------------------------------------------------------------------------
// Quadratic bilevel oracle
// ---------------------------------------------------------------------------

/// Test fixture with closed-form answers:
/// `H(delta, theta) = -1/2 delta^T A delta + delta^T (B theta + c) + g(theta)`
/// with the fixed smooth term `g(theta) = g_coeff / 2 * ||theta||^2` and `A`
/// symmetric positive definite (spectrum known by construction). The inner
/// maximizer is `delta*(theta) = A^{-1} (B theta + c)` and the hypergradient
/// is `g_coeff * theta + B^T A^{-1} (B theta + c)` — exactly, at any
/// suboptimal delta, which makes this a sharp regression guard for sign and
/// assembly errors.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub mu: f64,
    pub l: f64,
    /// Coefficient of the quadratic direct term g; zero makes the outer
    /// gradient purely indirect.
    pub g_coeff: f64,
}

impl QuadraticBilevel {
    pub fn from_parts(
        a: Tensor,
        b: Tensor,
        c: Tensor,
        mu: f64,
        l: f64,
        g_coeff: f64,
    ) -> QuadraticBilevel {
        let d = c.len();
        assert_eq!(a.shape(), &[d, d]);
        assert_eq!(b.shape()[0], d);
        assert!(mu > 0.0 && l >= mu);
        QuadraticBilevel {
            a,
            b,
            c,
            mu,
            l,
            g_coeff,
        }
    }

    /// The minimal coupled instance `H = -1/2 ||delta||^2 + delta^T theta`
    /// (A = I, B = I, c = 0, g = 0), whose hypergradient is exactly theta at
    /// every delta.
    pub fn linear_coupling(d: usize) -> QuadraticBilevel {
        Self::from_parts(
            Tensor::eye(d),
            Tensor::eye(d),
            Tensor::zeros(&[d]),
            1.0,
            1.0,
            0.0,
        )
    }

    /// Random instance with spectrum spanning exactly [mu, l]: A = Q diag(lambda) Q^T
    /// for a random orthogonal Q.
    pub fn random(d: usize, p: usize, mu: f64, l: f64, rng: &mut SeededRng) -> QuadraticBilevel {
        assert!(d >= 2, "need d >= 2 to pin both ends of the spectrum");
        let q = random_orthogonal(d, rng);
        let mut lambdas = vec![0.0; d];
        lambdas[0] = mu;
        lambdas[d - 1] = l;
        for item in lambdas.iter_mut().take(d - 1).skip(1) {
            *item = mu + (l - mu) * rng.next_f64();
        }
        // A = Q diag Q^T, symmetrized against roundoff.
        let mut scaled = q.clone();
        let mut data = scaled.data().to_vec();
        for i in 0..d {
            for j in 0..d {
                data[i * d + j] = q.get2(i, j) * lambdas[j];
            }
        }
        scaled = Tensor::from_vec(&[d, d], data);
        let a_raw = scaled.matmul(&q.transpose());
        let a = a_raw.add(&a_raw.transpose()).scale(0.5);

        let b = Tensor::randn(&[d, p], rng, 0.0, 1.0);
        let c = Tensor::randn(&[d], rng, 0.0, 1.0);
        QuadraticBilevel {
            a,
            b,
            c,
            mu,
            l,
            g_coeff: 1.0,
        }
    }

    /// Decoupled instance (B = 0): the indirect term vanishes identically.
    pub fn coupling_free(d: usize, p: usize, mu: f64, l: f64, rng: &mut SeededRng) -> Self {
        let mut prob = Self::random(d, p, mu, l, rng);
        prob.b = Tensor::zeros(&[d, p]);
        prob
    }

    pub fn delta_dim(&self) -> usize {
        self.c.len()
    }

    pub fn theta_dim(&self) -> usize {
        self.b.shape()[1]
    }

    fn b_theta_plus_c(&self, theta: &[f64]) -> Tensor {
        let tcol = Tensor::from_vec(&[theta.len(), 1], theta.to_vec());
        let bt = self.b.matmul(&tcol);
        Tensor::from_vec(&[self.delta_dim()], bt.data().to_vec()).add(&self.c)
    }

    pub fn at<'a>(&'a self, theta: &[f64]) -> QuadraticPoint<'a> {
        assert_eq!(theta.len(), self.theta_dim());
        QuadraticPoint {
            prob: self,
            theta: theta.to_vec(),
            btc: self.b_theta_plus_c(theta),
        }
    }

    /// Exact inner maximizer `A^{-1} (B theta + c)` via dense LU.
    pub fn inner_optimum(&self, theta: &[f64]) -> Tensor {
        let rhs = self.b_theta_plus_c(theta);
        Tensor::from_vec(&[self.delta_dim()], lu_solve(&self.a, rhs.data()))
    }

    /// Dense closed form `g_coeff theta + B^T A^{-1} (B theta + c)`; the
    /// independent reference every iterative path is checked against.
    pub fn closed_form_hypergrad(&self, theta: &[f64]) -> Vec<f64> {
        let solved = self.inner_optimum(theta);
        let scol = Tensor::from_vec(&[self.delta_dim(), 1], solved.data().to_vec());
        let bt = self.b.transpose().matmul(&scol);
        theta
            .iter()
            .zip(bt.data())
            .map(|(&t, &v)| self.g_coeff * t + v)
            .collect()
    }

    /// Exact outer objective `psi*(theta) = 1/2 (B theta + c)^T A^{-1} (B theta + c) + g(theta)`.
    pub fn psi_star(&self, theta: &[f64]) -> f64 {
        let btc = self.b_theta_plus_c(theta);
        let solved = self.inner_optimum(theta);
        0.5 * btc.dot(&solved) + 0.5 * self.g_coeff * theta.iter().map(|t| t * t).sum::<f64>()
    }
}

/// A [`QuadraticBilevel`] pinned at one theta.
pub struct QuadraticPoint<'a> {
    prob: &'a QuadraticBilevel,
    theta: Vec<f64>,
    btc: Tensor,
}

impl QuadraticPoint<'_> {
    fn a_times(&self, v: &Tensor) -> Tensor {
        let col = Tensor::from_vec(&[v.len(), 1], v.data().to_vec());
        let out = self.prob.a.matmul(&col);
        Tensor::from_vec(&[v.len()], out.data().to_vec())
    }

    /// H(delta, theta) at this point.
    pub fn value(&self, delta: &Tensor) -> f64 {
        let adelta = self.a_times(delta);
        -0.5 * delta.dot(&adelta)
            + delta.dot(&self.btc)
            + 0.5 * self.prob.g_coeff * self.theta.iter().map(|t| t * t).sum::<f64>()
    }
}

impl BilevelPoint for QuadraticPoint<'_> {
    fn delta_dim(&self) -> usize {
        self.prob.delta_dim()
    }

    fn theta_dim(&self) -> usize {
        self.prob.theta_dim()
    }

    fn grad_delta(&self, delta: &Tensor) -> Tensor {
        // -A delta + (B theta + c)
        self.btc.sub(&self.a_times(delta))
    }

    fn grad_theta(&self, delta: &Tensor) -> Vec<f64> {
        // B^T delta + g_coeff theta
        let col = Tensor::from_vec(&[delta.len(), 1], delta.data().to_vec());
        let bt = self.prob.b.transpose().matmul(&col);
        self.theta
            .iter()
            .zip(bt.data())
            .map(|(&t, &v)| self.prob.g_coeff * t + v)
            .collect()
    }

    fn hvp_delta_analytic(&self, _delta: &Tensor, v: &Tensor) -> Option<Tensor> {
        Some(self.a_times(v).scale(-1.0))
    }

    fn cross_vp_analytic(&self, _delta: &Tensor, v: &Tensor) -> Option<Vec<f64>> {
        let col = Tensor::from_vec(&[v.len(), 1], v.data().to_vec());
        Some(self.prob.b.transpose().matmul(&col).data().to_vec())
    }
}

impl crate::inner_max::AscentObjective for QuadraticPoint<'_> {
    fn dim(&self) -> usize {
        self.delta_dim()
    }
    fn value_and_grad(&self, delta: &Tensor) -> (f64, Tensor) {
        (self.value(delta), self.grad_delta(delta))
    }
}

/// Empirical error-decay check: run `t` inner ascent steps at the optimal
/// step size, assemble the hypergradient with the truncated solver, and
/// report `||approx - closed form||` for each `t`. The error should shrink
/// as the inner solution improves.
pub fn theorem1_error_curve(
    prob: &QuadraticBilevel,
    theta: &[f64],
    t_values: &[usize],
    cfg: &LinSolveConfig,
    mode: HvpMode,
) -> Result<Vec<(usize, f64)>> {
    let point = prob.at(theta);
    let (alpha, _) = contraction_rate(prob.mu, prob.l);
    let exact = prob.closed_form_hypergrad(theta);
    let bound = prob.inner_optimum(theta).l2_norm().max(0.5) * 2.0;

    let mut curve = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let mut delta = Tensor::zeros(&[prob.delta_dim()]);
        for _ in 0..t {
            let step = point.grad_delta(&delta).scale(alpha);
            delta = crate::inner_max::project_l2(&delta.add(&step), bound);
        }
        let approx = implicit_hypergrad_at(&point, &delta, cfg, mode)?;
        let err = approx
            .hypergrad
            .iter()
            .zip(&exact)
            .map(|(a, e)| (a - e) * (a - e))
            .sum::<f64>()
            .sqrt();
        curve.push((t, err));
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Dense helpers for the oracle (kept independent of the iterative solvers)
// ---------------------------------------------------------------------------

/// Solve `A x = b` by LU with partial pivoting. Panics on singular input;
/// only ever used on small well-conditioned oracle matrices.
pub fn lu_solve(a: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "lu_solve needs a square matrix");
    assert_eq!(b.len(), n);
    let mut m = a.data().to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[row * n + col].abs() > m[pivot * n + col].abs() {
                pivot = row;
            }
        }
        assert!(
            m[pivot * n + col].abs() > 1e-300,
            "lu_solve: singular matrix"
        );
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            x.swap(col, pivot);
        }
        let diag = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        x[col] /= m[col * n + col];
        for row in 0..col {
            x[row] -= m[row * n + col] * x[col];
        }
    }
    x
}

/// Random orthogonal matrix: modified Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut SeededRng) -> Tensor {
    let raw = Tensor::randn(&[d, d], rng, 0.0, 1.0);
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|i| raw.get2(i, j)).collect())
        .collect();
    for j in 0..d {
        for k in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            let prev = cols[k].clone();
            for (cj, pk) in cols[j].iter_mut().zip(&prev) {
                *cj -= dot * pk;
            }
        }
        let nrm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(nrm > 1e-12, "degenerate Gaussian draw");
        for v in &mut cols[j] {
            *v /= nrm;
        }
    }
    let mut data = vec![0.0; d * d];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * d + j] = v;
        }
    }
    Tensor::from_vec(&[d, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rel_error;

    fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let scale = norm(b).max(1e-12);
        diff / scale
    }

    #[test]
    fn contraction_rate_examples() {
        let (a, q) = contraction_rate(1.0, 3.0);
        assert_eq!(a, 0.5);
        assert_eq!(q, 0.5);

        let (_, q) = contraction_rate(2.0, 2.0);
        assert_eq!(q, 0.0);

        let (_, q) = contraction_rate(1.0, 9.0);
        assert!((q - 0.8).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "mu must be positive")]
    fn contraction_rate_rejects_nonpositive_mu() {
        contraction_rate(0.0, 1.0);
    }

    #[test]
    #[should_panic(expected = "L must be >= mu")]
    fn contraction_rate_rejects_l_below_mu() {
        contraction_rate(2.0, 1.0);
    }

    #[test]
    fn hvp_analytic_2i_example() {
        let prob = QuadraticBilevel::from_parts(
            Tensor::eye(2).scale(2.0),
            Tensor::zeros(&[2, 2]),
            Tensor::zeros(&[2]),
            2.0,
            2.0,
            1.0,
        );
        let theta = vec![0.0, 0.0];
        let point = prob.at(&theta);
        let v = Tensor::from_vec(&[2], vec![1.0, 0.0]);
        let hv = hvp_delta(&point, &Tensor::zeros(&[2]), &v, HvpMode::Analytic);
        assert_eq!(hv.data(), &[-2.0, 0.0]);

        let zero = hvp_delta(
            &point,
            &Tensor::zeros(&[2]),
            &Tensor::zeros(&[2]),
            HvpMode::FiniteDiff,
        );
        assert_eq!(zero.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hvp_fd_matches_analytic_on_oracle() {
        let mut rng = SeededRng::new(31);
        let prob = QuadraticBilevel::random(6, 4, 1.0, 4.0, &mut rng);
        let theta: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let point = prob.at(&theta);
        let delta = Tensor::randn(&[6], &mut rng, 0.0, 1.0);
        let v = Tensor::randn(&[6], &mut rng, 0.0, 1.0);
        let fd = hvp_delta(&point, &delta, &v, HvpMode::FiniteDiff);
        let exact = hvp_delta(&point, &delta, &v, HvpMode::Analytic);
        let err = fd.sub(&exact).l2_norm() / exact.l2_norm().max(1e-12);
        assert!(err <= 1e-6, "fd vs analytic rel err {err}");
    }

    #[test]
    fn hvp_linearity_and_symmetry() {
        let mut rng = SeededRng::new(33);
        let prob = QuadraticBilevel::random(5, 3, 1.0, 3.0, &mut rng);
        let theta: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
        let point = prob.at(&theta);
        let delta = Tensor::randn(&[5], &mut rng, 0.0, 0.5);
        let v1 = Tensor::randn(&[5], &mut rng, 0.0, 1.0);
        let v2 = Tensor::randn(&[5], &mut rng, 0.0, 1.0);
        let (a, b) = (1.7, -0.4);

        for mode in [HvpMode::FiniteDiff, HvpMode::Analytic] {
            let combo = hvp_delta(
                &point,
                &delta,
                &v1.scale(a).add(&v2.scale(b)),
                mode,
            );
            let parts = hvp_delta(&point, &delta, &v1, mode)
                .scale(a)
                .add(&hvp_delta(&point, &delta, &v2, mode).scale(b));
            let tol = if mode == HvpMode::Analytic { 1e-12 } else { 1e-5 };
            let err = combo.sub(&parts).l2_norm() / parts.l2_norm().max(1e-12);
            assert!(err <= tol, "{mode:?} linearity err {err}");

            // <u, Hv> == <v, Hu>
            let uhv = v1.dot(&hvp_delta(&point, &delta, &v2, mode));
            let vhu = v2.dot(&hvp_delta(&point, &delta, &v1, mode));
            assert!(rel_error(uhv, vhu) <= tol, "{mode:?} symmetry");
        }
    }

    #[test]
    fn cross_vp_separable_is_zero() {
        let mut rng = SeededRng::new(35);
        let prob = QuadraticBilevel::coupling_free(4, 3, 1.0, 2.0, &mut rng);
        let theta: Vec<f64> = vec![0.3, -0.7, 1.1];
        let point = prob.at(&theta);
        let delta = Tensor::randn(&[4], &mut rng, 0.0, 1.0);
        let v = Tensor::randn(&[4], &mut rng, 0.0, 1.0);
        let fd = cross_vp(&point, &delta, &v, HvpMode::FiniteDiff);
        assert!(fd.iter().all(|&x| x == 0.0), "decoupled cross product");
    }

    #[test]
    fn cross_vp_matches_bt_v() {
        let mut rng = SeededRng::new(37);
        let prob = QuadraticBilevel::random(5, 4, 1.0, 3.0, &mut rng);
        let theta: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let point = prob.at(&theta);
        let delta = Tensor::randn(&[5], &mut rng, 0.0, 1.0);
        let v = Tensor::randn(&[5], &mut rng, 0.0, 1.0);

        // Dense oracle: B^T v by direct matmul.
        let col = Tensor::from_vec(&[5, 1], v.data().to_vec());
        let expect = prob.b.transpose().matmul(&col);
        let analytic = cross_vp(&point, &delta, &v, HvpMode::Analytic);
        assert_eq!(analytic, expect.data());

        let fd = cross_vp(&point, &delta, &v, HvpMode::FiniteDiff);
        let err = vec_rel_err(&fd, &analytic);
        assert!(err <= 1e-6, "fd vs analytic cross err {err}");
    }

    #[test]
    fn solve_linear_identity_one_round() {
        let rhs = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let cfg = LinSolveConfig {
            rounds: 1,
            ..LinSolveConfig::default()
        };
        let out = solve_linear(&|v| v.clone(), &rhs, &cfg);
        assert_eq!(out.v, rhs);
        assert!(out.residual_norm <= 1e-15);
        assert!(!out.diverged);
    }

    #[test]
    fn solve_linear_zero_rhs() {
        let rhs = Tensor::zeros(&[4]);
        let out = solve_linear(&|v| v.clone(), &rhs, &LinSolveConfig::default());
        assert_eq!(out.v.data(), &[0.0; 4]);
        assert_eq!(out.rounds_used, 0);
    }

    #[test]
    fn cg_exact_in_d_rounds_vs_dense_oracle() {
        let mut rng = SeededRng::new(39);
        let prob = QuadraticBilevel::random(8, 2, 1.0, 5.0, &mut rng);
        let rhs = Tensor::randn(&[8], &mut rng, 0.0, 1.0);
        let theta = vec![0.0, 0.0];
        let point = prob.at(&theta);
        let cfg = LinSolveConfig {
            rounds: 8,
            tol: 0.0,
            ..LinSolveConfig::default()
        };
        // M = -grad_1^2 H = A.
        let op = |v: &Tensor| hvp_delta(&point, &Tensor::zeros(&[8]), v, HvpMode::Analytic).scale(-1.0);
        let out = solve_linear(&op, &rhs, &cfg);
        assert!(
            out.residual_norm <= 1e-10,
            "residual {}",
            out.residual_norm
        );
        let dense = lu_solve(&prob.a, rhs.data());
        let err = vec_rel_err(out.v.data(), &dense);
        assert!(err <= 1e-10, "cg vs dense err {err}");
    }

    #[test]
    fn fixed_point_converges_and_divergence_flagged() {
        // Well-conditioned M = I: fixed point with step 0.5 halves the
        // residual each round.
        let rhs = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let cfg = LinSolveConfig {
            method: SolveMethod::FixedPoint,
            rounds: 60,
            fp_step: 0.5,
            tol: 1e-12,
            fallback_on_divergence: false,
        };
        let out = solve_linear(&|v| v.clone(), &rhs, &cfg);
        assert!(out.residual_norm <= 1e-10);
        assert!(!out.diverged);

        // Negative definite M makes the iteration blow up.
        let cfg = LinSolveConfig {
            method: SolveMethod::FixedPoint,
            rounds: 200,
            fp_step: 0.5,
            tol: 1e-12,
            fallback_on_divergence: false,
        };
        let out = solve_linear(&|v| v.scale(-1.0), &rhs, &cfg);
        assert!(out.diverged);
    }

    #[test]
    fn linear_coupling_oracle_returns_theta_exactly() {
        // H = -1/2 ||delta||^2 + delta^T theta: the hypergradient is theta at
        // any delta, however suboptimal.
        let d = 6;
        let mut rng = SeededRng::new(41);
        let prob = QuadraticBilevel::linear_coupling(d);
        let theta: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        let exact = prob.closed_form_hypergrad(&theta);
        assert_eq!(exact, theta, "closed form of the bare oracle is theta");
        let point = prob.at(&theta);
        let cfg = LinSolveConfig {
            rounds: d,
            ..LinSolveConfig::default()
        };
        for mode in [HvpMode::Analytic, HvpMode::FiniteDiff] {
            for k in 0..10 {
                let delta = Tensor::randn(&[d], &mut rng, 0.0, 2.0 + k as f64 * 0.3);
                let got = implicit_hypergrad_at(&point, &delta, &cfg, mode).unwrap();
                let tol = if mode == HvpMode::Analytic { 1e-8 } else { 1e-4 };
                let err = vec_rel_err(&got.hypergrad, &exact);
                assert!(err <= tol, "{mode:?} delta {k}: err {err}");
                assert!(!got.fallback_used);
            }
        }
    }

    #[test]
    fn at_inner_optimum_indirect_vanishes() {
        let mut rng = SeededRng::new(43);
        let prob = QuadraticBilevel::random(5, 3, 1.0, 4.0, &mut rng);
        let theta: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
        let point = prob.at(&theta);
        let delta_star = prob.inner_optimum(&theta);
        // grad_1 H at the optimum is ~0, so rhs ~ 0 and the indirect term
        // collapses; the hypergradient reduces to the direct gradient.
        let rhs = point.grad_delta(&delta_star);
        assert!(rhs.l2_norm() <= 1e-10, "stationarity: {}", rhs.l2_norm());
        let got =
            implicit_hypergrad_at(&point, &delta_star, &LinSolveConfig::default(), HvpMode::Analytic)
                .unwrap();
        assert!(got.indirect_norm <= 1e-9);
        let direct = point.grad_theta(&delta_star);
        let err = vec_rel_err(&got.hypergrad, &direct);
        assert!(err <= 1e-9);
    }

    #[test]
    fn general_oracle_matches_closed_form() {
        let mut rng = SeededRng::new(45);
        for instance in 0..10 {
            let d = 4 + (instance % 5); // up to 8 here; acceptance covers 16
            let p = 3 + (instance % 3);
            let prob = QuadraticBilevel::random(d, p, 1.0, 4.0, &mut rng);
            let theta: Vec<f64> = (0..p).map(|_| rng.next_gaussian()).collect();
            let exact = prob.closed_form_hypergrad(&theta);
            let point = prob.at(&theta);
            let delta = Tensor::randn(&[d], &mut rng, 0.0, 1.0);
            let cfg = LinSolveConfig {
                rounds: d,
                tol: 0.0,
                ..LinSolveConfig::default()
            };
            let got = implicit_hypergrad_at(&point, &delta, &cfg, HvpMode::FiniteDiff).unwrap();
            let err = vec_rel_err(&got.hypergrad, &exact);
            assert!(err <= 1e-4, "instance {instance}: err {err}");
        }
    }

    #[test]
    fn coupling_free_oracle_gives_exactly_direct() {
        let mut rng = SeededRng::new(47);
        let prob = QuadraticBilevel::coupling_free(5, 4, 1.0, 3.0, &mut rng);
        let theta: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let point = prob.at(&theta);
        let delta = Tensor::randn(&[5], &mut rng, 0.0, 1.0);
        let got =
            implicit_hypergrad_at(&point, &delta, &LinSolveConfig::default(), HvpMode::FiniteDiff)
                .unwrap();
        let direct = point.grad_theta(&delta);
        assert_eq!(got.hypergrad, direct);
        assert_eq!(got.indirect_norm, 0.0);
    }

    #[test]
    fn theorem1_error_curve_decays() {
        let mut rng = SeededRng::new(49);
        // Moderate conditioning so the decay is visible over 50 steps.
        let prob = QuadraticBilevel::random(8, 5, 1.0, 12.0, &mut rng);
        let theta: Vec<f64> = (0..5).map(|_| rng.next_gaussian()).collect();
        let cfg = LinSolveConfig::default(); // truncated: 5 rounds
        let curve =
            theorem1_error_curve(&prob, &theta, &[0, 1, 3, 5, 10, 50], &cfg, HvpMode::Analytic)
                .unwrap();
        let errs: Vec<f64> = curve.iter().map(|(_, e)| *e).collect();
        assert!(
            errs[5] < errs[0],
            "error must shrink from t=0 to t=50: {errs:?}"
        );
        // Non-increasing after t >= 3.
        for w in errs[2..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "curve not decaying: {errs:?}");
        }
    }

    #[test]
    fn theorem1_error_zero_without_coupling() {
        let mut rng = SeededRng::new(51);
        let prob = QuadraticBilevel::coupling_free(6, 4, 1.0, 5.0, &mut rng);
        let theta: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
        let curve = theorem1_error_curve(
            &prob,
            &theta,
            &[0, 2, 8],
            &LinSolveConfig::default(),
            HvpMode::FiniteDiff,
        )
        .unwrap();
        for (t, err) in curve {
            assert!(err <= 1e-12, "t = {t}: err {err}");
        }
    }

    #[test]
    fn lu_solve_matches_hand_example() {
        let a = Tensor::from_vec(&[2, 2], vec![2.0, 1.0, 1.0, 3.0]);
        let x = lu_solve(&a, &[5.0, 10.0]);
        // 2x + y = 5, x + 3y = 10 -> x = 1, y = 3
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = SeededRng::new(53);
        let q = random_orthogonal(6, &mut rng);
        let qtq = q.transpose().matmul(&q);
        let eye = Tensor::eye(6);
        let err = qtq.sub(&eye).l2_norm();
        assert!(err < 1e-12, "Q^T Q - I norm {err}");
    }

    #[test]
    fn mlp_hypergrad_runs_and_is_finite() {
        use crate::model::{init_params, Activation};
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu);
        let params = init_params(&spec, &mut SeededRng::new(55));
        let mut rng = SeededRng::new(56);
        let x = Tensor::randn(&[6, 4], &mut rng, 0.5, 0.2).clamp01();
        let y = vec![0, 1, 2, 0, 1, 2];
        let delta = Tensor::randn(&[4], &mut rng, 0.0, 0.05);
        let report = implicit_hypergrad(
            &spec,
            &params,
            &delta,
            &x,
            &y,
            false,
            &LinSolveConfig::default(),
        )
        .unwrap();
        assert!(report.hypergrad.is_finite());
        assert!(report.direct_norm > 0.0);
        assert_eq!(report.hypergrad.entries.len(), params.entries.len());
    }
}
