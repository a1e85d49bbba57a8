//! End-to-end gradient estimators through the decision layer.
//!
//! Every estimator follows the same adjoint recipe: factor the KKT system at
//! the sample-average optimum, run one transpose solve against the outer
//! cost gradient, and turn the first block of the adjoint into per-sample
//! signals. The estimators differ in how those signals reach the predictor
//! parameters: pathwise back-substitution through the sampling computation
//! (reparameterization), or likelihood-ratio weighting of per-sample score
//! surrogates (score function). A deterministic point predictor is the
//! single-sample, noise-free special case.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::decision::{
    adjoint_solve, assemble_kkt, AffineConstraints, CostModel, KktSolution,
};
use crate::diffusion::{elbo_grad, EpsilonModel, NoiseSchedule, TimestepSampler, Trajectory};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, ParamLayout, ParamVector};

/// Which gradient path produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    DiffReparam,
    DiffScore,
    GaussReparam,
    GaussScore,
    Deterministic,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Self::DiffReparam => "diff-reparam",
            Self::DiffScore => "diff-score",
            Self::GaussReparam => "gauss-reparam",
            Self::GaussScore => "gauss-score",
            Self::Deterministic => "deterministic",
        };
        f.write_str(name)
    }
}

/// A parameter gradient of the decision loss, with the estimator that
/// produced it. Score-function estimators also report the per-sample
/// weights they applied.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub grad: ParamVector,
    pub kind: EstimatorKind,
    pub samples: usize,
    pub weights: Option<Vec<f64>>,
}

/// Factors the KKT system on the given outcome samples and returns the
/// adjoint vector `u` solving `u^T K = -[df_dz; 0; 0]^T`. Its first `d`
/// entries carry the decision sensitivity used by every estimator.
fn decision_adjoint(
    samples: &[Vec<f64>],
    sol: &KktSolution,
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    df_dz: &[f64],
) -> Result<DVector<f64>> {
    let fac = assemble_kkt(samples, cost, cons, sol)?;
    adjoint_solve(&fac, df_dz)
}

/// Per-sample score-function weights `w_i = u_z . grad_z f(y_i, z*)`. The
/// weights are plain numbers computed before any parameter gradient exists,
/// which realizes the stop-gradient on `w` by construction.
pub fn score_weights(
    samples: &[Vec<f64>],
    sol: &KktSolution,
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    df_dz: &[f64],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "score weights need at least one sample".into(),
        ));
    }
    let u = decision_adjoint(samples, sol, cost, cons, df_dz)?;
    let d = sol.z.len();
    Ok(samples
        .iter()
        .map(|y| {
            let g = cost.grad_z(y, sol.z.as_slice());
            g.iter().zip(u.iter().take(d)).map(|(a, b)| a * b).sum()
        })
        .collect())
}

/// Pathwise gradient through the reverse sampling chain.
///
/// The adjoint seeds a per-sample outcome cotangent
/// `c_i = hess_zy(y_i, z*)^T u_z`, which is walked backwards through the
/// recorded trajectory: each reverse step `y_{t-1} = (y_t - k_t eps_hat)/
/// sqrt(alpha_t) + sigma_t xi` contributes `-(k_t/sqrt(alpha_t)) v` as the
/// noise-prediction cotangent and rescales the carried state gradient.
#[allow(clippy::too_many_arguments)]
pub fn diff_reparam_grad(
    model: &EpsilonModel,
    params: &[f64],
    sched: &NoiseSchedule,
    x: &[f64],
    trajectories: &[Trajectory],
    sol: &KktSolution,
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    df_dz: &[f64],
) -> Result<GradientEstimate> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument(
            "diff_reparam_grad needs at least one trajectory".into(),
        ));
    }
    let t_steps = sched.t_steps();
    for traj in trajectories {
        if traj.states.len() != t_steps + 1 || traj.states[0].len() != model.y_dim() {
            return Err(Error::dim(
                "trajectory states",
                t_steps + 1,
                traj.states.len(),
            ));
        }
        if traj.context != x {
            return Err(Error::InvalidArgument(
                "trajectory context does not match the estimator context".into(),
            ));
        }
    }
    let samples: Vec<Vec<f64>> = trajectories.iter().map(|t| t.y0().to_vec()).collect();
    let u = decision_adjoint(&samples, sol, cost, cons, df_dz)?;
    let d = sol.z.len();
    let m = trajectories.len() as f64;

    let mut grad = ParamVector::zeros(model.layout().clone());
    for traj in trajectories {
        let hzy = cost.hess_zy(traj.y0(), sol.z.as_slice());
        // v = d<u_z, z-path>/d y_t, seeded at t = 0 and prescaled by 1/M.
        let mut v: Vec<f64> = (0..model.y_dim())
            .map(|j| (0..d).map(|r| hzy[(r, j)] * u[r]).sum::<f64>() / m)
            .collect();
        for t in 1..=t_steps {
            let scale = 1.0 / sched.alpha(t).sqrt();
            let coeff = -sched.eps_coefficient(t) * scale;
            let cot: Vec<f64> = v.iter().map(|g| coeff * g).collect();
            let gin = model.vjp(params, &traj.states[t], t, x, &cot, &mut grad.values)?;
            for (vj, g) in v.iter_mut().zip(gin.iter()) {
                *vj = *vj * scale + g;
            }
        }
    }
    Ok(GradientEstimate {
        grad,
        kind: EstimatorKind::DiffReparam,
        samples: trajectories.len(),
        weights: None,
    })
}

/// Weighted score-surrogate gradient with precomputed weights: the gradient
/// is `-(1/M) sum_i w_i * grad_theta(denoising loss of y_i)`, the negation
/// pointing the surrogate in the log-likelihood direction.
#[allow(clippy::too_many_arguments)]
pub fn diff_score_grad_with_weights(
    model: &EpsilonModel,
    params: &[f64],
    sched: &NoiseSchedule,
    x: &[f64],
    samples: &[Vec<f64>],
    weights: &[f64],
    sampler: &mut TimestepSampler,
    k: usize,
    rng: &mut impl Rng,
) -> Result<GradientEstimate> {
    if samples.len() != weights.len() {
        return Err(Error::dim("score weights", samples.len(), weights.len()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "diff_score_grad needs at least one sample".into(),
        ));
    }
    let m = samples.len() as f64;
    let mut grad = ParamVector::zeros(model.layout().clone());
    for (y, w) in samples.iter().zip(weights.iter()) {
        let g = elbo_grad(model, params, sched, y, x, sampler, k, rng)?;
        let scale = -w / m;
        for (slot, gi) in grad.values.iter_mut().zip(g.iter()) {
            *slot += scale * gi;
        }
    }
    Ok(GradientEstimate {
        grad,
        kind: EstimatorKind::DiffScore,
        samples: samples.len(),
        weights: Some(weights.to_vec()),
    })
}

/// Score-function gradient for the diffusion predictor: adjoint weights
/// followed by the weighted score surrogate. Samples must be fresh draws
/// from the current parameters; no trajectories are retained.
#[allow(clippy::too_many_arguments)]
pub fn diff_score_grad(
    model: &EpsilonModel,
    params: &[f64],
    sched: &NoiseSchedule,
    x: &[f64],
    samples: &[Vec<f64>],
    sol: &KktSolution,
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    df_dz: &[f64],
    sampler: &mut TimestepSampler,
    k: usize,
    rng: &mut impl Rng,
) -> Result<GradientEstimate> {
    let weights = score_weights(samples, sol, cost, cons, df_dz)?;
    diff_score_grad_with_weights(
        model, params, sched, x, samples, &weights, sampler, k, rng,
    )
}

/// Reference assembly of the score-function gradient that never forms the
/// weights: it builds the full KKT right-hand side
/// `(1/M) sum_i grad_z f(y_i, z*) (grad_theta log-surrogate_i)^T`, solves the
/// system once per parameter column, and contracts with `-df_dz`. Used to
/// certify the weighted form; `elbo_loss_grads` holds each sample's
/// denoising-loss gradient (loss direction, as produced by the surrogate).
pub fn diff_score_grad_via_matrix(
    layout: &ParamLayout,
    samples: &[Vec<f64>],
    elbo_loss_grads: &[Vec<f64>],
    sol: &KktSolution,
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    df_dz: &[f64],
) -> Result<GradientEstimate> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "diff_score_grad_via_matrix needs at least one sample".into(),
        ));
    }
    if samples.len() != elbo_loss_grads.len() {
        return Err(Error::dim(
            "per-sample surrogate gradients",
            samples.len(),
            elbo_loss_grads.len(),
        ));
    }
    let fac = assemble_kkt(samples, cost, cons, sol)?;
    let (d, n, p) = fac.dims();
    if df_dz.len() != d {
        return Err(Error::dim("outer cost gradient", d, df_dz.len()));
    }
    let m = samples.len() as f64;
    let grads_z: Vec<Vec<f64>> = samples
        .iter()
        .map(|y| cost.grad_z(y, sol.z.as_slice()))
        .collect();

    let mut grad = ParamVector::zeros(layout.clone());
    let mut rhs = DVector::zeros(d + n + p);
    for j in 0..layout.len() {
        for slot in rhs.iter_mut() {
            *slot = 0.0;
        }
        for (gz, lg) in grads_z.iter().zip(elbo_loss_grads.iter()) {
            // Negated loss gradient: the surrogate's log-likelihood direction.
            let lgj = -lg[j] / m;
            for r in 0..d {
                rhs[r] += gz[r] * lgj;
            }
        }
        let s = fac.solve(&rhs)?;
        grad.values[j] = -(0..d).map(|r| df_dz[r] * s[r]).sum::<f64>();
    }
    Ok(GradientEstimate {
        grad,
        kind: EstimatorKind::DiffScore,
        samples: samples.len(),
        weights: None,
    })
}

/// Dense network emitting a diagonal Gaussian per context: the first half of
/// the output is the mean, the second half the log variance.
#[derive(Debug, Clone)]
pub struct GaussianPredictor {
    net: DenseNet,
    layout: ParamLayout,
    x_dim: usize,
    y_dim: usize,
}

impl GaussianPredictor {
    pub fn new(x_dim: usize, y_dim: usize, hidden: &[usize]) -> Result<Self> {
        if y_dim == 0 {
            return Err(Error::InvalidArgument(
                "gaussian predictor needs a positive outcome dimension".into(),
            ));
        }
        let mut layout = ParamLayout::new();
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(x_dim);
        widths.extend_from_slice(hidden);
        widths.push(2 * y_dim);
        let net = DenseNet::new(&mut layout, "net", &widths, Activation::Silu)?;
        Ok(Self {
            net,
            layout,
            x_dim,
            y_dim,
        })
    }

    /// The two-hidden-layer width used across the experiment harness.
    pub fn desk(y_dim: usize, x_dim: usize) -> Self {
        Self::new(x_dim, y_dim, &[64, 64]).expect("desk gaussian dims are valid")
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        let mut params = ParamVector::zeros(self.layout.clone());
        self.net.init(&mut params.values, rng);
        params
    }

    /// Mean and log variance at `x`.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.forward(params, x)?;
        Ok((
            out[..self.y_dim].to_vec(),
            out[self.y_dim..].to_vec(),
        ))
    }

    /// `mu + sigma . eps` for a supplied standard normal draw.
    pub fn sample_with(&self, params: &[f64], x: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.y_dim {
            return Err(Error::dim("gaussian noise draw", self.y_dim, eps.len()));
        }
        let (mu, log_var) = self.forward(params, x)?;
        Ok(mu
            .iter()
            .zip(log_var.iter())
            .zip(eps.iter())
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect())
    }

    pub fn sample(&self, params: &[f64], x: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let eps: Vec<f64> = (0..self.y_dim).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with(params, x, &eps)
    }

    /// Diagonal Gaussian log density of `y` at the predicted distribution.
    pub fn log_density(&self, params: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
        if y.len() != self.y_dim {
            return Err(Error::dim("gaussian outcome", self.y_dim, y.len()));
        }
        let (mu, log_var) = self.forward(params, x)?;
        let mut total = 0.0;
        for j in 0..self.y_dim {
            let r = y[j] - mu[j];
            total += log_var[j] + r * r / log_var[j].exp() + (2.0 * std::f64::consts::PI).ln();
        }
        Ok(-0.5 * total)
    }

    /// Accumulates `scale * grad_theta log p(y | x)` into `param_grad` and
    /// returns the log density. The closed-form output cotangents are
    /// `(y - mu)/var` on the mean head and `((y - mu)^2/var - 1)/2` on the
    /// log-variance head.
    pub fn log_density_grad(
        &self,
        params: &[f64],
        x: &[f64],
        y: &[f64],
        scale: f64,
        param_grad: &mut [f64],
    ) -> Result<f64> {
        if y.len() != self.y_dim {
            return Err(Error::dim("gaussian outcome", self.y_dim, y.len()));
        }
        let out = self.net.forward(params, x)?;
        let mut cot = vec![0.0; 2 * self.y_dim];
        let mut total = 0.0;
        for j in 0..self.y_dim {
            let r = y[j] - out[j];
            let var = out[self.y_dim + j].exp();
            total += out[self.y_dim + j] + r * r / var + (2.0 * std::f64::consts::PI).ln();
            cot[j] = scale * r / var;
            cot[self.y_dim + j] = scale * 0.5 * (r * r / var - 1.0);
        }
        self.net.vjp(params, x, &cot, param_grad)?;
        Ok(-0.5 * total)
    }
}

/// Single-step pathwise gradient for the Gaussian predictor: each sample is
/// `y_i = mu + sigma . eps_i`, so the outcome cotangent splits into the mean
/// head directly and `sigma . eps . c / 2` on the log-variance head.
#[allow(clippy::too_many_arguments)]
pub fn gauss_reparam_grad(
    pred: &GaussianPredictor,
    params: &[f64],
    x: &[f64],
    eps_draws: &[Vec<f64>],
    sol: &KktSolution,
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    df_dz: &[f64],
) -> Result<GradientEstimate> {
    if eps_draws.is_empty() {
        return Err(Error::InvalidArgument(
            "gauss_reparam_grad needs at least one noise draw".into(),
        ));
    }
    let (_, log_var) = pred.forward(params, x)?;
    let sigma: Vec<f64> = log_var.iter().map(|l| (0.5 * l).exp()).collect();
    let samples: Vec<Vec<f64>> = eps_draws
        .iter()
        .map(|eps| pred.sample_with(params, x, eps))
        .collect::<Result<_>>()?;
    let u = decision_adjoint(&samples, sol, cost, cons, df_dz)?;
    let d = sol.z.len();
    let m = eps_draws.len() as f64;

    let mut grad = ParamVector::zeros(pred.layout().clone());
    let mut cot = vec![0.0; 2 * pred.y_dim()];
    for (y, eps) in samples.iter().zip(eps_draws.iter()) {
        let hzy = cost.hess_zy(y, sol.z.as_slice());
        for j in 0..pred.y_dim() {
            let c: f64 = (0..d).map(|r| hzy[(r, j)] * u[r]).sum::<f64>() / m;
            cot[j] = c;
            cot[pred.y_dim() + j] = 0.5 * sigma[j] * eps[j] * c;
        }
        pred.net.vjp(params, x, &cot, &mut grad.values)?;
    }
    Ok(GradientEstimate {
        grad,
        kind: EstimatorKind::GaussReparam,
        samples: eps_draws.len(),
        weights: None,
    })
}

/// Score-function gradient for the Gaussian predictor: the exact per-sample
/// log-density gradient replaces the diffusion surrogate.
pub fn gauss_score_grad(
    pred: &GaussianPredictor,
    params: &[f64],
    x: &[f64],
    samples: &[Vec<f64>],
    sol: &KktSolution,
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    df_dz: &[f64],
) -> Result<GradientEstimate> {
    let weights = score_weights(samples, sol, cost, cons, df_dz)?;
    let m = samples.len() as f64;
    let mut grad = ParamVector::zeros(pred.layout().clone());
    for (y, w) in samples.iter().zip(weights.iter()) {
        pred.log_density_grad(params, x, y, w / m, &mut grad.values)?;
    }
    Ok(GradientEstimate {
        grad,
        kind: EstimatorKind::GaussScore,
        samples: samples.len(),
        weights: Some(weights),
    })
}

/// Pathwise gradient for a deterministic point predictor: the single-sample,
/// zero-noise case. `sol` must be solved on the net's prediction at `x`.
pub fn deterministic_grad(
    net: &DenseNet,
    params: &[f64],
    x: &[f64],
    sol: &KktSolution,
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    df_dz: &[f64],
    layout: &ParamLayout,
) -> Result<GradientEstimate> {
    let y_hat = net.forward(params, x)?;
    let samples = vec![y_hat.clone()];
    let u = decision_adjoint(&samples, sol, cost, cons, df_dz)?;
    let d = sol.z.len();
    let hzy = cost.hess_zy(&y_hat, sol.z.as_slice());
    let cot: Vec<f64> = (0..net.out_dim())
        .map(|j| (0..d).map(|r| hzy[(r, j)] * u[r]).sum())
        .collect();
    let mut grad = ParamVector::zeros(layout.clone());
    net.vjp(params, x, &cot, &mut grad.values)?;
    Ok(GradientEstimate {
        grad,
        kind: EstimatorKind::Deterministic,
        samples: 1,
        weights: None,
    })
}
