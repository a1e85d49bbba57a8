//! Conditional denoising diffusion predictor.
//!
//! A [`NoiseSchedule`] fixes the forward corruption process
//! `y_t = sqrt(abar_t) y_0 + sqrt(1 - abar_t) eps`; an [`EpsilonModel`]
//! predicts the injected noise from `(y_t, t, x)`. Reverse sampling walks the
//! learned chain `y_{t-1} = mu(y_t, t, x) + sigma_t xi` down from a standard
//! normal draw, taking the final step deterministically. The simplified ELBO
//! term `|eps - eps_hat|^2` serves both as the denoising training loss and,
//! through [`elbo_grad`], as the likelihood surrogate used by the
//! score-function estimator, with timesteps drawn from an importance-sampled
//! [`TimestepSampler`].

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, ParamLayout, ParamVector, TimeEmbedding};

pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_T_STEPS: usize = 50;

/// Linear beta schedule with derived quantities, indexed by t in `1..=T`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.check(t);
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.check(t);
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.check(t);
        self.alpha_bar[t - 1]
    }

    /// Reverse-step noise scale, `sigma_t^2 = beta_t`. The reverse sampler
    /// takes the final step (t = 1) deterministically regardless.
    pub fn sigma(&self, t: usize) -> f64 {
        self.check(t);
        self.sigma[t - 1]
    }

    fn check(&self, t: usize) {
        assert!(
            t >= 1 && t <= self.t_steps(),
            "timestep {t} outside 1..={}",
            self.t_steps()
        );
    }

    /// Coefficient `beta_t / sqrt(1 - abar_t)` of the noise prediction inside
    /// the reverse mean.
    pub fn eps_coefficient(&self, t: usize) -> f64 {
        self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Reverse mean `mu = (y_t - eps_coefficient * eps_hat) / sqrt(alpha_t)`.
    pub fn reverse_mean(&self, t: usize, y_t: &[f64], eps_hat: &[f64]) -> Vec<f64> {
        let k = self.eps_coefficient(t);
        let inv = 1.0 / self.alpha(t).sqrt();
        y_t.iter()
            .zip(eps_hat.iter())
            .map(|(y, e)| inv * (y - k * e))
            .collect()
    }
}

/// Builds a linear beta schedule over `t_steps` steps. Requires
/// `0 < beta_min <= beta_max < 1`; a single-step schedule uses `beta_min`.
pub fn build_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one timestep".into(),
        ));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta: Vec<f64> = if t_steps == 1 {
        vec![beta_min]
    } else {
        (0..t_steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

/// Closed-form forward noising `y_t = sqrt(abar_t) y_0 + sqrt(1-abar_t) eps`.
pub fn forward_noise(
    sched: &NoiseSchedule,
    y0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if t < 1 || t > sched.t_steps() {
        return Err(Error::InvalidArgument(format!(
            "forward_noise timestep {t} outside 1..={}",
            sched.t_steps()
        )));
    }
    if y0.len() != eps.len() {
        return Err(Error::dim("forward_noise noise", y0.len(), eps.len()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(y0
        .iter()
        .zip(eps.iter())
        .map(|(y, e)| a * y + b * e)
        .collect())
}

/// Noise-prediction network `eps_hat(y_t, t, x)`: the trunk consumes the
/// noisy outcome, a projected sinusoidal timestep embedding and the context.
#[derive(Debug, Clone)]
pub struct EpsilonModel {
    y_dim: usize,
    x_dim: usize,
    temb: TimeEmbedding,
    trunk: DenseNet,
    layout: ParamLayout,
}

impl EpsilonModel {
    pub fn new(
        y_dim: usize,
        x_dim: usize,
        embed_dim: usize,
        embed_width: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        if y_dim == 0 {
            return Err(Error::InvalidArgument(
                "epsilon model needs a positive outcome dimension".into(),
            ));
        }
        let mut layout = ParamLayout::new();
        let temb = TimeEmbedding::new(&mut layout, "time", embed_dim, embed_width)?;
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(y_dim + embed_width + x_dim);
        widths.extend_from_slice(hidden);
        widths.push(y_dim);
        let trunk = DenseNet::new(&mut layout, "trunk", &widths, Activation::Silu)?;
        Ok(Self {
            y_dim,
            x_dim,
            temb,
            trunk,
            layout,
        })
    }

    /// Small configuration used throughout the test and experiment harness:
    /// 16-dimensional sinusoidal features, 16-wide projection, 2x64 trunk.
    pub fn desk(y_dim: usize, x_dim: usize) -> Self {
        Self::new(y_dim, x_dim, 16, 16, &[64, 64]).expect("desk epsilon model dims are valid")
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        let mut params = ParamVector::zeros(self.layout.clone());
        self.temb.init(&mut params.values, rng);
        self.trunk.init(&mut params.values, rng);
        params
    }

    fn check(&self, params: &[f64], y_t: &[f64], x: &[f64]) -> Result<()> {
        if y_t.len() != self.y_dim {
            return Err(Error::dim("epsilon model outcome", self.y_dim, y_t.len()));
        }
        if x.len() != self.x_dim {
            return Err(Error::dim("epsilon model context", self.x_dim, x.len()));
        }
        if params.len() != self.layout.len() {
            return Err(Error::dim(
                "epsilon model parameters",
                self.layout.len(),
                params.len(),
            ));
        }
        Ok(())
    }

    pub fn predict(&self, params: &[f64], y_t: &[f64], t: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, y_t, x)?;
        let e = self.temb.embed(params, t)?;
        let mut input = Vec::with_capacity(self.trunk.in_dim());
        input.extend_from_slice(y_t);
        input.extend_from_slice(&e);
        input.extend_from_slice(x);
        self.trunk.forward(params, &input)
    }

    /// Backpropagates `cotangent` through the prediction: accumulates the
    /// parameter gradient into `param_grad` and returns the gradient with
    /// respect to `y_t`. The context receives no gradient.
    pub fn vjp(
        &self,
        params: &[f64],
        y_t: &[f64],
        t: usize,
        x: &[f64],
        cotangent: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check(params, y_t, x)?;
        let e = self.temb.embed(params, t)?;
        let mut input = Vec::with_capacity(self.trunk.in_dim());
        input.extend_from_slice(y_t);
        input.extend_from_slice(&e);
        input.extend_from_slice(x);
        let gin = self.trunk.vjp(params, &input, cotangent, param_grad)?;
        let g_embed = &gin[self.y_dim..self.y_dim + self.temb.out_dim()];
        self.temb.vjp(params, t, g_embed, param_grad)?;
        Ok(gin[..self.y_dim].to_vec())
    }
}

/// One realized reverse chain: `states[t]` is `y_t`, so `states[0]` is the
/// generated outcome and `states[T]` the prior draw. `noises` holds the exact
/// Gaussian vectors consumed by [`reverse_sample`]: `noises[T]` is the prior
/// draw and `noises[t-1]` is injected after step `t` (the entry for the final
/// step is kept for shape regularity but unused because that step is
/// deterministic).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    pub context: Vec<f64>,
}

impl Trajectory {
    pub fn y0(&self) -> &[f64] {
        &self.states[0]
    }
}

/// Draws the `T+1` Gaussian vectors a reverse pass consumes.
pub fn draw_noises(y_dim: usize, t_steps: usize, rng: &mut (impl Rng + ?Sized)) -> Vec<Vec<f64>> {
    (0..=t_steps)
        .map(|_| (0..y_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn check_noises(y_dim: usize, t_steps: usize, noises: &[Vec<f64>]) -> Result<()> {
    if noises.len() != t_steps + 1 {
        return Err(Error::dim("reverse_sample noises", t_steps + 1, noises.len()));
    }
    for n in noises {
        if n.len() != y_dim {
            return Err(Error::dim("reverse_sample noise vector", y_dim, n.len()));
        }
    }
    Ok(())
}

/// Reverse chain under an arbitrary noise predictor, for callers (such as the
/// closed-form linear oracle) that are not backed by an [`EpsilonModel`].
pub fn reverse_sample_with<F>(
    mut eps_fn: F,
    y_dim: usize,
    context: Vec<f64>,
    sched: &NoiseSchedule,
    noises: Vec<Vec<f64>>,
) -> Result<Trajectory>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    check_noises(y_dim, sched.t_steps(), &noises)?;
    let t_steps = sched.t_steps();
    let mut states = vec![Vec::new(); t_steps + 1];
    states[t_steps] = noises[t_steps].clone();
    for t in (1..=t_steps).rev() {
        let eps_hat = eps_fn(&states[t], t)?;
        let mut next = sched.reverse_mean(t, &states[t], &eps_hat);
        if t > 1 {
            let s = sched.sigma(t);
            for (v, n) in next.iter_mut().zip(noises[t - 1].iter()) {
                *v += s * n;
            }
        }
        states[t - 1] = next;
    }
    Ok(Trajectory {
        states,
        noises,
        context,
    })
}

/// Runs the learned reverse chain on the supplied noises, recording every
/// intermediate state. Replaying the same noises reproduces the trajectory
/// exactly.
pub fn reverse_sample(
    model: &EpsilonModel,
    params: &[f64],
    x: &[f64],
    sched: &NoiseSchedule,
    noises: Vec<Vec<f64>>,
) -> Result<Trajectory> {
    reverse_sample_with(
        |y_t, t| model.predict(params, y_t, t, x),
        model.y_dim(),
        x.to_vec(),
        sched,
        noises,
    )
}

/// Draws one outcome from the model without retaining the trajectory.
pub fn sample_y0(
    model: &EpsilonModel,
    params: &[f64],
    x: &[f64],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let t_steps = sched.t_steps();
    let mut y: Vec<f64> = (0..model.y_dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    for t in (1..=t_steps).rev() {
        let eps_hat = model.predict(params, &y, t, x)?;
        let mut next = sched.reverse_mean(t, &y, &eps_hat);
        if t > 1 {
            let s = sched.sigma(t);
            for v in next.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += s * n;
            }
        }
        y = next;
    }
    Ok(y)
}

/// Single-term simplified ELBO loss `|eps - eps_hat(y_t, t, x)|^2` with
/// `y_t = forward_noise(y0, t, eps)`.
pub fn elbo_simplified(
    model: &EpsilonModel,
    params: &[f64],
    sched: &NoiseSchedule,
    y0: &[f64],
    x: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<f64> {
    let y_t = forward_noise(sched, y0, t, eps)?;
    let eps_hat = model.predict(params, &y_t, t, x)?;
    Ok(eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(e, p)| (e - p) * (e - p))
        .sum())
}

/// Value and parameter gradient of [`elbo_simplified`]. The gradient is
/// accumulated into `param_grad` scaled by `scale`.
pub fn elbo_simplified_grad(
    model: &EpsilonModel,
    params: &[f64],
    sched: &NoiseSchedule,
    y0: &[f64],
    x: &[f64],
    t: usize,
    eps: &[f64],
    scale: f64,
    param_grad: &mut [f64],
) -> Result<f64> {
    let y_t = forward_noise(sched, y0, t, eps)?;
    let eps_hat = model.predict(params, &y_t, t, x)?;
    let value = eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(e, p)| (e - p) * (e - p))
        .sum();
    let cot: Vec<f64> = eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(e, p)| scale * 2.0 * (p - e))
        .collect();
    model.vjp(params, &y_t, t, x, &cot, param_grad)?;
    Ok(value)
}

/// Importance sampler over timesteps following the gradient-norm recipe:
/// each timestep keeps a ring buffer (capacity 10) of recently observed
/// squared gradient norms, and once every buffer is full the sampler draws
/// `t` with probability proportional to the root mean of its buffer.
/// Until then sampling is uniform.
#[derive(Debug, Clone)]
pub struct TimestepSampler {
    history: Vec<VecDeque<f64>>,
    capacity: usize,
}

impl TimestepSampler {
    pub const DEFAULT_CAPACITY: usize = 10;

    pub fn new(t_steps: usize) -> Self {
        Self {
            history: vec![VecDeque::new(); t_steps],
            capacity: Self::DEFAULT_CAPACITY,
        }
    }

    pub fn t_steps(&self) -> usize {
        self.history.len()
    }

    /// True once every timestep has a full history.
    pub fn warmed(&self) -> bool {
        self.history.iter().all(|h| h.len() >= self.capacity)
    }

    /// Records the squared gradient norm observed for timestep `t`.
    pub fn record(&mut self, t: usize, sq_norm: f64) {
        assert!(t >= 1 && t <= self.t_steps(), "timestep {t} out of range");
        let h = &mut self.history[t - 1];
        if h.len() == self.capacity {
            h.pop_front();
        }
        h.push_back(sq_norm);
    }

    /// Current sampling distribution over `t = 1..=T`.
    pub fn probabilities(&self) -> Vec<f64> {
        let t_steps = self.t_steps();
        let uniform = vec![1.0 / t_steps as f64; t_steps];
        if !self.warmed() {
            return uniform;
        }
        let mut p: Vec<f64> = self
            .history
            .iter()
            .map(|h| (h.iter().sum::<f64>() / h.len() as f64).sqrt())
            .collect();
        let total: f64 = p.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return uniform;
        }
        for v in &mut p {
            *v /= total;
        }
        p
    }

    /// Draws a timestep in `1..=T` from the current distribution.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        sample_categorical(&self.probabilities(), rng)
    }
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    probs.len()
}

/// Monte Carlo estimate of the simplified denoising loss gradient for one
/// data point, averaging `k` single-timestep gradients. Each draw `t ~ p` is
/// weighted by `1 / (T p_t)`, so the estimate is unbiased for the uniform
/// average over timesteps regardless of the sampling distribution, and the
/// weights cancel exactly when `p` is uniform. Every draw's raw squared
/// gradient norm is recorded into the sampler.
pub fn elbo_grad(
    model: &EpsilonModel,
    params: &[f64],
    sched: &NoiseSchedule,
    y0: &[f64],
    x: &[f64],
    sampler: &mut TimestepSampler,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if sampler.t_steps() != sched.t_steps() {
        return Err(Error::dim(
            "timestep sampler",
            sched.t_steps(),
            sampler.t_steps(),
        ));
    }
    let probs = sampler.probabilities();
    let (grad, recorded) = elbo_grad_with_probs(model, params, sched, y0, x, &probs, k, rng)?;
    for (t, sq) in recorded {
        sampler.record(t, sq);
    }
    Ok(grad)
}

/// [`elbo_grad`] against an explicit timestep distribution. Returns the
/// gradient estimate and the `(t, squared norm)` observations, letting the
/// caller decide whether to feed them back into a sampler.
#[allow(clippy::too_many_arguments)]
pub fn elbo_grad_with_probs(
    model: &EpsilonModel,
    params: &[f64],
    sched: &NoiseSchedule,
    y0: &[f64],
    x: &[f64],
    probs: &[f64],
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<(usize, f64)>)> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "elbo_grad needs at least one timestep draw".into(),
        ));
    }
    if probs.len() != sched.t_steps() {
        return Err(Error::dim(
            "timestep probabilities",
            sched.t_steps(),
            probs.len(),
        ));
    }
    let t_steps = sched.t_steps() as f64;
    let mut grad = vec![0.0; model.layout().len()];
    let mut scratch = vec![0.0; model.layout().len()];
    let mut recorded = Vec::with_capacity(k);
    for _ in 0..k {
        let t = sample_categorical(probs, rng);
        let eps: Vec<f64> = (0..model.y_dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        scratch.iter_mut().for_each(|v| *v = 0.0);
        elbo_simplified_grad(model, params, sched, y0, x, t, &eps, 1.0, &mut scratch)?;
        let sq_norm: f64 = scratch.iter().map(|g| g * g).sum();
        recorded.push((t, sq_norm));
        let w = 1.0 / (t_steps * probs[t - 1] * k as f64);
        for (g, s) in grad.iter_mut().zip(scratch.iter()) {
            *g += w * s;
        }
    }
    Ok((grad, recorded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> EpsilonModel {
        EpsilonModel::new(2, 1, 4, 4, &[6]).unwrap()
    }

    #[test]
    fn schedule_is_linear_and_monotone() {
        let s = build_schedule(50, 1e-4, 0.02).unwrap();
        assert_eq!(s.t_steps(), 50);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(50), 0.02);
        let mid = s.beta(25);
        assert!(mid > 1e-4 && mid < 0.02);
        for t in 2..=50 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            // Exact because alpha_bar is built as a running product.
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert_eq!(s.sigma(t), s.beta(t).sqrt());
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(build_schedule(0, 1e-4, 0.02).is_err());
        assert!(build_schedule(10, 0.0, 0.02).is_err());
        assert!(build_schedule(10, 0.03, 0.02).is_err());
        assert!(build_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn forward_noise_matches_closed_form() {
        let s = build_schedule(10, 1e-3, 0.1).unwrap();
        let y0 = [1.0, -2.0];
        let eps = [0.5, 0.25];
        let t = 7;
        let y_t = forward_noise(&s, &y0, t, &eps).unwrap();
        let ab = s.alpha_bar(t);
        for i in 0..2 {
            let expected = ab.sqrt() * y0[i] + (1.0 - ab).sqrt() * eps[i];
            assert!((y_t[i] - expected).abs() < 1e-15);
        }
        assert!(forward_noise(&s, &y0, 0, &eps).is_err());
        assert!(forward_noise(&s, &y0, 11, &eps).is_err());
        assert!(forward_noise(&s, &y0, 3, &[1.0]).is_err());
    }

    #[test]
    fn zero_predictor_chain_rescales_the_prior_draw() {
        // With eps_hat = 0 and zero injected noise, each reverse step divides
        // by sqrt(alpha_t), so y_0 = y_T / sqrt(alpha_bar_T).
        let model = tiny_model();
        let params = ParamVector::zeros(model.layout().clone());
        let s = build_schedule(5, 0.01, 0.2).unwrap();
        let mut noises = vec![vec![0.0; 2]; 6];
        noises[5] = vec![0.8, -1.1];
        let traj = reverse_sample(&model, &params.values, &[0.0], &s, noises).unwrap();
        assert_eq!(traj.states.len(), 6);
        let scale = 1.0 / s.alpha_bar(5).sqrt();
        for i in 0..2 {
            let expected = traj.states[5][i] * scale;
            assert!((traj.states[0][i] - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn replaying_noises_reproduces_the_trajectory_exactly() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = model.init_params(&mut rng);
        let s = build_schedule(8, 1e-3, 0.05).unwrap();
        let noises = draw_noises(2, 8, &mut rng);
        let x = [0.4];
        let a = reverse_sample(&model, &params.values, &x, &s, noises.clone()).unwrap();
        let b = reverse_sample(&model, &params.values, &x, &s, noises).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.context, b.context);
    }

    #[test]
    fn final_step_ignores_its_noise_entry() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = model.init_params(&mut rng);
        let s = build_schedule(4, 1e-3, 0.05).unwrap();
        let mut noises = draw_noises(2, 4, &mut rng);
        let a = reverse_sample(&model, &params.values, &[0.1], &s, noises.clone()).unwrap();
        noises[0] = vec![100.0, -100.0];
        let b = reverse_sample(&model, &params.values, &[0.1], &s, noises).unwrap();
        assert_eq!(a.states[0], b.states[0]);
    }

    #[test]
    fn elbo_simplified_with_zero_predictor_is_noise_norm() {
        let model = tiny_model();
        let params = ParamVector::zeros(model.layout().clone());
        let s = build_schedule(6, 1e-3, 0.1).unwrap();
        let eps = [0.3, -0.7];
        let v = elbo_simplified(&model, &params.values, &s, &[1.0, 2.0], &[0.5], 4, &eps).unwrap();
        assert!((v - (0.09 + 0.49)).abs() < 1e-15);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = model.init_params(&mut rng);
        let s = build_schedule(6, 1e-3, 0.1).unwrap();
        let y0 = [0.6, -0.2];
        let x = [0.9];
        let eps = [0.11, -1.3];
        let t = 3;
        let mut grad = vec![0.0; params.len()];
        elbo_simplified_grad(&model, &params.values, &s, &y0, &x, t, &eps, 1.0, &mut grad)
            .unwrap();
        let h = 1e-5;
        for k in (0..params.len()).step_by(5) {
            let mut plus = params.values.clone();
            let mut minus = params.values.clone();
            plus[k] += h;
            minus[k] -= h;
            let fp = elbo_simplified(&model, &plus, &s, &y0, &x, t, &eps).unwrap();
            let fm = elbo_simplified(&model, &minus, &s, &y0, &x, t, &eps).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let scale = 1.0f64.max(fd.abs());
            assert!(
                (grad[k] - fd).abs() <= 1e-5 * scale,
                "param {k}: {} vs fd {}",
                grad[k],
                fd
            );
        }
    }

    #[test]
    fn sampler_is_uniform_until_warm_then_weighted() {
        let mut sampler = TimestepSampler::new(4);
        assert!(!sampler.warmed());
        assert_eq!(sampler.probabilities(), vec![0.25; 4]);
        for t in 1..=4 {
            for i in 0..TimestepSampler::DEFAULT_CAPACITY {
                sampler.record(t, (t as f64).powi(2) + i as f64 * 0.0);
            }
        }
        assert!(sampler.warmed());
        let p = sampler.probabilities();
        // Root-mean of constant history t^2 is t, so p_t should be t/10.
        let total: f64 = (1..=4).map(|t| t as f64).sum();
        for t in 1..=4usize {
            assert!((p[t - 1] - t as f64 / total).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_history_is_a_ring_buffer() {
        let mut sampler = TimestepSampler::new(1);
        for _ in 0..TimestepSampler::DEFAULT_CAPACITY {
            sampler.record(1, 100.0);
        }
        for _ in 0..TimestepSampler::DEFAULT_CAPACITY {
            sampler.record(1, 4.0);
        }
        // Old entries must be fully evicted: root-mean is exactly 2.
        assert!(sampler.warmed());
        let hist = &sampler.history[0];
        assert_eq!(hist.len(), TimestepSampler::DEFAULT_CAPACITY);
        assert!(hist.iter().all(|v| *v == 4.0));
    }

    #[test]
    fn uniform_elbo_grad_weights_cancel() {
        // With uniform probabilities the 1/(T p_t) weight is exactly 1, so the
        // estimate equals the plain average of the sampled per-t gradients.
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = model.init_params(&mut rng);
        let s = build_schedule(5, 1e-3, 0.1).unwrap();
        let probs = vec![0.2; 5];
        let y0 = [0.2, 0.4];
        let x = [0.0];

        let mut rng_a = ChaCha8Rng::seed_from_u64(77);
        let (grad, recorded) =
            elbo_grad_with_probs(&model, &params.values, &s, &y0, &x, &probs, 6, &mut rng_a)
                .unwrap();

        // Replay the identical draw sequence manually.
        let mut rng_b = ChaCha8Rng::seed_from_u64(77);
        let mut manual = vec![0.0; params.len()];
        for _ in 0..6 {
            let t = sample_categorical(&probs, &mut rng_b);
            let eps: Vec<f64> = (0..2).map(|_| rng_b.sample(StandardNormal)).collect();
            elbo_simplified_grad(
                &model,
                &params.values,
                &s,
                &y0,
                &x,
                t,
                &eps,
                1.0 / 6.0,
                &mut manual,
            )
            .unwrap();
        }
        assert_eq!(recorded.len(), 6);
        for (g, m) in grad.iter().zip(manual.iter()) {
            assert!((g - m).abs() <= 1e-12 * m.abs().max(1.0));
        }
    }

    #[test]
    fn importance_sampled_elbo_grad_is_unbiased() {
        // Frozen 1-D model: the mean of many IS estimates must agree with the
        // mean of many uniform estimates within three standard errors.
        let model = EpsilonModel::new(1, 0, 4, 4, &[4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = model.init_params(&mut rng);
        let s = build_schedule(4, 1e-2, 0.2).unwrap();
        let y0 = [0.7];

        // Deliberately skewed sampling distribution.
        let skewed = vec![0.55, 0.25, 0.15, 0.05];
        let uniform = vec![0.25; 4];
        let n = 4000;
        let dim = params.len();
        let (mut mean_is, mut mean_un) = (vec![0.0; dim], vec![0.0; dim]);
        let (mut m2_is, mut m2_un) = (vec![0.0; dim], vec![0.0; dim]);
        for _ in 0..n {
            let (g, _) = elbo_grad_with_probs(
                &model,
                &params.values,
                &s,
                &y0,
                &[],
                &skewed,
                1,
                &mut rng,
            )
            .unwrap();
            for i in 0..dim {
                mean_is[i] += g[i];
                m2_is[i] += g[i] * g[i];
            }
            let (g, _) = elbo_grad_with_probs(
                &model,
                &params.values,
                &s,
                &y0,
                &[],
                &uniform,
                1,
                &mut rng,
            )
            .unwrap();
            for i in 0..dim {
                mean_un[i] += g[i];
                m2_un[i] += g[i] * g[i];
            }
        }
        for i in 0..dim {
            mean_is[i] /= n as f64;
            mean_un[i] /= n as f64;
            let var_is = m2_is[i] / n as f64 - mean_is[i] * mean_is[i];
            let var_un = m2_un[i] / n as f64 - mean_un[i] * mean_un[i];
            let se = ((var_is + var_un) / n as f64).sqrt().max(1e-12);
            assert!(
                (mean_is[i] - mean_un[i]).abs() <= 3.0 * se,
                "component {i} differs by more than 3 standard errors"
            );
        }
    }
}
