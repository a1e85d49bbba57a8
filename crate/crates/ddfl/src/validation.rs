//! Independent oracles for gradient claims.
//!
//! Three tools cross-check every estimator in the crate: [`fd_grad`] runs
//! central finite differences over a flat parameter vector,
//! [`LinearDiffusionOracle`] is a reverse chain whose noise predictor is
//! affine (`eps = A_t y_t + B_t x + c_t`), so its outcome distribution is an
//! exactly computable Gaussian with a closed-form parameter score, and
//! [`cosine`] measures direction agreement between gradient estimates.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{draw_noises, forward_noise, reverse_sample_with, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{ParamLayout, ParamVector};

/// Step for finite differences over smooth closed-form objectives.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Wider step for end-to-end objectives whose evaluation contains an
/// iterative inner solve; the larger step keeps the difference above the
/// solver's tolerance noise floor.
pub const END_TO_END_FD_STEP: f64 = 1e-4;

/// Central finite differences `(f(theta + h e_i) - f(theta - h e_i)) / 2h`
/// per coordinate. The objective must be pure and deterministic (freeze any
/// randomness before calling); non-finite values are rejected.
pub fn fd_grad<F>(mut objective: F, theta: &ParamVector, step: f64) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive and finite, got {step}"
        )));
    }
    let mut grad = ParamVector::zeros(theta.layout.clone());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let base = theta.values[i];
        probe.values[i] = base + step;
        let up = objective(&probe)?;
        probe.values[i] = base - step;
        let down = objective(&probe)?;
        probe.values[i] = base;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite-difference objective at coordinate {i}"),
            });
        }
        grad.values[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Cosine similarity `u . v / (|u| |v|)`; zero vectors are rejected.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine operands", u.len(), v.len()));
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// Reverse diffusion chain with an affine noise predictor
/// `eps(y_t, t, x) = A_t y_t + B_t x + c_t`.
///
/// Every reverse step is then affine, so `y_0 | x` is Gaussian with mean and
/// covariance computable in closed form, along with the exact gradient of
/// `log p(y_0 | x)` in all `(A_t, B_t, c_t)`. The oracle also carries the
/// data map `W` of the ground-truth distribution `y ~ N(Wx, I)` used by the
/// estimator-agreement diagnostics.
///
/// Parameters live in a flat [`ParamVector`] with one `step{t}.a` (row-major
/// `d x d`), `step{t}.b` (row-major `d x d_x`), and `step{t}.c` (`d`) entry
/// per timestep, in chain order `t = 1..=T`.
pub struct LinearDiffusionOracle {
    schedule: NoiseSchedule,
    w: DMatrix<f64>,
    layout: ParamLayout,
}

impl LinearDiffusionOracle {
    pub fn new(schedule: NoiseSchedule, w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "oracle outcome dimension is zero".into(),
            ));
        }
        let (d, x_dim) = (w.nrows(), w.ncols());
        let mut layout = ParamLayout::new();
        for t in 1..=schedule.t_steps() {
            layout.push(format!("step{t}.a"), vec![d, d]);
            layout.push(format!("step{t}.b"), vec![d, x_dim]);
            layout.push(format!("step{t}.c"), vec![d]);
        }
        Ok(Self {
            schedule,
            w,
            layout,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn y_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn x_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn data_map(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    /// Uniform random parameters in `[-scale, scale]`.
    pub fn random_params<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> ParamVector {
        let mut p = self.zero_params();
        for v in &mut p.values {
            *v = rng.random_range(-scale..scale);
        }
        p
    }

    /// The affine model minimizing every per-step denoising objective for
    /// the ground-truth data `y ~ N(Wx, I)`. Noising that data gives
    /// `y_t | x ~ N(sqrt(abar_t) Wx, I)` jointly Gaussian with the injected
    /// noise, so the conditional expectation `E[eps | y_t, x]` is affine:
    /// `A_t = sqrt(1 - abar_t) I`, `B_t = -sqrt(abar_t (1 - abar_t)) W`,
    /// `c_t = 0`.
    pub fn fitted_params(&self) -> ParamVector {
        let d = self.y_dim();
        let x_dim = self.x_dim();
        let mut p = self.zero_params();
        for t in 1..=self.schedule.t_steps() {
            let abar = self.schedule.alpha_bar(t);
            let a = p.tensor_mut(&format!("step{t}.a")).expect("step tensor");
            for i in 0..d {
                a[i * d + i] = (1.0 - abar).sqrt();
            }
            let b = p.tensor_mut(&format!("step{t}.b")).expect("step tensor");
            let scale = -(abar * (1.0 - abar)).sqrt();
            for i in 0..d {
                for j in 0..x_dim {
                    b[i * x_dim + j] = scale * self.w[(i, j)];
                }
            }
        }
        p
    }

    /// One draw from the ground-truth distribution `y ~ N(Wx, I)`.
    pub fn data_sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if x.len() != self.x_dim() {
            return Err(Error::dim("oracle context", self.x_dim(), x.len()));
        }
        let base = &self.w * DVector::from_column_slice(x);
        Ok(base
            .iter()
            .map(|b| b + rng.sample::<f64, _>(StandardNormal))
            .collect())
    }

    /// The affine noise prediction `A_t y_t + B_t x + c_t`.
    pub fn predict(
        &self,
        params: &ParamVector,
        y_t: &[f64],
        t: usize,
        x: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_inputs(params, x)?;
        if y_t.len() != self.y_dim() {
            return Err(Error::dim("oracle state", self.y_dim(), y_t.len()));
        }
        let (a, b, c) = self.step_params(params, t);
        let out = a * DVector::from_column_slice(y_t)
            + b * DVector::from_column_slice(x)
            + c;
        Ok(out.iter().cloned().collect())
    }

    /// One model draw through the shared reverse sampler.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        x: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_inputs(params, x)?;
        let noises = draw_noises(self.y_dim(), self.schedule.t_steps(), rng);
        let traj = reverse_sample_with(
            |y_t, t| self.predict(params, y_t, t, x),
            self.y_dim(),
            x.to_vec(),
            &self.schedule,
            noises,
        )?;
        Ok(traj.y0().to_vec())
    }

    /// Closed-form mean and covariance of `y_0 | x` under the affine chain:
    /// `y_T ~ N(0, I)` propagated through `y_{t-1} = L_t y_t + m_t + sigma_t xi`
    /// with `L_t = (I - k_t A_t)/sqrt(alpha_t)` and
    /// `m_t = -(k_t/sqrt(alpha_t))(B_t x + c_t)`; the final step adds no noise.
    pub fn density(&self, params: &ParamVector, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let chain = self.propagate(params, x)?;
        Ok((chain.means[0].clone(), chain.covs[0].clone()))
    }

    /// Gaussian log density of `y_0 | x`; the covariance must be positive
    /// definite.
    pub fn log_density(&self, params: &ParamVector, x: &[f64], y0: &[f64]) -> Result<f64> {
        if y0.len() != self.y_dim() {
            return Err(Error::dim("oracle outcome", self.y_dim(), y0.len()));
        }
        let (mean, cov) = self.density(params, x)?;
        let chol = Cholesky::new(cov).ok_or(Error::CovarianceNotPd {
            context: "oracle log density".into(),
        })?;
        let resid = DVector::from_column_slice(y0) - mean;
        let half_maha = 0.5 * resid.dot(&chol.solve(&resid));
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let d = self.y_dim() as f64;
        Ok(-0.5 * d * (2.0 * std::f64::consts::PI).ln() - log_det - half_maha)
    }

    /// Exact gradient of `log p(y_0 | x)` in every `(A_t, B_t, c_t)`,
    /// obtained by differentiating the composed Gaussian mean and covariance.
    pub fn score(&self, params: &ParamVector, x: &[f64], y0: &[f64]) -> Result<ParamVector> {
        if y0.len() != self.y_dim() {
            return Err(Error::dim("oracle outcome", self.y_dim(), y0.len()));
        }
        let chain = self.propagate(params, x)?;
        let d = self.y_dim();
        let x_dim = self.x_dim();
        let t_steps = self.schedule.t_steps();

        let mean = &chain.means[0];
        let cov = chain.covs[0].clone();
        let chol = Cholesky::new(cov).ok_or(Error::CovarianceNotPd {
            context: "oracle score".into(),
        })?;
        let resid = DVector::from_column_slice(y0) - mean;
        let r = chol.solve(&resid);
        let cov_inv = chol.inverse();

        // Prefix maps M_s = L_1 L_2 ... L_{s-1}: the sensitivity of the final
        // mean to an injection made just after step s.
        let mut prefixes: Vec<DMatrix<f64>> = Vec::with_capacity(t_steps + 1);
        prefixes.push(DMatrix::zeros(0, 0));
        prefixes.push(DMatrix::identity(d, d));
        for s in 2..=t_steps {
            let m = &prefixes[s - 1] * &chain.ls[s - 1];
            prefixes.push(m);
        }

        let mut grad = self.zero_params();
        for s in 1..=t_steps {
            let coeff = chain.coeffs[s];
            let m_s = &prefixes[s];
            // q[i] = r^T M_s[:, i]; the mean response of every step-s shift.
            let q = m_s.transpose() * &r;
            // N_s[:, j] tracks how column j of A_s perturbs the covariance.
            let n_s = m_s * &chain.ls[s] * &chain.covs[s];
            let p = n_s.transpose() * &r;
            let trace_block = n_s.transpose() * &cov_inv * m_s;
            let mu_s = &chain.means[s];

            let a = grad
                .tensor_mut(&format!("step{s}.a"))
                .expect("layout owns step tensors");
            for i in 0..d {
                for j in 0..d {
                    a[i * d + j] = coeff * (mu_s[j] * q[i] + q[i] * p[j] - trace_block[(j, i)]);
                }
            }
            let b = grad
                .tensor_mut(&format!("step{s}.b"))
                .expect("layout owns step tensors");
            for i in 0..d {
                for j in 0..x_dim {
                    b[i * x_dim + j] = coeff * q[i] * x[j];
                }
            }
            let c = grad
                .tensor_mut(&format!("step{s}.c"))
                .expect("layout owns step tensors");
            for (i, slot) in c.iter_mut().enumerate() {
                *slot = coeff * q[i];
            }
        }
        Ok(grad)
    }

    /// Monte Carlo estimate of the denoising-objective gradient pointed in
    /// the log-likelihood direction: `draws` uniform timesteps, one forward
    /// noising each, averaged negative gradient of `|eps - eps_hat|^2`. This
    /// is the surrogate the score-function estimator relies on; comparing it
    /// against [`Self::score`] certifies its direction quality.
    pub fn elbo_score_estimate<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        x: &[f64],
        y0: &[f64],
        draws: usize,
        rng: &mut R,
    ) -> Result<ParamVector> {
        self.check_inputs(params, x)?;
        if y0.len() != self.y_dim() {
            return Err(Error::dim("oracle outcome", self.y_dim(), y0.len()));
        }
        if draws == 0 {
            return Err(Error::InvalidArgument(
                "elbo_score_estimate needs at least one draw".into(),
            ));
        }
        let d = self.y_dim();
        let x_dim = self.x_dim();
        let t_steps = self.schedule.t_steps();
        let mut grad = self.zero_params();
        for _ in 0..draws {
            let t = rng.random_range(1..=t_steps);
            let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let y_t = forward_noise(&self.schedule, y0, t, &eps)?;
            let eps_hat = self.predict(params, &y_t, t, x)?;
            // d|eps - eps_hat|^2 / d eps_hat, negated into ascent direction.
            let g: Vec<f64> = eps_hat
                .iter()
                .zip(eps.iter())
                .map(|(p, e)| -2.0 * (p - e))
                .collect();
            let a = grad.tensor_mut(&format!("step{t}.a")).expect("step tensor");
            for i in 0..d {
                for j in 0..d {
                    a[i * d + j] += g[i] * y_t[j];
                }
            }
            let b = grad.tensor_mut(&format!("step{t}.b")).expect("step tensor");
            for i in 0..d {
                for j in 0..x_dim {
                    b[i * x_dim + j] += g[i] * x[j];
                }
            }
            let c = grad.tensor_mut(&format!("step{t}.c")).expect("step tensor");
            for (i, slot) in c.iter_mut().enumerate() {
                *slot += g[i];
            }
        }
        for v in &mut grad.values {
            *v /= draws as f64;
        }
        Ok(grad)
    }

    /// Exact expectation of [`Self::elbo_score_estimate`] over timesteps and
    /// forward noise: the infinite-draw limit of the surrogate. With
    /// `y_t = sqrt(abar_t) y0 + sqrt(1-abar_t) eps` the residual
    /// `eps_hat - eps` is affine in `eps`, so each per-step expectation is a
    /// one-line Gaussian moment.
    pub fn elbo_score_expectation(
        &self,
        params: &ParamVector,
        x: &[f64],
        y0: &[f64],
    ) -> Result<ParamVector> {
        self.check_inputs(params, x)?;
        if y0.len() != self.y_dim() {
            return Err(Error::dim("oracle outcome", self.y_dim(), y0.len()));
        }
        let d = self.y_dim();
        let x_dim = self.x_dim();
        let t_steps = self.schedule.t_steps();
        let y0v = DVector::from_column_slice(y0);
        let xv = DVector::from_column_slice(x);
        let mut grad = self.zero_params();
        for t in 1..=t_steps {
            let (a, b, c) = self.step_params(params, t);
            let abar = self.schedule.alpha_bar(t);
            let root_abar = abar.sqrt();
            let root_res = (1.0 - abar).sqrt();
            // E[g] with g = -2(eps_hat - eps); the eps terms average out of
            // the mean but not out of E[g eps^T].
            let mean_y_t = &y0v * root_abar;
            let g_mean = (&a * &mean_y_t + &b * &xv + &c) * -2.0;
            let g_eps = (&a * root_res - DMatrix::identity(d, d)) * -2.0;

            let a_grad = &g_mean * mean_y_t.transpose() + &g_eps * root_res;
            let slot = grad.tensor_mut(&format!("step{t}.a")).expect("step tensor");
            for i in 0..d {
                for j in 0..d {
                    slot[i * d + j] += a_grad[(i, j)] / t_steps as f64;
                }
            }
            let b_grad = &g_mean * xv.transpose();
            let slot = grad.tensor_mut(&format!("step{t}.b")).expect("step tensor");
            for i in 0..d {
                for j in 0..x_dim {
                    slot[i * x_dim + j] += b_grad[(i, j)] / t_steps as f64;
                }
            }
            let slot = grad.tensor_mut(&format!("step{t}.c")).expect("step tensor");
            for (i, v) in slot.iter_mut().enumerate() {
                *v += g_mean[i] / t_steps as f64;
            }
        }
        Ok(grad)
    }

    fn check_inputs(&self, params: &ParamVector, x: &[f64]) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::dim("oracle parameters", self.layout.len(), params.len()));
        }
        if x.len() != self.x_dim() {
            return Err(Error::dim("oracle context", self.x_dim(), x.len()));
        }
        Ok(())
    }

    fn step_params(
        &self,
        params: &ParamVector,
        t: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let d = self.y_dim();
        let x_dim = self.x_dim();
        let a = DMatrix::from_row_slice(
            d,
            d,
            params.tensor(&format!("step{t}.a")).expect("step tensor"),
        );
        let b = DMatrix::from_row_slice(
            d,
            x_dim,
            params.tensor(&format!("step{t}.b")).expect("step tensor"),
        );
        let c = DVector::from_column_slice(
            params.tensor(&format!("step{t}.c")).expect("step tensor"),
        );
        (a, b, c)
    }

    /// Runs the affine chain once, keeping every per-level Gaussian and the
    /// per-step maps (index `t`; level arrays run 0..=T).
    fn propagate(&self, params: &ParamVector, x: &[f64]) -> Result<PropagatedChain> {
        self.check_inputs(params, x)?;
        let d = self.y_dim();
        let t_steps = self.schedule.t_steps();
        let xv = DVector::from_column_slice(x);

        let mut means = vec![DVector::zeros(d); t_steps + 1];
        let mut covs = vec![DMatrix::zeros(d, d); t_steps + 1];
        let mut ls = vec![DMatrix::zeros(0, 0); t_steps + 1];
        let mut coeffs = vec![0.0; t_steps + 1];
        covs[t_steps] = DMatrix::identity(d, d);

        for t in (1..=t_steps).rev() {
            let (a, b, c) = self.step_params(params, t);
            let inv = 1.0 / self.schedule.alpha(t).sqrt();
            let coeff = -inv * self.schedule.eps_coefficient(t);
            let l = DMatrix::identity(d, d) * inv + &a * coeff;
            let m = (&b * &xv + &c) * coeff;
            means[t - 1] = &l * &means[t] + m;
            covs[t - 1] = &l * &covs[t] * l.transpose();
            if t > 1 {
                let s2 = self.schedule.sigma(t) * self.schedule.sigma(t);
                for i in 0..d {
                    covs[t - 1][(i, i)] += s2;
                }
            }
            ls[t] = l;
            coeffs[t] = coeff;
        }
        Ok(PropagatedChain {
            means,
            covs,
            ls,
            coeffs,
        })
    }
}

struct PropagatedChain {
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    ls: Vec<DMatrix<f64>>,
    coeffs: Vec<f64>,
}
