//! Prediction-only training losses for the three predictor families.
//!
//! Two-stage pipelines fit the predictive model to labelled outcomes first
//! and hand samples to the decision layer only afterwards, in contrast to the
//! decision-focused estimators in [`crate::estimators`] that differentiate
//! through the decision itself. Each family gets its natural fitting
//! objective: squared error for the point network, the exact negative log
//! likelihood for the Gaussian head, and the simplified denoising objective
//! at a uniformly drawn timestep for the diffusion model.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{elbo_simplified_grad, sample_y0, EpsilonModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::estimators::GaussianPredictor;
use crate::nn::{Activation, DenseNet, ParamLayout, ParamVector};

/// Fitting objective minimized during two-stage training. Batch losses use a
/// mean reduction; see [`two_stage_batch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoStageLoss {
    /// Squared error `|y_hat - y|^2` against the label.
    Mse,
    /// Gaussian negative log likelihood
    /// `((y - mu)' S^-1 (y - mu) + log det S + d log 2pi) / 2`.
    GaussianNll,
    /// Single-term denoising objective `|eps_hat - eps|^2` at one uniformly
    /// drawn timestep.
    Denoising,
}

impl TwoStageLoss {
    /// Name of the predictor family this loss fits.
    pub fn family(self) -> &'static str {
        match self {
            TwoStageLoss::Mse => "deterministic",
            TwoStageLoss::GaussianNll => "gaussian",
            TwoStageLoss::Denoising => "diffusion",
        }
    }
}

impl fmt::Display for TwoStageLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TwoStageLoss::Mse => "mse",
            TwoStageLoss::GaussianNll => "gaussian-nll",
            TwoStageLoss::Denoising => "denoising",
        };
        f.write_str(name)
    }
}

/// Predictive model from one of the three families under comparison.
#[derive(Debug, Clone)]
pub enum Predictor {
    /// Point predictor mapping features straight to one outcome.
    Deterministic { net: DenseNet, layout: ParamLayout },
    /// Conditional Gaussian with learned mean and diagonal log variance.
    Gaussian(GaussianPredictor),
    /// Conditional denoising diffusion model paired with its noise schedule.
    Diffusion {
        model: EpsilonModel,
        schedule: NoiseSchedule,
    },
}

impl Predictor {
    /// Point predictor `x -> y` as a SiLU net with the given hidden widths.
    pub fn deterministic(x_dim: usize, y_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(x_dim);
        widths.extend_from_slice(hidden);
        widths.push(y_dim);
        let mut layout = ParamLayout::new();
        let net = DenseNet::new(&mut layout, "net", &widths, Activation::Silu)?;
        Ok(Predictor::Deterministic { net, layout })
    }

    pub fn family(&self) -> &'static str {
        match self {
            Predictor::Deterministic { .. } => "deterministic",
            Predictor::Gaussian(_) => "gaussian",
            Predictor::Diffusion { .. } => "diffusion",
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        match self {
            Predictor::Deterministic { layout, .. } => layout,
            Predictor::Gaussian(pred) => pred.layout(),
            Predictor::Diffusion { model, .. } => model.layout(),
        }
    }

    pub fn x_dim(&self) -> usize {
        match self {
            Predictor::Deterministic { net, .. } => net.in_dim(),
            Predictor::Gaussian(pred) => pred.x_dim(),
            Predictor::Diffusion { model, .. } => model.x_dim(),
        }
    }

    pub fn y_dim(&self) -> usize {
        match self {
            Predictor::Deterministic { net, .. } => net.out_dim(),
            Predictor::Gaussian(pred) => pred.y_dim(),
            Predictor::Diffusion { model, .. } => model.y_dim(),
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        match self {
            Predictor::Deterministic { net, layout } => {
                let mut params = ParamVector::zeros(layout.clone());
                net.init(&mut params.values, rng);
                params
            }
            Predictor::Gaussian(pred) => pred.init_params(rng),
            Predictor::Diffusion { model, .. } => model.init_params(rng),
        }
    }

    /// Draws one outcome from the predictive distribution; the deterministic
    /// family returns its point prediction.
    pub fn sample(&self, params: &[f64], x: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        match self {
            Predictor::Deterministic { net, .. } => net.forward(params, x),
            Predictor::Gaussian(pred) => pred.sample(params, x, rng),
            Predictor::Diffusion { model, schedule } => {
                sample_y0(model, params, x, schedule, rng)
            }
        }
    }
}

/// Loss value and parameter gradient for one labelled example.
///
/// Only the denoising loss consumes randomness: one uniform timestep followed
/// by one standard normal noise vector, so cloning the RNG replays the exact
/// same loss.
pub fn two_stage_loss(
    kind: TwoStageLoss,
    predictor: &Predictor,
    params: &[f64],
    x: &[f64],
    y_label: &[f64],
    rng: &mut impl Rng,
) -> Result<(f64, ParamVector)> {
    if y_label.len() != predictor.y_dim() {
        return Err(Error::dim(
            "two-stage label",
            predictor.y_dim(),
            y_label.len(),
        ));
    }
    let mut grad = ParamVector::zeros(predictor.layout().clone());
    let value = match (kind, predictor) {
        (TwoStageLoss::Mse, Predictor::Deterministic { net, .. }) => {
            let y_hat = net.forward(params, x)?;
            let cot: Vec<f64> = y_hat
                .iter()
                .zip(y_label)
                .map(|(p, y)| 2.0 * (p - y))
                .collect();
            net.vjp(params, x, &cot, &mut grad.values)?;
            y_hat
                .iter()
                .zip(y_label)
                .map(|(p, y)| (p - y) * (p - y))
                .sum()
        }
        (TwoStageLoss::GaussianNll, Predictor::Gaussian(pred)) => {
            -pred.log_density_grad(params, x, y_label, -1.0, &mut grad.values)?
        }
        (TwoStageLoss::Denoising, Predictor::Diffusion { model, schedule }) => {
            let t = rng.random_range(1..=schedule.t_steps());
            let eps: Vec<f64> = (0..model.y_dim())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            elbo_simplified_grad(
                model,
                params,
                schedule,
                y_label,
                x,
                t,
                &eps,
                1.0,
                &mut grad.values,
            )?
        }
        (kind, _) => {
            return Err(Error::FamilyMismatch {
                loss: kind.to_string(),
                expected: kind.family(),
            });
        }
    };
    Ok((value, grad))
}

/// Mean loss and gradient over a labelled batch, reduced in iteration order.
pub fn two_stage_batch(
    kind: TwoStageLoss,
    predictor: &Predictor,
    params: &[f64],
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<(f64, ParamVector)> {
    if xs.len() != ys.len() {
        return Err(Error::dim("two-stage batch labels", xs.len(), ys.len()));
    }
    if xs.is_empty() {
        return Err(Error::InvalidArgument("two-stage batch is empty".into()));
    }
    let mut grad = ParamVector::zeros(predictor.layout().clone());
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let (value, g) = two_stage_loss(kind, predictor, params, x, y, rng)?;
        total += value;
        for (acc, gi) in grad.values.iter_mut().zip(g.values.iter()) {
            *acc += gi;
        }
    }
    let scale = 1.0 / xs.len() as f64;
    for g in grad.values.iter_mut() {
        *g *= scale;
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;
    use crate::validation::{fd_grad, DEFAULT_FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(got: &[f64], want: &[f64]) -> f64 {
        let denom = want.iter().fold(1e-12_f64, |m, v| m.max(v.abs()));
        got.iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max)
            / denom
    }

    fn random_params(pred: &Predictor, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = pred.init_params(&mut rng);
        for v in params.values.iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        params
    }

    #[test]
    fn loss_names_and_families() {
        assert_eq!(TwoStageLoss::Mse.to_string(), "mse");
        assert_eq!(TwoStageLoss::GaussianNll.to_string(), "gaussian-nll");
        assert_eq!(TwoStageLoss::Denoising.to_string(), "denoising");
        assert_eq!(TwoStageLoss::Mse.family(), "deterministic");
        assert_eq!(TwoStageLoss::GaussianNll.family(), "gaussian");
        assert_eq!(TwoStageLoss::Denoising.family(), "diffusion");
    }

    #[test]
    fn mse_is_zero_when_the_prediction_matches_the_label() {
        let pred = Predictor::deterministic(2, 3, &[4]).unwrap();
        let params = random_params(&pred, 31);
        let x = [0.4, -1.1];
        let label = match &pred {
            Predictor::Deterministic { net, .. } => net.forward(&params.values, &x).unwrap(),
            _ => unreachable!(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (value, grad) =
            two_stage_loss(TwoStageLoss::Mse, &pred, &params.values, &x, &label, &mut rng)
                .unwrap();
        assert_eq!(value, 0.0);
        assert!(grad.values.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gaussian_nll_at_the_mean_with_unit_variance_is_the_log_normalizer() {
        let pred = Predictor::Gaussian(GaussianPredictor::new(1, 2, &[3]).unwrap());
        let params = ParamVector::zeros(pred.layout().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (value, _) = two_stage_loss(
            TwoStageLoss::GaussianNll,
            &pred,
            &params.values,
            &[0.5],
            &[0.0, 0.0],
            &mut rng,
        )
        .unwrap();
        let expected = (2.0 * std::f64::consts::PI).ln();
        assert!((value - expected).abs() <= 1e-12);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let pred = Predictor::deterministic(2, 2, &[5]).unwrap();
        let params = random_params(&pred, 37);
        let x = vec![0.8, -0.2];
        let label = vec![1.3, -0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, grad) =
            two_stage_loss(TwoStageLoss::Mse, &pred, &params.values, &x, &label, &mut rng)
                .unwrap();
        let fd = fd_grad(
            |theta| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                two_stage_loss(TwoStageLoss::Mse, &pred, &theta.values, &x, &label, &mut rng)
                    .map(|(v, _)| v)
            },
            &params,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(rel_err(&grad.values, &fd.values) < 1e-5);
    }

    #[test]
    fn gaussian_nll_gradient_matches_finite_differences() {
        let pred = Predictor::Gaussian(GaussianPredictor::new(2, 2, &[5]).unwrap());
        let params = random_params(&pred, 41);
        let x = vec![0.3, 0.9];
        let label = vec![-0.4, 1.1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (value, grad) = two_stage_loss(
            TwoStageLoss::GaussianNll,
            &pred,
            &params.values,
            &x,
            &label,
            &mut rng,
        )
        .unwrap();
        let logp = match &pred {
            Predictor::Gaussian(g) => g.log_density(&params.values, &x, &label).unwrap(),
            _ => unreachable!(),
        };
        assert!((value + logp).abs() <= 1e-12);
        let fd = fd_grad(
            |theta| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                two_stage_loss(
                    TwoStageLoss::GaussianNll,
                    &pred,
                    &theta.values,
                    &x,
                    &label,
                    &mut rng,
                )
                .map(|(v, _)| v)
            },
            &params,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(rel_err(&grad.values, &fd.values) < 1e-5);
    }

    #[test]
    fn denoising_gradient_matches_finite_differences() {
        let sched = build_schedule(4, 1e-2, 5e-2).unwrap();
        let model = EpsilonModel::new(2, 1, 6, 6, &[8]).unwrap();
        let pred = Predictor::Diffusion {
            model,
            schedule: sched,
        };
        let params = random_params(&pred, 43);
        let x = vec![0.6];
        let label = vec![0.9, -1.4];
        let base = ChaCha8Rng::seed_from_u64(47);
        let (_, grad) = two_stage_loss(
            TwoStageLoss::Denoising,
            &pred,
            &params.values,
            &x,
            &label,
            &mut base.clone(),
        )
        .unwrap();
        let fd = fd_grad(
            |theta| {
                two_stage_loss(
                    TwoStageLoss::Denoising,
                    &pred,
                    &theta.values,
                    &x,
                    &label,
                    &mut base.clone(),
                )
                .map(|(v, _)| v)
            },
            &params,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(rel_err(&grad.values, &fd.values) < 1e-5);
    }

    #[test]
    fn denoising_replays_exactly_under_a_cloned_rng() {
        let sched = build_schedule(6, 1e-2, 5e-2).unwrap();
        let model = EpsilonModel::new(1, 0, 4, 4, &[6]).unwrap();
        let pred = Predictor::Diffusion {
            model,
            schedule: sched,
        };
        let params = random_params(&pred, 53);
        let base = ChaCha8Rng::seed_from_u64(59);
        let (v1, g1) = two_stage_loss(
            TwoStageLoss::Denoising,
            &pred,
            &params.values,
            &[],
            &[0.7],
            &mut base.clone(),
        )
        .unwrap();
        let (v2, g2) = two_stage_loss(
            TwoStageLoss::Denoising,
            &pred,
            &params.values,
            &[],
            &[0.7],
            &mut base.clone(),
        )
        .unwrap();
        assert_eq!(v1, v2);
        assert_eq!(g1.values, g2.values);
    }

    #[test]
    fn mismatched_families_are_rejected() {
        let det = Predictor::deterministic(1, 1, &[3]).unwrap();
        let gauss = Predictor::Gaussian(GaussianPredictor::new(1, 1, &[3]).unwrap());
        let diff = Predictor::Diffusion {
            model: EpsilonModel::new(1, 1, 4, 4, &[3]).unwrap(),
            schedule: build_schedule(3, 1e-2, 5e-2).unwrap(),
        };
        let params = ParamVector::zeros(gauss.layout().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = two_stage_loss(
            TwoStageLoss::Mse,
            &gauss,
            &params.values,
            &[0.0],
            &[0.0],
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::FamilyMismatch { .. }));

        let params = ParamVector::zeros(diff.layout().clone());
        let err = two_stage_loss(
            TwoStageLoss::GaussianNll,
            &diff,
            &params.values,
            &[0.0],
            &[0.0],
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::FamilyMismatch { .. }));

        let params = ParamVector::zeros(det.layout().clone());
        let err = two_stage_loss(
            TwoStageLoss::Denoising,
            &det,
            &params.values,
            &[0.0],
            &[0.0],
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::FamilyMismatch { .. }));
    }

    #[test]
    fn batch_loss_is_the_mean_of_per_example_losses() {
        let pred = Predictor::deterministic(1, 2, &[4]).unwrap();
        let params = random_params(&pred, 61);
        let xs = vec![vec![0.2], vec![-0.9], vec![1.5]];
        let ys = vec![vec![0.1, 0.4], vec![-1.0, 0.0], vec![2.0, -0.5]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (value, grad) =
            two_stage_batch(TwoStageLoss::Mse, &pred, &params.values, &xs, &ys, &mut rng)
                .unwrap();

        let mut total = 0.0;
        let mut manual = ParamVector::zeros(pred.layout().clone());
        for (x, y) in xs.iter().zip(&ys) {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (v, g) =
                two_stage_loss(TwoStageLoss::Mse, &pred, &params.values, x, y, &mut rng).unwrap();
            total += v;
            for (acc, gi) in manual.values.iter_mut().zip(g.values.iter()) {
                *acc += gi;
            }
        }
        let scale = 1.0 / xs.len() as f64;
        assert_eq!(value, total * scale);
        for (b, m) in grad.values.iter().zip(manual.values.iter()) {
            assert_eq!(*b, m * scale);
        }
    }

    #[test]
    fn predictor_sampling_covers_all_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let det = Predictor::deterministic(1, 2, &[3]).unwrap();
        let params = det.init_params(&mut rng);
        let point = det.sample(&params.values, &[0.5], &mut rng).unwrap();
        assert_eq!(point.len(), 2);

        let gauss = Predictor::Gaussian(GaussianPredictor::new(1, 2, &[3]).unwrap());
        let params = gauss.init_params(&mut rng);
        assert_eq!(gauss.sample(&params.values, &[0.5], &mut rng).unwrap().len(), 2);

        let diff = Predictor::Diffusion {
            model: EpsilonModel::new(2, 1, 4, 4, &[5]).unwrap(),
            schedule: build_schedule(3, 1e-2, 5e-2).unwrap(),
        };
        let params = diff.init_params(&mut rng);
        assert_eq!(diff.sample(&params.values, &[0.5], &mut rng).unwrap().len(), 2);
    }
}
