//! Benchmark decision problems, synthetic data generators, and CSV datasets.
//!
//! Four convex tasks exercise the decision layer: production planning with an
//! exponential revenue cost, 24-hour generation scheduling with asymmetric
//! hinge penalties and ramp limits, portfolio allocation on the simplex, and
//! scalar inventory control with linear-plus-cubic shortage and holding
//! costs. Each task implements [`CostModel`] with analytic derivatives and
//! exposes its feasible region through a `constraints` builder.
//!
//! Outcomes are drawn from diagonal Gaussian mixtures, optionally shifted by
//! a linear map of context features (`y = W x + intercept + noise`), and
//! datasets round-trip through a small CSV format whose header carries the
//! feature and label dimensions.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::decision::{AffineConstraints, CostModel};
use crate::error::{Error, Result};

/// Production planning: revenue `exp(-y^T z)` for unit margins `y` and
/// per-product quantities `z` in `[0, capacity]`.
#[derive(Debug, Clone)]
pub struct FactoryTask {
    pub products: usize,
    pub capacity: f64,
}

impl FactoryTask {
    pub const DEFAULT_CAPACITY: f64 = 2.0;

    pub fn new(products: usize) -> Result<Self> {
        Self::with_capacity(products, Self::DEFAULT_CAPACITY)
    }

    pub fn with_capacity(products: usize, capacity: f64) -> Result<Self> {
        if products == 0 {
            return Err(Error::InvalidArgument(
                "factory task needs at least one product".into(),
            ));
        }
        if !(capacity > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "factory capacity must be positive, got {capacity}"
            )));
        }
        Ok(Self { products, capacity })
    }

    /// Box `0 <= z <= capacity` per product.
    pub fn constraints(&self) -> AffineConstraints {
        AffineConstraints::bounds(
            &vec![0.0; self.products],
            &vec![self.capacity; self.products],
        )
        .expect("matching bound lengths")
    }
}

impl CostModel for FactoryTask {
    fn value(&self, y: &[f64], z: &[f64]) -> f64 {
        (-dot(y, z)).exp()
    }

    fn grad_z(&self, y: &[f64], z: &[f64]) -> Vec<f64> {
        let e = self.value(y, z);
        y.iter().map(|v| -e * v).collect()
    }

    fn hess_zz(&self, y: &[f64], z: &[f64]) -> DMatrix<f64> {
        let e = self.value(y, z);
        let d = y.len();
        DMatrix::from_fn(d, d, |i, j| e * y[i] * y[j])
    }

    fn hess_zy(&self, y: &[f64], z: &[f64]) -> DMatrix<f64> {
        let e = self.value(y, z);
        let d = y.len();
        DMatrix::from_fn(d, d, |i, j| {
            let outer = y[i] * z[j];
            let eye = if i == j { 1.0 } else { 0.0 };
            e * (outer - eye)
        })
    }
}

/// Generation scheduling over a fixed horizon: per-hour shortage and excess
/// hinges plus quadratic tracking, with ramp limits between adjacent hours.
#[derive(Debug, Clone)]
pub struct PowerTask {
    pub horizon: usize,
    pub shortage_penalty: f64,
    pub excess_penalty: f64,
    pub ramp_limit: f64,
}

impl PowerTask {
    pub const DEFAULT_HORIZON: usize = 24;

    pub fn new() -> Self {
        Self {
            horizon: Self::DEFAULT_HORIZON,
            shortage_penalty: 50.0,
            excess_penalty: 0.5,
            ramp_limit: 0.4,
        }
    }

    pub fn custom(
        horizon: usize,
        shortage_penalty: f64,
        excess_penalty: f64,
        ramp_limit: f64,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument(
                "scheduling horizon must be at least one hour".into(),
            ));
        }
        if !(shortage_penalty > 0.0) || !(excess_penalty > 0.0) || !(ramp_limit > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "power penalties and ramp limit must be positive, got {shortage_penalty}, \
                 {excess_penalty}, {ramp_limit}"
            )));
        }
        Ok(Self {
            horizon,
            shortage_penalty,
            excess_penalty,
            ramp_limit,
        })
    }

    /// Ramp rows `|z_{i+1} - z_i| <= ramp_limit` (two rows per adjacent
    /// pair). An infinite ramp limit drops the constraints entirely.
    pub fn constraints(&self) -> AffineConstraints {
        let d = self.horizon;
        if self.ramp_limit.is_infinite() || d < 2 {
            return AffineConstraints::unconstrained(d);
        }
        let rows = 2 * (d - 1);
        let mut g = DMatrix::zeros(rows, d);
        let h = DVector::from_element(rows, self.ramp_limit);
        for i in 0..d - 1 {
            g[(2 * i, i + 1)] = 1.0;
            g[(2 * i, i)] = -1.0;
            g[(2 * i + 1, i + 1)] = -1.0;
            g[(2 * i + 1, i)] = 1.0;
        }
        AffineConstraints::inequalities(g, h).expect("matching ramp dimensions")
    }
}

impl Default for PowerTask {
    fn default() -> Self {
        Self::new()
    }
}

impl CostModel for PowerTask {
    fn value(&self, y: &[f64], z: &[f64]) -> f64 {
        y.iter()
            .zip(z.iter())
            .map(|(a, b)| {
                self.shortage_penalty * (a - b).max(0.0)
                    + self.excess_penalty * (b - a).max(0.0)
                    + 0.5 * (b - a) * (b - a)
            })
            .sum()
    }

    fn grad_z(&self, y: &[f64], z: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(z.iter())
            .map(|(a, b)| {
                let mut g = b - a;
                if a > b {
                    g -= self.shortage_penalty;
                }
                if b > a {
                    g += self.excess_penalty;
                }
                g
            })
            .collect()
    }

    fn hess_zz(&self, y: &[f64], _z: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(y.len(), y.len())
    }

    fn hess_zy(&self, y: &[f64], _z: &[f64]) -> DMatrix<f64> {
        -DMatrix::identity(y.len(), y.len())
    }

    fn grad_z_interval(&self, y: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let bound = |include_eq: bool| -> Vec<f64> {
            y.iter()
                .zip(z.iter())
                .map(|(a, b)| {
                    let mut g = b - a;
                    let shortage = if include_eq { a >= b } else { a > b };
                    let excess = if include_eq { b > a } else { b >= a };
                    if shortage {
                        g -= self.shortage_penalty;
                    }
                    if excess {
                        g += self.excess_penalty;
                    }
                    g
                })
                .collect()
        };
        (bound(true), bound(false))
    }

    fn grad_kinks(&self, y: &[f64]) -> Vec<(usize, f64)> {
        y.iter().enumerate().map(|(j, v)| (j, *v)).collect()
    }
}

/// Portfolio allocation on the simplex: `(alpha/2)(y^T z)^2 - y^T z` for
/// returns `y` and weights `z` with `1^T z = 1`, `0 <= z <= 1`.
#[derive(Debug, Clone)]
pub struct PortfolioTask {
    pub assets: usize,
    pub risk_aversion: f64,
}

impl PortfolioTask {
    pub fn new(assets: usize, risk_aversion: f64) -> Result<Self> {
        if assets == 0 {
            return Err(Error::InvalidArgument(
                "portfolio task needs at least one asset".into(),
            ));
        }
        if !(risk_aversion > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "risk aversion must be positive, got {risk_aversion}"
            )));
        }
        Ok(Self {
            assets,
            risk_aversion,
        })
    }

    /// Budget equality `1^T z = 1` plus the box `0 <= z <= 1`.
    pub fn constraints(&self) -> AffineConstraints {
        let n = self.assets;
        let box_part = AffineConstraints::bounds(&vec![0.0; n], &vec![1.0; n])
            .expect("matching bound lengths");
        let a = DMatrix::from_element(1, n, 1.0);
        let b = DVector::from_element(1, 1.0);
        AffineConstraints::new(box_part.g, box_part.h, a, b).expect("matching budget dimensions")
    }
}

impl CostModel for PortfolioTask {
    fn value(&self, y: &[f64], z: &[f64]) -> f64 {
        let s = dot(y, z);
        0.5 * self.risk_aversion * s * s - s
    }

    fn grad_z(&self, y: &[f64], z: &[f64]) -> Vec<f64> {
        let s = dot(y, z);
        y.iter().map(|v| self.risk_aversion * s * v - v).collect()
    }

    fn hess_zz(&self, y: &[f64], _z: &[f64]) -> DMatrix<f64> {
        let n = y.len();
        DMatrix::from_fn(n, n, |i, j| self.risk_aversion * y[i] * y[j])
    }

    fn hess_zy(&self, y: &[f64], z: &[f64]) -> DMatrix<f64> {
        let s = dot(y, z);
        let n = y.len();
        DMatrix::from_fn(n, n, |i, j| {
            let eye = if i == j { 1.0 } else { 0.0 };
            self.risk_aversion * (y[i] * z[j] + s * eye) - eye
        })
    }
}

/// Scalar inventory control on `[0, max_stock]`: ordering cost
/// `c z + (q/2) z^2` plus linear and cubic shortage (`y > z`) and holding
/// (`z > y`) penalties.
#[derive(Debug, Clone)]
pub struct InventoryTask {
    pub order_cost: f64,
    pub order_cost_quad: f64,
    pub shortage_cost: f64,
    pub shortage_cubic: f64,
    pub holding_cost: f64,
    pub holding_cubic: f64,
    pub max_stock: f64,
}

impl InventoryTask {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        order_cost: f64,
        order_cost_quad: f64,
        shortage_cost: f64,
        shortage_cubic: f64,
        holding_cost: f64,
        holding_cubic: f64,
        max_stock: f64,
    ) -> Result<Self> {
        if order_cost_quad < 0.0 || shortage_cubic < 0.0 || holding_cubic < 0.0 {
            return Err(Error::InvalidArgument(
                "inventory quadratic and cubic coefficients must be nonnegative".into(),
            ));
        }
        if shortage_cost < 0.0 || holding_cost < 0.0 {
            return Err(Error::InvalidArgument(
                "inventory shortage and holding costs must be nonnegative".into(),
            ));
        }
        if !(max_stock > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "maximum stock must be positive, got {max_stock}"
            )));
        }
        Ok(Self {
            order_cost,
            order_cost_quad,
            shortage_cost,
            shortage_cubic,
            holding_cost,
            holding_cubic,
            max_stock,
        })
    }

    /// Box `0 <= z <= max_stock`.
    pub fn constraints(&self) -> AffineConstraints {
        AffineConstraints::bounds(&[0.0], &[self.max_stock]).expect("matching bound lengths")
    }
}

impl Default for InventoryTask {
    /// A stock-control desk with mild quadratic ordering cost, cheap
    /// shortages, and expensive holding.
    fn default() -> Self {
        Self {
            order_cost: 0.0,
            order_cost_quad: 0.1,
            shortage_cost: 0.5,
            shortage_cubic: 0.1,
            holding_cost: 6.0,
            holding_cubic: 0.1,
            max_stock: 20.0,
        }
    }
}

impl CostModel for InventoryTask {
    fn value(&self, y: &[f64], z: &[f64]) -> f64 {
        let (y, z) = (y[0], z[0]);
        let short = (y - z).max(0.0);
        let hold = (z - y).max(0.0);
        self.order_cost * z
            + 0.5 * self.order_cost_quad * z * z
            + self.shortage_cost * short
            + self.shortage_cubic / 3.0 * short * short * short
            + self.holding_cost * hold
            + self.holding_cubic / 3.0 * hold * hold * hold
    }

    fn grad_z(&self, y: &[f64], z: &[f64]) -> Vec<f64> {
        let (y, z) = (y[0], z[0]);
        let short = (y - z).max(0.0);
        let hold = (z - y).max(0.0);
        let mut g = self.order_cost + self.order_cost_quad * z;
        if y > z {
            g -= self.shortage_cost;
        }
        if z > y {
            g += self.holding_cost;
        }
        g += -self.shortage_cubic * short * short + self.holding_cubic * hold * hold;
        vec![g]
    }

    fn hess_zz(&self, y: &[f64], z: &[f64]) -> DMatrix<f64> {
        let (y, z) = (y[0], z[0]);
        let short = (y - z).max(0.0);
        let hold = (z - y).max(0.0);
        DMatrix::from_element(
            1,
            1,
            self.order_cost_quad + 2.0 * self.shortage_cubic * short + 2.0 * self.holding_cubic * hold,
        )
    }

    fn hess_zy(&self, y: &[f64], z: &[f64]) -> DMatrix<f64> {
        let (y, z) = (y[0], z[0]);
        let short = (y - z).max(0.0);
        let hold = (z - y).max(0.0);
        DMatrix::from_element(
            1,
            1,
            -2.0 * self.shortage_cubic * short - 2.0 * self.holding_cubic * hold,
        )
    }

    fn grad_z_interval(&self, y: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (yv, zv) = (y[0], z[0]);
        let short = (yv - zv).max(0.0);
        let hold = (zv - yv).max(0.0);
        let smooth = self.order_cost + self.order_cost_quad * zv
            - self.shortage_cubic * short * short
            + self.holding_cubic * hold * hold;
        let mut lo = smooth;
        if yv >= zv {
            lo -= self.shortage_cost;
        }
        if zv > yv {
            lo += self.holding_cost;
        }
        let mut hi = smooth;
        if yv > zv {
            hi -= self.shortage_cost;
        }
        if zv >= yv {
            hi += self.holding_cost;
        }
        (vec![lo], vec![hi])
    }

    fn grad_kinks(&self, y: &[f64]) -> Vec<(usize, f64)> {
        vec![(0, y[0])]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Diagonal Gaussian mixture with component weights summing to one.
#[derive(Debug, Clone)]
pub struct MixtureOfGaussians {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
}

impl MixtureOfGaussians {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return Err(Error::InvalidArgument(
                "mixture needs matching, nonempty weights, means, and stds".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be nonnegative and sum to 1, got total {total}"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("mixture dimension is zero".into()));
        }
        for (mu, sigma) in means.iter().zip(stds.iter()) {
            if mu.len() != dim || sigma.len() != dim {
                return Err(Error::dim("mixture component", dim, mu.len().max(sigma.len())));
            }
            if mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "mixture means".into(),
                });
            }
            if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::InvalidArgument(
                    "mixture stds must be positive and finite".into(),
                ));
            }
        }
        Ok(Self {
            weights,
            means,
            stds,
        })
    }

    /// One-dimensional mixture from `(weight, mean, std)` triples.
    pub fn scalar(components: &[(f64, f64, f64)]) -> Result<Self> {
        let weights = components.iter().map(|c| c.0).collect();
        let means = components.iter().map(|c| vec![c.1]).collect();
        let stds = components.iter().map(|c| vec![c.2]).collect();
        Self::new(weights, means, stds)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// One draw: pick a component by weight, then add diagonal Gaussian
    /// noise around its mean.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut u: f64 = rng.random();
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            if u < *w {
                k = i;
                break;
            }
            u -= w;
        }
        self.means[k]
            .iter()
            .zip(self.stds[k].iter())
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `count` independent draws.
    pub fn sample_n<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// For a scalar mixture, `d` coordinates drawn independently.
    pub fn sample_iid<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Result<Vec<f64>> {
        if self.dim() != 1 {
            return Err(Error::dim("iid coordinate sampling", 1, self.dim()));
        }
        Ok((0..d).map(|_| self.sample(rng)[0]).collect())
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for (w, mu) in self.weights.iter().zip(self.means.iter()) {
            for i in 0..d {
                m[i] += w * mu[i];
            }
        }
        m
    }

    /// Per-coordinate variance `sum_k w_k (s_k^2 + mu_k^2) - mean^2`.
    pub fn variance(&self) -> Vec<f64> {
        let d = self.dim();
        let mean = self.mean();
        let mut v = vec![0.0; d];
        for k in 0..self.weights.len() {
            for i in 0..d {
                let s = self.stds[k][i];
                let mu = self.means[k][i];
                v[i] += self.weights[k] * (s * s + mu * mu);
            }
        }
        for i in 0..d {
            v[i] -= mean[i] * mean[i];
        }
        v
    }
}

/// Two-component unit-margin mixture used by the production-planning
/// benchmark: `0.8 N(1, 0.15^2) + 0.2 N(-3, 0.15^2)` per coordinate.
pub fn factory_margin_mixture() -> MixtureOfGaussians {
    MixtureOfGaussians::scalar(&[(0.8, 1.0, 0.15), (0.2, -3.0, 0.15)])
        .expect("hardcoded mixture is valid")
}

/// Three-mode demand-shift mixture used by the inventory benchmark: modes at
/// -4, 0, and 4 with stds 0.15, 0.25, 0.15 and caller-chosen weights.
pub fn inventory_shift_mixture(weights: &[f64]) -> Result<MixtureOfGaussians> {
    if weights.len() != 3 {
        return Err(Error::dim("demand-shift mixture weights", 3, weights.len()));
    }
    MixtureOfGaussians::new(
        weights.to_vec(),
        vec![vec![-4.0], vec![0.0], vec![4.0]],
        vec![vec![0.15], vec![0.25], vec![0.15]],
    )
}

/// Conditional outcome generator `y = W x + intercept + mixture noise`, with
/// features drawn iid uniform on a fixed range. A scalar noise mixture is
/// applied independently per coordinate; otherwise its dimension must match
/// the label dimension.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    w: DMatrix<f64>,
    intercept: DVector<f64>,
    noise: MixtureOfGaussians,
    feature_low: f64,
    feature_high: f64,
}

impl SyntheticGenerator {
    pub fn new(w: DMatrix<f64>, intercept: DVector<f64>, noise: MixtureOfGaussians) -> Result<Self> {
        if w.nrows() != intercept.len() {
            return Err(Error::dim("generator intercept", w.nrows(), intercept.len()));
        }
        if intercept.is_empty() {
            return Err(Error::InvalidArgument(
                "generator label dimension is zero".into(),
            ));
        }
        if noise.dim() != 1 && noise.dim() != intercept.len() {
            return Err(Error::dim("generator noise", intercept.len(), noise.dim()));
        }
        Ok(Self {
            w,
            intercept,
            noise,
            feature_low: -1.0,
            feature_high: 1.0,
        })
    }

    /// Context-free generator: labels are pure mixture draws.
    pub fn unconditional(y_dim: usize, noise: MixtureOfGaussians) -> Result<Self> {
        Self::new(DMatrix::zeros(y_dim, 0), DVector::zeros(y_dim), noise)
    }

    pub fn with_feature_range(mut self, low: f64, high: f64) -> Result<Self> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "feature range must be finite with low < high, got [{low}, {high}]"
            )));
        }
        self.feature_low = low;
        self.feature_high = high;
        Ok(self)
    }

    pub fn x_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn y_dim(&self) -> usize {
        self.intercept.len()
    }

    pub fn sample_x<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.x_dim())
            .map(|_| rng.random_range(self.feature_low..self.feature_high))
            .collect()
    }

    pub fn sample_y_given<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if x.len() != self.x_dim() {
            return Err(Error::dim("generator features", self.x_dim(), x.len()));
        }
        let base = &self.w * DVector::from_column_slice(x) + &self.intercept;
        let noise = if self.noise.dim() == 1 {
            self.noise.sample_iid(self.y_dim(), rng)?
        } else {
            self.noise.sample(rng)
        };
        Ok(base.iter().zip(noise.iter()).map(|(b, n)| b + n).collect())
    }

    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.sample_x(rng);
        let y = self.sample_y_given(&x, rng)?;
        Ok((x, y))
    }

    pub fn dataset<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Dataset> {
        let mut data = Dataset::new(self.x_dim(), self.y_dim())?;
        for _ in 0..count {
            let (x, y) = self.sample_pair(rng)?;
            data.push(x, y)?;
        }
        Ok(data)
    }
}

/// In-memory dataset of `(x, y)` rows with fixed dimensions and finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x_dim: usize,
    y_dim: usize,
    xs: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(x_dim: usize, y_dim: usize) -> Result<Self> {
        if y_dim == 0 {
            return Err(Error::InvalidArgument(
                "dataset label dimension is zero".into(),
            ));
        }
        Ok(Self {
            x_dim,
            y_dim,
            xs: Vec::new(),
            ys: Vec::new(),
        })
    }

    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>) -> Result<()> {
        if x.len() != self.x_dim {
            return Err(Error::dim("dataset features", self.x_dim, x.len()));
        }
        if y.len() != self.y_dim {
            return Err(Error::dim("dataset labels", self.y_dim, y.len()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "dataset row".into(),
            });
        }
        self.xs.push(x);
        self.ys.push(y);
        Ok(())
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn ys(&self) -> &[Vec<f64>] {
        &self.ys
    }

    pub fn row(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.xs[i], &self.ys[i])
    }

    /// Serializes as a `d_x,d_y` header followed by one comma-separated row
    /// per pair, printed with 17 significant digits so values round-trip
    /// exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{},{}", self.x_dim, self.y_dim);
        for (x, y) in self.xs.iter().zip(self.ys.iter()) {
            let fields: Vec<String> = x
                .iter()
                .chain(y.iter())
                .map(|v| format!("{v:.16e}"))
                .collect();
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::CsvParse {
            line: 1,
            message: "missing header".into(),
        })?;
        let dims: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
        if dims.len() != 2 {
            return Err(Error::CsvParse {
                line: 1,
                message: format!("header must be 'd_x,d_y', got '{header}'"),
            });
        }
        let parse_dim = |s: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::CsvParse {
                line: 1,
                message: format!("invalid dimension '{s}'"),
            })
        };
        let x_dim = parse_dim(dims[0])?;
        let y_dim = parse_dim(dims[1])?;
        let mut data = Self::new(x_dim, y_dim).map_err(|_| Error::CsvParse {
            line: 1,
            message: "label dimension must be at least 1".into(),
        })?;

        for (idx, raw) in lines {
            let line = idx + 1;
            let row = raw.trim_end_matches('\r');
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != x_dim + y_dim {
                return Err(Error::CsvParse {
                    line,
                    message: format!(
                        "expected {} fields, found {}",
                        x_dim + y_dim,
                        fields.len()
                    ),
                });
            }
            let mut values = Vec::with_capacity(fields.len());
            for field in &fields {
                let v: f64 = field.trim().parse().map_err(|_| Error::CsvParse {
                    line,
                    message: format!("invalid number '{field}'"),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("dataset line {line}"),
                    });
                }
                values.push(v);
            }
            let y = values.split_off(x_dim);
            data.push(values, y)?;
        }
        Ok(data)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(&text)
    }
}
