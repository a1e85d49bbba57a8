//! Minimal dense-network engine over a single flat parameter vector.
//!
//! Every model in this crate stores its weights inside one `Vec<f64>`; a
//! [`ParamLayout`] records which slice belongs to which named tensor. Forward
//! and vector-Jacobian-product passes take the flat slice directly, so
//! gradients from different submodels (time embedding, trunk, ...) accumulate
//! into one buffer that an optimizer can consume without any reshaping.

use rand::Rng;

use crate::error::{Error, Result};

/// Activation applied between layers of a [`DenseNet`].
///
/// All three map 0 to 0, so an all-zero parameter vector yields the zero
/// function. `Relu` uses the derivative convention relu'(0) = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Silu => v * sigmoid(v),
        }
    }

    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}` (expected identity, relu or silu)"
            ))),
        }
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered map from tensor names to contiguous, non-overlapping slices of the
/// flat parameter vector. Entries are appended during model construction and
/// together cover `0..len()` without gaps.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let name = name.into();
        debug_assert!(
            self.entry(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let offset = self.len;
        let count: usize = shape.iter().product();
        self.entries.push(ParamEntry {
            name,
            offset,
            shape,
        });
        self.len += count;
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Flat parameter vector together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of the values belonging to a named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let e = self.layout.entry(name)?;
        Some(&self.values[e.offset..e.offset + e.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.layout.entry(name)?;
        let (offset, len) = (e.offset, e.len());
        Some(&mut self.values[offset..offset + len])
    }
}

#[derive(Debug, Clone)]
struct LayerOffsets {
    weight: usize,
    bias: usize,
}

/// Fully connected network with the activation applied after every layer
/// except the last. Weights are row-major `[out, in]` matrices.
#[derive(Debug, Clone)]
pub struct DenseNet {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerOffsets>,
}

impl DenseNet {
    /// Registers weights and biases for the given layer widths under
    /// `name.w{i}` / `name.b{i}`. `widths` lists the input dimension followed
    /// by every layer's output dimension, so it needs at least two entries.
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        widths: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "dense net `{name}` needs an input and at least one layer, got widths {widths:?}"
            )));
        }
        if widths[1..].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "dense net `{name}` has a zero-width layer: {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for i in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let weight = layout.push(format!("{name}.w{i}"), vec![fan_out, fan_in]);
            let bias = layout.push(format!("{name}.b{i}"), vec![fan_out]);
            layers.push(LayerOffsets { weight, bias });
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            layers,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of parameters owned by this net (the enclosing layout may hold
    /// more).
    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Xavier-uniform weight initialization, biases zero.
    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        for (i, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (self.widths[i], self.widths[i + 1]);
            let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            for w in &mut params[layer.weight..layer.weight + fan_in * fan_out] {
                *w = rng.random_range(-limit..=limit);
            }
            for b in &mut params[layer.bias..layer.bias + fan_out] {
                *b = 0.0;
            }
        }
    }

    fn check_input(&self, params: &[f64], input: &[f64], context: &str) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::dim(context, self.in_dim(), input.len()));
        }
        let needed = self
            .layers
            .last()
            .map(|l| l.bias + self.out_dim())
            .unwrap_or(0);
        if params.len() < needed {
            return Err(Error::dim(
                format!("{context}: parameter slice"),
                needed,
                params.len(),
            ));
        }
        Ok(())
    }

    /// Forward pass.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(params, input, "dense net forward input")?;
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = self.affine(params, layer, i, &x);
            if i != last {
                for v in &mut z {
                    *v = self.activation.apply(*v);
                }
            }
            x = z;
        }
        Ok(x)
    }

    fn affine(&self, params: &[f64], layer: &LayerOffsets, idx: usize, x: &[f64]) -> Vec<f64> {
        let (fan_in, fan_out) = (self.widths[idx], self.widths[idx + 1]);
        let w = &params[layer.weight..layer.weight + fan_in * fan_out];
        let b = &params[layer.bias..layer.bias + fan_out];
        let mut out = b.to_vec();
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = 0.0;
            for i in 0..fan_in {
                acc += row[i] * x[i];
            }
            out[o] += acc;
        }
        out
    }

    /// Vector-Jacobian product. Accumulates the parameter gradient (cotangent
    /// times the Jacobian w.r.t. the weights) into `param_grad`, which must
    /// span the full layout, and returns the gradient w.r.t. the input.
    pub fn vjp(
        &self,
        params: &[f64],
        input: &[f64],
        cotangent: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_input(params, input, "dense net vjp input")?;
        if cotangent.len() != self.out_dim() {
            return Err(Error::dim(
                "dense net vjp cotangent",
                self.out_dim(),
                cotangent.len(),
            ));
        }
        if param_grad.len() < params.len() {
            return Err(Error::dim(
                "dense net vjp gradient buffer",
                params.len(),
                param_grad.len(),
            ));
        }

        // Forward pass, caching each layer's input and pre-activation.
        let last = self.layers.len() - 1;
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(x.clone());
            let z = self.affine(params, layer, i, &x);
            pre.push(z.clone());
            x = if i != last {
                let mut a = z;
                for v in &mut a {
                    *v = self.activation.apply(*v);
                }
                a
            } else {
                z
            };
        }

        // Backward pass: g holds the gradient w.r.t. the current layer's
        // pre-activation.
        let mut g = cotangent.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let (fan_in, fan_out) = (self.widths[i], self.widths[i + 1]);
            let x_in = &inputs[i];
            let dw = &mut param_grad[layer.weight..layer.weight + fan_in * fan_out];
            for o in 0..fan_out {
                let go = g[o];
                let row = &mut dw[o * fan_in..(o + 1) * fan_in];
                for (ri, xi) in row.iter_mut().zip(x_in.iter()) {
                    *ri += go * xi;
                }
            }
            let db = &mut param_grad[layer.bias..layer.bias + fan_out];
            for (bo, go) in db.iter_mut().zip(g.iter()) {
                *bo += go;
            }

            let w = &params[layer.weight..layer.weight + fan_in * fan_out];
            let mut gx = vec![0.0; fan_in];
            for o in 0..fan_out {
                let go = g[o];
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (gi, ri) in gx.iter_mut().zip(row.iter()) {
                    *gi += go * ri;
                }
            }
            if i > 0 {
                let z_prev = &pre[i - 1];
                for (gi, zi) in gx.iter_mut().zip(z_prev.iter()) {
                    *gi *= self.activation.derivative(*zi);
                }
            }
            g = gx;
        }
        Ok(g)
    }
}

/// Interleaved sin/cos features of an integer timestep at geometrically spaced
/// frequencies (base 10000), as used by transformer position encodings.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal embedding dimension must be a positive even integer, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    let t = t as f64;
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    Ok(out)
}

/// Sinusoidal timestep features followed by a two-layer SiLU projection.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    embed_dim: usize,
    net: DenseNet,
}

impl TimeEmbedding {
    pub const DEFAULT_EMBED_DIM: usize = 16;

    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        embed_dim: usize,
        width: usize,
    ) -> Result<Self> {
        // Validate the embedding dimension eagerly rather than on first use.
        sinusoidal_embed(0, embed_dim)?;
        let net = DenseNet::new(layout, name, &[embed_dim, width, width], Activation::Silu)?;
        Ok(Self { embed_dim, net })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn out_dim(&self) -> usize {
        self.net.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        self.net.init(params, rng);
    }

    pub fn embed(&self, params: &[f64], t: usize) -> Result<Vec<f64>> {
        let features = sinusoidal_embed(t, self.embed_dim)?;
        self.net.forward(params, &features)
    }

    /// Accumulates the projection's parameter gradient for the given
    /// cotangent. The timestep is discrete, so there is no input gradient.
    pub fn vjp(
        &self,
        params: &[f64],
        t: usize,
        cotangent: &[f64],
        param_grad: &mut [f64],
    ) -> Result<()> {
        let features = sinusoidal_embed(t, self.embed_dim)?;
        self.net.vjp(params, &features, cotangent, param_grad)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        let scale = 1.0f64.max(a.abs()).max(b.abs());
        assert!(
            (a - b).abs() <= tol * scale,
            "expected {a} ~ {b} within rel {tol}"
        );
    }

    #[test]
    fn layout_offsets_are_contiguous_and_named() {
        let mut layout = ParamLayout::new();
        let net = DenseNet::new(&mut layout, "f", &[3, 4, 2], Activation::Relu).unwrap();
        assert_eq!(net.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(layout.len(), net.param_count());
        let mut expected_offset = 0;
        for e in layout.entries() {
            assert_eq!(e.offset, expected_offset);
            expected_offset += e.len();
        }
        assert_eq!(expected_offset, layout.len());
        assert_eq!(layout.entry("f.w0").unwrap().shape, vec![4, 3]);
        assert_eq!(layout.entry("f.b1").unwrap().shape, vec![2]);
        assert!(layout.entry("missing").is_none());
    }

    #[test]
    fn zero_params_map_everything_to_zero() {
        for act in [Activation::Identity, Activation::Relu, Activation::Silu] {
            let mut layout = ParamLayout::new();
            let net = DenseNet::new(&mut layout, "f", &[3, 5, 5, 2], act).unwrap();
            let params = ParamVector::zeros(layout);
            let out = net.forward(&params.values, &[0.7, -1.3, 2.2]).unwrap();
            assert_eq!(out, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn forward_matches_hand_rolled_two_layer_relu() {
        let mut layout = ParamLayout::new();
        let net = DenseNet::new(&mut layout, "f", &[2, 2, 1], Activation::Relu).unwrap();
        let mut p = ParamVector::zeros(layout);
        p.tensor_mut("f.w0").unwrap().copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        p.tensor_mut("f.b0").unwrap().copy_from_slice(&[0.1, -0.2]);
        p.tensor_mut("f.w1").unwrap().copy_from_slice(&[2.0, -1.0]);
        p.tensor_mut("f.b1").unwrap().copy_from_slice(&[0.3]);
        let x = [0.4, 0.6];
        let h0 = f64::max(1.0 * 0.4 - 2.0 * 0.6 + 0.1, 0.0);
        let h1 = f64::max(0.5 * 0.4 + 3.0 * 0.6 - 0.2, 0.0);
        let expected = 2.0 * h0 - 1.0 * h1 + 0.3;
        let out = net.forward(&p.values, &x).unwrap();
        assert_close(out[0], expected, 1e-15);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut layout = ParamLayout::new();
        let net = DenseNet::new(&mut layout, "f", &[3, 6, 4, 2], Activation::Silu).unwrap();
        let mut p = ParamVector::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        net.init(&mut p.values, &mut rng);
        for b in p.tensor_mut("f.b1").unwrap() {
            *b = rng.random_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cot = [0.8, -1.4];

        let scalar = |params: &[f64], input: &[f64]| -> f64 {
            let out = net.forward(params, input).unwrap();
            out.iter().zip(cot.iter()).map(|(o, c)| o * c).sum()
        };

        let mut grad = vec![0.0; p.len()];
        let gx = net.vjp(&p.values, &x, &cot, &mut grad).unwrap();

        let h = 1e-6;
        for k in 0..p.len() {
            let mut plus = p.values.clone();
            let mut minus = p.values.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (scalar(&plus, &x) - scalar(&minus, &x)) / (2.0 * h);
            assert_close(grad[k], fd, 1e-6);
        }
        for k in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (scalar(&p.values, &plus) - scalar(&p.values, &minus)) / (2.0 * h);
            assert_close(gx[k], fd, 1e-6);
        }
    }

    #[test]
    fn vjp_is_linear_in_the_cotangent() {
        let mut layout = ParamLayout::new();
        let net = DenseNet::new(&mut layout, "f", &[2, 5, 3], Activation::Silu).unwrap();
        let mut p = ParamVector::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        net.init(&mut p.values, &mut rng);
        let x = [0.3, -0.9];
        let c1 = [1.0, 0.0, -2.0];
        let c2 = [0.5, 1.5, 0.25];
        let combined: Vec<f64> = c1.iter().zip(c2.iter()).map(|(a, b)| 2.0 * a + b).collect();

        let run = |cot: &[f64]| {
            let mut g = vec![0.0; p.len()];
            let gx = net.vjp(&p.values, &x, cot, &mut g).unwrap();
            (g, gx)
        };
        let (g1, gx1) = run(&c1);
        let (g2, gx2) = run(&c2);
        let (gc, gxc) = run(&combined);
        for k in 0..p.len() {
            assert_close(gc[k], 2.0 * g1[k] + g2[k], 1e-12);
        }
        for k in 0..x.len() {
            assert_close(gxc[k], 2.0 * gx1[k] + gx2[k], 1e-12);
        }
    }

    #[test]
    fn relu_input_gradient_is_chained_weights_when_active() {
        // With all pre-activations positive the ReLU mask is the identity, so
        // the input gradient is W0^T W1^T c.
        let mut layout = ParamLayout::new();
        let net = DenseNet::new(&mut layout, "f", &[2, 2, 2], Activation::Relu).unwrap();
        let mut p = ParamVector::zeros(layout);
        p.tensor_mut("f.w0").unwrap().copy_from_slice(&[1.0, 0.2, 0.1, 1.5]);
        p.tensor_mut("f.b0").unwrap().copy_from_slice(&[5.0, 5.0]);
        p.tensor_mut("f.w1").unwrap().copy_from_slice(&[0.7, -0.3, 0.4, 0.9]);
        let x = [1.0, 2.0];
        let c = [1.0, -1.0];
        let mut grad = vec![0.0; p.len()];
        let gx = net.vjp(&p.values, &x, &c, &mut grad).unwrap();
        // g_hidden = W1^T c, g_input = W0^T g_hidden.
        let gh = [0.7 - 0.4, -0.3 - 0.9];
        let expected = [1.0 * gh[0] + 0.1 * gh[1], 0.2 * gh[0] + 1.5 * gh[1]];
        assert_close(gx[0], expected[0], 1e-15);
        assert_close(gx[1], expected[1], 1e-15);
    }

    #[test]
    fn zero_width_input_acts_as_learned_constant() {
        let mut layout = ParamLayout::new();
        let net = DenseNet::new(&mut layout, "f", &[0, 3, 2], Activation::Silu).unwrap();
        let mut p = ParamVector::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        net.init(&mut p.values, &mut rng);
        for b in p.tensor_mut("f.b0").unwrap() {
            *b = rng.random_range(-1.0..1.0);
        }
        let out = net.forward(&p.values, &[]).unwrap();
        assert_eq!(out.len(), 2);
        let mut grad = vec![0.0; p.len()];
        let gx = net.vjp(&p.values, &[], &[1.0, 1.0], &mut grad).unwrap();
        assert!(gx.is_empty());
        assert!(grad.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn dimension_mismatches_are_reported() {
        let mut layout = ParamLayout::new();
        let net = DenseNet::new(&mut layout, "f", &[3, 2], Activation::Identity).unwrap();
        let p = ParamVector::zeros(layout);
        assert!(matches!(
            net.forward(&p.values, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2, .. })
        ));
        let mut grad = vec![0.0; p.len()];
        assert!(net.vjp(&p.values, &[1.0, 2.0, 3.0], &[1.0], &mut grad).is_err());
    }

    #[test]
    fn sinusoidal_embed_basics() {
        let e = sinusoidal_embed(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        assert!(sinusoidal_embed(3, 7).is_err());
        assert!(sinusoidal_embed(3, 0).is_err());

        // Distinct embeddings for every timestep of a typical schedule.
        let embeds: Vec<Vec<f64>> = (0..=100).map(|t| sinusoidal_embed(t, 16).unwrap()).collect();
        for i in 0..embeds.len() {
            for j in i + 1..embeds.len() {
                let dist: f64 = embeds[i]
                    .iter()
                    .zip(embeds[j].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(dist > 1e-6, "timesteps {i} and {j} collide");
            }
        }
    }

    #[test]
    fn time_embedding_projects_and_differentiates() {
        let mut layout = ParamLayout::new();
        let te = TimeEmbedding::new(&mut layout, "temb", 8, 6).unwrap();
        assert_eq!(te.out_dim(), 6);
        let mut p = ParamVector::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        te.init(&mut p.values, &mut rng);

        let cot: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) * 0.4).collect();
        let scalar = |params: &[f64]| -> f64 {
            te.embed(params, 17)
                .unwrap()
                .iter()
                .zip(cot.iter())
                .map(|(o, c)| o * c)
                .sum()
        };
        let mut grad = vec![0.0; p.len()];
        te.vjp(&p.values, 17, &cot, &mut grad).unwrap();
        let h = 1e-6;
        for k in (0..p.len()).step_by(7) {
            let mut plus = p.values.clone();
            let mut minus = p.values.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
            assert_close(grad[k], fd, 1e-6);
        }
    }
}
