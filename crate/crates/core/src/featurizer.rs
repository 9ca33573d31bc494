//! Fully-connected feature maps `z_θ: ℝ^{n_in} → ℝ^{n_feat}` and their
//! reverse-mode parameter derivatives.
//!
//! The weak learner is `x ↦ W z_θ(x)`; in Kronecker form the featurizer
//! matrix is `A_θ(x) = z_θ(x)ᵀ ⊗ I`, so its empirical operator norm reduces to
//! the largest singular value of `Z/√N`.
//!
//! Parameters are stored flat. Layer `l` maps `d_in → d_out` and occupies
//! `d_out·d_in` weights (column-major `K`) followed by `d_out` biases.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// No nonlinearity; the layer is affine.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`, given `y = σ(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a featurizer: `n_in → widths[0] → … → n_feat`, every
/// layer followed by the activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerSpec {
    pub n_in: usize,
    pub widths: Vec<usize>,
    pub n_feat: usize,
    pub activation: Activation,
    /// Make the last layer a skip block, `u ↦ u + σ(Ku + b)`.
    #[serde(default)]
    pub residual: bool,
    /// Parameter-free `z(x) = x`; `widths` must be empty and `n_feat = n_in`.
    #[serde(default)]
    pub passthrough: bool,
}

impl FeaturizerSpec {
    pub fn mlp(n_in: usize, widths: &[usize], n_feat: usize, activation: Activation) -> Self {
        FeaturizerSpec {
            n_in,
            widths: widths.to_vec(),
            n_feat,
            activation,
            residual: false,
            passthrough: false,
        }
    }

    pub fn passthrough(n_in: usize) -> Self {
        FeaturizerSpec {
            n_in,
            widths: Vec::new(),
            n_feat: n_in,
            activation: Activation::Identity,
            residual: false,
            passthrough: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_feat == 0 || self.widths.contains(&0) {
            return Err(Error::input("featurizer dimensions must be positive"));
        }
        if self.passthrough && (!self.widths.is_empty() || self.n_feat != self.n_in || self.residual) {
            return Err(Error::input(
                "a passthrough featurizer has no hidden layers and n_feat = n_in",
            ));
        }
        if self.residual {
            let last_in = self.widths.last().copied().unwrap_or(self.n_in);
            if last_in != self.n_feat {
                return Err(Error::input(format!(
                    "residual block needs matching widths, got {last_in} -> {}",
                    self.n_feat
                )));
            }
        }
        Ok(())
    }

    /// `(d_in, d_out)` for each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        if self.passthrough {
            return Vec::new();
        }
        let mut dims = Vec::with_capacity(self.widths.len() + 2);
        dims.push(self.n_in);
        dims.extend(&self.widths);
        dims.push(self.n_feat);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn n_theta(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| o * i + o).sum()
    }

    fn is_residual_layer(&self, layer: usize, n_layers: usize) -> bool {
        self.residual && layer + 1 == n_layers
    }
}

/// Flattened nonlinear parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub values: DVector<f64>,
}

impl ThetaVector {
    pub fn new(values: DVector<f64>) -> Self {
        ThetaVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Splits θ into per-layer `(K, b)` pairs.
    pub fn unflatten(&self, spec: &FeaturizerSpec) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
        self.check(spec)?;
        let mut offset = 0;
        let v = self.values.as_slice();
        Ok(spec
            .layer_dims()
            .into_iter()
            .map(|(d_in, d_out)| {
                let k = DMatrix::from_column_slice(d_out, d_in, &v[offset..offset + d_out * d_in]);
                offset += d_out * d_in;
                let b = DVector::from_column_slice(&v[offset..offset + d_out]);
                offset += d_out;
                (k, b)
            })
            .collect())
    }

    pub fn flatten(layers: &[(DMatrix<f64>, DVector<f64>)]) -> Self {
        let mut values = Vec::new();
        for (k, b) in layers {
            values.extend_from_slice(k.as_slice());
            values.extend_from_slice(b.as_slice());
        }
        ThetaVector::new(DVector::from_vec(values))
    }

    fn check(&self, spec: &FeaturizerSpec) -> Result<()> {
        if self.len() != spec.n_theta() {
            return Err(Error::input(format!(
                "theta has {} entries, architecture needs {}",
                self.len(),
                spec.n_theta()
            )));
        }
        Ok(())
    }
}

/// Features of a batch, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub z: DMatrix<f64>,
}

impl FeatureBatch {
    pub fn new(z: DMatrix<f64>) -> Self {
        FeatureBatch { z }
    }

    pub fn n_samples(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_feat(&self) -> usize {
        self.z.ncols()
    }
}

/// Glorot-uniform weights and zero biases, reproducible from `seed`.
pub fn init_theta(spec: &FeaturizerSpec, seed: u64) -> ThetaVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.n_theta());
    for (d_in, d_out) in spec.layer_dims() {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        values.extend((0..d_in * d_out).map(|_| rng.random_range(-limit..limit)));
        values.extend(std::iter::repeat_n(0.0, d_out));
    }
    ThetaVector::new(DVector::from_vec(values))
}

struct LayerCache {
    input: DMatrix<f64>,
    /// `σ'` at the pre-activations.
    slope: DMatrix<f64>,
}

/// A forward evaluation that keeps what the backward sweep needs.
pub(crate) struct ForwardPass<'a> {
    spec: &'a FeaturizerSpec,
    layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    caches: Vec<LayerCache>,
    output: DMatrix<f64>,
}

impl<'a> ForwardPass<'a> {
    pub(crate) fn run(spec: &'a FeaturizerSpec, theta: &ThetaVector, x: &DMatrix<f64>) -> Result<Self> {
        spec.validate()?;
        if x.ncols() != spec.n_in {
            return Err(Error::input(format!(
                "input has {} columns, featurizer expects {}",
                x.ncols(),
                spec.n_in
            )));
        }
        let layers = theta.unflatten(spec)?;
        let n_layers = layers.len();
        let mut caches = Vec::with_capacity(n_layers);
        let mut current = x.clone();
        for (l, (k, b)) in layers.iter().enumerate() {
            let mut pre = &current * k.transpose();
            for (j, mut col) in pre.column_iter_mut().enumerate() {
                col.add_scalar_mut(b[j]);
            }
            let act = spec.activation;
            let mut post = pre.map(|v| act.apply(v));
            let slope = pre.zip_map(&post, |p, y| act.derivative(p, y));
            if spec.is_residual_layer(l, n_layers) {
                post += &current;
            }
            caches.push(LayerCache { input: current, slope });
            current = post;
        }
        Ok(ForwardPass { spec, layers, caches, output: current })
    }

    pub(crate) fn features(&self) -> &DMatrix<f64> {
        &self.output
    }

    pub(crate) fn into_features(self) -> FeatureBatch {
        FeatureBatch::new(self.output)
    }

    /// `Σᵢ (∂z(xᵢ)/∂θ)ᵀ cotᵢ`.
    pub(crate) fn vjp(&self, cotangents: &DMatrix<f64>) -> Result<DVector<f64>> {
        if cotangents.shape() != self.output.shape() {
            return Err(Error::input(format!(
                "cotangent shape {:?} does not match features {:?}",
                cotangents.shape(),
                self.output.shape()
            )));
        }
        let n_layers = self.layers.len();
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut upstream = cotangents.clone();
        for l in (0..n_layers).rev() {
            let (k, _) = &self.layers[l];
            let cache = &self.caches[l];
            let dpre = upstream.component_mul(&cache.slope);
            let gk = dpre.transpose() * &cache.input;
            let gb: Vec<f64> = dpre.column_iter().map(|c| c.sum()).collect();
            let mut g = gk.as_slice().to_vec();
            g.extend(gb);
            grads.push(g);
            let mut down = &dpre * k;
            if self.spec.is_residual_layer(l, n_layers) {
                down += &upstream;
            }
            upstream = down;
        }
        Ok(DVector::from_iterator(
            self.spec.n_theta(),
            grads.into_iter().rev().flatten(),
        ))
    }
}

/// Evaluates `z_θ` on every row of `x`.
pub fn feature_batch(spec: &FeaturizerSpec, theta: &ThetaVector, x: &DMatrix<f64>) -> Result<FeatureBatch> {
    Ok(ForwardPass::run(spec, theta, x)?.into_features())
}

/// Reverse-mode product of the parameter Jacobian with per-row cotangents.
pub fn feature_vjp(
    spec: &FeaturizerSpec,
    theta: &ThetaVector,
    x: &DMatrix<f64>,
    cotangents: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    ForwardPass::run(spec, theta, x)?.vjp(cotangents)
}

/// Empirical operator norm `‖A_θ‖_N = sqrt(λ_max(ZᵀZ/N))`.
pub fn operator_norm(features: &FeatureBatch) -> Result<f64> {
    let n = features.n_samples();
    if n == 0 {
        return Err(Error::input("operator norm of an empty batch"));
    }
    let gram = features.z.tr_mul(&features.z) / n as f64;
    let lmax = gram.symmetric_eigenvalues().max();
    Ok(lmax.max(0.0).sqrt())
}
