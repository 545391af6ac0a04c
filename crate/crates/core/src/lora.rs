//! Low-rank parameterization of dense weight matrices.
//!
//! A [`LoraLayer`] holds a frozen base matrix `w0` (h x w) and two trainable
//! factors `b` (h x r) and `a` (r x w). The effective weight is always
//! `w0 + b * a`, but the product is never formed on the hot path: forward and
//! backward passes go through the thin factors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{self, domain};

/// Standard deviation of the Gaussian used for the `a` factor.
pub const DEFAULT_A_INIT_STD: f64 = 0.01;

/// Shapes of the dense layers of a model, as `(h, w)` = (outputs, inputs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_dims: Vec<(usize, usize)>,
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<(usize, usize)>) -> Result<Self> {
        if layer_dims.is_empty() {
            return Err(Error::DegenerateSpec("model has no layers".into()));
        }
        if let Some(i) = layer_dims.iter().position(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::DegenerateSpec(format!(
                "layer {i} has a zero dimension {:?}",
                layer_dims[i]
            )));
        }
        for pair in layer_dims.windows(2) {
            if pair[1].1 != pair[0].0 {
                return Err(Error::DegenerateSpec(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].0, pair[1].1
                )));
            }
        }
        Ok(Self { layer_dims })
    }

    /// Builds a spec for an MLP from its layer widths, e.g. `[32, 64, 10]`.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::DegenerateSpec(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        Self::new(widths.windows(2).map(|p| (p[1], p[0])).collect())
    }

    /// Spec without the chaining check, for accounting over arbitrary shapes.
    pub fn from_shapes(layer_dims: Vec<(usize, usize)>) -> Result<Self> {
        if layer_dims.is_empty() || layer_dims.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::DegenerateSpec(format!(
                "bad layer shapes {layer_dims:?}"
            )));
        }
        Ok(Self { layer_dims })
    }

    pub fn layer_dims(&self) -> &[(usize, usize)] {
        &self.layer_dims
    }

    /// L
    pub fn layer_count(&self) -> usize {
        self.layer_dims.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0].1
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1].0
    }

    /// N: full-rank parameter count, biases excluded.
    pub fn full_params(&self) -> usize {
        self.layer_dims.iter().map(|&(h, w)| h * w).sum()
    }

    /// Number of LoRA parameters contributed per unit of rank, `sum(h + w)`.
    pub fn lora_params_per_rank(&self) -> usize {
        self.layer_dims.iter().map(|&(h, w)| h + w).sum()
    }

    /// K: total number of singular values across layers, `sum(min(h, w))`.
    pub fn singular_value_count(&self) -> usize {
        self.layer_dims.iter().map(|&(h, w)| h.min(w)).sum()
    }

    pub fn min_layer_dim(&self) -> usize {
        self.layer_dims
            .iter()
            .map(|&(h, w)| h.min(w))
            .min()
            .expect("spec has at least one layer")
    }

    /// Checks `1 <= rank <= min(h, w)` for every layer.
    pub fn check_rank(&self, rank: usize) -> Result<()> {
        if rank == 0 {
            return Err(Error::ZeroRank(rank));
        }
        for (layer, &(h, w)) in self.layer_dims.iter().enumerate() {
            if rank > h.min(w) {
                return Err(Error::InvalidRank {
                    layer,
                    rank,
                    h,
                    w,
                    max: h.min(w),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub full: usize,
    pub lora: usize,
}

pub fn param_counts(spec: &ModelSpec, rank: usize) -> Result<ParamCounts> {
    if rank == 0 {
        return Err(Error::ZeroRank(rank));
    }
    Ok(ParamCounts {
        full: spec.full_params(),
        lora: rank * spec.lora_params_per_rank(),
    })
}

/// Largest rank at which the LoRA model is no bigger than the full model and
/// every layer can still be truncated at that rank, capped at `cap`.
pub fn rank_upper_bound(spec: &ModelSpec, cap: usize) -> Result<usize> {
    if cap == 0 {
        return Err(Error::InvalidArgument("rank cap must be at least 1".into()));
    }
    let size_limit = spec.full_params() / spec.lora_params_per_rank();
    let bound = cap.min(size_limit).min(spec.min_layer_dim());
    if bound < 1 {
        return Err(Error::DegenerateSpec(format!(
            "no admissible rank: full params {} < params per rank {}",
            spec.full_params(),
            spec.lora_params_per_rank()
        )));
    }
    Ok(bound)
}

/// Samples a base weight matrix with a Kaiming-uniform initializer,
/// `U(-sqrt(6 / w), sqrt(6 / w))`.
pub fn init_base_weight<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> DMatrix<f64> {
    let bound = (6.0 / w as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    DMatrix::from_fn(h, w, |_, _| dist.sample(rng))
}

/// Seeded base weights for every layer of `spec`.
pub fn init_base_weights(spec: &ModelSpec, seed: u64) -> Vec<DMatrix<f64>> {
    let mut rng = seeding::stream(seed, &[domain::MODEL_INIT]);
    spec.layer_dims()
        .iter()
        .map(|&(h, w)| init_base_weight(h, w, &mut rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    w0: DMatrix<f64>,
    b: DMatrix<f64>,
    a: DMatrix<f64>,
}

impl LoraLayer {
    /// Wraps a base matrix with warm-start factors: `b = 0`, `a ~ N(0, a_std^2)`.
    pub fn from_base<R: Rng + ?Sized>(
        w0: DMatrix<f64>,
        rank: usize,
        a_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (h, w) = w0.shape();
        if rank == 0 || rank > h.min(w) {
            return Err(Error::InvalidRank {
                layer: 0,
                rank,
                h,
                w,
                max: h.min(w),
            });
        }
        let normal = Normal::new(0.0, a_std)
            .map_err(|e| Error::InvalidArgument(format!("factor init std {a_std}: {e}")))?;
        let a = DMatrix::from_fn(rank, w, |_, _| normal.sample(rng));
        Ok(Self {
            w0,
            b: DMatrix::zeros(h, rank),
            a,
        })
    }

    pub fn from_parts(w0: DMatrix<f64>, b: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        let (h, w) = w0.shape();
        let r = b.ncols();
        if b.nrows() != h {
            return Err(Error::shape(
                "lora b",
                format!("{h}x{r}"),
                format!("{}x{}", b.nrows(), r),
            ));
        }
        if a.shape() != (r, w) {
            return Err(Error::shape(
                "lora a",
                format!("{r}x{w}"),
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
        if r == 0 || r > h.min(w) {
            return Err(Error::InvalidRank {
                layer: 0,
                rank: r,
                h,
                w,
                max: h.min(w),
            });
        }
        Ok(Self { w0, b, a })
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    /// `(h, w)`
    pub fn shape(&self) -> (usize, usize) {
        self.w0.shape()
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.w0
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn into_factors(self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.b, self.a)
    }

    /// `b * a`, materialized. Only for aggregation and diagnostics.
    pub fn delta(&self) -> DMatrix<f64> {
        &self.b * &self.a
    }

    pub fn effective_weight(&self) -> DMatrix<f64> {
        &self.w0 + self.delta()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let w = self.w0.ncols();
        if x.len() != w {
            return Err(Error::shape("lora forward", w, x.len()));
        }
        Ok(&self.w0 * x + &self.b * (&self.a * x))
    }

    /// Forward pass over a batch stored column-wise (`w x batch`).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let w = self.w0.ncols();
        if x.nrows() != w {
            return Err(Error::shape("lora forward_batch", w, x.nrows()));
        }
        Ok(&self.w0 * x + &self.b * (&self.a * x))
    }

    /// Maps the gradient `g` of a loss w.r.t. the effective weight onto the
    /// factors: `(g * a^T, b^T * g)`. The base matrix receives nothing.
    pub fn lora_gradients(&self, g: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if g.shape() != self.w0.shape() {
            let (h, w) = self.w0.shape();
            return Err(Error::shape(
                "lora gradients",
                format!("{h}x{w}"),
                format!("{}x{}", g.nrows(), g.ncols()),
            ));
        }
        Ok((g * self.a.transpose(), self.b.transpose() * g))
    }

    /// Factor gradients for a dense layer whose full weight gradient is
    /// `delta * input^T`, without forming that h x w product.
    pub(crate) fn batch_gradients(
        &self,
        delta: &DMatrix<f64>,
        input: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let projected = &self.a * input;
        let grad_b = delta * projected.transpose();
        let grad_a = (self.b.transpose() * delta) * input.transpose();
        (grad_b, grad_a)
    }

    /// `(w0 + b a)^T * delta` through the factors.
    pub(crate) fn backward_input(&self, delta: &DMatrix<f64>) -> DMatrix<f64> {
        self.w0.transpose() * delta + self.a.transpose() * (self.b.transpose() * delta)
    }

    pub(crate) fn sgd_step(&mut self, grad_b: &DMatrix<f64>, grad_a: &DMatrix<f64>, eta: f64) {
        self.b -= grad_b * eta;
        self.a -= grad_a * eta;
    }
}

/// Builds a LoRA model with seeded Kaiming-uniform base weights and
/// warm-start factors, so the initial effective weights equal the bases.
pub fn new_lora_model(spec: &ModelSpec, rank: usize, seed: u64) -> Result<Vec<LoraLayer>> {
    spec.check_rank(rank)?;
    let bases = init_base_weights(spec, seed);
    let mut rng = seeding::stream(seed, &[domain::FACTOR_INIT]);
    bases
        .into_iter()
        .map(|w0| LoraLayer::from_base(w0, rank, DEFAULT_A_INIT_STD, &mut rng))
        .collect()
}
