//! Low-rank gradient gap and convergence-bound formulas.
//!
//! A full gradient `G` is split by truncated SVD into the part a rank-`r`
//! update can represent and the residual tail `sum_{i>r} s_i u_i v_i^T`.
//! Under a singular-value cap `M`, the tail norm of a layer with `k` singular
//! values is at most `M * sqrt(k - r)`, and the whole-model tail is at most
//! `M * sqrt(K - L r)`. Those bounds feed the per-round descent bound and the
//! averaged squared-gradient bound whose `|S|`/`r` dependent part is the
//! scheduler's objective.

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::ModelSpec;

/// Slack used when comparing a residual against its bound and a singular
/// value against `M`.
pub const BOUND_SLACK: f64 = 1e-12;

/// Default cap on gradient singular values.
pub const DEFAULT_M: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Truncation {
    /// Best rank-`r` approximation.
    pub lora: DMatrix<f64>,
    /// `G - lora`
    pub residual: DMatrix<f64>,
    /// All singular values, descending.
    pub singulars: Vec<f64>,
}

/// Thin SVD with singular values sorted descending and a deterministic sign
/// convention: the first nonzero entry of every left singular vector is
/// nonnegative (the matching right vector is flipped with it).
pub fn svd(g: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (h, w) = g.shape();
    let decomposition = SVD::try_new(g.clone(), true, true, f64::EPSILON, 0)
        .ok_or(Error::SvdNonConvergence { h, w })?;
    let mut u = decomposition.u.ok_or(Error::SvdNonConvergence { h, w })?;
    let mut v_t = decomposition.v_t.ok_or(Error::SvdNonConvergence { h, w })?;
    let singulars: Vec<f64> = decomposition.singular_values.iter().copied().collect();

    for i in 0..singulars.len() {
        let first = u
            .column(i)
            .iter()
            .copied()
            .find(|x| *x != 0.0)
            .unwrap_or(0.0);
        if first < 0.0 {
            u.column_mut(i).neg_mut();
            v_t.row_mut(i).neg_mut();
        }
    }
    Ok((u, singulars, v_t))
}

pub fn svd_truncate(g: &DMatrix<f64>, r: usize) -> Result<Truncation> {
    let (h, w) = g.shape();
    let k = h.min(w);
    if r == 0 || r > k {
        return Err(Error::InvalidRank {
            layer: 0,
            rank: r,
            h,
            w,
            max: k,
        });
    }
    let (u, singulars, v_t) = svd(g)?;
    let mut lora = DMatrix::zeros(h, w);
    for (i, &s) in singulars.iter().enumerate().take(r) {
        lora.ger(s, &u.column(i), &v_t.row(i).transpose(), 1.0);
    }
    let residual = g - &lora;
    Ok(Truncation {
        lora,
        residual,
        singulars,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBound {
    pub residual_norm: f64,
    pub bound: f64,
    pub ok: bool,
    /// False when some singular value exceeds `M`, i.e. the bound's
    /// precondition does not hold for this spectrum.
    pub precondition_ok: bool,
}

/// Tail norm of a spectrum against `M * sqrt(k - r)`.
///
/// A rank at or above `k` keeps every singular value, so both the residual
/// and the bound are zero.
pub fn layer_gap_bound(singulars: &[f64], r: usize, m: f64) -> LayerBound {
    let k = singulars.len();
    let residual_norm = singulars.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt();
    let bound = m * (k.saturating_sub(r) as f64).sqrt();
    let precondition_ok = singulars.iter().all(|&s| s <= m + BOUND_SLACK);
    LayerBound {
        residual_norm,
        bound,
        ok: precondition_ok && residual_norm <= bound + BOUND_SLACK,
        precondition_ok,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGap {
    /// Descending.
    pub singulars: Vec<f64>,
    pub residual_norm: f64,
    pub bound: f64,
    pub ok: bool,
    pub precondition_ok: bool,
}

impl LayerGap {
    pub fn from_singulars(singulars: Vec<f64>, r: usize, m: f64) -> Self {
        let b = layer_gap_bound(&singulars, r, m);
        Self {
            singulars,
            residual_norm: b.residual_norm,
            bound: b.bound,
            ok: b.ok,
            precondition_ok: b.precondition_ok,
        }
    }

    /// k
    pub fn singular_count(&self) -> usize {
        self.singulars.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalGap {
    pub total_residual: f64,
    pub bound: f64,
    pub ok: bool,
}

/// Whole-model tail `sqrt(sum_l ||dG_l||^2)` against `M * sqrt(K - L r)`.
pub fn total_gap(layers: &[LayerGap], r: usize, m: f64) -> TotalGap {
    let total_residual = layers
        .iter()
        .map(|l| l.residual_norm * l.residual_norm)
        .sum::<f64>()
        .sqrt();
    let retained: usize = layers.iter().map(|l| r.min(l.singular_count())).sum();
    let k: usize = layers.iter().map(LayerGap::singular_count).sum();
    let bound = m * ((k - retained) as f64).sqrt();
    TotalGap {
        total_residual,
        bound,
        ok: layers.iter().all(|l| l.precondition_ok) && total_residual <= bound + BOUND_SLACK,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rank: usize,
    pub m: f64,
    pub layers: Vec<LayerGap>,
    pub total_residual: f64,
    pub total_bound: f64,
    pub bound_satisfied: bool,
}

/// SVD of each layer gradient, truncated at `r`, with per-layer and total
/// bound checks.
pub fn gap_report(gradients: &[DMatrix<f64>], r: usize, m: f64) -> Result<GapReport> {
    if gradients.is_empty() {
        return Err(Error::InvalidArgument("no gradient matrices given".into()));
    }
    let layers = gradients
        .iter()
        .enumerate()
        .map(|(idx, g)| {
            let (h, w) = g.shape();
            if r == 0 || r > h.min(w) {
                return Err(Error::InvalidRank {
                    layer: idx,
                    rank: r,
                    h,
                    w,
                    max: h.min(w),
                });
            }
            let (_, singulars, _) = svd(g)?;
            Ok(LayerGap::from_singulars(singulars, r, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = total_gap(&layers, r, m);
    Ok(GapReport {
        rank: r,
        m,
        bound_satisfied: total.ok && layers.iter().all(|l| l.ok),
        layers,
        total_residual: total.total_residual,
        total_bound: total.bound,
    })
}

/// Constants of the convergence bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub eta: f64,
    /// Smoothness constant.
    pub beta: f64,
    /// Stochastic-gradient variance bound.
    pub sigma2: f64,
    /// Singular-value cap.
    pub m: f64,
    /// Total singular-value count.
    pub k: usize,
    /// Layer count.
    pub l: usize,
    /// Expected loss of the initial model.
    pub loss_init: f64,
    /// Optimal loss.
    pub loss_star: f64,
    /// Rounds.
    pub t: usize,
}

impl BoundParams {
    pub fn for_spec(spec: &ModelSpec, eta: f64, beta: f64, sigma2: f64, m: f64) -> Self {
        Self {
            eta,
            beta,
            sigma2,
            m,
            k: spec.singular_value_count(),
            l: spec.layer_count(),
            loss_init: 0.0,
            loss_star: 0.0,
            t: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("eta", self.eta), ("beta", self.beta), ("M", self.m)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be nonnegative, got {}",
                self.sigma2
            )));
        }
        if self.k == 0 || self.l == 0 {
            return Err(Error::InvalidArgument("K and L must be positive".into()));
        }
        Ok(())
    }

    /// `M^2 (K - L r)`, the spectral tail capacity left after truncation.
    pub fn gap_term(&self, r: usize) -> f64 {
        self.m * self.m * (self.k as f64 - (self.l * r) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentBound {
    pub value: f64,
    /// Set when `eta > 1 / beta`, outside the step-size regime the bound
    /// assumes.
    pub step_size_warning: bool,
}

/// Upper bound on the next-round expected loss under uniform weights
/// `1 / s_size`:
///
/// `loss_t - (eta/2) g2 + (eta^2 beta / 2) sigma2 / s + (eta/2) M^2 (K - L r)`.
pub fn descent_bound(
    params: &BoundParams,
    s_size: usize,
    r: usize,
    loss_t: f64,
    grad_norm_sq: f64,
) -> Result<DescentBound> {
    if s_size == 0 {
        return Err(Error::InvalidArgument(
            "selection size must be positive".into(),
        ));
    }
    let eta = params.eta;
    let value = loss_t - 0.5 * eta * grad_norm_sq
        + 0.5 * eta * eta * params.beta * params.sigma2 / s_size as f64
        + 0.5 * eta * params.gap_term(r);
    Ok(DescentBound {
        value,
        step_size_warning: eta * params.beta > 1.0,
    })
}

/// Bound on the average squared gradient norm over `T` rounds:
///
/// `(2 / (eta T)) (loss_init - loss_star) + eta beta sigma2 / s + M^2 (K - L r)`.
pub fn avg_grad_bound(params: &BoundParams, s_size: usize, r: usize) -> Result<f64> {
    if s_size == 0 {
        return Err(Error::InvalidArgument(
            "selection size must be positive".into(),
        ));
    }
    if params.t == 0 {
        return Err(Error::InvalidArgument(
            "round count T must be positive".into(),
        ));
    }
    let eta = params.eta;
    Ok(
        2.0 / (eta * params.t as f64) * (params.loss_init - params.loss_star)
            + eta * params.beta * params.sigma2 / s_size as f64
            + params.gap_term(r),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn diagonal_truncation() {
        let g = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let t = svd_truncate(&g, 1).unwrap();
        assert!(close(t.residual.norm(), 5f64.sqrt(), 1e-12));
        assert!(close(t.singulars[0], 3.0, 1e-12));

        let full = svd_truncate(&g, 3).unwrap();
        assert!(full.residual.norm() < 1e-12);
    }

    #[test]
    fn truncation_rejects_bad_rank() {
        let g = DMatrix::from_element(3, 2, 1.0);
        assert!(matches!(
            svd_truncate(&g, 0),
            Err(Error::InvalidRank { .. })
        ));
        assert!(matches!(
            svd_truncate(&g, 3),
            Err(Error::InvalidRank { .. })
        ));
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let (u, s, v_t) = svd(&g).unwrap();
        for i in 0..s.len() {
            let first = u.column(i).iter().copied().find(|x| *x != 0.0).unwrap();
            assert!(first >= 0.0);
        }
        let rebuilt = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s)) * &v_t;
        assert!((rebuilt - &g).norm() < 1e-12);
        assert!(s_sorted(&svd(&g.transpose()).unwrap().1));
    }

    fn s_sorted(s: &[f64]) -> bool {
        s.windows(2).all(|p| p[0] >= p[1]) && s.iter().all(|&x| x >= 0.0)
    }

    #[test]
    fn layer_bound_examples() {
        let tight = layer_gap_bound(&[0.1; 5], 2, 0.1);
        assert!((tight.residual_norm - tight.bound).abs() <= 1e-12);
        assert!(tight.ok);

        let b = layer_gap_bound(&[0.1, 0.05, 0.01], 1, 0.1);
        assert!((b.residual_norm - 0.0026f64.sqrt()).abs() < 1e-15);
        assert!((b.bound - 0.1 * 2f64.sqrt()).abs() < 1e-15);
        assert!(b.ok);

        let full = layer_gap_bound(&[0.1, 0.05], 2, 0.1);
        assert_eq!((full.residual_norm, full.bound), (0.0, 0.0));
        assert!(full.ok);

        let violated = layer_gap_bound(&[0.5, 0.01], 1, 0.1);
        assert!(!violated.precondition_ok);
        assert!(!violated.ok);
    }

    #[test]
    fn total_gap_examples() {
        let layer = LayerGap::from_singulars(vec![0.08, 0.03, 0.02], 1, 0.1);
        let total = total_gap(&[layer.clone(), layer.clone()], 1, 0.1);
        assert!(close(
            total.total_residual,
            layer.residual_norm * 2f64.sqrt(),
            1e-14
        ));

        let a = LayerGap::from_singulars(vec![0.1; 4], 2, 0.1);
        let b = LayerGap::from_singulars(vec![0.1; 6], 2, 0.1);
        let tight = total_gap(&[a, b], 2, 0.1);
        // K = 10, L = 2, r = 2
        assert!((tight.total_residual - 0.1 * 6f64.sqrt()).abs() <= 1e-12);
        assert!((tight.bound - 0.1 * 6f64.sqrt()).abs() <= 1e-15);
        assert!(tight.ok);
    }

    #[test]
    fn report_on_diagonal_layers() {
        let g1 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.1, 0.05, 0.01]));
        let report = gap_report(&[g1.clone(), g1], 1, 0.1).unwrap();
        assert!(report.bound_satisfied);
        let sq: f64 = report.layers.iter().map(|l| l.residual_norm.powi(2)).sum();
        assert!((report.total_residual.powi(2) - sq).abs() < 1e-15);
    }

    fn reference_params() -> BoundParams {
        BoundParams {
            eta: 0.01,
            beta: 1.0,
            sigma2: 1.0,
            m: 0.1,
            k: 100,
            l: 10,
            loss_init: 2.3,
            loss_star: 0.0,
            t: 100,
        }
    }

    #[test]
    fn descent_bound_examples() {
        let p = reference_params();
        let b = descent_bound(&p, 5, 4, 1.0, 0.0).unwrap();
        assert!((b.value - 1.00301).abs() < 1e-12);
        assert!(!b.step_size_warning);

        let tiny = BoundParams { eta: 1e-12, ..p };
        assert!((descent_bound(&tiny, 5, 4, 1.0, 3.0).unwrap().value - 1.0).abs() < 1e-9);

        // K / L = 10: no tail left.
        assert_eq!(p.gap_term(10), 0.0);

        let hot = BoundParams { eta: 2.0, ..p };
        assert!(
            descent_bound(&hot, 5, 4, 1.0, 0.0)
                .unwrap()
                .step_size_warning
        );
        assert!(descent_bound(&p, 0, 4, 1.0, 0.0).is_err());
    }

    #[test]
    fn avg_grad_bound_examples() {
        let p = reference_params();
        assert!((avg_grad_bound(&p, 5, 4).unwrap() - 5.202).abs() < 1e-12);
        let r_max = 8;
        let diff = avg_grad_bound(&p, 5, 0).unwrap() - avg_grad_bound(&p, 5, r_max).unwrap();
        assert!((diff - p.m * p.m * (p.l * r_max) as f64).abs() < 1e-12);
        assert!(avg_grad_bound(&BoundParams { t: 0, ..p }, 5, 4).is_err());
        for s in 1..50 {
            assert!(avg_grad_bound(&p, s + 1, 4).unwrap() < avg_grad_bound(&p, s, 4).unwrap());
        }
    }
}
