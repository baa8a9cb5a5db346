//! Similarity measures and regularizers composing the shooting objective:
//!
//! `total = lambda_kin * 0.5 ||v(0)||^2_L + Sim(I(1), I1)
//!        + lambda_omt * OMT(w(0)) + lambda_range * Range(w(0))`
//!
//! Penalties are volume-averaged so values are comparable across
//! multi-scale levels.

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, GeodesicState, IntegratorConfig};
use crate::error::{RdmmError, Result};
use crate::field::{self, GridSpec, ScalarField};
use crate::kernels::{self, MultiGaussianKernel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Ssd,
    Lncc,
    MkLncc,
}

/// Similarity measure settings. `windows` holds (window size in nodes,
/// weight) pairs for the localized NCC variants; plain LNCC uses the
/// first window only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub kind: SimilarityKind,
    pub windows: Vec<(usize, f64)>,
    pub eps: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            kind: SimilarityKind::MkLncc,
            windows: vec![(9, 0.3), (17, 0.7)],
            eps: 1e-5,
        }
    }
}

impl SimilarityConfig {
    pub fn ssd() -> Self {
        Self { kind: SimilarityKind::Ssd, windows: vec![], eps: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == SimilarityKind::Ssd {
            return Ok(());
        }
        if self.windows.is_empty() {
            return Err(RdmmError::InvalidParameter("LNCC needs at least one window".into()));
        }
        for &(size, weight) in &self.windows {
            if size < 3 || size % 2 == 0 {
                return Err(RdmmError::InvalidParameter(format!(
                    "window sizes must be odd and >= 3, got {size}"
                )));
            }
            if weight < 0.0 {
                return Err(RdmmError::InvalidParameter("window weights must be >= 0".into()));
            }
        }
        let total: f64 = self.windows.iter().map(|&(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(RdmmError::InvalidParameter(format!(
                "window weights must sum to 1, got {total}"
            )));
        }
        if self.eps <= 0.0 {
            return Err(RdmmError::InvalidParameter("eps must be positive".into()));
        }
        Ok(())
    }
}

/// OMT / Range penalty settings and their iteration-dependent decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegPenaltyConfig {
    pub c_omt: f64,
    pub c_range: f64,
    pub k_decay: f64,
    /// Reference squared weights for the range penalty.
    pub w0_sq: Vec<f64>,
}

impl RegPenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_omt < 0.0 || self.c_range < 0.0 {
            return Err(RdmmError::InvalidParameter("penalty constants must be >= 0".into()));
        }
        if self.k_decay <= 0.0 {
            return Err(RdmmError::InvalidParameter("decay constant must be > 0".into()));
        }
        if self.w0_sq.iter().any(|&v| v < 0.0) {
            return Err(RdmmError::InvalidParameter("reference squared weights must be >= 0".into()));
        }
        let total: f64 = self.w0_sq.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(RdmmError::InvalidParameter(format!(
                "reference squared weights must sum to 1, got {total}"
            )));
        }
        Ok(())
    }
}

fn check_same_grid(a: &ScalarField, b: &ScalarField) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(RdmmError::GridMismatch("similarity arguments on different grids".into()));
    }
    Ok(())
}

/// Volume-weighted sum of squared differences.
pub fn ssd(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    check_same_grid(a, b)?;
    let vol = a.grid().cell_volume();
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        * vol)
}

fn ssd_grad(a: &ScalarField, b: &ScalarField) -> ScalarField {
    let vol = a.grid().cell_volume();
    let vals = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| 2.0 * (x - y) * vol)
        .collect();
    ScalarField::from_vec(a.grid(), vals).expect("same grid")
}

/// Box sum along one axis with zero padding.
fn box_sum_axis(grid: &GridSpec, values: &[f64], axis: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    grid.for_each_line(axis, |base, stride, len| {
        for j in 0..len {
            let lo = j.saturating_sub(radius);
            let hi = (j + radius).min(len - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                acc += values[base + k * stride];
            }
            out[base + j * stride] = acc;
        }
    });
    out
}

fn box_sum(grid: &GridSpec, values: &[f64], radius: usize) -> Vec<f64> {
    let mut cur = values.to_vec();
    for a in 0..grid.d() {
        cur = box_sum_axis(grid, &cur, a, radius);
    }
    cur
}

fn box_counts(grid: &GridSpec, radius: usize) -> Vec<f64> {
    box_sum(grid, &vec![1.0; grid.len()], radius)
}

struct LnccTerms {
    counts: Vec<f64>,
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn lncc_terms(grid: &GridSpec, a: &[f64], b: &[f64], radius: usize) -> LnccTerms {
    let n = grid.len();
    let counts = box_counts(grid, radius);
    let sum_a = box_sum(grid, a, radius);
    let sum_b = box_sum(grid, b, radius);
    let aa: Vec<f64> = a.iter().map(|&x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|&x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let sum_aa = box_sum(grid, &aa, radius);
    let sum_bb = box_sum(grid, &bb, radius);
    let sum_ab = box_sum(grid, &ab, radius);
    let mut t = LnccTerms {
        counts,
        mean_a: vec![0.0; n],
        mean_b: vec![0.0; n],
        var_a: vec![0.0; n],
        var_b: vec![0.0; n],
        cov: vec![0.0; n],
    };
    for i in 0..n {
        let c = t.counts[i];
        let ma = sum_a[i] / c;
        let mb = sum_b[i] / c;
        t.mean_a[i] = ma;
        t.mean_b[i] = mb;
        t.var_a[i] = sum_aa[i] / c - ma * ma;
        t.var_b[i] = sum_bb[i] / c - mb * mb;
        t.cov[i] = sum_ab[i] / c - ma * mb;
    }
    t
}

/// Localized NCC loss for one window, optionally with the gradient with
/// respect to the first argument.
fn lncc_window(
    grid: &GridSpec,
    a: &[f64],
    b: &[f64],
    size: usize,
    eps: f64,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let radius = size / 2;
    let n = grid.len();
    let t = lncc_terms(grid, a, b, radius);
    let inv_n = 1.0 / n as f64;
    let mut loss = 1.0;
    let mut cot_cov = vec![0.0; n];
    let mut cot_var_a = vec![0.0; n];
    for i in 0..n {
        let denom = (t.var_a[i] + eps) * (t.var_b[i] + eps);
        let r = 1.0 / denom;
        let ncc2 = t.cov[i] * t.cov[i] * r;
        loss -= ncc2 * inv_n;
        if want_grad {
            // d(loss)/d(ncc2) = -1/n
            cot_cov[i] = -inv_n * 2.0 * t.cov[i] * r;
            cot_var_a[i] = inv_n * ncc2 / (t.var_a[i] + eps);
        }
    }
    if !want_grad {
        return (loss, None);
    }
    // cov = sum_ab/c - mean_a*mean_b; var_a = sum_aa/c - mean_a^2
    // cotangents wrt the box-sum inputs:
    let mut cot_sum_ab = vec![0.0; n];
    let mut cot_sum_aa = vec![0.0; n];
    let mut cot_sum_a = vec![0.0; n];
    for i in 0..n {
        let c = t.counts[i];
        cot_sum_ab[i] = cot_cov[i] / c;
        cot_sum_aa[i] = cot_var_a[i] / c;
        // mean_a appears in cov (factor -mean_b) and var_a (factor -2 mean_a)
        let cot_mean_a = -cot_cov[i] * t.mean_b[i] - 2.0 * cot_var_a[i] * t.mean_a[i];
        cot_sum_a[i] = cot_mean_a / c;
    }
    // transpose of box_sum is box_sum (symmetric window)
    let bt_ab = box_sum(grid, &cot_sum_ab, radius);
    let bt_aa = box_sum(grid, &cot_sum_aa, radius);
    let bt_a = box_sum(grid, &cot_sum_a, radius);
    let mut grad = vec![0.0; n];
    for i in 0..n {
        grad[i] = bt_ab[i] * b[i] + bt_aa[i] * 2.0 * a[i] + bt_a[i];
    }
    (loss, Some(grad))
}

/// Multi-kernel localized NCC loss in [0, 1].
pub fn mk_lncc(a: &ScalarField, b: &ScalarField, cfg: &SimilarityConfig) -> Result<f64> {
    check_same_grid(a, b)?;
    cfg.validate()?;
    let windows: &[(usize, f64)] = match cfg.kind {
        SimilarityKind::Lncc => &cfg.windows[..1],
        _ => &cfg.windows,
    };
    let mut loss = 0.0;
    for &(size, weight) in windows {
        let (l, _) = lncc_window(a.grid(), a.values(), b.values(), size, cfg.eps, false);
        loss += weight * l;
    }
    Ok(loss)
}

/// Similarity value for any configured kind.
pub fn similarity(a: &ScalarField, b: &ScalarField, cfg: &SimilarityConfig) -> Result<f64> {
    match cfg.kind {
        SimilarityKind::Ssd => ssd(a, b),
        _ => mk_lncc(a, b, cfg),
    }
}

/// Similarity value and gradient with respect to the first argument.
pub(crate) fn similarity_with_grad(
    a: &ScalarField,
    b: &ScalarField,
    cfg: &SimilarityConfig,
) -> Result<(f64, ScalarField)> {
    check_same_grid(a, b)?;
    match cfg.kind {
        SimilarityKind::Ssd => Ok((ssd(a, b)?, ssd_grad(a, b))),
        _ => {
            cfg.validate()?;
            let windows: &[(usize, f64)] = match cfg.kind {
                SimilarityKind::Lncc => &cfg.windows[..1],
                _ => &cfg.windows,
            };
            let n = a.grid().len();
            let mut loss = 0.0;
            let mut grad = vec![0.0; n];
            for &(size, weight) in windows {
                let (l, g) =
                    lncc_window(a.grid(), a.values(), b.values(), size, cfg.eps, true);
                loss += weight * l;
                for (o, v) in grad.iter_mut().zip(g.unwrap()) {
                    *o += weight * v;
                }
            }
            Ok((loss, ScalarField::from_vec(a.grid(), grad)?))
        }
    }
}

fn omt_coefficients(kernel: &MultiGaussianKernel) -> Vec<f64> {
    let sigmas = kernel.sigmas();
    let n = sigmas.len();
    if n == 1 {
        return vec![0.0];
    }
    let s = kernel.omt_power();
    let norm = (sigmas[n - 1] / sigmas[0]).ln().abs().powf(-s);
    sigmas
        .iter()
        .map(|&sig| norm * (sigmas[n - 1] / sig).ln().abs().powf(s))
        .collect()
}

/// Optimal-mass-transport penalty on squared weights, averaged over the
/// domain. 0 when all mass sits on the largest sigma, 1 when all on the
/// smallest.
pub fn omt_penalty(w: &[ScalarField], kernel: &MultiGaussianKernel) -> f64 {
    if kernel.n() == 1 {
        return 0.0;
    }
    let coef = omt_coefficients(kernel);
    let n = w[0].grid().len();
    let mut acc = 0.0;
    for (wi, &c) in w.iter().zip(&coef) {
        for &v in wi.values() {
            acc += c * v * v;
        }
    }
    acc / n as f64
}

/// Gradient of [`omt_penalty`] with respect to the weights.
pub(crate) fn omt_penalty_grad(w: &[ScalarField], kernel: &MultiGaussianKernel) -> Vec<ScalarField> {
    let grid = w[0].grid().clone();
    let n = grid.len();
    if kernel.n() == 1 {
        return vec![ScalarField::zeros(&grid)];
    }
    let coef = omt_coefficients(kernel);
    w.iter()
        .zip(&coef)
        .map(|(wi, &c)| {
            let vals = wi.values().iter().map(|&v| 2.0 * c * v / n as f64).collect();
            ScalarField::from_vec(&grid, vals).expect("same grid")
        })
        .collect()
}

/// Range penalty on the initial smoothed weights against the
/// pre-defined reference: volume-weighted squared distance.
pub(crate) fn range_penalty_on_weights(w0: &[ScalarField], w0_sq: &[f64]) -> f64 {
    let vol = w0[0].grid().cell_volume();
    let mut acc = 0.0;
    for (wi, &refsq) in w0.iter().zip(w0_sq) {
        let r = refsq.sqrt();
        for &v in wi.values() {
            acc += (v - r) * (v - r);
        }
    }
    acc * vol
}

pub(crate) fn range_penalty_grad(w0: &[ScalarField], w0_sq: &[f64]) -> Vec<ScalarField> {
    let grid = w0[0].grid().clone();
    let vol = grid.cell_volume();
    w0.iter()
        .zip(w0_sq)
        .map(|(wi, &refsq)| {
            let r = refsq.sqrt();
            let vals = wi.values().iter().map(|&v| 2.0 * (v - r) * vol).collect();
            ScalarField::from_vec(&grid, vals).expect("same grid")
        })
        .collect()
}

/// Range penalty from pre-weights: smooths them first.
pub fn range_penalty(
    h0: &[ScalarField],
    cfg: &RegPenaltyConfig,
    kernel: &MultiGaussianKernel,
) -> Result<f64> {
    let w0 = kernels::preweights_to_weights(h0, kernel)?;
    Ok(range_penalty_on_weights(&w0, &cfg.w0_sq))
}

/// Iteration-dependent penalty scale factors:
/// `lambda_T = K/(K + e^{T/K})`, range decays, OMT ramps up.
pub fn decay_weights(t_iter: usize, cfg: &RegPenaltyConfig) -> (f64, f64) {
    let k = cfg.k_decay;
    let lambda_t = k / (k + (t_iter as f64 / k).exp());
    let lambda_omt = cfg.c_omt * (1.0 - lambda_t);
    let lambda_range = cfg.c_range * lambda_t;
    (lambda_omt, lambda_range)
}

/// Per-term breakdown of the shooting objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    pub sim: f64,
    pub kinetic: f64,
    pub omt: f64,
    pub range: f64,
    pub lambda_omt: f64,
    pub lambda_range: f64,
}

/// Everything the shooting objective needs besides the state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShootingConfig {
    pub similarity: SimilarityConfig,
    pub penalties: RegPenaltyConfig,
    pub integrator: IntegratorConfig,
    pub lambda_kin: f64,
}

/// Evaluates the full shooting objective; returns the breakdown, the
/// trajectory, and the warped source image.
pub fn shooting_objective_full(
    state0: &GeodesicState,
    source: &ScalarField,
    target: &ScalarField,
    kernel: &MultiGaussianKernel,
    cfg: &ShootingConfig,
    t_iter: usize,
) -> Result<(ObjectiveBreakdown, Vec<GeodesicState>, ScalarField)> {
    let weights0 = dynamics::current_weights(state0, kernel)?;
    let (v0, _) = kernels::kernel_apply_full(&state0.m, &weights0.w, kernel);
    let kinetic = 0.5 * kernels::velocity_norm_sq(&state0.m, &v0);

    let traj = dynamics::integrate_geodesic(state0, kernel, &cfg.integrator)?;
    let warped = field::compose_scalar(source, &traj.last().unwrap().phi_inv)?;
    let sim = similarity(&warped, target, &cfg.similarity)?;

    let omt = omt_penalty(&weights0.w, kernel);
    let range = range_penalty_on_weights(&weights0.w, &cfg.penalties.w0_sq);
    let (lambda_omt, lambda_range) = decay_weights(t_iter, &cfg.penalties);
    let total = cfg.lambda_kin * kinetic + sim + lambda_omt * omt + lambda_range * range;
    let breakdown = ObjectiveBreakdown {
        total,
        sim,
        kinetic: cfg.lambda_kin * kinetic,
        omt,
        range,
        lambda_omt,
        lambda_range,
    };
    Ok((breakdown, traj, warped))
}

/// Shooting objective value with per-term breakdown.
pub fn shooting_objective(
    state0: &GeodesicState,
    source: &ScalarField,
    target: &ScalarField,
    kernel: &MultiGaussianKernel,
    cfg: &ShootingConfig,
    t_iter: usize,
) -> Result<ObjectiveBreakdown> {
    shooting_objective_full(state0, source, target, kernel, cfg, t_iter).map(|(b, _, _)| b)
}
