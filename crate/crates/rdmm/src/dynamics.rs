//! Forward integration of the RDMM geodesic shooting equations.
//!
//! The state is the momentum `m` and the inverse map `phi^{-1}`, with
//! the initial pre-weights `{h_i(0)}` acting as time-invariant
//! parameters. Inside every right-hand-side evaluation the current
//! pre-weights are obtained by interpolating `h_i(0)` through the
//! current map and renormalizing the pointwise constraint
//! `sum_i h_i^2 = 1`, and the momentum evolves by the modified EPDiff
//! equation
//!
//! `dm/dt = -(div(v) m + Dv^T m + Dm v) + sum_i G * (m . nu_i) grad h_i`
//!
//! which reduces to plain EPDiff for spatially constant pre-weights.
//! Time integration is classical fixed-step RK4 over [0,1].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{RdmmError, Result};
use crate::fft;
use crate::field::{
    self, GridSpec, ScalarField, TransformMap, VectorField,
};
use crate::kernels::{self, MultiGaussianKernel, WeightStack};

/// Floor for the pointwise pre-weight norm during renormalization.
pub(crate) const RENORM_FLOOR: f64 = 1e-12;

/// Complete initial-condition parameterization of a registration at one
/// point in time.
#[derive(Clone, Debug)]
pub struct GeodesicState {
    pub m: VectorField,
    pub phi_inv: TransformMap,
    /// Initial pre-weights; shared across the trajectory.
    pub h0: Arc<Vec<ScalarField>>,
    pub t: f64,
}

impl GeodesicState {
    /// State at t = 0: identity map, given momentum and pre-weights.
    pub fn initial(m: VectorField, h0: Vec<ScalarField>) -> Result<Self> {
        let grid = m.grid().clone();
        for h in &h0 {
            if h.grid() != &grid {
                return Err(RdmmError::GridMismatch("pre-weight grid differs from momentum".into()));
            }
        }
        let n = grid.len();
        let mut worst = 0.0f64;
        for idx in 0..n {
            let s: f64 = h0.iter().map(|f| f.values()[idx] * f.values()[idx]).sum();
            worst = worst.max((s - 1.0).abs());
        }
        if worst > 1e-6 {
            return Err(RdmmError::InvalidParameter(format!(
                "pre-weights violate sum h_i^2 = 1 by {worst:.2e}"
            )));
        }
        let phi_inv = field::identity_map(&grid);
        Ok(Self { m, phi_inv, h0: Arc::new(h0), t: 0.0 })
    }

    pub fn grid(&self) -> &GridSpec {
        self.m.grid()
    }
}

/// Fixed-step RK4 over the unit time horizon.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub n_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { n_steps: 20 }
    }
}

/// Advects pre-weights through the map and renormalizes the pointwise
/// constraint. Returns the raw interpolated values, the normalization
/// field and the renormalized pre-weights.
pub(crate) fn advect_preweights(
    h0: &[ScalarField],
    phi_inv: &TransformMap,
) -> Result<(Vec<ScalarField>, Vec<f64>, Vec<ScalarField>)> {
    let grid = phi_inv.grid().clone();
    let n = grid.len();
    let h_raw: Vec<ScalarField> = h0
        .iter()
        .map(|h| field::compose_scalar(h, phi_inv))
        .collect::<Result<_>>()?;
    let mut s = vec![0.0; n];
    for h in &h_raw {
        for (acc, &v) in s.iter_mut().zip(h.values()) {
            *acc += v * v;
        }
    }
    for v in &mut s {
        *v = v.sqrt().max(RENORM_FLOOR);
    }
    let h_hat = h_raw
        .iter()
        .map(|h| {
            let vals = h.values().iter().zip(&s).map(|(&v, &sv)| v / sv).collect();
            ScalarField::from_vec(&grid, vals)
        })
        .collect::<Result<_>>()?;
    Ok((h_raw, s, h_hat))
}

/// Pre-weights and smoothed weights at the state's current time.
pub fn current_weights(state: &GeodesicState, kernel: &MultiGaussianKernel) -> Result<WeightStack> {
    let (_, _, h_hat) = advect_preweights(&state.h0, &state.phi_inv)?;
    WeightStack::from_preweights(h_hat, kernel)
}

/// Everything computed inside one right-hand-side evaluation. The
/// adjoint pass re-runs the forward internals and walks them backwards.
pub(crate) struct RhsInternals {
    pub h_raw: Vec<ScalarField>,
    pub s: Vec<f64>,
    pub h_hat: Vec<ScalarField>,
    pub w: Vec<ScalarField>,
    pub nus: Vec<VectorField>,
    pub v: VectorField,
    /// dv[a*d+b] = d v_a / d x_b
    pub dv: Vec<Vec<f64>>,
    pub divv: Vec<f64>,
    /// dm_jac[c*d+b] = d m_c / d x_b
    pub dm_jac: Vec<Vec<f64>>,
    /// dh_hat[i*d+c] = d h_hat_i / d x_c
    pub dh_hat: Vec<Vec<f64>>,
    /// q_i = G * (m . nu_i)
    pub q: Vec<Vec<f64>>,
    pub dm: VectorField,
    pub dphi: VectorField,
}

pub(crate) fn rdmm_rhs_full(
    m: &VectorField,
    phi_inv: &TransformMap,
    h0: &[ScalarField],
    kernel: &MultiGaussianKernel,
) -> Result<RhsInternals> {
    let grid = m.grid().clone();
    let d = grid.d();
    let n = grid.len();
    let nk = kernel.n();

    let (h_raw, s, h_hat) = advect_preweights(h0, phi_inv)?;
    let w = kernels::preweights_to_weights(&h_hat, kernel)?;
    let (v, nus) = kernels::kernel_apply_full(m, &w, kernel);

    let mut dv = vec![vec![0.0; n]; d * d];
    for a in 0..d {
        for b in 0..d {
            field::deriv_axis(&grid, v.comp(a), b, &mut dv[a * d + b]);
        }
    }
    let mut divv = vec![0.0; n];
    for a in 0..d {
        for (o, &x) in divv.iter_mut().zip(&dv[a * d + a]) {
            *o += x;
        }
    }
    let mut dm_jac = vec![vec![0.0; n]; d * d];
    for c in 0..d {
        for b in 0..d {
            field::deriv_axis(&grid, m.comp(c), b, &mut dm_jac[c * d + b]);
        }
    }
    let mut dh_hat = vec![vec![0.0; n]; nk * d];
    for i in 0..nk {
        for c in 0..d {
            field::deriv_axis(&grid, h_hat[i].values(), c, &mut dh_hat[i * d + c]);
        }
    }

    // q_i = G * (m . nu_i)
    let mut q: Vec<Vec<f64>> = (0..nk)
        .map(|i| {
            let mut r = vec![0.0; n];
            for b in 0..d {
                let mb = m.comp(b);
                let nb = nus[i].comp(b);
                for k in 0..n {
                    r[k] += mb[k] * nb[k];
                }
            }
            r
        })
        .collect();
    let g_resp = fft::gauss_response(&grid, kernel.preweight_sigma());
    fft::conv_batch(&grid, &g_resp, &mut q);

    let mut dm = VectorField::zeros(&grid);
    for c in 0..d {
        let out = dm.comp_mut(c);
        let mc = m.comp(c);
        for k in 0..n {
            out[k] = -divv[k] * mc[k];
        }
        for b in 0..d {
            let mb = m.comp(b);
            let dvbc = &dv[b * d + c];
            let dmcb = &dm_jac[c * d + b];
            let vb = v.comp(b);
            for k in 0..n {
                out[k] -= mb[k] * dvbc[k] + dmcb[k] * vb[k];
            }
        }
        for i in 0..nk {
            let qi = &q[i];
            let dh = &dh_hat[i * d + c];
            for k in 0..n {
                out[k] += qi[k] * dh[k];
            }
        }
    }

    let mut dphi = VectorField::zeros(&grid);
    let mut dphi_jac = vec![0.0; n];
    for a in 0..d {
        let coords_a = phi_inv.coords().comp(a);
        for b in 0..d {
            field::deriv_axis(&grid, coords_a, b, &mut dphi_jac);
            let vb = v.comp(b);
            let out = dphi.comp_mut(a);
            for k in 0..n {
                out[k] -= dphi_jac[k] * vb[k];
            }
        }
    }

    if !dm.all_finite() || !dphi.all_finite() {
        return Err(RdmmError::NonFinite("rdmm right-hand side".into()));
    }

    Ok(RhsInternals { h_raw, s, h_hat, w, nus, v, dv, divv, dm_jac, dh_hat, q, dm, dphi })
}

/// Time derivatives of momentum and map at a state.
pub fn rdmm_rhs(
    state: &GeodesicState,
    kernel: &MultiGaussianKernel,
) -> Result<(VectorField, VectorField)> {
    let internals = rdmm_rhs_full(&state.m, &state.phi_inv, &state.h0, kernel)?;
    Ok((internals.dm, internals.dphi))
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// One classical RK4 step of (m, phi^{-1}); h0 stays fixed.
pub(crate) fn rk4_step(
    m: &VectorField,
    phi_inv: &TransformMap,
    h0: &[ScalarField],
    kernel: &MultiGaussianKernel,
    dt: f64,
) -> Result<(VectorField, TransformMap)> {
    let stage = |km: &VectorField, kp: &VectorField, c: f64| -> (VectorField, TransformMap) {
        let mut sm = m.clone();
        axpy(sm.data_mut(), c * dt, km.data());
        let mut sp = phi_inv.clone();
        axpy(sp.coords_mut().data_mut(), c * dt, kp.data());
        (sm, sp)
    };
    let k1 = rdmm_rhs_full(m, phi_inv, h0, kernel)?;
    let (m2, p2) = stage(&k1.dm, &k1.dphi, 0.5);
    let k2 = rdmm_rhs_full(&m2, &p2, h0, kernel)?;
    let (m3, p3) = stage(&k2.dm, &k2.dphi, 0.5);
    let k3 = rdmm_rhs_full(&m3, &p3, h0, kernel)?;
    let (m4, p4) = stage(&k3.dm, &k3.dphi, 1.0);
    let k4 = rdmm_rhs_full(&m4, &p4, h0, kernel)?;

    let mut mn = m.clone();
    let mut pn = phi_inv.clone();
    let w = dt / 6.0;
    axpy(mn.data_mut(), w, k1.dm.data());
    axpy(mn.data_mut(), 2.0 * w, k2.dm.data());
    axpy(mn.data_mut(), 2.0 * w, k3.dm.data());
    axpy(mn.data_mut(), w, k4.dm.data());
    axpy(pn.coords_mut().data_mut(), w, k1.dphi.data());
    axpy(pn.coords_mut().data_mut(), 2.0 * w, k2.dphi.data());
    axpy(pn.coords_mut().data_mut(), 2.0 * w, k3.dphi.data());
    axpy(pn.coords_mut().data_mut(), w, k4.dphi.data());
    Ok((mn, pn))
}

/// Integrates the shooting system from t = 0 to t = 1, returning all
/// intermediate states (n_steps + 1 entries).
pub fn integrate_geodesic(
    state0: &GeodesicState,
    kernel: &MultiGaussianKernel,
    cfg: &IntegratorConfig,
) -> Result<Vec<GeodesicState>> {
    if cfg.n_steps == 0 {
        return Err(RdmmError::InvalidParameter("n_steps must be at least 1".into()));
    }
    let dt = 1.0 / cfg.n_steps as f64;
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    states.push(state0.clone());
    for step in 0..cfg.n_steps {
        let last = states.last().unwrap();
        let (mn, pn) =
            rk4_step(&last.m, &last.phi_inv, &last.h0, kernel, dt).map_err(|e| match e {
                RdmmError::NonFinite(detail) => RdmmError::IntegrationBlowup { step, detail },
                other => other,
            })?;
        if !mn.all_finite() || !pn.coords().all_finite() {
            return Err(RdmmError::IntegrationBlowup {
                step,
                detail: "state became non-finite".into(),
            });
        }
        states.push(GeodesicState {
            m: mn,
            phi_inv: pn,
            h0: state0.h0.clone(),
            t: (step + 1) as f64 * dt,
        });
    }
    Ok(states)
}

/// Kinetic energy `0.5 <m, K(w(t)) m>` at the state's current weights.
pub fn energy(state: &GeodesicState, kernel: &MultiGaussianKernel) -> Result<f64> {
    let weights = current_weights(state, kernel)?;
    let v = kernels::kernel_apply(&state.m, &weights.w, kernel);
    Ok(0.5 * kernels::velocity_norm_sq(&state.m, &v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid2(n: usize) -> GridSpec {
        GridSpec::new(&[n, n]).unwrap()
    }

    fn constant_preweights(grid: &GridSpec, h_sq: &[f64]) -> Vec<ScalarField> {
        h_sq.iter().map(|&q| ScalarField::constant(grid, q.sqrt())).collect()
    }

    /// Smooth compact momentum field for stability tests.
    fn smooth_momentum(grid: &GridSpec, seed: u64, amplitude: f64) -> VectorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = VectorField::zeros(grid);
        for v in m.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut m = kernels::gauss_conv_vector(&m, 0.1).unwrap();
        // taper to zero near the boundary
        let n = grid.len();
        for c in 0..grid.d() {
            let comp = m.comp_mut(c);
            for idx in 0..n {
                let p = grid.node_coords(idx);
                let taper: f64 = (0..2)
                    .map(|a| (std::f64::consts::PI * p[a]).sin().powi(2))
                    .product();
                comp[idx] *= taper;
            }
        }
        let peak = m.data().iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-30);
        let scale = amplitude / peak;
        for v in m.data_mut() {
            *v *= scale;
        }
        m
    }

    /// Smoothly varying pre-weights with sum of squares one.
    fn smooth_preweights(grid: &GridSpec, n_kernels: usize) -> Vec<ScalarField> {
        let raw: Vec<ScalarField> = (0..n_kernels)
            .map(|i| {
                ScalarField::from_fn(grid, |p| {
                    0.5 + 0.3
                        * ((i + 1) as f64 * std::f64::consts::PI * p[0]).sin()
                        * (std::f64::consts::PI * p[1]).cos()
                })
            })
            .collect();
        let n = grid.len();
        let mut s = vec![0.0; n];
        for h in &raw {
            for (acc, &v) in s.iter_mut().zip(h.values()) {
                *acc += v * v;
            }
        }
        raw.iter()
            .map(|h| {
                let vals =
                    h.values().iter().zip(&s).map(|(&v, &sv)| v / sv.sqrt()).collect();
                ScalarField::from_vec(grid, vals).unwrap()
            })
            .collect()
    }

    fn kernel2() -> MultiGaussianKernel {
        MultiGaussianKernel::new(&[0.05, 0.15], 0.05, 2.0).unwrap()
    }

    #[test]
    fn zero_momentum_is_fixed_point() {
        let g = grid2(17);
        let kernel = kernel2();
        let h0 = constant_preweights(&g, &[0.4, 0.6]);
        let state = GeodesicState::initial(VectorField::zeros(&g), h0).unwrap();
        let (dm, dphi) = rdmm_rhs(&state, &kernel).unwrap();
        assert!(dm.data().iter().all(|&v| v == 0.0));
        assert!(dphi.data().iter().all(|&v| v == 0.0));
        let traj =
            integrate_geodesic(&state, &kernel, &IntegratorConfig { n_steps: 5 }).unwrap();
        let id = field::identity_map(&g);
        let last = traj.last().unwrap();
        for i in 0..last.phi_inv.coords().data().len() {
            assert_eq!(last.phi_inv.coords().data()[i], id.coords().data()[i]);
        }
    }

    #[test]
    fn current_weights_identity_map_returns_h0() {
        let g = grid2(17);
        let kernel = kernel2();
        let h0 = smooth_preweights(&g, 2);
        let state =
            GeodesicState::initial(VectorField::zeros(&g), h0.clone()).unwrap();
        let ws = current_weights(&state, &kernel).unwrap();
        for (hi, h0i) in ws.h.iter().zip(&h0) {
            for i in 0..g.len() {
                assert!((hi.values()[i] - h0i.values()[i]).abs() < 1e-12);
            }
        }
        assert!(ws.partition_defect() < 1e-12);
    }

    #[test]
    fn constant_preweights_invariant_under_any_map() {
        let g = grid2(17);
        let kernel = kernel2();
        let h0 = constant_preweights(&g, &[0.3, 0.7]);
        // an arbitrary smooth map
        let mut coords = VectorField::zeros(&g);
        for i in 0..g.len() {
            let c = g.node_coords(i);
            let bump = (std::f64::consts::PI * c[0]).sin() * (std::f64::consts::PI * c[1]).sin();
            coords.comp_mut(0)[i] = c[0] + 0.08 * bump;
            coords.comp_mut(1)[i] = c[1] - 0.05 * bump;
        }
        let state = GeodesicState {
            m: VectorField::zeros(&g),
            phi_inv: TransformMap::from_coords(coords),
            h0: Arc::new(h0.clone()),
            t: 0.5,
        };
        let ws = current_weights(&state, &kernel).unwrap();
        for (hi, h0i) in ws.h.iter().zip(&h0) {
            for i in 0..g.len() {
                assert!((hi.values()[i] - h0i.values()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translation_flow_translates_preweights() {
        // phi^{-1}(y) = y - a pulls h0 forward by +a
        let g = grid2(65);
        let a = [0.1, 0.05];
        let mut coords = VectorField::zeros(&g);
        for i in 0..g.len() {
            let c = g.node_coords(i);
            coords.comp_mut(0)[i] = c[0] - a[0];
            coords.comp_mut(1)[i] = c[1] - a[1];
        }
        let h_smooth = |p: &[f64]| {
            0.6 + 0.2 * (std::f64::consts::PI * p[0]).sin() * (std::f64::consts::PI * p[1]).sin()
        };
        let h0_0 = ScalarField::from_fn(&g, h_smooth);
        let h0_1 = ScalarField::from_fn(&g, |p| (1.0f64 - h_smooth(p).powi(2)).sqrt());
        let state = GeodesicState {
            m: VectorField::zeros(&g),
            phi_inv: TransformMap::from_coords(coords),
            h0: Arc::new(vec![h0_0, h0_1]),
            t: 1.0,
        };
        let (_, _, h_hat) = advect_preweights(&state.h0, &state.phi_inv).unwrap();
        for i in 0..g.len() {
            let c = g.node_coords(i);
            if c[0] > a[0] + 0.02 && c[1] > a[1] + 0.02 {
                let expect = h_smooth(&[c[0] - a[0], c[1] - a[1]]);
                assert!(
                    (h_hat[0].values()[i] - expect).abs() < 1e-3,
                    "at {c:?}: {} vs {expect}",
                    h_hat[0].values()[i]
                );
            }
        }
    }

    /// Independently coded plain EPDiff right-hand side for the
    /// constant-weight reduction check.
    fn plain_epdiff_rhs(
        m: &VectorField,
        c_sq: &[f64],
        kernel: &MultiGaussianKernel,
    ) -> VectorField {
        let grid = m.grid().clone();
        let d = grid.d();
        let n = grid.len();
        let mut v = VectorField::zeros(&grid);
        for (i, &sigma) in kernel.sigmas().iter().enumerate() {
            let smoothed = kernels::gauss_conv_vector(m, sigma).unwrap();
            for k in 0..v.data().len() {
                v.data_mut()[k] += c_sq[i] * smoothed.data()[k];
            }
        }
        let mut out = VectorField::zeros(&grid);
        let mut divv = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for a in 0..d {
            field::deriv_axis(&grid, v.comp(a), a, &mut tmp);
            for k in 0..n {
                divv[k] += tmp[k];
            }
        }
        for c in 0..d {
            for k in 0..n {
                out.comp_mut(c)[k] = -divv[k] * m.comp(c)[k];
            }
            for b in 0..d {
                field::deriv_axis(&grid, v.comp(b), c, &mut tmp);
                for k in 0..n {
                    out.comp_mut(c)[k] -= m.comp(b)[k] * tmp[k];
                }
                field::deriv_axis(&grid, m.comp(c), b, &mut tmp);
                for k in 0..n {
                    out.comp_mut(c)[k] -= tmp[k] * v.comp(b)[k];
                }
            }
        }
        out
    }

    #[test]
    fn constant_weights_reduce_to_epdiff() {
        let g = grid2(33);
        let kernel = kernel2();
        let h_sq = [0.4, 0.6];
        let h0 = constant_preweights(&g, &h_sq);
        let m = smooth_momentum(&g, 21, 0.3);
        let state = GeodesicState::initial(m.clone(), h0).unwrap();
        let (dm, _) = rdmm_rhs(&state, &kernel).unwrap();
        let reference = plain_epdiff_rhs(&m, &h_sq, &kernel);
        let scale = reference.data().iter().map(|x| x.abs()).fold(0.0f64, f64::max);
        for i in 0..dm.data().len() {
            assert!(
                (dm.data()[i] - reference.data()[i]).abs() <= 1e-12 * scale.max(1.0),
                "mismatch at {i}"
            );
        }
        // the Thm-2 source term is identically zero for constant weights:
        // gradient of a constant field is exactly zero, so dm equals the
        // plain EPDiff value, which the assertion above already pins.
    }

    #[test]
    fn rhs_matches_independent_implementation() {
        // Same momentum-based formulas, coded separately with brute-force
        // spatial convolutions and scalar loops.
        let n = 33;
        let g = grid2(n);
        let kernel = kernel2();
        let h0 = smooth_preweights(&g, 2);
        let m = smooth_momentum(&g, 3, 0.3);
        let state = GeodesicState::initial(m.clone(), h0.clone()).unwrap();
        let (dm, _) = rdmm_rhs(&state, &kernel).unwrap();

        let spatial_conv = |input: &[f64], sigma: f64| -> Vec<f64> {
            let h = 1.0 / (n - 1) as f64;
            let mut g1 = vec![0.0; n];
            for (j, gj) in g1.iter_mut().enumerate() {
                for wrap in -3i64..=3 {
                    let x = (j as i64 + wrap * n as i64) as f64 * h;
                    *gj += (-x * x / (2.0 * sigma * sigma)).exp();
                }
            }
            let s: f64 = g1.iter().sum();
            g1.iter_mut().for_each(|v| *v /= s);
            let mut out = vec![0.0; n * n];
            // separable passes
            let mut mid = vec![0.0; n * n];
            for x0 in 0..n {
                for x1 in 0..n {
                    let mut acc = 0.0;
                    for y1 in 0..n {
                        acc += g1[(x1 + n - y1) % n] * input[x0 * n + y1];
                    }
                    mid[x0 * n + x1] = acc;
                }
            }
            for x0 in 0..n {
                for x1 in 0..n {
                    let mut acc = 0.0;
                    for y0 in 0..n {
                        acc += g1[(x0 + n - y0) % n] * mid[y0 * n + x1];
                    }
                    out[x0 * n + x1] = acc;
                }
            }
            out
        };
        let diff = |f: &[f64], axis: usize| -> Vec<f64> {
            let h = 1.0 / (n - 1) as f64;
            let mut out = vec![0.0; n * n];
            for i0 in 0..n {
                for i1 in 0..n {
                    let at = |a: usize, b: usize| f[a * n + b];
                    let v = if axis == 0 {
                        if i0 == 0 {
                            (at(1, i1) - at(0, i1)) / h
                        } else if i0 == n - 1 {
                            (at(n - 1, i1) - at(n - 2, i1)) / h
                        } else {
                            (at(i0 + 1, i1) - at(i0 - 1, i1)) / (2.0 * h)
                        }
                    } else if i1 == 0 {
                        (at(i0, 1) - at(i0, 0)) / h
                    } else if i1 == n - 1 {
                        (at(i0, n - 1) - at(i0, n - 2)) / h
                    } else {
                        (at(i0, i1 + 1) - at(i0, i1 - 1)) / (2.0 * h)
                    };
                    out[i0 * n + i1] = v;
                }
            }
            out
        };

        // weights at t=0 are exactly h0 (identity map)
        let w: Vec<Vec<f64>> = h0
            .iter()
            .map(|hi| spatial_conv(hi.values(), kernel.preweight_sigma()))
            .collect();
        let total = n * n;
        let mut v = vec![vec![0.0; total]; 2];
        let mut nus = Vec::new();
        for (i, &sigma) in kernel.sigmas().iter().enumerate() {
            let mut nu = Vec::new();
            for c in 0..2 {
                let wm: Vec<f64> =
                    (0..total).map(|k| w[i][k] * m.comp(c)[k]).collect();
                nu.push(spatial_conv(&wm, sigma));
            }
            for c in 0..2 {
                for k in 0..total {
                    v[c][k] += w[i][k] * nu[c][k];
                }
            }
            nus.push(nu);
        }
        let dv00 = diff(&v[0], 0);
        let dv01 = diff(&v[0], 1);
        let dv10 = diff(&v[1], 0);
        let dv11 = diff(&v[1], 1);
        let mut expect = vec![vec![0.0; total]; 2];
        let dm00 = diff(m.comp(0), 0);
        let dm01 = diff(m.comp(0), 1);
        let dm10 = diff(m.comp(1), 0);
        let dm11 = diff(m.comp(1), 1);
        for k in 0..total {
            let divv = dv00[k] + dv11[k];
            expect[0][k] = -(divv * m.comp(0)[k]
                + m.comp(0)[k] * dv00[k]
                + m.comp(1)[k] * dv10[k]
                + dm00[k] * v[0][k]
                + dm01[k] * v[1][k]);
            expect[1][k] = -(divv * m.comp(1)[k]
                + m.comp(0)[k] * dv01[k]
                + m.comp(1)[k] * dv11[k]
                + dm10[k] * v[0][k]
                + dm11[k] * v[1][k]);
        }
        for i in 0..kernel.n() {
            let mdotnu: Vec<f64> = (0..total)
                .map(|k| m.comp(0)[k] * nus[i][0][k] + m.comp(1)[k] * nus[i][1][k])
                .collect();
            let qi = spatial_conv(&mdotnu, kernel.preweight_sigma());
            let dh0 = diff(h0[i].values(), 0);
            let dh1 = diff(h0[i].values(), 1);
            for k in 0..total {
                expect[0][k] += qi[k] * dh0[k];
                expect[1][k] += qi[k] * dh1[k];
            }
        }
        let scale = expect
            .iter()
            .flatten()
            .map(|x| x.abs())
            .fold(0.0f64, f64::max);
        for c in 0..2 {
            for k in 0..total {
                let rel = (dm.comp(c)[k] - expect[c][k]).abs() / scale;
                assert!(rel < 1e-6, "component {c} node {k}: rel {rel}");
            }
        }
    }

    #[test]
    fn self_convergence_order() {
        let g = grid2(33);
        let kernel = kernel2();
        let h0 = constant_preweights(&g, &[0.4, 0.6]);
        let m = smooth_momentum(&g, 8, 0.3);
        let run = |n_steps: usize| {
            let state = GeodesicState::initial(m.clone(), h0.clone()).unwrap();
            integrate_geodesic(&state, &kernel, &IntegratorConfig { n_steps })
                .unwrap()
                .last()
                .unwrap()
                .phi_inv
                .clone()
        };
        let coarse = run(20);
        let fine = run(40);
        let mut max_diff = 0.0f64;
        for i in 0..coarse.coords().data().len() {
            max_diff = max_diff.max((coarse.coords().data()[i] - fine.coords().data()[i]).abs());
        }
        assert!(max_diff < 1e-4, "RK4 self-convergence gap {max_diff}");
    }

    #[test]
    fn energy_scaling_and_conservation() {
        let g = grid2(65);
        let kernel = kernel2();
        let h0 = smooth_preweights(&g, 2);
        let m = smooth_momentum(&g, 4, 0.15);
        let state = GeodesicState::initial(m.clone(), h0.clone()).unwrap();
        let e0 = energy(&state, &kernel).unwrap();
        assert!(e0 > 0.0);
        // doubling the momentum quadruples the energy
        let mut m2 = m.clone();
        for v in m2.data_mut() {
            *v *= 2.0;
        }
        let state2 = GeodesicState::initial(m2, h0.clone()).unwrap();
        let e2 = energy(&state2, &kernel).unwrap();
        assert!((e2 / e0 - 4.0).abs() < 1e-10);
        // zero momentum has zero energy
        let z = GeodesicState::initial(VectorField::zeros(&g), h0.clone()).unwrap();
        assert_eq!(energy(&z, &kernel).unwrap(), 0.0);
        // drift over the trajectory
        let traj =
            integrate_geodesic(&state, &kernel, &IntegratorConfig { n_steps: 20 }).unwrap();
        let e1 = energy(traj.last().unwrap(), &kernel).unwrap();
        let drift = (e1 - e0).abs() / e0;
        assert!(drift < 0.01, "energy drift {drift}");
    }
}
