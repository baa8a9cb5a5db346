//! Exact reverse-mode gradients of the shooting objective.
//!
//! The discrete forward integrator (fixed-step RK4 over the shooting
//! system) is differentiated exactly: each primitive inside one
//! right-hand-side evaluation has a hand-written vector-Jacobian
//! product, the RK4 update is unrolled in reverse with its stage states
//! recomputed, and the similarity / penalty terms contribute their own
//! seeds. The result matches finite differences of the scalar objective
//! to solver precision, independent of step count.

use crate::dynamics::{self, GeodesicState, RhsInternals};
use crate::error::Result;
use crate::fft;
use crate::field::{self, ScalarField, TransformMap, VectorField, MAX_DIM};
use crate::kernels::{self, MultiGaussianKernel};
use crate::objectives::{self, ObjectiveBreakdown, ShootingConfig};

/// Accumulates the vector-Jacobian product of one right-hand-side
/// evaluation into `cot_m`, `cot_phi` (map-coordinate cotangent) and
/// `cot_h0`, given cotangents of the outputs `(dm, dphi)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rhs_vjp(
    m: &VectorField,
    phi_inv: &TransformMap,
    h0: &[ScalarField],
    kernel: &MultiGaussianKernel,
    internals: &RhsInternals,
    cot_dm: &VectorField,
    cot_dphi: &VectorField,
    cot_m: &mut VectorField,
    cot_phi: &mut VectorField,
    cot_h0: &mut [Vec<f64>],
) {
    let grid = m.grid().clone();
    let d = grid.d();
    let n = grid.len();
    let nk = kernel.n();

    let mut cot_v = vec![vec![0.0; n]; d];

    // dphi_a = -sum_b (d phi_a / d x_b) v_b
    let mut jac = vec![0.0; n];
    let mut cot_jac = vec![0.0; n];
    for a in 0..d {
        let ca = cot_dphi.comp(a).to_vec();
        for b in 0..d {
            field::deriv_axis(&grid, phi_inv.coords().comp(a), b, &mut jac);
            let vb = internals.v.comp(b);
            for k in 0..n {
                cot_jac[k] = -ca[k] * vb[k];
                cot_v[b][k] -= jac[k] * ca[k];
            }
            field::deriv_axis_transpose(&grid, &cot_jac, b, cot_phi.comp_mut(a));
        }
    }

    // dm_c = -(div(v) m_c + sum_b m_b dv[b,c] + sum_b dm_jac[c,b] v_b)
    //        + sum_i q_i dh_hat[i,c]
    let mut cot_divv = vec![0.0; n];
    let mut cot_dv = vec![vec![0.0; n]; d * d];
    let mut cot_dm_jac = vec![vec![0.0; n]; d * d];
    let mut cot_dh_hat = vec![vec![0.0; n]; nk * d];
    let mut cot_q = vec![vec![0.0; n]; nk];
    for c in 0..d {
        let cc = cot_dm.comp(c).to_vec();
        let mc = m.comp(c);
        {
            let out = cot_m.comp_mut(c);
            for k in 0..n {
                cot_divv[k] -= cc[k] * mc[k];
                out[k] -= internals.divv[k] * cc[k];
            }
        }
        for b in 0..d {
            let mb = m.comp(b).to_vec();
            let dvbc = &internals.dv[b * d + c];
            let dmcb = &internals.dm_jac[c * d + b];
            let vb = internals.v.comp(b);
            let out = cot_m.comp_mut(b);
            for k in 0..n {
                out[k] -= cc[k] * dvbc[k];
                cot_dv[b * d + c][k] -= cc[k] * mb[k];
                cot_dm_jac[c * d + b][k] -= cc[k] * vb[k];
                cot_v[b][k] -= cc[k] * dmcb[k];
            }
        }
        for i in 0..nk {
            let qi = &internals.q[i];
            let dh = &internals.dh_hat[i * d + c];
            for k in 0..n {
                cot_q[i][k] += cc[k] * dh[k];
                cot_dh_hat[i * d + c][k] += cc[k] * qi[k];
            }
        }
    }

    // q_i = G * (m . nu_i); the smoother is self-adjoint
    let g_resp = fft::gauss_response(&grid, kernel.preweight_sigma());
    fft::conv_batch(&grid, &g_resp, &mut cot_q);
    let mut cot_nu: Vec<VectorField> = (0..nk).map(|_| VectorField::zeros(&grid)).collect();
    for i in 0..nk {
        for c in 0..d {
            let mc = m.comp(c);
            let nc = internals.nus[i].comp(c);
            {
                let out = cot_m.comp_mut(c);
                for k in 0..n {
                    out[k] += cot_q[i][k] * nc[k];
                }
            }
            let out = cot_nu[i].comp_mut(c);
            for k in 0..n {
                out[k] += cot_q[i][k] * mc[k];
            }
        }
    }

    // transpose the finite-difference operators
    for a in 0..d {
        for k in 0..n {
            cot_dv[a * d + a][k] += cot_divv[k];
        }
    }
    for a in 0..d {
        for b in 0..d {
            field::deriv_axis_transpose(&grid, &cot_dv[a * d + b], b, &mut cot_v[a]);
        }
    }
    for c in 0..d {
        for b in 0..d {
            field::deriv_axis_transpose(&grid, &cot_dm_jac[c * d + b], b, cot_m.comp_mut(c));
        }
    }
    let mut cot_h_hat = vec![vec![0.0; n]; nk];
    for i in 0..nk {
        for c in 0..d {
            field::deriv_axis_transpose(&grid, &cot_dh_hat[i * d + c], c, &mut cot_h_hat[i]);
        }
    }

    // v = sum_i w_i (K_i * (w_i m)); each K_i is self-adjoint
    let mut cot_w = vec![vec![0.0; n]; nk];
    for (i, &sigma) in kernel.sigmas().iter().enumerate() {
        let wi = internals.w[i].values().to_vec();
        for c in 0..d {
            let nc = internals.nus[i].comp(c);
            let out = cot_nu[i].comp_mut(c);
            for k in 0..n {
                cot_w[i][k] += cot_v[c][k] * nc[k];
                out[k] += wi[k] * cot_v[c][k];
            }
        }
        let resp = fft::gauss_response(&grid, sigma);
        kernels::conv_components(&grid, &resp, &mut cot_nu[i]);
        for c in 0..d {
            let mc = m.comp(c);
            let u = cot_nu[i].comp(c).to_vec();
            let out = cot_m.comp_mut(c);
            for k in 0..n {
                cot_w[i][k] += u[k] * mc[k];
                out[k] += wi[k] * u[k];
            }
        }
    }

    // w_i = G * h_hat_i
    fft::conv_batch(&grid, &g_resp, &mut cot_w);
    for i in 0..nk {
        for k in 0..n {
            cot_h_hat[i][k] += cot_w[i][k];
        }
    }

    // h_hat_i = h_raw_i / s, s = max(sqrt(sum_j h_raw_j^2), floor)
    let mut cot_h_raw = vec![vec![0.0; n]; nk];
    for k in 0..n {
        let s = internals.s[k];
        let mut raw_sq = 0.0;
        let mut dot = 0.0;
        for i in 0..nk {
            let hv = internals.h_raw[i].values()[k];
            raw_sq += hv * hv;
            dot += cot_h_hat[i][k] * internals.h_hat[i].values()[k];
        }
        let clamped = raw_sq.sqrt() < dynamics::RENORM_FLOOR;
        for i in 0..nk {
            let ch = cot_h_hat[i][k];
            cot_h_raw[i][k] = if clamped {
                ch / s
            } else {
                (ch - internals.h_hat[i].values()[k] * dot) / s
            };
        }
    }

    // h_raw_i(x) = interp(h0_i, phi(x)): scatter into the parameter
    // cotangent and push the coordinate sensitivity into the map
    let coords = phi_inv.coords();
    let mut p = [0.0f64; MAX_DIM];
    let mut g = [0.0f64; MAX_DIM];
    for idx in 0..n {
        for (a, pa) in p.iter_mut().enumerate().take(d) {
            *pa = coords.comp(a)[idx];
        }
        for i in 0..nk {
            let c = cot_h_raw[i][idx];
            if c == 0.0 {
                continue;
            }
            field::interp_with_coord_grad(&grid, h0[i].values(), &p[..d], &mut g);
            for a in 0..d {
                cot_phi.comp_mut(a)[idx] += c * g[a];
            }
            field::interp_scatter(&grid, &mut cot_h0[i], &p[..d], c);
        }
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Reverse sweep through one RK4 step: given the cotangent of the next
/// state, returns the cotangent of the current state and accumulates
/// the shared pre-weight cotangent. Stage states are recomputed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rk4_step_vjp(
    m: &VectorField,
    phi_inv: &TransformMap,
    h0: &[ScalarField],
    kernel: &MultiGaussianKernel,
    dt: f64,
    cot_m_next: &VectorField,
    cot_phi_next: &VectorField,
    cot_h0: &mut [Vec<f64>],
) -> Result<(VectorField, VectorField)> {
    let grid = m.grid().clone();
    let stage = |km: &VectorField, kp: &VectorField, c: f64| -> (VectorField, TransformMap) {
        let mut sm = m.clone();
        axpy(sm.data_mut(), c * dt, km.data());
        let mut sp = phi_inv.clone();
        axpy(sp.coords_mut().data_mut(), c * dt, kp.data());
        (sm, sp)
    };
    let i1 = dynamics::rdmm_rhs_full(m, phi_inv, h0, kernel)?;
    let (m2, p2) = stage(&i1.dm, &i1.dphi, 0.5);
    let i2 = dynamics::rdmm_rhs_full(&m2, &p2, h0, kernel)?;
    let (m3, p3) = stage(&i2.dm, &i2.dphi, 0.5);
    let i3 = dynamics::rdmm_rhs_full(&m3, &p3, h0, kernel)?;
    let (m4, p4) = stage(&i3.dm, &i3.dphi, 1.0);
    let i4 = dynamics::rdmm_rhs_full(&m4, &p4, h0, kernel)?;

    let scaled = |src_m: &VectorField, src_p: &VectorField, f: f64| -> (VectorField, VectorField) {
        let mut om = VectorField::zeros(&grid);
        let mut op = VectorField::zeros(&grid);
        axpy(om.data_mut(), f, src_m.data());
        axpy(op.data_mut(), f, src_p.data());
        (om, op)
    };
    let w = dt / 6.0;
    let (mut ck1m, mut ck1p) = scaled(cot_m_next, cot_phi_next, w);
    let (mut ck2m, mut ck2p) = scaled(cot_m_next, cot_phi_next, 2.0 * w);
    let (mut ck3m, mut ck3p) = scaled(cot_m_next, cot_phi_next, 2.0 * w);
    let (ck4m, ck4p) = scaled(cot_m_next, cot_phi_next, w);
    let mut cx1m = cot_m_next.clone();
    let mut cx1p = cot_phi_next.clone();

    // stage 4: x4 = x1 + dt * k3
    let mut cx4m = VectorField::zeros(&grid);
    let mut cx4p = VectorField::zeros(&grid);
    rhs_vjp(&m4, &p4, h0, kernel, &i4, &ck4m, &ck4p, &mut cx4m, &mut cx4p, cot_h0);
    axpy(cx1m.data_mut(), 1.0, cx4m.data());
    axpy(cx1p.data_mut(), 1.0, cx4p.data());
    axpy(ck3m.data_mut(), dt, cx4m.data());
    axpy(ck3p.data_mut(), dt, cx4p.data());

    // stage 3: x3 = x1 + dt/2 * k2
    let mut cx3m = VectorField::zeros(&grid);
    let mut cx3p = VectorField::zeros(&grid);
    rhs_vjp(&m3, &p3, h0, kernel, &i3, &ck3m, &ck3p, &mut cx3m, &mut cx3p, cot_h0);
    axpy(cx1m.data_mut(), 1.0, cx3m.data());
    axpy(cx1p.data_mut(), 1.0, cx3p.data());
    axpy(ck2m.data_mut(), 0.5 * dt, cx3m.data());
    axpy(ck2p.data_mut(), 0.5 * dt, cx3p.data());

    // stage 2: x2 = x1 + dt/2 * k1
    let mut cx2m = VectorField::zeros(&grid);
    let mut cx2p = VectorField::zeros(&grid);
    rhs_vjp(&m2, &p2, h0, kernel, &i2, &ck2m, &ck2p, &mut cx2m, &mut cx2p, cot_h0);
    axpy(cx1m.data_mut(), 1.0, cx2m.data());
    axpy(cx1p.data_mut(), 1.0, cx2p.data());
    axpy(ck1m.data_mut(), 0.5 * dt, cx2m.data());
    axpy(ck1p.data_mut(), 0.5 * dt, cx2p.data());

    // stage 1 evaluated at the current state
    rhs_vjp(m, phi_inv, h0, kernel, &i1, &ck1m, &ck1p, &mut cx1m, &mut cx1p, cot_h0);

    Ok((cx1m, cx1p))
}

/// Gradients of the time-zero terms (kinetic energy, OMT, range) with
/// respect to the initial momentum and pre-weights, accumulated through
/// the same smoothing / renormalization path the forward pass uses.
fn initial_term_grads(
    state0: &GeodesicState,
    kernel: &MultiGaussianKernel,
    cfg: &ShootingConfig,
    t_iter: usize,
    cot_m: &mut VectorField,
    cot_phi: &mut VectorField,
    cot_h0: &mut [Vec<f64>],
) -> Result<()> {
    let grid = state0.grid().clone();
    let d = grid.d();
    let n = grid.len();
    let nk = kernel.n();
    let vol = grid.cell_volume();

    let (h_raw, s, h_hat) = dynamics::advect_preweights(&state0.h0, &state0.phi_inv)?;
    let w = kernels::preweights_to_weights(&h_hat, kernel)?;
    let (v, nus) = kernels::kernel_apply_full(&state0.m, &w, kernel);

    // kinetic = lambda_kin * 0.5 * vol * <m, v> with symmetric kernel
    axpy(cot_m.data_mut(), cfg.lambda_kin * vol, v.data());

    let (lambda_omt, lambda_range) = objectives::decay_weights(t_iter, &cfg.penalties);
    let omt_g = objectives::omt_penalty_grad(&w, kernel);
    let range_g = objectives::range_penalty_grad(&w, &cfg.penalties.w0_sq);
    let mut cot_w = vec![vec![0.0; n]; nk];
    for i in 0..nk {
        // d(kinetic)/d w_i = lambda_kin * vol * (m . nu_i)
        for c in 0..d {
            let mc = state0.m.comp(c);
            let nc = nus[i].comp(c);
            for k in 0..n {
                cot_w[i][k] += cfg.lambda_kin * vol * mc[k] * nc[k];
            }
        }
        for k in 0..n {
            cot_w[i][k] +=
                lambda_omt * omt_g[i].values()[k] + lambda_range * range_g[i].values()[k];
        }
    }

    // w = G * h_hat, then the renormalization, then the interpolation
    let g_resp = fft::gauss_response(&grid, kernel.preweight_sigma());
    fft::conv_batch(&grid, &g_resp, &mut cot_w);
    let cot_h_hat = cot_w;
    let mut cot_h_raw = vec![vec![0.0; n]; nk];
    for k in 0..n {
        let sk = s[k];
        let mut raw_sq = 0.0;
        let mut dot = 0.0;
        for i in 0..nk {
            let hv = h_raw[i].values()[k];
            raw_sq += hv * hv;
            dot += cot_h_hat[i][k] * h_hat[i].values()[k];
        }
        let clamped = raw_sq.sqrt() < dynamics::RENORM_FLOOR;
        for i in 0..nk {
            let ch = cot_h_hat[i][k];
            cot_h_raw[i][k] = if clamped {
                ch / sk
            } else {
                (ch - h_hat[i].values()[k] * dot) / sk
            };
        }
    }
    let coords = state0.phi_inv.coords();
    let mut p = [0.0f64; MAX_DIM];
    let mut g = [0.0f64; MAX_DIM];
    for idx in 0..n {
        for (a, pa) in p.iter_mut().enumerate().take(d) {
            *pa = coords.comp(a)[idx];
        }
        for i in 0..nk {
            let c = cot_h_raw[i][idx];
            if c == 0.0 {
                continue;
            }
            field::interp_with_coord_grad(&grid, state0.h0[i].values(), &p[..d], &mut g);
            for a in 0..d {
                cot_phi.comp_mut(a)[idx] += c * g[a];
            }
            field::interp_scatter(&grid, &mut cot_h0[i], &p[..d], c);
        }
    }
    Ok(())
}

/// Objective value plus exact gradients with respect to the initial
/// momentum and (tangent-projected) initial pre-weights.
#[derive(Clone, Debug)]
pub struct ObjectiveGradient {
    pub breakdown: ObjectiveBreakdown,
    pub grad_m0: VectorField,
    /// Projected onto the tangent space of the pointwise constraint
    /// `sum_i h_i^2 = 1`.
    pub grad_h0: Vec<ScalarField>,
    pub warped: ScalarField,
}

/// Evaluates the shooting objective and backpropagates through the
/// whole discrete trajectory.
pub fn objective_gradient(
    state0: &GeodesicState,
    source: &ScalarField,
    target: &ScalarField,
    kernel: &MultiGaussianKernel,
    cfg: &ShootingConfig,
    t_iter: usize,
) -> Result<ObjectiveGradient> {
    let grid = state0.grid().clone();
    let d = grid.d();
    let n = grid.len();
    let nk = kernel.n();

    let (breakdown, traj, warped) =
        objectives::shooting_objective_full(state0, source, target, kernel, cfg, t_iter)?;
    let (_, sim_grad) = objectives::similarity_with_grad(&warped, target, &cfg.similarity)?;

    // seed: warped(x) = interp(source, phi(1, x))
    let mut cot_m = VectorField::zeros(&grid);
    let mut cot_phi = VectorField::zeros(&grid);
    let final_coords = traj.last().unwrap().phi_inv.coords();
    let mut p = [0.0f64; MAX_DIM];
    let mut g = [0.0f64; MAX_DIM];
    for idx in 0..n {
        let sg = sim_grad.values()[idx];
        if sg == 0.0 {
            continue;
        }
        for (a, pa) in p.iter_mut().enumerate().take(d) {
            *pa = final_coords.comp(a)[idx];
        }
        field::interp_with_coord_grad(&grid, source.values(), &p[..d], &mut g);
        for a in 0..d {
            cot_phi.comp_mut(a)[idx] += sg * g[a];
        }
    }

    let mut cot_h0 = vec![vec![0.0; n]; nk];
    let n_steps = traj.len() - 1;
    let dt = 1.0 / n_steps as f64;
    for step in (0..n_steps).rev() {
        let st = &traj[step];
        let (nm, np) = rk4_step_vjp(
            &st.m,
            &st.phi_inv,
            &st.h0,
            kernel,
            dt,
            &cot_m,
            &cot_phi,
            &mut cot_h0,
        )?;
        cot_m = nm;
        cot_phi = np;
    }

    initial_term_grads(state0, kernel, cfg, t_iter, &mut cot_m, &mut cot_phi, &mut cot_h0)?;
    // phi(0) is a fixed identity map, so its cotangent is dropped

    // project onto the constraint tangent space pointwise
    let mut grad_h0 = Vec::with_capacity(nk);
    for k in 0..n {
        let mut dot = 0.0;
        for i in 0..nk {
            dot += cot_h0[i][k] * state0.h0[i].values()[k];
        }
        for (i, g) in cot_h0.iter_mut().enumerate() {
            g[k] -= dot * state0.h0[i].values()[k];
        }
    }
    for g in cot_h0 {
        grad_h0.push(ScalarField::from_vec(&grid, g)?);
    }

    Ok(ObjectiveGradient { breakdown, grad_m0: cot_m, grad_h0, warped })
}

/// Audits the analytic gradient against central finite differences of
/// the scalar objective on a seeded random problem, once per
/// registration mode (constant pre-weights, fixed spatially-varying
/// pre-weights, and jointly optimized pre-weights). Returns
/// `(mode name, max relative error)` per mode; probes five random
/// momentum coordinates, plus five pre-weight coordinates in the joint
/// mode where the perturbation is pushed through the pointwise
/// renormalization that the optimizer itself applies.
pub fn check_gradient(size: usize, seed: u64, n_steps: usize) -> Result<Vec<(&'static str, f64)>> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let grid = field::GridSpec::new(&[size, size])?;
    let n = grid.len();
    let d = grid.d();
    let kernel = MultiGaussianKernel::new(&[0.08, 0.15, 0.25], 0.05, 2.0)?;
    let nk = kernel.n();
    let cfg = ShootingConfig {
        similarity: objectives::SimilarityConfig::default(),
        penalties: objectives::RegPenaltyConfig {
            c_omt: 0.05,
            c_range: 10.0,
            k_decay: 10.0,
            w0_sq: vec![1.0 / nk as f64; nk],
        },
        integrator: dynamics::IntegratorConfig { n_steps },
        lambda_kin: 1.0,
    };
    let t_iter = 3;
    let eps = 1e-5;

    let bump = |c: [f64; 2], r: f64| {
        move |p: &[f64]| {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            0.1 + 0.8 * (-(dx * dx + dy * dy) / (r * r)).exp()
        }
    };
    let source = ScalarField::from_fn(&grid, bump([0.45, 0.5], 0.16));
    let target = ScalarField::from_fn(&grid, bump([0.55, 0.54], 0.19));

    let renorm = |raw: &[Vec<f64>]| -> Vec<ScalarField> {
        let mut s = vec![0.0; n];
        for h in raw {
            for (acc, &v) in s.iter_mut().zip(h) {
                *acc += v * v;
            }
        }
        raw.iter()
            .map(|h| {
                let vals = h.iter().zip(&s).map(|(&v, &sv)| v / sv.sqrt().max(1e-300)).collect();
                ScalarField::from_vec(&grid, vals).unwrap()
            })
            .collect()
    };

    let mut report = Vec::new();
    for (mode_ix, mode) in ["lddmm", "rdmm-fixed", "rdmm-joint"].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7919 * mode_ix as u64));

        let mut m0 = VectorField::zeros(&grid);
        for v in m0.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut m0 = kernels::gauss_conv_vector(&m0, 0.15)?;
        let peak = m0.data().iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-30);
        for v in m0.data_mut() {
            *v *= 0.3 / peak;
        }

        let h_raw: Vec<Vec<f64>> = if *mode == "lddmm" {
            (0..nk).map(|_| vec![1.0; n]).collect()
        } else {
            (0..nk)
                .map(|_| (0..n).map(|_| rng.gen_range(0.3..1.0)).collect())
                .collect()
        };
        let h0 = renorm(&h_raw);

        let state0 = GeodesicState::initial(m0.clone(), h0.clone())?;
        let grad = objective_gradient(&state0, &source, &target, &kernel, &cfg, t_iter)?;
        let m_grad_peak = grad
            .grad_m0
            .data()
            .iter()
            .map(|x| x.abs())
            .fold(0.0f64, f64::max);

        let eval_m = |m: VectorField| -> Result<f64> {
            let st = GeodesicState::initial(m, h0.clone())?;
            Ok(objectives::shooting_objective(&st, &source, &target, &kernel, &cfg, t_iter)?.total)
        };

        let mut worst = 0.0f64;
        let mut probes = 0;
        while probes < 5 {
            let c = rng.gen_range(0..d);
            let idx = rng.gen_range(0..n);
            let analytic = grad.grad_m0.comp(c)[idx];
            // skip near-dead coordinates where finite differences are
            // dominated by roundoff
            if analytic.abs() < 1e-3 * m_grad_peak {
                continue;
            }
            probes += 1;
            let mut mp = m0.clone();
            mp.comp_mut(c)[idx] += eps;
            let jp = eval_m(mp)?;
            let mut mm = m0.clone();
            mm.comp_mut(c)[idx] -= eps;
            let jm = eval_m(mm)?;
            let fd = (jp - jm) / (2.0 * eps);
            worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()));
        }

        if *mode == "rdmm-joint" {
            let h_grad_peak = grad
                .grad_h0
                .iter()
                .flat_map(|f| f.values())
                .map(|x| x.abs())
                .fold(0.0f64, f64::max);
            let mut probes = 0;
            while probes < 5 {
                let i = rng.gen_range(0..nk);
                let idx = rng.gen_range(0..n);
                let analytic = grad.grad_h0[i].values()[idx];
                if analytic.abs() < 1e-3 * h_grad_peak {
                    continue;
                }
                probes += 1;
                let eval_h = |delta: f64| -> Result<f64> {
                    let mut raw: Vec<Vec<f64>> =
                        h0.iter().map(|f| f.values().to_vec()).collect();
                    raw[i][idx] += delta;
                    let st = GeodesicState::initial(m0.clone(), renorm(&raw))?;
                    Ok(objectives::shooting_objective(
                        &st, &source, &target, &kernel, &cfg, t_iter,
                    )?
                    .total)
                };
                let fd = (eval_h(eps)? - eval_h(-eps)?) / (2.0 * eps);
                worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()));
            }
        }

        report.push((*mode, worst));
    }
    Ok(report)
}
