//! Multi-scale gradient-descent estimation of the initial momentum and
//! (optionally) the regularizer pre-weights.
//!
//! Gradients come from the exact discrete adjoint; steps are taken in
//! the L2 density metric (gradients divided by the cell volume) so step
//! sizes transfer across scales, and a backtracking line search keeps
//! the per-scale objective log monotone. The pointwise constraints
//! `h_i >= 0` and `sum_i h_i^2 = 1` are maintained by taking the
//! absolute value and renormalizing after every trial step.

use serde::{Deserialize, Serialize};

use crate::adjoint;
use crate::dynamics::{self, GeodesicState, IntegratorConfig};
use crate::error::{RdmmError, Result};
use crate::field::{
    self, GridSpec, ScalarField, TransformMap, VectorField,
};
use crate::kernels::MultiGaussianKernel;
use crate::objectives::{
    self, ObjectiveBreakdown, RegPenaltyConfig, ShootingConfig, SimilarityConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationMode {
    Lddmm,
    RdmmFixed,
    RdmmJoint,
}

/// One resolution level of the coarse-to-fine schedule.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub factor: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step_m: f64,
    pub step_h: f64,
    pub grad_tolerance: f64,
    pub shrink: f64,
    pub grow: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_m: 0.1,
            step_h: 0.1,
            grad_tolerance: 1e-8,
            shrink: 0.5,
            grow: 1.3,
            max_backtracks: 30,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub mode: RegistrationMode,
    pub scales: Vec<ScaleConfig>,
    pub kernel: MultiGaussianKernel,
    pub penalties: RegPenaltyConfig,
    pub similarity: SimilarityConfig,
    pub integrator: IntegratorConfig,
    pub optimizer: OptimizerConfig,
    pub lambda_kin: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            mode: RegistrationMode::RdmmJoint,
            scales: vec![
                ScaleConfig { factor: 0.25, iterations: 60 },
                ScaleConfig { factor: 0.5, iterations: 60 },
                ScaleConfig { factor: 1.0, iterations: 60 },
            ],
            kernel: MultiGaussianKernel::new(&[0.02, 0.04, 0.06, 0.08], 0.05, 2.0)
                .expect("valid default kernel"),
            penalties: RegPenaltyConfig {
                c_omt: 0.05,
                c_range: 10.0,
                k_decay: 10.0,
                w0_sq: vec![0.1, 0.3, 0.3, 0.3],
            },
            similarity: SimilarityConfig::default(),
            integrator: IntegratorConfig { n_steps: 10 },
            optimizer: OptimizerConfig::default(),
            lambda_kin: 1.0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(RdmmError::InvalidParameter("at least one scale required".into()));
        }
        for pair in self.scales.windows(2) {
            if pair[0].factor >= pair[1].factor {
                return Err(RdmmError::InvalidParameter("scales must be ascending".into()));
            }
        }
        let last = self.scales.last().unwrap().factor;
        if (last - 1.0).abs() > 1e-12 {
            return Err(RdmmError::InvalidParameter("final scale must be 1.0".into()));
        }
        if self.scales.iter().any(|s| s.iterations == 0 || s.factor <= 0.0) {
            return Err(RdmmError::InvalidParameter(
                "scale factors must be positive and iterations >= 1".into(),
            ));
        }
        if self.penalties.w0_sq.len() != self.kernel.n() {
            return Err(RdmmError::InvalidParameter(format!(
                "{} reference weights for {} kernels",
                self.penalties.w0_sq.len(),
                self.kernel.n()
            )));
        }
        self.penalties.validate()?;
        self.similarity.validate()?;
        if self.lambda_kin < 0.0 {
            return Err(RdmmError::InvalidParameter("lambda_kin must be >= 0".into()));
        }
        Ok(())
    }

    fn shooting(&self) -> ShootingConfig {
        ShootingConfig {
            similarity: self.similarity.clone(),
            penalties: self.penalties.clone(),
            integrator: self.integrator,
            lambda_kin: self.lambda_kin,
        }
    }
}

/// One line of the optimization log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total: f64,
    pub sim: f64,
    pub kinetic: f64,
    pub omt: f64,
    pub range: f64,
    pub step_size: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RegistrationMetrics {
    pub dice_per_label: Vec<(i64, f64)>,
    pub fold_count: usize,
    pub fold_mass: f64,
    pub energy_drift: f64,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub phi_inv_final: TransformMap,
    pub m0: VectorField,
    pub h0: Vec<ScalarField>,
    pub warped: ScalarField,
    pub breakdown: ObjectiveBreakdown,
    pub per_iteration: Vec<IterationRecord>,
    pub metrics: RegistrationMetrics,
}

fn scaled_grid(full: &GridSpec, factor: f64) -> Result<GridSpec> {
    let dims: Vec<usize> = full
        .dims()
        .iter()
        .map(|&n| (((n - 1) as f64 * factor).round() as usize + 1).max(2))
        .collect();
    GridSpec::new(&dims)
}

fn resample_or_clone(f: &ScalarField, target: &GridSpec) -> ScalarField {
    if f.grid() == target {
        f.clone()
    } else {
        field::resample_scalar(f, target)
    }
}

fn constant_preweights(grid: &GridSpec, w0_sq: &[f64]) -> Vec<ScalarField> {
    w0_sq.iter().map(|&q| ScalarField::constant(grid, q.sqrt())).collect()
}

/// Pointwise `h <- |h| / sqrt(sum_i h_i^2)`.
fn renormalize(h: &mut [ScalarField]) {
    let n = h[0].grid().len();
    let mut s = vec![0.0; n];
    for f in h.iter() {
        for (acc, &v) in s.iter_mut().zip(f.values()) {
            *acc += v * v;
        }
    }
    for v in &mut s {
        *v = v.sqrt().max(1e-12);
    }
    for f in h.iter_mut() {
        for (v, &sv) in f.values_mut().iter_mut().zip(&s) {
            *v = v.abs() / sv;
        }
    }
}

fn resample_preweights(h: &[ScalarField], target: &GridSpec) -> Vec<ScalarField> {
    let mut out: Vec<ScalarField> = h
        .iter()
        .map(|f| resample_or_clone(f, target))
        .collect();
    renormalize(&mut out);
    out
}

struct ScaleOutcome {
    m: VectorField,
    h: Vec<ScalarField>,
    t_global: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_scale(
    src: &ScalarField,
    tgt: &ScalarField,
    mut m: VectorField,
    mut h: Vec<ScalarField>,
    cfg: &RegistrationConfig,
    shooting: &ShootingConfig,
    iterations: usize,
    mut t_global: usize,
    update_h: bool,
    log: &mut Vec<IterationRecord>,
) -> Result<ScaleOutcome> {
    let grid = src.grid().clone();
    let vol = grid.cell_volume();
    let mut step_m = cfg.optimizer.step_m;
    let mut step_h = cfg.optimizer.step_h;
    let step_m_cap = cfg.optimizer.step_m * 10.0;
    let step_h_cap = cfg.optimizer.step_h * 10.0;

    for _ in 0..iterations {
        let state0 = GeodesicState::initial(m.clone(), h.clone())?;
        let grad = adjoint::objective_gradient(&state0, src, tgt, &cfg.kernel, shooting, t_global)?;
        if !grad.grad_m0.all_finite() || grad.grad_h0.iter().any(|g| !g.all_finite()) {
            return Err(RdmmError::NonFinite("objective gradient".into()));
        }
        log.push(IterationRecord {
            iteration: t_global,
            total: grad.breakdown.total,
            sim: grad.breakdown.sim,
            kinetic: grad.breakdown.kinetic,
            omt: grad.breakdown.omt,
            range: grad.breakdown.range,
            step_size: step_m,
        });

        // L2 density gradients
        let gm: Vec<f64> = grad.grad_m0.data().iter().map(|&v| v / vol).collect();
        let gh: Vec<Vec<f64>> = grad
            .grad_h0
            .iter()
            .map(|g| g.values().iter().map(|&v| v / vol).collect())
            .collect();
        let gnorm = gm
            .iter()
            .chain(gh.iter().flatten().filter(|_| update_h))
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        if gnorm < cfg.optimizer.grad_tolerance {
            break;
        }

        let mut accepted = false;
        for _ in 0..=cfg.optimizer.max_backtracks {
            let mut m_c = m.clone();
            for (v, &g) in m_c.data_mut().iter_mut().zip(&gm) {
                *v -= step_m * g;
            }
            let h_c = if update_h {
                let mut h_c: Vec<ScalarField> = h
                    .iter()
                    .zip(&gh)
                    .map(|(f, g)| {
                        let vals = f
                            .values()
                            .iter()
                            .zip(g)
                            .map(|(&v, &gv)| v - step_h * gv)
                            .collect();
                        ScalarField::from_vec(&grid, vals).expect("same grid")
                    })
                    .collect();
                renormalize(&mut h_c);
                h_c
            } else {
                h.clone()
            };
            let state_c = GeodesicState::initial(m_c.clone(), h_c.clone())?;
            let trial = objectives::shooting_objective(
                &state_c, src, tgt, &cfg.kernel, shooting, t_global,
            );
            match trial {
                Ok(b) if b.total.is_finite() && b.total < grad.breakdown.total => {
                    m = m_c;
                    h = h_c;
                    step_m = (step_m * cfg.optimizer.grow).min(step_m_cap);
                    step_h = (step_h * cfg.optimizer.grow).min(step_h_cap);
                    accepted = true;
                    break;
                }
                Ok(_) | Err(RdmmError::IntegrationBlowup { .. }) => {
                    step_m *= cfg.optimizer.shrink;
                    step_h *= cfg.optimizer.shrink;
                }
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            // no descent direction at the smallest step: converged
            break;
        }
        t_global += 1;
    }
    Ok(ScaleOutcome { m, h, t_global })
}

/// Runs the full multi-scale registration. `fixed_h0` is required in
/// pre-defined-regularizer mode and frozen there; `labels` are
/// integer-valued segmentations used only for the final Dice metric.
pub fn optimize(
    source: &ScalarField,
    target: &ScalarField,
    cfg: &RegistrationConfig,
    fixed_h0: Option<&[ScalarField]>,
    labels: Option<(&ScalarField, &ScalarField)>,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if source.grid() != target.grid() {
        return Err(RdmmError::GridMismatch("source and target grids differ".into()));
    }
    if cfg.mode == RegistrationMode::RdmmFixed && fixed_h0.is_none() {
        return Err(RdmmError::InvalidParameter(
            "pre-defined regularizer mode needs initial pre-weights".into(),
        ));
    }
    if let Some(h) = fixed_h0 {
        if h.len() != cfg.kernel.n() {
            return Err(RdmmError::InvalidParameter(format!(
                "{} fixed pre-weights for {} kernels",
                h.len(),
                cfg.kernel.n()
            )));
        }
        for f in h {
            if f.grid() != source.grid() {
                return Err(RdmmError::GridMismatch("fixed pre-weights on wrong grid".into()));
            }
        }
    }

    let shooting = cfg.shooting();
    let full_grid = source.grid().clone();
    let update_h = cfg.mode == RegistrationMode::RdmmJoint;
    let mut log = Vec::new();
    let mut m_prev: Option<VectorField> = None;
    let mut h_prev: Option<Vec<ScalarField>> = None;
    let mut t_global = 0usize;

    for scale in &cfg.scales {
        let grid_s = scaled_grid(&full_grid, scale.factor)?;
        let src_s = resample_or_clone(source, &grid_s);
        let tgt_s = resample_or_clone(target, &grid_s);
        let m_s = match &m_prev {
            Some(prev) if prev.grid() != &grid_s => field::resample_vector(prev, &grid_s),
            Some(prev) => prev.clone(),
            None => VectorField::zeros(&grid_s),
        };
        let h_s = match cfg.mode {
            RegistrationMode::Lddmm => constant_preweights(&grid_s, &cfg.penalties.w0_sq),
            RegistrationMode::RdmmFixed => {
                let h = fixed_h0.unwrap();
                if &grid_s == &full_grid {
                    h.to_vec()
                } else {
                    resample_preweights(h, &grid_s)
                }
            }
            RegistrationMode::RdmmJoint => match &h_prev {
                Some(prev) => resample_preweights(prev, &grid_s),
                None => constant_preweights(&grid_s, &cfg.penalties.w0_sq),
            },
        };
        let outcome = run_scale(
            &src_s,
            &tgt_s,
            m_s,
            h_s,
            cfg,
            &shooting,
            scale.iterations,
            t_global,
            update_h,
            &mut log,
        )?;
        t_global = outcome.t_global;
        m_prev = Some(outcome.m);
        h_prev = Some(outcome.h);
    }

    let m0 = m_prev.unwrap();
    let h0 = h_prev.unwrap();
    let state0 = GeodesicState::initial(m0.clone(), h0.clone())?;
    let (breakdown, traj, warped) =
        objectives::shooting_objective_full(&state0, source, target, &cfg.kernel, &shooting, t_global)?;
    let phi_inv_final = traj.last().unwrap().phi_inv.clone();

    let e0 = dynamics::energy(&traj[0], &cfg.kernel)?;
    let e1 = dynamics::energy(traj.last().unwrap(), &cfg.kernel)?;
    let energy_drift = (e1 - e0).abs() / e0.max(1e-30);
    let (fold_count, fold_mass) = fold_measure(&phi_inv_final);
    let dice_per_label = match labels {
        Some((src_lab, tgt_lab)) => {
            let warped_lab = warp_labels_nearest(src_lab, &phi_inv_final)?;
            let mut ids: Vec<i64> = tgt_lab
                .values()
                .iter()
                .chain(warped_lab.values())
                .map(|&v| v.round() as i64)
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter()
                .map(|id| (id, dice(&warped_lab, tgt_lab, id).unwrap_or(0.0)))
                .collect()
        }
        None => Vec::new(),
    };

    Ok(RegistrationResult {
        phi_inv_final,
        m0,
        h0,
        warped,
        breakdown,
        per_iteration: log,
        metrics: RegistrationMetrics { dice_per_label, fold_count, fold_mass, energy_drift },
    })
}

/// Count and volume-weighted mass of negative-Jacobian nodes.
pub fn fold_measure(map: &TransformMap) -> (usize, f64) {
    let det = field::jacobian_determinant(map);
    let vol = map.grid().cell_volume();
    let mut count = 0;
    let mut mass = 0.0;
    for &v in det.values() {
        if v < 0.0 {
            count += 1;
            mass += v;
        }
    }
    (count, mass.abs() * vol)
}

/// Folding count restricted to interior nodes, where the Jacobian uses
/// central differences.
pub fn fold_count_interior(map: &TransformMap) -> usize {
    let grid = map.grid().clone();
    let det = field::jacobian_determinant(map);
    let d = grid.d();
    let strides = grid.strides();
    let mut count = 0;
    for (idx, &v) in det.values().iter().enumerate() {
        let interior = (0..d).all(|a| {
            let i = (idx / strides[a]) % grid.dims()[a];
            i > 0 && i < grid.dims()[a] - 1
        });
        if interior && v < 0.0 {
            count += 1;
        }
    }
    count
}

/// Pulls integer labels through a map with nearest-neighbor lookup.
pub fn warp_labels_nearest(labels: &ScalarField, map: &TransformMap) -> Result<ScalarField> {
    if labels.grid() != map.grid() {
        return Err(RdmmError::GridMismatch("labels and map grids differ".into()));
    }
    let grid = labels.grid().clone();
    let d = grid.d();
    let strides = grid.strides();
    let coords = map.coords();
    let mut out = vec![0.0; grid.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let mut flat = 0usize;
        for a in 0..d {
            let n = grid.dims()[a];
            let x = coords.comp(a)[idx] * (n - 1) as f64;
            let i = x.round().clamp(0.0, (n - 1) as f64) as usize;
            flat += i * strides[a];
        }
        *o = labels.values()[flat];
    }
    ScalarField::from_vec(&grid, out)
}

/// Dice overlap of one label between two integer-valued fields.
/// Returns 1.0 when the label is absent from both.
pub fn dice(a: &ScalarField, b: &ScalarField, label: i64) -> Result<f64> {
    if a.grid() != b.grid() {
        return Err(RdmmError::GridMismatch("dice arguments on different grids".into()));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let ax = x.round() as i64 == label;
        let by = y.round() as i64 == label;
        inter += (ax && by) as usize;
        total += ax as usize + by as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}
