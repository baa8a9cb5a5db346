//! Seeded generator of paired 2D synthetic scenes: one container
//! ("foreground") shape holding two inner objects, plus a few objects
//! outside it. The target scene perturbs every shape's shift, scale and
//! rotation. Images are rasterized with 2x2 supersampling; labels are
//! rendered crisp (nearest sample) for Dice evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RdmmError, Result};
use crate::field::{GridSpec, ScalarField};
use crate::kernels::MultiGaussianKernel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Triangle,
    Ellipse,
}

/// One rigid shape with constant intensity. Triangles are isoceles with
/// `size` as (base, height).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub rotation: f64,
    pub intensity: f64,
    pub label: i64,
}

impl ShapeSpec {
    /// Radius of the circumscribed circle around the local bounding box.
    fn bound_radius(&self) -> f64 {
        0.5 * (self.size.0 * self.size.0 + self.size.1 * self.size.1).sqrt()
    }

    /// Membership test in world coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        // rotate into the local frame
        let qx = c * dx + s * dy;
        let qy = -s * dx + c * dy;
        let (a, b) = (self.size.0 * 0.5, self.size.1 * 0.5);
        match self.kind {
            ShapeKind::Rectangle => qx.abs() <= a && qy.abs() <= b,
            ShapeKind::Ellipse => {
                let u = qx / a;
                let v = qy / b;
                u * u + v * v <= 1.0
            }
            ShapeKind::Triangle => {
                // base at qy = -b, apex at (0, b)
                if qy < -b || qy > b {
                    return false;
                }
                let half_width = a * (b - qy) / (2.0 * b);
                qx.abs() <= half_width
            }
        }
    }

    fn inside_domain(&self, margin: f64) -> bool {
        let r = self.bound_radius();
        self.center.0 - r >= margin
            && self.center.0 + r <= 1.0 - margin
            && self.center.1 - r >= margin
            && self.center.1 + r <= 1.0 - margin
    }
}

/// Perturbation magnitudes and scene composition knobs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GenParams {
    pub max_shift: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub max_rotation: f64,
    pub max_outer: usize,
    pub max_retries: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_shift: 0.1,
            scale_lo: 0.8,
            scale_hi: 1.25,
            max_rotation: 0.3,
            max_outer: 5,
            max_retries: 300,
        }
    }
}

/// A registered pair of synthetic scenes on one grid.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub source_image: ScalarField,
    pub target_image: ScalarField,
    pub source_labels: ScalarField,
    pub target_labels: ScalarField,
    pub foreground_mask_source: ScalarField,
    pub source_shapes: Vec<ShapeSpec>,
    pub target_shapes: Vec<ShapeSpec>,
    pub seed: u64,
}

const DOMAIN_MARGIN: f64 = 0.02;

/// Rasterizes a shape list (later shapes overwrite earlier ones) into
/// an antialiased intensity image and crisp integer labels.
pub fn render_scene(shapes: &[ShapeSpec], grid: &GridSpec) -> Result<(ScalarField, ScalarField)> {
    if grid.d() != 2 {
        return Err(RdmmError::InvalidParameter("scene rendering is 2D only".into()));
    }
    let n = grid.len();
    let mut image = vec![0.0; n];
    let mut labels = vec![0.0; n];
    let h0 = grid.spacing(0);
    let h1 = grid.spacing(1);
    let offsets = [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)];
    for idx in 0..n {
        let p = grid.node_coords(idx);
        let mut acc = 0.0;
        for &(ox, oy) in &offsets {
            let x = p[0] + ox * h0;
            let y = p[1] + oy * h1;
            let mut val = 0.0;
            for sh in shapes {
                if sh.contains(x, y) {
                    val = sh.intensity;
                }
            }
            acc += val;
        }
        image[idx] = acc * 0.25;
        let mut lab = 0.0;
        for sh in shapes {
            if sh.contains(p[0], p[1]) {
                lab = sh.label as f64;
            }
        }
        labels[idx] = lab;
    }
    Ok((
        ScalarField::from_vec(grid, image)?,
        ScalarField::from_vec(grid, labels)?,
    ))
}

fn random_kind(rng: &mut ChaCha8Rng) -> ShapeKind {
    match rng.gen_range(0u32..3) {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Triangle,
        _ => ShapeKind::Ellipse,
    }
}

/// A shape sits strictly inside `outer` if a ring of points around its
/// bounding circle does (all shapes are convex).
fn strictly_inside(inner: &ShapeSpec, outer: &ShapeSpec, inflate: f64, margin: f64) -> bool {
    let r = inner.bound_radius() * inflate + margin;
    let (cx, cy) = inner.center;
    (0..16).all(|k| {
        let ang = k as f64 * std::f64::consts::TAU / 16.0;
        outer.contains(cx + r * ang.cos(), cy + r * ang.sin())
    })
}

fn fully_outside(candidate: &ShapeSpec, other: &ShapeSpec, inflate: f64) -> bool {
    let r = candidate.bound_radius() * inflate;
    let (cx, cy) = candidate.center;
    if other.contains(cx, cy) {
        return false;
    }
    (0..16).all(|k| {
        let ang = k as f64 * std::f64::consts::TAU / 16.0;
        !other.contains(cx + r * ang.cos(), cy + r * ang.sin())
    })
}

fn perturb(sh: &ShapeSpec, rng: &mut ChaCha8Rng, params: &GenParams, shift_cap: f64) -> ShapeSpec {
    // cap the shift by the shape size so the pair keeps nonzero overlap
    let bound = params.max_shift.min(shift_cap).min(0.35 * sh.size.0.min(sh.size.1));
    let mag = bound * (0.3 + 0.7 * rng.gen::<f64>());
    let ang = rng.gen::<f64>() * std::f64::consts::TAU;
    let scale = params.scale_lo + (params.scale_hi - params.scale_lo) * rng.gen::<f64>();
    let rot = (2.0 * rng.gen::<f64>() - 1.0) * params.max_rotation;
    ShapeSpec {
        kind: sh.kind,
        center: (sh.center.0 + mag * ang.cos(), sh.center.1 + mag * ang.sin()),
        size: (sh.size.0 * scale, sh.size.1 * scale),
        rotation: sh.rotation + rot,
        intensity: sh.intensity,
        label: sh.label,
    }
}

/// Generates one scene pair, deterministic in `(seed, grid, params)`.
pub fn generate_pair(seed: u64, grid: &GridSpec, params: &GenParams) -> Result<ScenePair> {
    if grid.d() != 2 || grid.dims().iter().any(|&n| n < 64) {
        return Err(RdmmError::InvalidParameter(
            "scene generation needs a 2D grid with at least 64 nodes per axis".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // container
    let container = {
        let mut found = None;
        for _ in 0..params.max_retries {
            // rectangles and ellipses leave enough inscribed room for
            // the two inner objects; triangles still occur as objects
            let kind = if rng.gen::<f64>() < 0.5 {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            };
            let cand = ShapeSpec {
                kind,
                center: (
                    0.42 + 0.16 * rng.gen::<f64>(),
                    0.42 + 0.16 * rng.gen::<f64>(),
                ),
                size: (
                    0.40 + 0.12 * rng.gen::<f64>(),
                    0.40 + 0.12 * rng.gen::<f64>(),
                ),
                rotation: (2.0 * rng.gen::<f64>() - 1.0) * params.max_rotation,
                intensity: 0.25 + 0.15 * rng.gen::<f64>(),
                label: 1,
            };
            if cand.inside_domain(DOMAIN_MARGIN) {
                found = Some(cand);
                break;
            }
        }
        found.ok_or_else(|| RdmmError::Generation("container placement failed".into()))?
    };

    let mut shapes = vec![container];

    // two objects inside the container
    for i in 0..2 {
        let mut placed = false;
        for _ in 0..params.max_retries {
            let size = 0.05 + 0.05 * rng.gen::<f64>();
            // sample the center inside the container itself, which for
            // triangles is much smaller than its bounding box
            let center = loop {
                let c = (
                    container.center.0 + (2.0 * rng.gen::<f64>() - 1.0) * 0.25,
                    container.center.1 + (2.0 * rng.gen::<f64>() - 1.0) * 0.25,
                );
                if container.contains(c.0, c.1) {
                    break c;
                }
            };
            let cand = ShapeSpec {
                kind: random_kind(&mut rng),
                center,
                size: (size, size * (0.7 + 0.6 * rng.gen::<f64>())),
                rotation: (2.0 * rng.gen::<f64>() - 1.0) * params.max_rotation,
                intensity: 0.6 + 0.35 * rng.gen::<f64>(),
                label: 2 + i,
            };
            let clear_of_sibling = shapes[1..]
                .iter()
                .all(|s| {
                    let dx = cand.center.0 - s.center.0;
                    let dy = cand.center.1 - s.center.1;
                    (dx * dx + dy * dy).sqrt() > 1.15 * (cand.bound_radius() + s.bound_radius())
                });
            if strictly_inside(&cand, &container, 1.1, 0.05) && clear_of_sibling {
                shapes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(RdmmError::Generation(format!(
                "inner object {i} placement failed for seed {seed}"
            )));
        }
    }

    // objects outside the container
    let n_outer = rng.gen_range(2..=params.max_outer.max(2));
    for i in 0..n_outer {
        let mut placed = false;
        for _ in 0..params.max_retries {
            let size = 0.06 + 0.08 * rng.gen::<f64>();
            let cand = ShapeSpec {
                kind: random_kind(&mut rng),
                center: (
                    DOMAIN_MARGIN + 0.96 * rng.gen::<f64>(),
                    DOMAIN_MARGIN + 0.96 * rng.gen::<f64>(),
                ),
                size: (size, size * (0.7 + 0.6 * rng.gen::<f64>())),
                rotation: (2.0 * rng.gen::<f64>() - 1.0) * params.max_rotation,
                intensity: 0.55 + 0.4 * rng.gen::<f64>(),
                label: 4 + i as i64,
            };
            let clear_of_others = shapes[1..].iter().all(|s| {
                let dx = cand.center.0 - s.center.0;
                let dy = cand.center.1 - s.center.1;
                (dx * dx + dy * dy).sqrt() > 1.25 * (cand.bound_radius() + s.bound_radius())
            });
            if cand.inside_domain(DOMAIN_MARGIN)
                && fully_outside(&cand, &container, 1.45)
                && clear_of_others
            {
                shapes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(RdmmError::Generation(format!(
                "outer object {i} placement failed for seed {seed}"
            )));
        }
    }

    // perturb into the target scene, preserving the containment
    // structure; inner objects ride along with the container's shift,
    // and a failed attempt re-perturbs the whole scene
    let mut target_shapes = Vec::new();
    'attempt: for _ in 0..params.max_retries {
        target_shapes.clear();
        let mut container_ok = false;
        for _ in 0..params.max_retries {
            // modest container shift keeps inner objects contained and
            // every identity Dice away from zero
            let cand = perturb(&shapes[0], &mut rng, params, 0.05);
            if cand.inside_domain(DOMAIN_MARGIN) {
                target_shapes.push(cand);
                container_ok = true;
                break;
            }
        }
        if !container_ok {
            continue;
        }
        let target_container = target_shapes[0];
        for (i, sh) in shapes.iter().enumerate().skip(1) {
            let inner = i <= 2;
            let mut found = None;
            for _ in 0..params.max_retries {
                let cand = perturb(sh, &mut rng, params, params.max_shift);
                let ok = cand.inside_domain(DOMAIN_MARGIN)
                    && if inner {
                        strictly_inside(&cand, &target_container, 1.02, 0.0)
                    } else {
                        fully_outside(&cand, &target_container, 1.02)
                    };
                if ok {
                    found = Some(cand);
                    break;
                }
            }
            match found {
                Some(cand) => target_shapes.push(cand),
                None => continue 'attempt,
            }
        }
        break;
    }
    if target_shapes.len() != shapes.len() {
        return Err(RdmmError::Generation(format!(
            "target perturbation failed for seed {seed}"
        )));
    }

    let (source_image, source_labels) = render_scene(&shapes, grid)?;
    let (target_image, target_labels) = render_scene(&target_shapes, grid)?;
    let mask = ScalarField::from_fn(grid, |p| {
        if shapes[0].contains(p[0], p[1]) { 1.0 } else { 0.0 }
    });

    Ok(ScenePair {
        source_image,
        target_image,
        source_labels,
        target_labels,
        foreground_mask_source: mask,
        source_shapes: shapes,
        target_shapes,
        seed,
    })
}

/// Piecewise-constant pre-weights from the scene's foreground mask:
/// `h_i = sqrt(fg_h_sq_i)` inside, `sqrt(bg_h_sq_i)` outside.
pub fn region_preweights(
    mask: &ScalarField,
    fg_h_sq: &[f64],
    bg_h_sq: &[f64],
    kernel: &MultiGaussianKernel,
) -> Result<Vec<ScalarField>> {
    if fg_h_sq.len() != kernel.n() || bg_h_sq.len() != kernel.n() {
        return Err(RdmmError::InvalidParameter(
            "pre-weight lists must match the kernel count".into(),
        ));
    }
    for (name, list) in [("foreground", fg_h_sq), ("background", bg_h_sq)] {
        if list.iter().any(|&v| v < 0.0) {
            return Err(RdmmError::InvalidParameter(format!(
                "{name} squared pre-weights must be >= 0"
            )));
        }
        let total: f64 = list.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(RdmmError::InvalidParameter(format!(
                "{name} squared pre-weights must sum to 1, got {total}"
            )));
        }
    }
    let grid = mask.grid().clone();
    (0..kernel.n())
        .map(|i| {
            let fg = fg_h_sq[i].sqrt();
            let bg = bg_h_sq[i].sqrt();
            let vals = mask
                .values()
                .iter()
                .map(|&m| if m > 0.5 { fg } else { bg })
                .collect();
            ScalarField::from_vec(&grid, vals)
        })
        .collect()
}
