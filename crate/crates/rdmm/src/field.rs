//! Regular-grid scalar/vector fields on the unit cube, with multilinear
//! interpolation, finite-difference operators, resampling, and
//! transformation maps.
//!
//! Conventions:
//! - Grids sample `[0,1]^d` with `n` nodes per axis and spacing `1/(n-1)`.
//! - Storage is row-major with axis 0 slowest.
//! - Vector fields are component-major: component `c` is a contiguous
//!   slab of `len` values.
//! - Maps store absolute coordinates (the identity map stores the node
//!   coordinates themselves), not displacements.
//! - Interpolation clamps query points to the domain.

use serde::{Deserialize, Serialize};

use crate::error::{RdmmError, Result};

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// A regular grid over `[0,1]^d`, `d` in {2,3}.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    dims: Vec<usize>,
}

impl GridSpec {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.len() > MAX_DIM {
            return Err(RdmmError::InvalidParameter(format!(
                "grid dimension must be 2 or 3, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&n| n < 2) {
            return Err(RdmmError::InvalidParameter(format!(
                "every axis needs at least 2 samples, got {dims:?}"
            )));
        }
        Ok(Self { dims: dims.to_vec() })
    }

    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        1.0 / (self.dims[axis] - 1) as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.d()).map(|a| self.spacing(a)).product()
    }

    /// Row-major strides, axis 0 slowest.
    pub fn strides(&self) -> [usize; MAX_DIM] {
        let d = self.d();
        let mut s = [0usize; MAX_DIM];
        s[d - 1] = 1;
        for a in (0..d - 1).rev() {
            s[a] = s[a + 1] * self.dims[a + 1];
        }
        s
    }

    /// Coordinates of the node with flat index `idx`.
    pub fn node_coords(&self, idx: usize) -> [f64; MAX_DIM] {
        let d = self.d();
        let strides = self.strides();
        let mut c = [0.0; MAX_DIM];
        let mut rem = idx;
        for a in 0..d {
            let i = rem / strides[a];
            rem %= strides[a];
            c[a] = i as f64 * self.spacing(a);
        }
        c
    }

    /// Visits every flat index along every 1D line in direction `axis`,
    /// handing the callback the line's base offset, stride and length.
    pub(crate) fn for_each_line(&self, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
        let strides = self.strides();
        let stride = strides[axis];
        let len = self.dims[axis];
        let total = self.len();
        let n_lines = total / len;
        // Enumerate bases by walking all indices with index_axis == 0.
        let d = self.d();
        let mut base_axes: Vec<usize> = (0..d).filter(|&a| a != axis).collect();
        base_axes.reverse(); // fastest-varying first
        let mut counters = vec![0usize; base_axes.len()];
        let mut base = 0usize;
        for _ in 0..n_lines {
            f(base, stride, len);
            // odometer increment
            for (k, &a) in base_axes.iter().enumerate() {
                counters[k] += 1;
                base += strides[a];
                if counters[k] < self.dims[a] {
                    break;
                }
                base -= strides[a] * self.dims[a];
                counters[k] = 0;
            }
        }
    }
}

/// Clamped cell lookup for one axis: returns (lower node index, fraction,
/// whether the unclamped query was strictly inside the domain).
#[inline]
fn cell_frac(p: f64, n: usize) -> (usize, f64, bool) {
    let inside = p > 0.0 && p < 1.0;
    let pc = p.clamp(0.0, 1.0);
    let u = pc * (n - 1) as f64;
    let i = (u.floor() as usize).min(n - 2);
    (i, u - i as f64, inside)
}

/// Scalar-valued samples on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self { grid: grid.clone(), data: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: &GridSpec, value: f64) -> Self {
        Self { grid: grid.clone(), data: vec![value; grid.len()] }
    }

    pub fn from_vec(grid: &GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(RdmmError::GridMismatch(format!(
                "value count {} does not match grid size {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid: grid.clone(), data })
    }

    pub fn from_fn(grid: &GridSpec, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let d = grid.d();
        let data = (0..grid.len())
            .map(|idx| {
                let c = grid.node_coords(idx);
                f(&c[..d])
            })
            .collect();
        Self { grid: grid.clone(), data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamped multilinear interpolation at an arbitrary point.
    pub fn interp(&self, p: &[f64]) -> f64 {
        interp_values(&self.grid, &self.data, p)
    }
}

/// d-vector-valued samples on a grid, component-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    data: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self { grid: grid.clone(), data: vec![0.0; grid.len() * grid.d()] }
    }

    pub fn from_components(comps: Vec<ScalarField>) -> Result<Self> {
        let grid = comps[0].grid().clone();
        if comps.len() != grid.d() {
            return Err(RdmmError::GridMismatch(format!(
                "expected {} components, got {}",
                grid.d(),
                comps.len()
            )));
        }
        let mut data = Vec::with_capacity(grid.len() * grid.d());
        for c in &comps {
            if c.grid() != &grid {
                return Err(RdmmError::GridMismatch("component grids differ".into()));
            }
            data.extend_from_slice(c.values());
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn comp(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn comp_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn interp(&self, p: &[f64], out: &mut [f64; MAX_DIM]) {
        let d = self.grid.d();
        for c in 0..d {
            out[c] = interp_values(&self.grid, self.comp(c), p);
        }
    }
}

fn interp_values(grid: &GridSpec, values: &[f64], p: &[f64]) -> f64 {
    let d = grid.d();
    let strides = grid.strides();
    let mut lo = [0usize; MAX_DIM];
    let mut fr = [0.0f64; MAX_DIM];
    for a in 0..d {
        let (i, f, _) = cell_frac(p[a], grid.dims()[a]);
        lo[a] = i;
        fr[a] = f;
    }
    let mut acc = 0.0;
    for mask in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0usize;
        for a in 0..d {
            let bit = (mask >> a) & 1;
            w *= if bit == 1 { fr[a] } else { 1.0 - fr[a] };
            flat += (lo[a] + bit) * strides[a];
        }
        acc += w * values[flat];
    }
    acc
}

/// Interpolation value plus its derivative with respect to the query
/// coordinates (zero for clamped axes). Used by the adjoint pass.
pub(crate) fn interp_with_coord_grad(
    grid: &GridSpec,
    values: &[f64],
    p: &[f64],
    grad: &mut [f64; MAX_DIM],
) -> f64 {
    let d = grid.d();
    let strides = grid.strides();
    let mut lo = [0usize; MAX_DIM];
    let mut fr = [0.0f64; MAX_DIM];
    let mut inside = [false; MAX_DIM];
    for a in 0..d {
        let (i, f, ins) = cell_frac(p[a], grid.dims()[a]);
        lo[a] = i;
        fr[a] = f;
        inside[a] = ins;
    }
    let mut acc = 0.0;
    grad[..d].fill(0.0);
    for mask in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0usize;
        for a in 0..d {
            let bit = (mask >> a) & 1;
            w *= if bit == 1 { fr[a] } else { 1.0 - fr[a] };
            flat += (lo[a] + bit) * strides[a];
        }
        let v = values[flat];
        acc += w * v;
        for a in 0..d {
            if !inside[a] {
                continue;
            }
            let bit = (mask >> a) & 1;
            let sign = if bit == 1 { 1.0 } else { -1.0 };
            let mut wp = sign / grid.spacing(a);
            for b in 0..d {
                if b == a {
                    continue;
                }
                let bbit = (mask >> b) & 1;
                wp *= if bbit == 1 { fr[b] } else { 1.0 - fr[b] };
            }
            grad[a] += wp * v;
        }
    }
    acc
}

/// Scatters `cot` into the corner nodes used by interpolation at `p`
/// (the transpose of the value-side interpolation stencil).
pub(crate) fn interp_scatter(grid: &GridSpec, out: &mut [f64], p: &[f64], cot: f64) {
    let d = grid.d();
    let strides = grid.strides();
    let mut lo = [0usize; MAX_DIM];
    let mut fr = [0.0f64; MAX_DIM];
    for a in 0..d {
        let (i, f, _) = cell_frac(p[a], grid.dims()[a]);
        lo[a] = i;
        fr[a] = f;
    }
    for mask in 0..(1usize << d) {
        let mut w = 1.0;
        let mut flat = 0usize;
        for a in 0..d {
            let bit = (mask >> a) & 1;
            w *= if bit == 1 { fr[a] } else { 1.0 - fr[a] };
            flat += (lo[a] + bit) * strides[a];
        }
        out[flat] += w * cot;
    }
}

/// The inverse map `phi^{-1}` stored as absolute coordinates per node.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformMap {
    coords: VectorField,
}

impl TransformMap {
    pub fn from_coords(coords: VectorField) -> Self {
        Self { coords }
    }

    pub fn grid(&self) -> &GridSpec {
        self.coords.grid()
    }

    pub fn coords(&self) -> &VectorField {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut VectorField {
        &mut self.coords
    }
}

/// The identity map: coords equal node coordinates exactly.
pub fn identity_map(grid: &GridSpec) -> TransformMap {
    let d = grid.d();
    let mut v = VectorField::zeros(grid);
    for c in 0..d {
        let spacing = grid.spacing(c);
        let stride = grid.strides()[c];
        let dim = grid.dims()[c];
        let comp = v.comp_mut(c);
        for (idx, val) in comp.iter_mut().enumerate() {
            let i = (idx / stride) % dim;
            *val = i as f64 * spacing;
        }
    }
    TransformMap::from_coords(v)
}

/// Partial derivative along one axis: central differences in the
/// interior, one-sided at the boundary, scaled by spacing.
pub(crate) fn deriv_axis(grid: &GridSpec, values: &[f64], axis: usize, out: &mut [f64]) {
    let h = grid.spacing(axis);
    let inv2h = 0.5 / h;
    let invh = 1.0 / h;
    grid.for_each_line(axis, |base, stride, len| {
        out[base] = (values[base + stride] - values[base]) * invh;
        for j in 1..len - 1 {
            let k = base + j * stride;
            out[k] = (values[k + stride] - values[k - stride]) * inv2h;
        }
        let last = base + (len - 1) * stride;
        out[last] = (values[last] - values[last - stride]) * invh;
    });
}

/// Transpose of [`deriv_axis`]: accumulates into `out`.
pub(crate) fn deriv_axis_transpose(grid: &GridSpec, cot: &[f64], axis: usize, out: &mut [f64]) {
    let h = grid.spacing(axis);
    let inv2h = 0.5 / h;
    let invh = 1.0 / h;
    grid.for_each_line(axis, |base, stride, len| {
        // j = 0: (f[1]-f[0])/h
        out[base + stride] += cot[base] * invh;
        out[base] -= cot[base] * invh;
        for j in 1..len - 1 {
            let k = base + j * stride;
            out[k + stride] += cot[k] * inv2h;
            out[k - stride] -= cot[k] * inv2h;
        }
        // j = len-1: (f[n-1]-f[n-2])/h
        let last = base + (len - 1) * stride;
        out[last] += cot[last] * invh;
        out[last - stride] -= cot[last] * invh;
    });
}

/// Gradient of a scalar field as a vector field.
pub fn gradient(field: &ScalarField) -> VectorField {
    let grid = field.grid();
    let mut out = VectorField::zeros(grid);
    for a in 0..grid.d() {
        let mut comp = vec![0.0; grid.len()];
        deriv_axis(grid, field.values(), a, &mut comp);
        out.comp_mut(a).copy_from_slice(&comp);
    }
    out
}

/// Per-node determinant of the finite-difference Jacobian of a map.
pub fn jacobian_determinant(map: &TransformMap) -> ScalarField {
    let grid = map.grid().clone();
    let d = grid.d();
    let n = grid.len();
    // jac[a][b] = d coords_a / d x_b
    let mut jac = vec![vec![0.0; n]; d * d];
    for a in 0..d {
        for b in 0..d {
            deriv_axis(&grid, map.coords().comp(a), b, &mut jac[a * d + b]);
        }
    }
    let mut det = vec![0.0; n];
    match d {
        2 => {
            for i in 0..n {
                det[i] = jac[0][i] * jac[3][i] - jac[1][i] * jac[2][i];
            }
        }
        3 => {
            for i in 0..n {
                let m = |r: usize, c: usize| jac[r * 3 + c][i];
                det[i] = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                    - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                    + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
            }
        }
        _ => unreachable!(),
    }
    ScalarField::from_vec(&grid, det).expect("matching grid")
}

/// `result[y] = outer(inner.coords[y])` for a scalar field.
pub fn compose_scalar(outer: &ScalarField, inner: &TransformMap) -> Result<ScalarField> {
    if outer.grid() != inner.grid() {
        return Err(RdmmError::GridMismatch("compose_scalar grids differ".into()));
    }
    let grid = outer.grid().clone();
    let d = grid.d();
    let n = grid.len();
    let mut out = vec![0.0; n];
    let mut p = [0.0f64; MAX_DIM];
    for idx in 0..n {
        for a in 0..d {
            p[a] = inner.coords().comp(a)[idx];
        }
        out[idx] = outer.interp(&p[..d]);
    }
    ScalarField::from_vec(&grid, out)
}

/// Map composition: `result.coords[y] = outer.coords(inner.coords[y])`.
pub fn compose_map(outer: &TransformMap, inner: &TransformMap) -> Result<TransformMap> {
    if outer.grid() != inner.grid() {
        return Err(RdmmError::GridMismatch("compose_map grids differ".into()));
    }
    let grid = outer.grid().clone();
    let d = grid.d();
    let n = grid.len();
    let mut out = VectorField::zeros(&grid);
    let mut p = [0.0f64; MAX_DIM];
    let mut q = [0.0f64; MAX_DIM];
    for idx in 0..n {
        for a in 0..d {
            p[a] = inner.coords().comp(a)[idx];
        }
        outer.coords().interp(&p[..d], &mut q);
        for a in 0..d {
            out.comp_mut(a)[idx] = q[a];
        }
    }
    Ok(TransformMap::from_coords(out))
}

/// Multilinear resampling of a scalar field onto another grid.
pub fn resample_scalar(field: &ScalarField, target: &GridSpec) -> ScalarField {
    let d = target.d();
    ScalarField::from_fn(target, |p| field.interp(&p[..d]))
}

/// Resamples each component of a vector field.
pub fn resample_vector(field: &VectorField, target: &GridSpec) -> VectorField {
    let d = target.d();
    let mut out = VectorField::zeros(target);
    for c in 0..d {
        let comp = ScalarField::from_vec(field.grid(), field.comp(c).to_vec()).unwrap();
        let r = resample_scalar(&comp, target);
        out.comp_mut(c).copy_from_slice(r.values());
    }
    out
}

/// Resamples a map by resampling its coordinate values directly.
pub fn resample_map(map: &TransformMap, target: &GridSpec) -> TransformMap {
    TransformMap::from_coords(resample_vector(map.coords(), target))
}
