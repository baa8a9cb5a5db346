//! Gaussian smoothing and the spatially-weighted multi-Gaussian kernel
//! mapping momentum to velocity:
//!
//! `v(x) = sum_i w_i(x) * [K_{sigma_i} * (w_i m)](x)`
//!
//! with `w_i = G_sigma * h_i` smoothed pre-weights. All convolutions are
//! circular and computed in the Fourier domain.

use serde::{Deserialize, Serialize};

use crate::error::{RdmmError, Result};
use crate::fft;
use crate::field::{GridSpec, ScalarField, VectorField};

/// Ordered Gaussian bank plus the pre-weight smoother.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiGaussianKernel {
    sigmas: Vec<f64>,
    preweight_sigma: f64,
    omt_power: f64,
}

impl MultiGaussianKernel {
    pub fn new(sigmas: &[f64], preweight_sigma: f64, omt_power: f64) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(RdmmError::InvalidParameter("need at least one sigma".into()));
        }
        if sigmas.iter().any(|&s| s <= 0.0) {
            return Err(RdmmError::InvalidParameter("sigmas must be positive".into()));
        }
        if sigmas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RdmmError::InvalidParameter(
                "sigmas must be strictly increasing".into(),
            ));
        }
        if preweight_sigma <= 0.0 {
            return Err(RdmmError::InvalidParameter("preweight sigma must be positive".into()));
        }
        Ok(Self { sigmas: sigmas.to_vec(), preweight_sigma, omt_power })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn n(&self) -> usize {
        self.sigmas.len()
    }

    pub fn preweight_sigma(&self) -> f64 {
        self.preweight_sigma
    }

    pub fn omt_power(&self) -> f64 {
        self.omt_power
    }
}

/// Pre-weights and their smoothed counterparts on one grid.
#[derive(Clone, Debug)]
pub struct WeightStack {
    pub h: Vec<ScalarField>,
    pub w: Vec<ScalarField>,
}

impl WeightStack {
    pub fn from_preweights(h: Vec<ScalarField>, kernel: &MultiGaussianKernel) -> Result<Self> {
        let w = preweights_to_weights(&h, kernel)?;
        Ok(Self { h, w })
    }

    /// Max deviation of `sum_i h_i^2` from 1 over all nodes.
    pub fn partition_defect(&self) -> f64 {
        let n = self.h[0].grid().len();
        let mut worst = 0.0f64;
        for idx in 0..n {
            let s: f64 = self.h.iter().map(|f| f.values()[idx] * f.values()[idx]).sum();
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }
}

/// Circular Gaussian smoothing of a scalar field.
pub fn gauss_conv_scalar(field: &ScalarField, sigma: f64) -> Result<ScalarField> {
    if sigma <= 0.0 {
        return Err(RdmmError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let grid = field.grid().clone();
    let resp = fft::gauss_response(&grid, sigma);
    let mut out = field.values().to_vec();
    fft::conv_pair(&grid, &resp, &mut out, None);
    ScalarField::from_vec(&grid, out)
}

/// Circular Gaussian smoothing of every component of a vector field.
pub fn gauss_conv_vector(field: &VectorField, sigma: f64) -> Result<VectorField> {
    if sigma <= 0.0 {
        return Err(RdmmError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let grid = field.grid().clone();
    let resp = fft::gauss_response(&grid, sigma);
    let mut out = field.clone();
    conv_components(&grid, &resp, &mut out);
    Ok(out)
}

/// Convolves all components of a vector field, pairing them into shared
/// complex transforms.
pub(crate) fn conv_components(grid: &GridSpec, resp: &[f64], field: &mut VectorField) {
    let d = grid.d();
    let n = grid.len();
    let mut c = 0;
    while c + 1 < d {
        let (head, tail) = field.data_mut().split_at_mut((c + 1) * n);
        let a = &mut head[c * n..];
        let b = &mut tail[..n];
        fft::conv_pair(grid, resp, a, Some(b));
        c += 2;
    }
    if c < d {
        fft::conv_pair(grid, resp, field.comp_mut(c), None);
    }
}

/// Smooths each pre-weight with the pre-weight Gaussian: `w_i = G * h_i`.
pub fn preweights_to_weights(
    h: &[ScalarField],
    kernel: &MultiGaussianKernel,
) -> Result<Vec<ScalarField>> {
    if h.len() != kernel.n() {
        return Err(RdmmError::InvalidParameter(format!(
            "{} pre-weights for {} kernels",
            h.len(),
            kernel.n()
        )));
    }
    let grid = h[0].grid().clone();
    let resp = fft::gauss_response(&grid, kernel.preweight_sigma());
    let mut out: Vec<Vec<f64>> = h.iter().map(|f| f.values().to_vec()).collect();
    fft::conv_batch(&grid, &resp, &mut out);
    out.into_iter().map(|v| ScalarField::from_vec(&grid, v)).collect()
}

/// Momentum-to-velocity map plus the per-kernel intermediates
/// `nu_i = K_{sigma_i} * (w_i m)`.
pub fn kernel_apply_full(
    m: &VectorField,
    w: &[ScalarField],
    kernel: &MultiGaussianKernel,
) -> (VectorField, Vec<VectorField>) {
    let grid = m.grid().clone();
    let d = grid.d();
    let n = grid.len();
    let mut v = VectorField::zeros(&grid);
    let mut nus = Vec::with_capacity(kernel.n());
    for (i, &sigma) in kernel.sigmas().iter().enumerate() {
        let wi = w[i].values();
        let mut nu = m.clone();
        for c in 0..d {
            let comp = nu.comp_mut(c);
            for k in 0..n {
                comp[k] *= wi[k];
            }
        }
        let resp = fft::gauss_response(&grid, sigma);
        conv_components(&grid, &resp, &mut nu);
        for c in 0..d {
            let vc = v.comp_mut(c);
            let nc = nu.comp(c);
            for k in 0..n {
                vc[k] += wi[k] * nc[k];
            }
        }
        nus.push(nu);
    }
    (v, nus)
}

/// Momentum-to-velocity map: `v = sum_i w_i K_{sigma_i} * (w_i m)`.
pub fn kernel_apply(m: &VectorField, w: &[ScalarField], kernel: &MultiGaussianKernel) -> VectorField {
    kernel_apply_full(m, w, kernel).0
}

/// `<m, v>` over the grid, weighted by the cell volume. With
/// `v = K * m` this is the squared velocity norm.
pub fn velocity_norm_sq(m: &VectorField, v: &VectorField) -> f64 {
    let vol = m.grid().cell_volume();
    let acc: f64 = m.data().iter().zip(v.data().iter()).map(|(a, b)| a * b).sum();
    acc * vol
}

/// Effective local regularizer scale: `sigma(x) = sqrt(sum_i w_i^2 sigma_i^2)`.
pub fn local_std_map(w: &[ScalarField], kernel: &MultiGaussianKernel) -> ScalarField {
    let grid = w[0].grid().clone();
    let n = grid.len();
    let mut out = vec![0.0; n];
    for (wi, &sigma) in w.iter().zip(kernel.sigmas()) {
        let s2 = sigma * sigma;
        for (o, &v) in out.iter_mut().zip(wi.values()) {
            *o += v * v * s2;
        }
    }
    for o in &mut out {
        *o = o.sqrt();
    }
    ScalarField::from_vec(&grid, out).expect("matching grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid2(n: usize) -> GridSpec {
        GridSpec::new(&[n, n]).unwrap()
    }

    /// Independent periodized sampled Gaussian, same definition as the
    /// production kernel but computed in the spatial domain.
    fn oracle_kernel_1d(n: usize, spacing: f64, sigma: f64) -> Vec<f64> {
        let mut g = vec![0.0; n];
        for (j, gj) in g.iter_mut().enumerate() {
            for wrap in -3i64..=3 {
                let x = (j as i64 + wrap * n as i64) as f64 * spacing;
                *gj += (-x * x / (2.0 * sigma * sigma)).exp();
            }
        }
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        g
    }

    /// Brute-force circular convolution on a square 2D grid.
    fn oracle_conv2(input: &[f64], n: usize, sigma: f64) -> Vec<f64> {
        let h = 1.0 / (n - 1) as f64;
        let g = oracle_kernel_1d(n, h, sigma);
        let mut out = vec![0.0; n * n];
        for x0 in 0..n {
            for x1 in 0..n {
                let mut acc = 0.0;
                for y0 in 0..n {
                    for y1 in 0..n {
                        let d0 = (x0 + n - y0) % n;
                        let d1 = (x1 + n - y1) % n;
                        acc += g[d0] * g[d1] * input[y0 * n + y1];
                    }
                }
                out[x0 * n + x1] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_rejects_nonpositive_sigma() {
        let g = grid2(9);
        let f = ScalarField::constant(&g, 1.0);
        assert!(gauss_conv_scalar(&f, 0.0).is_err());
        assert!(gauss_conv_scalar(&f, -0.1).is_err());
    }

    #[test]
    fn conv_preserves_constants_and_mean() {
        let g = grid2(33);
        let c = ScalarField::constant(&g, 0.7);
        let out = gauss_conv_scalar(&c, 0.05).unwrap();
        for &v in out.values() {
            assert!((v - 0.7).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = ScalarField::from_vec(
            &g,
            (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mean_in: f64 = f.values().iter().sum::<f64>() / g.len() as f64;
        let out = gauss_conv_scalar(&f, 0.08).unwrap();
        let mean_out: f64 = out.values().iter().sum::<f64>() / g.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn conv_impulse_matches_spatial_oracle() {
        let n = 65;
        let g = grid2(n);
        let mut f = ScalarField::zeros(&g);
        f.values_mut()[(n / 2) * n + n / 2] = 1.0;
        let out = gauss_conv_scalar(&f, 0.05).unwrap();
        let oracle = oracle_conv2(f.values(), n, 0.05);
        let max_err = out
            .values()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-10, "max err {max_err}");
    }

    #[test]
    fn conv_is_linear() {
        let g = grid2(21);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ScalarField::from_vec(&g, (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let b = ScalarField::from_vec(&g, (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let (alpha, beta) = (1.7, -0.4);
        let mix = ScalarField::from_vec(
            &g,
            a.values()
                .iter()
                .zip(b.values())
                .map(|(&x, &y)| alpha * x + beta * y)
                .collect(),
        )
        .unwrap();
        let ca = gauss_conv_scalar(&a, 0.06).unwrap();
        let cb = gauss_conv_scalar(&b, 0.06).unwrap();
        let cm = gauss_conv_scalar(&mix, 0.06).unwrap();
        for i in 0..g.len() {
            let expect = alpha * ca.values()[i] + beta * cb.values()[i];
            assert!((cm.values()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn preweights_constant_invariant() {
        let kernel = MultiGaussianKernel::new(&[0.05, 0.1], 0.05, 2.0).unwrap();
        let g = grid2(17);
        let c = 1.0 / 2f64.sqrt();
        let h = vec![ScalarField::constant(&g, c), ScalarField::constant(&g, c)];
        let w = preweights_to_weights(&h, &kernel).unwrap();
        for wi in &w {
            for &v in wi.values() {
                assert!((v - c).abs() < 1e-12);
            }
        }
        let k1 = MultiGaussianKernel::new(&[0.1], 0.05, 2.0).unwrap();
        let w1 = preweights_to_weights(&[ScalarField::constant(&g, 1.0)], &k1).unwrap();
        for &v in w1[0].values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn preweights_step_matches_spatial_oracle() {
        let n = 33;
        let g = grid2(n);
        let kernel = MultiGaussianKernel::new(&[0.05], 0.04, 2.0).unwrap();
        let step = ScalarField::from_fn(&g, |p| if p[0] < 0.5 { 1.0 } else { 0.0 });
        let w = preweights_to_weights(std::slice::from_ref(&step), &kernel).unwrap();
        let oracle = oracle_conv2(step.values(), n, 0.04);
        for i in 0..g.len() {
            assert!((w[0].values()[i] - oracle[i]).abs() < 1e-10);
        }
    }

    fn random_vec_field(g: &GridSpec, rng: &mut ChaCha8Rng) -> VectorField {
        let mut m = VectorField::zeros(g);
        for v in m.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn kernel_apply_zero_momentum() {
        let g = grid2(17);
        let kernel = MultiGaussianKernel::new(&[0.05, 0.1], 0.05, 2.0).unwrap();
        let w = vec![
            ScalarField::constant(&g, 0.6),
            ScalarField::constant(&g, 0.8),
        ];
        let v = kernel_apply(&VectorField::zeros(&g), &w, &kernel);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kernel_apply_constant_weights_reduces_to_multi_gaussian() {
        let g = grid2(33);
        let kernel = MultiGaussianKernel::new(&[0.04, 0.09], 0.05, 2.0).unwrap();
        let (c0, c1) = (0.6, 0.8);
        let w = vec![ScalarField::constant(&g, c0), ScalarField::constant(&g, c1)];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_vec_field(&g, &mut rng);
        let v = kernel_apply(&m, &w, &kernel);
        // reference: c0^2 K_0 * m + c1^2 K_1 * m
        let s0 = gauss_conv_vector(&m, 0.04).unwrap();
        let s1 = gauss_conv_vector(&m, 0.09).unwrap();
        for i in 0..v.data().len() {
            let expect = c0 * c0 * s0.data()[i] + c1 * c1 * s1.data()[i];
            assert!((v.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_apply_matches_double_sum_oracle() {
        let n = 33;
        let g = grid2(n);
        let kernel = MultiGaussianKernel::new(&[0.05, 0.12], 0.05, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_vec_field(&g, &mut rng);
        let mut w = Vec::new();
        for _ in 0..2 {
            w.push(
                ScalarField::from_vec(&g, (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .unwrap(),
            );
        }
        let v = kernel_apply(&m, &w, &kernel);

        let h = 1.0 / (n - 1) as f64;
        let mut expect = vec![0.0; 2 * g.len()];
        for (i, &sigma) in kernel.sigmas().iter().enumerate() {
            let g1 = oracle_kernel_1d(n, h, sigma);
            let wi = w[i].values();
            for x0 in 0..n {
                for x1 in 0..n {
                    let x = x0 * n + x1;
                    let mut acc = [0.0f64; 2];
                    for y0 in 0..n {
                        for y1 in 0..n {
                            let y = y0 * n + y1;
                            let k = g1[(x0 + n - y0) % n] * g1[(x1 + n - y1) % n];
                            acc[0] += k * wi[y] * m.comp(0)[y];
                            acc[1] += k * wi[y] * m.comp(1)[y];
                        }
                    }
                    expect[x] += wi[x] * acc[0];
                    expect[g.len() + x] += wi[x] * acc[1];
                }
            }
        }
        let scale: f64 = v.data().iter().map(|x| x.abs()).fold(0.0, f64::max);
        for i in 0..v.data().len() {
            let rel = (v.data()[i] - expect[i]).abs() / scale;
            assert!(rel < 1e-8, "rel err {rel} at {i}");
        }
    }

    #[test]
    fn kernel_apply_self_adjoint_and_psd() {
        let g = grid2(17);
        let kernel = MultiGaussianKernel::new(&[0.04, 0.1], 0.05, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let a = random_vec_field(&g, &mut rng);
            let b = random_vec_field(&g, &mut rng);
            let w = vec![
                ScalarField::from_vec(&g, (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .unwrap(),
                ScalarField::from_vec(&g, (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .unwrap(),
            ];
            let ka = kernel_apply(&a, &w, &kernel);
            let kb = kernel_apply(&b, &w, &kernel);
            let lhs = velocity_norm_sq(&a, &kb);
            let rhs = velocity_norm_sq(&b, &ka);
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!((lhs - rhs).abs() / scale < 1e-10);
            let quad = velocity_norm_sq(&a, &ka);
            assert!(quad >= -1e-12);
        }
    }

    #[test]
    fn norm_zero_momentum() {
        let g = grid2(9);
        let z = VectorField::zeros(&g);
        assert_eq!(velocity_norm_sq(&z, &z), 0.0);
    }

    #[test]
    fn norm_two_point_gram_value() {
        // N=1, w = 1: <m, K*m> * vol with two impulses has the closed
        // two-point form a.a K(0) + 2 a.b K(p-q) + b.b K(0).
        let n = 33;
        let g = grid2(n);
        let kernel = MultiGaussianKernel::new(&[0.08], 0.05, 2.0).unwrap();
        let w = vec![ScalarField::constant(&g, 1.0)];
        let mut m = VectorField::zeros(&g);
        let p = (10usize, 12usize);
        let q = (20usize, 18usize);
        let a = [0.7, -0.3];
        let b = [-0.2, 0.9];
        m.comp_mut(0)[p.0 * n + p.1] = a[0];
        m.comp_mut(1)[p.0 * n + p.1] = a[1];
        m.comp_mut(0)[q.0 * n + q.1] = b[0];
        m.comp_mut(1)[q.0 * n + q.1] = b[1];
        let v = kernel_apply(&m, &w, &kernel);
        let got = velocity_norm_sq(&m, &v);

        let h = 1.0 / (n - 1) as f64;
        let g1 = oracle_kernel_1d(n, h, 0.08);
        let k0 = g1[0] * g1[0];
        let kpq = g1[(p.0 + n - q.0) % n] * g1[(p.1 + n - q.1) % n];
        let dot = |x: &[f64; 2], y: &[f64; 2]| x[0] * y[0] + x[1] * y[1];
        let expect = (dot(&a, &a) * k0 + 2.0 * dot(&a, &b) * kpq + dot(&b, &b) * k0) * h * h;
        assert!((got - expect).abs() / expect.abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn std_map_values() {
        let g = grid2(9);
        let sig = [0.05, 0.1, 0.15, 0.2, 0.25];
        let kernel = MultiGaussianKernel::new(&sig, 0.05, 2.0).unwrap();
        // all weight on the largest sigma
        let mut w: Vec<ScalarField> = (0..5).map(|_| ScalarField::zeros(&g)).collect();
        w[4] = ScalarField::constant(&g, 1.0);
        let s = local_std_map(&w, &kernel);
        for &v in s.values() {
            assert!((v - 0.25).abs() < 1e-14);
        }
        // fixed squared weights from the multi-Gaussian default
        let wsq: [f64; 5] = [0.067, 0.133, 0.2, 0.267, 0.333];
        let w: Vec<ScalarField> =
            wsq.iter().map(|&q| ScalarField::constant(&g, q.sqrt())).collect();
        let s = local_std_map(&w, &kernel);
        let expect: f64 = wsq
            .iter()
            .zip(&sig)
            .map(|(&q, &sg)| q * sg * sg)
            .sum::<f64>()
            .sqrt();
        assert!((expect - 0.1936).abs() < 5e-4);
        for &v in s.values() {
            assert!((v - expect).abs() < 1e-14);
        }
        // N = 1: sigma(x) = sigma_0 * w_0(x)
        let k1 = MultiGaussianKernel::new(&[0.1], 0.05, 2.0).unwrap();
        let w0 = ScalarField::from_fn(&g, |p| 0.5 + 0.3 * p[0]);
        let s = local_std_map(std::slice::from_ref(&w0), &k1);
        for i in 0..g.len() {
            assert!((s.values()[i] - 0.1 * w0.values()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn kernel_validation() {
        assert!(MultiGaussianKernel::new(&[], 0.05, 2.0).is_err());
        assert!(MultiGaussianKernel::new(&[0.1, 0.05], 0.05, 2.0).is_err());
        assert!(MultiGaussianKernel::new(&[0.05, 0.05], 0.05, 2.0).is_err());
        assert!(MultiGaussianKernel::new(&[0.05], 0.0, 2.0).is_err());
    }
}
