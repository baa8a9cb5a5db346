//! Fourier-domain circular convolution with sampled Gaussians.
//!
//! Kernels are built by sampling the continuous Gaussian on the grid,
//! periodizing, and normalizing to unit discrete sum, so constants are
//! exact fixed points (DC gain 1). Frequency responses are separable
//! per axis and cached per (dims, sigma).
//!
//! Two real fields sharing one response are convolved in a single
//! complex transform by packing them as real and imaginary parts.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_complex::Complex;
use once_cell::sync::Lazy;
use rustfft::{Fft, FftPlanner};

use crate::field::GridSpec;

static PLANS: Lazy<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

static RESPONSES: Lazy<Mutex<HashMap<(Vec<usize>, u64), Arc<Vec<f64>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut plans = PLANS.lock().unwrap();
    plans
        .entry((n, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// Periodized, unit-sum sampled Gaussian along one axis.
fn gauss_kernel_1d(n: usize, spacing: f64, sigma: f64) -> Vec<f64> {
    let mut g = vec![0.0; n];
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (j, gj) in g.iter_mut().enumerate() {
        let mut acc = 0.0;
        for wrap in -3i64..=3 {
            let x = (j as i64 + wrap * n as i64) as f64 * spacing;
            acc += (-x * x * inv2s2).exp();
        }
        *gj = acc;
    }
    let sum: f64 = g.iter().sum();
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Real DFT of the (symmetric) 1D kernel.
fn kernel_response_1d(g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let mut r = vec![0.0; n];
    for (k, rk) in r.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &gj) in g.iter().enumerate() {
            acc += gj * (2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64).cos();
        }
        *rk = acc;
    }
    r
}

/// Full separable frequency response for an isotropic Gaussian.
pub(crate) fn gauss_response(grid: &GridSpec, sigma: f64) -> Arc<Vec<f64>> {
    let key = (grid.dims().to_vec(), sigma.to_bits());
    {
        let cache = RESPONSES.lock().unwrap();
        if let Some(r) = cache.get(&key) {
            return r.clone();
        }
    }
    let d = grid.d();
    let axis_resp: Vec<Vec<f64>> = (0..d)
        .map(|a| kernel_response_1d(&gauss_kernel_1d(grid.dims()[a], grid.spacing(a), sigma)))
        .collect();
    let strides = grid.strides();
    let mut resp = vec![1.0; grid.len()];
    for (idx, r) in resp.iter_mut().enumerate() {
        for a in 0..d {
            let k = (idx / strides[a]) % grid.dims()[a];
            *r *= axis_resp[a][k];
        }
    }
    let arc = Arc::new(resp);
    RESPONSES.lock().unwrap().insert(key, arc.clone());
    arc
}

fn fft_axis(buf: &mut [Complex<f64>], grid: &GridSpec, axis: usize, inverse: bool) {
    let n = grid.dims()[axis];
    let fft = plan(n, inverse);
    let strides = grid.strides();
    if strides[axis] == 1 {
        fft.process(buf);
    } else {
        let mut line = vec![Complex::new(0.0, 0.0); n];
        grid.for_each_line(axis, |base, stride, len| {
            for j in 0..len {
                line[j] = buf[base + j * stride];
            }
            fft.process(&mut line);
            for j in 0..len {
                buf[base + j * stride] = line[j];
            }
        });
    }
}

fn fft_all(buf: &mut [Complex<f64>], grid: &GridSpec, inverse: bool) {
    for a in 0..grid.d() {
        fft_axis(buf, grid, a, inverse);
    }
}

/// Circular convolution of one or two real fields with a shared real
/// frequency response, in place.
pub(crate) fn conv_pair(grid: &GridSpec, resp: &[f64], a: &mut [f64], b: Option<&mut [f64]>) {
    let n = grid.len();
    debug_assert_eq!(a.len(), n);
    let mut buf: Vec<Complex<f64>> = match &b {
        Some(b) => a.iter().zip(b.iter()).map(|(&x, &y)| Complex::new(x, y)).collect(),
        None => a.iter().map(|&x| Complex::new(x, 0.0)).collect(),
    };
    fft_all(&mut buf, grid, false);
    for (c, &r) in buf.iter_mut().zip(resp.iter()) {
        *c *= r;
    }
    fft_all(&mut buf, grid, true);
    let scale = 1.0 / n as f64;
    match b {
        Some(b) => {
            for i in 0..n {
                a[i] = buf[i].re * scale;
                b[i] = buf[i].im * scale;
            }
        }
        None => {
            for i in 0..n {
                a[i] = buf[i].re * scale;
            }
        }
    }
}

/// Convolves a batch of real fields with one response, pairing them two
/// per complex transform.
pub(crate) fn conv_batch(grid: &GridSpec, resp: &[f64], fields: &mut [Vec<f64>]) {
    let mut i = 0;
    while i + 1 < fields.len() {
        let (head, tail) = fields.split_at_mut(i + 1);
        conv_pair(grid, resp, &mut head[i], Some(&mut tail[0]));
        i += 2;
    }
    if i < fields.len() {
        conv_pair(grid, resp, &mut fields[i], None);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_packing_matches_single() {
        let grid = GridSpec::new(&[17, 13]).unwrap();
        let resp = gauss_response(&grid, 0.07);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a0: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a1 = a0.clone();
        let mut b1 = b0.clone();
        conv_pair(&grid, &resp, &mut a1, Some(&mut b1));
        let mut a2 = a0.clone();
        conv_pair(&grid, &resp, &mut a2, None);
        let mut b2 = b0.clone();
        conv_pair(&grid, &resp, &mut b2, None);
        for i in 0..grid.len() {
            assert!((a1[i] - a2[i]).abs() < 1e-12);
            assert!((b1[i] - b2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_gain_is_one() {
        let grid = GridSpec::new(&[21, 21]).unwrap();
        let resp = gauss_response(&grid, 0.1);
        let mut a = vec![0.4; grid.len()];
        conv_pair(&grid, &resp, &mut a, None);
        for &v in &a {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }
}
