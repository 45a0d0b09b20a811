//! Image reconstruction: SENSE forward/adjoint operators, CG-SENSE with
//! optional sensitivity masking, orthonormal Haar wavelets, soft-thresholding
//! and L1-regularized reconstruction via FISTA. All solvers operate per
//! slice.

use ndarray::{Array2, Array3, ArrayView3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{fft2c_view, mask_plane, SamplingMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepMode {
    PowerIteration,
    Fixed,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReconConfig {
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub fista_iters: usize,
    /// L1 weight; `None` selects 1e-2 of the 99th-percentile wavelet
    /// coefficient magnitude of the zero-filled image, per slice.
    pub reg_weight: Option<f64>,
    pub wavelet_levels: usize,
    pub mask_maps: bool,
    pub step_mode: StepMode,
    /// Fixed step size when `step_mode == Fixed`.
    pub fixed_step: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            cg_tol: 1e-8,
            cg_max_iters: 200,
            fista_iters: 100,
            reg_weight: None,
            wavelet_levels: 2,
            mask_maps: false,
            step_mode: StepMode::PowerIteration,
            fixed_step: 1.0,
        }
    }
}

/// Solver telemetry attached to each reconstructed slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveStatus {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub objectives: Vec<f64>,
}

fn check_slice_dims(maps: &ArrayView3<Complex64>, mask: &SamplingMask) -> Result<()> {
    let (_, ny, _) = maps.dim();
    if mask.ny != ny {
        return Err(Error::dims(format!("mask ny {} != image ny {}", mask.ny, ny)));
    }
    Ok(())
}

/// y_i = mask ⊙ fft2c(s_i ⊙ x) for one slice. `maps` is (channel, ny, nx).
pub fn sense_forward(
    x: &Array2<Complex64>,
    maps: &ArrayView3<Complex64>,
    mask: &SamplingMask,
) -> Result<Array3<Complex64>> {
    check_slice_dims(maps, mask)?;
    let (nc, ny, nx) = maps.dim();
    if x.dim() != (ny, nx) {
        return Err(Error::dims("image dims do not match maps"));
    }
    let mut out = Array3::<Complex64>::zeros((nc, ny, nx));
    for c in 0..nc {
        let weighted = Array2::from_shape_fn((ny, nx), |(y, xx)| maps[[c, y, xx]] * x[[y, xx]]);
        let mut k = fft2c_view(weighted.view(), false);
        mask_plane(&mut k.view_mut(), mask);
        out.index_axis_mut(ndarray::Axis(0), c).assign(&k);
    }
    Ok(out)
}

/// x = sum_i conj(s_i) ⊙ ifft2c(mask ⊙ y_i); exact adjoint of
/// [`sense_forward`] under the unitary FFT convention.
pub fn sense_adjoint(
    y: &Array3<Complex64>,
    maps: &ArrayView3<Complex64>,
    mask: &SamplingMask,
) -> Result<Array2<Complex64>> {
    check_slice_dims(maps, mask)?;
    let (nc, ny, nx) = maps.dim();
    if y.dim() != (nc, ny, nx) {
        return Err(Error::dims("k-space dims do not match maps"));
    }
    let mut out = Array2::<Complex64>::zeros((ny, nx));
    for c in 0..nc {
        let mut k = y.index_axis(ndarray::Axis(0), c).to_owned();
        mask_plane(&mut k.view_mut(), mask);
        let img = fft2c_view(k.view(), true);
        for yy in 0..ny {
            for xx in 0..nx {
                out[[yy, xx]] += maps[[c, yy, xx]].conj() * img[[yy, xx]];
            }
        }
    }
    Ok(out)
}

fn dot(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Normal-operator application A^H A x.
fn normal_op(
    x: &Array2<Complex64>,
    maps: &ArrayView3<Complex64>,
    mask: &SamplingMask,
) -> Result<Array2<Complex64>> {
    let y = sense_forward(x, maps, mask)?;
    sense_adjoint(&y, maps, mask)
}

/// Conjugate-gradient solution of A^H A x = A^H y to relative residual
/// `cg_tol`. Returns the image and solver status; non-convergence is reported
/// through the status, not an error.
pub fn sense_cg(
    y: &Array3<Complex64>,
    maps: &ArrayView3<Complex64>,
    mask: &SamplingMask,
    cfg: &ReconConfig,
) -> Result<(Array2<Complex64>, SolveStatus)> {
    let rhs = sense_adjoint(y, maps, mask)?;
    let (_, ny, nx) = maps.dim();
    let rhs_norm = norm(&rhs);
    let mut x = Array2::<Complex64>::zeros((ny, nx));
    if rhs_norm == 0.0 {
        return Ok((
            x,
            SolveStatus { iterations: 0, final_residual: 0.0, converged: true, objectives: vec![] },
        ));
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs_old = dot(&r, &r).re;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..cfg.cg_max_iters {
        if rs_old.sqrt() / rhs_norm <= cfg.cg_tol {
            converged = true;
            break;
        }
        let ap = normal_op(&p, maps, mask)?;
        let denom = dot(&p, &ap).re;
        if denom <= 0.0 {
            break;
        }
        let alpha = rs_old / denom;
        for (xi, pi) in x.iter_mut().zip(p.iter()) {
            *xi += pi * alpha;
        }
        for (ri, api) in r.iter_mut().zip(ap.iter()) {
            *ri -= api * alpha;
        }
        let rs_new = dot(&r, &r).re;
        let beta = rs_new / rs_old;
        for (pi, ri) in p.iter_mut().zip(r.iter()) {
            *pi = ri + *pi * beta;
        }
        rs_old = rs_new;
        iterations += 1;
    }
    if rs_old.sqrt() / rhs_norm <= cfg.cg_tol {
        converged = true;
    }
    Ok((
        x,
        SolveStatus {
            iterations,
            final_residual: rs_old.sqrt() / rhs_norm,
            converged,
            objectives: vec![],
        },
    ))
}

/// Complex soft-thresholding: x * max(|x| - t, 0)/|x|, zero at the origin.
pub fn soft_threshold(x: Complex64, t: f64) -> Complex64 {
    debug_assert!(t >= 0.0);
    let mag = x.norm();
    if mag <= t || mag == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        x * ((mag - t) / mag)
    }
}

pub fn soft_threshold_array(a: &mut Array2<Complex64>, t: f64) {
    a.mapv_inplace(|v| soft_threshold(v, t));
}

fn haar_pair_fwd(a: Complex64, b: Complex64) -> (Complex64, Complex64) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    ((a + b) * s, (a - b) * s)
}

fn haar_pair_inv(lo: Complex64, hi: Complex64) -> (Complex64, Complex64) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    ((lo + hi) * s, (lo - hi) * s)
}

fn check_wavelet_dims(ny: usize, nx: usize, levels: usize) -> Result<()> {
    let div = 1usize << levels;
    if levels == 0 || ny % div != 0 || nx % div != 0 {
        return Err(Error::invalid(format!(
            "dims {ny}x{nx} not divisible by 2^{levels}"
        )));
    }
    Ok(())
}

/// Orthonormal separable 2D Haar transform, `levels` deep, in place layout
/// (approximation block in the top-left corner at each level).
pub fn wavelet_fwd(image: &Array2<Complex64>, levels: usize) -> Result<Array2<Complex64>> {
    let (ny, nx) = image.dim();
    check_wavelet_dims(ny, nx, levels)?;
    let mut out = image.clone();
    let (mut cy, mut cx) = (ny, nx);
    for _ in 0..levels {
        // Rows.
        for y in 0..cy {
            let row: Vec<Complex64> = (0..cx).map(|x| out[[y, x]]).collect();
            for p in 0..cx / 2 {
                let (lo, hi) = haar_pair_fwd(row[2 * p], row[2 * p + 1]);
                out[[y, p]] = lo;
                out[[y, cx / 2 + p]] = hi;
            }
        }
        // Columns.
        for x in 0..cx {
            let col: Vec<Complex64> = (0..cy).map(|y| out[[y, x]]).collect();
            for p in 0..cy / 2 {
                let (lo, hi) = haar_pair_fwd(col[2 * p], col[2 * p + 1]);
                out[[p, x]] = lo;
                out[[cy / 2 + p, x]] = hi;
            }
        }
        cy /= 2;
        cx /= 2;
    }
    Ok(out)
}

/// Perfect-reconstruction inverse of [`wavelet_fwd`].
pub fn wavelet_inv(coeffs: &Array2<Complex64>, levels: usize) -> Result<Array2<Complex64>> {
    let (ny, nx) = coeffs.dim();
    check_wavelet_dims(ny, nx, levels)?;
    let mut out = coeffs.clone();
    for level in (0..levels).rev() {
        let cy = ny >> level;
        let cx = nx >> level;
        // Columns.
        for x in 0..cx {
            let col: Vec<Complex64> = (0..cy).map(|y| out[[y, x]]).collect();
            for p in 0..cy / 2 {
                let (a, b) = haar_pair_inv(col[p], col[cy / 2 + p]);
                out[[2 * p, x]] = a;
                out[[2 * p + 1, x]] = b;
            }
        }
        // Rows.
        for y in 0..cy {
            let row: Vec<Complex64> = (0..cx).map(|x| out[[y, x]]).collect();
            for p in 0..cx / 2 {
                let (a, b) = haar_pair_inv(row[p], row[cx / 2 + p]);
                out[[y, 2 * p]] = a;
                out[[y, 2 * p + 1]] = b;
            }
        }
    }
    Ok(out)
}

/// Largest eigenvalue of A^H A estimated by power iteration.
pub fn power_iteration_lipschitz(
    maps: &ArrayView3<Complex64>,
    mask: &SamplingMask,
    iterations: usize,
) -> Result<f64> {
    let (_, ny, nx) = maps.dim();
    let mut rng = ChaCha12Rng::seed_from_u64(0x9077_e21b);
    let mut v = Array2::from_shape_fn((ny, nx), |_| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let av = normal_op(&v, maps, mask)?;
        let n = norm(&av);
        if n == 0.0 {
            return Err(Error::NoConvergence(
                "power iteration hit the zero operator".to_string(),
            ));
        }
        lambda = dot(&v, &av).re / dot(&v, &v).re;
        v = av.mapv(|x| x / n);
    }
    if lambda <= 0.0 {
        return Err(Error::NoConvergence("power iteration failed".to_string()));
    }
    Ok(lambda)
}

fn percentile_99(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let idx = ((values.len() as f64) * 0.99).floor() as usize;
    values[idx.min(values.len() - 1)]
}

/// L1-regularized reconstruction 1/2||Ax - y||^2 + mu ||Wx||_1 via FISTA with
/// adaptive restart; the logged objective is non-increasing.
pub fn l1_espirit(
    y: &Array3<Complex64>,
    maps: &ArrayView3<Complex64>,
    mask: &SamplingMask,
    cfg: &ReconConfig,
) -> Result<(Array2<Complex64>, SolveStatus)> {
    let (_, ny, nx) = maps.dim();
    check_wavelet_dims(ny, nx, cfg.wavelet_levels)?;

    let lipschitz = match cfg.step_mode {
        StepMode::PowerIteration => power_iteration_lipschitz(maps, mask, 30)?,
        StepMode::Fixed => 1.0 / cfg.fixed_step,
    };
    // Safety margin keeps the descent guarantee under estimation error.
    let step = 1.0 / (lipschitz * 1.01);

    let x0 = sense_adjoint(y, maps, mask)?;
    let mu = match cfg.reg_weight {
        Some(m) => m,
        None => {
            let coeffs = wavelet_fwd(&x0, cfg.wavelet_levels)?;
            let mut mags: Vec<f64> = coeffs.iter().map(|v| v.norm()).collect();
            1e-2 * percentile_99(&mut mags)
        }
    };

    let objective = |x: &Array2<Complex64>| -> Result<f64> {
        let ax = sense_forward(x, maps, mask)?;
        let data: f64 = ax
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            * 0.5;
        let l1: f64 = wavelet_fwd(x, cfg.wavelet_levels)?
            .iter()
            .map(|v| v.norm())
            .sum();
        Ok(data + mu * l1)
    };

    let prox_grad = |z: &Array2<Complex64>| -> Result<Array2<Complex64>> {
        // Gradient of the data term: A^H (A z - y).
        let az = sense_forward(z, maps, mask)?;
        let resid = &az - y;
        let grad = sense_adjoint(&resid, maps, mask)?;
        let stepped = Array2::from_shape_fn((ny, nx), |(yy, xx)| {
            z[[yy, xx]] - grad[[yy, xx]] * step
        });
        let mut coeffs = wavelet_fwd(&stepped, cfg.wavelet_levels)?;
        soft_threshold_array(&mut coeffs, mu * step);
        wavelet_inv(&coeffs, cfg.wavelet_levels)
    };

    let mut x = x0;
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut objectives = Vec::with_capacity(cfg.fista_iters + 1);
    let mut f_x = objective(&x)?;
    objectives.push(f_x);

    for _ in 0..cfg.fista_iters {
        let mut candidate = prox_grad(&z)?;
        let mut f_cand = objective(&candidate)?;
        if f_cand > f_x + 1e-9 {
            // Restart the momentum and take a plain proximal-gradient step
            // from the current iterate.
            t = 1.0;
            candidate = prox_grad(&x)?;
            f_cand = objective(&candidate)?;
        }
        if f_cand <= f_x {
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_new;
            z = Array2::from_shape_fn((ny, nx), |(yy, xx)| {
                candidate[[yy, xx]] + (candidate[[yy, xx]] - x[[yy, xx]]) * beta
            });
            t = t_new;
            x = candidate;
            f_x = f_cand;
        } else {
            // No descent available at this step size; keep the iterate.
            z = x.clone();
            t = 1.0;
        }
        objectives.push(f_x);
    }

    let iterations = objectives.len() - 1;
    Ok((
        x,
        SolveStatus {
            iterations,
            final_residual: f_x,
            converged: true,
            objectives,
        },
    ))
}
