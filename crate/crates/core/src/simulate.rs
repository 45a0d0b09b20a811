//! Synthetic multi-coil, multi-slice acquisition generator: phantoms, smooth
//! complex coil sensitivities, subject-coil geometry sampling and noisy
//! k-space simulation. All generators are deterministic under a fixed seed
//! (ChaCha12 PRNG, algorithm pinned by the rand_chacha crate).

use ndarray::{Array3, Array4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::kspace::{fft2c, ImageVolume, KSpaceVolume};

/// Real non-negative intensity volume, (slice, y, x), values in [0, 1].
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Array3<f64>,
}

impl Phantom {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.volume.dim()
    }

    /// Binary support mask (value > 0).
    pub fn support(&self) -> Array3<bool> {
        self.volume.mapv(|v| v > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhantomStyle {
    Ellipses,
    Blobs,
}

/// Complex coil sensitivity profiles, (channel, slice, y, x).
#[derive(Debug, Clone)]
pub struct CoilProfileSet {
    pub sensitivities: Array4<Complex64>,
    pub ncoils: usize,
    /// Upper bound on the per-pixel finite-difference gradient magnitude the
    /// generator is required to respect.
    pub gradient_bound: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoilConfig {
    pub ncoils: usize,
    /// Ring radius as a fraction of the FOV half-width.
    pub ring_radius: f64,
    /// Gaussian lobe width as a fraction of the FOV side.
    pub smoothness: f64,
    /// Sum-of-squares normalize so that sum_i |c_i|^2 = 1 everywhere.
    pub normalize: bool,
    /// All-ones profiles (single uniform coil behaviour).
    pub uniform: bool,
}

impl Default for CoilConfig {
    fn default() -> Self {
        CoilConfig { ncoils: 4, ring_radius: 1.1, smoothness: 0.45, normalize: true, uniform: false }
    }
}

/// Closed intervals for the six rigid-body parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeometryRanges {
    pub alpha_deg: (f64, f64),
    pub beta_deg: (f64, f64),
    pub gamma_deg: (f64, f64),
    pub m_px: (f64, f64),
    pub n_px: (f64, f64),
    pub t_px: (f64, f64),
}

impl Default for GeometryRanges {
    fn default() -> Self {
        // Rotations cover the -10 degree extreme, translations admit a total
        // |m|+|n|+|t| of 18 pixels.
        GeometryRanges {
            alpha_deg: (-10.0, 10.0),
            beta_deg: (-10.0, 10.0),
            gamma_deg: (-10.0, 10.0),
            m_px: (-8.0, 8.0),
            n_px: (-8.0, 8.0),
            t_px: (-8.0, 8.0),
        }
    }
}

fn check_dims(dims: (usize, usize, usize)) -> Result<()> {
    let (nslices, ny, nx) = dims;
    if nslices < 1 || ny < 8 || nx < 8 {
        return Err(Error::invalid(format!(
            "phantom dims ({nslices}, {ny}, {nx}) too small; need >= 1 slice and 8x8 in plane"
        )));
    }
    Ok(())
}

/// Deterministic piecewise-smooth phantom with `n_features` interior
/// structures. `n_features = 0` produces empty support and is rejected.
pub fn make_phantom_with(
    dims: (usize, usize, usize),
    seed: u64,
    style: PhantomStyle,
    n_features: usize,
) -> Result<Phantom> {
    check_dims(dims)?;
    let (nslices, ny, nx) = dims;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x70aa_11ee);
    let mut volume = Array3::<f64>::zeros((nslices, ny, nx));
    let cy = (ny as f64 - 1.0) / 2.0;
    let cx = (nx as f64 - 1.0) / 2.0;

    match style {
        PhantomStyle::Ellipses => {
            if n_features == 0 {
                return Err(Error::invalid("phantom has empty support (no features)"));
            }
            // Outer ellipse shared by all slices, shrinking towards the stack
            // ends so the volume looks head-like.
            let base_a = 0.42 * ny as f64;
            let base_b = 0.42 * nx as f64;
            struct Ellipse {
                fy: f64,
                fx: f64,
                a: f64,
                b: f64,
                value: f64,
            }
            let mut interior = Vec::new();
            for i in 0..n_features.saturating_sub(1) {
                interior.push(Ellipse {
                    fy: rng.gen_range(-0.4..0.4),
                    fx: rng.gen_range(-0.4..0.4),
                    a: rng.gen_range(0.1..0.3),
                    b: rng.gen_range(0.1..0.3),
                    value: 0.15 + 0.8 * (i as f64 + 1.0) / n_features as f64
                        + rng.gen_range(-0.05..0.05),
                });
            }
            for s in 0..nslices {
                let zfrac = if nslices > 1 {
                    (s as f64 - (nslices as f64 - 1.0) / 2.0) / (nslices as f64 / 2.0)
                } else {
                    0.0
                };
                let shrink = (1.0 - 0.25 * zfrac * zfrac).max(0.3);
                let a0 = base_a * shrink;
                let b0 = base_b * shrink;
                for y in 0..ny {
                    for x in 0..nx {
                        let dy = y as f64 - cy;
                        let dx = x as f64 - cx;
                        if (dy / a0).powi(2) + (dx / b0).powi(2) <= 1.0 {
                            let mut v = 0.55;
                            for e in &interior {
                                let ey = dy - e.fy * a0;
                                let ex = dx - e.fx * b0;
                                if (ey / (e.a * a0)).powi(2) + (ex / (e.b * b0)).powi(2) <= 1.0 {
                                    v = e.value;
                                }
                            }
                            volume[[s, y, x]] = v.clamp(0.05, 1.0);
                        }
                    }
                }
            }
        }
        PhantomStyle::Blobs => {
            if n_features == 0 {
                return Err(Error::invalid("phantom has empty support (no features)"));
            }
            // Overlapping Gaussian lobes clustered around the center; the max
            // combination keeps the support connected.
            let sigma = 0.18 * ny.min(nx) as f64;
            let centers: Vec<(f64, f64, f64)> = (0..n_features)
                .map(|_| {
                    (
                        cy + rng.gen_range(-0.2..0.2) * ny as f64,
                        cx + rng.gen_range(-0.2..0.2) * nx as f64,
                        rng.gen_range(0.4..1.0),
                    )
                })
                .collect();
            for s in 0..nslices {
                for y in 0..ny {
                    for x in 0..nx {
                        let mut v: f64 = 0.0;
                        for &(by, bx, amp) in &centers {
                            let r2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                            v = v.max(amp * (-r2 / (2.0 * sigma * sigma)).exp());
                        }
                        volume[[s, y, x]] = if v > 0.05 { v.min(1.0) } else { 0.0 };
                    }
                }
            }
        }
    }

    if volume.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("phantom has empty support"));
    }
    Ok(Phantom { volume })
}

pub fn make_phantom(dims: (usize, usize, usize), seed: u64, style: PhantomStyle) -> Result<Phantom> {
    let n_features = match style {
        PhantomStyle::Ellipses => 4,
        PhantomStyle::Blobs => 5,
    };
    make_phantom_with(dims, seed, style, n_features)
}

/// Smooth complex coil profiles: Gaussian lobes centered on a ring around the
/// FOV with linear plus quadratic phase, optionally sum-of-squares
/// normalized.
pub fn synth_coil_sensitivities(
    cfg: &CoilConfig,
    dims: (usize, usize, usize),
    seed: u64,
) -> Result<CoilProfileSet> {
    check_dims(dims)?;
    if cfg.ncoils < 1 {
        return Err(Error::invalid("ncoils must be >= 1"));
    }
    if cfg.smoothness <= 0.0 {
        return Err(Error::invalid("smoothness must be > 0"));
    }
    let (nslices, ny, nx) = dims;
    let mut sens = Array4::<Complex64>::zeros((cfg.ncoils, nslices, ny, nx));
    let sigma = cfg.smoothness * ny.min(nx) as f64;
    let gradient_bound = 6.0 / sigma;

    if cfg.uniform {
        sens.fill(Complex64::new(1.0, 0.0));
        let scale = if cfg.normalize { 1.0 / (cfg.ncoils as f64).sqrt() } else { 1.0 };
        sens.mapv_inplace(|v| v * scale);
        return Ok(CoilProfileSet { sensitivities: sens, ncoils: cfg.ncoils, gradient_bound });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xc011_5e75);
    let cy = (ny as f64 - 1.0) / 2.0;
    let cx = (nx as f64 - 1.0) / 2.0;
    let ring_y = cfg.ring_radius * cy;
    let ring_x = cfg.ring_radius * cx;

    for c in 0..cfg.ncoils {
        let theta = 2.0 * std::f64::consts::PI * c as f64 / cfg.ncoils as f64
            + rng.gen_range(-0.1..0.1);
        let coil_y = cy + ring_y * theta.sin();
        let coil_x = cx + ring_x * theta.cos();
        // Gentle, coil-specific phase structure.
        let lin_y = rng.gen_range(-0.5..0.5) / ny as f64;
        let lin_x = rng.gen_range(-0.5..0.5) / nx as f64;
        let quad = rng.gen_range(-0.25..0.25) / (ny as f64 * nx as f64);
        let phase0 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        for s in 0..nslices {
            for y in 0..ny {
                for x in 0..nx {
                    let r2 = (y as f64 - coil_y).powi(2) + (x as f64 - coil_x).powi(2);
                    let mag = (-r2 / (2.0 * sigma * sigma)).exp();
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let phase = phase0
                        + 2.0 * std::f64::consts::PI * (lin_y * dy + lin_x * dx)
                        + quad * (dy * dy + dx * dx);
                    sens[[c, s, y, x]] = Complex64::from_polar(mag, phase);
                }
            }
        }
    }

    if cfg.normalize {
        for s in 0..nslices {
            for y in 0..ny {
                for x in 0..nx {
                    let rss: f64 = (0..cfg.ncoils)
                        .map(|c| sens[[c, s, y, x]].norm_sqr())
                        .sum::<f64>()
                        .sqrt();
                    if rss > 0.0 {
                        for c in 0..cfg.ncoils {
                            sens[[c, s, y, x]] /= rss;
                        }
                    }
                }
            }
        }
    }

    Ok(CoilProfileSet { sensitivities: sens, ncoils: cfg.ncoils, gradient_bound })
}

/// Channel images phantom * c_i, as an [`ImageVolume`] (slice, channel, y, x).
pub fn channel_images(phantom: &Phantom, coils: &CoilProfileSet) -> Result<ImageVolume> {
    let (nslices, ny, nx) = phantom.dims();
    let (nc, cs, cny, cnx) = coils.sensitivities.dim();
    if (cs, cny, cnx) != (nslices, ny, nx) {
        return Err(Error::dims(format!(
            "coil dims ({cs}, {cny}, {cnx}) do not match phantom ({nslices}, {ny}, {nx})"
        )));
    }
    let data = Array4::from_shape_fn((nslices, nc, ny, nx), |(s, c, y, x)| {
        coils.sensitivities[[c, s, y, x]] * phantom.volume[[s, y, x]]
    });
    ImageVolume::new(data)
}

/// Forward acquisition: k_i = fft2c(phantom * c_i) + sigma * complex white
/// Gaussian noise, deterministic per seed.
pub fn simulate_acquisition(
    phantom: &Phantom,
    coils: &CoilProfileSet,
    noise_sigma: f64,
    seed: u64,
) -> Result<KSpaceVolume> {
    if noise_sigma < 0.0 {
        return Err(Error::invalid("noise_sigma must be >= 0"));
    }
    let images = channel_images(phantom, coils)?;
    let mut kspace = fft2c(&images)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5150_ace5);
        for v in kspace.data.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(re, im) * noise_sigma;
        }
    }
    Ok(kspace)
}

/// Uniform draw of each rigid-body parameter from its closed interval,
/// deterministic per seed. Parameters are drawn in the fixed order alpha,
/// beta, gamma, m, n, t.
pub fn sample_geometry(ranges: &GeometryRanges, seed: u64) -> Result<Geometry> {
    let intervals = [
        ("alpha_deg", ranges.alpha_deg),
        ("beta_deg", ranges.beta_deg),
        ("gamma_deg", ranges.gamma_deg),
        ("m_px", ranges.m_px),
        ("n_px", ranges.n_px),
        ("t_px", ranges.t_px),
    ];
    for (name, (lo, hi)) in &intervals {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("{name} range must be finite")));
        }
        if lo > hi {
            return Err(Error::invalid(format!("{name} range is inverted")));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e03_e770);
    let mut draw = |(lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    };
    Ok(Geometry {
        alpha_deg: draw(ranges.alpha_deg),
        beta_deg: draw(ranges.beta_deg),
        gamma_deg: draw(ranges.gamma_deg),
        m_px: draw(ranges.m_px),
        n_px: draw(ranges.n_px),
        t_px: draw(ranges.t_px),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::rss_combine;
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;

    #[test]
    fn phantom_is_deterministic() {
        let dims = (2, 16, 16);
        let a = make_phantom(dims, 42, PhantomStyle::Ellipses).unwrap();
        let b = make_phantom(dims, 42, PhantomStyle::Ellipses).unwrap();
        assert_eq!(a.volume, b.volume);
        let c = make_phantom(dims, 43, PhantomStyle::Ellipses).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn ellipse_phantom_has_multiple_intensity_levels() {
        let p = make_phantom((1, 32, 32), 7, PhantomStyle::Ellipses).unwrap();
        let mut levels = HashSet::new();
        for &v in p.volume.iter() {
            if v > 0.0 {
                levels.insert((v * 1e6).round() as i64);
            }
        }
        assert!(levels.len() >= 3, "only {} intensity levels", levels.len());
        assert!(p.volume.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn phantom_support_is_connected_per_slice() {
        for style in [PhantomStyle::Ellipses, PhantomStyle::Blobs] {
            let p = make_phantom((3, 24, 24), 11, style).unwrap();
            let (ns, ny, nx) = p.dims();
            for s in 0..ns {
                let mask: Vec<Vec<bool>> = (0..ny)
                    .map(|y| (0..nx).map(|x| p.volume[[s, y, x]] > 0.0).collect())
                    .collect();
                let total: usize = mask.iter().flatten().filter(|&&b| b).count();
                assert!(total > 0);
                // BFS flood fill from any supported pixel.
                let start = (0..ny)
                    .flat_map(|y| (0..nx).map(move |x| (y, x)))
                    .find(|&(y, x)| mask[y][x])
                    .unwrap();
                let mut seen = vec![vec![false; nx]; ny];
                let mut queue = vec![start];
                seen[start.0][start.1] = true;
                let mut count = 0;
                while let Some((y, x)) = queue.pop() {
                    count += 1;
                    let mut push = |yy: isize, xx: isize| {
                        if yy >= 0 && xx >= 0 && (yy as usize) < ny && (xx as usize) < nx {
                            let (yy, xx) = (yy as usize, xx as usize);
                            if mask[yy][xx] && !seen[yy][xx] {
                                seen[yy][xx] = true;
                                queue.push((yy, xx));
                            }
                        }
                    };
                    push(y as isize - 1, x as isize);
                    push(y as isize + 1, x as isize);
                    push(y as isize, x as isize - 1);
                    push(y as isize, x as isize + 1);
                    queue.extend(std::iter::empty::<(usize, usize)>());
                }
                assert_eq!(count, total, "style {style:?} slice {s} support disconnected");
            }
        }
    }

    #[test]
    fn empty_phantom_rejected() {
        assert!(make_phantom_with((1, 16, 16), 1, PhantomStyle::Ellipses, 0).is_err());
        assert!(make_phantom((1, 4, 4), 1, PhantomStyle::Ellipses).is_err());
    }

    #[test]
    fn uniform_single_coil_is_all_ones() {
        let cfg = CoilConfig { ncoils: 1, uniform: true, ..CoilConfig::default() };
        let coils = synth_coil_sensitivities(&cfg, (1, 8, 8), 0).unwrap();
        assert!(coils
            .sensitivities
            .iter()
            .all(|v| (v - Complex64::new(1.0, 0.0)).norm() == 0.0));
    }

    #[test]
    fn coil_profiles_are_sos_normalized() {
        let cfg = CoilConfig::default();
        let coils = synth_coil_sensitivities(&cfg, (2, 16, 16), 3).unwrap();
        for s in 0..2 {
            for y in 0..16 {
                for x in 0..16 {
                    let sos: f64 = (0..cfg.ncoils)
                        .map(|c| coils.sensitivities[[c, s, y, x]].norm_sqr())
                        .sum();
                    assert_abs_diff_eq!(sos, 1.0, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn coil_profiles_respect_gradient_bound() {
        let cfg = CoilConfig { ncoils: 4, ..CoilConfig::default() };
        let coils = synth_coil_sensitivities(&cfg, (1, 32, 32), 5).unwrap();
        // Finite-difference scan oracle over every pixel of every coil.
        let mut max_grad: f64 = 0.0;
        for c in 0..4 {
            for y in 0..31 {
                for x in 0..31 {
                    let v = coils.sensitivities[[c, 0, y, x]];
                    let gy = (coils.sensitivities[[c, 0, y + 1, x]] - v).norm();
                    let gx = (coils.sensitivities[[c, 0, y, x + 1]] - v).norm();
                    max_grad = max_grad.max((gy * gy + gx * gx).sqrt());
                }
            }
        }
        assert!(
            max_grad <= coils.gradient_bound,
            "max gradient {max_grad} exceeds bound {}",
            coils.gradient_bound
        );
    }

    #[test]
    fn noiseless_single_uniform_coil_acquisition_is_plain_fft() {
        let phantom = make_phantom((1, 16, 16), 9, PhantomStyle::Ellipses).unwrap();
        let cfg = CoilConfig { ncoils: 1, uniform: true, normalize: false, ..CoilConfig::default() };
        let coils = synth_coil_sensitivities(&cfg, (1, 16, 16), 0).unwrap();
        let k = simulate_acquisition(&phantom, &coils, 0.0, 0).unwrap();
        let direct = fft2c(&channel_images(&phantom, &coils).unwrap()).unwrap();
        assert_eq!(k.data, direct.data);
    }

    #[test]
    fn noiseless_acquisition_satisfies_parseval() {
        let phantom = make_phantom((2, 16, 16), 13, PhantomStyle::Blobs).unwrap();
        let cfg = CoilConfig::default();
        let coils = synth_coil_sensitivities(&cfg, (2, 16, 16), 13).unwrap();
        let k = simulate_acquisition(&phantom, &coils, 0.0, 0).unwrap();
        // Direct pixel-sum oracle.
        let mut pixel_energy = 0.0;
        for s in 0..2 {
            for c in 0..cfg.ncoils {
                for y in 0..16 {
                    for x in 0..16 {
                        pixel_energy += (coils.sensitivities[[c, s, y, x]]
                            * phantom.volume[[s, y, x]])
                        .norm_sqr();
                    }
                }
            }
        }
        assert_abs_diff_eq!(k.norm2().powi(2), pixel_energy, epsilon = 1e-10 * pixel_energy);
    }

    #[test]
    fn noisy_acquisition_is_reproducible() {
        let phantom = make_phantom((1, 16, 16), 2, PhantomStyle::Ellipses).unwrap();
        let coils = synth_coil_sensitivities(&CoilConfig::default(), (1, 16, 16), 2).unwrap();
        let a = simulate_acquisition(&phantom, &coils, 0.05, 99).unwrap();
        let b = simulate_acquisition(&phantom, &coils, 0.05, 99).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate_acquisition(&phantom, &coils, 0.05, 100).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn normalized_coils_make_rss_reproduce_phantom() {
        let phantom = make_phantom((1, 16, 16), 4, PhantomStyle::Ellipses).unwrap();
        let coils = synth_coil_sensitivities(&CoilConfig::default(), (1, 16, 16), 4).unwrap();
        let images = channel_images(&phantom, &coils).unwrap();
        let rss = rss_combine(&images).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if phantom.volume[[0, y, x]] > 0.0 {
                    assert_abs_diff_eq!(rss[[0, y, x]], phantom.volume[[0, y, x]], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn geometry_sampling_contracts() {
        let zero = GeometryRanges {
            alpha_deg: (0.0, 0.0),
            beta_deg: (0.0, 0.0),
            gamma_deg: (0.0, 0.0),
            m_px: (0.0, 0.0),
            n_px: (0.0, 0.0),
            t_px: (0.0, 0.0),
        };
        assert_eq!(sample_geometry(&zero, 0).unwrap(), Geometry::identity());

        let defaults = GeometryRanges::default();
        // The default ranges must admit the extreme cases exercised in
        // evaluation: pitch of -10 degrees and 18 pixels of total translation.
        assert!(defaults.alpha_deg.0 <= -10.0);
        let max_total =
            defaults.m_px.1.abs().max(defaults.m_px.0.abs())
                + defaults.n_px.1.abs().max(defaults.n_px.0.abs())
                + defaults.t_px.1.abs().max(defaults.t_px.0.abs());
        assert!(max_total >= 18.0);

        let g1 = sample_geometry(&defaults, 5).unwrap();
        let g2 = sample_geometry(&defaults, 5).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.alpha_deg >= -10.0 && g1.alpha_deg <= 10.0);

        let inverted = GeometryRanges { alpha_deg: (1.0, -1.0), ..defaults };
        assert!(sample_geometry(&inverted, 0).is_err());
    }
}
