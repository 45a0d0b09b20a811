//! ESPIRiT coil-map calibration: block-Hankel calibration matrix, row-space
//! analysis, per-pixel eigen-decomposition, SVD coil compression and map
//! phase normalization.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Array4, ArrayView3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{fft2c_plane, Dims, KSpaceVolume};

/// Calibration settings. `sv_rel_threshold` is relative to the largest
/// singular value; `eig_crop` zeroes maps below the eigenvalue threshold when
/// set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibConfig {
    pub kernel_k: usize,
    pub sv_rel_threshold: f64,
    pub eig_crop: Option<f64>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig { kernel_k: 6, sv_rel_threshold: 1e-3, eig_crop: None }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_k < 2 {
            return Err(Error::invalid("kernel_k must be >= 2"));
        }
        if !(self.sv_rel_threshold > 0.0 && self.sv_rel_threshold < 1.0) {
            return Err(Error::invalid("sv_rel_threshold must be in (0, 1)"));
        }
        if let Some(c) = self.eig_crop {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid("eig_crop must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Which pipeline stage produced a set of maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapRole {
    Reference,
    Transformed,
    Estimated,
}

/// Per-slice, per-channel complex coil maps with the companion eigenvalue
/// map. Indexing: (slice, channel, y, x).
#[derive(Debug, Clone)]
pub struct CoilMaps {
    pub maps: Array4<Complex64>,
    pub eigval: Array3<f64>,
    pub role: MapRole,
    /// Pixels where the top two eigenvalues were degenerate within 1e-12.
    pub degeneracy_log: Vec<(usize, usize, usize)>,
}

impl CoilMaps {
    pub fn dims(&self) -> Dims {
        let (nslices, nchannels, ny, nx) = self.maps.dim();
        Dims { nslices, nchannels, ny, nx }
    }
}

/// Block-Hankel calibration matrix for one slice of ACS data
/// (channels, ky, kx): one row per sliding kernel window position scanned
/// row-major, one column per (coil, dy, dx) with index i*k^2 + dy*k + dx.
pub fn build_calibration_matrix(
    acs: ArrayView3<Complex64>,
    cfg: &CalibConfig,
) -> Result<DMatrix<Complex64>> {
    cfg.validate()?;
    let (nc, ny, nx) = acs.dim();
    let k = cfg.kernel_k;
    if ny < k || nx < k {
        return Err(Error::invalid(format!(
            "ACS {ny}x{nx} smaller than {k}x{k} kernel"
        )));
    }
    let nwy = ny - k + 1;
    let nwx = nx - k + 1;
    let nrows = nwy * nwx;
    let ncols = nc * k * k;
    let mut m = DMatrix::<Complex64>::zeros(nrows, ncols);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let row = wy * nwx + wx;
            for i in 0..nc {
                for dy in 0..k {
                    for dx in 0..k {
                        m[(row, i * k * k + dy * k + dx)] = acs[[i, wy + dy, wx + dx]];
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Hermitian eigen-decomposition sorted by descending eigenvalue.
fn hermitian_eigen_desc(m: DMatrix<Complex64>) -> (Vec<f64>, DMatrix<Complex64>) {
    let eig = nalgebra::SymmetricEigen::new(m);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::<Complex64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// ESPIRiT maps from ACS data. For each slice the calibration-matrix row
/// space is extracted from the Gram matrix A^H A, each basis vector is
/// reshaped to per-coil k-space kernels, transformed to image space with the
/// isometry scaling, and the leading eigenpair of the per-pixel Gram gives
/// the map vector (unit norm) and its eigenvalue.
pub fn espirit_maps(
    acs: &KSpaceVolume,
    image_dims: (usize, usize),
    cfg: &CalibConfig,
) -> Result<CoilMaps> {
    cfg.validate()?;
    let Dims { nslices, nchannels, ny: acs_ny, nx: acs_nx } = acs.dims();
    let (ny, nx) = image_dims;
    let k = cfg.kernel_k;
    if acs_ny < k || acs_nx < k {
        return Err(Error::invalid("ACS smaller than kernel"));
    }
    if ny < acs_ny.min(ny) || nx < k {
        return Err(Error::invalid("image dims smaller than kernel"));
    }

    let mut maps = Array4::<Complex64>::zeros((nslices, nchannels, ny, nx));
    let mut eigval = Array3::<f64>::zeros((nslices, ny, nx));
    let mut degeneracy_log = Vec::new();

    for s in 0..nslices {
        let acs_slice = acs.data.index_axis(ndarray::Axis(0), s);
        let a = build_calibration_matrix(acs_slice, cfg)?;
        // Right singular vectors via the Hermitian Gram matrix.
        let gram = a.adjoint() * &a;
        let (evals, evecs) = hermitian_eigen_desc(gram);
        let sigma_max = evals[0].max(0.0).sqrt();
        if sigma_max <= 0.0 {
            return Err(Error::CalibrationFailed(format!(
                "slice {s}: calibration matrix is zero"
            )));
        }
        let cutoff = cfg.sv_rel_threshold * sigma_max;
        let retained: Vec<usize> = (0..evals.len())
            .filter(|&i| evals[i].max(0.0).sqrt() >= cutoff)
            .collect();
        if retained.is_empty() {
            return Err(Error::CalibrationFailed(format!(
                "slice {s}: no singular vectors above threshold"
            )));
        }

        // Image-domain kernels q^n_i with (1/k) scaling so the per-pixel Gram
        // is an isometry on calibration-consistent signals.
        let n_ret = retained.len();
        let mut q = Array4::<Complex64>::zeros((n_ret, nchannels, ny, nx));
        let (oy, ox) = ((ny - k) / 2, (nx - k) / 2);
        let scale = (ny as f64 * nx as f64).sqrt() / k as f64;
        for (n, &col) in retained.iter().enumerate() {
            let v = evecs.column(col);
            for i in 0..nchannels {
                let mut plane = Array2::<Complex64>::zeros((ny, nx));
                for dy in 0..k {
                    for dx in 0..k {
                        plane[[oy + dy, ox + dx]] = v[i * k * k + dy * k + dx];
                    }
                }
                fft2c_plane(&mut plane, true);
                // The calibration kernel acts by correlation in k-space, so
                // its image-domain profile is the point reflection (about DC)
                // of the plain inverse transform.
                for y in 0..ny {
                    for x in 0..nx {
                        q[[n, i, y, x]] = plane[[(ny - y) % ny, (nx - x) % nx]] * scale;
                    }
                }
            }
        }

        // Leading eigenpair of the nchannels x nchannels per-pixel Gram.
        for y in 0..ny {
            for x in 0..nx {
                let mut w = DMatrix::<Complex64>::zeros(nchannels, nchannels);
                for n in 0..n_ret {
                    for i in 0..nchannels {
                        let qi = q[[n, i, y, x]];
                        for j in 0..nchannels {
                            w[(i, j)] += qi.conj() * q[[n, j, y, x]];
                        }
                    }
                }
                let (vals, vecs) = hermitian_eigen_desc(w);
                let mut top = 0usize;
                if vals.len() > 1 && (vals[0] - vals[1]).abs() < 1e-12 {
                    degeneracy_log.push((s, y, x));
                    // Tie-break on the reference-channel component; the
                    // reference channel is resolved later, use channel 0 of
                    // the candidate pair here.
                    if vecs[(0, 1)].norm() > vecs[(0, 0)].norm() {
                        top = 1;
                    }
                }
                eigval[[s, y, x]] = vals[top].max(0.0);
                let v = vecs.column(top);
                let norm: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for i in 0..nchannels {
                        maps[[s, i, y, x]] = v[i] / norm;
                    }
                }
            }
        }
    }

    let mut out = CoilMaps { maps, eigval, role: MapRole::Reference, degeneracy_log };
    out = normalize_map_phase(&out);
    if let Some(crop) = cfg.eig_crop {
        apply_eig_crop(&mut out, crop);
    }
    Ok(out)
}

/// Zero map pixels whose eigenvalue falls below `crop`.
pub fn apply_eig_crop(maps: &mut CoilMaps, crop: f64) {
    let Dims { nslices, nchannels, ny, nx } = maps.dims();
    for s in 0..nslices {
        for y in 0..ny {
            for x in 0..nx {
                if maps.eigval[[s, y, x]] < crop {
                    for i in 0..nchannels {
                        maps.maps[[s, i, y, x]] = Complex64::new(0.0, 0.0);
                    }
                }
            }
        }
    }
}

/// Channel with the greatest mean magnitude over the whole volume.
pub fn reference_channel(maps: &Array4<Complex64>) -> usize {
    let (_, nc, _, _) = maps.dim();
    let mut best = 0usize;
    let mut best_mag = -1.0;
    for c in 0..nc {
        let mag: f64 = maps
            .index_axis(ndarray::Axis(1), c)
            .iter()
            .map(|v| v.norm())
            .sum();
        if mag > best_mag {
            best_mag = mag;
            best = c;
        }
    }
    best
}

/// Per pixel, rotate all channels by the unit scalar that makes the channel
/// sum real and non-negative. Magnitudes are unchanged. The sum convention is
/// stable across acquisitions of the same array: it does not depend on which
/// single channel happens to dominate a particular volume. Where the sum is
/// nearly zero (opposing channel phases) the volume-dominant channel is used
/// as a fallback anchor.
pub fn normalize_map_phase(maps: &CoilMaps) -> CoilMaps {
    let Dims { nslices, nchannels, ny, nx } = maps.dims();
    let fallback = reference_channel(&maps.maps);
    let mut out = maps.clone();
    for s in 0..nslices {
        for y in 0..ny {
            for x in 0..nx {
                let mut anchor = Complex64::new(0.0, 0.0);
                let mut pixel_norm = 0.0f64;
                for i in 0..nchannels {
                    let v = maps.maps[[s, i, y, x]];
                    anchor += v;
                    pixel_norm += v.norm_sqr();
                }
                let pixel_norm = pixel_norm.sqrt();
                if anchor.norm() <= 1e-9 * pixel_norm {
                    anchor = maps.maps[[s, fallback, y, x]];
                }
                let mag = anchor.norm();
                if mag > 0.0 {
                    let phase = anchor.conj() / mag;
                    for i in 0..nchannels {
                        out.maps[[s, i, y, x]] = maps.maps[[s, i, y, x]] * phase;
                    }
                }
            }
        }
    }
    out
}

/// SVD coil compression across all slices: the channel dimension is reduced
/// onto the dominant left singular subspace of the (samples x channels) data
/// matrix. Returns the compressed volume and the retained energy fraction.
pub fn coil_compress(
    kspace: &KSpaceVolume,
    target_channels: usize,
) -> Result<(KSpaceVolume, f64)> {
    let Dims { nslices, nchannels, ny, nx } = kspace.dims();
    if target_channels == 0 || target_channels > nchannels {
        return Err(Error::invalid(format!(
            "target channels {target_channels} out of range 1..={nchannels}"
        )));
    }
    // Channel-space Gram H = D^H D accumulated over all samples.
    let mut gram = DMatrix::<Complex64>::zeros(nchannels, nchannels);
    for s in 0..nslices {
        for y in 0..ny {
            for x in 0..nx {
                for i in 0..nchannels {
                    let di = kspace.data[[s, i, y, x]];
                    for j in 0..nchannels {
                        gram[(i, j)] += di.conj() * kspace.data[[s, j, y, x]];
                    }
                }
            }
        }
    }
    let total: f64 = (0..nchannels).map(|i| gram[(i, i)].re).sum();
    let (evals, evecs) = hermitian_eigen_desc(gram);
    let kept: f64 = evals.iter().take(target_channels).map(|v| v.max(0.0)).sum();
    let energy_fraction = if total > 0.0 { (kept / total).min(1.0) } else { 1.0 };

    let mut out = Array4::<Complex64>::zeros((nslices, target_channels, ny, nx));
    for s in 0..nslices {
        for y in 0..ny {
            for x in 0..nx {
                let d = DVector::from_fn(nchannels, |i, _| kspace.data[[s, i, y, x]]);
                for c in 0..target_channels {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..nchannels {
                        acc += evecs[(i, c)] * d[i];
                    }
                    out[[s, c, y, x]] = acc;
                }
            }
        }
    }
    Ok((KSpaceVolume { data: out }, energy_fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{extract_acs, fft2c, Dims, ImageVolume};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn cfg(k: usize) -> CalibConfig {
        CalibConfig { kernel_k: k, ..CalibConfig::default() }
    }

    #[test]
    fn calibration_matrix_matches_window_enumeration() {
        // 3x3 single-coil ACS [[1,2,3],[4,5,6],[7,8,9]], 2x2 kernel.
        let acs = Array3::from_shape_fn((1, 3, 3), |(_, y, x)| {
            Complex64::new((y * 3 + x + 1) as f64, 0.0)
        });
        let m = build_calibration_matrix(acs.view(), &cfg(2)).unwrap();
        let expected = [
            [1.0, 2.0, 4.0, 5.0],
            [2.0, 3.0, 5.0, 6.0],
            [4.0, 5.0, 7.0, 8.0],
            [5.0, 6.0, 8.0, 9.0],
        ];
        assert_eq!(m.nrows(), 4);
        assert_eq!(m.ncols(), 4);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m[(r, c)].re, expected[r][c]);
            }
        }
    }

    #[test]
    fn calibration_matrix_shape_default_settings() {
        let acs = Array3::<Complex64>::zeros((6, 24, 128));
        let m = build_calibration_matrix(acs.view(), &cfg(6)).unwrap();
        assert_eq!(m.nrows(), 19 * 123);
        assert_eq!(m.ncols(), 216);
        assert!(m.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn calibration_matrix_rejects_small_acs() {
        let acs = Array3::<Complex64>::zeros((1, 4, 4));
        assert!(build_calibration_matrix(acs.view(), &cfg(6)).is_err());
    }

    /// Fully-supported image under constant coil weights; σ = 0.
    fn constant_coil_kspace(weights: &[Complex64], ny: usize, nx: usize) -> KSpaceVolume {
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let base = Array2::from_shape_fn((ny, nx), |_| {
            Complex64::new(rng.gen_range(0.5..1.5), rng.gen_range(-0.2..0.2))
        });
        let nc = weights.len();
        let data = Array4::from_shape_fn((1, nc, ny, nx), |(_, c, y, x)| base[[y, x]] * weights[c]);
        fft2c(&ImageVolume::new(data).unwrap()).unwrap()
    }

    #[test]
    fn constant_two_coil_maps_recovered() {
        let weights = [Complex64::new(0.6, 0.0), Complex64::new(0.8, 0.0)];
        let k = constant_coil_kspace(&weights, 16, 16);
        let acs = extract_acs(&k, 12).unwrap();
        let maps = espirit_maps(&acs, (16, 16), &cfg(4)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_abs_diff_eq!(maps.eigval[[0, y, x]], 1.0, epsilon = 1e-6);
                assert_abs_diff_eq!(maps.maps[[0, 0, y, x]].re, 0.6, epsilon = 1e-6);
                assert_abs_diff_eq!(maps.maps[[0, 0, y, x]].im, 0.0, epsilon = 1e-6);
                assert_abs_diff_eq!(maps.maps[[0, 1, y, x]].re, 0.8, epsilon = 1e-6);
                assert_abs_diff_eq!(maps.maps[[0, 1, y, x]].im, 0.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn single_coil_degenerate_case() {
        let weights = [Complex64::new(1.0, 0.0)];
        let k = constant_coil_kspace(&weights, 16, 16);
        let acs = extract_acs(&k, 12).unwrap();
        let maps = espirit_maps(&acs, (16, 16), &cfg(4)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_abs_diff_eq!(maps.maps[[0, 0, y, x]].norm(), 1.0, epsilon = 1e-6);
                assert_abs_diff_eq!(maps.eigval[[0, y, x]], 1.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn maps_are_unit_norm_and_eigval_bounded() {
        let weights = [
            Complex64::new(0.5, 0.1),
            Complex64::new(0.7, -0.3),
            Complex64::new(0.2, 0.4),
        ];
        let k = constant_coil_kspace(&weights, 16, 16);
        let acs = extract_acs(&k, 12).unwrap();
        let maps = espirit_maps(&acs, (16, 16), &cfg(4)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let ev = maps.eigval[[0, y, x]];
                assert!((0.0..=1.0 + 1e-6).contains(&ev));
                if ev > 0.5 {
                    let norm: f64 = (0..3)
                        .map(|c| maps.maps[[0, c, y, x]].norm_sqr())
                        .sum::<f64>()
                        .sqrt();
                    assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn calibration_is_scale_invariant() {
        let weights = [Complex64::new(0.6, 0.2), Complex64::new(0.7, -0.1)];
        let k = constant_coil_kspace(&weights, 16, 16);
        let acs = extract_acs(&k, 12).unwrap();
        let maps_a = espirit_maps(&acs, (16, 16), &cfg(4)).unwrap();

        let scaled = KSpaceVolume {
            data: acs.data.mapv(|v| v * Complex64::new(-3.0, 4.5)),
        };
        let maps_b = espirit_maps(&scaled, (16, 16), &cfg(4)).unwrap();
        for (a, b) in maps_a.maps.iter().zip(maps_b.maps.iter()) {
            assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn calibration_fails_on_zero_acs() {
        let acs = KSpaceVolume::zeros(Dims { nslices: 1, nchannels: 2, ny: 8, nx: 8 });
        match espirit_maps(&acs, (8, 8), &cfg(4)) {
            Err(Error::CalibrationFailed(_)) => {}
            other => panic!("expected CalibrationFailed, got {other:?}"),
        }
    }

    #[test]
    fn phase_normalization_basics() {
        let mut maps = Array4::<Complex64>::zeros((1, 2, 1, 1));
        maps[[0, 0, 0, 0]] = Complex64::new(0.0, 0.6);
        maps[[0, 1, 0, 0]] = Complex64::new(0.0, 0.8);
        let cm = CoilMaps {
            maps,
            eigval: Array3::ones((1, 1, 1)),
            role: MapRole::Reference,
            degeneracy_log: vec![],
        };
        // The channel sum 1.4i is rotated onto the real axis, making this
        // common-phase vector real non-negative in every channel.
        let nm = normalize_map_phase(&cm);
        assert_abs_diff_eq!(nm.maps[[0, 0, 0, 0]].re, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(nm.maps[[0, 0, 0, 0]].im, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nm.maps[[0, 1, 0, 0]].re, 0.8, epsilon = 1e-15);

        // Idempotence.
        let again = normalize_map_phase(&nm);
        for (a, b) in nm.maps.iter().zip(again.maps.iter()) {
            assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn phase_normalization_preserves_modulus() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let maps = Array4::from_shape_fn((2, 3, 4, 4), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let cm = CoilMaps {
            maps: maps.clone(),
            eigval: Array3::ones((2, 4, 4)),
            role: MapRole::Reference,
            degeneracy_log: vec![],
        };
        let nm = normalize_map_phase(&cm);
        for (a, b) in maps.iter().zip(nm.maps.iter()) {
            assert_abs_diff_eq!(a.norm(), b.norm(), epsilon = 1e-12);
        }
        // The per-pixel channel sum is real non-negative everywhere.
        let (ns, nc, ny, nx) = nm.maps.dim();
        for s in 0..ns {
            for y in 0..ny {
                for x in 0..nx {
                    let sum: Complex64 =
                        (0..nc).map(|i| nm.maps[[s, i, y, x]]).sum();
                    assert!(sum.re >= -1e-15);
                    assert_abs_diff_eq!(sum.im, 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn coil_compress_drops_zero_channel() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let mut data = Array4::<Complex64>::zeros((1, 2, 8, 8));
        for y in 0..8 {
            for x in 0..8 {
                data[[0, 0, y, x]] = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        let k = KSpaceVolume::new(data.clone()).unwrap();
        let (out, energy) = coil_compress(&k, 1).unwrap();
        assert_abs_diff_eq!(energy, 1.0, epsilon = 1e-12);
        // Output equals channel 0 up to a global unit-modulus factor.
        let a = out.data[[0, 0, 0, 0]];
        let b = data[[0, 0, 0, 0]];
        let phase = a / b;
        assert_abs_diff_eq!(phase.norm(), 1.0, epsilon = 1e-10);
        for y in 0..8 {
            for x in 0..8 {
                let expected = data[[0, 0, y, x]] * phase;
                assert_abs_diff_eq!((out.data[[0, 0, y, x]] - expected).norm(), 0.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn coil_compress_energy_matches_svd_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let data = Array4::from_shape_fn((2, 4, 6, 6), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let k = KSpaceVolume::new(data.clone()).unwrap();

        // Independent oracle: full SVD singular values of the explicit
        // (samples x channels) matrix.
        let nsamp = 2 * 6 * 6;
        let mut d = DMatrix::<Complex64>::zeros(nsamp, 4);
        let mut row = 0;
        for s in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    for c in 0..4 {
                        d[(row, c)] = data[[s, c, y, x]];
                    }
                    row += 1;
                }
            }
        }
        let sv = d.singular_values();
        let total: f64 = sv.iter().map(|v| v * v).sum();

        for target in 1..=4usize {
            let (out, energy) = coil_compress(&k, target).unwrap();
            let expected: f64 = sv.iter().take(target).map(|v| v * v).sum::<f64>() / total;
            assert_abs_diff_eq!(energy, expected, epsilon = 1e-10);
            // Output energy matches the retained fraction of input energy.
            let got: f64 = out.data.iter().map(|v| v.norm_sqr()).sum();
            assert_abs_diff_eq!(got / total, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn coil_compress_parameter_errors() {
        let k = KSpaceVolume::zeros(Dims { nslices: 1, nchannels: 2, ny: 4, nx: 4 });
        assert!(coil_compress(&k, 3).is_err());
        assert!(coil_compress(&k, 0).is_err());
    }
}

