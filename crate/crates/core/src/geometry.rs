//! Rigid-body subject-coil transform: point mapping, trilinear volume
//! resampling into the standard reference multi-slice axial stack, and
//! production of transformed coil-map training targets.

use ndarray::Array3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::calibrate::{espirit_maps, CalibConfig, CoilMaps, MapRole};
use crate::error::{Error, Result};
use crate::kspace::{extract_acs, fft2c, ifft2c, Dims, ImageVolume, KSpaceVolume};

/// Rigid-body transform parameters: rotations in degrees (pitch, roll, head
/// rotation) and translations in pixels (left-right, anterior-posterior,
/// head-foot).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub alpha_deg: f64,
    pub beta_deg: f64,
    pub gamma_deg: f64,
    pub m_px: f64,
    pub n_px: f64,
    pub t_px: f64,
}

impl Geometry {
    pub fn identity() -> Self {
        Geometry { alpha_deg: 0.0, beta_deg: 0.0, gamma_deg: 0.0, m_px: 0.0, n_px: 0.0, t_px: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        [self.alpha_deg, self.beta_deg, self.gamma_deg, self.m_px, self.n_px, self.t_px]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Combined rotation matrix Rx(alpha) * Ry(beta) * Rz(gamma), row-major.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let (sa, ca) = self.alpha_deg.to_radians().sin_cos();
        let (sb, cb) = self.beta_deg.to_radians().sin_cos();
        let (sg, cg) = self.gamma_deg.to_radians().sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
        mat_mul(&mat_mul(&rx, &ry), &rz)
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m_px, self.n_px, self.t_px]
    }

    pub fn inverse(&self) -> RigidInverse {
        RigidInverse { rotation: self.rotation(), translation: self.translation() }
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn mat_vec(a: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Precomputed inverse transform q -> R^T (q - t).
pub struct RigidInverse {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl RigidInverse {
    pub fn apply(&self, q: [f64; 3]) -> [f64; 3] {
        let d = [
            q[0] - self.translation[0],
            q[1] - self.translation[1],
            q[2] - self.translation[2],
        ];
        // R is orthonormal, so R^-1 = R^T.
        [
            self.rotation[0][0] * d[0] + self.rotation[1][0] * d[1] + self.rotation[2][0] * d[2],
            self.rotation[0][1] * d[0] + self.rotation[1][1] * d[1] + self.rotation[2][1] * d[2],
            self.rotation[0][2] * d[0] + self.rotation[1][2] * d[1] + self.rotation[2][2] * d[2],
        ]
    }
}

/// p' = Rx(alpha) Ry(beta) Rz(gamma) p + (m, n, t); p in pixel coordinates.
pub fn rigid_transform_point(p: [f64; 3], g: &Geometry) -> [f64; 3] {
    let rotated = mat_vec(&g.rotation(), p);
    let t = g.translation();
    [rotated[0] + t[0], rotated[1] + t[1], rotated[2] + t[2]]
}

/// Trilinear sample of a (nslices, ny, nx) complex volume at continuous pixel
/// coordinates (x, y, z); zero outside the grid.
fn trilinear_sample(vol: &Array3<Complex64>, x: f64, y: f64, z: f64) -> Complex64 {
    let (nz, ny, nx) = vol.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let z0 = z.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fz = z - z0;
    let mut acc = Complex64::new(0.0, 0.0);
    for dz in 0..2usize {
        for dy in 0..2usize {
            for dx in 0..2usize {
                let w = (if dx == 0 { 1.0 - fx } else { fx })
                    * (if dy == 0 { 1.0 - fy } else { fy })
                    * (if dz == 0 { 1.0 - fz } else { fz });
                if w == 0.0 {
                    continue;
                }
                let xi = x0 as isize + dx as isize;
                let yi = y0 as isize + dy as isize;
                let zi = z0 as isize + dz as isize;
                if xi >= 0 && yi >= 0 && zi >= 0 && (xi as usize) < nx && (yi as usize) < ny && (zi as usize) < nz
                {
                    acc += vol[[zi as usize, yi as usize, xi as usize]] * w;
                }
            }
        }
    }
    acc
}

/// Resample a (nslices, ny, nx) complex volume into the reference grid: the
/// output voxel at reference location q is interpolated from the input at the
/// inverse-transformed location. Coordinates have their origin at the volume
/// center; out-of-bounds samples are zero.
pub fn resample_complex_volume(vol: &Array3<Complex64>, g: &Geometry) -> Result<Array3<Complex64>> {
    if !g.is_finite() {
        return Err(Error::invalid("geometry parameters must be finite"));
    }
    let (nz, ny, nx) = vol.dim();
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let cz = (nz as f64 - 1.0) / 2.0;
    let inv = g.inverse();
    let mut out = Array3::zeros((nz, ny, nx));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = [x as f64 - cx, y as f64 - cy, z as f64 - cz];
                let p = inv.apply(q);
                out[[z, y, x]] = trilinear_sample(vol, p[0] + cx, p[1] + cy, p[2] + cz);
            }
        }
    }
    Ok(out)
}

/// Real-volume variant of [`resample_complex_volume`].
pub fn resample_real_volume(vol: &Array3<f64>, g: &Geometry) -> Result<Array3<f64>> {
    let complex = vol.mapv(|v| Complex64::new(v, 0.0));
    Ok(resample_complex_volume(&complex, g)?.mapv(|v| v.re))
}

/// Resample applying the inverse transform to the content: the output voxel
/// at q is interpolated from the input at the forward-mapped location g(q).
/// `resample_*_volume` followed by this is an approximate identity away from
/// the borders.
pub fn resample_complex_volume_inv(
    vol: &Array3<Complex64>,
    g: &Geometry,
) -> Result<Array3<Complex64>> {
    if !g.is_finite() {
        return Err(Error::invalid("geometry parameters must be finite"));
    }
    let (nz, ny, nx) = vol.dim();
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let cz = (nz as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros((nz, ny, nx));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = [x as f64 - cx, y as f64 - cy, z as f64 - cz];
                let p = rigid_transform_point(q, g);
                out[[z, y, x]] = trilinear_sample(vol, p[0] + cx, p[1] + cy, p[2] + cz);
            }
        }
    }
    Ok(out)
}

/// Real-volume variant of [`resample_complex_volume_inv`].
pub fn resample_real_volume_inv(vol: &Array3<f64>, g: &Geometry) -> Result<Array3<f64>> {
    let complex = vol.mapv(|v| Complex64::new(v, 0.0));
    Ok(resample_complex_volume_inv(&complex, g)?.mapv(|v| v.re))
}

/// Per-channel resample of a multi-channel image volume.
pub fn resample_image_volume(vol: &ImageVolume, g: &Geometry) -> Result<ImageVolume> {
    let Dims { nslices, nchannels, ny, nx } = vol.dims();
    let mut out = ImageVolume::zeros(vol.dims());
    for c in 0..nchannels {
        let mut chan = Array3::zeros((nslices, ny, nx));
        for s in 0..nslices {
            for y in 0..ny {
                for x in 0..nx {
                    chan[[s, y, x]] = vol.data[[s, c, y, x]];
                }
            }
        }
        let res = resample_complex_volume(&chan, g)?;
        for s in 0..nslices {
            for y in 0..ny {
                for x in 0..nx {
                    out.data[[s, c, y, x]] = res[[s, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// Transformed-map pipeline: unaliased channel images are resampled into the
/// reference stack, re-encoded, and calibrated there.
pub fn compute_transformed_maps(
    fully_sampled: &KSpaceVolume,
    g: &Geometry,
    acs_lines: usize,
    cfg: &CalibConfig,
) -> Result<CoilMaps> {
    let images = ifft2c(fully_sampled)?;
    let moved = resample_image_volume(&images, g)?;
    let kspace = fft2c(&moved)?;
    let acs = extract_acs(&kspace, acs_lines)?;
    let dims = fully_sampled.dims();
    let mut maps = espirit_maps(&acs, (dims.ny, dims.nx), cfg)?;
    maps.role = MapRole::Transformed;
    Ok(maps)
}
