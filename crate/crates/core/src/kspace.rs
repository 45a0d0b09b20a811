//! Complex image/k-space containers, centered unitary 2D Fourier transforms,
//! uniform undersampling masks, ACS extraction and coil combination.
//!
//! Indexing convention throughout: (slice, channel, ky, kx). The Fourier
//! transforms are unitary (1/sqrt(N) per direction) and centered with the DC
//! component at (floor(ny/2), floor(nx/2)).

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayViewMut2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Grid dimensions of a multi-slice multi-channel volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub nslices: usize,
    pub nchannels: usize,
    pub ny: usize,
    pub nx: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.nslices * self.nchannels * self.ny * self.nx
    }

    pub fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.nslices, self.nchannels, self.ny, self.nx)
    }
}

fn check_volume(data: &Array4<Complex64>, context: &str) -> Result<()> {
    let dim = data.dim();
    if dim.0 < 1 || dim.1 < 1 || dim.2 < 1 || dim.3 < 1 {
        return Err(Error::invalid(format!("{context}: all dims must be >= 1")));
    }
    for (idx, v) in data.indexed_iter() {
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(Error::NonFinite {
                context: context.to_string(),
                index: vec![idx.0, idx.1, idx.2, idx.3],
            });
        }
    }
    Ok(())
}

/// Multi-slice, multi-channel complex k-space samples.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceVolume {
    pub data: Array4<Complex64>,
}

/// Multi-slice, multi-channel complex image pixels, same indexing as
/// [`KSpaceVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    pub data: Array4<Complex64>,
}

macro_rules! volume_impl {
    ($t:ident) => {
        impl $t {
            pub fn new(data: Array4<Complex64>) -> Result<Self> {
                check_volume(&data, stringify!($t))?;
                Ok(Self { data })
            }

            pub fn zeros(dims: Dims) -> Self {
                Self {
                    data: Array4::zeros((dims.nslices, dims.nchannels, dims.ny, dims.nx)),
                }
            }

            pub fn dims(&self) -> Dims {
                let (nslices, nchannels, ny, nx) = self.data.dim();
                Dims { nslices, nchannels, ny, nx }
            }

            pub fn norm2(&self) -> f64 {
                self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
            }
        }
    };
}

volume_impl!(KSpaceVolume);
volume_impl!(ImageVolume);

/// Binary phase-encode line selector for uniform undersampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    pub ny: usize,
    pub sampled: Vec<bool>,
    pub acceleration: usize,
    pub offset: usize,
}

impl SamplingMask {
    pub fn n_sampled(&self) -> usize {
        self.sampled.iter().filter(|&&s| s).count()
    }
}

/// Uniform mask sampling every `acceleration`-th ky line starting at `offset`.
pub fn make_uniform_mask(ny: usize, acceleration: usize, offset: usize) -> Result<SamplingMask> {
    if acceleration < 1 || acceleration > ny {
        return Err(Error::invalid(format!(
            "acceleration {acceleration} out of range 1..={ny}"
        )));
    }
    if offset >= acceleration {
        return Err(Error::invalid(format!(
            "offset {offset} must be < acceleration {acceleration}"
        )));
    }
    let sampled = (0..ny).map(|k| k % acceleration == offset).collect();
    Ok(SamplingMask { ny, sampled, acceleration, offset })
}

fn circular_shift_rows(a: &mut Array2<Complex64>, shift: usize) {
    let n = a.nrows();
    if shift % n == 0 {
        return;
    }
    let src = a.clone();
    for i in 0..n {
        let dst = (i + shift) % n;
        a.row_mut(dst).assign(&src.row(i));
    }
}

fn circular_shift_cols(a: &mut Array2<Complex64>, shift: usize) {
    let n = a.ncols();
    if shift % n == 0 {
        return;
    }
    let src = a.clone();
    for j in 0..n {
        let dst = (j + shift) % n;
        a.column_mut(dst).assign(&src.column(j));
    }
}

/// Centered unitary 2D DFT of one (ny, nx) plane, in place.
/// `inverse` selects the backward transform.
pub fn fft2c_plane(plane: &mut Array2<Complex64>, inverse: bool) {
    let (ny, nx) = plane.dim();
    // ifftshift: move DC from the center index to 0.
    circular_shift_rows(plane, ny - ny / 2);
    circular_shift_cols(plane, nx - nx / 2);

    let mut planner = FftPlanner::<f64>::new();
    let fft_x = if inverse {
        planner.plan_fft_inverse(nx)
    } else {
        planner.plan_fft_forward(nx)
    };
    let fft_y = if inverse {
        planner.plan_fft_inverse(ny)
    } else {
        planner.plan_fft_forward(ny)
    };

    for mut row in plane.rows_mut() {
        let mut buf: Vec<Complex64> = row.to_vec();
        fft_x.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(buf) {
            *dst = src;
        }
    }
    for mut col in plane.columns_mut() {
        let mut buf: Vec<Complex64> = col.to_vec();
        fft_y.process(&mut buf);
        for (dst, src) in col.iter_mut().zip(buf) {
            *dst = src;
        }
    }

    // fftshift: move DC back to the center index.
    circular_shift_rows(plane, ny / 2);
    circular_shift_cols(plane, nx / 2);

    let scale = 1.0 / ((ny * nx) as f64).sqrt();
    plane.mapv_inplace(|v| v * scale);
}

fn transform_volume(data: &Array4<Complex64>, inverse: bool) -> Array4<Complex64> {
    let mut out = data.clone();
    let (ns, nc, _, _) = out.dim();
    for s in 0..ns {
        for c in 0..nc {
            let mut plane = out.index_axis_mut(Axis(0), s);
            let mut plane = plane.index_axis_mut(Axis(0), c);
            let mut owned = plane.to_owned();
            fft2c_plane(&mut owned, inverse);
            plane.assign(&owned);
        }
    }
    out
}

/// Centered unitary 2D FFT per slice per channel (image -> k-space).
pub fn fft2c(image: &ImageVolume) -> Result<KSpaceVolume> {
    check_volume(&image.data, "fft2c input")?;
    KSpaceVolume::new(transform_volume(&image.data, false))
}

/// Exact inverse of [`fft2c`] (k-space -> image).
pub fn ifft2c(kspace: &KSpaceVolume) -> Result<ImageVolume> {
    check_volume(&kspace.data, "ifft2c input")?;
    ImageVolume::new(transform_volume(&kspace.data, true))
}

/// Zero out the unsampled ky lines; sampled lines are copied bit-identically.
pub fn apply_mask(kspace: &KSpaceVolume, mask: &SamplingMask) -> Result<KSpaceVolume> {
    let dims = kspace.dims();
    if mask.ny != dims.ny {
        return Err(Error::dims(format!(
            "mask ny {} != kspace ny {}",
            mask.ny, dims.ny
        )));
    }
    let mut out = kspace.data.clone();
    for ((_, _, ky, _), v) in out.indexed_iter_mut() {
        if !mask.sampled[ky] {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    Ok(KSpaceVolume { data: out })
}

/// Zero-filled aliased channel images: ifft2c of the masked k-space.
pub fn zero_fill_images(kspace: &KSpaceVolume, mask: &SamplingMask) -> Result<ImageVolume> {
    let masked = apply_mask(kspace, mask)?;
    ifft2c(&masked)
}

/// The `n_lines` central ky rows (floor-centered on ny/2), all kx, channels
/// and slices.
pub fn extract_acs(kspace: &KSpaceVolume, n_lines: usize) -> Result<KSpaceVolume> {
    let dims = kspace.dims();
    if n_lines > dims.ny {
        return Err(Error::invalid(format!(
            "acs lines {} exceed ny {}",
            n_lines, dims.ny
        )));
    }
    if n_lines == 0 {
        return Err(Error::invalid("acs lines must be >= 1"));
    }
    let start = dims.ny / 2 - n_lines / 2;
    let data = kspace
        .data
        .slice(ndarray::s![.., .., start..start + n_lines, ..])
        .to_owned();
    KSpaceVolume::new(data)
}

/// Row range selected by [`extract_acs`], for callers that need the offsets.
pub fn acs_row_range(ny: usize, n_lines: usize) -> (usize, usize) {
    let start = ny / 2 - n_lines / 2;
    (start, start + n_lines)
}

/// Root-sum-of-squares coil combination: per-pixel sqrt(sum_i |x_i|^2).
pub fn rss_combine(images: &ImageVolume) -> Result<Array3<f64>> {
    check_volume(&images.data, "rss_combine input")?;
    let (ns, nc, ny, nx) = images.data.dim();
    let mut out = Array3::<f64>::zeros((ns, ny, nx));
    for s in 0..ns {
        for c in 0..nc {
            for y in 0..ny {
                for x in 0..nx {
                    out[[s, y, x]] += images.data[[s, c, y, x]].norm_sqr();
                }
            }
        }
    }
    out.mapv_inplace(f64::sqrt);
    Ok(out)
}

/// Centered unitary FFT of a bare 2D view, returning a new array. Convenience
/// for per-slice solver code.
pub fn fft2c_view(plane: ArrayView2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let mut out = plane.to_owned();
    fft2c_plane(&mut out, inverse);
    out
}

/// Apply a ky-line mask to a single (ny, nx) k-space plane in place.
pub fn mask_plane(plane: &mut ArrayViewMut2<Complex64>, mask: &SamplingMask) {
    for (ky, mut row) in plane.rows_mut().into_iter().enumerate() {
        if !mask.sampled[ky] {
            row.fill(Complex64::new(0.0, 0.0));
        }
    }
}
