//! Reconstruction quality metrics: NRMSE, PSNR, pixel-wise Pearson
//! correlation and sliding-window local error maps. All metrics operate on
//! real (magnitude) images.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-slice and aggregate evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_slice_nrmse: Vec<f64>,
    pub per_slice_psnr_db: Vec<f64>,
    pub nrmse: f64,
    pub psnr_db: f64,
    /// Pearson correlation per channel, when maps were evaluated.
    pub pearson_per_channel: Vec<f64>,
    pub config: String,
}

/// ||recon - ref||_2 / ||ref||_2 over flattened magnitude images.
pub fn nrmse(recon: &[f64], reference: &[f64]) -> Result<f64> {
    if recon.len() != reference.len() {
        return Err(Error::dims(format!(
            "nrmse inputs differ in length: {} vs {}",
            recon.len(),
            reference.len()
        )));
    }
    let ref_norm: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ref_norm == 0.0 {
        return Err(Error::invalid("nrmse reference has zero norm"));
    }
    let err: f64 = recon
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(err / ref_norm)
}

/// 20*log10(max|ref| / rmse); identical inputs return +infinity.
pub fn psnr(recon: &[f64], reference: &[f64]) -> Result<f64> {
    if recon.len() != reference.len() {
        return Err(Error::dims("psnr inputs differ in length"));
    }
    let peak = reference.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    if peak == 0.0 {
        return Err(Error::invalid("psnr reference is zero"));
    }
    let mse: f64 = recon
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / recon.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// Sample Pearson correlation over pixels where `support` is true.
pub fn pearson(a: &[f64], b: &[f64], support: &[bool]) -> Result<f64> {
    if a.len() != b.len() || a.len() != support.len() {
        return Err(Error::dims("pearson inputs differ in length"));
    }
    let idx: Vec<usize> = (0..a.len()).filter(|&i| support[i]).collect();
    if idx.len() < 2 {
        return Err(Error::invalid("pearson needs at least 2 supported pixels"));
    }
    let n = idx.len() as f64;
    let mean_a: f64 = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
    let mean_b: f64 = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for &i in &idx {
        let da = a[i] - mean_a;
        let db = b[i] - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::invalid("pearson input has zero variance on support"));
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Per-pixel RMSE of (|recon| - |ref|) over a centered odd-sized window
/// (zero-padded borders), normalized by the global max|ref|.
pub fn local_error_map(recon: &Array2<f64>, reference: &Array2<f64>, window: usize) -> Result<Array2<f64>> {
    if recon.dim() != reference.dim() {
        return Err(Error::dims("local_error_map shape mismatch"));
    }
    let (ny, nx) = recon.dim();
    if window % 2 == 0 {
        return Err(Error::invalid("window must be odd"));
    }
    if window > ny.min(nx) {
        return Err(Error::invalid("window exceeds image dims"));
    }
    let peak = reference.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    if peak == 0.0 {
        return Err(Error::invalid("local_error_map reference is zero"));
    }
    let half = (window / 2) as isize;
    let n_win = (window * window) as f64;
    let mut out = Array2::<f64>::zeros((ny, nx));
    for y in 0..ny as isize {
        for x in 0..nx as isize {
            let mut acc = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let yy = y + dy;
                    let xx = x + dx;
                    if yy >= 0 && xx >= 0 && (yy as usize) < ny && (xx as usize) < nx {
                        let d = recon[[yy as usize, xx as usize]]
                            - reference[[yy as usize, xx as usize]];
                        acc += d * d;
                    }
                }
            }
            out[[y as usize, x as usize]] = (acc / n_win).sqrt() / peak;
        }
    }
    Ok(out)
}

/// NRMSE over a (slice, y, x) volume pair, per slice and aggregate.
pub fn volume_nrmse(recon: &Array3<f64>, reference: &Array3<f64>) -> Result<(Vec<f64>, f64)> {
    if recon.dim() != reference.dim() {
        return Err(Error::dims("volume shape mismatch"));
    }
    let ns = recon.dim().0;
    let mut per_slice = Vec::with_capacity(ns);
    for s in 0..ns {
        let r: Vec<f64> = recon.index_axis(ndarray::Axis(0), s).iter().cloned().collect();
        let f: Vec<f64> = reference.index_axis(ndarray::Axis(0), s).iter().cloned().collect();
        per_slice.push(nrmse(&r, &f)?);
    }
    let r: Vec<f64> = recon.iter().cloned().collect();
    let f: Vec<f64> = reference.iter().cloned().collect();
    Ok((per_slice, nrmse(&r, &f)?))
}
