//! On-disk dataset container: a directory holding `meta.json` plus raw
//! arrays. Complex arrays (`.c64`) are interleaved little-endian binary32
//! (re, im) pairs; `.f32` is little-endian binary32; `mask.u8` is one byte
//! per ky line. Element order is slice-major, then channel, then ky row,
//! then kx column. Internal math stays in binary64; conversion happens at
//! this I/O boundary.

use ndarray::{Array3, Array4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Geometry;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaDims {
    pub nslices: usize,
    pub nchannels: usize,
    pub ny: usize,
    pub nx: usize,
}

/// One CLI invocation recorded in the container.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub format_version: u32,
    pub dims: MetaDims,
    pub geometry: Option<Geometry>,
    pub acceleration: Option<usize>,
    pub offset: Option<usize>,
    pub acs_lines: Option<usize>,
    pub seed: Option<u64>,
    /// Declared byte length per array file; must match file sizes exactly.
    pub array_bytes: BTreeMap<String, u64>,
    #[serde(default)]
    pub provenance: Vec<Provenance>,
}

/// In-memory view of a container directory. Every array is optional; a
/// pipeline stage fills in what it produces.
#[derive(Debug, Clone)]
pub struct DatasetContainer {
    pub meta: Meta,
    /// Fully-sampled k-space (slice, channel, ky, kx).
    pub kspace: Option<Array4<Complex64>>,
    /// One byte per ky line (0/1) describing the undersampling pattern.
    pub mask: Option<Vec<u8>>,
    pub maps_ref: Option<Array4<Complex64>>,
    pub maps_trans: Option<Array4<Complex64>>,
    pub maps_est: Option<Array4<Complex64>>,
    /// Calibration eigenvalue map (slice, ny, nx).
    pub eigval: Option<Array3<f64>>,
    /// Reconstructed combined image (slice, ny, nx).
    pub recon: Option<Array3<Complex64>>,
}

impl DatasetContainer {
    pub fn new(meta: Meta) -> Self {
        DatasetContainer {
            meta,
            kspace: None,
            mask: None,
            maps_ref: None,
            maps_trans: None,
            maps_est: None,
            eigval: None,
            recon: None,
        }
    }

    /// Error naming the artifact when a required array is absent.
    pub fn require<'a, T>(field: &'a Option<T>, file: &str) -> Result<&'a T> {
        field.as_ref().ok_or_else(|| Error::MissingArtifact(format!("{file} missing")))
    }
}

fn c64_bytes(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64 * 8
}

fn write_c64(path: &Path, data: &[Complex64]) -> Result<u64> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in data {
        f.write_all(&(v.re as f32).to_le_bytes())?;
        f.write_all(&(v.im as f32).to_le_bytes())?;
    }
    Ok(data.len() as u64 * 8)
}

fn write_f32(path: &Path, data: &[f64]) -> Result<u64> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in data {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(data.len() as u64 * 4)
}

fn read_exact_file(path: &Path, declared: u64, name: &str) -> Result<Vec<u8>> {
    let actual = std::fs::metadata(path)
        .map_err(|_| Error::MissingArtifact(format!("{name} missing")))?
        .len();
    if actual != declared {
        return Err(Error::Format(format!(
            "{name}: declared {declared} bytes, file holds {actual}"
        )));
    }
    let mut buf = Vec::with_capacity(actual as usize);
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() as u64 != actual {
        return Err(Error::Format(format!("{name}: truncated read")));
    }
    Ok(buf)
}

fn decode_c64(buf: &[u8]) -> Vec<Complex64> {
    buf.chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]) as f64;
            Complex64::new(re, im)
        })
        .collect()
}

fn decode_f32(buf: &[u8]) -> Vec<f64> {
    buf.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Write the container to `path` (created if needed). `meta.array_bytes` is
/// rebuilt from what is actually present.
pub fn save_dataset(container: &DatasetContainer, path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    let mut meta = container.meta.clone();
    meta.array_bytes.clear();
    let d = meta.dims;
    let vol_shape = [d.nslices, d.nchannels, d.ny, d.nx];
    let img_shape = [d.nslices, d.ny, d.nx];

    let check_and_write = |name: &str,
                               arr: &Option<Array4<Complex64>>,
                               meta: &mut Meta|
     -> Result<()> {
        if let Some(a) = arr {
            if a.shape() != vol_shape {
                return Err(Error::dims(format!("{name} shape does not match meta dims")));
            }
            let n = write_c64(&path.join(name), a.as_slice().unwrap())?;
            debug_assert_eq!(n, c64_bytes(a.shape()));
            meta.array_bytes.insert(name.to_string(), n);
        }
        Ok(())
    };
    check_and_write("kspace.c64", &container.kspace, &mut meta)?;
    check_and_write("maps_ref.c64", &container.maps_ref, &mut meta)?;
    check_and_write("maps_trans.c64", &container.maps_trans, &mut meta)?;
    check_and_write("maps_est.c64", &container.maps_est, &mut meta)?;

    if let Some(m) = &container.mask {
        if m.len() != d.ny {
            return Err(Error::dims("mask.u8 length does not match ny"));
        }
        std::fs::write(path.join("mask.u8"), m)?;
        meta.array_bytes.insert("mask.u8".into(), m.len() as u64);
    }
    if let Some(e) = &container.eigval {
        if e.shape() != img_shape {
            return Err(Error::dims("eigval.f32 shape does not match meta dims"));
        }
        let n = write_f32(&path.join("eigval.f32"), e.as_slice().unwrap())?;
        meta.array_bytes.insert("eigval.f32".into(), n);
    }
    if let Some(r) = &container.recon {
        if r.shape() != img_shape {
            return Err(Error::dims("recon.c64 shape does not match meta dims"));
        }
        let n = write_c64(&path.join("recon.c64"), r.as_slice().unwrap())?;
        meta.array_bytes.insert("recon.c64".into(), n);
    }
    let json = serde_json::to_vec_pretty(&meta)?;
    std::fs::write(path.join("meta.json"), json)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DatasetContainer> {
    let meta_path = path.join("meta.json");
    let json = std::fs::read(&meta_path)
        .map_err(|_| Error::MissingArtifact("meta.json missing".into()))?;
    let meta: Meta = serde_json::from_slice(&json)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unknown format_version {}, expected {FORMAT_VERSION}",
            meta.format_version
        )));
    }
    let d = meta.dims;
    let vol_shape = (d.nslices, d.nchannels, d.ny, d.nx);
    let img_shape = (d.nslices, d.ny, d.nx);
    let mut out = DatasetContainer::new(meta);

    let load_vol = |name: &str, meta: &Meta| -> Result<Option<Array4<Complex64>>> {
        match meta.array_bytes.get(name) {
            None => Ok(None),
            Some(&declared) => {
                let expected = c64_bytes(&[d.nslices, d.nchannels, d.ny, d.nx]);
                if declared != expected {
                    return Err(Error::Format(format!(
                        "{name}: declared {declared} bytes inconsistent with dims ({expected} expected)"
                    )));
                }
                let buf = read_exact_file(&path.join(name), declared, name)?;
                let data = decode_c64(&buf);
                Ok(Some(
                    Array4::from_shape_vec(vol_shape, data)
                        .map_err(|e| Error::Format(format!("{name}: {e}")))?,
                ))
            }
        }
    };
    out.kspace = load_vol("kspace.c64", &out.meta)?;
    out.maps_ref = load_vol("maps_ref.c64", &out.meta)?;
    out.maps_trans = load_vol("maps_trans.c64", &out.meta)?;
    out.maps_est = load_vol("maps_est.c64", &out.meta)?;

    if let Some(&declared) = out.meta.array_bytes.get("mask.u8") {
        if declared != d.ny as u64 {
            return Err(Error::Format(format!(
                "mask.u8: declared {declared} bytes inconsistent with ny {}",
                d.ny
            )));
        }
        out.mask = Some(read_exact_file(&path.join("mask.u8"), declared, "mask.u8")?);
    }
    if let Some(&declared) = out.meta.array_bytes.get("eigval.f32") {
        let expected = (d.nslices * d.ny * d.nx) as u64 * 4;
        if declared != expected {
            return Err(Error::Format(format!(
                "eigval.f32: declared {declared} bytes inconsistent with dims ({expected} expected)"
            )));
        }
        let buf = read_exact_file(&path.join("eigval.f32"), declared, "eigval.f32")?;
        out.eigval = Some(
            Array3::from_shape_vec(img_shape, decode_f32(&buf))
                .map_err(|e| Error::Format(format!("eigval.f32: {e}")))?,
        );
    }
    if let Some(&declared) = out.meta.array_bytes.get("recon.c64") {
        let expected = (d.nslices * d.ny * d.nx) as u64 * 8;
        if declared != expected {
            return Err(Error::Format(format!(
                "recon.c64: declared {declared} bytes inconsistent with dims ({expected} expected)"
            )));
        }
        let buf = read_exact_file(&path.join("recon.c64"), declared, "recon.c64")?;
        out.recon = Some(
            Array3::from_shape_vec(img_shape, decode_c64(&buf))
                .map_err(|e| Error::Format(format!("recon.c64: {e}")))?,
        );
    }
    Ok(out)
}
