//! Command-line pipeline: simulate -> undersample -> calibrate ->
//! maps-transform -> train -> estimate -> recon -> eval -> report. Each stage
//! reads and writes the dataset container, appends a provenance record, and
//! exits 0 on success. Missing pipeline inputs exit 2; every other failure
//! exits 1, with a machine-readable JSON error on stderr.
//!
//! Config files (`--net`, `--train`, `--geometry-ranges`) are flat key-value
//! text: one `key = value` per line, `#` comments; unknown keys are errors.

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Array3, Array4, Axis};
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use crate::calibrate::{apply_eig_crop, espirit_maps, CalibConfig, CoilMaps, MapRole};
use crate::container::{
    load_dataset, save_dataset, DatasetContainer, Meta, MetaDims, Provenance, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::estimator::{
    aliased_planes, estimate_maps, load_checkpoint, maps_to_planes, normalize_for_recon,
    save_checkpoint, train as train_loop, LambdaMode, NetworkConfig, PadMode, TrainSample,
    TrainingConfig,
};
use crate::geometry::{compute_transformed_maps, resample_real_volume_inv};
use crate::kspace::{
    apply_mask, extract_acs, ifft2c, make_uniform_mask, rss_combine, zero_fill_images,
    KSpaceVolume, SamplingMask,
};
use crate::metrics::{local_error_map, pearson, volume_nrmse, EvalReport};
use crate::recon::{l1_espirit, sense_cg, ReconConfig};
use crate::simulate::{
    make_phantom, sample_geometry, simulate_acquisition, synth_coil_sensitivities, CoilConfig,
    GeometryRanges, Phantom, PhantomStyle,
};

#[derive(Parser)]
#[command(name = "parmri", version, about = "Calibrationless parallel-MRI toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReconMethod {
    ZeroFill,
    Sense,
    L1Espirit,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapsChoice {
    Ref,
    Est,
}

#[derive(Clone, Copy, ValueEnum)]
enum LambdaModeArg {
    Trainable,
    LinearDecay,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-coil acquisition.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// SxCxHxW (slices x coils x rows x columns).
        #[arg(long)]
        dims: String,
        #[arg(long)]
        coils: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Key-value file bounding the sampled rigid-geometry parameters.
        #[arg(long)]
        geometry_ranges: Option<PathBuf>,
    },
    /// Record a uniform undersampling pattern.
    Undersample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = 0)]
        offset: usize,
    },
    /// ESPIRiT calibration from the central ACS lines.
    Calibrate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        acs: usize,
        #[arg(long, default_value_t = 6)]
        kernel: usize,
        #[arg(long)]
        eig_crop: Option<f64>,
    },
    /// Produce transformed-map targets in the reference stack.
    MapsTransform {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train the map estimator on one or more containers.
    Train {
        /// Container directories; a trailing '*' component is expanded.
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<String>,
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda_mode: Option<LambdaModeArg>,
    },
    /// Predict coil maps from the undersampled data.
    Estimate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Reconstruct an image volume.
    Recon {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: ReconMethod,
        #[arg(long, value_enum, default_value = "ref")]
        maps: MapsChoice,
        #[arg(long, default_value_t = false)]
        mask_maps: bool,
    },
    /// Evaluate the reconstruction against the fully-sampled reference.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "full")]
        against: String,
    },
    /// Static CSV/SVG report across containers.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point for the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version printing through the error path.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "exit_code": code })
            );
            code
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { out, dims, coils, noise, seed, geometry_ranges } => {
            cmd_simulate(&out, &dims, coils, noise, seed, geometry_ranges.as_deref())
        }
        Command::Undersample { input, r, offset } => cmd_undersample(&input, r, offset),
        Command::Calibrate { input, acs, kernel, eig_crop } => {
            cmd_calibrate(&input, acs, kernel, eig_crop)
        }
        Command::MapsTransform { input } => cmd_maps_transform(&input),
        Command::Train { data, net, train, out, lambda_mode } => {
            cmd_train(&data, &net, &train, &out, lambda_mode)
        }
        Command::Estimate { input, ckpt } => cmd_estimate(&input, &ckpt),
        Command::Recon { input, method, maps, mask_maps } => {
            cmd_recon(&input, method, maps, mask_maps)
        }
        Command::Eval { input, against } => cmd_eval(&input, &against),
        Command::Report { input, out } => cmd_report(&input, &out),
    }
}

// ---------------------------------------------------------------------------
// Flat key-value config files

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::invalid(format!("config line {}: expected 'key = value'", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn kv_reject_unknown(map: &BTreeMap<String, String>, allowed: &[&str]) -> Result<()> {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::invalid(format!(
                "unknown config key '{key}' (allowed: {})",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

fn kv_parse<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::invalid(format!("config key '{key}': cannot parse '{v}'"))),
    }
}

pub fn net_config_from_file(path: &Path, io_channels: usize) -> Result<NetworkConfig> {
    let map = parse_kv(&std::fs::read_to_string(path)?)?;
    kv_reject_unknown(
        &map,
        &["levels", "base_filters", "io_channels", "attention_enabled", "padding", "seed"],
    )?;
    let padding = match map.get("padding").map(String::as_str) {
        None | Some("zero") => PadMode::Zero,
        Some("cyclic") => PadMode::Cyclic,
        Some(other) => return Err(Error::invalid(format!("padding '{other}' not zero|cyclic"))),
    };
    let cfg = NetworkConfig {
        levels: kv_parse(&map, "levels", 2)?,
        base_filters: kv_parse(&map, "base_filters", 8)?,
        io_channels: kv_parse(&map, "io_channels", io_channels)?,
        attention_enabled: kv_parse(&map, "attention_enabled", true)?,
        padding,
        seed: kv_parse(&map, "seed", 0)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config_from_file(path: &Path) -> Result<TrainingConfig> {
    let map = parse_kv(&std::fs::read_to_string(path)?)?;
    kv_reject_unknown(
        &map,
        &["lr", "beta1", "beta2", "batch_size", "epochs", "lambda_init", "lambda_mode", "seed"],
    )?;
    let lambda_mode = match map.get("lambda_mode").map(String::as_str) {
        None | Some("trainable") => LambdaMode::Trainable,
        Some("linear_decay") => LambdaMode::LinearDecay,
        Some(other) => {
            return Err(Error::invalid(format!(
                "lambda_mode '{other}' not trainable|linear_decay"
            )))
        }
    };
    let d = TrainingConfig::default();
    let cfg = TrainingConfig {
        lr: kv_parse(&map, "lr", d.lr)?,
        beta1: kv_parse(&map, "beta1", d.beta1)?,
        beta2: kv_parse(&map, "beta2", d.beta2)?,
        batch_size: kv_parse(&map, "batch_size", d.batch_size)?,
        epochs: kv_parse(&map, "epochs", d.epochs)?,
        lambda_init: kv_parse(&map, "lambda_init", d.lambda_init)?,
        lambda_mode,
        seed: kv_parse(&map, "seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn geometry_ranges_from_file(path: &Path) -> Result<GeometryRanges> {
    let map = parse_kv(&std::fs::read_to_string(path)?)?;
    kv_reject_unknown(
        &map,
        &[
            "alpha_deg_min", "alpha_deg_max", "beta_deg_min", "beta_deg_max",
            "gamma_deg_min", "gamma_deg_max", "m_px_min", "m_px_max",
            "n_px_min", "n_px_max", "t_px_min", "t_px_max",
        ],
    )?;
    let d = GeometryRanges::default();
    Ok(GeometryRanges {
        alpha_deg: (
            kv_parse(&map, "alpha_deg_min", d.alpha_deg.0)?,
            kv_parse(&map, "alpha_deg_max", d.alpha_deg.1)?,
        ),
        beta_deg: (
            kv_parse(&map, "beta_deg_min", d.beta_deg.0)?,
            kv_parse(&map, "beta_deg_max", d.beta_deg.1)?,
        ),
        gamma_deg: (
            kv_parse(&map, "gamma_deg_min", d.gamma_deg.0)?,
            kv_parse(&map, "gamma_deg_max", d.gamma_deg.1)?,
        ),
        m_px: (kv_parse(&map, "m_px_min", d.m_px.0)?, kv_parse(&map, "m_px_max", d.m_px.1)?),
        n_px: (kv_parse(&map, "n_px_min", d.n_px.0)?, kv_parse(&map, "n_px_max", d.n_px.1)?),
        t_px: (kv_parse(&map, "t_px_min", d.t_px.0)?, kv_parse(&map, "t_px_max", d.t_px.1)?),
    })
}

// ---------------------------------------------------------------------------
// Container helpers

fn provenance(subcommand: &str, detail: &str, seed: Option<u64>) -> Provenance {
    let mut hasher = DefaultHasher::new();
    detail.hash(&mut hasher);
    Provenance {
        subcommand: subcommand.to_string(),
        config_hash: format!("{:016x}", hasher.finish()),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn container_mask(c: &DatasetContainer) -> Result<SamplingMask> {
    let ny = c.meta.dims.ny;
    match (&c.mask, c.meta.acceleration, c.meta.offset) {
        (Some(bytes), Some(r), Some(off)) => {
            let mask = make_uniform_mask(ny, r, off)?;
            let stored: Vec<u8> = mask.sampled.iter().map(|&b| b as u8).collect();
            if &stored != bytes {
                return Err(Error::Format("mask.u8 disagrees with meta R/offset".into()));
            }
            Ok(mask)
        }
        (None, _, _) => make_uniform_mask(ny, 1, 0),
        _ => Err(Error::Format("mask.u8 present but meta lacks R/offset".into())),
    }
}

fn kspace_volume(c: &DatasetContainer) -> Result<KSpaceVolume> {
    let data = DatasetContainer::require(&c.kspace, "kspace.c64")?.clone();
    KSpaceVolume::new(data)
}

fn maps_from_arrays(maps: Array4<Complex64>, eigval: Option<Array3<f64>>, role: MapRole) -> CoilMaps {
    let (ns, _, ny, nx) = maps.dim();
    let eigval = eigval.unwrap_or_else(|| Array3::ones((ns, ny, nx)));
    CoilMaps { maps, eigval, role, degeneracy_log: Vec::new() }
}

// ---------------------------------------------------------------------------
// Subcommands

fn parse_dims(spec: &str) -> Result<MetaDims> {
    let parts: Vec<usize> = spec
        .split('x')
        .map(|p| p.parse().map_err(|_| Error::invalid(format!("bad dims '{spec}'"))))
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(Error::invalid("dims must be SxCxHxW"));
    }
    Ok(MetaDims { nslices: parts[0], nchannels: parts[1], ny: parts[2], nx: parts[3] })
}

fn cmd_simulate(
    out: &Path,
    dims: &str,
    coils: Option<usize>,
    noise: f64,
    seed: u64,
    ranges_file: Option<&Path>,
) -> Result<()> {
    let d = parse_dims(dims)?;
    if let Some(n) = coils {
        if n != d.nchannels {
            return Err(Error::invalid("--coils disagrees with the C component of --dims"));
        }
    }
    let mut ranges = match ranges_file {
        Some(p) => geometry_ranges_from_file(p)?,
        None => GeometryRanges::default(),
    };
    if d.nslices == 1 {
        // A single-slice stack has no through-plane extent: out-of-plane
        // rotation or z translation would shift all content off the grid.
        ranges.alpha_deg = (0.0, 0.0);
        ranges.beta_deg = (0.0, 0.0);
        ranges.t_px = (0.0, 0.0);
    }
    let vol_dims = (d.nslices, d.ny, d.nx);
    let phantom = make_phantom(vol_dims, seed, PhantomStyle::Ellipses)?;
    let coil_cfg = CoilConfig { ncoils: d.nchannels, ..CoilConfig::default() };
    let coils = synth_coil_sensitivities(&coil_cfg, vol_dims, seed)?;
    let geometry = sample_geometry(&ranges, seed)?;
    // The recorded geometry maps scan coordinates into the reference stack,
    // so the scanned object is the reference phantom moved by its inverse.
    let scan_volume = resample_real_volume_inv(&phantom.volume, &geometry)?;
    let scan_phantom = Phantom { volume: scan_volume };
    let kspace = simulate_acquisition(&scan_phantom, &coils, noise, seed)?;

    let meta = Meta {
        format_version: FORMAT_VERSION,
        dims: d,
        geometry: Some(geometry),
        acceleration: None,
        offset: None,
        acs_lines: None,
        seed: Some(seed),
        array_bytes: BTreeMap::new(),
        provenance: vec![provenance("simulate", &format!("{dims}/{noise}/{seed}"), Some(seed))],
    };
    let mut c = DatasetContainer::new(meta);
    c.kspace = Some(kspace.data);
    save_dataset(&c, out)
}

fn cmd_undersample(input: &Path, r: usize, offset: usize) -> Result<()> {
    let mut c = load_dataset(input)?;
    let mask = make_uniform_mask(c.meta.dims.ny, r, offset)?;
    c.mask = Some(mask.sampled.iter().map(|&b| b as u8).collect());
    c.meta.acceleration = Some(r);
    c.meta.offset = Some(offset);
    c.meta.provenance.push(provenance("undersample", &format!("{r}/{offset}"), None));
    save_dataset(&c, input)
}

fn cmd_calibrate(input: &Path, acs: usize, kernel: usize, eig_crop: Option<f64>) -> Result<()> {
    let mut c = load_dataset(input)?;
    let kspace = kspace_volume(&c)?;
    let acs_data = extract_acs(&kspace, acs)?;
    let cfg = CalibConfig { kernel_k: kernel, eig_crop, ..CalibConfig::default() };
    let maps = espirit_maps(&acs_data, (c.meta.dims.ny, c.meta.dims.nx), &cfg)?;
    c.maps_ref = Some(maps.maps);
    c.eigval = Some(maps.eigval);
    c.meta.acs_lines = Some(acs);
    c.meta.provenance.push(provenance(
        "calibrate",
        &format!("{acs}/{kernel}/{eig_crop:?}"),
        None,
    ));
    save_dataset(&c, input)
}

fn cmd_maps_transform(input: &Path) -> Result<()> {
    let mut c = load_dataset(input)?;
    let kspace = kspace_volume(&c)?;
    let geometry = c
        .meta
        .geometry
        .ok_or_else(|| Error::MissingArtifact("geometry missing from meta.json".into()))?;
    let acs_lines = c
        .meta
        .acs_lines
        .ok_or_else(|| Error::MissingArtifact("acs_lines missing (run calibrate first)".into()))?;
    let maps = compute_transformed_maps(&kspace, &geometry, acs_lines, &CalibConfig::default())?;
    c.maps_trans = Some(maps.maps);
    c.meta.provenance.push(provenance("maps-transform", "eq2", None));
    save_dataset(&c, input)
}

/// Expand a trailing-'*' pattern against the filesystem; plain paths pass
/// through.
fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    if !pattern.contains('*') {
        return Ok(vec![PathBuf::from(pattern)]);
    }
    let p = Path::new(pattern);
    let parent = p.parent().unwrap_or_else(|| Path::new("."));
    let stem = p
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad glob '{pattern}'")))?;
    let (prefix, suffix) = stem.split_once('*').unwrap();
    if suffix.contains('*') {
        return Err(Error::invalid("only one '*' is supported per pattern"));
    }
    let mut hits = Vec::new();
    for entry in std::fs::read_dir(parent)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with(prefix) && name.ends_with(suffix) {
            hits.push(entry.path());
        }
    }
    hits.sort();
    if hits.is_empty() {
        return Err(Error::MissingArtifact(format!("no containers match '{pattern}'")));
    }
    Ok(hits)
}

fn training_samples(paths: &[PathBuf]) -> Result<Vec<TrainSample>> {
    let mut samples = Vec::new();
    for path in paths {
        let c = load_dataset(path)?;
        let kspace = kspace_volume(&c)?;
        let mask = container_mask(&c)?;
        let maps_ref = DatasetContainer::require(&c.maps_ref, "maps_ref.c64")?;
        let maps_trans = DatasetContainer::require(&c.maps_trans, "maps_trans.c64")?;
        let zf = zero_fill_images(&kspace, &mask)?;
        for s in 0..c.meta.dims.nslices {
            let (input, _) = aliased_planes(zf.data.index_axis(Axis(0), s));
            samples.push(TrainSample {
                input,
                target_orig: maps_to_planes(maps_ref.index_axis(Axis(0), s)),
                target_trans: maps_to_planes(maps_trans.index_axis(Axis(0), s)),
            });
        }
    }
    Ok(samples)
}

fn cmd_train(
    data: &[String],
    net_file: &Path,
    train_file: &Path,
    out: &Path,
    lambda_mode: Option<LambdaModeArg>,
) -> Result<()> {
    let mut paths = Vec::new();
    for pattern in data {
        paths.extend(expand_glob(pattern)?);
    }
    let samples = training_samples(&paths)?;
    if samples.is_empty() {
        return Err(Error::invalid("no training slices found"));
    }
    let io_channels = samples[0].input.dim().0;
    let net = net_config_from_file(net_file, io_channels)?;
    if net.io_channels != io_channels {
        return Err(Error::dims(format!(
            "net io_channels {} does not match data ({io_channels} planes)",
            net.io_channels
        )));
    }
    let mut tc = train_config_from_file(train_file)?;
    if let Some(mode) = lambda_mode {
        tc.lambda_mode = match mode {
            LambdaModeArg::Trainable => LambdaMode::Trainable,
            LambdaModeArg::LinearDecay => LambdaMode::LinearDecay,
        };
    }
    let result = train_loop(&samples, &net, &tc)?;
    save_checkpoint(out, &net, &result.params)?;
    let mut log_csv = String::from("epoch,loss,lambda,one_minus_lambda\n");
    for e in &result.log {
        log_csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.lambda, e.one_minus_lambda));
    }
    std::fs::write(out.with_extension("log.csv"), log_csv)?;
    if let Some(epoch) = result.diverged_at {
        return Err(Error::TrainingDiverged {
            epoch,
            detail: "loss went non-finite; last finite checkpoint saved".into(),
        });
    }
    Ok(())
}

fn cmd_estimate(input: &Path, ckpt: &Path) -> Result<()> {
    let mut c = load_dataset(input)?;
    if !ckpt.exists() {
        return Err(Error::MissingArtifact(format!("{} missing", ckpt.display())));
    }
    let (net, params) = load_checkpoint(ckpt)?;
    let kspace = kspace_volume(&c)?;
    let mask = container_mask(&c)?;
    let zf = zero_fill_images(&kspace, &mask)?;
    let maps = estimate_maps(&zf, &params, &net)?;
    c.maps_est = Some(maps.maps);
    c.meta.provenance.push(provenance("estimate", &format!("{}", ckpt.display()), None));
    save_dataset(&c, input)
}

fn cmd_recon(input: &Path, method: ReconMethod, maps: MapsChoice, mask_maps: bool) -> Result<()> {
    let mut c = load_dataset(input)?;
    let kspace = kspace_volume(&c)?;
    let mask = container_mask(&c)?;
    let d = c.meta.dims;
    let masked = apply_mask(&kspace, &mask)?;

    let recon: Array3<Complex64> = match method {
        ReconMethod::ZeroFill => {
            let zf = zero_fill_images(&masked, &mask)?;
            rss_combine(&zf)?.mapv(|v| Complex64::new(v, 0.0))
        }
        ReconMethod::Sense | ReconMethod::L1Espirit => {
            let mut coil_maps = match maps {
                MapsChoice::Ref => maps_from_arrays(
                    DatasetContainer::require(&c.maps_ref, "maps_ref.c64")?.clone(),
                    c.eigval.clone(),
                    MapRole::Reference,
                ),
                MapsChoice::Est => {
                    let m = maps_from_arrays(
                        DatasetContainer::require(&c.maps_est, "maps_est.c64")?.clone(),
                        None,
                        MapRole::Estimated,
                    );
                    // Estimated maps are only approximately unit-norm; enforce
                    // the SENSE model convention before solving.
                    normalize_for_recon(&m, 0.2)
                }
            };
            if mask_maps {
                apply_eig_crop(&mut coil_maps, 0.9);
            }
            let cfg = ReconConfig::default();
            let mut out = Array3::<Complex64>::zeros((d.nslices, d.ny, d.nx));
            for s in 0..d.nslices {
                let y = masked.data.index_axis(Axis(0), s).to_owned();
                let m = coil_maps.maps.index_axis(Axis(0), s);
                let x = match method {
                    ReconMethod::Sense => sense_cg(&y, &m, &mask, &cfg)?.0,
                    _ => l1_espirit(&y, &m, &mask, &cfg)?.0,
                };
                out.index_axis_mut(Axis(0), s).assign(&x);
            }
            out
        }
    };
    c.recon = Some(recon);
    c.meta.provenance.push(provenance(
        "recon",
        &format!("{}/{}/{mask_maps}", method_name(method), maps_name(maps)),
        None,
    ));
    save_dataset(&c, input)
}

fn method_name(m: ReconMethod) -> &'static str {
    match m {
        ReconMethod::ZeroFill => "zero-fill",
        ReconMethod::Sense => "sense",
        ReconMethod::L1Espirit => "l1-espirit",
    }
}

fn maps_name(m: MapsChoice) -> &'static str {
    match m {
        MapsChoice::Ref => "ref",
        MapsChoice::Est => "est",
    }
}

/// RSS magnitude of the fully-sampled data, the evaluation reference.
fn full_reference(c: &DatasetContainer) -> Result<Array3<f64>> {
    let kspace = kspace_volume(c)?;
    let images = ifft2c(&kspace)?;
    rss_combine(&images)
}

pub fn evaluate_container(c: &DatasetContainer) -> Result<EvalReport> {
    let recon = DatasetContainer::require(&c.recon, "recon.c64")?;
    let reference = full_reference(c)?;
    let magnitude = recon.mapv(|v| v.norm());
    let (per_slice_nrmse, nrmse_all) = volume_nrmse(&magnitude, &reference)?;
    let mut per_slice_psnr_db = Vec::with_capacity(per_slice_nrmse.len());
    for s in 0..reference.dim().0 {
        let r: Vec<f64> = magnitude.index_axis(Axis(0), s).iter().copied().collect();
        let f: Vec<f64> = reference.index_axis(Axis(0), s).iter().copied().collect();
        per_slice_psnr_db.push(crate::metrics::psnr(&r, &f)?);
    }
    let psnr_db = crate::metrics::psnr(
        magnitude.as_slice().unwrap(),
        reference.as_slice().unwrap(),
    )?;

    // Map-magnitude correlation on the calibration support, when both map
    // sets are present.
    let mut pearson_per_channel = Vec::new();
    if let (Some(est), Some(reference_maps), Some(eigval)) =
        (&c.maps_est, &c.maps_ref, &c.eigval)
    {
        let (ns, nc, ny, nx) = reference_maps.dim();
        for ch in 0..nc {
            let mut a = Vec::new();
            let mut b = Vec::new();
            let mut support = Vec::new();
            for s in 0..ns {
                for y in 0..ny {
                    for x in 0..nx {
                        a.push(est[[s, ch, y, x]].norm());
                        b.push(reference_maps[[s, ch, y, x]].norm());
                        support.push(eigval[[s, y, x]] >= 0.9);
                    }
                }
            }
            pearson_per_channel.push(pearson(&a, &b, &support)?);
        }
    }
    Ok(EvalReport {
        per_slice_nrmse,
        per_slice_psnr_db,
        nrmse: nrmse_all,
        psnr_db,
        pearson_per_channel,
        config: format!(
            "against=full R={:?} offset={:?} acs={:?} nrmse_norm=l2",
            c.meta.acceleration, c.meta.offset, c.meta.acs_lines
        ),
    })
}

fn cmd_eval(input: &Path, against: &str) -> Result<()> {
    if against != "full" {
        return Err(Error::invalid("only --against full is supported"));
    }
    let c = load_dataset(input)?;
    let report = evaluate_container(&c)?;
    std::fs::write(input.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
    let mut csv = String::from("slice,nrmse,psnr_db\n");
    for (s, (n, p)) in report
        .per_slice_nrmse
        .iter()
        .zip(report.per_slice_psnr_db.iter())
        .enumerate()
    {
        csv.push_str(&format!("{s},{n},{p}\n"));
    }
    csv.push_str(&format!("all,{},{}\n", report.nrmse, report.psnr_db));
    std::fs::write(input.join("eval.csv"), csv)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Report rendering

fn svg_bar_chart(labels: &[String], values: &[f64], title: &str) -> String {
    let w = 80 * labels.len().max(1) + 60;
    let h = 260;
    let vmax = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <text x=\"10\" y=\"20\" font-size=\"14\">{title}</text>\n"
    );
    for (i, (label, &v)) in labels.iter().zip(values.iter()).enumerate() {
        let bar_h = (v / vmax * 180.0).round();
        let x = 50 + i * 80;
        let y = 220.0 - bar_h;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"50\" height=\"{bar_h}\" fill=\"#4878a8\"/>\n\
             <text x=\"{x}\" y=\"238\" font-size=\"10\">{label}</text>\n\
             <text x=\"{x}\" y=\"{ty}\" font-size=\"10\">{v:.4}</text>\n",
            ty = y - 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn svg_heatmap(map: &Array2<f64>, title: &str) -> String {
    let (ny, nx) = map.dim();
    let cell = 8usize;
    let w = nx * cell;
    let h = ny * cell + 24;
    let vmax = map.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <text x=\"4\" y=\"16\" font-size=\"12\">{title}</text>\n"
    );
    for y in 0..ny {
        for x in 0..nx {
            let shade = (255.0 * (1.0 - map[[y, x]] / vmax)).round() as u8;
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},{shade})\"/>\n",
                x * cell,
                y * cell + 24
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("container,nrmse,psnr_db,mean_pearson\n");
    let mut labels = Vec::new();
    let mut nrmses = Vec::new();
    let mut pearson_labels = Vec::new();
    let mut pearson_values = Vec::new();
    for (i, dir) in inputs.iter().enumerate() {
        let c = load_dataset(dir)?;
        let report = evaluate_container(&c)?;
        let label = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("container{i}"));
        let mean_pearson = if report.pearson_per_channel.is_empty() {
            f64::NAN
        } else {
            report.pearson_per_channel.iter().sum::<f64>()
                / report.pearson_per_channel.len() as f64
        };
        csv.push_str(&format!("{label},{},{},{mean_pearson}\n", report.nrmse, report.psnr_db));
        for (ch, &p) in report.pearson_per_channel.iter().enumerate() {
            pearson_labels.push(format!("{label}:ch{ch}"));
            pearson_values.push(p);
        }
        labels.push(label.clone());
        nrmses.push(report.nrmse);

        // Local error map of the first slice.
        let recon = DatasetContainer::require(&c.recon, "recon.c64")?;
        let reference = full_reference(&c)?;
        let err = local_error_map(
            &recon.index_axis(Axis(0), 0).mapv(|v| v.norm()),
            &reference.index_axis(Axis(0), 0).to_owned(),
            7,
        )?;
        std::fs::write(
            out.join(format!("error_map_{label}.svg")),
            svg_heatmap(&err, &format!("local error, {label}, slice 0")),
        )?;
    }
    std::fs::write(out.join("summary.csv"), csv)?;
    std::fs::write(out.join("nrmse.svg"), svg_bar_chart(&labels, &nrmses, "NRMSE"))?;
    if !pearson_values.is_empty() {
        std::fs::write(
            out.join("correlation.svg"),
            svg_bar_chart(&pearson_labels, &pearson_values, "map correlation"),
        )?;
    }
    Ok(())
}
