//! Trainable convolutional estimator mapping aliased multi-channel images to
//! coil maps. A compact encoder-decoder with skip connections (3x3
//! convolutions, ReLU, 2x average pooling / nearest upsampling, optional
//! squeeze-and-excitation channel gates) is differentiated by hand in double
//! precision. The hybrid L1 loss blends errors against the original and the
//! geometry-transformed map targets with a weight lambda that is either
//! trainable (sigmoid squash) or on a linear decay schedule.
//!
//! Checkpoint file layout (little-endian throughout):
//!   magic "PMRICKP1" (8 bytes)
//!   u32   network-config JSON length, followed by the JSON bytes
//!   f64   lambda_raw
//!   u32   tensor count; per tensor:
//!     u16 name length + UTF-8 name
//!     u8  rank, then rank x u32 dims
//!     f64 x prod(dims) values

use ndarray::{Array3, Array4, Axis};
use num_complex::Complex64;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};

use crate::calibrate::{CoilMaps, MapRole};
use crate::error::{Error, Result};
use crate::kspace::ImageVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    Zero,
    Cyclic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_filters: usize,
    /// Input and output channel count; 2 real planes per coil.
    pub io_channels: usize,
    pub attention_enabled: bool,
    pub padding: PadMode,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::invalid("levels must be >= 1"));
        }
        if self.base_filters < 4 {
            return Err(Error::invalid("base_filters must be >= 4"));
        }
        if self.io_channels == 0 || self.io_channels % 2 != 0 {
            return Err(Error::invalid("io_channels must be a positive even count"));
        }
        Ok(())
    }

    /// Spatial dims must divide by the total downsampling stride.
    pub fn stride(&self) -> usize {
        1usize << (self.levels - 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LambdaMode {
    Trainable,
    LinearDecay,
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_init: f64,
    pub lambda_mode: LambdaMode,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            epochs: 40,
            lambda_init: 0.5,
            lambda_mode: LambdaMode::Trainable,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::invalid("beta1/beta2 must lie in (0,1)"));
        }
        if !(0.0 < self.lambda_init && self.lambda_init < 1.0) {
            return Err(Error::invalid("lambda_init must lie in (0,1)"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

/// All trainable values: the flat network parameter vector theta plus the
/// unconstrained loss-weight scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub theta: Vec<f64>,
    pub lambda_raw: f64,
}

impl EstimatorParams {
    pub fn lambda(&self) -> f64 {
        sigmoid(self.lambda_raw)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

// ---------------------------------------------------------------------------
// Parameter layout

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    w_off: usize,
    b_off: usize,
    oc: usize,
    ic: usize,
    k: usize,
}

#[derive(Debug, Clone, Copy)]
struct SeSpec {
    w1_off: usize,
    b1_off: usize,
    w2_off: usize,
    b2_off: usize,
    hidden: usize,
}

/// Fixed topology derived from the configuration: per-level encoder conv
/// pairs, per-level decoder conv pairs with optional attention, and a 1x1
/// output head.
#[derive(Debug, Clone)]
pub(crate) struct NetPlan {
    enc: Vec<(ConvSpec, ConvSpec)>,
    dec: Vec<(ConvSpec, ConvSpec, Option<SeSpec>)>,
    head: ConvSpec,
    pub n_params: usize,
    pub tensors: Vec<TensorSpec>,
}

fn filters(cfg: &NetworkConfig, level: usize) -> usize {
    cfg.base_filters << level
}

pub(crate) fn build_plan(cfg: &NetworkConfig) -> Result<NetPlan> {
    cfg.validate()?;
    let mut tensors = Vec::new();
    let mut n = 0usize;
    let push = |tensors: &mut Vec<TensorSpec>, n: &mut usize, name: String, shape: Vec<usize>| {
        let offset = *n;
        *n += shape.iter().product::<usize>();
        tensors.push(TensorSpec { name, shape, offset });
        offset
    };
    let conv = |tensors: &mut Vec<TensorSpec>,
                    n: &mut usize,
                    name: &str,
                    oc: usize,
                    ic: usize,
                    k: usize| {
        let w_off = push(tensors, n, format!("{name}.w"), vec![oc, ic, k, k]);
        let b_off = push(tensors, n, format!("{name}.b"), vec![oc]);
        ConvSpec { w_off, b_off, oc, ic, k }
    };

    let mut enc = Vec::new();
    for l in 0..cfg.levels {
        let ic = if l == 0 { cfg.io_channels } else { filters(cfg, l - 1) };
        let f = filters(cfg, l);
        let a = conv(&mut tensors, &mut n, &format!("enc{l}.conv_a"), f, ic, 3);
        let b = conv(&mut tensors, &mut n, &format!("enc{l}.conv_b"), f, f, 3);
        enc.push((a, b));
    }
    let mut dec = Vec::new();
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        let f = filters(cfg, l);
        let cat = filters(cfg, l + 1) + f;
        let a = conv(&mut tensors, &mut n, &format!("dec{l}.conv_a"), f, cat, 3);
        let b = conv(&mut tensors, &mut n, &format!("dec{l}.conv_b"), f, f, 3);
        let se = if cfg.attention_enabled {
            let hidden = (f / 2).max(1);
            let w1_off = push(&mut tensors, &mut n, format!("dec{l}.se.fc1.w"), vec![hidden, f]);
            let b1_off = push(&mut tensors, &mut n, format!("dec{l}.se.fc1.b"), vec![hidden]);
            let w2_off = push(&mut tensors, &mut n, format!("dec{l}.se.fc2.w"), vec![f, hidden]);
            let b2_off = push(&mut tensors, &mut n, format!("dec{l}.se.fc2.b"), vec![f]);
            Some(SeSpec { w1_off, b1_off, w2_off, b2_off, hidden })
        } else {
            None
        };
        dec.push((a, b, se));
    }
    let head = conv(&mut tensors, &mut n, "head", cfg.io_channels, cfg.base_filters, 1);
    Ok(NetPlan { enc, dec, head, n_params: n, tensors })
}

/// Fan-in-scaled uniform initialization; biases start at zero.
pub fn init_params(cfg: &NetworkConfig, lambda_init: f64) -> Result<EstimatorParams> {
    let plan = build_plan(cfg)?;
    let mut theta = vec![0.0; plan.n_params];
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x51ab_00d7);
    for spec in &plan.tensors {
        if spec.name.ends_with(".b") {
            continue;
        }
        // Weight shapes are (out, in, k, k) or (out, in): fan-in is the
        // product of everything but the leading dim.
        let fan_in: usize = spec.shape[1..].iter().product();
        let bound = (1.0 / fan_in as f64).sqrt();
        for v in &mut theta[spec.offset..spec.offset + spec.len()] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    if !(0.0 < lambda_init && lambda_init < 1.0) {
        return Err(Error::invalid("lambda_init must lie in (0,1)"));
    }
    Ok(EstimatorParams { theta, lambda_raw: logit(lambda_init) })
}

// ---------------------------------------------------------------------------
// Primitive ops

fn pad_index(i: isize, n: usize, pad: PadMode) -> Option<usize> {
    match pad {
        PadMode::Zero => {
            if i < 0 || i >= n as isize {
                None
            } else {
                Some(i as usize)
            }
        }
        PadMode::Cyclic => Some(i.rem_euclid(n as isize) as usize),
    }
}

/// Column segments for a horizontal tap offset: pairs of (output x range,
/// input x start) covering all valid positions under the pad mode.
fn col_segments(offset: isize, w: usize, pad: PadMode) -> Vec<(std::ops::Range<usize>, usize)> {
    match pad {
        PadMode::Zero => {
            let lo = (-offset).max(0) as usize;
            let hi = (w as isize).min(w as isize - offset).max(0) as usize;
            if lo >= hi {
                Vec::new()
            } else {
                vec![(lo..hi, (lo as isize + offset) as usize)]
            }
        }
        PadMode::Cyclic => {
            let off = offset.rem_euclid(w as isize) as usize;
            if off == 0 {
                vec![(0..w, 0)]
            } else {
                // x + off < w: straight; otherwise wraps to the start.
                vec![(0..w - off, off), (w - off..w, 0)]
            }
        }
    }
}

fn conv_fwd(x: &Array3<f64>, theta: &[f64], cs: &ConvSpec, pad: PadMode) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let k = cs.k as isize;
    let half = k / 2;
    let mut out = Array3::<f64>::zeros((cs.oc, h, w));
    let xs = x.as_slice().expect("conv input is contiguous");
    {
        let os = out.as_slice_mut().expect("conv output is contiguous");
        for o in 0..cs.oc {
            for i in 0..cs.ic {
                let w_base = cs.w_off + (o * cs.ic + i) * (cs.k * cs.k);
                for dy in 0..k {
                    for dx in 0..k {
                        let wv = theta[w_base + (dy * k + dx) as usize];
                        if wv == 0.0 {
                            continue;
                        }
                        let segs = col_segments(dx - half, w, pad);
                        for y in 0..h {
                            let sy = match pad_index(y as isize + dy - half, h, pad) {
                                Some(v) => v,
                                None => continue,
                            };
                            let orow = o * h * w + y * w;
                            let xrow = i * h * w + sy * w;
                            for (range, sx0) in &segs {
                                let n = range.len();
                                let dst = &mut os[orow + range.start..orow + range.end];
                                let src = &xs[xrow + sx0..xrow + sx0 + n];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for o in 0..cs.oc {
        let bias = theta[cs.b_off + o];
        out.index_axis_mut(Axis(0), o).mapv_inplace(|v| v + bias);
    }
    out
}

fn conv_bwd(
    x: &Array3<f64>,
    theta: &[f64],
    cs: &ConvSpec,
    gout: &Array3<f64>,
    pad: PadMode,
    gtheta: &mut [f64],
) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let k = cs.k as isize;
    let half = k / 2;
    let mut gx = Array3::<f64>::zeros(x.dim());
    let xs = x.as_slice().expect("conv input is contiguous");
    let gs = gout.as_slice().expect("conv grad is contiguous");
    let gxs = gx.as_slice_mut().expect("conv grad-input is contiguous");
    for o in 0..cs.oc {
        let gb: f64 = gs[o * h * w..(o + 1) * h * w].iter().sum();
        gtheta[cs.b_off + o] += gb;
        for i in 0..cs.ic {
            let w_base = cs.w_off + (o * cs.ic + i) * (cs.k * cs.k);
            for dy in 0..k {
                for dx in 0..k {
                    let wv = theta[w_base + (dy * k + dx) as usize];
                    let mut gw = 0.0;
                    let segs = col_segments(dx - half, w, pad);
                    for y in 0..h {
                        let sy = match pad_index(y as isize + dy - half, h, pad) {
                            Some(v) => v,
                            None => continue,
                        };
                        let grow = o * h * w + y * w;
                        let xrow = i * h * w + sy * w;
                        for (range, sx0) in &segs {
                            let n = range.len();
                            let g = &gs[grow + range.start..grow + range.end];
                            let xr = &xs[xrow + sx0..xrow + sx0 + n];
                            let gxr = &mut gxs[xrow + sx0..xrow + sx0 + n];
                            for ((gv, xv), gxv) in g.iter().zip(xr).zip(gxr) {
                                gw += gv * xv;
                                *gxv += gv * wv;
                            }
                        }
                    }
                    gtheta[w_base + (dy * k + dx) as usize] += gw;
                }
            }
        }
    }
    gx
}

fn relu_fwd(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// ReLU backward using the stored output; the subgradient at 0 is 0.
fn relu_bwd(out: &Array3<f64>, gout: &mut Array3<f64>) {
    for (g, o) in gout.iter_mut().zip(out.iter()) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

fn avgpool2_fwd(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                out[[ch, y, xx]] = 0.25
                    * (x[[ch, 2 * y, 2 * xx]]
                        + x[[ch, 2 * y, 2 * xx + 1]]
                        + x[[ch, 2 * y + 1, 2 * xx]]
                        + x[[ch, 2 * y + 1, 2 * xx + 1]]);
            }
        }
    }
    out
}

fn avgpool2_bwd(gout: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = gout.dim();
    let mut gx = Array3::<f64>::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let g = 0.25 * gout[[ch, y, xx]];
                gx[[ch, 2 * y, 2 * xx]] = g;
                gx[[ch, 2 * y, 2 * xx + 1]] = g;
                gx[[ch, 2 * y + 1, 2 * xx]] = g;
                gx[[ch, 2 * y + 1, 2 * xx + 1]] = g;
            }
        }
    }
    gx
}

fn upsample2_fwd(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, h * 2, w * 2));
    for ch in 0..c {
        for y in 0..h * 2 {
            for xx in 0..w * 2 {
                out[[ch, y, xx]] = x[[ch, y / 2, xx / 2]];
            }
        }
    }
    out
}

fn upsample2_bwd(gout: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = gout.dim();
    let mut gx = Array3::<f64>::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                gx[[ch, y / 2, xx / 2]] += gout[[ch, y, xx]];
            }
        }
    }
    gx
}

fn concat(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (ca, h, w) = a.dim();
    let (cb, _, _) = b.dim();
    let mut out = Array3::<f64>::zeros((ca + cb, h, w));
    out.slice_mut(ndarray::s![..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![ca.., .., ..]).assign(b);
    out
}

struct SeCache {
    s: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
    f: Array3<f64>,
}

fn se_fwd(f: &Array3<f64>, theta: &[f64], se: &SeSpec) -> (Array3<f64>, SeCache) {
    let (c, hdim, wdim) = f.dim();
    let area = (hdim * wdim) as f64;
    let s: Vec<f64> = (0..c).map(|ch| f.index_axis(Axis(0), ch).sum() / area).collect();
    let mut h = vec![0.0; se.hidden];
    for j in 0..se.hidden {
        let mut z = theta[se.b1_off + j];
        for ch in 0..c {
            z += theta[se.w1_off + j * c + ch] * s[ch];
        }
        h[j] = z.max(0.0);
    }
    let mut g = vec![0.0; c];
    for ch in 0..c {
        let mut z = theta[se.b2_off + ch];
        for j in 0..se.hidden {
            z += theta[se.w2_off + ch * se.hidden + j] * h[j];
        }
        g[ch] = sigmoid(z);
    }
    let mut out = f.clone();
    for ch in 0..c {
        out.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * g[ch]);
    }
    (out, SeCache { s, h, g, f: f.clone() })
}

fn se_bwd(
    cache: &SeCache,
    theta: &[f64],
    se: &SeSpec,
    gout: &Array3<f64>,
    gtheta: &mut [f64],
) -> Array3<f64> {
    let (c, hdim, wdim) = cache.f.dim();
    let area = (hdim * wdim) as f64;
    let mut gf = gout.clone();
    let mut gg = vec![0.0; c];
    for ch in 0..c {
        gf.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * cache.g[ch]);
        gg[ch] = gout
            .index_axis(Axis(0), ch)
            .iter()
            .zip(cache.f.index_axis(Axis(0), ch).iter())
            .map(|(a, b)| a * b)
            .sum();
    }
    let mut gh = vec![0.0; se.hidden];
    for ch in 0..c {
        let gz2 = gg[ch] * cache.g[ch] * (1.0 - cache.g[ch]);
        gtheta[se.b2_off + ch] += gz2;
        for j in 0..se.hidden {
            gtheta[se.w2_off + ch * se.hidden + j] += gz2 * cache.h[j];
            gh[j] += gz2 * theta[se.w2_off + ch * se.hidden + j];
        }
    }
    let mut gs = vec![0.0; c];
    for j in 0..se.hidden {
        if cache.h[j] <= 0.0 {
            continue;
        }
        gtheta[se.b1_off + j] += gh[j];
        for ch in 0..c {
            gtheta[se.w1_off + j * c + ch] += gh[j] * cache.s[ch];
            gs[ch] += gh[j] * theta[se.w1_off + j * c + ch];
        }
    }
    for ch in 0..c {
        let gper = gs[ch] / area;
        gf.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v + gper);
    }
    gf
}

// ---------------------------------------------------------------------------
// Network forward/backward

struct EncCache {
    input: Array3<f64>,
    a_out: Array3<f64>,
    b_out: Array3<f64>,
}

struct DecCache {
    cat: Array3<f64>,
    a_out: Array3<f64>,
    b_out: Array3<f64>,
    se: Option<SeCache>,
}

struct Trace {
    enc: Vec<EncCache>,
    dec: Vec<DecCache>,
    head_in: Array3<f64>,
}

fn check_finite(x: &Array3<f64>, layer: &str) -> Result<()> {
    for (idx, v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("estimator layer {layer}"),
                index: vec![idx.0, idx.1, idx.2],
            });
        }
    }
    Ok(())
}

fn forward_trace(
    input: &Array3<f64>,
    params: &EstimatorParams,
    cfg: &NetworkConfig,
    plan: &NetPlan,
) -> Result<(Array3<f64>, Trace)> {
    let (c, h, w) = input.dim();
    if c != cfg.io_channels {
        return Err(Error::dims(format!(
            "input has {c} planes, network expects {}",
            cfg.io_channels
        )));
    }
    let stride = cfg.stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::invalid(format!(
            "spatial dims {h}x{w} not divisible by stride {stride}"
        )));
    }
    let theta = &params.theta;
    let mut enc_caches = Vec::with_capacity(cfg.levels);
    let mut acts = input.clone();
    for l in 0..cfg.levels {
        let (csa, csb) = plan.enc[l];
        let inp = acts;
        let mut a = conv_fwd(&inp, theta, &csa, cfg.padding);
        relu_fwd(&mut a);
        check_finite(&a, &format!("enc{l}.conv_a"))?;
        let mut b = conv_fwd(&a, theta, &csb, cfg.padding);
        relu_fwd(&mut b);
        check_finite(&b, &format!("enc{l}.conv_b"))?;
        acts = if l < cfg.levels - 1 { avgpool2_fwd(&b) } else { b.clone() };
        enc_caches.push(EncCache { input: inp, a_out: a, b_out: b });
    }
    let mut dec_caches = Vec::new();
    for (di, &(csa, csb, se)) in plan.dec.iter().enumerate() {
        let level = cfg.levels - 2 - di;
        let u = upsample2_fwd(&acts);
        let cat = concat(&u, &enc_caches[level].b_out);
        let mut a = conv_fwd(&cat, theta, &csa, cfg.padding);
        relu_fwd(&mut a);
        check_finite(&a, &format!("dec{level}.conv_a"))?;
        let mut b = conv_fwd(&a, theta, &csb, cfg.padding);
        relu_fwd(&mut b);
        check_finite(&b, &format!("dec{level}.conv_b"))?;
        let (out, se_cache) = match se {
            Some(ref spec) => {
                let (o, cch) = se_fwd(&b, theta, spec);
                (o, Some(cch))
            }
            None => (b.clone(), None),
        };
        acts = out;
        dec_caches.push(DecCache { cat, a_out: a, b_out: b, se: se_cache });
    }
    let out = conv_fwd(&acts, theta, &plan.head, cfg.padding);
    check_finite(&out, "head")?;
    Ok((out, Trace { enc: enc_caches, dec: dec_caches, head_in: acts }))
}

fn backward_trace(
    gout: &Array3<f64>,
    params: &EstimatorParams,
    cfg: &NetworkConfig,
    plan: &NetPlan,
    trace: &Trace,
) -> Vec<f64> {
    let theta = &params.theta;
    let mut gtheta = vec![0.0; plan.n_params];
    let mut g = conv_bwd(&trace.head_in, theta, &plan.head, gout, cfg.padding, &mut gtheta);
    // Decoder in reverse (deepest cache last in the vec).
    let mut skip_grads: Vec<Option<Array3<f64>>> = vec![None; cfg.levels];
    for (di, &(csa, csb, se)) in plan.dec.iter().enumerate().rev() {
        let level = cfg.levels - 2 - di;
        let cache = &trace.dec[di];
        if let Some(ref spec) = se {
            g = se_bwd(cache.se.as_ref().unwrap(), theta, spec, &g, &mut gtheta);
        }
        relu_bwd(&cache.b_out, &mut g);
        g = conv_bwd(&cache.a_out, theta, &csb, &g, cfg.padding, &mut gtheta);
        relu_bwd(&cache.a_out, &mut g);
        let gcat = conv_bwd(&cache.cat, theta, &csa, &g, cfg.padding, &mut gtheta);
        let cu = gcat.dim().0 - trace.enc[level].b_out.dim().0;
        let gu = gcat.slice(ndarray::s![..cu, .., ..]).to_owned();
        skip_grads[level] = Some(gcat.slice(ndarray::s![cu.., .., ..]).to_owned());
        g = upsample2_bwd(&gu);
    }
    // Encoder in reverse; g currently holds the gradient flowing into the
    // deepest encoder output (or the head input when levels == 1).
    for l in (0..cfg.levels).rev() {
        let (csa, csb) = plan.enc[l];
        let cache = &trace.enc[l];
        let mut gb = if l == cfg.levels - 1 { g.clone() } else { avgpool2_bwd(&g) };
        if let Some(skip) = skip_grads[l].take() {
            gb += &skip;
        }
        relu_bwd(&cache.b_out, &mut gb);
        let mut ga = conv_bwd(&cache.a_out, theta, &csb, &gb, cfg.padding, &mut gtheta);
        relu_bwd(&cache.a_out, &mut ga);
        g = conv_bwd(&cache.input, theta, &csa, &ga, cfg.padding, &mut gtheta);
    }
    gtheta
}

/// Deterministic forward pass: 2*ncoils real input planes to the same number
/// of output planes.
pub fn forward(
    input: &Array3<f64>,
    params: &EstimatorParams,
    cfg: &NetworkConfig,
) -> Result<Array3<f64>> {
    let plan = build_plan(cfg)?;
    if params.theta.len() != plan.n_params {
        return Err(Error::dims(format!(
            "parameter vector has {} values, plan needs {}",
            params.theta.len(),
            plan.n_params
        )));
    }
    Ok(forward_trace(input, params, cfg, &plan)?.0)
}

// ---------------------------------------------------------------------------
// Plane <-> complex conversions

/// Real/imaginary planes (2*ncoils, ny, nx) from one slice of complex
/// channel images, scaled by the reciprocal of the 99th-percentile magnitude.
/// Returns the planes and the applied scale.
pub fn aliased_planes(images: ndarray::ArrayView3<Complex64>) -> (Array3<f64>, f64) {
    let (nc, ny, nx) = images.dim();
    let mut mags: Vec<f64> = images.iter().map(|v| v.norm()).collect();
    mags.sort_by(f64::total_cmp);
    let idx = ((mags.len() as f64) * 0.99).floor() as usize;
    let p99 = mags[idx.min(mags.len() - 1)];
    let scale = if p99 > 0.0 { 1.0 / p99 } else { 1.0 };
    let mut planes = Array3::<f64>::zeros((2 * nc, ny, nx));
    for c in 0..nc {
        for y in 0..ny {
            for x in 0..nx {
                planes[[2 * c, y, x]] = images[[c, y, x]].re * scale;
                planes[[2 * c + 1, y, x]] = images[[c, y, x]].im * scale;
            }
        }
    }
    (planes, scale)
}

/// One slice of complex maps as stacked real/imaginary planes (no scaling).
pub fn maps_to_planes(maps: ndarray::ArrayView3<Complex64>) -> Array3<f64> {
    let (nc, ny, nx) = maps.dim();
    let mut planes = Array3::<f64>::zeros((2 * nc, ny, nx));
    for c in 0..nc {
        for y in 0..ny {
            for x in 0..nx {
                planes[[2 * c, y, x]] = maps[[c, y, x]].re;
                planes[[2 * c + 1, y, x]] = maps[[c, y, x]].im;
            }
        }
    }
    planes
}

pub fn planes_to_maps(planes: &Array3<f64>) -> Array3<Complex64> {
    let (p2, ny, nx) = planes.dim();
    let nc = p2 / 2;
    Array3::from_shape_fn((nc, ny, nx), |(c, y, x)| {
        Complex64::new(planes[[2 * c, y, x]], planes[[2 * c + 1, y, x]])
    })
}

/// Run the network over every slice of a zero-filled image volume and
/// assemble estimated coil maps. The eigenvalue channel stores the raw
/// per-pixel prediction norm clamped to [0, 1], serving as a support proxy;
/// per-pixel unit normalization is applied by [`normalize_for_recon`], not
/// here.
pub fn estimate_maps(
    zero_filled: &ImageVolume,
    params: &EstimatorParams,
    cfg: &NetworkConfig,
) -> Result<CoilMaps> {
    let (ns, nc, ny, nx) = zero_filled.data.dim();
    if cfg.io_channels != 2 * nc {
        return Err(Error::dims(format!(
            "network io_channels {} does not match 2 x {nc} coils",
            cfg.io_channels
        )));
    }
    let mut maps = Array4::<Complex64>::zeros((ns, nc, ny, nx));
    let mut eigval = Array3::<f64>::zeros((ns, ny, nx));
    for s in 0..ns {
        let (planes, _) = aliased_planes(zero_filled.data.index_axis(Axis(0), s));
        let out = forward(&planes, params, cfg)?;
        let m = planes_to_maps(&out);
        for y in 0..ny {
            for x in 0..nx {
                let norm: f64 = (0..nc).map(|c| m[[c, y, x]].norm_sqr()).sum::<f64>().sqrt();
                eigval[[s, y, x]] = norm.min(1.0);
                for c in 0..nc {
                    maps[[s, c, y, x]] = m[[c, y, x]];
                }
            }
        }
    }
    Ok(CoilMaps { maps, eigval, role: MapRole::Estimated, degeneracy_log: Vec::new() })
}

/// Enforce unit per-pixel norm before maps feed a reconstruction; pixels with
/// prediction norm below `floor` are zeroed (no reliable map there).
pub fn normalize_for_recon(maps: &CoilMaps, floor: f64) -> CoilMaps {
    let (ns, nc, ny, nx) = maps.maps.dim();
    let mut out = maps.clone();
    for s in 0..ns {
        for y in 0..ny {
            for x in 0..nx {
                let norm: f64 =
                    (0..nc).map(|c| maps.maps[[s, c, y, x]].norm_sqr()).sum::<f64>().sqrt();
                for c in 0..nc {
                    out.maps[[s, c, y, x]] = if norm > floor {
                        maps.maps[[s, c, y, x]] / norm
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Hybrid loss

fn check_same_dims(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dims("hybrid loss operands differ in shape"));
    }
    Ok(())
}

/// lambda * mean|out - orig| + (1 - lambda) * mean|out - trans| over all real
/// components.
pub fn hybrid_loss_planes(
    out: &Array3<f64>,
    orig: &Array3<f64>,
    trans: &Array3<f64>,
    lambda: f64,
) -> Result<f64> {
    check_same_dims(out, orig)?;
    check_same_dims(out, trans)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda must lie in [0,1]"));
    }
    let n = out.len() as f64;
    let d1: f64 = out.iter().zip(orig.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let d2: f64 = out.iter().zip(trans.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok(lambda * d1 + (1.0 - lambda) * d2)
}

/// Gradient of the hybrid loss with respect to the output planes, plus
/// d(loss)/d(lambda). sign(0) is taken as 0.
fn hybrid_loss_grad(
    out: &Array3<f64>,
    orig: &Array3<f64>,
    trans: &Array3<f64>,
    lambda: f64,
) -> (Array3<f64>, f64) {
    let n = out.len() as f64;
    let mut g = Array3::<f64>::zeros(out.dim());
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for ((gv, &o), (&a, &b)) in
        g.iter_mut().zip(out.iter()).zip(orig.iter().zip(trans.iter()))
    {
        let e1 = o - a;
        let e2 = o - b;
        d1 += e1.abs();
        d2 += e2.abs();
        *gv = (lambda * e1.signum() * ((e1 != 0.0) as i32 as f64)
            + (1.0 - lambda) * e2.signum() * ((e2 != 0.0) as i32 as f64))
            / n;
    }
    (g, d1 / n - d2 / n)
}

/// Hybrid loss over whole map volumes (mean over slices, channels, and both
/// real planes).
pub fn hybrid_loss(
    e_dl: &CoilMaps,
    e_orig: &CoilMaps,
    e_trans: &CoilMaps,
    lambda: f64,
) -> Result<f64> {
    if e_dl.maps.dim() != e_orig.maps.dim() || e_dl.maps.dim() != e_trans.maps.dim() {
        return Err(Error::dims("map volumes differ in shape"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda must lie in [0,1]"));
    }
    let n = (2 * e_dl.maps.len()) as f64;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for ((a, b), c) in e_dl.maps.iter().zip(e_orig.maps.iter()).zip(e_trans.maps.iter()) {
        d1 += (a.re - b.re).abs() + (a.im - b.im).abs();
        d2 += (a.re - c.re).abs() + (a.im - c.im).abs();
    }
    Ok(lambda * d1 / n + (1.0 - lambda) * d2 / n)
}

// ---------------------------------------------------------------------------
// Training

/// One training sample: normalized aliased input planes and the two map
/// targets as planes.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Array3<f64>,
    pub target_orig: Array3<f64>,
    pub target_trans: Array3<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lambda: f64,
    pub one_minus_lambda: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub params: EstimatorParams,
    pub log: Vec<EpochLog>,
    /// Epoch at which the loss went non-finite; `params` is then the last
    /// finite checkpoint.
    pub diverged_at: Option<usize>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainingConfig) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.lr * mhat / (vhat.sqrt() + 1e-8);
        }
    }
}

/// Adam training loop over (aliased input, E_orig, E_trans) samples.
/// Deterministic per seed; aborts on non-finite loss, returning the last
/// finite parameters with `diverged_at` set.
pub fn train(
    dataset: &[TrainSample],
    net: &NetworkConfig,
    cfg: &TrainingConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let plan = build_plan(net)?;
    let mut params = init_params(net, cfg.lambda_init)?;
    // theta plus lambda_raw share one optimizer state; the lambda slot is
    // only updated in trainable mode.
    let mut adam = Adam::new(plan.n_params + 1);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x7a21_bee5);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = params.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        if let LambdaMode::LinearDecay = cfg.lambda_mode {
            // The transformed-map weight (1 - lambda) decays linearly to zero,
            // so training finishes dominated by the original-map term.
            let frac = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 1.0 };
            let lam = 1.0 - (1.0 - cfg.lambda_init) * (1.0 - frac);
            // Keep lambda_raw consistent for checkpointing; clamp away from
            // the open-interval boundary.
            params.lambda_raw = logit(lam.clamp(1e-9, 1.0 - 1e-9));
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let lambda = match cfg.lambda_mode {
                LambdaMode::Trainable => params.lambda(),
                LambdaMode::LinearDecay => sigmoid(params.lambda_raw),
            };
            let mut gtheta = vec![0.0; plan.n_params];
            let mut glambda = 0.0;
            let mut batch_loss = 0.0;
            for &i in batch {
                let sample = &dataset[i];
                let (out, trace) = forward_trace(&sample.input, &params, net, &plan)?;
                batch_loss +=
                    hybrid_loss_planes(&out, &sample.target_orig, &sample.target_trans, lambda)?;
                let (gout, dlam) =
                    hybrid_loss_grad(&out, &sample.target_orig, &sample.target_trans, lambda);
                let g = backward_trace(&gout, &params, net, &plan, &trace);
                for (acc, v) in gtheta.iter_mut().zip(g.iter()) {
                    *acc += v;
                }
                glambda += dlam;
            }
            let bn = batch.len() as f64;
            batch_loss /= bn;
            if !batch_loss.is_finite() {
                return Ok(TrainResult { params: last_good, log, diverged_at: Some(epoch) });
            }
            for v in &mut gtheta {
                *v /= bn;
            }
            glambda /= bn;
            // Chain through the sigmoid squash for the raw parameter.
            let graw = match cfg.lambda_mode {
                LambdaMode::Trainable => glambda * lambda * (1.0 - lambda),
                LambdaMode::LinearDecay => 0.0,
            };
            let mut flat: Vec<f64> = params.theta.clone();
            flat.push(params.lambda_raw);
            let mut gflat = gtheta;
            gflat.push(graw);
            adam.step(&mut flat, &gflat, cfg);
            params.lambda_raw = flat.pop().unwrap();
            params.theta = flat;
            epoch_loss += batch_loss;
            n_batches += 1;
        }
        let mean_loss = epoch_loss / n_batches as f64;
        let lambda = sigmoid(params.lambda_raw);
        log.push(EpochLog { epoch, loss: mean_loss, lambda, one_minus_lambda: 1.0 - lambda });
        last_good = params.clone();
    }
    Ok(TrainResult { params, log, diverged_at: None })
}

// ---------------------------------------------------------------------------
// Gradient verification

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_error: f64,
    /// Worst offenders as (flat parameter index, relative error), sorted
    /// descending; the lambda slot is reported as index = theta length.
    pub worst: Vec<(usize, f64)>,
    pub pass: bool,
}

/// Central finite-difference check of the full hybrid-loss gradient through
/// the network for a random parameter subset.
pub fn gradient_check(
    net: &NetworkConfig,
    probe_dims: (usize, usize),
    step: f64,
    tolerance: f64,
    n_probe: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let plan = build_plan(net)?;
    if plan.n_params > 10_000 {
        return Err(Error::invalid("gradient check requires a probe network of <= 1e4 parameters"));
    }
    let mut params = init_params(net, 0.5)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6bad_5eed);
    let (h, w) = probe_dims;
    let rand_planes = |rng: &mut ChaCha12Rng| {
        Array3::from_shape_fn((net.io_channels, h, w), |_| rng.gen_range(-1.0..1.0))
    };
    let input = rand_planes(&mut rng);
    params.lambda_raw = rng.gen_range(-0.5..0.5);
    // Condition the probe point: small weights and positive biases keep
    // every ReLU pre-activation many standard deviations away from its kink,
    // so the loss is smooth across the finite-difference window. The kink
    // subgradient convention is exercised by the closed-form unit tests.
    for spec in &plan.tensors {
        let range = spec.offset..spec.offset + spec.len();
        if spec.name.ends_with(".w") {
            for v in &mut params.theta[range] {
                *v *= 0.3;
            }
        } else {
            // Biases of 1.0 dominate the conv sums (weights shrunk above),
            // holding every pre-activation away from its kink across the
            // finite-difference window; the 0.3 weight scale keeps gradients
            // large enough that roundoff in the difference quotient stays
            // below tolerance.
            for v in &mut params.theta[range] {
                *v = 1.0;
            }
        }
    }
    // Targets sit at least 1.0 away from the unperturbed output so the L1
    // terms keep a constant sign across the finite-difference window.
    let base = forward_trace(&input, &params, net, &plan)?.0;
    let orig = Array3::from_shape_fn(base.dim(), |idx| base[idx] - 1.0 - rng.gen_range(0.0..1.0));
    let trans = Array3::from_shape_fn(base.dim(), |idx| base[idx] + 1.0 + rng.gen_range(0.0..1.0));

    let loss_at = |p: &EstimatorParams| -> Result<f64> {
        let out = forward_trace(&input, p, net, &plan)?.0;
        hybrid_loss_planes(&out, &orig, &trans, sigmoid(p.lambda_raw))
    };

    // Analytic gradient.
    let lambda = params.lambda();
    let (out, trace) = forward_trace(&input, &params, net, &plan)?;
    let (gout, dlam) = hybrid_loss_grad(&out, &orig, &trans, lambda);
    let gtheta = backward_trace(&gout, &params, net, &plan, &trace);
    let graw = dlam * lambda * (1.0 - lambda);

    let mut indices: Vec<usize> = (0..plan.n_params).collect();
    indices.shuffle(&mut rng);
    indices.truncate(n_probe.min(plan.n_params));
    indices.push(plan.n_params); // lambda slot

    let mut results: Vec<(usize, f64)> = Vec::with_capacity(indices.len());
    for &idx in &indices {
        let g_a = if idx == plan.n_params { graw } else { gtheta[idx] };
        let mut p_plus = params.clone();
        let mut p_minus = params.clone();
        if idx == plan.n_params {
            p_plus.lambda_raw += step;
            p_minus.lambda_raw -= step;
        } else {
            p_plus.theta[idx] += step;
            p_minus.theta[idx] -= step;
        }
        let g_fd = (loss_at(&p_plus)? - loss_at(&p_minus)?) / (2.0 * step);
        let rel = (g_a - g_fd).abs() / g_a.abs().max(g_fd.abs()).max(1e-12);
        results.push((idx, rel));
    }
    results.sort_by(|a, b| b.1.total_cmp(&a.1));
    let max_rel_error = results.first().map(|r| r.1).unwrap_or(0.0);
    let pass = max_rel_error < tolerance;
    results.truncate(5);
    Ok(GradCheckReport { n_checked: indices.len(), max_rel_error, worst: results, pass })
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 8] = b"PMRICKP1";

pub fn save_checkpoint(
    path: &std::path::Path,
    net: &NetworkConfig,
    params: &EstimatorParams,
) -> Result<()> {
    let plan = build_plan(net)?;
    if params.theta.len() != plan.n_params {
        return Err(Error::dims("parameter vector does not match the network plan"));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    let cfg_json = serde_json::to_vec(net)?;
    f.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    f.write_all(&cfg_json)?;
    f.write_all(&params.lambda_raw.to_le_bytes())?;
    f.write_all(&(plan.tensors.len() as u32).to_le_bytes())?;
    for spec in &plan.tensors {
        f.write_all(&(spec.name.len() as u16).to_le_bytes())?;
        f.write_all(spec.name.as_bytes())?;
        f.write_all(&[spec.shape.len() as u8])?;
        for &d in &spec.shape {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &params.theta[spec.offset..spec.offset + spec.len()] {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(NetworkConfig, EstimatorParams)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("checkpoint magic/version mismatch".into()));
    }
    let mut u32b = [0u8; 4];
    f.read_exact(&mut u32b)?;
    let mut cfg_json = vec![0u8; u32::from_le_bytes(u32b) as usize];
    f.read_exact(&mut cfg_json)?;
    let net: NetworkConfig = serde_json::from_slice(&cfg_json)?;
    let plan = build_plan(&net)?;
    let mut f64b = [0u8; 8];
    f.read_exact(&mut f64b)?;
    let lambda_raw = f64::from_le_bytes(f64b);
    f.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;
    if count != plan.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, plan expects {}",
            plan.tensors.len()
        )));
    }
    let mut theta = vec![0.0; plan.n_params];
    for spec in &plan.tensors {
        let mut u16b = [0u8; 2];
        f.read_exact(&mut u16b)?;
        let mut name = vec![0u8; u16::from_le_bytes(u16b) as usize];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("bad tensor name".into()))?;
        if name != spec.name {
            return Err(Error::Format(format!("tensor {name} out of order, expected {}", spec.name)));
        }
        let mut rank = [0u8; 1];
        f.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            f.read_exact(&mut u32b)?;
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        if shape != spec.shape {
            return Err(Error::Format(format!("tensor {name} shape mismatch")));
        }
        for v in &mut theta[spec.offset..spec.offset + spec.len()] {
            f.read_exact(&mut f64b)?;
            *v = f64::from_le_bytes(f64b);
        }
    }
    if f.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after final tensor".into()));
    }
    Ok((net, EstimatorParams { theta, lambda_raw }))
}
