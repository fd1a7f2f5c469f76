//! Learned per-pixel tone mapping: `f_tm` maps log radiance to a global and
//! a local LDR estimate, `f_mix` cross-fuses estimates from the two
//! branches. Also the fixed mu-law curve used to evaluate HDR output.

use rand::Rng;

use crate::dataio::{ColorSpace, ImageBuffer};
use crate::error::{Error, Result};
use crate::mlp::{MlpCache, MlpParams, OutputMap};

pub const TONEMAP_DIMS: [usize; 4] = [3, 32, 32, 6];
pub const MIX_DIMS: [usize; 3] = [6, 32, 3];
/// Offset inside the log of the tone-mapper input.
pub const LOG_EPS: f64 = 1e-6;
pub const DEFAULT_MU: f64 = 5000.0;

/// How the two fused images combine into the final LDR prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// `i_ldr = i_ig + i_gi`.
    Sum,
    /// `i_ldr = (i_ig + i_gi) / 2`.
    #[default]
    Mean,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Sum => "sum",
            FusionMode::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(FusionMode::Sum),
            "mean" => Some(FusionMode::Mean),
            _ => None,
        }
    }

    fn factor(self) -> f64 {
        match self {
            FusionMode::Sum => 1.0,
            FusionMode::Mean => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToneMapper {
    pub f_tm: MlpParams,
    pub f_mix: MlpParams,
    pub fusion: FusionMode,
}

impl ToneMapper {
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        Self {
            f_tm: MlpParams::init(&TONEMAP_DIMS, OutputMap::Sigmoid, 0.0, rng).expect("static dims"),
            f_mix: init_mix(rng),
            fusion: FusionMode::default(),
        }
    }
}

/// Slope of the initial fusion curve in the input mean; the curve passes
/// through 0.5 at a mean of 0.5 with unit slope.
const MIX_INIT_GAIN: f64 = 4.0;

/// Fusion network that starts as `sigmoid(4 * (mean(a_c, b_c) - 0.5))` per
/// channel. The first six hidden units copy the inputs (LDR values are
/// positive, where the leaky ReLU is the identity); the rest start with
/// random input weights and zero output weights. A random network here
/// would stay frozen for the first part of training and the tone mapper
/// would have to learn its inverse.
pub fn init_mix<R: Rng>(rng: &mut R) -> MlpParams {
    let mut mlp = MlpParams::init(&MIX_DIMS, OutputMap::Sigmoid, -0.5 * MIX_INIT_GAIN, rng).expect("static dims");
    let [din, hidden, dout] = MIX_DIMS;
    let p = mlp.params_mut();
    let w1 = 0;
    for j in 0..din {
        let row = &mut p[w1 + j * din..w1 + (j + 1) * din];
        row.fill(0.0);
        row[j] = 1.0;
    }
    let w2 = din * hidden + hidden;
    for c in 0..dout {
        let row = &mut p[w2 + c * hidden..w2 + (c + 1) * hidden];
        row.fill(0.0);
        row[c] = 0.5 * MIX_INIT_GAIN;
        row[c + 3] = 0.5 * MIX_INIT_GAIN;
    }
    mlp
}

fn ldr(width: usize, height: usize, data: Vec<f64>) -> ImageBuffer {
    ImageBuffer::from_vec(width, height, data, ColorSpace::LdrUnit).expect("sized by construction")
}

/// Saved state of [`tone_map_saved`].
#[derive(Debug, Clone)]
pub struct ToneMapCache {
    mlp: MlpCache,
    /// `hdr + LOG_EPS` per sample.
    shifted: Vec<f64>,
}

impl ToneMapCache {
    pub fn kink_margin(&self, f_tm: &MlpParams) -> f64 {
        f_tm.min_hidden_margin(&self.mlp)
    }
}

/// Global and local LDR estimates of an HDR image.
pub fn tone_map_pair(hdr: &ImageBuffer, f_tm: &MlpParams) -> (ImageBuffer, ImageBuffer) {
    let (g, l, _) = tone_map_saved(hdr, f_tm);
    (g, l)
}

pub fn tone_map_saved(hdr: &ImageBuffer, f_tm: &MlpParams) -> (ImageBuffer, ImageBuffer, ToneMapCache) {
    let shifted: Vec<f64> = hdr.data().iter().map(|v| v + LOG_EPS).collect();
    let input: Vec<f64> = shifted.iter().map(|v| v.ln()).collect();
    let (out, mlp) = f_tm.forward_saved(&input);
    let mut glo = Vec::with_capacity(hdr.data().len());
    let mut loc = Vec::with_capacity(hdr.data().len());
    for px in out.chunks_exact(6) {
        glo.extend_from_slice(&px[..3]);
        loc.extend_from_slice(&px[3..]);
    }
    let (w, h) = (hdr.width(), hdr.height());
    (ldr(w, h, glo), ldr(w, h, loc), ToneMapCache { mlp, shifted })
}

/// Cotangent on the HDR input given cotangents on both outputs.
pub fn tone_map_backward(
    cache: &ToneMapCache,
    f_tm: &MlpParams,
    d_glo: &[f64],
    d_loc: &[f64],
    param_grad: Option<&mut [f64]>,
) -> Vec<f64> {
    let mut d_out = Vec::with_capacity(d_glo.len() * 2);
    for (g, l) in d_glo.chunks_exact(3).zip(d_loc.chunks_exact(3)) {
        d_out.extend_from_slice(g);
        d_out.extend_from_slice(l);
    }
    let dx = f_tm.backward(&cache.mlp, &d_out, param_grad);
    dx.iter().zip(&cache.shifted).map(|(d, s)| d / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedOutputs {
    /// Exposure-global fused with illumination-local.
    pub i_ig: ImageBuffer,
    /// Exposure-global fused with exposure-local.
    pub i_gi: ImageBuffer,
    pub i_ldr: ImageBuffer,
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    ig: MlpCache,
    gi: MlpCache,
}

impl FuseCache {
    pub fn kink_margin(&self, f_mix: &MlpParams) -> f64 {
        f_mix.min_hidden_margin(&self.ig).min(f_mix.min_hidden_margin(&self.gi))
    }
}

fn concat(a: &ImageBuffer, b: &ImageBuffer) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.data().len() * 2);
    for (x, y) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)) {
        out.extend_from_slice(x);
        out.extend_from_slice(y);
    }
    out
}

/// Cross-fusion of the exposure-branch global image `glo` with the
/// illumination-branch local image `loc_relit` and the exposure-branch local
/// image `loc`.
pub fn cross_fuse(
    glo: &ImageBuffer,
    loc_relit: &ImageBuffer,
    loc: &ImageBuffer,
    f_mix: &MlpParams,
    fusion: FusionMode,
) -> Result<FusedOutputs> {
    Ok(cross_fuse_saved(glo, loc_relit, loc, f_mix, fusion)?.0)
}

pub fn cross_fuse_saved(
    glo: &ImageBuffer,
    loc_relit: &ImageBuffer,
    loc: &ImageBuffer,
    f_mix: &MlpParams,
    fusion: FusionMode,
) -> Result<(FusedOutputs, FuseCache)> {
    glo.ensure_same_shape(loc_relit, "cross fusion")?;
    glo.ensure_same_shape(loc, "cross fusion")?;
    let (ig, ig_cache) = f_mix.forward_saved(&concat(glo, loc_relit));
    let (gi, gi_cache) = f_mix.forward_saved(&concat(glo, loc));
    let k = fusion.factor();
    let sum: Vec<f64> = match fusion {
        FusionMode::Sum => ig.iter().zip(&gi).map(|(a, b)| a + b).collect(),
        FusionMode::Mean => ig.iter().zip(&gi).map(|(a, b)| k * (a + b)).collect(),
    };
    let (w, h) = (glo.width(), glo.height());
    Ok((
        FusedOutputs {
            i_ig: ldr(w, h, ig),
            i_gi: ldr(w, h, gi),
            i_ldr: ImageBuffer::from_vec(w, h, sum, ColorSpace::LdrUnit).expect("sized by construction"),
        },
        FuseCache {
            ig: ig_cache,
            gi: gi_cache,
        },
    ))
}

/// Cotangents on `(glo, loc_relit, loc)`. When `param_grad` is `None` the
/// fusion network receives no gradient.
pub fn cross_fuse_backward(
    cache: &FuseCache,
    f_mix: &MlpParams,
    fusion: FusionMode,
    d_ldr: &[f64],
    d_ig: &[f64],
    d_gi: &[f64],
    mut param_grad: Option<&mut [f64]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = fusion.factor();
    let dig: Vec<f64> = d_ig.iter().zip(d_ldr).map(|(a, b)| a + k * b).collect();
    let dgi: Vec<f64> = d_gi.iter().zip(d_ldr).map(|(a, b)| a + k * b).collect();
    let x_ig = f_mix.backward(&cache.ig, &dig, param_grad.as_deref_mut());
    let x_gi = f_mix.backward(&cache.gi, &dgi, param_grad);
    let n = d_ldr.len();
    let mut d_glo = vec![0.0; n];
    let mut d_loc_relit = vec![0.0; n];
    let mut d_loc = vec![0.0; n];
    for p in 0..n / 3 {
        for c in 0..3 {
            d_glo[p * 3 + c] = x_ig[p * 6 + c] + x_gi[p * 6 + c];
            d_loc_relit[p * 3 + c] = x_ig[p * 6 + 3 + c];
            d_loc[p * 3 + c] = x_gi[p * 6 + 3 + c];
        }
    }
    (d_glo, d_loc_relit, d_loc)
}

/// `ln(1 + mu x) / ln(1 + mu)` after normalizing by the image maximum.
/// An all-zero image maps to all zeros.
pub fn mu_law(hdr: &ImageBuffer, mu: f64) -> Result<ImageBuffer> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::invalid(format!("mu must be > 0, got {mu}")));
    }
    if hdr.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("mu-law input must be finite and non-negative"));
    }
    let max = hdr.max_value();
    let denom = mu.ln_1p();
    if max == 0.0 {
        return Ok(hdr.clone().with_space(ColorSpace::LdrUnit));
    }
    Ok(hdr.map(|v| (mu * (v / max)).ln_1p() / denom).with_space(ColorSpace::LdrUnit))
}

/// The mu-law curve for one normalized value.
pub fn mu_law_value(x: f64, mu: f64) -> f64 {
    (mu * x).ln_1p() / mu.ln_1p()
}
