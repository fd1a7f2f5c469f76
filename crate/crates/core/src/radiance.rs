//! Radiance composition: the composer `g` turns (ambient illumination,
//! reflectance feature) into per-Gaussian HDR color, and the modulator `phi`
//! relights each Gaussian for a target lighting level. Both branch images
//! share projection, ordering and weights.

use rand::Rng;

use crate::dataio::ImageBuffer;
use crate::error::Result;
use crate::linalg::{sigmoid, softplus};
use crate::mlp::{MlpCache, MlpParams, OutputMap};
use crate::raster::{
    composite, composite_backward, project, project_backward, GeometryGrads, Projection, RasterConfig,
};
use crate::scene::{Camera, GaussianCloud, HR_DIM, LA_DIM};

pub const COMPOSER_DIMS: [usize; 4] = [LA_DIM + HR_DIM, 32, 32, 3];
pub const MODULATOR_DIMS: [usize; 3] = [LA_DIM + 1, 16, 3];

/// Initial output of both networks before training.
const INITIAL_OUTPUT: f64 = 0.5;

pub fn init_composer<R: Rng>(rng: &mut R) -> MlpParams {
    MlpParams::init(
        &COMPOSER_DIMS,
        OutputMap::Softplus,
        MlpParams::softplus_bias_for(INITIAL_OUTPUT),
        rng,
    )
    .expect("static dims")
}

pub fn init_modulator<R: Rng>(rng: &mut R) -> MlpParams {
    MlpParams::init(
        &MODULATOR_DIMS,
        OutputMap::Softplus,
        MlpParams::softplus_bias_for(INITIAL_OUTPUT),
        rng,
    )
    .expect("static dims")
}

/// HDR color `g(L_a, H_r)`.
pub fn compose(l_a: &[f64; LA_DIM], h_r: &[f64; HR_DIM], g: &MlpParams) -> [f64; 3] {
    let mut x = Vec::with_capacity(LA_DIM + HR_DIM);
    x.extend_from_slice(l_a);
    x.extend_from_slice(h_r);
    let out = g.forward(&x);
    [out[0], out[1], out[2]]
}

/// Virtual illumination `phi(L_a, l)`.
pub fn modulate(l_a: &[f64; LA_DIM], lighting_l: f64, phi: &MlpParams) -> [f64; 3] {
    let out = phi.forward(&[l_a[0], l_a[1], l_a[2], lighting_l]);
    [out[0], out[1], out[2]]
}

/// Which branches are rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchMode {
    /// Exposure branch plus relit illumination branch.
    #[default]
    Dual,
    /// Exposure branch only; the relit image is replaced by the exposed one.
    IeOnly,
}

impl BranchMode {
    pub fn name(self) -> &'static str {
        match self {
            BranchMode::Dual => "dual",
            BranchMode::IeOnly => "ie-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dual" => Some(BranchMode::Dual),
            "ie-only" => Some(BranchMode::IeOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    /// Exposure branch before exposure scaling.
    pub i_hdr: ImageBuffer,
    /// `t * i_hdr`.
    pub i_hdr_scaled: ImageBuffer,
    /// Illumination branch.
    pub i_hdr_relit: ImageBuffer,
}

/// Saved state of a branch render, consumed by [`branch_backward`].
#[derive(Debug, Clone)]
pub struct BranchForward {
    pub proj: Projection,
    pub mode: BranchMode,
    /// Per splat.
    pub ambient: Vec<[f64; 3]>,
    pub relit_ambient: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub relit_colors: Vec<[f64; 3]>,
    g_cache: MlpCache,
    gi_caches: Option<(MlpCache, MlpCache)>,
    /// Unscaled exposure-branch image.
    pub i_hdr: ImageBuffer,
    /// Illumination-branch image (equal to `i_hdr` in exposure-only mode).
    pub i_relit: ImageBuffer,
}

fn to_triples(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Projects the cloud, evaluates both color sets and composites them in one
/// pass. Returns the saved state; images are unscaled by exposure.
pub fn branch_forward(
    cloud: &GaussianCloud,
    camera: &Camera,
    lighting_l: f64,
    g: &MlpParams,
    phi: &MlpParams,
    mode: BranchMode,
    cfg: &RasterConfig,
) -> BranchForward {
    let proj = project(cloud, camera, cfg);
    let n = proj.splats.len();
    let ambient: Vec<[f64; 3]> = proj.splats.iter().map(|s| cloud.ambient(s.index)).collect();
    let mut g_in = Vec::with_capacity(n * (LA_DIM + HR_DIM));
    for (s, la) in proj.splats.iter().zip(&ambient) {
        g_in.extend_from_slice(la);
        g_in.extend_from_slice(&cloud.h_r[s.index]);
    }
    let (c, g_cache) = g.forward_saved(&g_in);
    let colors = to_triples(&c);

    let (relit_ambient, relit_colors, gi_caches) = match mode {
        BranchMode::Dual => {
            let mut phi_in = Vec::with_capacity(n * 4);
            for la in &ambient {
                phi_in.extend_from_slice(la);
                phi_in.push(lighting_l);
            }
            let (lh, phi_cache) = phi.forward_saved(&phi_in);
            let mut gh_in = Vec::with_capacity(n * (LA_DIM + HR_DIM));
            for (k, s) in proj.splats.iter().enumerate() {
                gh_in.extend_from_slice(&lh[k * 3..k * 3 + 3]);
                gh_in.extend_from_slice(&cloud.h_r[s.index]);
            }
            let (ch, gh_cache) = g.forward_saved(&gh_in);
            (to_triples(&lh), to_triples(&ch), Some((phi_cache, gh_cache)))
        }
        BranchMode::IeOnly => (ambient.clone(), colors.clone(), None),
    };

    let (i_hdr, i_relit) = match mode {
        BranchMode::Dual => {
            let mut imgs = composite(&proj, camera, &[&colors, &relit_colors], cfg);
            let relit = imgs.pop().expect("two images");
            (imgs.pop().expect("two images"), relit)
        }
        BranchMode::IeOnly => {
            let img = composite(&proj, camera, &[&colors], cfg).remove(0);
            (img.clone(), img)
        }
    };
    BranchForward {
        proj,
        mode,
        ambient,
        relit_ambient,
        colors,
        relit_colors,
        g_cache,
        gi_caches,
        i_hdr,
        i_relit,
    }
}

impl BranchForward {
    /// Smallest distance of any hidden pre-activation from the leaky-ReLU
    /// kink across the composer and modulator evaluations.
    pub fn kink_margin(&self, g: &MlpParams, phi: &MlpParams) -> f64 {
        let mut m = g.min_hidden_margin(&self.g_cache);
        if let Some((phi_cache, gh_cache)) = &self.gi_caches {
            m = m.min(phi.min_hidden_margin(phi_cache)).min(g.min_hidden_margin(gh_cache));
        }
        m
    }
}

/// Gradients produced by [`branch_backward`].
#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub geometry: GeometryGrads,
    pub h_r: Vec<[f64; HR_DIM]>,
    pub l_a_raw: Vec<[f64; LA_DIM]>,
    pub g: Vec<f64>,
    pub phi: Vec<f64>,
    /// Per Gaussian: received a nonzero compositing weight somewhere.
    pub contributed: Vec<bool>,
}

/// Pulls cotangents on the unscaled exposure image and on the relit image
/// back to every parameter. In exposure-only mode `d_relit` must be `None`.
pub fn branch_backward(
    fwd: &BranchForward,
    cloud: &GaussianCloud,
    camera: &Camera,
    g: &MlpParams,
    phi: &MlpParams,
    d_hdr: &[f64],
    d_relit: Option<&[f64]>,
    cfg: &RasterConfig,
) -> BranchGrads {
    let n = cloud.len();
    let proj = &fwd.proj;
    let sg = match (fwd.mode, d_relit) {
        (BranchMode::Dual, Some(dr)) => {
            composite_backward(proj, camera, &[&fwd.colors, &fwd.relit_colors], &[d_hdr, dr], cfg)
        }
        (BranchMode::Dual, None) => {
            let zero = vec![0.0; d_hdr.len()];
            composite_backward(proj, camera, &[&fwd.colors, &fwd.relit_colors], &[d_hdr, &zero], cfg)
        }
        (BranchMode::IeOnly, _) => composite_backward(proj, camera, &[&fwd.colors], &[d_hdr], cfg),
    };
    let geometry = project_backward(cloud, camera, proj, &sg.alpha, &sg.conic, &sg.pixel);

    let mut g_grad = vec![0.0; g.num_params()];
    let mut phi_grad = vec![0.0; phi.num_params()];
    let d_c: Vec<f64> = sg.color[0].iter().flatten().copied().collect();
    let dx = g.backward(&fwd.g_cache, &d_c, Some(&mut g_grad));
    let width = LA_DIM + HR_DIM;
    let mut d_ambient: Vec<[f64; 3]> = dx.chunks_exact(width).map(|r| [r[0], r[1], r[2]]).collect();
    let mut d_hr: Vec<[f64; HR_DIM]> = dx
        .chunks_exact(width)
        .map(|r| {
            let mut h = [0.0; HR_DIM];
            h.copy_from_slice(&r[LA_DIM..]);
            h
        })
        .collect();

    if let (Some((phi_cache, gh_cache)), Some(relit_d)) = (&fwd.gi_caches, sg.color.get(1)) {
        let d_ch: Vec<f64> = relit_d.iter().flatten().copied().collect();
        let dxh = g.backward(gh_cache, &d_ch, Some(&mut g_grad));
        let mut d_lh = Vec::with_capacity(proj.splats.len() * 3);
        for (k, r) in dxh.chunks_exact(width).enumerate() {
            d_lh.extend_from_slice(&r[..LA_DIM]);
            for j in 0..HR_DIM {
                d_hr[k][j] += r[LA_DIM + j];
            }
        }
        let dphi_in = phi.backward(phi_cache, &d_lh, Some(&mut phi_grad));
        for (k, r) in dphi_in.chunks_exact(LA_DIM + 1).enumerate() {
            for j in 0..3 {
                d_ambient[k][j] += r[j];
            }
        }
    }

    let mut h_r = vec![[0.0; HR_DIM]; n];
    let mut l_a_raw = vec![[0.0; LA_DIM]; n];
    let mut contributed = vec![false; n];
    for (k, s) in proj.splats.iter().enumerate() {
        let i = s.index;
        h_r[i] = d_hr[k];
        for j in 0..3 {
            l_a_raw[i][j] = d_ambient[k][j] * sigmoid(cloud.l_a_raw[i][j]);
        }
        contributed[i] = sg.contributed[k];
    }
    BranchGrads {
        geometry,
        h_r,
        l_a_raw,
        g: g_grad,
        phi: phi_grad,
        contributed,
    }
}

/// Renders both branch images for one view.
pub fn render_branches(
    cloud: &GaussianCloud,
    camera: &Camera,
    exposure_t: f64,
    lighting_l: f64,
    g: &MlpParams,
    phi: &MlpParams,
    mode: BranchMode,
    cfg: &RasterConfig,
) -> Result<BranchOutputs> {
    camera.validate()?;
    if !(exposure_t.is_finite() && exposure_t > 0.0) {
        return Err(crate::error::Error::invalid(format!("exposure must be > 0, got {exposure_t}")));
    }
    let fwd = branch_forward(cloud, camera, lighting_l, g, phi, mode, cfg);
    let i_hdr_scaled = fwd.i_hdr.scaled(exposure_t);
    let i_hdr_relit = match mode {
        BranchMode::Dual => fwd.i_relit,
        BranchMode::IeOnly => i_hdr_scaled.clone(),
    };
    Ok(BranchOutputs {
        i_hdr: fwd.i_hdr,
        i_hdr_scaled,
        i_hdr_relit,
    })
}

/// Positive ambient illumination for raw parameters.
pub fn ambient_of(raw: &[f64; LA_DIM]) -> [f64; LA_DIM] {
    raw.map(softplus)
}
