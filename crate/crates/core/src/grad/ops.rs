//! Every stage of the training pipeline wrapped as a [`DiffOp`] over flat
//! vectors, with fixed context and a sample input away from kinks. Used to
//! check each VJP in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiffOp, Saved};
use crate::dataio::{ColorSpace, ImageBuffer};
use crate::losses::{mse, mse_backward, ssim_backward, ssim_forward, ssim_window, ConsistencyLoss, GaussianFilter, ReconstructionLoss};
use crate::mlp::{MlpParams, OutputMap};
use crate::raster::{composite, composite_backward, project, project_backward, RasterConfig};
use crate::scene::{covariance, covariance_vjp, Camera, GaussianCloud, HR_DIM};
use crate::tonemap::{cross_fuse_backward, cross_fuse_saved, tone_map_backward, tone_map_saved, FusionMode};

fn image(w: usize, h: usize, data: &[f64], space: ColorSpace) -> ImageBuffer {
    ImageBuffer::from_vec(w, h, data.to_vec(), space).expect("op input length")
}

pub struct CovarianceOp;

impl DiffOp for CovarianceOp {
    fn name(&self) -> String {
        "covariance".into()
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let c = covariance(&[x[0], x[1], x[2]], &[x[3], x[4], x[5], x[6]]);
        (c.iter().flatten().copied().collect(), Box::new(()))
    }
    fn vjp(&self, x: &[f64], _s: &Saved, d: &[f64]) -> Vec<f64> {
        let g = [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]];
        let (dl, dq) = covariance_vjp(&[x[0], x[1], x[2]], &[x[3], x[4], x[5], x[6]], &g);
        dl.iter().chain(&dq).copied().collect()
    }
}

/// Projection plus compositing of `n` Gaussians with fixed colors. Input per
/// Gaussian: center (3), log scale (3), quaternion (4), opacity logit (1).
pub struct SplatOp {
    pub camera: Camera,
    pub colors: Vec<[f64; 3]>,
}

const GEOM: usize = 11;

impl SplatOp {
    fn cloud(&self, x: &[f64]) -> GaussianCloud {
        let n = x.len() / GEOM;
        let g = |i: usize, k: usize| x[i * GEOM + k];
        GaussianCloud {
            mu: (0..n).map(|i| [g(i, 0), g(i, 1), g(i, 2)]).collect(),
            log_scale: (0..n).map(|i| [g(i, 3), g(i, 4), g(i, 5)]).collect(),
            rotation: (0..n).map(|i| [g(i, 6), g(i, 7), g(i, 8), g(i, 9)]).collect(),
            opacity_logit: (0..n).map(|i| g(i, 10)).collect(),
            h_r: vec![[0.0; HR_DIM]; n],
            l_a_raw: vec![[0.0; 3]; n],
        }
    }
}

impl DiffOp for SplatOp {
    fn name(&self) -> String {
        "project+composite".into()
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let cloud = self.cloud(x);
        let cfg = RasterConfig::exact();
        let p = project(&cloud, &self.camera, &cfg);
        let cols: Vec<[f64; 3]> = p.splats.iter().map(|s| self.colors[s.index]).collect();
        (composite(&p, &self.camera, &[&cols], &cfg).remove(0).into_vec(), Box::new(()))
    }
    fn vjp(&self, x: &[f64], _s: &Saved, d: &[f64]) -> Vec<f64> {
        let cloud = self.cloud(x);
        let cfg = RasterConfig::exact();
        let p = project(&cloud, &self.camera, &cfg);
        let cols: Vec<[f64; 3]> = p.splats.iter().map(|s| self.colors[s.index]).collect();
        let sg = composite_backward(&p, &self.camera, &[&cols], &[d], &cfg);
        let gg = project_backward(&cloud, &self.camera, &p, &sg.alpha, &sg.conic, &sg.pixel);
        let mut out = vec![0.0; x.len()];
        for i in 0..cloud.len() {
            let o = &mut out[i * GEOM..(i + 1) * GEOM];
            o[..3].copy_from_slice(&gg.mu[i]);
            o[3..6].copy_from_slice(&gg.log_scale[i]);
            o[6..10].copy_from_slice(&gg.rotation[i]);
            o[10] = gg.opacity_logit[i];
        }
        out
    }
}

/// An MLP as a function of its input batch (`rows` rows).
pub struct MlpInputOp {
    pub label: &'static str,
    pub mlp: MlpParams,
}

impl DiffOp for MlpInputOp {
    fn name(&self) -> String {
        format!("{} (inputs)", self.label)
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let (y, cache) = self.mlp.forward_saved(x);
        (y, Box::new(cache))
    }
    fn vjp(&self, _x: &[f64], s: &Saved, d: &[f64]) -> Vec<f64> {
        self.mlp.backward(s.downcast_ref().expect("mlp cache"), d, None)
    }
    fn smooth_margin(&self, x: &[f64]) -> f64 {
        let (_, cache) = self.mlp.forward_saved(x);
        self.mlp.min_hidden_margin(&cache)
    }
}

/// An MLP as a function of its parameters on a fixed input batch.
pub struct MlpParamOp {
    pub label: &'static str,
    pub dims: Vec<usize>,
    pub output_map: OutputMap,
    pub input: Vec<f64>,
}

impl MlpParamOp {
    fn mlp(&self, x: &[f64]) -> MlpParams {
        MlpParams::from_parts(self.dims.clone(), x.to_vec(), self.output_map).expect("param count")
    }
}

impl DiffOp for MlpParamOp {
    fn name(&self) -> String {
        format!("{} (weights)", self.label)
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let (y, cache) = self.mlp(x).forward_saved(&self.input);
        (y, Box::new(cache))
    }
    fn vjp(&self, x: &[f64], s: &Saved, d: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.mlp(x).backward(s.downcast_ref().expect("mlp cache"), d, Some(&mut g));
        g
    }
    fn smooth_margin(&self, x: &[f64]) -> f64 {
        let m = self.mlp(x);
        let (_, cache) = m.forward_saved(&self.input);
        m.min_hidden_margin(&cache)
    }
}

/// Tone mapping of an HDR image to its (global, local) pair.
pub struct ToneMapOp {
    pub f_tm: MlpParams,
    pub width: usize,
    pub height: usize,
}

impl DiffOp for ToneMapOp {
    fn name(&self) -> String {
        "tone map pair".into()
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let (g, l, cache) = tone_map_saved(&image(self.width, self.height, x, ColorSpace::LinearHdr), &self.f_tm);
        (g.data().iter().chain(l.data()).copied().collect(), Box::new(cache))
    }
    fn vjp(&self, x: &[f64], s: &Saved, d: &[f64]) -> Vec<f64> {
        let n = x.len();
        tone_map_backward(s.downcast_ref().expect("tone map cache"), &self.f_tm, &d[..n], &d[n..], None)
    }
    fn smooth_margin(&self, x: &[f64]) -> f64 {
        let input: Vec<f64> = x.iter().map(|v| (v + crate::tonemap::LOG_EPS).ln()).collect();
        let (_, cache) = self.f_tm.forward_saved(&input);
        self.f_tm.min_hidden_margin(&cache)
    }
}

/// Cross fusion of `(glo, loc_relit, loc)` into `(ig, gi, ldr)`.
pub struct CrossFuseOp {
    pub f_mix: MlpParams,
    pub fusion: FusionMode,
    pub width: usize,
    pub height: usize,
}

impl DiffOp for CrossFuseOp {
    fn name(&self) -> String {
        format!("cross fuse ({})", self.fusion.name())
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let n = x.len() / 3;
        let im = |k: usize| image(self.width, self.height, &x[k * n..(k + 1) * n], ColorSpace::LdrUnit);
        let (f, cache) = cross_fuse_saved(&im(0), &im(1), &im(2), &self.f_mix, self.fusion).expect("shapes");
        let out = f.i_ig.data().iter().chain(f.i_gi.data()).chain(f.i_ldr.data()).copied().collect();
        (out, Box::new(cache))
    }
    fn vjp(&self, x: &[f64], s: &Saved, d: &[f64]) -> Vec<f64> {
        let n = x.len() / 3;
        let (a, b, c) = cross_fuse_backward(
            s.downcast_ref().expect("fuse cache"),
            &self.f_mix,
            self.fusion,
            &d[2 * n..],
            &d[..n],
            &d[n..2 * n],
            None,
        );
        a.into_iter().chain(b).chain(c).collect()
    }
    fn smooth_margin(&self, x: &[f64]) -> f64 {
        let n = x.len() / 3;
        let mut m = f64::INFINITY;
        for (p, q) in [(0, 1), (0, 2)] {
            let mut input = Vec::with_capacity(2 * n);
            for px in 0..n / 3 {
                input.extend_from_slice(&x[p * n + px * 3..p * n + px * 3 + 3]);
                input.extend_from_slice(&x[q * n + px * 3..q * n + px * 3 + 3]);
            }
            let (_, cache) = self.f_mix.forward_saved(&input);
            m = m.min(self.f_mix.min_hidden_margin(&cache));
        }
        m
    }
}

/// Separable Gaussian blur of one plane.
pub struct BlurOp {
    pub filter: GaussianFilter,
    pub width: usize,
    pub height: usize,
}

impl DiffOp for BlurOp {
    fn name(&self) -> String {
        "gaussian blur".into()
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        (self.filter.apply(x, self.width, self.height), Box::new(()))
    }
    fn vjp(&self, _x: &[f64], _s: &Saved, d: &[f64]) -> Vec<f64> {
        self.filter.adjoint(d, self.width, self.height)
    }
}

/// Mean SSIM against a fixed reference.
pub struct SsimOp {
    pub reference: ImageBuffer,
}

impl DiffOp for SsimOp {
    fn name(&self) -> String {
        "ssim".into()
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let r = &self.reference;
        let (s, cache) = ssim_forward(&image(r.width(), r.height(), x, ColorSpace::LdrUnit), r, &ssim_window());
        (vec![s], Box::new(cache))
    }
    fn vjp(&self, x: &[f64], s: &Saved, d: &[f64]) -> Vec<f64> {
        let r = &self.reference;
        let img = image(r.width(), r.height(), x, ColorSpace::LdrUnit);
        ssim_backward(&img, r, s.downcast_ref().expect("ssim cache"), &ssim_window(), d[0])
    }
}

/// Reconstruction loss of three stacked predictions.
pub struct ReconstructionOp {
    pub loss: ReconstructionLoss,
    pub gt: ImageBuffer,
}

impl DiffOp for ReconstructionOp {
    fn name(&self) -> String {
        "reconstruction loss".into()
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let n = x.len() / 3;
        let (w, h) = (self.gt.width(), self.gt.height());
        let imgs: Vec<ImageBuffer> = (0..3).map(|k| image(w, h, &x[k * n..(k + 1) * n], ColorSpace::LdrUnit)).collect();
        let refs: Vec<&ImageBuffer> = imgs.iter().collect();
        let (v, cache) = self.loss.forward(&refs, &self.gt).expect("shapes");
        (vec![v], Box::new(cache))
    }
    fn vjp(&self, x: &[f64], s: &Saved, d: &[f64]) -> Vec<f64> {
        let n = x.len() / 3;
        let (w, h) = (self.gt.width(), self.gt.height());
        let imgs: Vec<ImageBuffer> = (0..3).map(|k| image(w, h, &x[k * n..(k + 1) * n], ColorSpace::LdrUnit)).collect();
        let refs: Vec<&ImageBuffer> = imgs.iter().collect();
        self.loss.backward(&refs, &self.gt, s.downcast_ref().expect("rec cache"), d[0]).concat()
    }
}

/// Consistency loss of two stacked HDR images.
pub struct ConsistencyOp {
    pub loss: ConsistencyLoss,
    pub width: usize,
    pub height: usize,
}

impl DiffOp for ConsistencyOp {
    fn name(&self) -> String {
        "consistency loss".into()
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let n = x.len() / 2;
        let a = image(self.width, self.height, &x[..n], ColorSpace::LinearHdr);
        let b = image(self.width, self.height, &x[n..], ColorSpace::LinearHdr);
        let (v, cache) = self.loss.forward(&a, &b).expect("shapes");
        (vec![v], Box::new(cache))
    }
    fn vjp(&self, _x: &[f64], s: &Saved, d: &[f64]) -> Vec<f64> {
        let (a, b) = self.loss.backward(s.downcast_ref().expect("cons cache"), d[0]);
        a.into_iter().chain(b).collect()
    }
    fn smooth_margin(&self, x: &[f64]) -> f64 {
        let n = x.len() / 2;
        let mut m = f64::INFINITY;
        for c in 0..3 {
            let diff: Vec<f64> = (0..n / 3).map(|p| x[p * 3 + c] - x[n + p * 3 + c]).collect();
            let blurred = self.loss.filter().apply(&diff, self.width, self.height);
            m = blurred.iter().fold(m, |m, v| m.min(v.abs()));
        }
        m
    }
}

/// Unit-exposure MSE against a fixed reference.
pub struct UnitExposureOp {
    pub gt: ImageBuffer,
}

impl DiffOp for UnitExposureOp {
    fn name(&self) -> String {
        "unit-exposure loss".into()
    }
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Saved) {
        let img = image(self.gt.width(), self.gt.height(), x, ColorSpace::LdrUnit);
        (vec![mse(&img, &self.gt)], Box::new(()))
    }
    fn vjp(&self, x: &[f64], _s: &Saved, d: &[f64]) -> Vec<f64> {
        let img = image(self.gt.width(), self.gt.height(), x, ColorSpace::LdrUnit);
        mse_backward(&img, &self.gt, d[0])
    }
}

/// One registered op with an input and output cotangent to test it at.
pub struct OpCase {
    pub op: Box<dyn DiffOp>,
    pub input: Vec<f64>,
    pub cotangent: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Draws inputs until the op is at least `margin` away from its kinks.
fn vetted(op: Box<dyn DiffOp>, rng: &mut ChaCha8Rng, margin: f64, draw: &dyn Fn(&mut ChaCha8Rng) -> Vec<f64>) -> OpCase {
    for _ in 0..1000 {
        let input = draw(rng);
        if op.smooth_margin(&input) >= margin {
            let out_len = op.eval(&input).len();
            let cotangent = uniform(rng, out_len, -1.0, 1.0);
            return OpCase { op, input, cotangent };
        }
    }
    panic!("no smooth input found for {}", op.name());
}

/// Every pipeline stage with a randomized input at least `1e-3` away from
/// non-smooth points.
pub fn registered_ops(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (12, 11);
    let n = w * h * 3;
    // Smaller images for the per-pixel networks keep smooth inputs easy to
    // draw.
    let (sw, sh) = (4, 3);
    let sn = sw * sh * 3;
    let margin = 1e-3;
    let mut cases = Vec::new();

    cases.push(vetted(Box::new(CovarianceOp), &mut rng, margin, &|r| {
        let mut x = uniform(r, 3, -1.0, 0.5);
        x.extend(uniform(r, 4, -1.0, 1.0));
        x
    }));

    let camera = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 10, 9, 11.0).expect("camera");
    let colors = (0..4).map(|_| [rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)]).collect();
    cases.push(vetted(Box::new(SplatOp { camera, colors }), &mut rng, margin, &|r| {
        let mut x = Vec::new();
        for i in 0..4 {
            x.extend(uniform(r, 2, -0.6, 0.6));
            x.push(-0.6 + 0.4 * i as f64 + r.random_range(0.0..0.1));
            x.extend(uniform(r, 3, -1.6, -0.7));
            x.extend(uniform(r, 4, -1.0, 1.0));
            x.push(r.random_range(-1.5..1.5));
        }
        x
    }));

    let nets: [(&'static str, Vec<usize>, OutputMap); 4] = [
        ("g", crate::radiance::COMPOSER_DIMS.to_vec(), OutputMap::Softplus),
        ("phi", crate::radiance::MODULATOR_DIMS.to_vec(), OutputMap::Softplus),
        ("f_tm", crate::tonemap::TONEMAP_DIMS.to_vec(), OutputMap::Sigmoid),
        ("f_mix", crate::tonemap::MIX_DIMS.to_vec(), OutputMap::Sigmoid),
    ];
    for (label, dims, map) in nets {
        let mlp = MlpParams::init(&dims, map, 0.1, &mut rng).expect("dims");
        let rows = 5;
        let din = dims[0];
        cases.push(vetted(Box::new(MlpInputOp { label, mlp: mlp.clone() }), &mut rng, margin, &|r| {
            uniform(r, rows * din, -1.0, 1.0)
        }));
        let input = uniform(&mut rng, rows * din, -1.0, 1.0);
        let count = mlp.num_params();
        cases.push(vetted(
            Box::new(MlpParamOp {
                label,
                dims: dims.clone(),
                output_map: map,
                input,
            }),
            &mut rng,
            margin,
            &|r| uniform(r, count, -0.5, 0.5),
        ));
    }

    let f_tm = MlpParams::init(&crate::tonemap::TONEMAP_DIMS, OutputMap::Sigmoid, 0.0, &mut rng).expect("dims");
    cases.push(vetted(Box::new(ToneMapOp { f_tm, width: sw, height: sh }), &mut rng, margin, &|r| {
        uniform(r, sn, 0.05, 3.0)
    }));
    for fusion in [FusionMode::Sum, FusionMode::Mean] {
        let f_mix = MlpParams::init(&crate::tonemap::MIX_DIMS, OutputMap::Sigmoid, 0.0, &mut rng).expect("dims");
        cases.push(vetted(
            Box::new(CrossFuseOp {
                f_mix,
                fusion,
                width: sw,
                height: sh,
            }),
            &mut rng,
            margin,
            &|r| uniform(r, 3 * sn, 0.01, 0.99),
        ));
    }

    cases.push(vetted(
        Box::new(BlurOp {
            filter: GaussianFilter::new(2.0, 5),
            width: w,
            height: h,
        }),
        &mut rng,
        margin,
        &|r| uniform(r, w * h, -1.0, 1.0),
    ));

    let gt = image(w, h, &uniform(&mut rng, n, 0.0, 1.0), ColorSpace::LdrUnit);
    cases.push(vetted(Box::new(SsimOp { reference: gt.clone() }), &mut rng, margin, &|r| uniform(r, n, 0.0, 1.0)));
    cases.push(vetted(
        Box::new(ReconstructionOp {
            loss: ReconstructionLoss::new(0.2),
            gt: gt.clone(),
        }),
        &mut rng,
        margin,
        &|r| uniform(r, 3 * n, 0.0, 1.0),
    ));
    cases.push(vetted(
        Box::new(ConsistencyOp {
            loss: ConsistencyLoss::new(2.0, 5),
            width: w,
            height: h,
        }),
        &mut rng,
        margin,
        &|r| uniform(r, 2 * n, 0.0, 2.0),
    ));
    cases.push(vetted(Box::new(UnitExposureOp { gt }), &mut rng, margin, &|r| uniform(r, n, 0.0, 1.0)));
    cases
}
