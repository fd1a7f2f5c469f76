//! End-to-end gradient verification on a tiny two-view scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::synthetic::{generate_scene, SceneSpec};
use crate::dataio::{Dataset, Split, ViewSet};
use crate::error::{Error, Result};
use crate::grad::{finite_diff_check, select_coords, FdReport, GradTape};
use crate::losses::LossWeights;
use crate::mlp::{MlpParams, OutputMap};
use crate::model::{Model, ParamId};
use crate::pipeline::{loss_and_gradients, loss_terms, loss_value, Fault, PipelineConfig, Sample, TrainPipeline};
use crate::raster::{project, RasterConfig};
use crate::scene::InitConfig;
use crate::tonemap::MIX_DIMS;

/// Pass threshold on the max relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Required distance of the fixture from non-smooth points.
pub const FIXTURE_MARGIN: f64 = 1e-4;
/// Std of the noise separating the checked model from the model that
/// rendered the fixture targets.
pub const FIXTURE_PERTURBATION: f64 = 0.02;

/// A model plus supervised samples, chosen so that the loss is smooth
/// around the model parameters.
#[derive(Debug, Clone)]
pub struct GradFixture {
    pub model: Model,
    pub views: Vec<ViewSet>,
    /// `(view, exposure)` pairs supervised by the loss.
    pub picks: Vec<(usize, f64)>,
    pub config: PipelineConfig,
}

impl GradFixture {
    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.picks
            .iter()
            .map(|&(v, t)| {
                let set = &self.views[v];
                Sample {
                    view: set.record_at(t).expect("picked exposure exists"),
                    unit_gt: set.unit_record().map(|r| &r.gt_ldr),
                }
            })
            .collect()
    }

    /// Five Gaussians, 8x8 images, two views.
    pub fn standard(seed: u64) -> Result<Self> {
        let scene = generate_scene(SceneSpec {
            seed,
            n_gaussians: 6,
            image_size: 8,
            n_views: 3,
        })?;
        Self::from_dataset(&scene.dataset, 5, seed)
    }

    /// Builds a fixture from the cameras and exposures of the first two
    /// training views of `dataset`. Targets are rendered by a random
    /// `n_gaussians` model and the checked model is a small perturbation of
    /// it, which keeps the loss small relative to its gradients and so
    /// keeps rounding noise in the differences low.
    pub fn from_dataset(dataset: &Dataset, n_gaussians: usize, seed: u64) -> Result<Self> {
        let views: Vec<ViewSet> = dataset.split(Split::Train).take(2).cloned().collect();
        if views.len() < 2 {
            return Err(Error::invalid("gradient check needs two training views"));
        }
        let picks: Vec<(usize, f64)> = views
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let r = if k == 0 { v.records.last() } else { v.records.first() };
                (k, r.expect("views carry records").exposure_t)
            })
            .collect();
        let config = PipelineConfig {
            weights: LossWeights::synthetic(),
            raster: RasterConfig::exact(),
            frozen_mix: false,
            fault: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let teacher = random_model(dataset, n_gaussians, &mut rng)?;
            let model = perturbed(&teacher, FIXTURE_PERTURBATION, &mut rng);
            let fixture = Self {
                model,
                views: rendered_views(&teacher, &views, &config)?,
                picks: picks.clone(),
                config: config.clone(),
            };
            if fixture.is_smooth()? {
                return Ok(fixture);
            }
        }
        Err(Error::invalid("could not find a smooth gradient-check fixture"))
    }

    /// Every Gaussian well inside the frustum with distinct depths, and
    /// every kink at least [`FIXTURE_MARGIN`] away, in every view.
    fn is_smooth(&self) -> Result<bool> {
        let mut pipe = TrainPipeline::new(self.config.clone());
        for s in self.samples() {
            let p = project(&self.model.cloud, &s.view.camera, &self.config.raster);
            if p.splats.len() != self.model.cloud.len() || p.splats.iter().any(|sp| sp.ndc[0].abs() > 1.2 || sp.ndc[1].abs() > 1.2) {
                return Ok(false);
            }
            let mut depths: Vec<f64> = p.splats.iter().map(|sp| sp.depth).collect();
            depths.sort_by(f64::total_cmp);
            if depths.windows(2).any(|d| d[1] - d[0] < 1e-2) {
                return Ok(false);
            }
            pipe.forward(&self.model, s)?;
            if pipe.kink_margin(&self.model).unwrap_or(0.0) < FIXTURE_MARGIN {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn loss(&self, model: &Model) -> Result<f64> {
        loss_value(model, &self.samples(), &self.config)
    }

    pub fn loss_terms(&self, model: &Model) -> Result<Vec<f64>> {
        loss_terms(model, &self.samples(), &self.config)
    }

    pub fn gradients(&self) -> Result<(f64, GradTape)> {
        loss_and_gradients(&self.model, &self.samples(), &self.config)
    }
}

fn random_model(dataset: &Dataset, n: usize, rng: &mut ChaCha8Rng) -> Result<Model> {
    let (lo, hi) = (dataset.bounds_min, dataset.bounds_max);
    let seeds: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for k in 0..3 {
                let c = 0.5 * (lo[k] + hi[k]);
                let r = 0.25 * (hi[k] - lo[k]);
                p[k] = c + rng.random_range(-r..r);
            }
            p
        })
        .collect();
    let mut model = Model::init(&seeds, &InitConfig::default(), rng.random())?;
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    let c = &mut model.cloud;
    for i in 0..n {
        c.log_scale[i] = [0; 3].map(|_| rng.random_range(0.2f64.ln()..0.45f64.ln()));
        let q: [f64; 4] = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        c.rotation[i] = q.map(|v| v / norm);
        c.opacity_logit[i] = rng.random_range(-1.0..1.5);
        c.h_r[i].iter_mut().for_each(|v| *v = normal.sample(rng));
        c.l_a_raw[i] = [0; 3].map(|_| rng.random_range(-0.5..1.0));
    }
    // The training init of the fusion network zeroes most output weights,
    // which leaves gradients too small to difference; use a random one.
    model.tone.f_mix = MlpParams::init(&MIX_DIMS, OutputMap::Sigmoid, 0.0, rng)?;
    // Positive hidden biases keep most units on the unit-slope side of the
    // leaky ReLU; chains of negative units shrink gradients below what
    // central differences resolve at f64.
    for mlp in [&mut model.g, &mut model.phi, &mut model.tone.f_tm, &mut model.tone.f_mix] {
        for l in 0..mlp.layers() - 1 {
            let r = mlp.bias_range(l);
            mlp.params_mut()[r].iter_mut().for_each(|b| *b = rng.random_range(0.2..0.8));
        }
    }
    Ok(model)
}

fn perturbed(model: &Model, std: f64, rng: &mut ChaCha8Rng) -> Model {
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut out = model.clone();
    for id in ParamId::ALL {
        out.params_mut(id).iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    out
}

/// Replaces every target image with the render of `teacher`.
fn rendered_views(teacher: &Model, views: &[ViewSet], config: &PipelineConfig) -> Result<Vec<ViewSet>> {
    let mut pipe = TrainPipeline::new(config.clone());
    let mut out = views.to_vec();
    for set in &mut out {
        for rec in &mut set.records {
            pipe.forward(teacher, Sample { view: rec, unit_gt: None })?;
            let img = pipe.images().ok_or_else(|| Error::invalid("forward saved no images"))?;
            rec.gt_ldr = img.fused.i_ldr.clone();
            rec.gt_hdr = Some(img.i_hdr.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub params: Vec<ParamId>,
    pub step: f64,
    /// Evenly strided subset of at most this many coordinates per array.
    pub max_coords_per_param: Option<usize>,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            params: ParamId::ALL.to_vec(),
            step: GRADCHECK_STEP,
            max_coords_per_param: None,
            fault: None,
        }
    }
}

/// Analytic gradients of the fixture loss against central differences.
pub fn run_gradcheck(fixture: &GradFixture, opts: &GradcheckOptions) -> Result<FdReport> {
    let mut fx = fixture.clone();
    fx.config.fault = opts.fault;
    let (_, tape) = fx.gradients()?;
    let mut coords = Vec::new();
    for &id in &opts.params {
        let all = select_coords(&fx.model, &[id]);
        match opts.max_coords_per_param {
            Some(m) if m > 0 && all.len() > m => {
                let stride = all.len().div_ceil(m);
                coords.extend(all.into_iter().step_by(stride));
            }
            _ => coords.extend(all),
        }
    }
    // Finite differences always use the uncorrupted loss.
    fx.config.fault = None;
    finite_diff_check(|m| fx.loss_terms(m), &fx.model, &tape, &coords, opts.step)
}
