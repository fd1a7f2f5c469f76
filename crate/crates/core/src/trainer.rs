//! The optimization loop: view and exposure sampling, the joint objective,
//! Adam with scheduled learning rates, staged fusion-network freezing, and
//! periodic densification and evaluation.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Dataset, Split};
use crate::densify::{densify_and_prune, DensifyConfig, DensifyOutcome, DensifyState};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::grad::GradTape;
use crate::kv::KvDoc;
use crate::linalg::logit;
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{Model, ParamId};
use crate::optim::{cosine_lr, exponential_lr, Adam};
use crate::pipeline::{PipelineConfig, Sample, TrainPipeline};
use crate::radiance::BranchMode;
use crate::raster::RasterConfig;
use crate::scene::{InitConfig, ViewRecord};
use crate::tonemap::FusionMode;

/// How training views pick their exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExposureMode {
    /// Uniform draw over the view's exposures at every iteration.
    #[default]
    Exp3,
    /// One exposure per view, drawn once and kept.
    Exp1,
}

impl ExposureMode {
    pub fn name(self) -> &'static str {
        match self {
            ExposureMode::Exp3 => "exp3",
            ExposureMode::Exp1 => "exp1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exp3" => Some(ExposureMode::Exp3),
            "exp1" => Some(ExposureMode::Exp1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub lr_g: f64,
    pub lr_phi: f64,
    /// Shared by the tone-mapping and fusion networks.
    pub lr_tonemapper: f64,
    /// Position rate at the start and end of training, in units of the
    /// scene extent.
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_scaling: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_reflectance: f64,
    pub lr_ambient: f64,
    /// The fusion network receives no updates before this iteration.
    pub mix_unfreeze_iter: usize,
    pub exposure_mode: ExposureMode,
    pub weights: LossWeights,
    pub densify: DensifyConfig,
    pub rng_seed: u64,
    /// Held-out evaluation period; 0 disables.
    pub eval_interval: usize,
    /// Gaussians placed uniformly in the scene bounds at start.
    pub init_gaussians: usize,
    pub init_opacity: f64,
    pub branch: BranchMode,
    pub fusion: FusionMode,
}

/// Densification threshold for desk scenes. Each Gaussian of a micro-scene
/// covers a large share of the image, so its screen-space gradient runs
/// several times higher than in a full-size capture.
pub const DESK_TAU_P: f64 = 1e-3;
pub const DESK_MAX_GAUSSIANS: usize = 600;

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_iterations(2000)
    }
}

impl TrainConfig {
    /// Defaults for an `n`-iteration run, with the fusion freeze at `n / 3`.
    /// Network learning rates are raised over the 30k-iteration values so
    /// that a 2000-iteration run converges.
    pub fn with_iterations(n: usize) -> Self {
        Self {
            max_iterations: n,
            lr_g: 1e-3,
            lr_phi: 1e-3,
            lr_tonemapper: 3e-3,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_scaling: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 0.05,
            lr_reflectance: 2.5e-3,
            lr_ambient: 2.5e-3,
            mix_unfreeze_iter: n / 3,
            exposure_mode: ExposureMode::Exp3,
            weights: LossWeights::synthetic(),
            densify: DensifyConfig {
                tau_p: DESK_TAU_P,
                max_gaussians: DESK_MAX_GAUSSIANS,
                ..DensifyConfig::default()
            },
            rng_seed: 0,
            eval_interval: 250,
            init_gaussians: 256,
            init_opacity: 0.1,
            branch: BranchMode::Dual,
            fusion: FusionMode::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_g", self.lr_g),
            ("lr_phi", self.lr_phi),
            ("lr_tonemapper", self.lr_tonemapper),
            ("lr_position", self.lr_position),
            ("lr_position_final", self.lr_position_final),
            ("lr_scaling", self.lr_scaling),
            ("lr_rotation", self.lr_rotation),
            ("lr_opacity", self.lr_opacity),
            ("lr_reflectance", self.lr_reflectance),
            ("lr_ambient", self.lr_ambient),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.mix_unfreeze_iter > self.max_iterations {
            return Err(Error::invalid(format!(
                "mix_unfreeze_iter {} exceeds max_iterations {}",
                self.mix_unfreeze_iter, self.max_iterations
            )));
        }
        if self.init_gaussians == 0 {
            return Err(Error::invalid("init_gaussians must be > 0"));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::invalid("init_opacity must lie in (0, 1)"));
        }
        let w = &self.weights;
        if [w.lambda1, w.lambda2, w.lambda3, w.gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        self.densify.validate()
    }

    /// Reads a `key = value` file. Unknown keys are rejected; absent keys
    /// keep their defaults. `train.mix_unfreeze_iter` defaults to a third of
    /// `train.max_iterations`.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        for key in doc.keys() {
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::invalid(format!("unknown config key `{key}`")));
            }
        }
        let n = doc.parse_opt("train.max_iterations")?.unwrap_or(2000);
        let mut c = Self::with_iterations(n);
        macro_rules! read {
            ($key:literal, $field:expr) => {
                if let Some(v) = doc.parse_opt($key)? {
                    $field = v;
                }
            };
        }
        read!("train.lr_g", c.lr_g);
        read!("train.lr_phi", c.lr_phi);
        read!("train.lr_tonemapper", c.lr_tonemapper);
        read!("train.lr_position", c.lr_position);
        read!("train.lr_position_final", c.lr_position_final);
        read!("train.lr_scaling", c.lr_scaling);
        read!("train.lr_rotation", c.lr_rotation);
        read!("train.lr_opacity", c.lr_opacity);
        read!("train.lr_reflectance", c.lr_reflectance);
        read!("train.lr_ambient", c.lr_ambient);
        read!("train.mix_unfreeze_iter", c.mix_unfreeze_iter);
        read!("train.rng_seed", c.rng_seed);
        read!("train.eval_interval", c.eval_interval);
        read!("train.init_gaussians", c.init_gaussians);
        read!("train.init_opacity", c.init_opacity);
        if let Some(m) = doc.get("train.exposure_mode") {
            c.exposure_mode = ExposureMode::parse(m).ok_or_else(|| Error::invalid(format!("unknown exposure mode `{m}`")))?;
        }
        if let Some(m) = doc.get("model.branch") {
            c.branch = BranchMode::parse(m).ok_or_else(|| Error::invalid(format!("unknown branch mode `{m}`")))?;
        }
        if let Some(m) = doc.get("model.fusion") {
            c.fusion = FusionMode::parse(m).ok_or_else(|| Error::invalid(format!("unknown fusion mode `{m}`")))?;
        }
        read!("loss.lambda1", c.weights.lambda1);
        read!("loss.lambda2", c.weights.lambda2);
        read!("loss.lambda3", c.weights.lambda3);
        read!("loss.gamma", c.weights.gamma);
        read!("loss.blur_sigma", c.weights.blur_sigma);
        read!("loss.blur_radius", c.weights.blur_radius);
        read!("densify.tau_p", c.densify.tau_p);
        read!("densify.s", c.densify.s);
        read!("densify.scale_fraction", c.densify.scale_fraction);
        read!("densify.prune_opacity", c.densify.prune_opacity);
        read!("densify.split_factor", c.densify.split_factor);
        read!("densify.interval", c.densify.interval);
        read!("densify.start", c.densify.start);
        read!("densify.stop", c.densify.stop);
        read!("densify.max_gaussians", c.densify.max_gaussians);
        read!("densify.opacity_reset_interval", c.densify.opacity_reset_interval);
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvDoc::read(path)?)
    }

    /// Every setting, under the keys accepted by [`TrainConfig::from_kv`].
    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("train.max_iterations", self.max_iterations);
        d.set("train.lr_g", self.lr_g);
        d.set("train.lr_phi", self.lr_phi);
        d.set("train.lr_tonemapper", self.lr_tonemapper);
        d.set("train.lr_position", self.lr_position);
        d.set("train.lr_position_final", self.lr_position_final);
        d.set("train.lr_scaling", self.lr_scaling);
        d.set("train.lr_rotation", self.lr_rotation);
        d.set("train.lr_opacity", self.lr_opacity);
        d.set("train.lr_reflectance", self.lr_reflectance);
        d.set("train.lr_ambient", self.lr_ambient);
        d.set("train.mix_unfreeze_iter", self.mix_unfreeze_iter);
        d.set("train.exposure_mode", self.exposure_mode.name());
        d.set("train.rng_seed", self.rng_seed);
        d.set("train.eval_interval", self.eval_interval);
        d.set("train.init_gaussians", self.init_gaussians);
        d.set("train.init_opacity", self.init_opacity);
        d.set("model.branch", self.branch.name());
        d.set("model.fusion", self.fusion.name());
        d.set("loss.lambda1", self.weights.lambda1);
        d.set("loss.lambda2", self.weights.lambda2);
        d.set("loss.lambda3", self.weights.lambda3);
        d.set("loss.gamma", self.weights.gamma);
        d.set("loss.blur_sigma", self.weights.blur_sigma);
        d.set("loss.blur_radius", self.weights.blur_radius);
        d.set("densify.tau_p", self.densify.tau_p);
        d.set("densify.s", self.densify.s);
        d.set("densify.scale_fraction", self.densify.scale_fraction);
        d.set("densify.prune_opacity", self.densify.prune_opacity);
        d.set("densify.split_factor", self.densify.split_factor);
        d.set("densify.interval", self.densify.interval);
        d.set("densify.start", self.densify.start);
        d.set("densify.stop", self.densify.stop);
        d.set("densify.max_gaussians", self.densify.max_gaussians);
        d.set("densify.opacity_reset_interval", self.densify.opacity_reset_interval);
        d
    }

    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            weights: self.weights,
            raster: RasterConfig::default(),
            frozen_mix: self.mix_unfreeze_iter > 0,
            fault: None,
        }
    }
}

/// Keys understood by [`TrainConfig::from_kv`].
pub const CONFIG_KEYS: [&str; 35] = [
    "train.max_iterations",
    "train.lr_g",
    "train.lr_phi",
    "train.lr_tonemapper",
    "train.lr_position",
    "train.lr_position_final",
    "train.lr_scaling",
    "train.lr_rotation",
    "train.lr_opacity",
    "train.lr_reflectance",
    "train.lr_ambient",
    "train.mix_unfreeze_iter",
    "train.exposure_mode",
    "train.rng_seed",
    "train.eval_interval",
    "train.init_gaussians",
    "train.init_opacity",
    "model.branch",
    "model.fusion",
    "loss.lambda1",
    "loss.lambda2",
    "loss.lambda3",
    "loss.gamma",
    "loss.blur_sigma",
    "loss.blur_radius",
    "densify.tau_p",
    "densify.s",
    "densify.scale_fraction",
    "densify.prune_opacity",
    "densify.split_factor",
    "densify.interval",
    "densify.start",
    "densify.stop",
    "densify.max_gaussians",
    "densify.opacity_reset_interval",
];

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub psnr_ldr: Option<f64>,
    pub psnr_hdr: Option<f64>,
}

pub const LOG_HEADER: &str = "iter,rec,cons,unit,total,psnr_ldr,psnr_hdr";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub final_gaussians: usize,
    pub wall_time: Duration,
    pub densify_events: Vec<(usize, DensifyOutcome)>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{LOG_HEADER}")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.log {
            let l = &r.loss;
            writeln!(out, "{},{},{},{},{},{},{}", r.iter, l.rec, l.cons, l.unit, l.total, opt(r.psnr_ldr), opt(r.psnr_hdr))?;
        }
        Ok(())
    }

    /// Rows carrying held-out evaluations.
    pub fn evaluations(&self) -> impl Iterator<Item = &LogRow> {
        self.log.iter().filter(|r| r.psnr_ldr.is_some())
    }
}

/// Radius of the sphere around the camera centroid that holds every camera
/// center, padded by 10%.
pub fn camera_extent(dataset: &Dataset) -> f64 {
    let centers: Vec<[f64; 3]> = dataset.views.iter().map(|v| v.camera.center()).collect();
    let n = centers.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in &centers {
        (0..3).for_each(|k| c[k] += p[k] / n);
    }
    let r = centers
        .iter()
        .map(|p| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    1.1 * r.max(1e-6)
}

/// Initial model: `config.init_gaussians` centers uniform in the scene
/// bounds.
pub fn initial_model(dataset: &Dataset, config: &TrainConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let (lo, hi) = (dataset.bounds_min, dataset.bounds_max);
    let seeds: Vec<[f64; 3]> = (0..config.init_gaussians)
        .map(|_| [0, 1, 2].map(|k| if hi[k] > lo[k] { rng.random_range(lo[k]..hi[k]) } else { lo[k] }))
        .collect();
    let init = InitConfig {
        opacity: config.init_opacity,
        ..InitConfig::default()
    };
    let mut model = Model::init(&seeds, &init, rng.random())?;
    model.branch = config.branch;
    model.tone.fusion = config.fusion;
    Ok(model)
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub densify: DensifyState,
    dataset: &'a Dataset,
    adam: Adam,
    pipeline: TrainPipeline,
    rng: ChaCha8Rng,
    train_views: Vec<usize>,
    /// Exposure per training view under [`ExposureMode::Exp1`].
    pinned: Vec<f64>,
    extent: f64,
    iteration: usize,
    report: TrainReport,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        let model = initial_model(dataset, &config)?;
        Self::with_model(config, dataset, model)
    }

    pub fn with_model(config: TrainConfig, dataset: &'a Dataset, model: Model) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let train_views: Vec<usize> = dataset
            .views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.split == Split::Train && !v.records.is_empty())
            .map(|(k, _)| k)
            .collect();
        if train_views.is_empty() {
            return Err(Error::invalid("dataset has no training views"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(1));
        let pinned = train_views
            .iter()
            .map(|&k| {
                let recs = &dataset.views[k].records;
                recs[rng.random_range(0..recs.len())].exposure_t
            })
            .collect();
        Ok(Self {
            densify: DensifyState::new(model.cloud.len(), config.densify),
            adam: Adam::new(&model),
            pipeline: TrainPipeline::new(config.pipeline()),
            extent: camera_extent(dataset),
            config,
            model,
            dataset,
            rng,
            train_views,
            pinned,
            iteration: 0,
            report: TrainReport {
                log: Vec::new(),
                final_gaussians: 0,
                wall_time: Duration::ZERO,
                densify_events: Vec::new(),
            },
            started: Instant::now(),
        })
    }

    /// Iterations executed so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    /// Draws a training view and its exposure; the lighting level equals the
    /// exposure.
    pub fn sample_view(&mut self) -> (usize, &'a ViewRecord) {
        let pick = self.rng.random_range(0..self.train_views.len());
        let set = &self.dataset.views[self.train_views[pick]];
        let rec = match self.config.exposure_mode {
            ExposureMode::Exp3 => &set.records[self.rng.random_range(0..set.records.len())],
            ExposureMode::Exp1 => set.record_at(self.pinned[pick]).expect("pinned exposure exists"),
        };
        (self.train_views[pick], rec)
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let it = self.iteration;
        let frozen = it < self.config.mix_unfreeze_iter;
        self.pipeline.config.frozen_mix = frozen;
        let (view_index, rec) = self.sample_view();
        let set = &self.dataset.views[view_index];
        let sample = Sample {
            view: rec,
            unit_gt: set.unit_record().map(|r| &r.gt_ldr),
        };
        let loss = self.pipeline.forward(&self.model, sample)?;
        if let Some(relit) = self.pipeline.relit_ambient() {
            self.densify.record_relit(&relit);
        }
        let tape = self.pipeline.backprop(&self.model, rec, 1.0)?;
        self.densify.accumulate(&tape);
        self.apply(&tape, frozen);
        self.iteration += 1;
        let iter = self.iteration;

        if self.config.densify.due(iter) {
            let out = densify_and_prune(&mut self.model, &mut self.densify, self.extent, &mut self.rng);
            self.adam.remap_gaussians(&out.sources);
            debug!(
                "iter {iter}: cloned {}, split {}, pruned {}, now {}",
                out.cloned,
                out.split,
                out.pruned,
                self.model.cloud.len()
            );
            self.report.densify_events.push((iter, out));
        }
        let reset = self.config.densify.opacity_reset_interval;
        if reset > 0 && iter % reset == 0 && iter <= self.config.densify.stop {
            let cap = logit(0.01);
            self.model.cloud.opacity_logit.iter_mut().for_each(|o| *o = o.min(cap));
        }

        let mut row = LogRow {
            iter,
            loss,
            psnr_ldr: None,
            psnr_hdr: None,
        };
        let every = self.config.eval_interval;
        if every > 0 && (iter % every == 0 || iter == self.config.max_iterations) {
            let table = evaluate(&self.model, self.dataset, Split::Test, &RasterConfig::default())?;
            row.psnr_ldr = Some(table.ldr_psnr());
            row.psnr_hdr = Some(table.hdr_psnr());
            info!(
                "iter {iter}: loss {:.5}, test LDR {:.2} dB, HDR {:.2} dB, {} Gaussians",
                loss.total,
                table.ldr_psnr(),
                table.hdr_psnr(),
                self.model.cloud.len()
            );
        }
        self.report.log.push(row);
        Ok(loss)
    }

    fn apply(&mut self, tape: &GradTape, frozen: bool) {
        let c = &self.config;
        let (it, max) = (self.iteration, c.max_iterations);
        let rates = [
            (ParamId::Mu, exponential_lr(c.lr_position * self.extent, c.lr_position_final * self.extent, it, max)),
            (ParamId::LogScale, c.lr_scaling),
            (ParamId::Rotation, c.lr_rotation),
            (ParamId::Opacity, c.lr_opacity),
            (ParamId::Reflectance, c.lr_reflectance),
            (ParamId::Ambient, c.lr_ambient),
            (ParamId::Composer, cosine_lr(c.lr_g, it, max)),
            (ParamId::Modulator, cosine_lr(c.lr_phi, it, max)),
            (ParamId::ToneMap, cosine_lr(c.lr_tonemapper, it, max)),
            (ParamId::Mix, cosine_lr(c.lr_tonemapper, it, max)),
        ];
        for (id, lr) in rates {
            if id == ParamId::Mix && frozen {
                continue;
            }
            self.adam.step(&mut self.model, tape, id, lr);
        }
        self.model.cloud.normalize_rotations();
    }

    /// Runs until `max_iterations`.
    pub fn run(mut self) -> Result<(Model, TrainReport)> {
        while self.iteration < self.config.max_iterations {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(mut self) -> (Model, TrainReport) {
        self.report.final_gaussians = self.model.cloud.len();
        self.report.wall_time = self.started.elapsed();
        (self.model, self.report)
    }
}

/// Trains a fresh model on `dataset`.
pub fn train(config: TrainConfig, dataset: &Dataset) -> Result<(Model, TrainReport)> {
    Trainer::new(config, dataset)?.run()
}

/// Gradient statistics of `model` over every training view at every
/// training exposure, as the densification step would see them.
pub fn gradient_statistics(model: &Model, dataset: &Dataset, config: &TrainConfig) -> Result<DensifyState> {
    let mut pipe = TrainPipeline::new(PipelineConfig {
        frozen_mix: true,
        ..config.pipeline()
    });
    let mut state = DensifyState::new(model.cloud.len(), config.densify);
    for set in dataset.split(Split::Train) {
        for rec in &set.records {
            let sample = Sample {
                view: rec,
                unit_gt: set.unit_record().map(|r| &r.gt_ldr),
            };
            pipe.forward(model, sample)?;
            if let Some(relit) = pipe.relit_ambient() {
                state.record_relit(&relit);
            }
            state.accumulate(&pipe.backprop(model, rec, 1.0)?);
        }
    }
    Ok(state)
}
