//! The training objective for one view: both branches, tone mapping,
//! cross fusion, losses, and the reverse pass that fills a [`GradTape`].

use crate::dataio::ImageBuffer;
use crate::error::{Error, Result};
use crate::grad::GradTape;
use crate::losses::{mse, mse_backward, total_loss, ConsistencyCache, ConsistencyLoss, LossBreakdown, LossWeights, ReconstructionCache, ReconstructionLoss};
use crate::model::{Model, ParamId};
use crate::radiance::{branch_backward, branch_forward, render_branches, BranchForward, BranchMode};
use crate::raster::RasterConfig;
use crate::scene::{Camera, ViewRecord};
use crate::tonemap::{cross_fuse, cross_fuse_backward, cross_fuse_saved, tone_map_backward, tone_map_pair, tone_map_saved, FuseCache, FusedOutputs, ToneMapCache};

/// Deliberate gradient corruption used to prove that gradient checks catch
/// a broken VJP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Multiplies the gradient of one parameter array by a factor.
    ScaleGradient(ParamId, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub weights: LossWeights,
    pub raster: RasterConfig,
    /// No gradient reaches the fusion network.
    pub frozen_mix: bool,
    pub fault: Option<Fault>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            raster: RasterConfig::default(),
            frozen_mix: false,
            fault: None,
        }
    }
}

/// One supervised view: the sampled exposure image plus the unit-exposure
/// image of the same camera when the training set has one.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub view: &'a ViewRecord,
    pub unit_gt: Option<&'a ImageBuffer>,
}

/// Images produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardImages {
    pub i_hdr: ImageBuffer,
    pub i_hdr_scaled: ImageBuffer,
    pub i_hdr_relit: ImageBuffer,
    pub i_glo: ImageBuffer,
    pub i_loc: ImageBuffer,
    pub i_glo_hat: ImageBuffer,
    pub i_loc_hat: ImageBuffer,
    pub fused: FusedOutputs,
}

struct UnitSaved {
    gt: ImageBuffer,
    tone: ToneMapCache,
    fuse: FuseCache,
    pred: ImageBuffer,
}

struct Saved {
    view_exposure: f64,
    gt: ImageBuffer,
    branches: BranchForward,
    tone_ie: ToneMapCache,
    tone_gi: Option<ToneMapCache>,
    fuse: FuseCache,
    images: ForwardImages,
    rec: ReconstructionCache,
    cons: Option<ConsistencyCache>,
    unit: Option<UnitSaved>,
}

/// Forward/backward driver. `forward` saves activations that `backprop`
/// consumes.
pub struct TrainPipeline {
    pub config: PipelineConfig,
    rec: ReconstructionLoss,
    cons: ConsistencyLoss,
    saved: Option<Saved>,
}

impl TrainPipeline {
    pub fn new(config: PipelineConfig) -> Self {
        let rec = ReconstructionLoss::new(config.weights.gamma);
        let cons = ConsistencyLoss::from_weights(&config.weights);
        Self {
            config,
            rec,
            cons,
            saved: None,
        }
    }

    /// Images of the last forward pass, if it has not been consumed.
    pub fn images(&self) -> Option<&ForwardImages> {
        self.saved.as_ref().map(|s| &s.images)
    }

    /// Last-forward per-splat virtual illumination, keyed by Gaussian index.
    pub fn relit_ambient(&self) -> Option<Vec<(usize, [f64; 3])>> {
        self.saved.as_ref().map(|s| {
            s.branches
                .proj
                .splats
                .iter()
                .zip(&s.branches.relit_ambient)
                .map(|(sp, l)| (sp.index, *l))
                .collect()
        })
    }

    /// Distance of the saved forward pass from the nearest non-smooth point
    /// (leaky-ReLU kinks and the absolute value in the consistency loss).
    pub fn kink_margin(&self, model: &Model) -> Option<f64> {
        let s = self.saved.as_ref()?;
        let mut m = s.branches.kink_margin(&model.g, &model.phi);
        m = m.min(s.tone_ie.kink_margin(&model.tone.f_tm));
        if let Some(t) = &s.tone_gi {
            m = m.min(t.kink_margin(&model.tone.f_tm));
        }
        m = m.min(s.fuse.kink_margin(&model.tone.f_mix));
        if let Some(c) = &s.cons {
            m = m.min(c.kink_margin());
        }
        if let Some(u) = &s.unit {
            m = m.min(u.tone.kink_margin(&model.tone.f_tm)).min(u.fuse.kink_margin(&model.tone.f_mix));
        }
        Some(m)
    }

    pub fn forward(&mut self, model: &Model, sample: Sample<'_>) -> Result<LossBreakdown> {
        self.saved = None;
        let view = sample.view;
        let w = &self.config.weights;
        let cfg = &self.config.raster;
        let t = view.exposure_t;
        let dual = model.branch == BranchMode::Dual;
        let branches = branch_forward(&model.cloud, &view.camera, view.lighting_l, &model.g, &model.phi, model.branch, cfg);
        let i_hdr_scaled = branches.i_hdr.scaled(t);
        let i_hdr_relit = if dual { branches.i_relit.clone() } else { i_hdr_scaled.clone() };

        let f_tm = &model.tone.f_tm;
        let (i_glo, i_loc, tone_ie) = tone_map_saved(&i_hdr_scaled, f_tm);
        let (i_glo_hat, i_loc_hat, tone_gi) = if dual {
            let (g, l, c) = tone_map_saved(&i_hdr_relit, f_tm);
            (g, l, Some(c))
        } else {
            (i_glo.clone(), i_loc.clone(), None)
        };
        let (fused, fuse) = cross_fuse_saved(&i_glo, &i_loc_hat, &i_loc, &model.tone.f_mix, model.tone.fusion)?;
        let gt = &view.gt_ldr;
        let (rec, rec_cache) = self.rec.forward(&[&fused.i_ldr, &fused.i_ig, &fused.i_gi], gt)?;
        let (cons, cons_cache) = if dual {
            let (v, c) = self.cons.forward(&i_hdr_scaled, &i_hdr_relit)?;
            (v, Some(c))
        } else {
            (0.0, None)
        };
        let (unit, unit_saved) = match sample.unit_gt {
            Some(ugt) if w.lambda3 > 0.0 => {
                let (g1, l1, tone) = tone_map_saved(&branches.i_hdr, f_tm);
                let (f1, fuse1) = cross_fuse_saved(&g1, &l1, &l1, &model.tone.f_mix, model.tone.fusion)?;
                f1.i_ldr.ensure_same_shape(ugt, "unit-exposure reference")?;
                let v = mse(&f1.i_ldr, ugt);
                (
                    v,
                    Some(UnitSaved {
                        gt: ugt.clone(),
                        tone,
                        fuse: fuse1,
                        pred: f1.i_ldr,
                    }),
                )
            }
            _ => (0.0, None),
        };
        let breakdown = total_loss(rec, cons, unit, w);
        if !breakdown.total.is_finite() {
            return Err(non_finite_diagnostic(model, view, &breakdown, &fused));
        }
        let i_hdr = branches.i_hdr.clone();
        self.saved = Some(Saved {
            view_exposure: t,
            gt: gt.clone(),
            branches,
            tone_ie,
            tone_gi,
            fuse,
            images: ForwardImages {
                i_hdr,
                i_hdr_scaled,
                i_hdr_relit,
                i_glo,
                i_loc,
                i_glo_hat,
                i_loc_hat,
                fused,
            },
            rec: rec_cache,
            cons: cons_cache,
            unit: unit_saved,
        });
        Ok(breakdown)
    }

    /// Reverse pass for the saved forward, scaling the loss by `cotangent`.
    /// Consumes the saved activations.
    pub fn backprop(&mut self, model: &Model, view: &ViewRecord, cotangent: f64) -> Result<GradTape> {
        let s = self.saved.take().ok_or(Error::MissingActivation)?;
        let w = self.config.weights;
        let dual = model.branch == BranchMode::Dual;
        let mut tape = GradTape::for_model(model);
        let mut tm_grad = vec![0.0; model.tone.f_tm.num_params()];
        let mut mix_grad = vec![0.0; model.tone.f_mix.num_params()];
        let frozen = self.config.frozen_mix;

        let f = &s.images.fused;
        let d_preds = self.rec.backward(&[&f.i_ldr, &f.i_ig, &f.i_gi], &s.gt, &s.rec, w.lambda1 * cotangent);
        let (d_glo, d_loc_hat, mut d_loc) = cross_fuse_backward(
            &s.fuse,
            &model.tone.f_mix,
            model.tone.fusion,
            &d_preds[0],
            &d_preds[1],
            &d_preds[2],
            (!frozen).then_some(mix_grad.as_mut_slice()),
        );
        let mut d_relit = None;
        if dual {
            let zero = vec![0.0; d_loc_hat.len()];
            let tone_gi = s.tone_gi.as_ref().expect("dual forward saves both tone maps");
            d_relit = Some(tone_map_backward(tone_gi, &model.tone.f_tm, &zero, &d_loc_hat, Some(&mut tm_grad)));
        } else {
            d_loc.iter_mut().zip(&d_loc_hat).for_each(|(a, b)| *a += b);
        }
        let mut d_scaled = tone_map_backward(&s.tone_ie, &model.tone.f_tm, &d_glo, &d_loc, Some(&mut tm_grad));
        if let (Some(cc), Some(dr)) = (&s.cons, d_relit.as_mut()) {
            let (ga, gb) = self.cons.backward(cc, w.lambda2 * cotangent);
            d_scaled.iter_mut().zip(&ga).for_each(|(a, b)| *a += b);
            dr.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
        }
        let mut d_hdr: Vec<f64> = d_scaled.iter().map(|v| v * s.view_exposure).collect();
        if let Some(u) = &s.unit {
            let d_pred = mse_backward(&u.pred, &u.gt, w.lambda3 * cotangent);
            let zero = vec![0.0; d_pred.len()];
            let (dg, dl_a, dl_b) = cross_fuse_backward(
                &u.fuse,
                &model.tone.f_mix,
                model.tone.fusion,
                &d_pred,
                &zero,
                &zero,
                (!frozen).then_some(mix_grad.as_mut_slice()),
            );
            let dl: Vec<f64> = dl_a.iter().zip(&dl_b).map(|(a, b)| a + b).collect();
            let d1 = tone_map_backward(&u.tone, &model.tone.f_tm, &dg, &dl, Some(&mut tm_grad));
            d_hdr.iter_mut().zip(&d1).for_each(|(a, b)| *a += b);
        }

        let bg = branch_backward(
            &s.branches,
            &model.cloud,
            &view.camera,
            &model.g,
            &model.phi,
            &d_hdr,
            d_relit.as_deref(),
            &self.config.raster,
        );
        tape.add(ParamId::Mu, bg.geometry.mu.as_flattened());
        tape.add(ParamId::LogScale, bg.geometry.log_scale.as_flattened());
        tape.add(ParamId::Rotation, bg.geometry.rotation.as_flattened());
        tape.add(ParamId::Opacity, &bg.geometry.opacity_logit);
        tape.add(ParamId::Reflectance, bg.h_r.as_flattened());
        tape.add(ParamId::Ambient, bg.l_a_raw.as_flattened());
        tape.add(ParamId::Composer, &bg.g);
        tape.add(ParamId::Modulator, &bg.phi);
        tape.add(ParamId::ToneMap, &tm_grad);
        tape.add(ParamId::Mix, &mix_grad);
        for (i, seen) in bg.contributed.iter().enumerate() {
            if *seen {
                let [x, y] = bg.geometry.ndc[i];
                tape.record_ndc(i, (x * x + y * y).sqrt());
            }
        }
        if let Some(Fault::ScaleGradient(id, k)) = self.config.fault {
            tape.grad_mut(id).iter_mut().for_each(|v| *v *= k);
        }
        if let Some((id, k)) = tape.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient {id}[{k}] for view {}", view.id)));
        }
        Ok(tape)
    }
}

fn non_finite_diagnostic(model: &Model, view: &ViewRecord, b: &LossBreakdown, fused: &FusedOutputs) -> Error {
    let pixel = fused
        .i_ldr
        .data()
        .iter()
        .position(|v| !v.is_finite())
        .map(|k| {
            let p = k / 3;
            format!("pixel ({}, {})", p % fused.i_ldr.width(), p / fused.i_ldr.width())
        });
    let gaussian = ParamId::ALL.iter().filter(|p| p.is_gaussian()).find_map(|&id| {
        model.params(id)
            .iter()
            .position(|v| !v.is_finite())
            .map(|k| format!("Gaussian {} ({id})", k / id.width()))
    });
    Error::NonFinite(format!(
        "loss for view {} (rec {}, cons {}, unit {}); first bad {}",
        view.id,
        b.rec,
        b.cons,
        b.unit,
        pixel.or(gaussian).unwrap_or_else(|| "value not located".into())
    ))
}

/// Every intermediate image for `camera` at exposure `t` (lighting level
/// `t`), without losses.
pub fn render_view(model: &Model, camera: &Camera, t: f64, raster: &RasterConfig) -> Result<ForwardImages> {
    let b = render_branches(&model.cloud, camera, t, t, &model.g, &model.phi, model.branch, raster)?;
    let f_tm = &model.tone.f_tm;
    let (i_glo, i_loc) = tone_map_pair(&b.i_hdr_scaled, f_tm);
    let (i_glo_hat, i_loc_hat) = if model.branch == BranchMode::Dual {
        tone_map_pair(&b.i_hdr_relit, f_tm)
    } else {
        (i_glo.clone(), i_loc.clone())
    };
    let fused = cross_fuse(&i_glo, &i_loc_hat, &i_loc, &model.tone.f_mix, model.tone.fusion)?;
    Ok(ForwardImages {
        i_hdr: b.i_hdr,
        i_hdr_scaled: b.i_hdr_scaled,
        i_hdr_relit: b.i_hdr_relit,
        i_glo,
        i_loc,
        i_glo_hat,
        i_loc_hat,
        fused,
    })
}

/// Summed total loss over several samples (no gradients).
pub fn loss_value(model: &Model, samples: &[Sample<'_>], config: &PipelineConfig) -> Result<f64> {
    Ok(loss_terms(model, samples, config)?.iter().sum())
}

/// Weighted reconstruction, consistency and unit terms of every sample, in
/// sample order. They sum to [`loss_value`] up to rounding.
pub fn loss_terms(model: &Model, samples: &[Sample<'_>], config: &PipelineConfig) -> Result<Vec<f64>> {
    let mut p = TrainPipeline::new(config.clone());
    let w = &config.weights;
    let mut terms = Vec::with_capacity(3 * samples.len());
    for s in samples {
        let b = p.forward(model, *s)?;
        terms.extend([w.lambda1 * b.rec, w.lambda2 * b.cons, w.lambda3 * b.unit]);
    }
    Ok(terms)
}

/// Summed loss and merged gradients over several samples.
pub fn loss_and_gradients(model: &Model, samples: &[Sample<'_>], config: &PipelineConfig) -> Result<(f64, GradTape)> {
    let mut p = TrainPipeline::new(config.clone());
    let mut tape = GradTape::for_model(model);
    let mut total = 0.0;
    for s in samples {
        total += p.forward(model, *s)?.total;
        tape.merge(&p.backprop(model, s.view, 1.0)?);
    }
    Ok((total, tape))
}
