//! Held-out evaluation: LDR quality at trained and novel exposures, and
//! µ-law compressed HDR quality against the radiance ground truth.

use crate::dataio::synthetic::TRAIN_EXPOSURE_SLOTS;
use crate::dataio::{psnr, ssim, Dataset, Split};
use crate::error::Result;
use crate::model::Model;
use crate::pipeline::render_view;
use crate::raster::RasterConfig;
use crate::tonemap::{mu_law, DEFAULT_MU};

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub view: String,
    /// Exposure for LDR rows; `None` for HDR rows.
    pub exposure: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
}

/// Scores grouped by protocol: LDR at exposures used for training views
/// (`ldr_oe`), LDR at the remaining exposures (`ldr_ne`), and HDR.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalTable {
    pub ldr_oe: Vec<Score>,
    pub ldr_ne: Vec<Score>,
    pub hdr: Vec<Score>,
}

/// Mean PSNR and SSIM of a group; NaN for an empty group.
pub fn mean_scores(rows: &[Score]) -> (f64, f64) {
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    )
}

impl EvalTable {
    /// Mean LDR PSNR over both exposure groups.
    pub fn ldr_psnr(&self) -> f64 {
        let all: Vec<Score> = self.ldr_oe.iter().chain(&self.ldr_ne).cloned().collect();
        mean_scores(&all).0
    }

    pub fn hdr_psnr(&self) -> f64 {
        mean_scores(&self.hdr).0
    }
}

/// Whether `t` is one of the exposures seen by training views.
pub fn is_trained_exposure(dataset: &Dataset, t: f64) -> bool {
    TRAIN_EXPOSURE_SLOTS
        .iter()
        .any(|&k| dataset.ladder.get(k).is_some_and(|&l| l == t))
}

/// Renders every record of every view in `split` and scores it.
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split, raster: &RasterConfig) -> Result<EvalTable> {
    let mut table = EvalTable::default();
    for view in dataset.split(split) {
        let mut hdr_done = false;
        for rec in &view.records {
            let out = render_view(model, &view.camera, rec.exposure_t, raster)?;
            let pred = &out.fused.i_ldr;
            let score = Score {
                view: view.id.clone(),
                exposure: Some(rec.exposure_t),
                psnr: psnr(pred, &rec.gt_ldr)?,
                ssim: ssim(pred, &rec.gt_ldr)?,
            };
            if is_trained_exposure(dataset, rec.exposure_t) {
                table.ldr_oe.push(score);
            } else {
                table.ldr_ne.push(score);
            }
            if let (false, Some(gt)) = (hdr_done, &view.hdr) {
                let a = mu_law(&out.i_hdr, DEFAULT_MU)?;
                let b = mu_law(gt, DEFAULT_MU)?;
                table.hdr.push(Score {
                    view: view.id.clone(),
                    exposure: None,
                    psnr: psnr(&a, &b)?,
                    ssim: ssim(&a, &b)?,
                });
                hdr_done = true;
            }
        }
    }
    Ok(table)
}
