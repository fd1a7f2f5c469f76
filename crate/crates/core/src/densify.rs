//! Adaptive density control with illumination-guided gradient scaling.
//!
//! Per-Gaussian screen-space gradient norms are averaged over the views in
//! which the Gaussian contributed. That average is multiplied by
//! `s_a = s * sigmoid(dev) + 1`, where `dev` is how far the Gaussian's
//! relit ambient level drifted from its own, and compared with `tau_p`.
//! Gaussians whose colors saturate receive little gradient, yet tend to be
//! relit the most, so the factor compensates. Setting `s = 0` gives the
//! plain threshold (`s_a = 1`).

use std::io::Write;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grad::GradTape;
use crate::linalg::{quat_to_mat, sigmoid};
use crate::model::Model;
use crate::scene::{GaussianCloud, LA_DIM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyConfig {
    /// Threshold on the scaled average gradient.
    pub tau_p: f64,
    /// Strength of the illumination-guided scaling.
    pub s: f64,
    /// Clone below, split above this fraction of the scene extent (largest
    /// world-space scale).
    pub scale_fraction: f64,
    pub prune_opacity: f64,
    pub split_factor: f64,
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// Densification is skipped when it would exceed this many Gaussians.
    pub max_gaussians: usize,
    /// Clamp opacities down to 0.01 every this many iterations inside the
    /// window; 0 disables.
    pub opacity_reset_interval: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            tau_p: 2e-4,
            s: 1.0,
            scale_fraction: 0.01,
            prune_opacity: 0.005,
            split_factor: 1.6,
            interval: 50,
            start: 200,
            stop: 1500,
            max_gaussians: 2000,
            opacity_reset_interval: 0,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_p > 0.0
            && self.s >= 0.0
            && self.s.is_finite()
            && self.scale_fraction > 0.0
            && (0.0..1.0).contains(&self.prune_opacity)
            && self.split_factor > 1.0
            && self.interval > 0
            && self.start <= self.stop;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid densification settings {self:?}")))
        }
    }

    /// Whether densification runs after iteration `iter` (1-based).
    pub fn due(&self, iter: usize) -> bool {
        iter >= self.start && iter <= self.stop && iter % self.interval == 0
    }
}

/// `s * sigmoid(dev) + 1`, with `dev` the mean absolute componentwise
/// difference of the two illumination vectors.
pub fn scale_factor(l_a: &[f64; LA_DIM], l_hat: &[f64; LA_DIM], s: f64) -> f64 {
    s * sigmoid(deviation(l_a, l_hat)) + 1.0
}

pub fn deviation(l_a: &[f64; LA_DIM], l_hat: &[f64; LA_DIM]) -> f64 {
    l_a.iter().zip(l_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / LA_DIM as f64
}

/// Running screen-space gradient statistics for every Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyState {
    pub grad_accum: Vec<f64>,
    pub visible_count: Vec<u32>,
    /// Relit ambient level from the most recent pass that saw the Gaussian.
    pub last_l_hat: Vec<Option<[f64; LA_DIM]>>,
    pub config: DensifyConfig,
}

/// What one densification pass did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// Growth would have exceeded the cap.
    pub skipped: bool,
    /// For every Gaussian after the pass, the index it carries optimizer
    /// state over from (`None` when it starts fresh).
    pub sources: Vec<Option<usize>>,
}

/// One row of the per-Gaussian statistics dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStat {
    pub index: usize,
    pub avg_grad: f64,
    pub deviation: f64,
    pub s_a: f64,
    pub densified: bool,
}

impl DensifyState {
    pub fn new(n: usize, config: DensifyConfig) -> Self {
        Self {
            grad_accum: vec![0.0; n],
            visible_count: vec![0; n],
            last_l_hat: vec![None; n],
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.grad_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_accum.is_empty()
    }

    /// Adds the screen-space gradient norms recorded on `tape`.
    pub fn accumulate(&mut self, tape: &GradTape) {
        for i in 0..self.len() {
            for &g in tape.ndc_samples(i) {
                self.grad_accum[i] += g;
                self.visible_count[i] += 1;
            }
        }
    }

    pub fn record_relit(&mut self, relit: &[(usize, [f64; LA_DIM])]) {
        for &(i, l) in relit {
            self.last_l_hat[i] = Some(l);
        }
    }

    pub fn avg_grad(&self, i: usize) -> f64 {
        match self.visible_count[i] {
            0 => 0.0,
            m => self.grad_accum[i] / m as f64,
        }
    }

    /// Illumination deviation of Gaussian `i`; zero before any relit pass.
    pub fn deviation(&self, i: usize, cloud: &GaussianCloud) -> f64 {
        self.last_l_hat[i].map_or(0.0, |h| deviation(&cloud.ambient(i), &h))
    }

    pub fn s_a(&self, i: usize, cloud: &GaussianCloud) -> f64 {
        self.config.s * sigmoid(self.deviation(i, cloud)) + 1.0
    }

    /// `s_a * avg_grad > tau_p`; never true for a Gaussian that has not
    /// been seen.
    pub fn should_densify(&self, i: usize, cloud: &GaussianCloud) -> bool {
        self.visible_count[i] >= 1 && self.s_a(i, cloud) * self.avg_grad(i) > self.config.tau_p
    }

    pub fn stats(&self, cloud: &GaussianCloud) -> Vec<GaussianStat> {
        (0..self.len())
            .map(|i| GaussianStat {
                index: i,
                avg_grad: self.avg_grad(i),
                deviation: self.deviation(i, cloud),
                s_a: self.s_a(i, cloud),
                densified: self.should_densify(i, cloud),
            })
            .collect()
    }

    pub fn reset_accumulators(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.visible_count.iter_mut().for_each(|v| *v = 0);
    }
}

/// Offset drawn from the Gaussian's own distribution.
fn sample_offset<R: Rng>(cloud: &GaussianCloud, i: usize, rng: &mut R) -> [f64; 3] {
    let q = cloud.rotation[i];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let r = quat_to_mat(&q.map(|v| v / n));
    let s = cloud.scales(i);
    let z: [f64; 3] = [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal));
    [0, 1, 2].map(|row| (0..3).map(|k| r[row][k] * s[k] * z[k]).sum())
}

/// Clones, splits and prunes the cloud of `model` in place, then resets the
/// gradient accumulators. Flagged Gaussians whose largest scale is below
/// `scale_fraction * extent` get a copy placed at a sample from the original;
/// larger ones are replaced by two samples with scales divided by
/// `split_factor`. Gaussians with opacity below `prune_opacity` are removed.
/// Children keep reflectance, ambient level and opacity of their parent.
pub fn densify_and_prune<R: Rng>(model: &mut Model, state: &mut DensifyState, extent: f64, rng: &mut R) -> DensifyOutcome {
    let cfg = state.config;
    let cloud = &model.cloud;
    let n = cloud.len();
    let flagged: Vec<bool> = (0..n).map(|i| state.should_densify(i, cloud)).collect();
    let keep: Vec<bool> = (0..n).map(|i| cloud.alpha(i) >= cfg.prune_opacity).collect();
    let growth = (0..n).filter(|&i| flagged[i] && keep[i]).count();
    let kept = keep.iter().filter(|k| **k).count();
    let mut out = DensifyOutcome::default();
    let densify = if kept + growth > cfg.max_gaussians {
        warn!("densification skipped: {} Gaussians would exceed the cap of {}", kept + growth, cfg.max_gaussians);
        out.skipped = true;
        false
    } else {
        true
    };

    let threshold = cfg.scale_fraction * extent;
    let shrink = cfg.split_factor.ln();
    let mut next = GaussianCloud::default();
    let mut parents = Vec::with_capacity(kept + growth);
    let mut children = GaussianCloud::default();
    let mut child_parents = Vec::new();
    for i in 0..n {
        if !keep[i] {
            out.pruned += 1;
            continue;
        }
        push_copy(&mut next, cloud, i);
        let slot = next.len() - 1;
        parents.push(i);
        out.sources.push(Some(i));
        if !(densify && flagged[i]) {
            continue;
        }
        let max_scale = cloud.scales(i).into_iter().fold(0.0, f64::max);
        push_copy(&mut children, cloud, i);
        let c = children.len() - 1;
        child_parents.push(i);
        let off = sample_offset(cloud, i, rng);
        children.mu[c] = [0, 1, 2].map(|k| cloud.mu[i][k] + off[k]);
        if max_scale < threshold {
            out.cloned += 1;
        } else {
            out.split += 1;
            let off = sample_offset(cloud, i, rng);
            next.mu[slot] = [0, 1, 2].map(|k| cloud.mu[i][k] + off[k]);
            next.log_scale[slot] = cloud.log_scale[i].map(|v| v - shrink);
            children.log_scale[c] = cloud.log_scale[i].map(|v| v - shrink);
            out.sources[slot] = None;
        }
    }
    for c in 0..children.len() {
        push_copy(&mut next, &children, c);
        out.sources.push(None);
    }
    parents.extend(child_parents);

    let last: Vec<Option<[f64; LA_DIM]>> = parents.iter().map(|&p| state.last_l_hat[p]).collect();
    model.cloud = next;
    *state = DensifyState::new(model.cloud.len(), cfg);
    state.last_l_hat = last;
    out
}

fn push_copy(dst: &mut GaussianCloud, src: &GaussianCloud, i: usize) {
    dst.mu.push(src.mu[i]);
    dst.log_scale.push(src.log_scale[i]);
    dst.rotation.push(src.rotation[i]);
    dst.opacity_logit.push(src.opacity_logit[i]);
    dst.h_r.push(src.h_r[i]);
    dst.l_a_raw.push(src.l_a_raw[i]);
}

pub const STATS_HEADER: &str = "index,avg_grad,deviation,s_a,densified";

/// Writes the statistics CSV with 17 significant digits per float.
pub fn write_stats_csv<W: Write>(mut out: W, rows: &[GaussianStat]) -> std::io::Result<()> {
    writeln!(out, "{STATS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{}",
            r.index, r.avg_grad, r.deviation, r.s_a, r.densified as u8
        )?;
    }
    Ok(())
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for &j in &idx[k..=e] {
            r[j] = avg;
        }
        k = e + 1;
    }
    r
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman correlation between average gradient and reciprocal deviation
/// over the Gaussians that were seen at least once.
pub fn starvation_correlation(rows: &[GaussianStat], state: &DensifyState) -> Option<f64> {
    let seen: Vec<&GaussianStat> = rows.iter().filter(|r| state.visible_count[r.index] > 0).collect();
    let g: Vec<f64> = seen.iter().map(|r| r.avg_grad).collect();
    let inv: Vec<f64> = seen.iter().map(|r| 1.0 / r.deviation).collect();
    spearman(&g, &inv)
}
