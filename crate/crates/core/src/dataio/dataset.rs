//! Multi-exposure view collections and their on-disk layout: a plain-text
//! `scene.manifest` next to PFM (HDR) and PPM (LDR) images.

use std::fs;
use std::path::Path;

use super::image::ImageBuffer;
use super::pnm::{load_pfm, load_ppm, save_pfm, save_ppm};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::scene::{Camera, ViewRecord};

pub const MANIFEST_NAME: &str = "scene.manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One camera with every exposure available for it.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub id: String,
    pub camera: Camera,
    pub split: Split,
    /// Exposure assigned round-robin at generation time.
    pub nominal_exposure: f64,
    /// Radiance ground truth; evaluation only.
    pub hdr: Option<ImageBuffer>,
    /// One record per exposure, ascending.
    pub records: Vec<ViewRecord>,
}

impl ViewSet {
    pub fn record_at(&self, exposure: f64) -> Option<&ViewRecord> {
        self.records.iter().find(|r| r.exposure_t == exposure)
    }

    /// The unit-exposure record, when present.
    pub fn unit_record(&self) -> Option<&ViewRecord> {
        self.record_at(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub ladder: Vec<f64>,
    /// Region that contains the scene content.
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub views: Vec<ViewSet>,
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

fn parse_list(doc: &KvDoc, key: &str) -> Result<Vec<f64>> {
    let raw: String = doc.require(key)?;
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format("manifest", format!("{key}: bad number `{s}`")))
        })
        .collect()
}

fn parse_fixed<const N: usize>(doc: &KvDoc, key: &str) -> Result<[f64; N]> {
    let v = parse_list(doc, key)?;
    v.try_into()
        .map_err(|v: Vec<f64>| Error::format("manifest", format!("{key}: expected {N} values, got {}", v.len())))
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ViewSet> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn view(&self, id: &str) -> Option<&ViewSet> {
        self.views.iter().find(|v| v.id == id)
    }

    /// Writes the manifest and every image into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut doc = KvDoc::new();
        doc.set("scene.ladder", join(&self.ladder));
        doc.set("scene.bounds_min", join(&self.bounds_min));
        doc.set("scene.bounds_max", join(&self.bounds_max));
        doc.set("scene.views", self.views.len());
        for (k, v) in self.views.iter().enumerate() {
            let sec = format!("view{k:03}");
            let c = &v.camera;
            doc.set(format!("{sec}.id"), &v.id);
            doc.set(format!("{sec}.split"), v.split.name());
            doc.set(format!("{sec}.nominal_exposure"), v.nominal_exposure);
            doc.set(format!("{sec}.size"), format!("{},{}", c.width, c.height));
            doc.set(format!("{sec}.intrinsics"), join(&[c.fx, c.fy, c.cx, c.cy]));
            doc.set(format!("{sec}.clip"), join(&[c.near, c.far]));
            let w: Vec<f64> = c.world_to_cam.iter().flatten().copied().collect();
            doc.set(format!("{sec}.world_to_cam"), join(&w));
            if let Some(hdr) = &v.hdr {
                let name = format!("{}_hdr.pfm", v.id);
                save_pfm(hdr, &dir.join(&name))?;
                doc.set(format!("{sec}.hdr"), name);
            }
            let exposures: Vec<f64> = v.records.iter().map(|r| r.exposure_t).collect();
            doc.set(format!("{sec}.exposures"), join(&exposures));
            let mut files = Vec::new();
            for (j, r) in v.records.iter().enumerate() {
                let name = format!("{}_e{j}.ppm", v.id);
                save_ppm(&r.gt_ldr, &dir.join(&name))?;
                files.push(name);
            }
            doc.set(format!("{sec}.ldr"), files.join(","));
        }
        doc.write(&dir.join(MANIFEST_NAME))
    }

    /// Reads a directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let doc = KvDoc::read(&dir.join(MANIFEST_NAME))?;
        let ladder = parse_list(&doc, "scene.ladder")?;
        let bounds_min = parse_fixed::<3>(&doc, "scene.bounds_min")?;
        let bounds_max = parse_fixed::<3>(&doc, "scene.bounds_max")?;
        let count: usize = doc.require("scene.views")?;
        let mut views = Vec::with_capacity(count);
        for k in 0..count {
            let sec = format!("view{k:03}");
            let key = |f: &str| format!("{sec}.{f}");
            let id: String = doc.require(&key("id"))?;
            let split_name: String = doc.require(&key("split"))?;
            let split = Split::parse(&split_name)
                .ok_or_else(|| Error::format("manifest", format!("{id}: unknown split `{split_name}`")))?;
            let size = parse_fixed::<2>(&doc, &key("size"))?;
            let [fx, fy, cx, cy] = parse_fixed::<4>(&doc, &key("intrinsics"))?;
            let [near, far] = parse_fixed::<2>(&doc, &key("clip"))?;
            let w = parse_fixed::<16>(&doc, &key("world_to_cam"))?;
            let mut world_to_cam = [[0.0; 4]; 4];
            for (i, row) in world_to_cam.iter_mut().enumerate() {
                row.copy_from_slice(&w[i * 4..i * 4 + 4]);
            }
            let camera = Camera {
                width: size[0] as usize,
                height: size[1] as usize,
                fx,
                fy,
                cx,
                cy,
                world_to_cam,
                near,
                far,
            };
            camera.validate()?;
            let hdr = match doc.get(&key("hdr")) {
                Some(name) => Some(load_pfm(&dir.join(name))?),
                None => None,
            };
            let exposures = parse_list(&doc, &key("exposures"))?;
            let files: String = doc.require(&key("ldr"))?;
            let files: Vec<&str> = files.split(',').map(str::trim).collect();
            if files.len() != exposures.len() {
                return Err(Error::format("manifest", format!("{id}: {} exposures but {} images", exposures.len(), files.len())));
            }
            let records = exposures
                .iter()
                .zip(&files)
                .map(|(&t, f)| ViewRecord::new(format!("{id}@{t}"), camera.clone(), t, load_ppm(&dir.join(f))?))
                .collect::<Result<Vec<_>>>()?;
            views.push(ViewSet {
                id,
                camera,
                split,
                nominal_exposure: doc.parse_opt(&key("nominal_exposure"))?.unwrap_or(1.0),
                hdr,
                records,
            });
        }
        Ok(Self {
            ladder,
            bounds_min,
            bounds_max,
            views,
        })
    }
}
