//! The full learnable state (Gaussians plus the four networks) and its
//! binary checkpoint format.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::mlp::{MlpParams, OutputMap};
use crate::radiance::{init_composer, init_modulator, BranchMode};
use crate::scene::{init_cloud, GaussianCloud, InitConfig, HR_DIM, LA_DIM};
use crate::tonemap::{FusionMode, ToneMapper};

const MAGIC: &[u8; 4] = b"PHGS";
const VERSION: u32 = 1;

/// Identifies one learnable parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Mu,
    LogScale,
    Rotation,
    Opacity,
    Reflectance,
    Ambient,
    Composer,
    Modulator,
    ToneMap,
    Mix,
}

impl ParamId {
    pub const ALL: [ParamId; 10] = [
        ParamId::Mu,
        ParamId::LogScale,
        ParamId::Rotation,
        ParamId::Opacity,
        ParamId::Reflectance,
        ParamId::Ambient,
        ParamId::Composer,
        ParamId::Modulator,
        ParamId::ToneMap,
        ParamId::Mix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Mu => "mu",
            ParamId::LogScale => "log_scale",
            ParamId::Rotation => "rotation",
            ParamId::Opacity => "opacity_logit",
            ParamId::Reflectance => "h_r",
            ParamId::Ambient => "l_a_raw",
            ParamId::Composer => "g",
            ParamId::Modulator => "phi",
            ParamId::ToneMap => "f_tm",
            ParamId::Mix => "f_mix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Per-Gaussian array (as opposed to network weights).
    pub fn is_gaussian(self) -> bool {
        !matches!(self, ParamId::Composer | ParamId::Modulator | ParamId::ToneMap | ParamId::Mix)
    }

    /// Values per Gaussian for per-Gaussian arrays.
    pub fn width(self) -> usize {
        match self {
            ParamId::Mu | ParamId::LogScale => 3,
            ParamId::Rotation => 4,
            ParamId::Opacity => 1,
            ParamId::Reflectance => HR_DIM,
            ParamId::Ambient => LA_DIM,
            _ => 0,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    /// Composer: `(L_a, H_r) -> color`.
    pub g: MlpParams,
    /// Modulator: `(L_a, l) -> virtual L_a`.
    pub phi: MlpParams,
    pub tone: ToneMapper,
    pub branch: BranchMode,
}

impl Model {
    /// Fresh model with networks initialized from `seed`.
    pub fn init(seed_points: &[[f64; 3]], init: &InitConfig, seed: u64) -> Result<Self> {
        let cloud = init_cloud(seed_points, &InitConfig { seed, ..*init })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let g = init_composer(&mut rng);
        let phi = init_modulator(&mut rng);
        let tone = ToneMapper::init(&mut rng);
        Ok(Self {
            cloud,
            g,
            phi,
            tone,
            branch: BranchMode::Dual,
        })
    }

    pub fn params(&self, id: ParamId) -> &[f64] {
        let c = &self.cloud;
        match id {
            ParamId::Mu => c.mu.as_flattened(),
            ParamId::LogScale => c.log_scale.as_flattened(),
            ParamId::Rotation => c.rotation.as_flattened(),
            ParamId::Opacity => &c.opacity_logit,
            ParamId::Reflectance => c.h_r.as_flattened(),
            ParamId::Ambient => c.l_a_raw.as_flattened(),
            ParamId::Composer => self.g.params(),
            ParamId::Modulator => self.phi.params(),
            ParamId::ToneMap => self.tone.f_tm.params(),
            ParamId::Mix => self.tone.f_mix.params(),
        }
    }

    pub fn params_mut(&mut self, id: ParamId) -> &mut [f64] {
        let c = &mut self.cloud;
        match id {
            ParamId::Mu => c.mu.as_flattened_mut(),
            ParamId::LogScale => c.log_scale.as_flattened_mut(),
            ParamId::Rotation => c.rotation.as_flattened_mut(),
            ParamId::Opacity => &mut c.opacity_logit,
            ParamId::Reflectance => c.h_r.as_flattened_mut(),
            ParamId::Ambient => c.l_a_raw.as_flattened_mut(),
            ParamId::Composer => self.g.params_mut(),
            ParamId::Modulator => self.phi.params_mut(),
            ParamId::ToneMap => self.tone.f_tm.params_mut(),
            ParamId::Mix => self.tone.f_mix.params_mut(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        for id in [ParamId::Composer, ParamId::Modulator, ParamId::ToneMap, ParamId::Mix] {
            if self.params(id).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{id} weights")));
            }
        }
        Ok(())
    }
}

/// Path of the metadata file that accompanies a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_mlp(out: &mut Vec<u8>, mlp: &MlpParams) {
    put_u32(out, mlp.dims().len() as u32);
    for &d in mlp.dims() {
        put_u32(out, d as u32);
    }
    put_u32(out, mlp.output_map().code());
    put_f64s(out, mlp.params());
}

/// Serializes the model to the binary checkpoint layout.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&(model.cloud.len() as u64).to_le_bytes());
    for id in ParamId::ALL.iter().filter(|p| p.is_gaussian()) {
        put_f64s(&mut out, model.params(*id));
    }
    put_u32(&mut out, 4);
    for mlp in [&model.g, &model.phi, &model.tone.f_tm, &model.tone.f_mix] {
        put_mlp(&mut out, mlp);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint", "truncated payload"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    fn mlp(&mut self) -> Result<MlpParams> {
        let n_dims = self.u32()? as usize;
        if n_dims > 64 {
            return Err(Error::format("checkpoint", "implausible layer count"));
        }
        let dims = (0..n_dims).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let map = OutputMap::from_code(self.u32()?)
            .ok_or_else(|| Error::format("checkpoint", "unknown output map"))?;
        let count: usize = dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum();
        let params = self.f64s(count)?;
        MlpParams::from_parts(dims, params, map)
    }
}

fn rows<const W: usize>(flat: Vec<f64>) -> Vec<[f64; W]> {
    flat.chunks_exact(W)
        .map(|c| {
            let mut r = [0.0; W];
            r.copy_from_slice(c);
            r
        })
        .collect()
}

/// Parses the binary checkpoint layout. Branch and fusion modes are not part
/// of the binary file and come back as defaults.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let n = usize::try_from(r.u64()?).map_err(|_| Error::format("checkpoint", "count overflow"))?;
    if n > bytes.len() / 8 {
        return Err(Error::format("checkpoint", "Gaussian count exceeds payload"));
    }
    let cloud = GaussianCloud {
        mu: rows::<3>(r.f64s(n * 3)?),
        log_scale: rows::<3>(r.f64s(n * 3)?),
        rotation: rows::<4>(r.f64s(n * 4)?),
        opacity_logit: r.f64s(n)?,
        h_r: rows::<HR_DIM>(r.f64s(n * HR_DIM)?),
        l_a_raw: rows::<LA_DIM>(r.f64s(n * LA_DIM)?),
    };
    if r.u32()? != 4 {
        return Err(Error::format("checkpoint", "expected four networks"));
    }
    let g = r.mlp()?;
    let phi = r.mlp()?;
    let f_tm = r.mlp()?;
    let f_mix = r.mlp()?;
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    let model = Model {
        cloud,
        g,
        phi,
        tone: ToneMapper {
            f_tm,
            f_mix,
            fusion: FusionMode::default(),
        },
        branch: BranchMode::default(),
    };
    model.validate()?;
    Ok(model)
}

/// Writes the checkpoint and its sidecar. The model's branch and fusion
/// modes are recorded in the sidecar next to the caller's entries.
pub fn save_checkpoint(model: &Model, meta: &KvDoc, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let mut meta = meta.clone();
    meta.set("model.branch", model.branch.name());
    meta.set("model.fusion", model.tone.fusion.name());
    meta.write(&sidecar_path(path))
}

/// Reads a checkpoint; the sidecar is optional.
pub fn load_checkpoint(path: &Path) -> Result<(Model, KvDoc)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut model = decode_checkpoint(&bytes)?;
    let side = sidecar_path(path);
    let meta = if side.exists() { KvDoc::read(&side)? } else { KvDoc::new() };
    if let Some(b) = meta.get("model.branch") {
        model.branch = BranchMode::parse(b).ok_or_else(|| Error::format("checkpoint metadata", format!("branch `{b}`")))?;
    }
    if let Some(f) = meta.get("model.fusion") {
        model.tone.fusion = FusionMode::parse(f).ok_or_else(|| Error::format("checkpoint metadata", format!("fusion `{f}`")))?;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let pts = [[0.0, 0.0, 0.0], [0.5, 0.1, -0.2], [0.3, -0.4, 0.6]];
        Model::init(&pts, &InitConfig::default(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        m.tone.fusion = FusionMode::Sum;
        m.branch = BranchMode::IeOnly;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.phgs");
        let mut meta = KvDoc::new();
        meta.set("iteration", 12);
        save_checkpoint(&m, &meta, &path).unwrap();
        let (back, meta_back) = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back.get("iteration"), Some("12"));
        assert_eq!(encode_checkpoint(&back), encode_checkpoint(&m));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode_checkpoint(&model());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn flat_views_cover_every_parameter() {
        let mut m = model();
        for id in ParamId::ALL {
            let n = m.params(id).len();
            assert!(n > 0);
            if id.is_gaussian() {
                assert_eq!(n, 3 * id.width());
            }
            m.params_mut(id)[0] = 7.0;
            assert_eq!(m.params(id)[0], 7.0);
            assert_eq!(ParamId::parse(id.name()), Some(id));
        }
    }
}
