use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use hdrgs_core::dataio::pnm::{save_pfm, save_ppm};
use hdrgs_core::dataio::synthetic::{generate_scene, SceneSpec};
use hdrgs_core::dataio::{Dataset, ImageBuffer, Split};
use hdrgs_core::densify::{starvation_correlation, write_stats_csv};
use hdrgs_core::eval::{evaluate, mean_scores, Score};
use hdrgs_core::gradcheck::{run_gradcheck, GradFixture, GradcheckOptions, GRADCHECK_TOLERANCE};
use hdrgs_core::model::{load_checkpoint, save_checkpoint, Model, ParamId};
use hdrgs_core::pipeline::{render_view, Fault};
use hdrgs_core::raster::RasterConfig;
use hdrgs_core::trainer::{gradient_statistics, TrainConfig, Trainer};
use hdrgs_core::ErrorKind;

/// Environment variable that caps the number of worker threads.
const THREADS_ENV: &str = "PHGS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hdrgs", version, about = "HDR Gaussian splatting on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-exposure scene.
    GenScene {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Ground-truth Gaussians.
        #[arg(long, default_value_t = 24)]
        gaussians: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 12)]
        views: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model on a scene directory.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// Key-value config file; desk defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path. The log is written next to it as `<out>.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.max_iterations`.
        #[arg(long)]
        iterations: Option<usize>,
        /// Also write `<out>.iter<N>` every N iterations.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Render one view of a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene providing the camera.
        #[arg(long)]
        scene: PathBuf,
        /// View id, e.g. `view_01`.
        #[arg(long)]
        view: String,
        #[arg(long, default_value_t = 1.0)]
        exposure: f64,
        #[arg(long, value_enum, default_value_t = RenderMode::Ldr)]
        mode: RenderMode,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on one split of a scene.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Build the fixture from this scene's cameras instead of the
        /// built-in 8x8 one.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// `all` or a comma-separated list of parameter arrays.
        #[arg(long, default_value = "all")]
        params: String,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Check at most this many evenly spaced coordinates per array.
        #[arg(long)]
        max_coords: Option<usize>,
        /// Test hook: scale the analytic gradient of one array, as
        /// `name:factor`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Per-Gaussian densification statistics of a checkpoint.
    DensifyStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RenderMode {
    Hdr,
    Ldr,
    Branches,
}

/// Error raised when the gradient check finds a mismatch.
#[derive(Debug)]
struct GradientMismatch(f64);

impl std::fmt::Display for GradientMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}", self.0)
    }
}

impl std::error::Error for GradientMismatch {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hdrgs_core::Error>() {
            return match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Numerical => 2,
                ErrorKind::Io => 3,
            };
        }
        if cause.is::<GradientMismatch>() {
            return 2;
        }
        if cause.is::<io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads().and_then(|()| run(cli.command)) {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit_code(&e));
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenScene {
            seed,
            gaussians,
            size,
            views,
            out_dir,
        } => gen_scene(
            SceneSpec {
                seed,
                n_gaussians: gaussians,
                image_size: size,
                n_views: views,
            },
            &out_dir,
        ),
        Command::Train {
            scene,
            config,
            out,
            iterations,
            checkpoint_every,
        } => train(&scene, config.as_deref(), &out, iterations, checkpoint_every),
        Command::Render {
            checkpoint,
            scene,
            view,
            exposure,
            mode,
            out_dir,
        } => render(&checkpoint, &scene, &view, exposure, mode, &out_dir),
        Command::Eval { checkpoint, scene, split } => eval(&checkpoint, &scene, &split),
        Command::Gradcheck {
            scene,
            params,
            step,
            seed,
            max_coords,
            inject_fault,
        } => gradcheck(scene.as_deref(), &params, step, seed, max_coords, inject_fault.as_deref()),
        Command::DensifyStats {
            checkpoint,
            scene,
            out_csv,
            config,
        } => densify_stats(&checkpoint, &scene, &out_csv, config.as_deref()),
    }
}

fn gen_scene(spec: SceneSpec, out_dir: &Path) -> Result<()> {
    spec.validate()?;
    let scene = generate_scene(spec)?;
    scene.dataset.save(out_dir)?;
    info!(
        "wrote {} views x {} exposures to {}",
        scene.dataset.views.len(),
        scene.dataset.ladder.len(),
        out_dir.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    })
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

fn train(scene: &Path, config: Option<&Path>, out: &Path, iterations: Option<usize>, every: Option<usize>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(n) = iterations {
        let defaults = TrainConfig::with_iterations(cfg.max_iterations);
        cfg.max_iterations = n;
        // Keep the freeze point proportional unless the config moved it.
        if cfg.mix_unfreeze_iter == defaults.mix_unfreeze_iter {
            cfg.mix_unfreeze_iter = TrainConfig::with_iterations(n).mix_unfreeze_iter;
        }
    }
    cfg.validate()?;
    if every == Some(0) {
        bail!(hdrgs_core::Error::Invalid("--checkpoint-every must be > 0".into()));
    }
    let dataset = Dataset::load(scene)?;
    let meta = cfg.to_kv();
    let mut trainer = Trainer::new(cfg.clone(), &dataset)?;
    while trainer.iteration() < cfg.max_iterations {
        trainer.step()?;
        let it = trainer.iteration();
        if every.is_some_and(|k| it % k == 0 && it < cfg.max_iterations) {
            let mut snap = out.as_os_str().to_owned();
            snap.push(format!(".iter{it}"));
            let mut m = meta.clone();
            m.set("checkpoint.iteration", it);
            save_checkpoint(&trainer.model, &m, Path::new(&snap))?;
        }
    }
    let (model, report) = trainer.finish();
    let mut m = meta;
    m.set("checkpoint.iteration", cfg.max_iterations);
    save_checkpoint(&model, &m, out)?;
    let log = log_path(out);
    let file = fs::File::create(&log).with_context(|| format!("creating {}", log.display()))?;
    let mut w = BufWriter::new(file);
    report.write_csv(&mut w)?;
    w.flush()?;
    info!(
        "trained {} iterations in {:.1?}: {} Gaussians, checkpoint {}",
        cfg.max_iterations,
        report.wall_time,
        report.final_gaussians,
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)?.0)
}

fn render(checkpoint: &Path, scene: &Path, view: &str, t: f64, mode: RenderMode, out_dir: &Path) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        bail!(hdrgs_core::Error::Invalid(format!("exposure must be > 0, got {t}")));
    }
    let model = load_model(checkpoint)?;
    let dataset = Dataset::load(scene)?;
    let set = dataset
        .view(view)
        .ok_or_else(|| hdrgs_core::Error::Invalid(format!("unknown view id `{view}`")))?;
    let out = render_view(&model, &set.camera, t, &RasterConfig::default())?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let hdr: Vec<(&str, &ImageBuffer)> = match mode {
        RenderMode::Hdr => vec![("hdr", &out.i_hdr)],
        RenderMode::Ldr => vec![],
        RenderMode::Branches => vec![
            ("hdr", &out.i_hdr),
            ("hdr_exposed", &out.i_hdr_scaled),
            ("hdr_relit", &out.i_hdr_relit),
        ],
    };
    let ldr: Vec<(&str, &ImageBuffer)> = match mode {
        RenderMode::Hdr => vec![],
        RenderMode::Ldr => vec![("ldr", &out.fused.i_ldr)],
        RenderMode::Branches => vec![
            ("ldr_global", &out.i_glo),
            ("ldr_local", &out.i_loc),
            ("ldr_global_relit", &out.i_glo_hat),
            ("ldr_local_relit", &out.i_loc_hat),
            ("ldr_fused_ig", &out.fused.i_ig),
            ("ldr_fused_gi", &out.fused.i_gi),
            ("ldr", &out.fused.i_ldr),
        ],
    };
    for (name, img) in hdr {
        save_pfm(img, &out_dir.join(format!("{view}_{name}.pfm")))?;
    }
    for (name, img) in ldr {
        save_ppm(img, &out_dir.join(format!("{view}_{name}.ppm")))?;
    }
    Ok(())
}

fn print_group(title: &str, rows: &[Score]) {
    println!("{title}");
    for r in rows {
        let t = r.exposure.map(|t| format!("{t}")).unwrap_or_else(|| "-".into());
        println!("  {:<12} {:>6} {:>8.3} {:>7.4}", r.view, t, r.psnr, r.ssim);
    }
    if rows.is_empty() {
        println!("  (none)");
    } else {
        let (p, s) = mean_scores(rows);
        println!("  {:<12} {:>6} {:>8.3} {:>7.4}", "mean", "", p, s);
    }
}

fn eval(checkpoint: &Path, scene: &Path, split: &str) -> Result<()> {
    let split = Split::parse(split).ok_or_else(|| hdrgs_core::Error::Invalid(format!("unknown split `{split}`")))?;
    let model = load_model(checkpoint)?;
    let dataset = Dataset::load(scene)?;
    let table = evaluate(&model, &dataset, split, &RasterConfig::default())?;
    println!("split {}: {:<12} {:>6} {:>8} {:>7}", split.name(), "view", "t", "PSNR", "SSIM");
    print_group("LDR-OE", &table.ldr_oe);
    print_group("LDR-NE", &table.ldr_ne);
    print_group("HDR (mu-law)", &table.hdr);
    Ok(())
}

fn parse_params(spec: &str) -> Result<Vec<ParamId>> {
    if spec == "all" {
        return Ok(ParamId::ALL.to_vec());
    }
    spec.split(',')
        .map(|s| {
            ParamId::parse(s.trim())
                .ok_or_else(|| anyhow!(hdrgs_core::Error::Invalid(format!("unknown parameter array `{s}`"))))
        })
        .collect()
}

fn parse_fault(spec: &str) -> Result<Fault> {
    let bad = || anyhow!(hdrgs_core::Error::Invalid(format!("fault must be `name:factor`, got `{spec}`")));
    let (name, factor) = spec.split_once(':').ok_or_else(bad)?;
    let id = ParamId::parse(name).ok_or_else(bad)?;
    let factor: f64 = factor.parse().map_err(|_| bad())?;
    Ok(Fault::ScaleGradient(id, factor))
}

fn gradcheck(
    scene: Option<&Path>,
    params: &str,
    step: f64,
    seed: u64,
    max_coords: Option<usize>,
    fault: Option<&str>,
) -> Result<()> {
    let opts = GradcheckOptions {
        params: parse_params(params)?,
        step,
        max_coords_per_param: max_coords,
        fault: fault.map(parse_fault).transpose()?,
    };
    let fixture = match scene {
        Some(dir) => GradFixture::from_dataset(&Dataset::load(dir)?, 5, seed)?,
        None => GradFixture::standard(seed)?,
    };
    let report = run_gradcheck(&fixture, &opts)?;
    println!("checked {} coordinates, max relative error {:.3e}", report.checked, report.max_rel_error);
    if let Some(w) = report.worst {
        println!(
            "worst: {}[{}] analytic {:.9e} numeric {:.9e} rel {:.3e}",
            w.param.name(),
            w.index,
            w.analytic,
            w.numeric,
            w.rel_error
        );
    }
    if report.max_rel_error >= GRADCHECK_TOLERANCE {
        return Err(GradientMismatch(report.max_rel_error).into());
    }
    Ok(())
}

fn densify_stats(checkpoint: &Path, scene: &Path, out_csv: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let model = load_model(checkpoint)?;
    let dataset = Dataset::load(scene)?;
    let state = gradient_statistics(&model, &dataset, &cfg)?;
    let rows = state.stats(&model.cloud);
    let file = fs::File::create(out_csv).with_context(|| format!("creating {}", out_csv.display()))?;
    let mut w = BufWriter::new(file);
    write_stats_csv(&mut w, &rows)?;
    w.flush()?;
    let flagged = rows.iter().filter(|r| r.densified).count();
    println!("{} Gaussians, {flagged} over the densification threshold", rows.len());
    match starvation_correlation(&rows, &state) {
        Some(rho) => println!("spearman(avg_grad, 1/deviation) = {rho:.4}"),
        None => println!("spearman(avg_grad, 1/deviation) = n/a (fewer than two visible Gaussians)"),
    }
    Ok(())
}
