use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use triplane_core::autoencoder::Autoencoder;
use triplane_pipeline::ablate::{ablate, Axis};
use triplane_pipeline::checks::{gradcheck_suite, TOLERANCE};
use triplane_pipeline::generate::{export_mesh, generate, GenerateOptions, Models};
use triplane_pipeline::stages::{
    load_params, train_autoencoder, train_prior, train_triplane_from_dir, Output, AE_CHECKPOINT,
};
use triplane_pipeline::synth::{synth_dataset, Dataset};
use triplane_pipeline::{PipelineError, Profile, Result, RunConfig};

const CONFIG_FILE: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "triplane", version, about = "Train and sample the triplane shape generator")]
struct Cli {
    /// TOML run configuration; defaults to `<out>/config.toml` when present, else the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Output root for data, checkpoints and exports.
    #[arg(long, global = true, env = "TRIPLANE_OUT")]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Per-field overrides of the run configuration.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of synthetic shapes.
    #[arg(long, global = true)]
    shapes: Option<usize>,
    /// Points per cloud.
    #[arg(long, global = true)]
    points: Option<usize>,
    /// Cameras per shape.
    #[arg(long, global = true)]
    views: Option<usize>,
    #[arg(long, global = true)]
    image_size: Option<usize>,
    /// Disables the windowed cross-attention block.
    #[arg(long, global = true)]
    no_attention: bool,
    /// Feature volume resolution `r`.
    #[arg(long, global = true)]
    volume_res: Option<usize>,
    /// Attention downsampling factor, giving `r″ = r / factor`.
    #[arg(long, global = true)]
    downsample: Option<usize>,
    /// Isosurface grid `G`.
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[arg(long, global = true)]
    lambda_rgb: Option<f64>,
    #[arg(long, global = true)]
    lambda_mask: Option<f64>,
    #[arg(long, global = true)]
    lambda_depth: Option<f64>,
    #[arg(long, global = true)]
    lambda_kl: Option<f64>,
    /// Diffusion length `T`.
    #[arg(long, global = true)]
    timesteps: Option<usize>,
    #[arg(long, global = true)]
    ddim_steps: Option<usize>,
    /// Shape guidance scale `s_s`.
    #[arg(long, global = true)]
    shape_scale: Option<f64>,
    /// Image guidance scale `s_p`.
    #[arg(long, global = true)]
    image_scale: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct StageArgs {
    /// Training steps for this stage.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic dataset and the effective configuration.
    Synth,
    /// Stage 1: autoencoder on the rendering loss.
    TrainAe(StageArgs),
    /// Stage 2: shape-embedding prior.
    TrainPrior(StageArgs),
    /// Stage 3: triplane diffusion on frozen encoder latents.
    TrainTri(StageArgs),
    /// Samples a colored mesh from an image embedding.
    Generate {
        /// Dataset shape whose oracle image embedding is used.
        #[arg(long, default_value_t = 0, conflicts_with = "embedding")]
        shape: usize,
        #[arg(long, default_value_t = 0, conflicts_with = "embedding")]
        view: usize,
        /// JSON array holding an image embedding.
        #[arg(long)]
        embedding: Option<PathBuf>,
        /// Uses the image embedding in place of the sampled shape embedding.
        #[arg(long)]
        no_prior: bool,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Paired experiments along one axis: attention, volume-res, prior or guidance.
    Ablate {
        #[arg(long)]
        axis: String,
    },
    /// Finite-difference checks of every differentiable path.
    Gradcheck,
    /// Writes the autoencoder reconstruction (or the analytic mesh) of a dataset shape.
    Export {
        #[arg(long, default_value_t = 0)]
        shape: usize,
        /// Exports the analytic ground truth instead of the reconstruction.
        #[arg(long)]
        gt: bool,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
}

fn set<T: Copy>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.seed, self.seed);
        set(&mut c.data.num_shapes, self.shapes);
        set(&mut c.data.num_points, self.points);
        set(&mut c.views.count, self.views);
        set(&mut c.views.image_size, self.image_size);
        if self.no_attention {
            c.autoencoder.use_attention = false;
        }
        if let Some(r) = self.volume_res {
            c.autoencoder.encoder.volume_res = r;
            c.autoencoder.attention.volume_res = r;
        }
        set(&mut c.autoencoder.attention.downsample, self.downsample);
        set(&mut c.autoencoder.decoder.grid, self.grid);
        set(&mut c.loss.rgb, self.lambda_rgb);
        set(&mut c.loss.mask, self.lambda_mask);
        set(&mut c.loss.depth, self.lambda_depth);
        set(&mut c.loss.kl, self.lambda_kl);
        set(&mut c.diffusion.timesteps, self.timesteps);
        set(&mut c.diffusion.ddim_steps, self.ddim_steps);
        set(&mut c.diffusion.guidance.shape, self.shape_scale);
        set(&mut c.diffusion.guidance.image, self.image_scale);
    }
}

impl StageArgs {
    fn apply(&self, t: &mut triplane_pipeline::config::TrainConfig) {
        set(&mut t.steps, self.steps);
        set(&mut t.lr_start, self.lr_start);
        set(&mut t.lr_end, self.lr_end);
        set(&mut t.batch, self.batch);
        set(&mut t.checkpoint_every, self.checkpoint_every);
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let out = cli.out.clone();
    let stored = out.as_ref().map(|o| o.join(CONFIG_FILE)).filter(|p| p.exists());
    let mut cfg = match (&cli.config, stored, cli.profile) {
        (Some(path), _, _) => RunConfig::load(path)?,
        (None, _, Some(p)) => RunConfig::for_profile(p),
        (None, Some(path), None) => RunConfig::load(&path)?,
        (None, None, None) => RunConfig::desk(),
    };
    if let Some(o) = out {
        cfg.paths.out = o;
    }
    cli.overrides.apply(&mut cfg);
    match &cli.command {
        Command::TrainAe(s) => s.apply(&mut cfg.stage1),
        Command::TrainPrior(s) => s.apply(&mut cfg.stage2),
        Command::TrainTri(s) => s.apply(&mut cfg.stage3),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let d = cfg.paths.out.as_path();
    std::fs::create_dir_all(d).map_err(|source| PipelineError::Io {
        context: format!("creating {}", d.display()),
        source,
    })?;
    Ok(d)
}

fn print_last<R: std::fmt::Debug>(stage: &str, log: &[R]) {
    if let Some(r) = log.last() {
        println!("{stage}: {} steps, last {r:?}", log.len());
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| PipelineError::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Gradcheck = cli.command {
        let mut failed = false;
        for r in gradcheck_suite()? {
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            println!("{verdict} {:<20} worst rel err {:.3e} (tol {TOLERANCE:.0e}, {:.2}s)", r.name, r.worst, r.seconds);
            failed |= !r.passed();
        }
        return if failed {
            Err(PipelineError::Numerical("gradcheck tolerance exceeded".into()))
        } else {
            Ok(())
        };
    }
    let cfg = resolve_config(&cli)?;
    let dir = out_dir(&cfg)?;
    let output = Output { dir: dir.to_path_buf() };
    match cli.command {
        Command::Synth => {
            let data = synth_dataset(&cfg)?;
            data.save(&cfg.data_dir())?;
            cfg.save(&dir.join(CONFIG_FILE))?;
            println!("wrote {} shapes to {}", data.len(), cfg.data_dir().display());
        }
        Command::TrainAe(_) => {
            let data = Dataset::load(&cfg.data_dir())?;
            let run = train_autoencoder(&cfg, &data, Some(&output))?;
            print_last("autoencoder", &run.log);
        }
        Command::TrainPrior(_) => {
            let data = Dataset::load(&cfg.data_dir())?;
            let run = train_prior(&cfg, &data, Some(&output))?;
            print_last("prior", &run.log);
        }
        Command::TrainTri(_) => {
            let data = Dataset::load(&cfg.data_dir())?;
            let run = train_triplane_from_dir(&cfg, &data, dir)?;
            print_last("triplane", &run.log);
        }
        Command::Generate {
            shape,
            view,
            embedding,
            no_prior,
            frames,
        } => {
            let models = Models::load(dir)?;
            let (emb, name) = match embedding {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|_| PipelineError::MissingArtifact {
                        what: "image embedding file",
                        path: path.clone(),
                    })?;
                    let v: Vec<f64> = serde_json::from_str(&text).map_err(|e| PipelineError::Format(e.to_string()))?;
                    (v, "embedding".to_string())
                }
                None => {
                    let data = Dataset::load(&cfg.data_dir())?;
                    if shape >= data.len() || view >= data.cameras.len() {
                        return Err(PipelineError::Usage(format!(
                            "shape {shape} view {view} outside {} shapes x {} views",
                            data.len(),
                            data.cameras.len()
                        )));
                    }
                    (data.image_embedding(shape, view), format!("shape_{shape:04}_view_{view:03}"))
                }
            };
            let opts = GenerateOptions {
                use_prior: !no_prior,
                ..GenerateOptions::from_config(&cfg)
            };
            let g = generate(&models, &emb, &opts)?;
            let target = dir.join("generated").join(name);
            export_mesh(&g.mesh, &cfg, &target, frames)?;
            println!(
                "{} vertices, {} faces -> {}",
                g.mesh.vertices.len(),
                g.mesh.faces.len(),
                target.display()
            );
        }
        Command::Ablate { axis } => {
            let axis: Axis = axis.parse()?;
            let data = Dataset::load(&cfg.data_dir())?;
            let models = if axis.needs_models() { Some(Models::load(dir)?) } else { None };
            let result = ablate(&cfg, axis, &data, models.as_ref())?;
            let stem = format!("ablate_{}", axis.name());
            write_text(&dir.join(format!("{stem}.csv")), &result.report.to_csv())?;
            write_text(&dir.join(format!("{stem}.md")), &result.report.to_markdown())?;
            if !result.seconds_per_step.is_empty() {
                let mut s = String::from("variant,seconds_per_step\n");
                for (n, t) in &result.seconds_per_step {
                    s.push_str(&format!("{n},{t:.4}\n"));
                }
                write_text(&dir.join(format!("{stem}_timing.csv")), &s)?;
            }
            print!("{}", result.report.to_markdown());
        }
        Command::Export { shape, gt, frames } => {
            let data = Dataset::load(&cfg.data_dir())?;
            if shape >= data.len() {
                return Err(PipelineError::Usage(format!("shape {shape} outside {} shapes", data.len())));
            }
            let mesh = if gt {
                data.gt_mesh(shape)?
            } else {
                let (params, trained, _) = load_params(&dir.join(AE_CHECKPOINT), "autoencoder checkpoint")?;
                let ae = Autoencoder::new(trained.autoencoder)?;
                let z = ae.mean_latent(&params, &data.clouds[shape])?;
                ae.reconstruct(&params, &z)?
            };
            let target = dir.join("export").join(format!("shape_{shape:04}{}", if gt { "_gt" } else { "" }));
            export_mesh(&mesh, &cfg, &target, frames)?;
            println!("{} vertices -> {}", mesh.vertices.len(), target.display());
        }
        Command::Gradcheck => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
