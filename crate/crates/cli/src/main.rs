use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use zoomwarp::metrics::{emit_report, Parametrization, SizeClasses};
use zoomwarp::{GaussianKernelConfig, SolverConfig, ZoomLossConfig};
use zoomwarp_cli::annotations::{ingest_annotations, CategoryRecord, Scene};
use zoomwarp_cli::pipeline::{run_pipeline, OutputSpec, RunConfig};
use zoomwarp_cli::synth::{synth_categories, synth_scenes, write_dataset, SizeProfile, SynthConfig};
use zoomwarp_cli::verify::{
    check_gradients, compare_parametrizations, verify_bound, BoundCheckConfig, GradCheckConfig,
};

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "zoomwarp", version, about = "Non-uniform image zooming with box transforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a grid per scene, warp images, transform boxes, write reports.
    Run(RunArgs),
    /// Generate a synthetic dataset (images and annotations).
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients on random problems.
    CheckGradients(GradArgs),
    /// Check the round-trip IoU bound on random displacements.
    VerifyBound(BoundArgs),
    /// Run the offset and saliency parametrizations on the same scenes.
    CompareParametrizations(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Offset,
    Saliency,
}

#[derive(Args)]
struct InputArgs {
    /// Annotation file; synthetic scenes are generated when omitted.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthOpts,
}

#[derive(Args, Clone)]
struct SynthOpts {
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long = "synth-seed", default_value_t = 7)]
    synth_seed: u64,
    #[arg(long, default_value_t = 512)]
    width: u32,
    #[arg(long, default_value_t = 512)]
    height: u32,
    #[arg(long, default_value_t = 1)]
    min_boxes: usize,
    #[arg(long, default_value_t = 5)]
    max_boxes: usize,
    #[arg(long, default_value = "seadronessee-like")]
    profile: SizeProfile,
    #[arg(long, default_value_t = 0.0)]
    max_overlap: f64,
}

impl SynthOpts {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            count: self.count,
            seed: self.synth_seed,
            width: self.width,
            height: self.height,
            min_boxes: self.min_boxes,
            max_boxes: self.max_boxes,
            profile: self.profile,
            max_overlap: self.max_overlap,
            ..SynthConfig::default()
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value = "offset")]
    parametrization: ParamArg,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Standard deviation of the random offset initialization (0 = zeros).
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long, default_value_t = SolverConfig::DEFAULT_SEED)]
    seed: u64,
    /// Target magnification.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    reg_weight: Option<f64>,
    /// Average the loss over boxes instead of summing.
    #[arg(long)]
    mean_reduction: bool,
    /// Output resolution over offset-grid resolution.
    #[arg(long, default_value_t = 8)]
    offset_scale: usize,
    /// Processing resolution as HEIGHTxWIDTH; otherwise derived from --max-side.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
    #[arg(long)]
    max_side: Option<usize>,
    #[arg(long, default_value_t = 32.0 * 32.0)]
    small_max: f64,
    #[arg(long, default_value_t = 96.0 * 96.0)]
    medium_max: f64,
    /// Saliency kernel width, normalized units.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    radius: Option<usize>,
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HEIGHTxWIDTH")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((parse(h)?, parse(w)?))
}

impl ConfigArgs {
    fn config(&self) -> Result<RunConfig> {
        let d = RunConfig::default();
        let loss = ZoomLossConfig {
            alpha: self.alpha.unwrap_or(d.loss.alpha),
            beta: self.beta.unwrap_or(d.loss.beta),
            reg_weight: self.reg_weight.unwrap_or(d.loss.reg_weight),
            mean_reduction: self.mean_reduction,
            ..d.loss
        };
        let cfg = RunConfig {
            parametrization: match self.parametrization {
                ParamArg::Offset => Parametrization::Offset,
                ParamArg::Saliency => Parametrization::Saliency,
            },
            loss,
            steps: self.steps.unwrap_or(d.steps),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            init_scale: self.init_scale.unwrap_or(d.init_scale),
            seed: self.seed,
            offset_scale: self.offset_scale,
            resolution: self.resolution,
            max_side: self.max_side.unwrap_or(d.max_side),
            classes: SizeClasses {
                small_max: self.small_max,
                medium_max: self.medium_max,
            },
            kernel: GaussianKernelConfig {
                sigma: self.sigma.unwrap_or(d.kernel.sigma),
                radius: self.radius.unwrap_or(d.kernel.radius),
            },
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "zoomwarp-out")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    synth: SynthOpts,
    /// Skip rendering images (annotation-only dataset).
    #[arg(long)]
    no_images: bool,
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    max_side: usize,
    #[arg(long, default_value_t = 5)]
    max_boxes: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Write the full report here instead of a summary on stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long, default_value_t = 10_000)]
    instances: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

struct Input {
    scenes: Vec<Scene>,
    categories: Vec<CategoryRecord>,
}

fn load_input(args: &InputArgs) -> Result<Input> {
    match &args.annotations {
        Some(path) => {
            let ingested = ingest_annotations(path)?;
            for w in &ingested.warnings {
                log::warn!("{w}");
            }
            Ok(Input {
                scenes: ingested.scenes,
                categories: ingested.categories,
            })
        }
        None => {
            let cfg = args.synth.config();
            if cfg.count == 0 {
                anyhow::bail!("--count must be at least 1");
            }
            Ok(Input {
                scenes: synth_scenes(&cfg).into_iter().map(|s| s.scene).collect(),
                categories: synth_categories(),
            })
        }
    }
}

/// Configuration or ingest failure: exit code 2.
struct ConfigError(anyhow::Error);

fn setup<T>(r: Result<T>) -> std::result::Result<T, ConfigError> {
    r.map_err(ConfigError)
}

fn write_json(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli) -> std::result::Result<Result<bool>, ConfigError> {
    Ok(match cli.command {
        Command::Run(args) => {
            let cfg = setup(args.config.config())?;
            let input = setup(load_input(&args.input))?;
            (|| {
                let spec = OutputSpec {
                    dir: Some(args.out.clone()),
                    keep_artifacts: false,
                };
                let out = run_pipeline(&input.scenes, &cfg, &input.categories, &spec)?;
                let r = &out.report;
                println!(
                    "{} scenes, {} boxes, {} failed; mean IoU {}; report in {}",
                    r.scenes.len(),
                    r.boxes,
                    r.failed,
                    r.mean_iou.map_or("n/a".into(), |v| format!("{v:.4}")),
                    args.out.join("run_report.json").display()
                );
                Ok(r.failed == 0)
            })()
        }
        Command::Synth(args) => {
            let cfg = args.synth.config();
            if cfg.count == 0 {
                return Err(ConfigError(anyhow::anyhow!("--count must be at least 1")));
            }
            (|| {
                let scenes = synth_scenes(&cfg);
                for s in scenes.iter().filter(|s| s.truncated) {
                    log::warn!(
                        "scene {}: placed {} of {} boxes",
                        s.scene.id,
                        s.scene.boxes.len(),
                        s.requested
                    );
                }
                let path = write_dataset(&args.out, &scenes, !args.no_images)?;
                println!("wrote {} scenes to {}", scenes.len(), path.display());
                Ok(true)
            })()
        }
        Command::CheckGradients(args) => {
            let cfg = GradCheckConfig {
                instances: args.instances,
                seed: args.seed,
                max_side: args.max_side.max(8),
                max_boxes: args.max_boxes.max(1),
                ..GradCheckConfig::default()
            };
            (|| {
                let s = check_gradients(&cfg, &ZoomLossConfig::default())?;
                if let Some(path) = &args.report {
                    write_json(path, &emit_report(&s))?;
                }
                println!(
                    "{} instances, {} components checked, {} skipped at kinks, max relative error {:.3e}",
                    s.instances.len(),
                    s.checked,
                    s.skipped,
                    s.max_rel_error
                );
                Ok(s.max_rel_error < args.tolerance)
            })()
        }
        Command::VerifyBound(args) => {
            let s = verify_bound(&BoundCheckConfig {
                instances: args.instances,
                seed: args.seed,
                ..BoundCheckConfig::default()
            });
            println!(
                "{} instances, {} violations, min margin {:.3e}, sweep error {:.3e}, spot exact {:.5} approx {:.5}",
                s.instances,
                s.violations.len(),
                s.min_margin,
                s.max_sweep_error,
                s.spot_exact,
                s.spot_approx
            );
            Ok(s.passed(1e-6))
        }
        Command::CompareParametrizations(args) => {
            let cfg = setup(args.config.config())?;
            let input = setup(load_input(&args.input))?;
            (|| {
                let c = compare_parametrizations(&input.scenes, &cfg, &input.categories)?;
                print!("{}", emit_report(&c));
                Ok(c.results.iter().all(|r| r.failed == 0))
            })()
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Err(ConfigError(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILED)
        }
        Ok(Ok(true)) => ExitCode::SUCCESS,
        Ok(Ok(false)) => ExitCode::from(EXIT_FAILED),
    }
}
