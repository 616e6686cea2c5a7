use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dtcmr_core::denoise::{denoise_stack, diagnostics_csv};
use dtcmr_core::imaging::bundle::{load_mask, load_stack, save_fields, save_mask, save_stack, write_atomic};
use dtcmr_core::imaging::normalize_stack;
use dtcmr_core::phantom::{simulate, PhantomConfig};
use dtcmr_core::pipeline::{
    loss_trace_csv, metrics_with_outputs, register_rigid_stack, run_pipeline, write_fit_outputs, PipelineConfig,
    RegistrationMode, Report, Stage, CSV_HEADER,
};
use dtcmr_core::registration::register_stack;
use dtcmr_core::tensor::{fit_tensor, load_tensor_map};
use dtcmr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dtcmr", version, about = "Denoise, register and analyse DT-CMR frame stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every stage command.
#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML, or JSON such as a previous report's config echo).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<RegistrationMode>,
    #[arg(long)]
    no_denoise: bool,
    /// Match moving-frame histograms to the fixed frame before computing NMI.
    #[arg(long)]
    contrast_surrogate: bool,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_path(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if self.no_denoise {
            cfg.denoise_enabled = false;
        }
        if self.contrast_surrogate {
            cfg.registration.contrast_surrogate = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        if self.jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom acquisition (stack, mask, true motion).
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Phantom settings (TOML); defaults otherwise.
        #[arg(long)]
        phantom: Option<PathBuf>,
        #[arg(long)]
        motion: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Groupwise PCA denoising of a stack bundle.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Register every frame of a stack bundle to its brightest frame.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Log-linear tensor fit inside a mask.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Negative-eigenvalue counts and helix-angle statistics of a tensor bundle.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tensors: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value = "case")]
        case_id: String,
    },
    /// Run every stage on the configured cases and write the report.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Configuration utilities.
    Config {
        /// Print the default configuration as TOML.
        #[arg(long)]
        dump_defaults: bool,
    },
}

/// Attributes an error to a stage unless it already carries one.
fn in_stage(stage: Stage, case_id: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            case_id: case_id.into(),
            source: Box::new(e),
        },
    }
}

fn case_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into())
}

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    Ok(cfg.out_dir.clone())
}

fn phantom_cmd(common: &Common, phantom: Option<&Path>, motion: Option<f64>, noise: Option<f64>) -> Result<()> {
    let cfg = common.load()?;
    let mut pc = match phantom {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("invalid phantom configuration: {e}")))?
        }
        None => PhantomConfig::default(),
    };
    if let Some(seed) = common.seed {
        pc.seed = seed;
    }
    if let Some(m) = motion {
        pc.motion_amplitude = m;
    }
    if let Some(n) = noise {
        pc.noise_sigma = n;
    }
    let dir = out_dir(&cfg)?;
    let acq = simulate(&pc)?;
    save_stack(&acq.stack, &dir.join("stack.json"))?;
    save_mask(&acq.truth.mask, &dir.join("mask.json"))?;
    save_fields(&acq.motion.inverse, &dir.join("true_fields.json"))?;
    let echo = toml::to_string(&pc).expect("phantom configuration serializes");
    write_atomic(&dir.join("phantom.toml"), echo.as_bytes())?;
    println!("wrote {} frames of {}x{} to {}", acq.stack.len(), pc.size, pc.size, dir.display());
    Ok(())
}

fn denoise_cmd(common: &Common, input: &Path) -> Result<()> {
    let cfg = common.load()?;
    let id = case_name(input);
    let stack = load_stack(input).map_err(in_stage(Stage::Load, &id))?;
    let dir = out_dir(&cfg)?;
    let (denoised, dec, keep) = denoise_stack(&stack, &cfg.denoise).map_err(in_stage(Stage::Denoise, &id))?;
    write_atomic(&dir.join("denoise_components.csv"), diagnostics_csv(&dec, &keep).as_bytes())?;
    save_stack(&denoised, &dir.join("denoised.json"))?;
    let kept = keep.iter().filter(|k| **k).count();
    println!("kept {kept} of {} components", keep.len());
    Ok(())
}

fn register_cmd(common: &Common, input: &Path) -> Result<()> {
    let cfg = common.load()?;
    let id = case_name(input);
    let stack = load_stack(input).map_err(in_stage(Stage::Load, &id))?;
    let stack = if stack.is_normalized() {
        stack
    } else {
        normalize_stack(&stack).map_err(in_stage(Stage::Normalize, &id))?
    };
    let dir = out_dir(&cfg)?;
    let pool = common.pool()?;
    let stage = in_stage(Stage::Register, &id);
    match cfg.mode {
        RegistrationMode::None => {
            save_stack(&stack, &dir.join("registered.json"))?;
        }
        RegistrationMode::Rigid => {
            let (registered, fields) = pool
                .install(|| register_rigid_stack(&stack, cfg.rigid.max_shift, cfg.registration.contrast_surrogate))
                .map_err(stage)?;
            save_stack(&registered, &dir.join("registered.json"))?;
            save_fields(&fields, &dir.join("fields.json"))?;
        }
        RegistrationMode::Deformable => {
            let reg = pool.install(|| register_stack(&stack, &cfg.registration)).map_err(stage)?;
            save_stack(&reg.registered, &dir.join("registered.json"))?;
            save_fields(&reg.fields, &dir.join("fields.json"))?;
            let traces = dir.join("traces");
            std::fs::create_dir_all(&traces).map_err(|e| Error::Io {
                path: traces.clone(),
                source: e,
            })?;
            for (i, trace) in reg.traces.iter().enumerate() {
                if i != reg.fixed_index {
                    write_atomic(&traces.join(format!("frame_{i:03}.csv")), loss_trace_csv(trace).as_bytes())?;
                }
            }
        }
    }
    println!("registered {} frames ({})", stack.len(), cfg.mode);
    Ok(())
}

fn fit_cmd(common: &Common, input: &Path, mask: &Path) -> Result<()> {
    let cfg = common.load()?;
    let id = case_name(input);
    let (stack, mask) = (|| Ok((load_stack(input)?, load_mask(mask)?)))().map_err(in_stage(Stage::Load, &id))?;
    let dir = out_dir(&cfg)?;
    let map = common.pool()?.install(|| fit_tensor(&stack, &mask)).map_err(in_stage(Stage::Fit, &id))?;
    write_fit_outputs(&map, &mask, &dir)?;
    let valid = map.valid.iter().filter(|v| **v).count();
    println!("fitted {valid} pixels");
    Ok(())
}

fn metrics_cmd(common: &Common, tensors: &Path, mask: &Path, case_id: &str) -> Result<()> {
    let cfg = common.load()?;
    let (map, mask) = (|| Ok((load_tensor_map(tensors)?, load_mask(mask)?)))().map_err(in_stage(Stage::Load, case_id))?;
    let dir = out_dir(&cfg)?;
    let (row, _) = metrics_with_outputs(case_id, &map, &mask, cfg.metrics.n_spokes, &dir).map_err(in_stage(Stage::Metrics, case_id))?;
    let csv = format!("{CSV_HEADER}\n{}\n", row.csv_line());
    write_atomic(&dir.join("report.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn pipeline_cmd(common: &Common) -> Result<Report> {
    let cfg = common.load()?;
    let report = run_pipeline(&cfg, common.jobs)?;
    print!("{}", report.to_csv());
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            common,
            phantom,
            motion,
            noise,
        } => phantom_cmd(&common, phantom.as_deref(), motion, noise),
        Command::Denoise { common, input } => denoise_cmd(&common, &input),
        Command::Register { common, input } => register_cmd(&common, &input),
        Command::Fit { common, input, mask } => fit_cmd(&common, &input, &mask),
        Command::Metrics {
            common,
            tensors,
            mask,
            case_id,
        } => metrics_cmd(&common, &tensors, &mask, &case_id),
        Command::Pipeline { common } => pipeline_cmd(&common).map(|_| ()),
        Command::Config { dump_defaults } => {
            if !dump_defaults {
                return Err(Error::Config("nothing to do; pass --dump-defaults".into()));
            }
            print!("{}", PipelineConfig::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dtcmr: {e}");
            ExitCode::FAILURE
        }
    }
}
