use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use serde_json::json;

use guide::alignment::{plan_alignment, resize_bilinear};
use guide::config::RunConfig;
use guide::geo::{cross_frame_dependence, encode_frames, generate_scene, sample_layers, write_scene_dump, EncoderParams};
use guide::harness::{
    aggregate, collect_traces, grad_check_config, model_grad_check, run_single, AblationGrid, CheckStatus,
    PROBE_DEPTH,
};
use guide::{decoder::GatingMode, Error};

/// Layer-wise gated geometric injection: alignment planning, demos, training and ablations.
#[derive(Parser)]
#[command(name = "guide", version = env!("GUIDE_BUILD_STAMP"))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the patch-grid alignment plan as JSON.
    Plan {
        #[arg(long = "H")]
        h: usize,
        #[arg(long = "W")]
        w: usize,
        #[arg(long = "Pv")]
        pv: usize,
        #[arg(long = "Pg")]
        pg: usize,
    },
    /// Encode one synthetic scene and summarise the feature stack.
    EncodeDemo {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the scene as a binary dump.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Finite-difference check of the full model's gradients.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
    /// Train one configuration into a fresh output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the depth × gating × seed grid.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated injection depths (default 0,3,6,9,L_dec).
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        /// Comma-separated gating modes (default none,sem,sem+glo).
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<GatingMode>>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Cells to run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate traces (files or directories) into report.csv / report.json.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat JSON config file; `--key value` pairs after it override single keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides, e.g. `--m 3 --gating sem`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> guide::Result<RunConfig> {
        let pairs = parse_overrides(&self.overrides)?;
        let cfg = RunConfig::load(self.config.as_deref(), &pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_overrides(raw: &[String]) -> guide::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::config(flag.clone(), "expected --key value"))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it
            .next()
            .ok_or_else(|| Error::config(key.to_string(), "missing value"))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

enum Failure {
    Validation(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::NonDeterministic { .. } => Failure::Numerical(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("values serialise"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Plan { h, w, pv, pg } => {
            let plan = plan_alignment(h, w, pv, pg)?;
            println!("{}", serde_json::to_string(&plan).map_err(Error::from)?);
        }
        Command::EncodeDemo { run, dump } => {
            let cfg = run.load()?;
            encode_demo(&cfg, dump.as_deref())?;
        }
        Command::GradCheck {
            seed,
            epsilon,
            tolerance,
            batch,
        } => {
            let cfg = grad_check_config(seed);
            let check = model_grad_check(&cfg, batch, epsilon, tolerance)?;
            print_json(&serde_json::to_value(&check).map_err(Error::from)?);
            println!("max relative error {:.3e} (tolerance {:.0e})", check.max_rel_error, tolerance);
            if !check.passed {
                return Err(Failure::Numerical(format!(
                    "gradient check failed: max relative error {:.3e} > {tolerance:.0e}",
                    check.max_rel_error
                )));
            }
        }
        Command::Train { run, out } => {
            let cfg = run.load()?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}", AblationGrid::cell_name(&cfg))));
            let summary = run_single(&cfg, &dir)?;
            print_json(&json!({
                "dir": summary.dir,
                "final": summary.final_record,
            }));
        }
        Command::Ablate {
            run,
            out,
            depths,
            modes,
            seeds,
            jobs,
        } => {
            let cfg = run.load()?;
            let mut grid = AblationGrid::with_defaults(cfg);
            if let Some(d) = depths {
                grid.depths = d;
            }
            if let Some(m) = modes {
                grid.modes = m;
            }
            grid.seeds = seeds;
            if grid.depths.contains(&0) && grid.modes.len() > 1 {
                warn!("depth 0 ignores gating; its rows repeat the same baseline for every mode");
            }
            let summaries = grid.run(&out, jobs)?;
            for s in &summaries {
                println!("{}\t{:.4}", s.dir.display(), s.final_record.eval_acc);
            }
        }
        Command::Report { inputs, out } => {
            let traces = collect_traces(&inputs)?;
            let report = aggregate(&traces)?;
            report.write(&out)?;
            print!("{}", report.to_table());
            if report.checks.iter().any(|c| c.status == CheckStatus::Fail) {
                warn!("at least one ordering check failed (m = {PROBE_DEPTH} comparisons)");
            }
        }
    }
    Ok(())
}

fn encode_demo(cfg: &RunConfig, dump: Option<&Path>) -> guide::Result<()> {
    let plan = plan_alignment(cfg.h, cfg.w, cfg.p_v, cfg.p_g)?;
    let scene = generate_scene(&cfg.scene_config(), cfg.seed)?;
    if let Some(path) = dump {
        write_scene_dump(std::io::BufWriter::new(std::fs::File::create(path)?), &scene)?;
    }
    let frames = resize_bilinear(&scene.frames, plan.resized)?;
    let (n, h, w) = (scene.num_frames(), scene.height(), scene.width());
    let depth = resize_bilinear(&scene.depth.clone().reshape(&[n, h, w, 1])?, plan.resized)?
        .reshape(&[n, plan.resized.0, plan.resized.1])?;
    let params = EncoderParams {
        layers: cfg.k,
        channels: cfg.c_geo,
        patch: cfg.p_g,
    };
    let stack = encode_frames(&frames, &depth, &params, cfg.seed)?;
    let dependence = if n >= 2 {
        Some(cross_frame_dependence(&frames, &depth, &params, cfg.seed)?)
    } else {
        None
    };
    let schedule = sample_layers(cfg.k, cfg.m)?;
    print_json(&json!({
        "plan": plan,
        "schedule": schedule,
        "layers": stack.layers.iter().enumerate().map(|(i, t)| json!({
            "layer": i + 1,
            "shape": t.shape(),
            "cross_frame_dependence": dependence.as_ref().map(|d| d[i]),
        })).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
