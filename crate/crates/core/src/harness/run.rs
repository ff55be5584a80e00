use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{plan_alignment, AlignmentPlan};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geo::{sample_layers, InjectionSchedule};
use crate::tensor::write_named_tensors;
use crate::training::{train, TraceRecord, TrainOutcome};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.gtns";
pub const PLOT_FILE: &str = "plot.csv";

/// `git describe` of the tree this binary was built from.
pub fn build_stamp() -> &'static str {
    env!("GUIDE_BUILD_STAMP")
}

/// Everything needed to rerun a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub build: String,
    pub seed: u64,
    pub config: RunConfig,
    pub plan: AlignmentPlan,
    pub schedule: InjectionSchedule,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            build: build_stamp().to_string(),
            seed: config.seed,
            config: config.clone(),
            plan: plan_alignment(config.h, config.w, config.p_v, config.p_g)?,
            schedule: sample_layers(config.k, config.m)?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Create `dir`, refusing to reuse one that already has content.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() || fs::read_dir(dir)?.next().is_some() {
            return Err(Error::OutputOccupied(dir.to_path_buf()));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub final_record: TraceRecord,
}

const PLOT_HEADER: &str = "step,loss,train_acc,eval_acc,lr,mean_abs_tanh_alpha";

fn plot_row(r: &TraceRecord) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.step,
        r.loss,
        r.train_acc,
        r.eval_acc,
        r.lr,
        r.mean_gate_abs_tanh()
    )
}

/// Train `config` and write `manifest.json`, `trace.jsonl`, `checkpoint.gtns`
/// and `plot.csv` into `dir`, which must be empty or absent.
pub fn run_single(config: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let manifest = Manifest::new(config)?;
    prepare_output_dir(dir)?;
    let mut resolved = config.clone();
    resolved.output_dir = Some(dir.to_path_buf());
    Manifest { config: resolved, ..manifest }.write(dir)?;

    let mut trace = BufWriter::new(File::create(dir.join(TRACE_FILE))?);
    let mut plot = BufWriter::new(File::create(dir.join(PLOT_FILE))?);
    writeln!(plot, "{PLOT_HEADER}")?;
    let mut sink = |r: &TraceRecord| -> Result<()> {
        serde_json::to_writer(&mut trace, r)?;
        trace.write_all(b"\n")?;
        trace.flush()?;
        writeln!(plot, "{}", plot_row(r))?;
        Ok(())
    };
    let TrainOutcome { model, trace: records } = train(config, &mut sink)?;
    drop(sink);
    trace.flush()?;
    plot.flush()?;
    write_named_tensors(File::create(dir.join(CHECKPOINT_FILE))?, &model.store.to_named())?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        final_record: records.last().cloned().expect("final step is logged"),
    })
}

/// Parse a `trace.jsonl` file. Unknown or missing fields are rejected by name.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}:{}: trace schema mismatch: {e}", path.display(), i + 1)))
        })
        .collect()
}
