//! `simulate`, `analyze` and `calibrate-pivot`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcmsim_core::rcm::{self, PivotResult};
use rcmsim_core::report::{build_report, write_report, Report};
use rcmsim_core::sim::{
    read_operator_csv, read_trials_csv, run_experiment_with, stream_seed, write_events_csv,
    write_operator_csv, write_trace_csv, write_trials_csv, Dataset, ExperimentConfig, RunOptions,
};
use rcmsim_core::{KinematicChain, Pose};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const TRIALS_FILE: &str = "trials.csv";
pub const OPERATORS_FILE: &str = "operators.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_DIR: &str = "trace";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Everything needed to regenerate a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub versions: BTreeMap<String, String>,
    pub config_file: String,
    pub config_sha256: String,
    /// Verbatim text of the configuration that produced the outputs.
    pub config_text: String,
    pub seed: u64,
    pub board_seed: u64,
    pub resolved_config: ExperimentConfig,
    pub geometry_table: String,
    pub records: usize,
    pub outputs: Vec<OutputEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn config(&self) -> Result<RunConfig, CliError> {
        Ok(RunConfig::parse(&self.config_text)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    /// Overrides `output_dir` from the config.
    pub out: Option<PathBuf>,
    pub trace: bool,
    pub threads: usize,
}

#[derive(Debug)]
pub struct SimulateOutput {
    pub dir: PathBuf,
    pub dataset: Dataset,
    pub manifest: Manifest,
}

/// Run the experiment described by a config file and write its outputs.
pub fn simulate(config_path: &Path, options: &SimulateOptions) -> Result<SimulateOutput, CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| CliError::io(config_path, e))?;
    let name = config_path.file_name().map_or_else(
        || config_path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    simulate_text(&text, &name, options)
}

/// As [`simulate`] with the config given as text.
pub fn simulate_text(
    text: &str,
    config_name: &str,
    options: &SimulateOptions,
) -> Result<SimulateOutput, CliError> {
    let config = RunConfig::parse(text)?;
    let experiment = config.resolve()?;
    let dir = options
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let chain = KinematicChain::canonical();

    let trace_dir = dir.join(TRACE_DIR);
    if options.trace {
        fs::create_dir_all(&trace_dir).map_err(|e| CliError::io(&trace_dir, e))?;
    }
    let mut trace_error = None;
    let run_options = RunOptions {
        threads: options.threads.max(1),
        trace: options.trace,
    };
    let dataset = run_experiment_with(&experiment, &chain, run_options, |id, condition, rows| {
        if trace_error.is_some() {
            return;
        }
        let path = trace_dir.join(format!("op{id:02}_{condition}.csv"));
        let result = fs::File::create(&path)
            .map_err(|e| CliError::io(&path, e))
            .and_then(|f| {
                write_trace_csv(std::io::BufWriter::new(f), rows).map_err(CliError::from)
            });
        if let Err(e) = result {
            trace_error = Some(e);
        }
    })?;
    if let Some(e) = trace_error {
        return Err(e);
    }

    let mut outputs = Vec::new();
    let mut emit = |file: &str, bytes: Vec<u8>| -> Result<(), CliError> {
        let path = dir.join(file);
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        outputs.push(OutputEntry {
            file: file.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        });
        Ok(())
    };
    let mut buf = Vec::new();
    write_trials_csv(&mut buf, &dataset.records)?;
    emit(TRIALS_FILE, buf)?;
    let mut buf = Vec::new();
    write_operator_csv(&mut buf, &dataset.summaries)?;
    emit(OPERATORS_FILE, buf)?;
    let mut buf = Vec::new();
    write_events_csv(&mut buf, &dataset.events)?;
    emit(EVENTS_FILE, buf)?;

    let versions = BTreeMap::from([
        (
            "rcmsim-cli".to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        ),
        ("rcmsim-core".to_string(), rcmsim_core::VERSION.to_string()),
    ]);
    let manifest = Manifest {
        tool: "rcmsim".into(),
        versions,
        config_file: config_name.to_string(),
        config_sha256: sha256_hex(text.as_bytes()),
        config_text: text.to_string(),
        seed: experiment.seed,
        board_seed: experiment.board_seed,
        resolved_config: experiment,
        geometry_table: chain.to_string(),
        records: dataset.records.len(),
        outputs,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    Ok(SimulateOutput {
        dir,
        dataset,
        manifest,
    })
}

/// Analyze a trials file; a sibling `operators.csv` adds the ergonomic
/// comparison. Outputs go next to the input unless `out` is given.
pub fn analyze(trials_path: &Path, out: Option<&Path>) -> Result<(Report, Vec<PathBuf>), CliError> {
    let file = fs::File::open(trials_path).map_err(|e| CliError::io(trials_path, e))?;
    let records = read_trials_csv(std::io::BufReader::new(file))?;
    let parent = trials_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let operators_path = parent.join(OPERATORS_FILE);
    let operators = if operators_path.is_file() {
        let f = fs::File::open(&operators_path).map_err(|e| CliError::io(&operators_path, e))?;
        Some(read_operator_csv(std::io::BufReader::new(f))?)
    } else {
        None
    };
    let report = build_report(&records, operators.as_deref())?;
    let dir = out.unwrap_or(parent);
    let written = write_report(&report, dir)?;
    Ok((report, written))
}

pub enum PivotSource {
    File(PathBuf),
    Synthesize { seed: u64, noise_mm: f64 },
}

/// Ground truth used by `--synthesize`.
pub const SYNTH_TIP_OFFSET: [f64; 3] = [2.0, -3.0, 180.0];
pub const SYNTH_PIVOT: [f64; 3] = [100.0, 0.0, 700.0];
pub const SYNTH_POSES: usize = 40;

pub struct PivotOutcome {
    pub poses: Vec<Pose>,
    pub result: PivotResult,
    /// Known tip offset and pivot for synthesized data.
    pub truth: Option<(Vector3<f64>, Vector3<f64>)>,
}

impl PivotOutcome {
    pub fn render(&self) -> String {
        let v = |x: &Vector3<f64>| format!("{:.6} {:.6} {:.6}", x.x, x.y, x.z);
        let mut s = format!(
            "poses {}\nt_mm {}\np_mm {}\nrms_mm {:.3e}\n",
            self.poses.len(),
            v(&self.result.tip_offset),
            v(&self.result.pivot),
            self.result.rms_residual
        );
        if let Some((t, p)) = &self.truth {
            s.push_str(&format!(
                "t_error_mm {:.3e}\np_error_mm {:.3e}\n",
                (self.result.tip_offset - t).norm(),
                (self.result.pivot - p).norm()
            ));
        }
        s
    }
}

pub fn calibrate_pivot(
    source: &PivotSource,
    poses_out: Option<&Path>,
) -> Result<PivotOutcome, CliError> {
    let (poses, truth) = match source {
        PivotSource::File(path) => {
            let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
            (rcm::read_pose_csv(std::io::BufReader::new(f))?, None)
        }
        PivotSource::Synthesize { seed, noise_mm } => {
            if !(*noise_mm >= 0.0) || !noise_mm.is_finite() {
                return Err(CliError::Usage(format!(
                    "noise must be a non-negative number of mm, got {noise_mm}"
                )));
            }
            let t = Vector3::from(SYNTH_TIP_OFFSET);
            let p = Vector3::from(SYNTH_PIVOT);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(*seed, &[0x9170]));
            let poses = rcm::synthesize_pivot_poses(SYNTH_POSES, &t, &p, *noise_mm, &mut rng);
            (poses, Some((t, p)))
        }
    };
    if let Some(path) = poses_out {
        let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        rcm::write_pose_csv(std::io::BufWriter::new(f), &poses)
            .map_err(|e| CliError::io(path, e))?;
    }
    let result = rcm::pivot_calibrate(&poses)?;
    Ok(PivotOutcome {
        poses,
        result,
        truth,
    })
}
