//! The `rstv` command line. Every subcommand resolves one [`PipelineConfig`]
//! (JSON file, then flag overrides) and derives all randomness from its seed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::domain::BoundingBox;
use crate::error::Error;
use crate::eval::{ablate_motion, ablation_csv, evaluate, report_csv, sweep_window, window_csv, write_report};
use crate::manifest::{Sequence, SequenceManifest};
use crate::motioncomp::{train_shift_pair, CnnShiftRegressor, ShiftRegressor};
use crate::pipeline::{aligned_boxes, fit_model, sequence_descriptors, Alignment, FeatureMatrix, PipelineConfig};
use crate::regress::{ModelKind, PoseModel, PoseRegressor};
use crate::seed;
use crate::selftest;
use crate::synth::{gen_sequence, jitter_boxes, jitter_manifest, write_sequence, JitterConfig, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "rstv", version, about = "3D pose regression from rectified spatiotemporal volumes")]
struct Cli {
    /// Pipeline configuration (JSON); defaults to the desk profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use full-size embeddings (15000/4000) and 3000-unit DN layers.
    #[arg(long, global = true)]
    paper_dims: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Temporal window T; overrides the config file.
    #[arg(long, global = true)]
    window: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic walker sequence (PGM frames + manifest).
    SynthGen {
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 0.0)]
        phase: f64,
    },
    /// Perturb a manifest's boxes with uniform detector noise.
    Jitter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 12.0)]
        max_shift: f64,
    },
    /// Train the coarse and fine shift regressors on ground-truth boxes.
    TrainShift {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Replace a manifest's boxes with motion-compensated ones.
    Compensate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        shift: PathBuf,
    },
    /// Extract 3D HOG descriptors for every full window.
    Features {
        #[command(flatten)]
        input: Input,
    },
    /// Fit a pose regressor.
    Train {
        #[command(flatten)]
        input: Input,
        /// Precomputed feature file; poses still come from the manifest.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value = "krr")]
        model: ModelKind,
    },
    /// Predict poses for every full window of a sequence.
    Predict {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a model on a sequence with ground-truth poses.
    Eval {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model: PathBuf,
    },
    /// STV vs RSTV on jittered boxes, per model kind.
    AblateMotion {
        #[command(flatten)]
        pair: TrainTest,
        #[arg(long, default_value_t = 12.0)]
        jitter: f64,
        #[arg(long, value_delimiter = ',', default_value = "krr,dn")]
        models: Vec<ModelKind>,
        /// Trained shift regressors; trained on the training sequence if absent.
        #[arg(long)]
        shift: Option<PathBuf>,
    },
    /// Train and evaluate once per temporal window size.
    SweepWindow {
        #[command(flatten)]
        pair: TrainTest,
        #[arg(long, value_delimiter = ',', default_value = "4,12,24")]
        windows: Vec<usize>,
        #[arg(long, default_value = "krr")]
        model: ModelKind,
        /// Align with these shift regressors instead of the manifest boxes.
        #[arg(long)]
        shift: Option<PathBuf>,
    },
    /// Run the embedded invariant suite.
    Selftest,
}

#[derive(Args, Debug)]
struct Input {
    #[arg(long)]
    manifest: PathBuf,
    /// Shift regressors from `train-shift`; without them the manifest boxes are used.
    #[arg(long)]
    shift: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainTest {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Shifts {
    coarse: CnnShiftRegressor,
    fine: CnnShiftRegressor,
}

impl Shifts {
    fn load(dir: &Path) -> CliResult<Self> {
        Ok(Self {
            coarse: CnnShiftRegressor::load(&dir.join("coarse.nnet"))?,
            fine: CnnShiftRegressor::load(&dir.join("fine.nnet"))?,
        })
    }

    fn alignment(&self) -> Alignment<'_> {
        Alignment::Compensate {
            coarse: &self.coarse as &dyn ShiftRegressor,
            fine: &self.fine as &dyn ShiftRegressor,
        }
    }
}

fn alignment(shifts: &Option<Shifts>) -> Alignment<'_> {
    shifts.as_ref().map_or(Alignment::Boxes, Shifts::alignment)
}

fn load_shifts(dir: &Option<PathBuf>) -> CliResult<Option<Shifts>> {
    dir.as_deref().map(Shifts::load).transpose()
}

fn load_sequence(path: &Path) -> CliResult<Sequence> {
    Ok(SequenceManifest::load(path)?.load_sequence()?)
}

fn resolve_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk(),
    };
    if cli.paper_dims {
        cfg = cfg.paper_dims();
    }
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(t) = cli.window {
        cfg.window = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cli: &Cli) -> CliResult<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--out is required for {}", command_name(&cli.cmd))))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::SynthGen { .. } => "synth-gen",
        Command::Jitter { .. } => "jitter",
        Command::TrainShift { .. } => "train-shift",
        Command::Compensate { .. } => "compensate",
        Command::Features { .. } => "features",
        Command::Train { .. } => "train",
        Command::Predict { .. } => "predict",
        Command::Eval { .. } => "eval",
        Command::AblateMotion { .. } => "ablate-motion",
        Command::SweepWindow { .. } => "sweep-window",
        Command::Selftest => "selftest",
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Run(Error::io(dir, e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::Run(Error::io(path, e)))
}

#[derive(Serialize)]
struct Prediction {
    frame: usize,
    joints: Vec<[f64; 3]>,
}

#[derive(Serialize)]
struct Predictions<'a> {
    config_hash: String,
    config: &'a PipelineConfig,
    predictions: Vec<Prediction>,
}

fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    match &cli.cmd {
        Command::SynthGen { frames, phase } => {
            let seq = gen_sequence(&SynthConfig {
                frames: *frames,
                phase: *phase,
                seed: cfg.seed,
                ..Default::default()
            })?;
            write_sequence(&seq, out_path(cli)?)?;
        }
        Command::Jitter { manifest, max_shift } => {
            let dir = out_path(cli)?;
            let m = SequenceManifest::load(manifest)?;
            let (jm, offsets) = jitter_manifest(&m, &JitterConfig::uniform(*max_shift, seed::derive(cfg.seed, "jitter")))?;
            create_dir(dir)?;
            jm.save(&dir.join("manifest.json"))?;
            write_json(&dir.join("offsets.json"), &offsets)?;
        }
        Command::TrainShift { manifest } => {
            let dir = out_path(cli)?;
            let seq = load_sequence(manifest)?;
            let (coarse, fine) = train_shift_pair(&seq.frames, seq.boxes()?, &cfg.compensation, cfg.shift_seed())?;
            create_dir(dir)?;
            coarse.save(&dir.join("coarse.nnet"))?;
            fine.save(&dir.join("fine.nnet"))?;
        }
        Command::Compensate { manifest, shift } => {
            let dir = out_path(cli)?;
            let m = SequenceManifest::load(manifest)?;
            let seq = m.load_sequence()?;
            let shifts = Shifts::load(shift)?;
            let boxes = aligned_boxes(&seq, shifts.alignment(), &cfg.compensation)?;
            create_dir(dir)?;
            SequenceManifest {
                boxes: Some(boxes),
                ..m
            }
            .save(&dir.join("manifest.json"))?;
        }
        Command::Features { input } => {
            let out = out_path(cli)?;
            let seq = load_sequence(&input.manifest)?;
            let shifts = load_shifts(&input.shift)?;
            let align = alignment(&shifts);
            let d = sequence_descriptors(&seq, align, &cfg)?;
            FeatureMatrix::from_descriptors(&d, align.variant(), &cfg)?.save(out)?;
        }
        Command::Train { input, features, model } => {
            let out = out_path(cli)?;
            let seq = load_sequence(&input.manifest)?;
            let d = match features {
                Some(f) => FeatureMatrix::load(f)?.descriptors(),
                None => {
                    let shifts = load_shifts(&input.shift)?;
                    sequence_descriptors(&seq, alignment(&shifts), &cfg)?
                }
            };
            fit_model(*model, &d, seq.poses()?, &cfg)?.save(out)?;
        }
        Command::Predict { input, model } => {
            let out = out_path(cli)?;
            let seq = load_sequence(&input.manifest)?;
            let shifts = load_shifts(&input.shift)?;
            let d = sequence_descriptors(&seq, alignment(&shifts), &cfg)?;
            let m = PoseModel::load(model)?;
            let xs: Vec<Vec<f32>> = d.iter().map(|x| x.values.clone()).collect();
            let poses = m.predict_batch(&xs)?;
            let predictions = d
                .iter()
                .zip(poses)
                .map(|(x, p)| Prediction {
                    frame: x.source.map_or(0, |s| s.center),
                    joints: p.joints,
                })
                .collect();
            write_json(
                out,
                &Predictions {
                    config_hash: cfg.hash(),
                    config: &cfg,
                    predictions,
                },
            )?;
        }
        Command::Eval { input, model } => {
            let dir = out_path(cli)?;
            let seq = load_sequence(&input.manifest)?;
            let shifts = load_shifts(&input.shift)?;
            let m = PoseModel::load(model)?;
            let r = evaluate(&m, &seq, alignment(&shifts), &cfg)?;
            let (csv, _) = write_report(dir, "eval", &cfg, &report_csv(&r), &r)?;
            println!("mean MPJPE {:.2} mm over {} frames ({} excluded); {}", r.mean, r.per_frame.len(), r.excluded, csv.display());
        }
        Command::AblateMotion { pair, jitter, models, shift } => {
            let dir = out_path(cli)?;
            let train = load_sequence(&pair.train)?;
            let test = load_sequence(&pair.test)?;
            let shifts = match shift {
                Some(s) => Shifts::load(s)?,
                None => {
                    let (coarse, fine) = train_shift_pair(&train.frames, train.boxes()?, &cfg.compensation, cfg.shift_seed())?;
                    Shifts { coarse, fine }
                }
            };
            let jt = train.with_boxes(jitter_boxes_for(&train, *jitter, cfg.seed, "ablate-train")?);
            let js = test.with_boxes(jitter_boxes_for(&test, *jitter, cfg.seed, "ablate-test")?);
            let rows = ablate_motion(&jt, &js, &cfg, &[Alignment::Boxes, shifts.alignment()], models)?;
            let csv = ablation_csv(&rows);
            write_report(dir, "ablation", &cfg, &csv, &rows)?;
            print!("{csv}");
        }
        Command::SweepWindow { pair, windows, model, shift } => {
            let dir = out_path(cli)?;
            let train = load_sequence(&pair.train)?;
            let test = load_sequence(&pair.test)?;
            let shifts = load_shifts(shift)?;
            let rows = sweep_window(&train, &test, &cfg, windows, *model, alignment(&shifts))?;
            let csv = window_csv(&rows);
            write_report(dir, "window-sweep", &cfg, &csv, &rows)?;
            print!("{csv}");
        }
        Command::Selftest => {
            let r = selftest::run(cfg.seed)?;
            for c in &r.checks {
                println!("{} {} ({:.3e} <= {:.1e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.bound);
            }
            if let Some(dir) = &cli.out {
                create_dir(dir)?;
                let path = dir.join(format!("selftest-{}.json", cfg.hash()));
                std::fs::write(&path, r.to_json()).map_err(|e| CliError::Run(Error::io(&path, e)))?;
            }
            if !r.passed {
                return Err(CliError::Run(Error::Numerical("selftest failed".into())));
            }
        }
    }
    Ok(())
}

fn jitter_boxes_for(seq: &Sequence, max: f64, seed_: u64, label: &str) -> CliResult<Vec<BoundingBox>> {
    Ok(jitter_boxes(seq.boxes()?, &JitterConfig::uniform(max, seed::derive(seed_, label)))?.0)
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns 0 on success, 2 on usage errors and 1 on runtime errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return 2;
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
