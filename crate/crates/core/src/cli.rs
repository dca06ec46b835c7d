//! Command-line front end: `synth`, `train`, `eval`, `predict` and `explain`,
//! all driven by one JSON run config. Every output lands in the run's
//! output directory next to an echo of the effective config.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dataset, split, HuWindow, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::gradcam::{explain_slice, heatmap_stem, write_heatmaps, CamNorm};
use crate::metrics::{ClassificationSummary, ConfusionCounts, IntervalMethod, MetricsReport};
use crate::models::{load_checkpoint, save_checkpoint, ModelBundle, NetworkSpec, Stage};
use crate::pipeline::{predict_patient, preprocess, stage1_filter, write_verdicts, PatientVerdict, PipelineConfig, Volume};
use crate::train::{stage1_examples, stage2_examples, train, write_loss_log, Examples, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Where `synth` writes the dataset.
    pub data_dir: PathBuf,
    /// Defaults to `<data_dir>/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/stage1.ckpt`.
    pub stage1_checkpoint: Option<PathBuf>,
    /// Defaults to `<output_dir>/stage2.ckpt`.
    pub stage2_checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            manifest: None,
            output_dir: "run".into(),
            stage1_checkpoint: None,
            stage2_checkpoint: None,
        }
    }
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.data_dir.join("manifest.json"))
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        let (given, name) = match stage {
            Stage::One => (&self.stage1_checkpoint, "stage1.ckpt"),
            Stage::Two => (&self.stage2_checkpoint, "stage2.ckpt"),
        };
        given.clone().unwrap_or_else(|| self.output_dir.join(name))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ci_level: f64,
    pub ci_method: IntervalMethod,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            ci_level: 0.95,
            ci_method: IntervalMethod::Wilson,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub hu_window: HuWindow,
    pub split: SplitSpec,
    pub stage1: NetworkSpec,
    pub stage2: NetworkSpec,
    pub training: TrainConfig,
    pub pipeline: PipelineConfig,
    pub metrics: MetricsConfig,
    pub cam_norm: CamNorm,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            synth: SynthConfig::default(),
            hu_window: HuWindow::default(),
            split: SplitSpec::default(),
            stage1: NetworkSpec::desk(Stage::One),
            stage2: NetworkSpec::desk(Stage::Two),
            training: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            metrics: MetricsConfig::default(),
            cam_norm: CamNorm::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.split.validate()?;
        self.stage1.validate(Stage::One)?;
        self.stage2.validate(Stage::Two)?;
        if self.stage1.input_size != self.stage2.input_size {
            return Err(Error::Config("stage one and stage two must share the input size".into()));
        }
        if !(self.hu_window.width > 0.0) {
            return Err(Error::Config("HU window width must be positive".into()));
        }
        self.training.validate()?;
        self.pipeline.validate()?;
        if !(self.metrics.ci_level > 0.0 && self.metrics.ci_level < 1.0) {
            return Err(Error::Config("CI level must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Writes the effective config to `<output_dir>/config.json`.
    pub fn write_echo(&self) -> Result<PathBuf> {
        let dir = &self.paths.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        write_json(&path, self)?;
        Ok(path)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push(b'\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Parser, Debug)]
#[command(name = "ctcaps", version, about = "Two-stage capsule-network classifier for chest CT volumes")]
pub struct Cli {
    /// Run config (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `paths.output_dir`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    One,
    Two,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::One => Stage::One,
            StageArg::Two => Stage::Two,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic dataset.
    Synth {
        /// Overrides `paths.data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients_per_class: Option<usize>,
    },
    /// Train one stage and save the checkpoint with the lowest validation loss.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Score the test split and write metrics, ROC table and verdicts.
    Eval {
        #[arg(long)]
        cutoff: Option<f64>,
    },
    /// Two-stage verdict for one patient of the manifest.
    Predict {
        #[arg(long)]
        patient: String,
        /// Overrides `paths.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        cutoff: Option<f64>,
    },
    /// Grad-CAM heatmap for one slice.
    Explain {
        #[arg(long)]
        patient: String,
        /// Slice index in the raw volume.
        #[arg(long)]
        slice: usize,
        /// Conv layer, 1 to 4.
        #[arg(long)]
        layer: usize,
        /// 0 = positive capsule, 1 = negative capsule.
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long, value_enum, default_value_t = StageArg::One)]
        stage: StageArg,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.output_dir {
        cfg.paths.output_dir = d;
    }
    match cli.command {
        Command::Synth {
            out,
            seed,
            patients_per_class,
        } => {
            if let Some(o) = out {
                cfg.paths.data_dir = o;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            if let Some(n) = patients_per_class {
                cfg.synth.patients_per_class = n;
            }
            cfg.validate()?;
            let summary = generate_synthetic(&cfg.synth, &cfg.paths.data_dir)?;
            cfg.write_echo()?;
            println!("{summary} written to {}", cfg.paths.data_dir.display());
        }
        Command::Train {
            stage,
            epochs,
            seed,
            learning_rate,
        } => {
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            if let Some(lr) = learning_rate {
                cfg.training.learning_rate = lr;
            }
            cfg.validate()?;
            cfg.write_echo()?;
            let summary = cmd_train(&cfg, stage.into())?;
            println!(
                "stage {}: best epoch {} of {} (validation loss {})",
                summary.stage,
                summary.best_epoch,
                summary.epochs,
                summary.best_val_loss.map_or("n/a".into(), |l| l.to_string())
            );
        }
        Command::Eval { cutoff } => {
            if let Some(c) = cutoff {
                cfg.pipeline.cutoff = c;
            }
            cfg.validate()?;
            cfg.write_echo()?;
            let report = cmd_eval(&cfg)?;
            let p = &report.patients;
            println!(
                "accuracy {:.4}  sensitivity {:.4}  specificity {:.4}  AUC {:.4}",
                p.accuracy.value, p.sensitivity.value, p.specificity.value, report.auc.value
            );
        }
        Command::Predict {
            patient,
            manifest,
            cutoff,
        } => {
            if let Some(m) = manifest {
                cfg.paths.manifest = Some(m);
            }
            if let Some(c) = cutoff {
                cfg.pipeline.cutoff = c;
            }
            cfg.validate()?;
            cfg.write_echo()?;
            let v = cmd_predict(&cfg, &patient)?;
            println!("{}", serde_json::to_string(&v).expect("verdicts serialise"));
        }
        Command::Explain {
            patient,
            slice,
            layer,
            class,
            stage,
            manifest,
        } => {
            if let Some(m) = manifest {
                cfg.paths.manifest = Some(m);
            }
            cfg.validate()?;
            cfg.write_echo()?;
            let (cam, overlay) = cmd_explain(&cfg, &patient, slice, layer, class, stage.into())?;
            println!("{}\n{}", cam.display(), overlay.display());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub train_examples: usize,
    pub train_positive: usize,
    pub val_examples: usize,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

struct Partitions {
    train: Vec<Volume>,
    val: Vec<Volume>,
    test: Vec<Volume>,
}

fn load_partitions(cfg: &RunConfig) -> Result<Partitions> {
    let volumes = load_dataset(cfg.paths.manifest(), cfg.hu_window)?;
    let s = split(&volumes, &cfg.split)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| volumes[i].clone()).collect();
    Ok(Partitions {
        train: pick(&s.train),
        val: pick(&s.val),
        test: pick(&s.test),
    })
}

fn load_stage(cfg: &RunConfig, stage: Stage) -> Result<ModelBundle> {
    let path = cfg.paths.checkpoint(stage);
    let m = load_checkpoint(&path)?;
    if m.stage != stage {
        return Err(Error::Data(format!(
            "{}: holds a stage-{} model, expected stage {stage}",
            path.display(),
            m.stage
        )));
    }
    Ok(m)
}

fn refs(v: &[Volume]) -> Vec<&Volume> {
    v.iter().collect()
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage) -> Result<TrainSummary> {
    let parts = load_partitions(cfg)?;
    let (model, tr, va): (ModelBundle, Examples, Examples) = match stage {
        Stage::One => {
            let spec = &cfg.stage1;
            (
                ModelBundle::build(Stage::One, spec)?,
                stage1_examples(&refs(&parts.train), spec.input_size)?,
                stage1_examples(&refs(&parts.val), spec.input_size)?,
            )
        }
        Stage::Two => {
            let m1 = load_stage(cfg, Stage::One)?;
            (
                ModelBundle::build(Stage::Two, &cfg.stage2)?,
                stage2_examples(&refs(&parts.train), &m1, &cfg.pipeline)?,
                stage2_examples(&refs(&parts.val), &m1, &cfg.pipeline)?,
            )
        }
    };
    let out = train(model, &tr, &va, &cfg.training)?;
    let dir = &cfg.paths.output_dir;
    let n = if stage == Stage::One { 1 } else { 2 };
    let checkpoint = cfg.paths.checkpoint(stage);
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_checkpoint(&out.best, &checkpoint)?;
    let loss_log = dir.join(format!("loss_stage{n}.csv"));
    write_loss_log(&loss_log, &out.log)?;
    let summary = TrainSummary {
        stage,
        epochs: cfg.training.epochs,
        best_epoch: out.best_epoch,
        best_val_loss: out.log[out.best_epoch - 1].val_loss,
        train_examples: tr.len(),
        train_positive: tr.counts().0,
        val_examples: va.len(),
        checkpoint,
        loss_log,
    };
    write_json(&dir.join(format!("train_stage{n}.json")), &summary)?;
    Ok(summary)
}

/// Stage-one slice calls against slice labels over `volumes`; `None` when no
/// slice is labelled or a rate is undefined (single-class slice set).
fn slice_summary(volumes: &[Volume], m1: &ModelBundle, cfg: &RunConfig) -> Result<Option<ClassificationSummary>> {
    let mut pairs = Vec::new();
    for v in volumes {
        let pre = preprocess(v, m1.spec.input_size)?;
        let s1 = stage1_filter(&pre, m1, cfg.pipeline.selection)?;
        for (i, s) in pre.slices.iter().enumerate() {
            if let Some(y) = s.infection_label {
                pairs.push((s1.selected.binary_search(&i).is_ok(), y));
            }
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    Ok(ClassificationSummary::from_counts(
        ConfusionCounts::from_pairs(pairs),
        cfg.metrics.ci_level,
        cfg.metrics.ci_method,
    )
    .ok())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let parts = load_partitions(cfg)?;
    let test: Vec<&Volume> = parts.test.iter().filter(|v| v.label.is_covid().is_some()).collect();
    if test.is_empty() {
        return Err(Error::Data("test split has no labelled patients".into()));
    }
    let m1 = load_stage(cfg, Stage::One)?;
    let m2 = load_stage(cfg, Stage::Two)?;
    let verdicts: Vec<PatientVerdict> = test
        .par_iter()
        .map(|v| predict_patient(v, &m1, &m2, &cfg.pipeline))
        .collect::<Result<_>>()?;
    let scores: Vec<(f64, bool)> = verdicts
        .iter()
        .map(|v| (v.patient_prob, v.label.is_covid() == Some(true)))
        .collect();
    let pos = scores.iter().filter(|s| s.1).count();
    if pos == 0 || pos == scores.len() {
        return Err(Error::Data(format!(
            "test split has a single class ({pos} COVID of {}); ROC is undefined",
            scores.len()
        )));
    }
    let (mut report, roc) = MetricsReport::from_scores(
        &scores,
        cfg.pipeline.cutoff,
        cfg.metrics.ci_level,
        cfg.metrics.ci_method,
    )?;
    report.slices = slice_summary(&parts.test, &m1, cfg)?;
    let dir = &cfg.paths.output_dir;
    write_json(&dir.join("metrics.json"), &report)?;
    roc.write_csv(dir.join("roc.csv"))?;
    write_verdicts(dir.join("verdicts.jsonl"), &verdicts)?;
    Ok(report)
}

fn find_patient(cfg: &RunConfig, patient: &str) -> Result<Volume> {
    load_dataset(cfg.paths.manifest(), cfg.hu_window)?
        .into_iter()
        .find(|v| v.patient_id == patient)
        .ok_or_else(|| Error::Data(format!("patient {patient} is not in {}", cfg.paths.manifest().display())))
}

pub fn cmd_predict(cfg: &RunConfig, patient: &str) -> Result<PatientVerdict> {
    let v = find_patient(cfg, patient)?;
    let m1 = load_stage(cfg, Stage::One)?;
    let m2 = load_stage(cfg, Stage::Two)?;
    let verdict = predict_patient(&v, &m1, &m2, &cfg.pipeline)?;
    let dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_verdicts(dir.join(format!("verdict_{patient}.jsonl")), std::slice::from_ref(&verdict))?;
    Ok(verdict)
}

pub fn cmd_explain(
    cfg: &RunConfig,
    patient: &str,
    slice: usize,
    layer: usize,
    class: usize,
    stage: Stage,
) -> Result<(PathBuf, PathBuf)> {
    if !(1..=4).contains(&layer) {
        return Err(Error::InvalidArgument(format!("layer must be 1 to 4, got {layer}")));
    }
    if class > 1 {
        return Err(Error::InvalidArgument(format!("class must be 0 or 1, got {class}")));
    }
    let v = find_patient(cfg, patient)?;
    if slice >= v.slices.len() {
        return Err(Error::InvalidArgument(format!(
            "patient {patient} has {} slices, slice {slice} is out of range",
            v.slices.len()
        )));
    }
    let model = load_stage(cfg, stage)?;
    let pre = preprocess(&v, model.spec.input_size)?;
    let s = pre
        .slices
        .iter()
        .find(|s| s.index == slice)
        .ok_or_else(|| Error::InvalidArgument(format!("slice {slice} of {patient} has no lung tissue")))?;
    let e = explain_slice(&model, &s.pixels, layer, class, cfg.cam_norm)?;
    let dir = cfg.paths.output_dir.join("heatmaps");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_heatmaps(&dir, &heatmap_stem(patient, slice, layer, class), &e)
}
