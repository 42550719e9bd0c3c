//! The `reid` command line: argument parsing, subcommands and exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::figures::{pca_scatter, report_chart, Channel};
use super::{
    config_fingerprint, config_to_toml, load_config, load_source, load_target, to_csv, Checkpoint,
    CheckpointKind, RunDir, CONFIG_FILE, FIGURE_DIR, PRETRAIN_LOG_FILE, REPORTS_FILE, RESULTS_FILE,
    SUMMARY_FILE,
};
use crate::data::generate_synthetic;
use crate::data::save_split;
use crate::embedding::{eval_features, EmbeddingModel, EvalFeatureMode, ModelPair};
use crate::error::Error;
use crate::evaluation::{id_camera_mutual_information, pca_projection, RetrievalResult};
use crate::training::{
    adapt_target, evaluate_models, model_seed, mu_sweep, source_classes, Composition, DataRef,
    ExperimentConfig, FinalDiagnostics, Models, Pretrainer, TargetData,
};

#[derive(Debug, Parser)]
#[command(
    name = "reid",
    version,
    about = "Unsupervised re-ID adaptation with camera-adversarial training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment config; the built-in toy config when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set clustering.min_pts=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run directory name under the run root (or an absolute path).
    #[arg(long)]
    pub run: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the feature extractor and identity classifier on the source split.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Alternate clustering and fine-tuning on the unlabeled target split.
    Adapt {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Shorthand for `--set mode=...`.
        #[arg(long, value_parser = ["baseline", "plain_adv", "canu"])]
        mode: Option<String>,
        /// Shorthand for `--set mu=...`.
        #[arg(long)]
        mu: Option<f64>,
        /// Start from this pre-training checkpoint instead of pre-training in the run.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Score a checkpoint on the target query and gallery.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config to take data from; defaults to the one stored in the checkpoint.
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Adapt and score once per adversarial weight.
    AblateMu {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        mus: Vec<f64>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Plot MI and lost-ID curves of stored runs, plus PCA scatters per camera pair.
    Diagnose {
        /// Run to include; repeat to overlay several runs.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        /// Camera pair `A-B` for a PCA scatter of the first run's adapted features.
        #[arg(long = "pair", value_parser = parse_pair)]
        pairs: Vec<(usize, usize)>,
        /// Output directory; defaults to `diagnostics/<runs>` under the run root.
        #[arg(long)]
        out: Option<String>,
    },
    /// Write the configured synthetic data to disk as ready-to-use splits.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<String>,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').ok_or("expected A-B")?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad camera `{a}`"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad camera `{b}`"))?;
    if a == b {
        return Err("the two cameras must differ".into());
    }
    Ok((a, b))
}

/// Failure classes that map to distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, run_root: &Path) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command, run_root) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, root: &Path) -> CliResult<()> {
    match command {
        Command::Pretrain { config, run } => {
            let cfg = load(&config, &[])?;
            let dir = RunDir::create(
                &run_path(root, run.run.as_deref(), "pretrain", &cfg)?,
                "pretrain",
                &cfg,
            )?;
            pretrain_into(&dir, &cfg)?;
            println!("{}", dir.path().display());
            Ok(())
        }
        Command::Adapt {
            config,
            run,
            mode,
            mu,
            pretrained,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(format!("mode=\"{m}\""));
            }
            if let Some(m) = mu {
                extra.push(format!("mu={m:?}"));
            }
            let cfg = load(&config, &extra)?;
            let dir = RunDir::create(
                &run_path(root, run.run.as_deref(), "adapt", &cfg)?,
                "adapt",
                &cfg,
            )?;
            let model = starting_model(&dir, &cfg, pretrained.as_deref())?;
            let summary = adapt_into(&dir, &cfg, &model)?;
            println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
            Ok(())
        }
        Command::Evaluate { checkpoint, config } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = if config.config.is_some() || !config.set.is_empty() {
                load(&config, &[])?
            } else {
                ck.config.clone()
            };
            let models = models_from_checkpoint(&ck)?;
            let target = load_target(&cfg.data.target)?;
            let r = evaluate_models(&models, &target, cfg.evaluation.feature_mode)?;
            println!("{}", serde_json::to_string(&r).map_err(Error::from)?);
            Ok(())
        }
        Command::AblateMu {
            config,
            run,
            mus,
            pretrained,
        } => {
            if mus.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
                return Err(CliError::Usage(
                    "every mu must be a finite non-negative number".into(),
                ));
            }
            let cfg = load(&config, &[])?;
            let dir = RunDir::create(
                &run_path(root, run.run.as_deref(), "ablate-mu", &cfg)?,
                "ablate-mu",
                &cfg,
            )?;
            let model = starting_model(&dir, &cfg, pretrained.as_deref())?;
            let target = load_target(&cfg.data.target)?;
            let rows = mu_sweep(&model, &target, &cfg, &mus)?;
            dir.write_new("mu_sweep.csv", to_csv(&rows)?.as_bytes())?;
            print!("{}", to_csv(&rows)?);
            Ok(())
        }
        Command::Diagnose { runs, pairs, out } => diagnose(root, &runs, &pairs, out.as_deref()),
        Command::Synth { config, out } => {
            let cfg = load(&config, &[])?;
            let out = match out {
                Some(o) => resolve(root, &o),
                None => root.join(format!("synth-{}", &config_fingerprint(&cfg)?[..12])),
            };
            let written = synth(&cfg, &out)?;
            println!("{}", written.display());
            Ok(())
        }
    }
}

fn load(args: &ConfigArgs, extra: &[String]) -> CliResult<ExperimentConfig> {
    let mut sets = args.set.clone();
    sets.extend_from_slice(extra);
    Ok(load_config(args.config.as_deref(), &sets)?)
}

fn resolve(root: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn run_path(
    root: &Path,
    name: Option<&str>,
    command: &str,
    cfg: &ExperimentConfig,
) -> CliResult<PathBuf> {
    Ok(match name {
        Some(n) => resolve(root, n),
        None => root.join(format!("{command}-{}", &config_fingerprint(cfg)?[..12])),
    })
}

#[derive(Serialize)]
struct StepRecord<'a> {
    step: usize,
    loss: f64,
    parts: &'a [crate::objectives::LossPart],
}

/// Pre-trains in `dir`, logging every step and saving a resumable checkpoint.
pub fn pretrain_into(dir: &RunDir, cfg: &ExperimentConfig) -> crate::Result<EmbeddingModel> {
    let source = load_source(&cfg.data.source)?;
    let mut mc = cfg.model.clone();
    mc.num_source_ids = Some(source_classes(&source)?.len());
    let model = EmbeddingModel::new(mc, model_seed(cfg.seed, 0))?;
    let mut trainer = Pretrainer::new(model, &source, cfg)?;
    while trainer.steps_done() < cfg.pretrain.steps {
        let step = trainer.steps_done();
        let loss = trainer.step()?;
        dir.append_jsonl(
            PRETRAIN_LOG_FILE,
            &StepRecord {
                step,
                loss: loss.value,
                parts: &loss.parts,
            },
        )?;
    }
    let mut ck = Checkpoint::new(
        CheckpointKind::Pretrained,
        cfg,
        vec![trainer.model().state()],
    )?;
    ck.pretrain = Some(trainer.state());
    ck.save(&dir.checkpoint_path("pretrained"))?;
    Ok(trainer.into_model())
}

fn starting_model(
    dir: &RunDir,
    cfg: &ExperimentConfig,
    pretrained: Option<&Path>,
) -> crate::Result<EmbeddingModel> {
    match pretrained {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.kind != CheckpointKind::Pretrained {
                return Err(Error::Checkpoint(format!(
                    "{} is not a pre-training checkpoint",
                    p.display()
                )));
            }
            EmbeddingModel::from_state(&ck.models[0])
        }
        None => pretrain_into(dir, cfg),
    }
}

pub fn models_from_checkpoint(ck: &Checkpoint) -> crate::Result<Models> {
    match (ck.composition, ck.models.as_slice()) {
        (Composition::Mmt, [a, b]) => Ok(Models::Pair(ModelPair::new(
            EmbeddingModel::from_state(a)?,
            EmbeddingModel::from_state(b)?,
        )?)),
        (Composition::Mmt, _) => Err(Error::Checkpoint(
            "a pair checkpoint needs exactly two models".into(),
        )),
        (_, [a]) => Ok(Models::Single(EmbeddingModel::from_state(a)?)),
        _ => Err(Error::Checkpoint("expected exactly one model".into())),
    }
}

/// What `adapt` leaves in `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct AdaptSummary {
    pub mode: crate::objectives::AdversarialMode,
    pub composition: Composition,
    pub mu: f64,
    pub retrieval: RetrievalResult,
    pub final_diagnostics: Option<FinalDiagnostics>,
    /// MI between true identity and camera on the training split, when known.
    pub ground_truth_mi: Option<f64>,
}

#[derive(Serialize)]
struct ResultRow {
    mode: crate::objectives::AdversarialMode,
    composition: Composition,
    mu: f64,
    rank1: f64,
    #[serde(rename = "mAP")]
    map: f64,
    final_mi: Option<f64>,
    final_nmi: Option<f64>,
}

fn ground_truth_mi(target: &TargetData) -> crate::Result<Option<f64>> {
    let ids = target.train.diagnostics();
    if ids.ids().iter().all(|i| i.is_none()) {
        return Ok(None);
    }
    id_camera_mutual_information(ids, &target.train.cameras()).map(Some)
}

/// Adapts `model` in `dir` and writes reports, checkpoint, results and figures.
pub fn adapt_into(
    dir: &RunDir,
    cfg: &ExperimentConfig,
    model: &EmbeddingModel,
) -> crate::Result<AdaptSummary> {
    let target = load_target(&cfg.data.target)?;
    let outcome = adapt_target(
        Models::from_pretrained(model, cfg.composition)?,
        &target,
        cfg,
    )?;
    for r in &outcome.reports {
        dir.append_jsonl(REPORTS_FILE, r)?;
    }
    let states = outcome.models.all().iter().map(|m| m.state()).collect();
    Checkpoint::new(CheckpointKind::Adapted, cfg, states)?.save(&dir.checkpoint_path("adapted"))?;
    let retrieval = evaluate_models(&outcome.models, &target, cfg.evaluation.feature_mode)?;
    let summary = AdaptSummary {
        mode: cfg.mode,
        composition: cfg.composition,
        mu: cfg.mu,
        retrieval,
        final_diagnostics: outcome.final_diagnostics.clone(),
        ground_truth_mi: ground_truth_mi(&target)?,
    };
    dir.write_new(
        SUMMARY_FILE,
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    let row = ResultRow {
        mode: cfg.mode,
        composition: cfg.composition,
        mu: cfg.mu,
        rank1: summary.retrieval.rank1,
        map: summary.retrieval.map,
        final_mi: summary
            .final_diagnostics
            .as_ref()
            .map(|f| f.mutual_information_nats),
        final_nmi: summary
            .final_diagnostics
            .as_ref()
            .and_then(|f| f.quality.map(|q| q.nmi)),
    };
    dir.write_new(RESULTS_FILE, to_csv(&[row])?.as_bytes())?;
    if !outcome.reports.is_empty() {
        let name = mode_name(cfg);
        let runs = vec![(name, outcome.reports.clone())];
        let reference = reference_lines(summary.ground_truth_mi);
        dir.write_new(
            &format!("{FIGURE_DIR}/mi_curve.svg"),
            report_chart(&runs, Channel::MutualInformation, &reference)?.as_bytes(),
        )?;
        dir.write_new(
            &format!("{FIGURE_DIR}/lost_ids.svg"),
            report_chart(&runs, Channel::LostIds, &[])?.as_bytes(),
        )?;
    }
    Ok(summary)
}

fn mode_name(cfg: &ExperimentConfig) -> String {
    let mode = serde_json::to_value(cfg.mode)
        .ok()
        .and_then(|v| v.as_str().map(String::from));
    let comp = serde_json::to_value(cfg.composition)
        .ok()
        .and_then(|v| v.as_str().map(String::from));
    format!("{}/{}", comp.unwrap_or_default(), mode.unwrap_or_default())
}

fn reference_lines(gt: Option<f64>) -> Vec<(String, f64)> {
    match gt {
        Some(v) => vec![("ground-truth ID".to_string(), v)],
        None => {
            log::info!("no ground-truth identities available; MI reference line omitted");
            Vec::new()
        }
    }
}

#[derive(Serialize)]
struct CurveRow {
    run: String,
    epoch: usize,
    mutual_information_nats: f64,
    lost_ids: usize,
    cluster_count: usize,
    nmi: Option<f64>,
}

fn diagnose(
    root: &Path,
    names: &[String],
    pairs: &[(usize, usize)],
    out: Option<&str>,
) -> CliResult<()> {
    let mut runs = Vec::new();
    let mut gt = None;
    let mut dirs = Vec::new();
    for name in names {
        let dir = RunDir::open(&resolve(root, name))?;
        let reports = dir.reports()?;
        if reports.is_empty() {
            return Err(CliError::Runtime(Error::invalid(format!(
                "run {name} has no epoch reports"
            ))));
        }
        if gt.is_none() {
            if let Ok(text) = fs::read_to_string(dir.file(SUMMARY_FILE)) {
                let s: AdaptSummary = serde_json::from_str(&text).map_err(Error::from)?;
                gt = s.ground_truth_mi;
            }
        }
        runs.push((format!("{name} ({})", mode_name(&dir.config()?)), reports));
        dirs.push(dir);
    }
    let out = match out {
        Some(o) => resolve(root, o),
        None => root
            .join("diagnostics")
            .join(names.join("+").replace(['/', '\\'], "_")),
    };
    fs::create_dir_all(&out).map_err(Error::from)?;
    let rows: Vec<CurveRow> = runs
        .iter()
        .flat_map(|(name, reports)| {
            reports.iter().map(move |r| CurveRow {
                run: name.clone(),
                epoch: r.epoch,
                mutual_information_nats: r.diagnostics.mutual_information_nats,
                lost_ids: r.diagnostics.lost_ids,
                cluster_count: r.diagnostics.cluster_count,
                nmi: r.quality.map(|q| q.nmi),
            })
        })
        .collect();
    fs::write(out.join("curves.csv"), to_csv(&rows)?).map_err(Error::from)?;
    let reference = reference_lines(gt);
    fs::write(
        out.join("mi_curve.svg"),
        report_chart(&runs, Channel::MutualInformation, &reference)?,
    )
    .map_err(Error::from)?;
    fs::write(
        out.join("lost_ids.svg"),
        report_chart(&runs, Channel::LostIds, &[])?,
    )
    .map_err(Error::from)?;
    if !pairs.is_empty() {
        let dir = &dirs[0];
        let ck = Checkpoint::load(&dir.checkpoint_path("adapted"))?;
        let models = models_from_checkpoint(&ck)?;
        let target = load_target(&ck.config.data.target)?;
        let feats = eval_features(
            models.source(),
            target.train.samples(),
            EvalFeatureMode::Raw,
        )?;
        let cams = target.train.cameras();
        for &(a, b) in pairs {
            let rows: Vec<usize> = (0..cams.len())
                .filter(|&i| cams[i] == a || cams[i] == b)
                .collect();
            if rows.is_empty() {
                return Err(CliError::Usage(format!(
                    "no training samples from cameras {a} or {b}"
                )));
            }
            let sub = feats.select(ndarray::Axis(0), &rows);
            let labels: Vec<usize> = rows.iter().map(|&i| cams[i]).collect();
            let proj = pca_projection(&sub, &labels, 2)?;
            let svg = pca_scatter(
                &format!("Embedding PCA, cameras {a} and {b}"),
                &proj,
                &[(a, format!("camera {a}")), (b, format!("camera {b}"))],
            )?;
            fs::write(out.join(format!("pca_cam{a}_cam{b}.svg")), svg).map_err(Error::from)?;
        }
    }
    println!("{}", out.display());
    Ok(())
}

/// Writes source and target splits plus a config that points at them.
pub fn synth(cfg: &ExperimentConfig, out: &Path) -> crate::Result<PathBuf> {
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::invalid(format!(
            "{} already has content",
            out.display()
        )));
    }
    let out = std::path::absolute(out)?;
    let mut written = cfg.clone();
    for (name, r, is_source) in [
        ("source", &cfg.data.source, true),
        ("target", &cfg.data.target, false),
    ] {
        let DataRef::Synthetic { spec } = r else {
            return Err(Error::Config(format!("data.{name} is not synthetic")));
        };
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        let s = generate_synthetic(spec)?;
        save_split(&s.target_train, &dir.join("train.json"))?;
        if !is_source {
            save_split(&s.gallery, &dir.join("gallery.json"))?;
            save_split(&s.query, &dir.join("query.json"))?;
        }
        let new_ref = DataRef::Splits { dir };
        if is_source {
            written.data.source = new_ref;
        } else {
            written.data.target = new_ref;
        }
    }
    fs::write(out.join(CONFIG_FILE), config_to_toml(&written)?)?;
    Ok(out)
}
