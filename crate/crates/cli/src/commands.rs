use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use mislabel_core::classifier::{predict, train, train_runs};
use mislabel_core::dataset::{
    generate_synthetic_corpus, load_manifest, write_cleaned_splits, write_manifest,
};
use mislabel_core::eval::{
    classification_metrics, detection_report, detection_table, metrics_table, pca_projection,
    precision_at_k, projection_csv,
};
use mislabel_core::gmm::{density_report_csv, write_model_json, GmmModel};
use mislabel_core::injection::{compute_uncertainty_scores, inject_noise, UncertaintyScore};
use mislabel_core::pipeline::{assessments_csv, read_assessments_csv, run_pipeline_detailed};
use mislabel_core::review::{consensus_partial, sample_review_set, AdjudicationLog};
use mislabel_core::util::fmt_f64;
use mislabel_core::{
    CleaningPlan, ClassificationMetrics, Dataset, DetectionReport, InjectionReport, Split, Verdict,
};
use mislabel_review::{ReviewConfig, ReviewState};

use crate::config::{RunManifest, ToolConfig};
use crate::{Common, OUT_ENV};

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn core_io(path: &Path, source: std::io::Error) -> mislabel_core::Error {
    mislabel_core::Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| core_io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

struct Run {
    dir: PathBuf,
    cfg: ToolConfig,
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn start(common: &Common, command: &str, apply: impl FnOnce(&mut ToolConfig)) -> anyhow::Result<Self> {
        let start = Instant::now();
        let mut cfg = ToolConfig::load(common.config.as_deref())?;
        apply(&mut cfg);
        let dir = match &common.out {
            Some(d) => d.clone(),
            None => std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("mislabel-out"))
                .join(command),
        };
        fs::create_dir_all(&dir).map_err(|e| core_io(&dir, e))?;
        let mut manifest = RunManifest::new(command, &cfg);
        if let Some(path) = &common.config {
            manifest.input("config", path);
        }
        Ok(Self {
            dir,
            cfg,
            manifest,
            start,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.manifest.output(p.clone());
        p
    }

    fn finish(mut self) -> anyhow::Result<()> {
        self.manifest.config = self.cfg.clone();
        let path = self.manifest.write(&self.dir, self.start.elapsed())?;
        for p in &self.manifest.outputs {
            println!("{}", p.display());
        }
        println!("{}", path.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dev samples per class, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n_per_class: Option<Vec<usize>>,
    /// Test samples per class, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub test_per_class: Option<Vec<usize>>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub ambiguous: Option<f64>,
}

pub fn gen(a: GenArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common, "gen", |cfg| {
        let s = &mut cfg.synthetic;
        if let Some(v) = a.n_per_class.clone() {
            s.n_per_class = v;
        }
        if let Some(v) = a.test_per_class.clone() {
            s.test_per_class = v;
        }
        if let Some(v) = a.dim {
            s.dim = v;
        }
        if let Some(v) = a.separation {
            s.class_separation = v;
        }
        if let Some(v) = a.ambiguous {
            s.ambiguous_fraction = v;
        }
        if let Some(v) = a.common.seed {
            s.seed = v;
        }
    })?;
    let ds = generate_synthetic_corpus(&run.cfg.synthetic)?;
    let out = run.path("corpus.csv");
    write_manifest(&ds, &out)?;
    let seed = run.cfg.synthetic.seed;
    run.manifest.seed("synthetic", seed);
    run.finish()
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Clean manifest to corrupt.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Training runs used to score uncertainty.
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
}

fn uncertainty_csv(scores: &[UncertaintyScore]) -> String {
    let mut out = String::from(
        "sample_id,mean_confidence,mean_entropy,norm_confidence,norm_entropy,score,group\n",
    );
    for s in scores {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.sample_id,
            fmt_f64(s.mean_confidence),
            fmt_f64(s.mean_entropy),
            fmt_f64(s.norm_confidence),
            fmt_f64(s.norm_entropy),
            fmt_f64(s.score),
            s.quantile_group
        ));
    }
    out
}

pub fn inject(a: InjectArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common, "inject", |cfg| {
        if let Some(r) = a.noise_rate {
            cfg.injection.rate = r;
        }
        if let Some(s) = a.common.seed {
            cfg.injection.seed = s;
        }
    })?;
    run.manifest.input("data", &a.data);
    let ds = load_manifest(&a.data)?;
    let training = run.cfg.pipeline.training.clone();
    let ledger = train_runs(&ds.subset(Split::Dev), &training, a.runs)?;
    let scores = compute_uncertainty_scores(&ledger)?;
    let inj = run.cfg.injection.clone();
    let (noisy, report) = inject_noise(&ds, inj.rate, &scores, inj.weights, inj.seed)?;

    write_manifest(&noisy, &run.path("noisy.csv"))?;
    report.write_json(&run.path("injection.json"))?;
    report.write_flips_csv(&run.path("flips.csv"))?;
    let p = run.path("uncertainty.csv");
    write_text(&p, &uncertainty_csv(&scores))?;
    run.manifest.seed("injection", inj.seed).seed("scoring_training", training.seed);
    run.finish()
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Noisy manifest to clean.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of corrections; default counts r > 0.5.
    #[arg(long)]
    pub k_c: Option<usize>,
    /// Number of filters; default counts p > 0.5.
    #[arg(long)]
    pub k_f: Option<usize>,
    /// Training runs per stage.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Also write the per-run loss and prediction ledgers.
    #[arg(long)]
    pub diagnostics: bool,
}

pub fn detect(a: DetectArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common, "detect", |cfg| {
        let p = &mut cfg.pipeline;
        if a.k_c.is_some() {
            p.k_c = a.k_c;
        }
        if a.k_f.is_some() {
            p.k_f = a.k_f;
        }
        if let Some(r) = a.runs {
            p.runs_per_stage = r;
        }
        if let Some(s) = a.common.seed {
            p.seed = s;
        }
    })?;
    run.manifest.input("data", &a.data);
    let ds = load_manifest(&a.data)?;
    let diag = a.diagnostics.then(|| run.dir.join("diagnostics"));
    let out = run_pipeline_detailed(&ds, &run.cfg.pipeline, diag.as_deref())?;

    out.plan.write(&run.dir)?;
    for name in ["plan.json", "corrections.csv", "filters.csv"] {
        run.path(name);
    }
    let p = run.path("assessments_stage1.csv");
    write_text(&p, &assessments_csv(&out.stage1.assessments))?;
    let p = run.path("assessments_stage2.csv");
    write_text(&p, &assessments_csv(&out.stage2.assessments))?;
    write_model_json(&out.stage1.gmm, &run.path("gmm_stage1.json"))?;
    write_model_json(&out.stage2.gmm, &run.path("gmm_stage2.json"))?;
    if let Some(d) = diag {
        run.manifest.output(d);
    }
    let seed = run.cfg.pipeline.seed;
    run.manifest.seed("pipeline", seed);
    eprintln!("corrections {} filters {}", out.plan.k_c, out.plan.k_f);
    run.finish()
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
}

pub fn clean(a: CleanArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common, "clean", |_| {})?;
    run.manifest.input("data", &a.data).input("plan", &a.plan);
    let ds = load_manifest(&a.data)?;
    let plan = CleaningPlan::read_json(&a.plan)?;
    let paths = write_cleaned_splits(&ds, &plan, &run.dir)?;
    run.manifest
        .output(paths.corrected)
        .output(paths.filtered)
        .output(paths.relabel);
    run.finish()
}

/// `metrics.json` written by `train-eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub name: String,
    pub train_samples: usize,
    pub metrics: ClassificationMetrics,
}

#[derive(Debug, Args)]
pub struct TrainEvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest whose dev split is the training set.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation manifest; defaults to the test split of `--data`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Row label in the metrics table.
    #[arg(long)]
    pub name: Option<String>,
    /// Class treated as positive for F1, precision and sensitivity.
    #[arg(long, default_value_t = 1)]
    pub positive_class: usize,
}

pub fn train_eval(a: TrainEvalArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common, "train-eval", |cfg| {
        if let Some(s) = a.common.seed {
            cfg.pipeline.training.seed = s;
        }
    })?;
    run.manifest.input("data", &a.data);
    let ds = load_manifest(&a.data)?;
    let test = match &a.test {
        Some(p) => {
            run.manifest.input("test", p);
            load_manifest(p)?.subset(Split::Test)
        }
        None => ds.subset(Split::Test),
    };
    if test.is_empty() {
        return Err(mislabel_core::Error::Precondition("no test split to evaluate on".into()).into());
    }
    let dev = ds.subset(Split::Dev);
    let (model, _) = train(&dev, &run.cfg.pipeline.training, 0)?;
    let preds = test
        .records()
        .iter()
        .map(|r| predict(&model, r))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = test.records().iter().map(|r| r.given_label).collect();
    let metrics = classification_metrics(&preds, &labels, a.positive_class)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    });
    let file = MetricsFile {
        name,
        train_samples: dev.len(),
        metrics,
    };
    write_json(&run.path("metrics.json"), &file)?;
    let seed = run.cfg.pipeline.training.seed;
    run.manifest.seed("training", seed);
    run.finish()
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Injection report holding the ground truth of the flips.
    #[arg(long, requires = "plan")]
    pub injection: Option<PathBuf>,
    /// Column header of the detection table; defaults to the noise rate.
    #[arg(long)]
    pub column: Option<String>,
    /// `NAME=PATH` of a `metrics.json`; repeatable, rows keep this order.
    #[arg(long = "metrics")]
    pub metrics: Vec<String>,
    /// Manifest to project onto two principal components.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn density_range(m: &GmmModel) -> (f64, f64) {
    let lo = (0..3)
        .map(|k| m.means[k] - 4.0 * m.variances[k].sqrt())
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let hi = (0..3)
        .map(|k| m.means[k] + 4.0 * m.variances[k].sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn report(a: ReportArgs) -> anyhow::Result<()> {
    if a.plan.is_none() && a.metrics.is_empty() && a.manifest.is_none() {
        return Err(usage("nothing to report: pass --plan, --metrics or --manifest"));
    }
    let mut run = Run::start(&a.common, "report", |_| {})?;
    let plan = match &a.plan {
        Some(p) => {
            run.manifest.input("plan", p);
            Some(CleaningPlan::read_json(p)?)
        }
        None => None,
    };

    if let (Some(plan), Some(inj_path)) = (&plan, &a.injection) {
        run.manifest.input("injection", inj_path);
        let inj = InjectionReport::read_json(inj_path)?;
        let report: DetectionReport = detection_report(plan, &inj);
        report.check()?;
        let column = a
            .column
            .clone()
            .unwrap_or_else(|| format!("{}%", fmt_f64(100.0 * inj.rate)));
        write_json(&run.path("detection.json"), &report)?;
        let p = run.path("detection_table.txt");
        write_text(&p, &detection_table(&[(column, report)]))?;
    }

    if let Some(plan) = &plan {
        for (stage, saved) in [(1, &plan.metadata.stage1_gmm), (2, &plan.metadata.stage2_gmm)] {
            let m = saved.model();
            let (lo, hi) = density_range(&m);
            let p = run.path(&format!("gmm_density_stage{stage}.csv"));
            write_text(&p, &density_report_csv(&m, lo, hi))?;
        }
    }

    if !a.metrics.is_empty() {
        let mut rows = Vec::new();
        for spec in &a.metrics {
            let (name, path) = spec
                .split_once('=')
                .ok_or_else(|| usage(format!("--metrics expects NAME=PATH, got `{spec}`")))?;
            let path = Path::new(path);
            run.manifest.input(&format!("metrics:{name}"), path);
            let text = fs::read_to_string(path).map_err(|e| core_io(path, e))?;
            let file: MetricsFile = serde_json::from_str(&text)
                .map_err(mislabel_core::Error::from)
                .with_context(|| format!("reading {}", path.display()))?;
            rows.push((name.to_owned(), file.metrics));
        }
        let p = run.path("metrics_table.txt");
        write_text(&p, &metrics_table(&rows))?;
    }

    if let Some(mpath) = &a.manifest {
        run.manifest.input("manifest", mpath);
        let ds = load_manifest(mpath)?;
        if let Some(plan) = &plan {
            plan.check_references(&ds)?;
        }
        let dev: Dataset = ds.subset(Split::Dev);
        let features: Vec<Vec<f64>> = dev.records().iter().map(|r| r.features.clone()).collect();
        let proj = pca_projection(&features, 2, 50)?;
        let ids: Vec<String> = dev.records().iter().map(|r| r.sample_id.clone()).collect();
        let labels: Vec<usize> = dev.records().iter().map(|r| r.given_label).collect();
        let p = run.path("projection.csv");
        write_text(&p, &projection_csv(&ids, &labels, &proj, plan.as_ref()))?;
    }
    run.finish()
}

#[derive(Debug, Args)]
pub struct ReviewArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest the suspects come from.
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-one assessments written by `detect`.
    #[arg(long)]
    pub assessments: PathBuf,
    /// Adjudication log; defaults to `adjudications.jsonl` in the output directory.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = 3)]
    pub reviewers: usize,
    /// Built review UI to serve at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Base directory for relative image paths in the manifest.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Write consensus and Precision@k from the log and exit instead of serving.
    #[arg(long)]
    pub export: bool,
    #[arg(long, default_value_t = 100)]
    pub k: usize,
}

#[derive(Debug, Serialize)]
struct PrecisionFile {
    k: usize,
    precision: f64,
}

pub fn review(a: ReviewArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common, "review", |_| {})?;
    run.manifest
        .input("data", &a.data)
        .input("assessments", &a.assessments);
    let ds = load_manifest(&a.data)?;
    let assessments = read_assessments_csv(&a.assessments)?;
    let set = sample_review_set(&assessments, &ds, &run.cfg.review)?;
    if set.partial || set.mix_shortfall {
        eprintln!(
            "review set: {} items (partial: {}, class mix shortfall: {})",
            set.items.len(),
            set.partial,
            set.mix_shortfall
        );
    }
    write_json(&run.path("review_set.json"), &set)?;
    let log_path = a.log.clone().unwrap_or_else(|| run.dir.join("adjudications.jsonl"));
    run.manifest.input("log", &log_path);

    if a.export {
        let log = AdjudicationLog::open(&log_path)?;
        let (done, pending) = consensus_partial(log.entries(), a.reviewers);
        write_json(&run.path("consensus.json"), &done)?;
        if !pending.is_empty() {
            eprintln!("{} suspects still lack a full panel", pending.len());
        }
        let verdicts: HashMap<String, Verdict> = done
            .iter()
            .map(|c| (c.sample_id.clone(), c.final_verdict))
            .collect();
        let ranked: Vec<String> = set.items.iter().map(|s| s.sample_id.clone()).collect();
        let precision = precision_at_k(&ranked, &verdicts, a.k)?;
        write_json(&run.path("precision.json"), &PrecisionFile { k: a.k, precision })?;
        return run.finish();
    }

    let config = ReviewConfig {
        log_path,
        reviewers_required: a.reviewers,
        image_root: a.image_root.clone(),
        static_dir: a.static_dir.clone(),
    };
    let state = Arc::new(ReviewState::open(set.items, ds, config)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| core_io(Path::new("tokio runtime"), e))?;
    eprintln!("serving {} suspects on http://{}", state.suspects().len(), a.bind);
    rt.block_on(mislabel_review::serve(state, a.bind, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    run.finish()
}
