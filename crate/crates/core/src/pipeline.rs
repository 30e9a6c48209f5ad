//! Two-stage correct-then-filter cleaning.
//!
//! Stage 1 trains several runs on the raw dev split, fits the loss mixture on
//! each sample's mean loss and scores every sample. The labels whose noise
//! probability drops the most when replaced by the model's proposal are
//! corrected. Stage 2 retrains on the corrected data, refits the mixture and
//! filters the samples with the highest remaining noise probability.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{focal_loss, train_runs, LossLedger, TrainingConfig};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::gmm::{assign_roles, fit_gmm, noise_probability, ComponentRoles, FitOptions, GmmModel, SavedGmm};
use crate::util::{argmax, cmp_f64, derive_seed, fmt_f64};

/// Posterior above which a sample counts toward the default `k_c` / `k_f`.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub training: TrainingConfig,
    pub runs_per_stage: usize,
    pub k_c: Option<usize>,
    pub k_f: Option<usize>,
    pub gmm: FitOptions,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            runs_per_stage: 3,
            k_c: None,
            k_f: None,
            gmm: FitOptions::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.runs_per_stage == 0 {
            return Err(Error::Config("runs_per_stage must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Training config for one stage: the run seeds derive from
    /// `(seed, stage)` and the run index.
    fn stage_training(&self, stage: u64) -> TrainingConfig {
        TrainingConfig {
            seed: derive_seed(self.seed, &[stage]),
            ..self.training.clone()
        }
    }

    fn stage_gmm(&self, stage: u64) -> FitOptions {
        FitOptions {
            seed: derive_seed(self.seed, &[stage, 0x6d6d]),
            ..self.gmm
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAssessment {
    pub sample_id: String,
    pub given_label: usize,
    pub aggregated_loss: f64,
    pub p_i: f64,
    pub proposed_label: usize,
    pub corrected_loss: f64,
    pub p_i_c: f64,
    pub r_i: f64,
    /// 1-based rank by descending noise reduction.
    pub rank_by_r: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub sample_id: String,
    pub old_label: usize,
    pub new_label: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub sample_id: String,
    pub p_noise: f64,
    /// Stage-two label proposal, used for the full relabel output.
    pub proposed_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetadata {
    pub seed: u64,
    pub config: PipelineConfig,
    pub dev_samples: usize,
    pub stage1_gmm: SavedGmm,
    pub stage2_gmm: SavedGmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningPlan {
    pub corrections: Vec<Correction>,
    pub filters: Vec<Filter>,
    pub k_c: usize,
    pub k_f: usize,
    pub metadata: PlanMetadata,
}

impl CleaningPlan {
    /// Every referenced id must exist in `ds`.
    pub fn check_references(&self, ds: &Dataset) -> Result<()> {
        let ids = self
            .corrections
            .iter()
            .map(|c| &c.sample_id)
            .chain(self.filters.iter().map(|f| &f.sample_id));
        for id in ids {
            if ds.get(id).is_none() {
                return Err(Error::Integrity(format!("plan references unknown sample_id `{id}`")));
            }
        }
        Ok(())
    }

    pub fn touched(&self) -> HashSet<&str> {
        self.corrections
            .iter()
            .map(|c| c.sample_id.as_str())
            .chain(self.filters.iter().map(|f| f.sample_id.as_str()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn corrections_csv(&self) -> String {
        let mut out = String::from("sample_id,old_label,new_label,r\n");
        for c in &self.corrections {
            out.push_str(&format!("{},{},{},{}\n", c.sample_id, c.old_label, c.new_label, fmt_f64(c.r)));
        }
        out
    }

    pub fn filters_csv(&self) -> String {
        let mut out = String::from("sample_id,p_noise\n");
        for f in &self.filters {
            out.push_str(&format!("{},{}\n", f.sample_id, fmt_f64(f.p_noise)));
        }
        out
    }

    /// Writes `plan.json`, `corrections.csv` and `filters.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("plan.json", self.to_json()?),
            ("corrections.csv", self.corrections_csv()),
            ("filters.csv", self.filters_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Mean loss of each ledger sample over all `(run, epoch)` entries.
pub fn aggregate_losses(ledger: &LossLedger) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let mut expected: Option<usize> = None;
    for (s, id) in ledger.sample_ids().iter().enumerate() {
        let losses = ledger.sample_losses(s)?;
        if *expected.get_or_insert(losses.len()) != losses.len() {
            return Err(Error::Integrity(format!("sample `{id}` has an incomplete loss record")));
        }
        out.insert(id.clone(), losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(out)
}

/// Noise assessment of every ledger sample. `ds` supplies the current given
/// labels; the ledger must have been produced on those labels.
pub fn assess(
    ds: &Dataset,
    ledger: &LossLedger,
    model: &GmmModel,
    roles: &ComponentRoles,
    training: &TrainingConfig,
) -> Result<Vec<NoiseAssessment>> {
    let aggregated = aggregate_losses(ledger)?;
    let alpha = training.resolve_alpha(ds)?;
    let mut out = Vec::with_capacity(ledger.sample_ids().len());
    for (s, id) in ledger.sample_ids().iter().enumerate() {
        let record = ds
            .get(id)
            .ok_or_else(|| Error::Integrity(format!("ledger sample `{id}` not in dataset")))?;
        let loss = aggregated[id];
        let p_i = noise_probability(model, roles, loss);
        let dist = ledger.mean_prediction(s)?;
        let proposed = argmax(&dist);
        let (corrected_loss, p_i_c) = if proposed == record.given_label {
            (loss, p_i)
        } else {
            let l = focal_loss(&dist, proposed, training.focal_gamma, &alpha)?;
            (l, noise_probability(model, roles, l))
        };
        out.push(NoiseAssessment {
            sample_id: id.clone(),
            given_label: record.given_label,
            aggregated_loss: loss,
            p_i,
            proposed_label: proposed,
            corrected_loss,
            p_i_c,
            r_i: p_i - p_i_c,
            rank_by_r: 0,
        });
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| by_reduction(&out[a], &out[b]));
    for (rank, i) in order.into_iter().enumerate() {
        out[i].rank_by_r = rank + 1;
    }
    Ok(out)
}

fn by_reduction(a: &NoiseAssessment, b: &NoiseAssessment) -> Ordering {
    cmp_f64(b.r_i, a.r_i)
        .then(cmp_f64(b.p_i, a.p_i))
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

fn by_noise(a: &NoiseAssessment, b: &NoiseAssessment) -> Ordering {
    cmp_f64(b.p_i, a.p_i).then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Assessments ordered by their noise-reduction rank.
pub fn ranked(assessments: &[NoiseAssessment]) -> Vec<&NoiseAssessment> {
    let mut v: Vec<&NoiseAssessment> = assessments.iter().collect();
    v.sort_by(|a, b| by_reduction(a, b));
    v
}

/// Top `k_c` samples by noise reduction among those with `r_i > 0`.
/// Without `k_c`, every sample with `r_i > 0.5` is taken.
pub fn select_corrections(assessments: &[NoiseAssessment], k_c: Option<usize>) -> Vec<Correction> {
    let k = k_c.unwrap_or_else(|| {
        assessments
            .iter()
            .filter(|a| a.r_i > DEFAULT_THRESHOLD)
            .count()
    });
    ranked(assessments)
        .into_iter()
        .filter(|a| a.r_i > 0.0)
        .take(k)
        .map(|a| Correction {
            sample_id: a.sample_id.clone(),
            old_label: a.given_label,
            new_label: a.proposed_label,
            r: a.r_i,
        })
        .collect()
}

/// Top `k_f` samples by noise probability. Without `k_f`, every sample with
/// `p_i > 0.5` is taken.
pub fn select_filters(assessments: &[NoiseAssessment], k_f: Option<usize>) -> Vec<Filter> {
    let k = k_f.unwrap_or_else(|| {
        assessments
            .iter()
            .filter(|a| a.p_i > DEFAULT_THRESHOLD)
            .count()
    });
    let mut v: Vec<&NoiseAssessment> = assessments.iter().collect();
    v.sort_by(|a, b| by_noise(a, b));
    v.into_iter()
        .take(k)
        .map(|a| Filter {
            sample_id: a.sample_id.clone(),
            p_noise: a.p_i,
            proposed_label: a.proposed_label,
        })
        .collect()
}

/// Everything one stage produced.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub ledger: LossLedger,
    pub gmm: GmmModel,
    pub roles: ComponentRoles,
    pub assessments: Vec<NoiseAssessment>,
}

/// Full pipeline result: the plan and both stages' intermediates.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub plan: CleaningPlan,
    pub stage1: StageOutput,
    pub stage2: StageOutput,
}

fn run_stage(
    ds: &Dataset,
    cfg: &PipelineConfig,
    stage: u64,
    diag_dir: Option<&Path>,
) -> Result<StageOutput> {
    let training = cfg.stage_training(stage);
    let ledger = train_runs(ds, &training, cfg.runs_per_stage)?;
    if let Some(dir) = diag_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ledger.write_csv(
            &dir.join(format!("ledger_stage{stage}_losses.csv")),
            &dir.join(format!("ledger_stage{stage}_predictions.csv")),
        )?;
    }
    let losses: Vec<f64> = aggregate_losses(&ledger)?.into_values().collect();
    let gmm = fit_gmm(&losses, &cfg.stage_gmm(stage))?;
    let roles = assign_roles(&gmm);
    let assessments = assess(ds, &ledger, &gmm, &roles, &cfg.training)?;
    Ok(StageOutput {
        ledger,
        gmm,
        roles,
        assessments,
    })
}

/// Runs both stages and returns the plan.
pub fn run_pipeline(ds: &Dataset, cfg: &PipelineConfig) -> Result<CleaningPlan> {
    run_pipeline_detailed(ds, cfg, None).map(|o| o.plan)
}

/// [`run_pipeline`] keeping both stages' intermediates. When `diag_dir` is
/// set, each stage's ledger is written there as soon as training finishes.
pub fn run_pipeline_detailed(
    ds: &Dataset,
    cfg: &PipelineConfig,
    diag_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let stage1 = run_stage(ds, cfg, 1, diag_dir).map_err(|e| e.in_stage("correction"))?;
    let corrections = select_corrections(&stage1.assessments, cfg.k_c);

    let relabels: BTreeMap<String, usize> = corrections
        .iter()
        .map(|c| (c.sample_id.clone(), c.new_label))
        .collect();
    let corrected = ds.with_labels(&relabels)?;
    let stage2 = run_stage(&corrected, cfg, 2, diag_dir).map_err(|e| e.in_stage("filtering"))?;
    let filters = select_filters(&stage2.assessments, cfg.k_f);

    let plan = CleaningPlan {
        k_c: corrections.len(),
        k_f: filters.len(),
        corrections,
        filters,
        metadata: PlanMetadata {
            seed: cfg.seed,
            config: cfg.clone(),
            dev_samples: ds.split(Split::Dev).count(),
            stage1_gmm: SavedGmm::new(&stage1.gmm),
            stage2_gmm: SavedGmm::new(&stage2.gmm),
        },
    };
    Ok(PipelineOutput {
        plan,
        stage1,
        stage2,
    })
}

/// `sample_id,given_label,aggregated_loss,p_noise,proposed_label,corrected_loss,p_noise_corrected,r,rank`
pub fn assessments_csv(assessments: &[NoiseAssessment]) -> String {
    let mut out = String::from(
        "sample_id,given_label,aggregated_loss,p_noise,proposed_label,corrected_loss,p_noise_corrected,r,rank\n",
    );
    for a in assessments {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            a.sample_id,
            a.given_label,
            fmt_f64(a.aggregated_loss),
            fmt_f64(a.p_i),
            a.proposed_label,
            fmt_f64(a.corrected_loss),
            fmt_f64(a.p_i_c),
            fmt_f64(a.r_i),
            a.rank_by_r
        ));
    }
    out
}

/// Parses [`assessments_csv`] output.
pub fn read_assessments_csv(path: &Path) -> Result<Vec<NoiseAssessment>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let err = |field: &str| Error::Parse {
            path: path.to_owned(),
            line,
            reason: format!("bad {field}"),
        };
        let f = |i: usize, name: &str| row.get(i).ok_or_else(|| err(name));
        out.push(NoiseAssessment {
            sample_id: f(0, "sample_id")?.to_owned(),
            given_label: f(1, "given_label")?.parse().map_err(|_| err("given_label"))?,
            aggregated_loss: f(2, "aggregated_loss")?.parse().map_err(|_| err("aggregated_loss"))?,
            p_i: f(3, "p_noise")?.parse().map_err(|_| err("p_noise"))?,
            proposed_label: f(4, "proposed_label")?.parse().map_err(|_| err("proposed_label"))?,
            corrected_loss: f(5, "corrected_loss")?.parse().map_err(|_| err("corrected_loss"))?,
            p_i_c: f(6, "p_noise_corrected")?.parse().map_err(|_| err("p_noise_corrected"))?,
            r_i: f(7, "r")?.parse().map_err(|_| err("r"))?,
            rank_by_r: f(8, "rank")?.parse().map_err(|_| err("rank"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::LedgerFragment;

    fn a(id: &str, p: f64, pc: f64) -> NoiseAssessment {
        NoiseAssessment {
            sample_id: id.into(),
            given_label: 0,
            aggregated_loss: 0.0,
            p_i: p,
            proposed_label: 1,
            corrected_loss: 0.0,
            p_i_c: pc,
            r_i: p - pc,
            rank_by_r: 0,
        }
    }

    fn ledger(entries: &[(&str, Vec<Vec<f64>>)], runs: usize) -> LossLedger {
        let ids: Vec<String> = entries.iter().map(|(id, _)| id.to_string()).collect();
        let frags = (0..runs)
            .map(|run| LedgerFragment {
                run_index: run,
                sample_ids: ids.clone(),
                losses: (0..entries[0].1[run].len())
                    .map(|e| entries.iter().map(|(_, l)| l[run][e]).collect())
                    .collect(),
                predictions: vec![vec![0.5, 0.5]; ids.len()],
            })
            .collect();
        LossLedger::from_fragments(frags, 2).unwrap()
    }

    #[test]
    fn aggregate_is_mean_over_runs_and_epochs() {
        let l = ledger(&[("a", vec![vec![0.2, 0.4], vec![0.6, 0.8]])], 2);
        let agg = aggregate_losses(&l).unwrap();
        assert!((agg["a"] - 0.5).abs() < 1e-15);
        let l = ledger(&[("b", vec![vec![1.3]])], 1);
        assert_eq!(aggregate_losses(&l).unwrap()["b"], 1.3);
    }

    #[test]
    fn reduction_is_difference() {
        let x = a("x", 0.9, 0.2);
        assert!((x.r_i - 0.7).abs() < 1e-12);
    }

    #[test]
    fn corrections_top_k_positive_only() {
        let v = vec![a("a", 0.9, 0.0), a("b", 0.8, 0.1), a("c", 0.2, 0.1), a("d", 0.0, 0.2)];
        let sel = select_corrections(&v, Some(2));
        assert_eq!(sel.iter().map(|c| c.sample_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let sel = select_corrections(&v, Some(10));
        assert_eq!(sel.len(), 3);
        assert_eq!(select_corrections(&v, None).len(), 2);
        let none = vec![a("a", 0.1, 0.1), a("b", 0.0, 0.2)];
        assert!(select_corrections(&none, None).is_empty());
    }

    #[test]
    fn correction_ties_break_on_p_then_id() {
        let v = vec![a("b", 0.9, 0.3), a("a", 0.9, 0.3), a("c", 0.7, 0.1)];
        let ids: Vec<_> = select_corrections(&v, Some(3)).into_iter().map(|c| c.sample_id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn filters_top_k() {
        let v = vec![a("a", 0.99, 0.0), a("b", 0.8, 0.0), a("c", 0.3, 0.0)];
        let sel = select_filters(&v, Some(1));
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].sample_id, "a");
        assert!(select_filters(&v, Some(0)).is_empty());
        assert_eq!(select_filters(&v, None).len(), 2);
    }

    #[test]
    fn csv_columns() {
        let plan_csv = assessments_csv(&[a("x", 0.9, 0.2)]);
        assert!(plan_csv.starts_with("sample_id,given_label,aggregated_loss,p_noise"));
        assert!(plan_csv.contains("x,0,0,0.9,1,0,0.2,0.7,0\n"));
    }
}
