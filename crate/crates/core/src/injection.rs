//! Uncertainty-targeted label noise injection with ground-truth bookkeeping.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{confidence, LossLedger};
use crate::dataset::{Dataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::util::{apportion, cmp_f64, derive_seed, entropy};

pub const MIN_SCORING_RUNS: usize = 3;
pub const MAX_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyGroup {
    Low,
    Mid,
    High,
}

impl UncertaintyGroup {
    pub const ALL: [UncertaintyGroup; 3] = [Self::Low, Self::Mid, Self::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Mid => "mid",
            Self::High => "high",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for UncertaintyGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub sample_id: String,
    pub mean_confidence: f64,
    pub mean_entropy: f64,
    pub norm_confidence: f64,
    pub norm_entropy: f64,
    pub score: f64,
    pub quantile_group: UncertaintyGroup,
}

fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

/// Scores each ledger sample by `0.5 (1 - conf_norm) + 0.5 entropy_norm`,
/// using final-epoch confidence and entropy averaged over runs, and assigns
/// rank-based tertiles (ties broken by sample id).
pub fn compute_uncertainty_scores(ledger: &LossLedger) -> Result<Vec<UncertaintyScore>> {
    if ledger.num_runs() < MIN_SCORING_RUNS {
        return Err(Error::Precondition(format!(
            "uncertainty scoring needs >= {MIN_SCORING_RUNS} runs, ledger has {}",
            ledger.num_runs()
        )));
    }
    let n = ledger.sample_ids().len();
    let runs: Vec<usize> = ledger.run_indices().collect();
    let mut conf = Vec::with_capacity(n);
    let mut ent = Vec::with_capacity(n);
    for s in 0..n {
        let (mut c, mut e) = (0.0, 0.0);
        for &run in &runs {
            let p = ledger.prediction(s, run).ok_or_else(|| {
                Error::Integrity(format!(
                    "no prediction for `{}` in run {run}",
                    ledger.sample_ids()[s]
                ))
            })?;
            c += confidence(p);
            e += entropy(p);
        }
        conf.push(c / runs.len() as f64);
        ent.push(e / runs.len() as f64);
    }
    let nc = min_max(&conf);
    let ne = min_max(&ent);
    let score: Vec<f64> = (0..n).map(|i| 0.5 * (1.0 - nc[i]) + 0.5 * ne[i]).collect();

    let ids = ledger.sample_ids();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp_f64(score[a], score[b]).then_with(|| ids[a].cmp(&ids[b])));
    let mut group = vec![UncertaintyGroup::Low; n];
    for (rank, &i) in order.iter().enumerate() {
        group[i] = UncertaintyGroup::ALL[(3 * rank / n).min(2)];
    }
    Ok((0..n)
        .map(|i| UncertaintyScore {
            sample_id: ids[i].clone(),
            mean_confidence: conf[i],
            mean_entropy: ent[i],
            norm_confidence: nc[i],
            norm_entropy: ne[i],
            score: score[i],
            quantile_group: group[i],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

impl Default for GroupWeights {
    fn default() -> Self {
        Self {
            low: 0.10,
            mid: 0.45,
            high: 0.45,
        }
    }
}

impl GroupWeights {
    fn get(&self, g: UncertaintyGroup) -> f64 {
        match g {
            UncertaintyGroup::Low => self.low,
            UncertaintyGroup::Mid => self.mid,
            UncertaintyGroup::High => self.high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub sample_id: String,
    pub old_label: usize,
    pub new_label: usize,
    pub group: UncertaintyGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub flipped: Vec<Flip>,
    pub rate: f64,
    pub weights: GroupWeights,
    pub seed: u64,
    pub per_class: Vec<usize>,
    pub per_group: BTreeMap<UncertaintyGroup, usize>,
}

impl InjectionReport {
    /// Flipped id → original label.
    pub fn truth(&self) -> HashMap<&str, usize> {
        self.flipped
            .iter()
            .map(|f| (f.sample_id.as_str(), f.old_label))
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `sample_id,old_label,new_label,group`.
    pub fn write_flips_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "old_label", "new_label", "group"])?;
        for f in &self.flipped {
            w.write_record([
                f.sample_id.clone(),
                f.old_label.to_string(),
                f.new_label.to_string(),
                f.group.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Flips `round(rate * |dev|)` dev labels.
///
/// Flips are apportioned to classes by class size, then to uncertainty
/// groups by `weights`; a group that runs short passes its remainder to the
/// next-higher-uncertainty group (the high group passes down). Each flipped
/// sample receives a uniformly drawn different class and keeps its original
/// label as `true_label`.
pub fn inject_noise(
    ds: &Dataset,
    rate: f64,
    scores: &[UncertaintyScore],
    weights: GroupWeights,
    seed: u64,
) -> Result<(Dataset, InjectionReport)> {
    if !(rate > 0.0 && rate <= MAX_RATE) {
        return Err(Error::Config(format!(
            "noise rate must lie in (0, {MAX_RATE}], got {rate}"
        )));
    }
    let w = [weights.low, weights.mid, weights.high];
    if w.iter().any(|&x| !(x.is_finite() && x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("group weights must be >= 0 and not all zero".into()));
    }
    let group_of: HashMap<&str, UncertaintyGroup> = scores
        .iter()
        .map(|s| (s.sample_id.as_str(), s.quantile_group))
        .collect();

    let c = ds.num_classes();
    let dev: Vec<(usize, &SampleRecord)> = ds
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Dev)
        .collect();
    // members[class][group] = dataset positions, in dataset order
    let mut members = vec![vec![Vec::new(); 3]; c];
    for &(pos, r) in &dev {
        let g = *group_of.get(r.sample_id.as_str()).ok_or_else(|| {
            Error::Precondition(format!("no uncertainty score for dev sample `{}`", r.sample_id))
        })?;
        members[r.given_label][g.index()].push(pos);
    }

    let total = (rate * dev.len() as f64).round() as usize;
    let class_sizes: Vec<f64> = members
        .iter()
        .map(|g| g.iter().map(Vec::len).sum::<usize>() as f64)
        .collect();
    let per_class = apportion(total, &class_sizes);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1ab31]));
    let mut records = ds.records().to_vec();
    let mut flipped = Vec::with_capacity(total);
    let mut per_group: BTreeMap<UncertaintyGroup, usize> =
        UncertaintyGroup::ALL.iter().map(|&g| (g, 0)).collect();
    for (class, &quota) in per_class.iter().enumerate() {
        // High first so remainder ties favour the more uncertain groups.
        let by_priority = [UncertaintyGroup::High, UncertaintyGroup::Mid, UncertaintyGroup::Low];
        let pw: Vec<f64> = by_priority.iter().map(|&g| weights.get(g)).collect();
        let mut want = [0usize; 3];
        for (g, n) in by_priority.iter().zip(apportion(quota, &pw)) {
            want[g.index()] = n;
        }
        let mut take = [0usize; 3];
        let mut carry = 0;
        for g in 0..3 {
            let avail = members[class][g].len();
            let need = want[g] + carry;
            take[g] = need.min(avail);
            carry = need - take[g];
        }
        for g in (0..3).rev() {
            let extra = carry.min(members[class][g].len() - take[g]);
            take[g] += extra;
            carry -= extra;
        }

        for (g, group) in UncertaintyGroup::ALL.iter().enumerate() {
            let mut pool = members[class][g].clone();
            pool.shuffle(&mut rng);
            let mut chosen: Vec<usize> = pool.into_iter().take(take[g]).collect();
            chosen.sort_unstable();
            for pos in chosen {
                let old = records[pos].given_label;
                let mut new = rng.random_range(0..c - 1);
                if new >= old {
                    new += 1;
                }
                let r = &mut records[pos];
                r.true_label = Some(r.true_label.unwrap_or(old));
                r.given_label = new;
                flipped.push(Flip {
                    sample_id: r.sample_id.clone(),
                    old_label: old,
                    new_label: new,
                    group: *group,
                });
                *per_group.get_mut(group).expect("all groups present") += 1;
            }
        }
    }
    let position: HashMap<&str, usize> = dev
        .iter()
        .map(|(p, r)| (r.sample_id.as_str(), *p))
        .collect();
    flipped.sort_by_key(|f| position[f.sample_id.as_str()]);

    let mut class_counts = vec![0; c];
    for f in &flipped {
        class_counts[f.old_label] += 1;
    }
    let noisy = Dataset::new(records, c, ds.class_names().to_vec())?;
    Ok((
        noisy,
        InjectionReport {
            flipped,
            rate,
            weights,
            seed,
            per_class: class_counts,
            per_group,
        },
    ))
}

/// Puts the original labels back on every flipped sample.
pub fn restore_labels(noisy: &Dataset, report: &InjectionReport) -> Result<Dataset> {
    let relabels: BTreeMap<String, usize> = report
        .flipped
        .iter()
        .map(|f| (f.sample_id.clone(), f.old_label))
        .collect();
    noisy.with_labels(&relabels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::LedgerFragment;
    use crate::dataset::{default_class_names, generate_synthetic_corpus, SyntheticConfig};

    fn ledger_from(preds: &[[f64; 2]]) -> LossLedger {
        let ids: Vec<String> = (0..preds.len()).map(|i| format!("s{i}")).collect();
        let frags = (0..3)
            .map(|run| LedgerFragment {
                run_index: run,
                sample_ids: ids.clone(),
                losses: vec![vec![0.1; preds.len()]],
                predictions: preds.iter().map(|p| p.to_vec()).collect(),
            })
            .collect();
        LossLedger::from_fragments(frags, 2).unwrap()
    }

    #[test]
    fn needs_three_runs() {
        let ids = vec!["a".to_string()];
        let frag = LedgerFragment {
            run_index: 0,
            sample_ids: ids,
            losses: vec![vec![0.1]],
            predictions: vec![vec![0.5, 0.5]],
        };
        let l = LossLedger::from_fragments(vec![frag], 2).unwrap();
        assert!(matches!(compute_uncertainty_scores(&l), Err(Error::Precondition(_))));
    }

    #[test]
    fn endpoints_and_uniform_entropy() {
        let l = ledger_from(&[[0.99, 0.01], [0.5, 0.5], [0.8, 0.2], [0.7, 0.3]]);
        let s = compute_uncertainty_scores(&l).unwrap();
        assert_eq!(s[0].score, 0.0);
        assert_eq!(s[0].quantile_group, UncertaintyGroup::Low);
        assert!((s[1].mean_entropy - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(s[1].score, 1.0);
        assert_eq!(s[1].quantile_group, UncertaintyGroup::High);
    }

    #[test]
    fn rate_out_of_range() {
        let ds = generate_synthetic_corpus(&SyntheticConfig::default()).unwrap();
        for rate in [0.0, 0.25, -0.1, f64::NAN] {
            assert!(matches!(
                inject_noise(&ds, rate, &[], GroupWeights::default(), 1),
                Err(Error::Config(_))
            ));
        }
    }

    fn synthetic_scores(ds: &Dataset) -> Vec<UncertaintyScore> {
        let dev: Vec<&SampleRecord> = ds.split(Split::Dev).collect();
        let n = dev.len();
        dev.iter()
            .enumerate()
            .map(|(i, r)| {
                // deterministic pseudo-random rank
                let rank = (i * 7919) % n;
                UncertaintyScore {
                    sample_id: r.sample_id.clone(),
                    mean_confidence: 0.0,
                    mean_entropy: 0.0,
                    norm_confidence: 0.0,
                    norm_entropy: 0.0,
                    score: rank as f64 / n as f64,
                    quantile_group: UncertaintyGroup::ALL[3 * rank / n],
                }
            })
            .collect()
    }

    #[test]
    fn proportional_allocation() {
        let ds = generate_synthetic_corpus(&SyntheticConfig::default()).unwrap();
        let scores = synthetic_scores(&ds);
        let (noisy, rep) = inject_noise(&ds, 0.05, &scores, GroupWeights::default(), 9).unwrap();
        assert_eq!(rep.flipped.len(), 50);
        assert_eq!(rep.per_class, vec![45, 5]);
        for f in &rep.flipped {
            let r = noisy.get(&f.sample_id).unwrap();
            assert_eq!(r.given_label, f.new_label);
            assert_eq!(r.true_label, Some(f.old_label));
            assert_ne!(f.old_label, f.new_label);
        }
        assert_eq!(restore_labels(&noisy, &rep).unwrap(), ds);
        let (_, again) = inject_noise(&ds, 0.05, &scores, GroupWeights::default(), 9).unwrap();
        assert_eq!(again, rep);
    }

    #[test]
    fn shortfall_spills_upward() {
        let ds = generate_synthetic_corpus(&SyntheticConfig::default()).unwrap();
        let mut scores = synthetic_scores(&ds);
        // Empty the high group of class 1 so its share must come from elsewhere.
        for s in &mut scores {
            let r = ds.get(&s.sample_id).unwrap();
            if r.given_label == 1 && s.quantile_group == UncertaintyGroup::High {
                s.quantile_group = UncertaintyGroup::Low;
            }
        }
        let weights = GroupWeights { low: 0.0, mid: 0.0, high: 1.0 };
        let (_, rep) = inject_noise(&ds, 0.2, &scores, weights, 3).unwrap();
        assert_eq!(rep.per_class, vec![180, 20]);
        assert_eq!(rep.flipped.len(), 200);
    }

    #[test]
    fn multiclass_new_label_differs() {
        let cfg = SyntheticConfig {
            n_per_class: vec![50, 30, 20],
            dim: 4,
            ..Default::default()
        };
        let ds = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(ds.class_names(), default_class_names(3).as_slice());
        let scores = synthetic_scores(&ds);
        let (_, rep) = inject_noise(&ds, 0.2, &scores, GroupWeights::default(), 5).unwrap();
        assert_eq!(rep.flipped.len(), 20);
        assert!(rep.flipped.iter().all(|f| f.new_label != f.old_label && f.new_label < 3));
    }
}
