//! Per-sample loss trajectories and final predictive distributions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{entropy, fmt_f64};

/// Output of one training run over the development split.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerFragment {
    pub run_index: usize,
    pub sample_ids: Vec<String>,
    /// `losses[epoch][sample]`, evaluated after each epoch's updates.
    pub losses: Vec<Vec<f64>>,
    /// Final-epoch predictive distribution per sample.
    pub predictions: Vec<Vec<f64>>,
}

impl LedgerFragment {
    pub fn epochs(&self) -> usize {
        self.losses.len()
    }

    pub fn mean_loss(&self, epoch: usize) -> f64 {
        let l = &self.losses[epoch];
        l.iter().sum::<f64>() / l.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct RunTrace {
    losses: Vec<Vec<Option<f64>>>,
    predictions: Vec<Option<Vec<f64>>>,
}

/// Losses keyed by `(sample, run, epoch)` plus the final predictive
/// distribution of each `(sample, run)`. Entries may be missing when read
/// from disk; consumers report that as an integrity error.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLedger {
    num_classes: usize,
    sample_ids: Vec<String>,
    index: HashMap<String, usize>,
    runs: BTreeMap<usize, RunTrace>,
}

impl LossLedger {
    pub fn new(sample_ids: Vec<String>, num_classes: usize) -> Self {
        let index = sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            num_classes,
            sample_ids,
            index,
            runs: BTreeMap::new(),
        }
    }

    /// Merges run fragments. The result is keyed by run index, so the order
    /// of `fragments` does not matter.
    pub fn from_fragments(fragments: Vec<LedgerFragment>, num_classes: usize) -> Result<Self> {
        let first = fragments
            .first()
            .ok_or_else(|| Error::Integrity("no ledger fragments to merge".into()))?;
        let mut ledger = Self::new(first.sample_ids.clone(), num_classes);
        for f in fragments {
            ledger.insert_fragment(f)?;
        }
        Ok(ledger)
    }

    pub fn insert_fragment(&mut self, f: LedgerFragment) -> Result<()> {
        if f.sample_ids != self.sample_ids {
            return Err(Error::Integrity(format!(
                "run {} covers a different sample set",
                f.run_index
            )));
        }
        if self.runs.contains_key(&f.run_index) {
            return Err(Error::Integrity(format!("run {} merged twice", f.run_index)));
        }
        let trace = RunTrace {
            losses: f
                .losses
                .into_iter()
                .map(|e| e.into_iter().map(Some).collect())
                .collect(),
            predictions: f.predictions.into_iter().map(Some).collect(),
        };
        self.runs.insert(f.run_index, trace);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn sample_position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn run_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs.keys().copied()
    }

    pub fn num_runs(&self) -> usize {
        self.runs.len()
    }

    pub fn epochs(&self, run: usize) -> usize {
        self.runs.get(&run).map_or(0, |t| t.losses.len())
    }

    pub fn loss(&self, sample: usize, run: usize, epoch: usize) -> Option<f64> {
        self.runs.get(&run)?.losses.get(epoch)?.get(sample).copied().flatten()
    }

    pub fn prediction(&self, sample: usize, run: usize) -> Option<&[f64]> {
        self.runs
            .get(&run)?
            .predictions
            .get(sample)?
            .as_deref()
    }

    /// Every `(run, epoch)` loss of one sample, or an integrity error naming
    /// the first missing entry.
    pub fn sample_losses(&self, sample: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (&run, trace) in &self.runs {
            for (epoch, row) in trace.losses.iter().enumerate() {
                let v = row.get(sample).copied().flatten().ok_or_else(|| {
                    Error::Integrity(format!(
                        "ledger has no loss for sample `{}` run {run} epoch {epoch}",
                        self.sample_ids[sample]
                    ))
                })?;
                out.push(v);
            }
        }
        if out.is_empty() {
            return Err(Error::Integrity("ledger holds no runs".into()));
        }
        Ok(out)
    }

    /// Final predictive distribution of one sample averaged over runs.
    pub fn mean_prediction(&self, sample: usize) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.num_classes];
        for &run in self.runs.keys() {
            let p = self.prediction(sample, run).ok_or_else(|| {
                Error::Integrity(format!(
                    "ledger has no prediction for sample `{}` run {run}",
                    self.sample_ids[sample]
                ))
            })?;
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        let n = self.runs.len() as f64;
        if n == 0.0 {
            return Err(Error::Integrity("ledger holds no runs".into()));
        }
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// Writes `sample_id,run_index,epoch,loss` and
    /// `sample_id,run_index,prob_0..,confidence,entropy`.
    pub fn write_csv(&self, losses_path: &Path, predictions_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(losses_path)?;
        w.write_record(["sample_id", "run_index", "epoch", "loss"])?;
        for (s, id) in self.sample_ids.iter().enumerate() {
            for (&run, trace) in &self.runs {
                for epoch in 0..trace.losses.len() {
                    if let Some(l) = self.loss(s, run, epoch) {
                        w.write_record([
                            id.clone(),
                            run.to_string(),
                            epoch.to_string(),
                            fmt_f64(l),
                        ])?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io(losses_path, e))?;

        let mut w = csv::Writer::from_path(predictions_path)?;
        let mut header = vec!["sample_id".to_owned(), "run_index".to_owned()];
        header.extend((0..self.num_classes).map(|c| format!("prob_{c}")));
        header.extend(["confidence".to_owned(), "entropy".to_owned()]);
        w.write_record(&header)?;
        for (s, id) in self.sample_ids.iter().enumerate() {
            for &run in self.runs.keys() {
                if let Some(p) = self.prediction(s, run) {
                    let mut row = vec![id.clone(), run.to_string()];
                    row.extend(p.iter().map(|&v| fmt_f64(v)));
                    row.push(fmt_f64(confidence(p)));
                    row.push(fmt_f64(entropy(p)));
                    w.write_record(&row)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(predictions_path, e))
    }

    /// Reads the two ledger CSVs. Sample order follows first appearance in
    /// the loss file. Gaps are kept as missing entries.
    pub fn read_csv(losses_path: &Path, predictions_path: &Path) -> Result<Self> {
        let parse_err = |path: &Path, line: u64, reason: String| Error::Parse {
            path: path.to_owned(),
            line: line as usize,
            reason,
        };
        let mut sample_ids: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut raw: Vec<(usize, usize, usize, f64)> = Vec::new();
        let text = fs::read_to_string(losses_path).map_err(|e| Error::io(losses_path, e))?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        for row in r.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != 4 {
                return Err(parse_err(losses_path, line, "expected 4 fields".into()));
            }
            let id = row[0].to_owned();
            let s = *index.entry(id.clone()).or_insert_with(|| {
                sample_ids.push(id);
                sample_ids.len() - 1
            });
            let run = row[1]
                .parse()
                .map_err(|e| parse_err(losses_path, line, format!("run_index: {e}")))?;
            let epoch = row[2]
                .parse()
                .map_err(|e| parse_err(losses_path, line, format!("epoch: {e}")))?;
            let loss: f64 = row[3]
                .parse()
                .map_err(|e| parse_err(losses_path, line, format!("loss: {e}")))?;
            raw.push((s, run, epoch, loss));
        }

        let text = fs::read_to_string(predictions_path).map_err(|e| Error::io(predictions_path, e))?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let num_classes = r
            .headers()?
            .iter()
            .filter(|h| h.starts_with("prob_"))
            .count();
        let mut preds: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for row in r.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != num_classes + 4 {
                return Err(parse_err(predictions_path, line, "wrong field count".into()));
            }
            let s = *index.get(&row[0]).ok_or_else(|| {
                Error::Integrity(format!("prediction for unknown sample `{}`", &row[0]))
            })?;
            let run = row[1]
                .parse()
                .map_err(|e| parse_err(predictions_path, line, format!("run_index: {e}")))?;
            let p = (0..num_classes)
                .map(|c| row[2 + c].parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(predictions_path, line, format!("prob: {e}")))?;
            preds.push((s, run, p));
        }

        let n = sample_ids.len();
        let mut ledger = Self::new(sample_ids, num_classes);
        for (s, run, epoch, loss) in raw {
            let trace = ledger.runs.entry(run).or_default();
            if trace.losses.len() <= epoch {
                trace.losses.resize(epoch + 1, vec![None; n]);
            }
            trace.losses[epoch][s] = Some(loss);
        }
        for (s, run, p) in preds {
            let trace = ledger.runs.entry(run).or_default();
            if trace.predictions.len() < n {
                trace.predictions.resize(n, None);
            }
            trace.predictions[s] = Some(p);
        }
        Ok(ledger)
    }
}

/// Maximum class probability.
pub fn confidence(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fragment(run: usize) -> LedgerFragment {
        LedgerFragment {
            run_index: run,
            sample_ids: vec!["a".into(), "b".into()],
            losses: vec![vec![0.5, 1.0 + run as f64], vec![0.25, 2.0]],
            predictions: vec![vec![0.75, 0.25], vec![0.5, 0.5]],
        }
    }

    #[test]
    fn merge_order_does_not_matter() {
        let a = LossLedger::from_fragments(vec![fragment(0), fragment(1), fragment(2)], 2).unwrap();
        let b = LossLedger::from_fragments(vec![fragment(2), fragment(0), fragment(1)], 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_runs(), 3);
    }

    #[test]
    fn duplicate_run_rejected() {
        assert!(LossLedger::from_fragments(vec![fragment(0), fragment(0)], 2).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = LossLedger::from_fragments(vec![fragment(0), fragment(1), fragment(2)], 2).unwrap();
        let (lp, pp) = (dir.path().join("l.csv"), dir.path().join("p.csv"));
        l.write_csv(&lp, &pp).unwrap();
        let back = LossLedger::read_csv(&lp, &pp).unwrap();
        assert_eq!(back, l);
        let preds = fs::read_to_string(&pp).unwrap();
        assert!(preds.starts_with("sample_id,run_index,prob_0,prob_1,confidence,entropy\n"));
        assert!(preds.contains("b,0,0.5,0.5,0.5,0.693147181\n"));
    }

    #[test]
    fn missing_entry_surfaces_on_access() {
        let dir = tempfile::tempdir().unwrap();
        let l = LossLedger::from_fragments(vec![fragment(0), fragment(1)], 2).unwrap();
        let (lp, pp) = (dir.path().join("l.csv"), dir.path().join("p.csv"));
        l.write_csv(&lp, &pp).unwrap();
        let text = fs::read_to_string(&lp).unwrap();
        let pruned: String = text
            .lines()
            .filter(|line| !line.starts_with("b,1,"))
            .map(|line| format!("{line}\n"))
            .collect();
        fs::write(&lp, pruned).unwrap();
        let back = LossLedger::read_csv(&lp, &pp).unwrap();
        assert!(back.sample_losses(0).is_ok());
        assert!(matches!(back.sample_losses(1), Err(Error::Integrity(_))));
    }
}
