//! Focal-loss MLP training that records per-sample loss trajectories.

mod adamw;
mod focal;
mod ledger;
mod mlp;

pub use adamw::{AdamW, AdamWParams};
pub use focal::{focal_grad_logits, focal_loss, softmax, PROB_FLOOR};
pub use ledger::{confidence, LedgerFragment, LossLedger};
pub use mlp::Mlp;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::util::derive_seed;
use focal::{focal_grad_into, focal_term};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub focal_gamma: f64,
    /// Per-class focal weights; `None` uses inverse class frequency scaled
    /// to mean 1.
    pub focal_alpha: Option<Vec<f64>>,
    pub seed: u64,
    pub hidden_widths: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 64,
            focal_gamma: 2.0,
            focal_alpha: None,
            seed: 0,
            hidden_widths: vec![64, 32],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        if let Some(alpha) = &self.focal_alpha {
            if alpha.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
                return Err(Error::Config("focal_alpha entries must be > 0".into()));
            }
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Focal weights for a dataset: the configured vector, or inverse class
    /// frequency of the dev split normalized to mean 1.
    pub fn resolve_alpha(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let c = ds.num_classes();
        if let Some(alpha) = &self.focal_alpha {
            if alpha.len() != c {
                return Err(Error::Config(format!(
                    "focal_alpha has {} entries for {c} classes",
                    alpha.len()
                )));
            }
            return Ok(alpha.clone());
        }
        Ok(inverse_frequency_alpha(&ds.class_histogram(Some(Split::Dev))))
    }
}

/// `alpha_c ∝ 1 / freq_c`, scaled so the entries average to 1. Absent
/// classes get weight 1.
pub fn inverse_frequency_alpha(histogram: &[usize]) -> Vec<f64> {
    let total: usize = histogram.iter().sum();
    let inv: Vec<f64> = histogram
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { total as f64 / n as f64 })
        .collect();
    let present: Vec<f64> = inv.iter().copied().filter(|&v| v > 0.0).collect();
    if present.is_empty() {
        return vec![1.0; histogram.len()];
    }
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    inv.into_iter()
        .map(|v| if v > 0.0 { v / mean } else { 1.0 })
        .collect()
}

/// Trains one run on the dev split of `ds`.
///
/// The initialization and every epoch's batch order are drawn from streams
/// derived from `(cfg.seed, run_index)`, so identical inputs give identical
/// results. After each epoch every dev sample's focal loss is evaluated with
/// the current weights.
pub fn train(ds: &Dataset, cfg: &TrainingConfig, run_index: usize) -> Result<(Mlp, LedgerFragment)> {
    cfg.validate()?;
    let dev: Vec<&SampleRecord> = ds.split(Split::Dev).collect();
    if dev.is_empty() {
        return Err(Error::Training("dev split is empty".into()));
    }
    let hist = ds.class_histogram(Some(Split::Dev));
    if let Some(missing) = hist.iter().position(|&n| n == 0) {
        return Err(Error::Training(format!(
            "class {missing} (`{}`) has no dev samples",
            ds.class_names()[missing]
        )));
    }
    let alpha = cfg.resolve_alpha(ds)?;
    let c = ds.num_classes();
    let mut sizes = vec![ds.dim()];
    sizes.extend(&cfg.hidden_widths);
    sizes.push(c);

    let run_seed = derive_seed(cfg.seed, &[run_index as u64]);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, &[u64::MAX]));
    let mut model = Mlp::new(&sizes, &mut init_rng);
    let mut opt = AdamW::new(
        AdamWParams::new(cfg.learning_rate, cfg.weight_decay),
        model.num_params(),
    );

    let mut order: Vec<usize> = (0..dev.len()).collect();
    let mut grad = vec![0.0; model.num_params()];
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut predictions = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, &[epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let r = dev[i];
                let a = alpha[r.given_label];
                model.accumulate_gradient(&r.features, &mut grad, |p, d| {
                    focal_grad_into(p, r.given_label, cfg.focal_gamma, a, d)
                });
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(model.params_mut(), &grad);
        }

        let probs: Vec<Vec<f64>> = dev.iter().map(|r| model.probabilities(&r.features)).collect();
        losses.push(
            dev.iter()
                .zip(&probs)
                .map(|(r, p)| focal_term(p[r.given_label], cfg.focal_gamma, alpha[r.given_label]))
                .collect(),
        );
        if epoch + 1 == cfg.epochs {
            predictions = probs;
        }
    }

    let fragment = LedgerFragment {
        run_index,
        sample_ids: dev.iter().map(|r| r.sample_id.clone()).collect(),
        losses,
        predictions,
    };
    Ok((model, fragment))
}

/// Runs `train` for every run index in parallel and merges the fragments.
pub fn train_runs(ds: &Dataset, cfg: &TrainingConfig, runs: usize) -> Result<LossLedger> {
    if runs == 0 {
        return Err(Error::Config("at least one training run required".into()));
    }
    let fragments = (0..runs)
        .into_par_iter()
        .map(|run| train(ds, cfg, run).map(|(_, f)| f))
        .collect::<Result<Vec<_>>>()?;
    LossLedger::from_fragments(fragments, ds.num_classes())
}

/// Predictive distribution of the model for one sample.
pub fn predict(model: &Mlp, sample: &SampleRecord) -> Result<Vec<f64>> {
    if sample.features.len() != model.input_dim() {
        return Err(Error::Domain(format!(
            "sample `{}` has {} features, model expects {}",
            sample.sample_id,
            sample.features.len(),
            model.input_dim()
        )));
    }
    Ok(model.probabilities(&sample.features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_corpus, SyntheticConfig};

    fn blobs() -> Dataset {
        generate_synthetic_corpus(&SyntheticConfig {
            n_per_class: vec![120, 80],
            test_per_class: vec![],
            dim: 4,
            class_separation: 6.0,
            ambiguous_fraction: 0.0,
            seed: 1,
        })
        .unwrap()
    }

    fn fast() -> TrainingConfig {
        TrainingConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn inverse_frequency_normalized_to_mean_one() {
        let a = inverse_frequency_alpha(&[900, 100]);
        assert!((a[0] - 0.2).abs() < 1e-12 && (a[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_on_separable_blobs() {
        let (_, f) = train(&blobs(), &TrainingConfig::default(), 0).unwrap();
        assert!(f.mean_loss(9) < f.mean_loss(0));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = blobs();
        let a = train(&ds, &fast(), 2).unwrap();
        let b = train(&ds, &fast(), 2).unwrap();
        assert_eq!(a, b);
        let c = train(&ds, &fast(), 3).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let ds = blobs();
        let cfg = TrainingConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            epochs: 1,
            ..Default::default()
        };
        let (trained, _) = train(&ds, &cfg, 0).unwrap();
        let mut sizes = vec![ds.dim()];
        sizes.extend(&cfg.hidden_widths);
        sizes.push(2);
        let run_seed = derive_seed(cfg.seed, &[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, &[u64::MAX]));
        assert_eq!(trained, Mlp::new(&sizes, &mut rng));
    }

    #[test]
    fn ledger_invariants_hold() {
        let ds = blobs();
        let ledger = train_runs(&ds, &fast(), 3).unwrap();
        let c = ds.num_classes() as f64;
        for s in 0..ledger.sample_ids().len() {
            assert_eq!(ledger.sample_losses(s).unwrap().len(), 30);
            assert!(ledger.sample_losses(s).unwrap().iter().all(|&l| l >= 0.0));
            for run in 0..3 {
                let p = ledger.prediction(s, run).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let h = crate::util::entropy(p);
                assert!((0.0..=c.ln() + 1e-12).contains(&h));
                let conf = confidence(p);
                assert!(conf >= 1.0 / c - 1e-12 && conf <= 1.0);
            }
        }
    }

    #[test]
    fn missing_class_is_training_error() {
        let ds = blobs();
        let records: Vec<_> = ds
            .records()
            .iter()
            .filter(|r| r.given_label == 0)
            .cloned()
            .collect();
        let one = Dataset::new(records, 2, ds.class_names().to_vec()).unwrap();
        assert!(matches!(train(&one, &fast(), 0), Err(Error::Training(_))));
    }

    #[test]
    fn predict_checks_dimension_and_normalizes() {
        let ds = blobs();
        let (model, _) = train(&ds, &fast(), 0).unwrap();
        let r = &ds.records()[0];
        let p = predict(&model, r).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p, predict(&model, r).unwrap());
        let mut bad = r.clone();
        bad.features.push(0.0);
        assert!(matches!(predict(&model, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn class_centroid_predicted_correctly() {
        let ds = blobs();
        let (model, _) = train(&ds, &fast(), 0).unwrap();
        let mut centroid = ds.records()[0].clone();
        // class 0 mean sits on the first axis at sep / sqrt(2)
        centroid.features = vec![6.0 / std::f64::consts::SQRT_2, 0.0, 0.0, 0.0];
        let p = predict(&model, &centroid).unwrap();
        assert_eq!(crate::util::argmax(&p), 0);
        centroid.features = vec![0.0, 6.0 / std::f64::consts::SQRT_2, 0.0, 0.0];
        assert_eq!(crate::util::argmax(&predict(&model, &centroid).unwrap()), 1);
    }
}
