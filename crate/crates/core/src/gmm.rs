//! Three-component univariate Gaussian mixture over per-sample losses.
//!
//! The component with the lowest mean models correctly labeled samples, the
//! highest-mean component models mislabeled ones and the middle component
//! absorbs hard but correct samples. The posterior of the highest-mean
//! component is the noise probability.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{cmp_f64, derive_seed, fmt_f64, log_sum_exp};

pub const NUM_COMPONENTS: usize = 3;
pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const MIN_POINTS: usize = 10;
/// Points in the density report grid.
pub const DENSITY_GRID: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when the relative log-likelihood change drops below this.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: [f64; NUM_COMPONENTS],
    pub means: [f64; NUM_COMPONENTS],
    pub variances: [f64; NUM_COMPONENTS],
    /// Log-likelihood before the first and after every EM iteration.
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentRoles {
    pub clean: usize,
    pub hard: usize,
    pub noisy: usize,
}

impl GmmModel {
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood_trace
            .last()
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn log_joint(&self, x: f64) -> [f64; NUM_COMPONENTS] {
        std::array::from_fn(|k| {
            if self.weights[k] <= 0.0 {
                f64::NEG_INFINITY
            } else {
                self.weights[k].ln() + log_normal(x, self.means[k], self.variances[k])
            }
        })
    }

    /// Mixture density at `x` and the weighted component densities.
    pub fn densities(&self, x: f64) -> (f64, [f64; NUM_COMPONENTS]) {
        let comps = self.log_joint(x).map(f64::exp);
        (comps.iter().sum(), comps)
    }
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

/// Posterior component probabilities, normalized in log space.
pub fn responsibilities(m: &GmmModel, x: f64) -> [f64; NUM_COMPONENTS] {
    let lj = m.log_joint(x);
    let lse = log_sum_exp(&lj);
    lj.map(|l| (l - lse).exp())
}

/// Posterior of the noisy (highest-mean) component.
pub fn noise_probability(m: &GmmModel, roles: &ComponentRoles, x: f64) -> f64 {
    responsibilities(m, x)[roles.noisy].clamp(0.0, 1.0)
}

/// Orders components by mean; equal means put the smaller variance first.
pub fn assign_roles(m: &GmmModel) -> ComponentRoles {
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        cmp_f64(m.means[a], m.means[b])
            .then(cmp_f64(m.variances[a], m.variances[b]))
            .then(a.cmp(&b))
    });
    ComponentRoles {
        clean: order[0],
        hard: order[1],
        noisy: order[2],
    }
}

struct Params {
    weights: [f64; NUM_COMPONENTS],
    means: [f64; NUM_COMPONENTS],
    variances: [f64; NUM_COMPONENTS],
}

/// Fits the mixture with EM, keeping the best of `opts.restarts` starts.
///
/// Restart 0 places the means at the 1/6, 3/6 and 5/6 quantiles with the
/// variance of each third of the sorted data; later restarts use distinct
/// random data points as means and the pooled variance.
pub fn fit_gmm(xs: &[f64], opts: &FitOptions) -> Result<GmmModel> {
    if xs.len() < MIN_POINTS {
        return Err(Error::Domain(format!(
            "need at least {MIN_POINTS} points, got {}",
            xs.len()
        )));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("inputs must be finite".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::Degenerate(
            "all values identical; losses carry no separation".into(),
        ));
    }
    let restarts = opts.restarts.max(1);
    let mut best: Option<GmmModel> = None;
    for restart in 0..restarts {
        let init = if restart == 0 {
            quantile_init(xs, var)
        } else {
            random_init(xs, var, derive_seed(opts.seed, &[restart as u64]))
        };
        let model = run_em(xs, init, opts);
        if best
            .as_ref()
            .is_none_or(|b| model.log_likelihood() > b.log_likelihood())
        {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn quantile_init(xs: &[f64], pooled_var: f64) -> Params {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| cmp_f64(*a, *b));
    let n = sorted.len();
    let q = |f: f64| sorted[((f * n as f64) as usize).min(n - 1)];
    let means = [q(1.0 / 6.0), q(3.0 / 6.0), q(5.0 / 6.0)];
    let variances = std::array::from_fn(|k| {
        let part = &sorted[k * n / 3..(k + 1) * n / 3];
        let m = part.iter().sum::<f64>() / part.len() as f64;
        let v = part.iter().map(|x| (x - m).powi(2)).sum::<f64>() / part.len() as f64;
        v.max(1e-3 * pooled_var).max(VARIANCE_FLOOR)
    });
    Params {
        weights: [1.0 / 3.0; 3],
        means,
        variances,
    }
}

fn random_init(xs: &[f64], pooled_var: f64, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, xs.len(), NUM_COMPONENTS);
    let mut means: [f64; NUM_COMPONENTS] = std::array::from_fn(|k| xs[picks.index(k)]);
    means.sort_by(|a, b| cmp_f64(*a, *b));
    Params {
        weights: [1.0 / 3.0; 3],
        means,
        variances: [pooled_var.max(VARIANCE_FLOOR); 3],
    }
}

fn log_likelihood_and_resp(xs: &[f64], p: &Params, resp: &mut [[f64; NUM_COMPONENTS]]) -> f64 {
    let log_w = p.weights.map(|w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY });
    let mut ll = 0.0;
    for (x, r) in xs.iter().zip(resp.iter_mut()) {
        let lj: [f64; NUM_COMPONENTS] = std::array::from_fn(|k| {
            if log_w[k] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_w[k] + log_normal(*x, p.means[k], p.variances[k])
            }
        });
        let lse = log_sum_exp(&lj);
        ll += lse;
        *r = lj.map(|l| (l - lse).exp());
    }
    ll
}

fn run_em(xs: &[f64], mut p: Params, opts: &FitOptions) -> GmmModel {
    let n = xs.len() as f64;
    let mut resp = vec![[0.0; NUM_COMPONENTS]; xs.len()];
    let mut ll = log_likelihood_and_resp(xs, &p, &mut resp);
    let mut trace = vec![ll];
    for _ in 0..opts.max_iter {
        // M-step
        for k in 0..NUM_COMPONENTS {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            p.weights[k] = nk / n;
            if nk <= 0.0 {
                continue;
            }
            let mu = resp.iter().zip(xs).map(|(r, x)| r[k] * x).sum::<f64>() / nk;
            let var = resp
                .iter()
                .zip(xs)
                .map(|(r, x)| r[k] * (x - mu).powi(2))
                .sum::<f64>()
                / nk;
            p.means[k] = mu;
            p.variances[k] = var.max(VARIANCE_FLOOR);
        }
        let total: f64 = p.weights.iter().sum();
        p.weights.iter_mut().for_each(|w| *w /= total);

        let next = log_likelihood_and_resp(xs, &p, &mut resp);
        trace.push(next);
        let converged = (next - ll).abs() <= opts.tol * ll.abs().max(f64::MIN_POSITIVE);
        ll = next;
        if converged {
            break;
        }
    }
    GmmModel {
        weights: p.weights,
        means: p.means,
        variances: p.variances,
        log_likelihood_trace: trace,
    }
}

/// JSON form `{weights, means, variances, roles, trace}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedGmm {
    pub weights: [f64; NUM_COMPONENTS],
    pub means: [f64; NUM_COMPONENTS],
    pub variances: [f64; NUM_COMPONENTS],
    pub roles: ComponentRoles,
    pub trace: Vec<f64>,
}

impl SavedGmm {
    pub fn new(m: &GmmModel) -> Self {
        Self {
            weights: m.weights,
            means: m.means,
            variances: m.variances,
            roles: assign_roles(m),
            trace: m.log_likelihood_trace.clone(),
        }
    }

    pub fn model(&self) -> GmmModel {
        GmmModel {
            weights: self.weights,
            means: self.means,
            variances: self.variances,
            log_likelihood_trace: self.trace.clone(),
        }
    }
}

pub fn write_model_json(m: &GmmModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&SavedGmm::new(m))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_model_json(path: &Path) -> Result<GmmModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<SavedGmm>(&text)?.model())
}

/// `x,total_density,comp_0,comp_1,comp_2` over a [`DENSITY_GRID`]-point grid
/// spanning `[lo, hi]`. Component columns are weighted densities.
pub fn density_report_csv(m: &GmmModel, lo: f64, hi: f64) -> String {
    let mut out = String::from("x,total_density,comp_0,comp_1,comp_2\n");
    for i in 0..DENSITY_GRID {
        let x = lo + (hi - lo) * i as f64 / (DENSITY_GRID - 1) as f64;
        let (total, c) = m.densities(x);
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(x),
            fmt_f64(total),
            fmt_f64(c[0]),
            fmt_f64(c[1]),
            fmt_f64(c[2])
        ));
    }
    out
}
