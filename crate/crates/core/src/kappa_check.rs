//! Randomized check that the filter-and-clip rule stays within its
//! robustness bound on synthetic update populations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attacks::{ada_b, estimate_principal_sign};
use crate::defenses::{alignins, AlignInsConfig, ClientUpdate};
use crate::error::{invalid, Result};
use crate::eval::kappa_bound;
use crate::seed::{self, Stream};
use crate::vecops::{l2_norm, mean_of, median, squared_distance, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    /// A benign-looking update multiplied by a large factor.
    Scaled,
    /// The negated benign direction.
    SignFlipped,
    /// The benign principal sign at the median benign norm.
    AdaB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KappaCheckConfig {
    pub trials: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub epsilon: f64,
    /// Used for both filtering radii.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for KappaCheckConfig {
    fn default() -> Self {
        KappaCheckConfig {
            trials: 200,
            n_min: 7,
            n_max: 20,
            d_min: 5,
            d_max: 50,
            epsilon: 0.1,
            lambda: 1.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub adversary: Adversary,
    pub selected: usize,
    /// `|S| >= n - 2m`.
    pub precondition_met: bool,
    pub measured: f64,
    pub bound: f64,
    pub nu_bar: f64,
    pub zeta_bar: f64,
    pub clip_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaCheckReport {
    pub trials: Vec<TrialResult>,
    /// Trials meeting the precondition whose measured error exceeds the bound.
    pub violations: usize,
    pub precondition_failures: usize,
}

impl KappaCheckReport {
    pub fn precondition_failure_rate(&self) -> f64 {
        self.precondition_failures as f64 / self.trials.len().max(1) as f64
    }
}

/// Largest attacker count admitted by the bound, `m < n/(3+eps)`.
fn max_attackers(n: usize, epsilon: f64) -> usize {
    let limit = n as f64 / (3.0 + epsilon);
    let m = limit.ceil() as usize;
    if (m as f64) < limit {
        m
    } else {
        m.saturating_sub(1)
    }
}

/// One randomized instance.
pub fn run_trial(cfg: &KappaCheckConfig, trial: usize) -> Result<TrialResult> {
    let mut rng = seed::stream_rng(cfg.seed, Stream::KappaCheck, &[trial as u64]);
    let n = rng.random_range(cfg.n_min..=cfg.n_max);
    let d = rng.random_range(cfg.d_min..=cfg.d_max);
    let m = rng.random_range(1..=max_attackers(n, cfg.epsilon).max(1));
    let adversary = match rng.random_range(0..3) {
        0 => Adversary::Scaled,
        1 => Adversary::SignFlipped,
        _ => Adversary::AdaB,
    };
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    let het_std = rng.random_range(0.1..0.5);
    let noise_std = rng.random_range(0.1..0.5);

    // benign update = shared direction + client drift + sampling noise
    let direction: Vec<f64> = (0..d).map(|_| std.sample(&mut rng)).collect();
    let n_good = n - m;
    let mut drifts = Vec::with_capacity(n_good);
    let mut noises = Vec::with_capacity(n_good);
    for _ in 0..n_good {
        drifts.push((0..d).map(|j| direction[j] + het_std * std.sample(&mut rng)).collect::<Vec<f64>>());
        noises.push((0..d).map(|_| noise_std * std.sample(&mut rng)).collect::<Vec<f64>>());
    }
    let benign: Vec<Vec<f64>> = drifts
        .iter()
        .zip(&noises)
        .map(|(h, z)| h.iter().zip(z).map(|(a, b)| a + b).collect())
        .collect();
    let nu_bar = noises.iter().map(|z| l2_norm(z).powi(2)).sum::<f64>() / n_good as f64;
    let drift_mean = mean_of(drifts.iter().map(|v| v.as_slice()))?;
    let zeta_bar = drifts.iter().map(|h| squared_distance(h, &drift_mean)).sum::<f64>() / n_good as f64;
    let benign_mean = mean_of(benign.iter().map(|v| v.as_slice()))?;

    // the global model leans toward the common direction
    let global: Vec<f64> = direction.iter().map(|x| 3.0 * x + std.sample(&mut rng)).collect();

    let refs: Vec<&[f64]> = benign.iter().map(|v| v.as_slice()).collect();
    let norms: Vec<f64> = benign.iter().map(|v| l2_norm(v)).collect();
    let med_norm = median(&norms)?;
    let mut malicious = Vec::with_capacity(m);
    for _ in 0..m {
        let base: Vec<f64> = benign_mean.iter().map(|x| x + noise_std * std.sample(&mut rng)).collect();
        let v = match adversary {
            Adversary::Scaled => {
                let f = rng.random_range(2.0..10.0);
                base.iter().map(|x| f * x).collect()
            }
            Adversary::SignFlipped => base.iter().map(|x| -x).collect(),
            Adversary::AdaB => ada_b(&estimate_principal_sign(&refs, None)?, med_norm)?.into_inner(),
        };
        malicious.push(v);
    }

    // attackers take the lowest ids
    let updates: Vec<ClientUpdate> = malicious
        .into_iter()
        .chain(benign)
        .enumerate()
        .map(|(i, v)| Ok(ClientUpdate::new(i, ParamVector::new(v)?)))
        .collect::<Result<_>>()?;
    let acfg = AlignInsConfig {
        lambda_c: cfg.lambda,
        lambda_s: cfg.lambda,
        ..Default::default()
    };
    let out = alignins(&updates, &global, &acfg)?;
    let clip_c = out.clip_threshold.unwrap_or(0.0);
    let selected = out.selected.len();
    let measured = squared_distance(&out.aggregated, &benign_mean);
    let bound = kappa_bound(n, m, cfg.epsilon, nu_bar, zeta_bar, clip_c)?;
    Ok(TrialResult {
        n,
        m,
        d,
        adversary,
        selected,
        precondition_met: selected + 2 * m >= n,
        measured,
        bound,
        nu_bar,
        zeta_bar,
        clip_c,
    })
}

pub fn run_kappa_check(cfg: &KappaCheckConfig) -> Result<KappaCheckReport> {
    if cfg.trials == 0 || cfg.n_min < 4 || cfg.n_min > cfg.n_max || cfg.d_min == 0 || cfg.d_min > cfg.d_max {
        return invalid("kappa check needs trials >= 1, 4 <= n_min <= n_max and 1 <= d_min <= d_max");
    }
    if !(cfg.epsilon > 0.0 && cfg.lambda >= 0.0) {
        return invalid("kappa check needs epsilon > 0 and lambda >= 0");
    }
    let trials = (0..cfg.trials).map(|t| run_trial(cfg, t)).collect::<Result<Vec<_>>>()?;
    let violations = trials.iter().filter(|t| t.precondition_met && t.measured > t.bound).count();
    let precondition_failures = trials.iter().filter(|t| !t.precondition_met).count();
    Ok(KappaCheckReport {
        trials,
        violations,
        precondition_failures,
    })
}
