//! AlignIns: direction-alignment inspection followed by norm clipping.
//!
//! Each update is scored twice. The temporal direction alignment (TDA) is its
//! cosine with the current global model; the masked principal sign alignment
//! (MPSA) is the fraction of its top-k magnitude coordinates whose sign agrees
//! with the coordinate-wise majority sign of all updates. Updates whose
//! median-based z-score on either statistic falls outside the configured
//! radius are dropped. Survivors are clipped to the median survivor norm and
//! averaged.

use serde::{Deserialize, Serialize};

use super::{common_dim, AggregationOutcome, AlignmentScores, ClientUpdate};
use crate::error::{invalid, Error, Result};
use crate::vecops::{
    self, check_len, cosine_similarity, l2_norm, median, mz_scores, top_k_mask, ParamVector,
    SignVector,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignInsConfig {
    /// Filtering radius on the TDA z-scores.
    pub lambda_c: f64,
    /// Filtering radius on the MPSA z-scores.
    pub lambda_s: f64,
    /// Fraction of coordinates inspected by MPSA.
    pub k_fraction: f64,
}

impl Default for AlignInsConfig {
    fn default() -> Self {
        AlignInsConfig {
            lambda_c: 1.0,
            lambda_s: 1.0,
            k_fraction: 0.3,
        }
    }
}

impl AlignInsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0) || !(self.lambda_s >= 0.0) {
            return invalid("filtering radii must be nonnegative");
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return invalid(format!("k_fraction must lie in (0, 1], got {}", self.k_fraction));
        }
        Ok(())
    }
}

/// `round(k_fraction * d)` clamped to `[1, d]`.
pub fn masking_count(k_fraction: f64, dim: usize) -> usize {
    ((k_fraction * dim as f64).round() as usize).clamp(1, dim)
}

/// Majority sign per coordinate; exact ties give 0.
pub fn principal_sign(updates: &[ClientUpdate]) -> Result<SignVector> {
    let d = common_dim(updates)?;
    let mut votes = vec![0i64; d];
    for u in updates {
        for (vote, &x) in votes.iter_mut().zip(u.delta.iter()) {
            if x > 0.0 {
                *vote += 1;
            } else if x < 0.0 {
                *vote -= 1;
            }
        }
    }
    SignVector::new(votes.into_iter().map(|v| v.signum() as i8).collect())
}

/// Cosine of each update with the global model. Zero updates score 0.
pub fn tda_scores(updates: &[ClientUpdate], global_model: &[f64]) -> Result<Vec<f64>> {
    let d = common_dim(updates)?;
    check_len(d, global_model.len())?;
    if l2_norm(global_model) == 0.0 {
        return Err(Error::Degenerate("global model has zero norm".into()));
    }
    updates
        .iter()
        .map(|u| match cosine_similarity(&u.delta, global_model) {
            Ok(c) => Ok(c),
            Err(Error::Degenerate(_)) => Ok(0.0),
            Err(e) => Err(e),
        })
        .collect()
}

/// Fraction of each update's top-`k` coordinates whose sign matches `principal`.
pub fn mpsa_scores(updates: &[ClientUpdate], principal: &SignVector, k: usize) -> Result<Vec<f64>> {
    let d = common_dim(updates)?;
    check_len(d, principal.dim())?;
    updates
        .iter()
        .map(|u| {
            let mask = top_k_mask(&u.delta, k)?;
            let signs = vecops::sign(&u.delta);
            let mismatched = mask.indices().filter(|&j| signs[j] != principal[j]).count();
            Ok(1.0 - mismatched as f64 / k as f64)
        })
        .collect()
}

/// Runs the full AlignIns filter-and-clip aggregation.
///
/// If every update is filtered out the outcome carries a zero update, an empty
/// selection and `flagged = true`, leaving the global model unchanged.
pub fn alignins(
    updates: &[ClientUpdate],
    global_model: &[f64],
    cfg: &AlignInsConfig,
) -> Result<AggregationOutcome> {
    cfg.validate()?;
    let d = common_dim(updates)?;

    let tda = tda_scores(updates, global_model)?;
    let principal = principal_sign(updates)?;
    let mpsa = mpsa_scores(updates, &principal, masking_count(cfg.k_fraction, d))?;
    let mz_tda = mz_scores(&tda)?;
    let mz_mpsa = mz_scores(&mpsa)?;

    let mut kept: Vec<usize> = (0..updates.len())
        .filter(|&i| mz_tda[i].abs() <= cfg.lambda_c && mz_mpsa[i].abs() <= cfg.lambda_s)
        .collect();
    let scores = AlignmentScores {
        tda,
        mpsa,
        mz_tda,
        mz_mpsa,
    };

    if kept.is_empty() {
        return Ok(AggregationOutcome {
            aggregated: ParamVector::zeros(d),
            selected: Vec::new(),
            scores: Some(scores),
            clip_threshold: None,
            flagged: true,
        });
    }

    kept.sort_by_key(|&i| updates[i].client_id);
    let norms: Vec<f64> = kept.iter().map(|&i| updates[i].delta.norm()).collect();
    let clip = median(&norms)?;
    let mut acc = vec![0.0; d];
    for (&i, &norm) in kept.iter().zip(&norms) {
        let scale = if norm > 0.0 { (clip / norm).min(1.0) } else { 1.0 };
        vecops::axpy(scale, &updates[i].delta, &mut acc);
    }
    let count = kept.len() as f64;
    acc.iter_mut().for_each(|x| *x /= count);

    let selected: Vec<usize> = kept.iter().map(|&i| updates[i].client_id).collect();
    Ok(AggregationOutcome {
        aggregated: ParamVector::from_raw(acc),
        selected,
        scores: Some(scores),
        clip_threshold: Some(clip),
        flagged: false,
    })
}
