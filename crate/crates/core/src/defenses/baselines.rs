//! Baseline aggregation rules: FedAvg, the FedAvg oracle, Multi-Krum, RFA,
//! RLR and FoolsGold.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{by_client_id, common_dim, AggregationOutcome, ClientUpdate, LabeledUpdate};
use crate::error::{invalid, Result};
use crate::vecops::{self, cosine_similarity, distance, mean_of, squared_distance, ParamVector};

/// Plain coordinate-wise mean.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    common_dim(updates)?;
    let mean = mean_of(by_client_id(updates).map(|u| u.delta.as_slice()))?;
    Ok(ParamVector::from_raw(mean))
}

/// Mean of the truth-benign updates only.
pub fn fedavg_oracle(updates: &[LabeledUpdate]) -> Result<ParamVector> {
    let benign: Vec<ClientUpdate> = updates
        .iter()
        .filter(|u| !u.is_malicious)
        .map(|u| u.update.clone())
        .collect();
    if benign.is_empty() {
        return invalid("fedavg oracle needs at least one benign update");
    }
    fedavg(&benign)
}

/// Krum scores: for each update, the summed squared distance to its
/// `n - assumed_m - 2` nearest other updates.
pub fn multi_krum_scores(updates: &[ClientUpdate], assumed_m: usize) -> Result<Vec<f64>> {
    common_dim(updates)?;
    let n = updates.len();
    if n < assumed_m + 3 {
        return invalid(format!("multi-krum needs n >= m + 3, got n={n}, m={assumed_m}"));
    }
    let neighbors = n - assumed_m - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_distance(&updates[i].delta, &updates[j].delta);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[..neighbors].iter().sum()
        })
        .collect())
}

/// Averages the `select_count` updates with the lowest Krum score.
///
/// Returns the aggregate and the chosen client ids. Score ties go to the lower client id.
pub fn multi_krum(
    updates: &[ClientUpdate],
    assumed_m: usize,
    select_count: usize,
) -> Result<(ParamVector, Vec<usize>)> {
    let scores = multi_krum_scores(updates, assumed_m)?;
    let n = updates.len();
    if select_count == 0 || select_count > n - assumed_m {
        return invalid(format!(
            "multi-krum select_count must lie in [1, n - m] = [1, {}], got {select_count}",
            n - assumed_m
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(updates[a].client_id.cmp(&updates[b].client_id))
    });
    let mut chosen: Vec<usize> = order[..select_count].to_vec();
    // sum in client-id order so the result does not depend on input order
    chosen.sort_by_key(|&i| updates[i].client_id);
    let mean = mean_of(chosen.iter().map(|&i| updates[i].delta.as_slice()))?;
    Ok((
        ParamVector::from_raw(mean),
        chosen.iter().map(|&i| updates[i].client_id).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfaParams {
    pub max_iters: usize,
    pub tol: f64,
    pub smoothing_eps: f64,
}

impl Default for RfaParams {
    fn default() -> Self {
        RfaParams {
            max_iters: 10,
            tol: 1e-6,
            smoothing_eps: 1e-8,
        }
    }
}

/// Smoothed Weiszfeld iteration for the geometric median, started at the mean.
pub fn rfa_geometric_median(updates: &[ClientUpdate], params: &RfaParams) -> Result<ParamVector> {
    let d = common_dim(updates)?;
    let mut z = mean_of(by_client_id(updates).map(|u| u.delta.as_slice()))?;
    for _ in 0..params.max_iters {
        let mut next = vec![0.0; d];
        let mut weight_sum = 0.0;
        for u in by_client_id(updates) {
            let w = 1.0 / distance(&u.delta, &z).max(params.smoothing_eps);
            vecops::axpy(w, &u.delta, &mut next);
            weight_sum += w;
        }
        next.iter_mut().for_each(|x| *x /= weight_sum);
        let step = distance(&next, &z);
        z = next;
        if step < params.tol {
            break;
        }
    }
    Ok(ParamVector::from_raw(z))
}

/// Robust learning rate: coordinates whose sign vote `|sum_i sgn(x_ij)|`
/// falls below `vote_threshold` are applied with a negated learning rate.
pub fn rlr(updates: &[ClientUpdate], vote_threshold: usize, server_lr: f64) -> Result<ParamVector> {
    if !(server_lr > 0.0) {
        return invalid("rlr server_lr must be positive");
    }
    let mut mean = fedavg(updates)?.into_inner();
    let d = mean.len();
    let mut votes = vec![0i64; d];
    for u in updates {
        for (v, &x) in votes.iter_mut().zip(u.delta.iter()) {
            *v += if x > 0.0 {
                1
            } else if x < 0.0 {
                -1
            } else {
                0
            };
        }
    }
    for (m, v) in mean.iter_mut().zip(&votes) {
        let rate = if v.unsigned_abs() as usize >= vote_threshold {
            server_lr
        } else {
            -server_lr
        };
        *m *= rate;
    }
    Ok(ParamVector::from_raw(mean))
}

/// FoolsGold client weights from pairwise cosine similarity of the given
/// coordinate slice (the output layer, or everything when `None`).
///
/// Pipeline, without the pardoning step:
/// `w_i = clip(1 - max_{j != i} cos(i, j), 0, 1)`, divide by `max w`, cap at
/// 0.99, then `ln(w / (1 - w)) + 0.5` clipped to `[0, 1]`.
pub fn foolsgold_weights(updates: &[ClientUpdate], layer: Option<Range<usize>>) -> Result<Vec<f64>> {
    let d = common_dim(updates)?;
    let n = updates.len();
    if n < 2 {
        return invalid("foolsgold needs at least two updates");
    }
    let range = layer.unwrap_or(0..d);
    if range.start >= range.end || range.end > d {
        return invalid(format!("foolsgold layer range {range:?} outside dimension {d}"));
    }
    let slices: Vec<&[f64]> = updates.iter().map(|u| &u.delta[range.clone()]).collect();
    let mut max_cs = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        for j in (i + 1)..n {
            // a zero slice has no direction; treat it as orthogonal
            let cs = cosine_similarity(slices[i], slices[j]).unwrap_or(0.0);
            max_cs[i] = max_cs[i].max(cs);
            max_cs[j] = max_cs[j].max(cs);
        }
    }
    let mut w: Vec<f64> = max_cs.iter().map(|cs| (1.0 - cs).clamp(0.0, 1.0)).collect();
    let top = w.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(vec![0.0; n]);
    }
    for x in w.iter_mut() {
        *x /= top;
        if *x >= 1.0 {
            *x = 0.99;
        }
        *x = if *x == 0.0 {
            0.0
        } else {
            ((*x / (1.0 - *x)).ln() + 0.5).clamp(0.0, 1.0)
        };
    }
    Ok(w)
}

/// FoolsGold-weighted average. All-zero weights fall back to FedAvg with the
/// outcome flagged.
pub fn foolsgold(updates: &[ClientUpdate], layer: Option<Range<usize>>) -> Result<AggregationOutcome> {
    let weights = foolsgold_weights(updates, layer)?;
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    if total == 0.0 {
        let ids = updates.iter().map(|u| u.client_id).collect();
        let mut out = AggregationOutcome::plain(fedavg(updates)?, ids);
        out.flagged = true;
        return Ok(out);
    }
    let d = updates[0].delta.dim();
    let mut acc = vec![0.0; d];
    for &i in &order {
        if weights[i] > 0.0 {
            vecops::axpy(weights[i] / total, &updates[i].delta, &mut acc);
        }
    }
    let selected = order
        .iter()
        .filter(|&&i| weights[i] > 0.0)
        .map(|&i| updates[i].client_id)
        .collect();
    Ok(AggregationOutcome::plain(ParamVector::from_raw(acc), selected))
}
