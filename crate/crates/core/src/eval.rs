//! Accuracy metrics, robustness measurements and the analytic bounds they are
//! compared against.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{backdoor_test_set, LabeledDataset, TriggerSpec};
use crate::defenses::{AggregationOutcome, LabeledUpdate};
use crate::error::{invalid, Result};
use crate::model::MlpModel;
use crate::seed::{self, Stream};
use crate::vecops::{mean_of, squared_distance};

/// Main-task, backdoor and robust accuracy, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub ma: f64,
    pub ba: f64,
    pub ra: f64,
}

/// One row of the per-round metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Accuracies are `None` on rounds skipped by the evaluation schedule.
    pub ma: Option<f64>,
    pub ba: Option<f64>,
    pub ra: Option<f64>,
    pub n_selected: usize,
    /// Truth-benign clients inside the selected set.
    pub selected_true_pos: usize,
    /// Truth-malicious clients inside the selected set.
    pub selected_false_pos: usize,
    pub clip_threshold: Option<f64>,
    pub empirical_kappa: Option<f64>,
    pub prop_error: Option<f64>,
    /// Propagation-error bound evaluated with the running kappa maximum.
    pub prop_bound: Option<f64>,
    /// The defense fell back to a degenerate answer this round.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityEstimate {
    /// Mean over clients of the mini-batch gradient variance.
    pub nu_bar: f64,
    /// Mean squared distance of client gradients from their average.
    pub zeta_bar: f64,
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// MA on `clean`; BA and RA on the fully triggered non-target samples.
pub fn evaluate(model: &MlpModel, clean: &LabeledDataset, trigger: &TriggerSpec) -> Result<Accuracy> {
    let backdoor = backdoor_test_set(clean, trigger)?;
    evaluate_prepared(model, clean, &backdoor, trigger.target_label)
}

/// [`evaluate`] with a precomputed backdoor set.
pub fn evaluate_prepared(
    model: &MlpModel,
    clean: &LabeledDataset,
    backdoor: &LabeledDataset,
    target_label: usize,
) -> Result<Accuracy> {
    let ma = main_accuracy(model, clean)?;
    let bd = model.predict_labels(backdoor)?;
    let to_target = bd.iter().filter(|&&p| p == target_label).count();
    let to_true = bd.iter().zip(backdoor.labels()).filter(|(p, l)| p == l).count();
    Ok(Accuracy {
        ma,
        ba: percent(to_target, backdoor.len()),
        ra: percent(to_true, backdoor.len()),
    })
}

/// Percentage of `data` classified correctly.
pub fn main_accuracy(model: &MlpModel, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return invalid("evaluation needs a non-empty test set");
    }
    let pred = model.predict_labels(data)?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(percent(correct, data.len()))
}

/// Squared distance between the aggregate and the mean of the truth-benign updates.
pub fn empirical_kappa(outcome: &AggregationOutcome, updates: &[LabeledUpdate]) -> Result<f64> {
    let mut benign: Vec<&LabeledUpdate> = updates.iter().filter(|u| !u.is_malicious).collect();
    if benign.is_empty() {
        return invalid("empirical kappa needs at least one benign update");
    }
    benign.sort_by_key(|u| u.update.client_id);
    let mean = mean_of(benign.iter().map(|u| u.update.delta.as_slice()))?;
    crate::vecops::check_len(mean.len(), outcome.aggregated.dim())?;
    Ok(squared_distance(&outcome.aggregated, &mean))
}

/// Robustness coefficient guaranteed for the filter-and-clip rule:
/// `(1 + m/(n-2m)) ((2/eps + 1)(2 nu + zeta) + 8 c^2)`, valid for `m < n/(3+eps)`.
pub fn kappa_bound(n: usize, m: usize, epsilon: f64, nu_bar: f64, zeta_bar: f64, clip_c: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return invalid("epsilon must be positive");
    }
    if !((m as f64) < n as f64 / (3.0 + epsilon)) {
        return invalid(format!("m = {m} is not below n/(3+eps) = {}", n as f64 / (3.0 + epsilon)));
    }
    if nu_bar < 0.0 || zeta_bar < 0.0 || clip_c < 0.0 {
        return invalid("variance, heterogeneity and clip threshold must be nonnegative");
    }
    let ratio = 1.0 + m as f64 / (n - 2 * m) as f64;
    Ok(ratio * ((2.0 / epsilon + 1.0) * (2.0 * nu_bar + zeta_bar) + 8.0 * clip_c * clip_c))
}

/// Bound on the distance between the attacked and the benign-only trajectory:
/// `phi (2 + 3 mu^2)^phi (kappa + 2 nu)` with `phi = sum_t alpha_t^2`.
pub fn propagation_error_bound(alphas: &[f64], mu: f64, kappa: f64, nu_bar: f64) -> Result<f64> {
    if alphas.is_empty() {
        return invalid("propagation bound needs at least one round");
    }
    let phi: f64 = alphas.iter().map(|a| a * a).sum();
    Ok(phi * (2.0 + 3.0 * mu * mu).powf(phi) * (kappa + 2.0 * nu_bar))
}

/// Estimates gradient variance and client heterogeneity at `model`.
///
/// For each client, `probes` mini-batches of `batch_size` rows (without
/// replacement) are compared with the full-shard gradient.
pub fn estimate_nu_zeta(
    benign_clients: &[&LabeledDataset],
    model: &MlpModel,
    probes: usize,
    batch_size: usize,
    seed: u64,
) -> Result<HeterogeneityEstimate> {
    if benign_clients.len() < 2 {
        return invalid("heterogeneity estimation needs at least two benign clients");
    }
    if probes < 2 {
        return invalid("need at least two probe batches");
    }
    if batch_size == 0 {
        return invalid("batch size must be positive");
    }
    let mut full = Vec::with_capacity(benign_clients.len());
    let mut nu_sum = 0.0;
    for (c, data) in benign_clients.iter().enumerate() {
        let g = model.gradient(data, None)?;
        let mut rng = seed::stream_rng(seed, Stream::Probe, &[c as u64]);
        let b = batch_size.min(data.len());
        let mut var = 0.0;
        for _ in 0..probes {
            let mut batch = index::sample(&mut rng, data.len(), b).into_vec();
            batch.sort_unstable();
            let gb = model.gradient(data, Some(&batch))?;
            var += squared_distance(&gb, &g);
        }
        nu_sum += var / probes as f64;
        full.push(g);
    }
    let mean = mean_of(full.iter().map(|g| g.as_slice()))?;
    let zeta = full.iter().map(|g| squared_distance(g, &mean)).sum::<f64>() / full.len() as f64;
    Ok(HeterogeneityEstimate {
        nu_bar: nu_sum / benign_clients.len() as f64,
        zeta_bar: zeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defenses::fedavg_oracle;
    use crate::model::{DenseLayer, MlpModel};
    use crate::vecops::ParamVector;
    use approx::assert_abs_diff_eq;

    fn constant_model(label: usize) -> MlpModel {
        // zero weights, bias favoring one class
        let mut bias = vec![0.0; 10];
        bias[label] = 5.0;
        MlpModel::from_layers(&[DenseLayer {
            weights: vec![vec![0.0; 10]; 784],
            bias,
        }])
        .unwrap()
    }

    fn images(labels: &[usize]) -> LabeledDataset {
        LabeledDataset::new(vec![0.3; labels.len() * 784], labels.to_vec(), 784, 10).unwrap()
    }

    #[test]
    fn always_target_model() {
        let acc = evaluate(&constant_model(0), &images(&[0, 1, 2, 3]), &TriggerSpec::default()).unwrap();
        assert_eq!(acc.ba, 100.0);
        assert_eq!(acc.ra, 0.0);
        assert_eq!(acc.ma, 25.0);
    }

    #[test]
    fn trigger_blind_perfect_classifier() {
        // pixel (10, 10) encodes the class; the trigger never touches it
        let labels = [0usize, 1, 2, 3, 4];
        let mut feats = vec![0.0; labels.len() * 784];
        for (i, &l) in labels.iter().enumerate() {
            feats[i * 784 + 10 * 28 + 10] = (l + 1) as f64 / 10.0;
        }
        let data = LabeledDataset::new(feats, labels.to_vec(), 784, 10).unwrap();
        // logit_c = -(x - (c+1)/10)^2 expanded: 2 w_c x - w_c^2 with w_c = (c+1)/10, minus x^2 (class independent)
        // a linear layer cannot drop x^2 but it is shared by all classes; scale by 100 for sharp softmax
        let mut weights = vec![vec![0.0; 10]; 784];
        let mut bias = vec![0.0; 10];
        for c in 0..10 {
            let w = (c + 1) as f64 / 10.0;
            weights[10 * 28 + 10][c] = 200.0 * w;
            bias[c] = -100.0 * w * w;
        }
        let model = MlpModel::from_layers(&[DenseLayer { weights, bias }]).unwrap();
        let acc = evaluate(&model, &data, &TriggerSpec::default()).unwrap();
        assert_eq!((acc.ma, acc.ba, acc.ra), (100.0, 0.0, 100.0));
    }

    #[test]
    fn outcomes_partition_triggered_samples() {
        let model = crate::model::init_model(&[784, 8, 10], 3).unwrap();
        let data = crate::data::gen_synthetic(10, 784, 50, 1).unwrap();
        let trig = TriggerSpec::default();
        let bd = backdoor_test_set(&data, &trig).unwrap();
        let pred = model.predict_labels(&bd).unwrap();
        let other = pred.iter().zip(bd.labels()).filter(|(p, l)| **p != 0 && p != l).count();
        let acc = evaluate(&model, &data, &trig).unwrap();
        assert_abs_diff_eq!(acc.ba + acc.ra + 100.0 * other as f64 / bd.len() as f64, 100.0, epsilon = 1e-9);
        assert!(evaluate(&model, &images(&[]), &trig).is_err());
    }

    fn labeled(rows: &[(&[f64], bool)]) -> Vec<LabeledUpdate> {
        rows.iter()
            .enumerate()
            .map(|(i, (r, bad))| {
                let v = ParamVector::new(r.to_vec()).unwrap();
                if *bad {
                    LabeledUpdate::malicious(i, v)
                } else {
                    LabeledUpdate::benign(i, v)
                }
            })
            .collect()
    }

    #[test]
    fn kappa_of_oracle_is_zero() {
        let ups = labeled(&[(&[1.0, 2.0], false), (&[9.0, 9.0], true), (&[0.3, -1.0], false)]);
        let out = AggregationOutcome {
            aggregated: fedavg_oracle(&ups).unwrap(),
            selected: vec![0, 2],
            scores: None,
            clip_threshold: None,
            flagged: false,
        };
        assert_eq!(empirical_kappa(&out, &ups).unwrap(), 0.0);
    }

    #[test]
    fn kappa_unit_offset() {
        let ups = labeled(&[(&[1.0, 2.0], false), (&[3.0, 2.0], false)]);
        let out = AggregationOutcome {
            aggregated: ParamVector::new(vec![2.0, 3.0]).unwrap(),
            selected: vec![],
            scores: None,
            clip_threshold: None,
            flagged: false,
        };
        assert_eq!(empirical_kappa(&out, &ups).unwrap(), 1.0);
        assert!(empirical_kappa(&out, &labeled(&[(&[1.0, 1.0], true)])).is_err());
    }

    #[test]
    fn kappa_bound_examples() {
        assert_eq!(kappa_bound(10, 0, 1.0, 0.0, 0.0, 1.0).unwrap(), 8.0);
        assert_eq!(kappa_bound(10, 0, 1.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
        // n=20, m=4, eps=0.1: (1 + 4/12) * (21 * (2 + 2) + 8 * 0.25) = (4/3) * 86
        let v = kappa_bound(20, 4, 0.1, 1.0, 2.0, 0.5).unwrap();
        let independent = (16.0 / 12.0) * ((2.0 / 0.1 + 1.0) * 4.0 + 2.0);
        assert_abs_diff_eq!(v, independent, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 344.0 / 3.0, epsilon = 1e-12);
        // 20 / 3.1 = 6.45
        assert!(kappa_bound(20, 6, 0.1, 0.0, 0.0, 1.0).is_ok());
        assert!(kappa_bound(20, 7, 0.1, 0.0, 0.0, 1.0).is_err());
        assert!(kappa_bound(20, 1, 0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn kappa_bound_monotone() {
        let base = kappa_bound(20, 2, 0.5, 1.0, 1.0, 1.0).unwrap();
        assert!(kappa_bound(20, 3, 0.5, 1.0, 1.0, 1.0).unwrap() >= base);
        assert!(kappa_bound(20, 2, 0.5, 2.0, 1.0, 1.0).unwrap() >= base);
        assert!(kappa_bound(20, 2, 0.5, 1.0, 2.0, 1.0).unwrap() >= base);
        assert!(kappa_bound(20, 2, 0.5, 1.0, 1.0, 2.0).unwrap() >= base);
    }

    #[test]
    fn propagation_bound_examples() {
        assert_eq!(propagation_error_bound(&[1.0; 5], 1.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(propagation_error_bound(&[1.0], 0.0, 1.0, 0.0).unwrap(), 2.0);
        assert!(propagation_error_bound(&[], 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn propagation_bound_converges_under_decay() {
        // phi(T) = sum 0.9^(2t) -> 1 / (1 - 0.81)
        let alphas: Vec<f64> = (0..400).map(|t| 0.9f64.powi(t)).collect();
        let mut prev = 0.0;
        for t in 1..=alphas.len() {
            let b = propagation_error_bound(&alphas[..t], 0.5, 1.0, 0.1).unwrap();
            assert!(b >= prev);
            prev = b;
        }
        let phi = 1.0 / (1.0 - 0.81);
        let limit = phi * (2.0 + 0.75f64).powf(phi) * 1.2;
        assert_abs_diff_eq!(prev, limit, epsilon = 1e-9 * limit);
    }

    #[test]
    fn shared_dataset_has_no_heterogeneity() {
        let model = crate::model::init_model(&[4, 3], 1).unwrap();
        let data = crate::data::gen_synthetic(3, 4, 12, 2).unwrap();
        let est = estimate_nu_zeta(&[&data, &data, &data], &model, 3, 4, 5).unwrap();
        assert!(est.zeta_bar <= 1e-12);
        assert!(est.nu_bar > 0.0);
        let full = estimate_nu_zeta(&[&data, &data], &model, 2, 12, 5).unwrap();
        assert_eq!(full.nu_bar, 0.0);
        assert!(estimate_nu_zeta(&[&data, &data], &model, 1, 4, 5).is_err());
        assert!(estimate_nu_zeta(&[&data], &model, 2, 4, 5).is_err());
    }

    #[test]
    fn heterogeneity_matches_hand_gradients() {
        // Softmax regression with zero weights on one feature and two classes.
        // At zero parameters p = (1/2, 1/2). Per sample gradient:
        //   dL/dw_c = x (p_c - y_c), dL/db_c = p_c - y_c.
        // Client A: (x=1, y=0), (x=1, y=1) -> mean grad 0.
        // Client B: (x=1, y=0), (x=0, y=0) -> w: [(-1/2 + 0)/2, (1/2 + 0)/2] = [-1/4, 1/4],
        //                                     b: [-1/2, 1/2].
        // Average of A and B: w [-1/8, 1/8], b [-1/4, 1/4].
        // zeta = mean over clients of squared distance to the average:
        //   each client is (1/8)^2 * 2 + (1/4)^2 * 2 = 1/32 + 1/8 = 5/32 away.
        let model = MlpModel::new(vec![1, 2], ParamVector::zeros(4)).unwrap();
        let a = LabeledDataset::new(vec![1.0, 1.0], vec![0, 1], 1, 2).unwrap();
        let b = LabeledDataset::new(vec![1.0, 0.0], vec![0, 0], 1, 2).unwrap();
        let est = estimate_nu_zeta(&[&a, &b], &model, 2, 2, 0).unwrap();
        assert_abs_diff_eq!(est.zeta_bar, 5.0 / 32.0, epsilon = 1e-15);
        assert_eq!(est.nu_bar, 0.0);
    }
}
