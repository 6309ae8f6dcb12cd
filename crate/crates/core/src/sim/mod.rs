//! Round orchestration: local training, attacks, aggregation, the global
//! update and per-round metrics, plus the benign-only twin used to measure
//! propagation error.

mod config;
mod output;

use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DatasetConfig, ExperimentConfig, IdxPaths, ProbeConfig, SyntheticConfig};
pub use output::{run_to_dir, sweep, write_metrics_csv, SweepCell, SweepConfig, CSV_HEADER};

use crate::attacks::{self, AttackKind, SignEstimate};
use crate::data::{self, LabeledDataset};
use crate::defenses::{fedavg, AggregationOutcome, ClientUpdate, LabeledUpdate, RoundContext};
use crate::error::{Error, Result};
use crate::eval::{self, Accuracy, HeterogeneityEstimate, RoundMetrics};
use crate::model::{init_model, local_train, MlpModel, TrainConfig};
use crate::seed::{self, Stream};
use crate::vecops::{self, median, ParamVector};

/// Everything a finished run reports. Wall time is kept out of the
/// serialized form so that records from equal seeds compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub malicious_ids: Vec<usize>,
    pub initial: Accuracy,
    pub rounds: Vec<RoundMetrics>,
    /// Mean MA/BA/RA over the last ten evaluated rounds.
    pub summary: Option<Accuracy>,
    pub kappa_max: Option<f64>,
    pub heterogeneity: Option<HeterogeneityEstimate>,
    /// Whether the local rate satisfies `lr <= 1/(2 * local_steps)` on every shard.
    pub local_lr_condition: bool,
    /// ADA_A attackers read one benign update per round.
    pub attacker_sees_benign_updates: bool,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// The full result of one round, including the raw updates.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    pub updates: Vec<LabeledUpdate>,
    pub outcome: AggregationOutcome,
}

/// Loads train and test splits as described by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &cfg.dataset {
        DatasetConfig::Mnist(p) | DatasetConfig::Fmnist(p) => {
            let mut train = data::load_idx(&p.train_images, &p.train_labels)?;
            let mut test = data::load_idx(&p.test_images, &p.test_labels)?;
            if let Some(n) = p.train_limit {
                train = train.head(n);
            }
            if let Some(n) = p.test_limit {
                test = test.head(n);
            }
            let k = train.num_classes().max(test.num_classes());
            Ok((train.with_num_classes(k)?, test.with_num_classes(k)?))
        }
        DatasetConfig::Synthetic(s) => {
            // one draw so both splits share the class centroids
            let all = data::gen_synthetic(s.num_classes, s.feat_dim, s.train_size + s.test_size, cfg.seed)?;
            let train: Vec<usize> = (0..s.train_size).collect();
            let test: Vec<usize> = (s.train_size..all.len()).collect();
            Ok((all.subset(&train), all.subset(&test)))
        }
    }
}

/// A running federated system.
pub struct Simulation {
    config: ExperimentConfig,
    shards: Vec<LabeledDataset>,
    poisoned: Vec<Option<LabeledDataset>>,
    malicious: Vec<bool>,
    test: LabeledDataset,
    backdoor: Option<LabeledDataset>,
    model: MlpModel,
    twin: Option<MlpModel>,
    prev_aggregate: Option<ParamVector>,
    round: usize,
    alphas: Vec<f64>,
    kappa_max: Option<f64>,
    heterogeneity: Option<HeterogeneityEstimate>,
    probe: Option<ProbeConfig>,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_datasets(&config)?;
        Self::with_data(config, train, test)
    }

    /// Builds a simulation over already loaded splits.
    pub fn with_data(config: ExperimentConfig, train: LabeledDataset, test: LabeledDataset) -> Result<Self> {
        config.validate()?;
        if train.feat_dim() != test.feat_dim() {
            return Err(Error::Config("train and test feature dimensions differ".into()));
        }
        let n = config.n_clients;
        let mut sizes = vec![train.feat_dim()];
        sizes.extend(&config.hidden);
        sizes.push(train.num_classes().max(test.num_classes()));
        let model = init_model(&sizes, config.seed)?;

        let plan = data::dirichlet_partition(train.labels(), n, config.beta, config.seed)?;
        let shards = plan.shards(&train);
        let m = config.attack.malicious_count(n);
        let malicious: Vec<bool> = (0..n).map(|i| i < m).collect();

        let kind = config.attack.kind;
        let trigger_fits = config.trigger.validate().is_ok()
            && config.trigger.image_side * config.trigger.image_side == train.feat_dim()
            && config.trigger.target_label < sizes[sizes.len() - 1];
        if kind.poisons_data() && !trigger_fits {
            return Err(Error::Config("trigger does not fit the dataset".into()));
        }
        let mut poisoned = vec![None; n];
        if kind.poisons_data() {
            for i in 0..m {
                let part = (kind == AttackKind::Dba).then_some(i % 4);
                let seed = seed::derive(config.seed, Stream::Poison, &[i as u64]);
                poisoned[i] = Some(data::poison_dataset(
                    &shards[i],
                    &config.trigger,
                    config.attack.poison_ratio,
                    seed,
                    part,
                )?);
            }
        }
        let backdoor = if trigger_fits {
            Some(data::backdoor_test_set(&test, &config.trigger)?)
        } else {
            None
        };
        let twin = config.paired_run.then(|| model.clone());
        let probe = config
            .heterogeneity
            .clone()
            .or_else(|| config.paired_run.then(ProbeConfig::default));
        Ok(Simulation {
            config,
            shards,
            poisoned,
            malicious,
            test,
            backdoor,
            model,
            twin,
            prev_aggregate: None,
            round: 0,
            alphas: Vec::new(),
            kappa_max: None,
            heterogeneity: None,
            probe,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    /// The benign-only FedAvg model of a paired run.
    pub fn twin(&self) -> Option<&MlpModel> {
        self.twin.as_ref()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn malicious_ids(&self) -> Vec<usize> {
        (0..self.malicious.len()).filter(|&i| self.malicious[i]).collect()
    }

    pub fn shards(&self) -> &[LabeledDataset] {
        &self.shards
    }

    pub fn kappa_max(&self) -> Option<f64> {
        self.kappa_max
    }

    pub fn heterogeneity(&self) -> Option<HeterogeneityEstimate> {
        self.heterogeneity
    }

    pub fn evaluate(&self) -> Result<Accuracy> {
        match &self.backdoor {
            Some(bd) => eval::evaluate_prepared(&self.model, &self.test, bd, self.config.trigger.target_label),
            None => Ok(Accuracy {
                ma: eval::main_accuracy(&self.model, &self.test)?,
                ba: 0.0,
                ra: 0.0,
            }),
        }
    }

    /// Clients taking part in round `t`, ascending. Depends only on the seed and `t`.
    pub fn participants(&self, t: usize) -> Vec<usize> {
        let n = self.config.n_clients;
        match self.config.sample_count_per_round {
            Some(k) if k < n => {
                let mut rng = seed::stream_rng(self.config.seed, Stream::Sampling, &[t as u64]);
                let mut ids = index::sample(&mut rng, n, k).into_vec();
                ids.sort_unstable();
                ids
            }
            _ => (0..n).collect(),
        }
    }

    fn train_config(&self, client: usize, t: usize) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.config.seed, Stream::LocalTrain, &[client as u64, t as u64]),
            ..self.config.train.clone()
        }
    }

    /// Honest (or data-poisoned) local training for every participant.
    fn local_updates(&self, start: &MlpModel, clients: &[usize], t: usize) -> Result<Vec<ParamVector>> {
        clients
            .par_iter()
            .map(|&i| {
                let data = self.poisoned[i].as_ref().unwrap_or(&self.shards[i]);
                local_train(start, data, &self.train_config(i, t))
            })
            .collect()
    }

    /// Turns honest training results into what malicious clients submit.
    fn apply_attacks(&self, clients: &[usize], trained: Vec<ParamVector>, t: usize) -> Result<Vec<ParamVector>> {
        let spec = &self.config.attack;
        let theta = self.model.params().as_slice();
        let is_bad = |pos: usize| self.malicious[clients[pos]];
        let bad: Vec<usize> = (0..clients.len()).filter(|&p| is_bad(p)).collect();
        if bad.is_empty() {
            return Ok(trained);
        }
        let mut out = trained.clone();
        match spec.kind {
            AttackKind::None | AttackKind::Badnet | AttackKind::Dba => {}
            AttackKind::Scaling => {
                for &p in &bad {
                    out[p] = attacks::scaling_attack(&trained[p], spec.scale_factor)?;
                }
            }
            AttackKind::Pgd => {
                let radius = spec.pgd_radius_ratio * vecops::l2_norm(theta);
                for &p in &bad {
                    let local: Vec<f64> = theta.iter().zip(trained[p].iter()).map(|(a, b)| a + b).collect();
                    let projected = attacks::pgd_project(&local, theta, radius)?;
                    let delta: Vec<f64> = projected.iter().zip(theta).map(|(a, b)| a - b).collect();
                    out[p] = ParamVector::new(delta)?;
                }
            }
            AttackKind::Neurotoxin => {
                let prev = self.prev_aggregate.as_ref().map(|v| v.as_slice());
                for &p in &bad {
                    out[p] = attacks::neurotoxin_mask(&trained[p], prev, spec.neurotoxin_bottom_frac)?;
                }
            }
            AttackKind::AdaA | AttackKind::AdaB => {
                // magnitude: median norm of the colluders' honest dry runs
                let norms: Vec<f64> = bad.iter().map(|&p| trained[p].norm()).collect();
                let magnitude = median(&norms)?;
                let benign: Vec<&[f64]> = (0..clients.len())
                    .filter(|&p| !is_bad(p))
                    .map(|p| trained[p].as_slice())
                    .collect();
                if spec.kind == AttackKind::AdaA {
                    if benign.is_empty() {
                        return Ok(out);
                    }
                    for &p in &bad {
                        let mut rng =
                            seed::stream_rng(self.config.seed, Stream::Attack, &[clients[p] as u64, t as u64]);
                        out[p] = attacks::ada_a(&benign, magnitude, &mut rng)?;
                    }
                } else {
                    let p_est = match spec.ada_sign_estimate {
                        // colluders vote with the submitted sign, so the benign
                        // majority is the principal sign of the whole round
                        SignEstimate::AllUpdates if !benign.is_empty() => {
                            attacks::estimate_principal_sign(&benign, None)?
                        }
                        _ => {
                            let votes: Vec<&[f64]> = bad.iter().map(|&p| trained[p].as_slice()).collect();
                            let prev = self.prev_aggregate.as_ref().map(|v| v.as_slice());
                            attacks::estimate_principal_sign(&votes, prev)?
                        }
                    };
                    let forged = attacks::ada_b(&p_est, magnitude)?;
                    for &p in &bad {
                        out[p] = forged.clone();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Runs one round and advances the global model.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.round + 1;
        let cfg = &self.config;
        let clients = self.participants(t);
        let d = self.model.dim();

        // ADA clients train honestly on clean data to calibrate their magnitude
        let trained = if cfg.attack.kind.replaces_update() {
            clients
                .par_iter()
                .map(|&i| local_train(&self.model, &self.shards[i], &self.train_config(i, t)))
                .collect::<Result<Vec<_>>>()?
        } else {
            self.local_updates(&self.model, &clients, t)?
        };
        let submitted = self.apply_attacks(&clients, trained.clone(), t)?;
        let updates: Vec<LabeledUpdate> = clients
            .iter()
            .zip(submitted)
            .map(|(&i, delta)| LabeledUpdate {
                update: ClientUpdate::new(i, delta),
                is_malicious: self.malicious[i],
            })
            .collect();
        let n_bad = updates.iter().filter(|u| u.is_malicious).count();
        let n_good = updates.len() - n_bad;

        let ctx = RoundContext {
            global_model: self.model.params().as_slice(),
            last_layer: Some(self.model.last_layer_range()),
        };
        let outcome = cfg.defense.aggregate(&updates, &ctx, n_bad).unwrap_or_else(|_| AggregationOutcome {
            aggregated: ParamVector::zeros(d),
            selected: Vec::new(),
            scores: None,
            clip_threshold: None,
            flagged: true,
        });
        let kappa = if n_good > 0 {
            Some(eval::empirical_kappa(&outcome, &updates)?)
        } else {
            None
        };
        if let Some(k) = kappa {
            self.kappa_max = Some(self.kappa_max.map_or(k, |m| m.max(k)));
        }

        // gradient statistics at the round's starting point
        if let Some(probe) = &self.probe {
            if (t - 1).is_multiple_of(probe.every) {
                let benign: Vec<&LabeledDataset> = clients
                    .iter()
                    .filter(|&&i| !self.malicious[i])
                    .map(|&i| &self.shards[i])
                    .collect();
                if benign.len() >= 2 {
                    let batch = probe.batch_size.unwrap_or(cfg.train.batch_size);
                    let seed = seed::derive(cfg.seed, Stream::Probe, &[t as u64]);
                    let est = eval::estimate_nu_zeta(&benign, &self.model, probe.probes, batch, seed)?;
                    self.heterogeneity = Some(match self.heterogeneity {
                        Some(h) => HeterogeneityEstimate {
                            nu_bar: h.nu_bar.max(est.nu_bar),
                            zeta_bar: h.zeta_bar.max(est.zeta_bar),
                        },
                        None => est,
                    });
                }
            }
        }

        let alpha = cfg.alpha(t);
        let twin_update = match &self.twin {
            Some(twin) if n_good > 0 => {
                let benign_pos: Vec<usize> = (0..clients.len()).filter(|&p| !self.malicious[clients[p]]).collect();
                let benign_ids: Vec<usize> = benign_pos.iter().map(|&p| clients[p]).collect();
                // identical starting points give identical benign updates
                let deltas = if twin.params() == self.model.params() {
                    benign_pos.iter().map(|&p| trained[p].clone()).collect()
                } else {
                    self.local_updates(twin, &benign_ids, t)?
                };
                let ups: Vec<ClientUpdate> = benign_ids.into_iter().zip(deltas).map(|(i, d)| ClientUpdate::new(i, d)).collect();
                Some(fedavg(&ups)?)
            }
            _ => None,
        };

        self.model.apply_update(&outcome.aggregated, alpha)?;
        if let (Some(twin), Some(delta)) = (self.twin.as_mut(), twin_update) {
            twin.apply_update(&delta, alpha)?;
        }
        self.alphas.push(alpha);
        self.prev_aggregate = Some(outcome.aggregated.clone());
        self.round = t;

        let prop_error = self
            .twin
            .as_ref()
            .map(|tw| vecops::distance(self.model.params(), tw.params()));
        let prop_bound = match prop_error {
            Some(_) => Some(eval::propagation_error_bound(
                &self.alphas,
                cfg.mu,
                self.kappa_max.unwrap_or(0.0),
                self.heterogeneity.map_or(0.0, |h| h.nu_bar),
            )?),
            None => None,
        };
        let evaluated = t.is_multiple_of(cfg.eval_every) || t == cfg.rounds;
        let acc = if evaluated { Some(self.evaluate()?) } else { None };
        let sel_tp = outcome.selected.iter().filter(|&&i| !self.malicious[i]).count();
        let metrics = RoundMetrics {
            round: t,
            ma: acc.map(|a| a.ma),
            ba: acc.map(|a| a.ba),
            ra: acc.map(|a| a.ra),
            n_selected: outcome.selected.len(),
            selected_true_pos: sel_tp,
            selected_false_pos: outcome.selected.len() - sel_tp,
            clip_threshold: outcome.clip_threshold,
            empirical_kappa: kappa,
            prop_error,
            prop_bound,
            flagged: outcome.flagged,
        };
        Ok(RoundReport {
            metrics,
            updates,
            outcome,
        })
    }

    fn local_lr_condition(&self) -> bool {
        self.shards
            .iter()
            .all(|s| self.config.train.lr <= 1.0 / (2.0 * self.config.train.local_steps(s.len()) as f64))
    }
}

fn summarize(rounds: &[RoundMetrics]) -> Option<Accuracy> {
    let evaluated: Vec<&RoundMetrics> = rounds.iter().filter(|r| r.ma.is_some()).collect();
    let tail = &evaluated[evaluated.len().saturating_sub(10)..];
    if tail.is_empty() {
        return None;
    }
    let mean = |f: fn(&RoundMetrics) -> Option<f64>| tail.iter().filter_map(|r| f(r)).sum::<f64>() / tail.len() as f64;
    Some(Accuracy {
        ma: mean(|r| r.ma),
        ba: mean(|r| r.ba),
        ra: mean(|r| r.ra),
    })
}

/// Runs every configured round.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    let sim = Simulation::new(config.clone())?;
    run_simulation(sim)
}

/// Runs the remaining rounds of an already built simulation.
pub fn run_simulation(mut sim: Simulation) -> Result<RunRecord> {
    let started = Instant::now();
    let initial = sim.evaluate()?;
    let mut rounds = Vec::with_capacity(sim.config.rounds);
    while sim.round < sim.config.rounds {
        rounds.push(sim.run_round()?.metrics);
    }
    Ok(RunRecord {
        config: sim.config.clone(),
        malicious_ids: sim.malicious_ids(),
        initial,
        summary: summarize(&rounds),
        rounds,
        kappa_max: sim.kappa_max,
        heterogeneity: sim.heterogeneity,
        local_lr_condition: sim.local_lr_condition(),
        attacker_sees_benign_updates: sim.config.attack.kind == AttackKind::AdaA,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Runs the attacked system alongside benign-only FedAvg and returns the
/// per-round distance between the two global models.
pub fn paired_run(config: &ExperimentConfig) -> Result<Vec<f64>> {
    let cfg = ExperimentConfig {
        paired_run: true,
        ..config.clone()
    };
    let record = run_experiment(&cfg)?;
    Ok(record.rounds.iter().map(|r| r.prop_error.unwrap_or(0.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackSpec;
    use crate::defenses::Defense;

    fn small(rounds: usize) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic(SyntheticConfig {
                num_classes: 4,
                feat_dim: 784,
                train_size: 400,
                test_size: 100,
            }),
            n_clients: 5,
            rounds,
            hidden: vec![8],
            defense: Defense::Fedavg,
            train: TrainConfig {
                local_epochs: 1,
                batch_size: 20,
                ..Default::default()
            },
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn single_client_fedavg_is_local_sgd() {
        let cfg = ExperimentConfig {
            n_clients: 1,
            ..small(1)
        };
        let mut sim = Simulation::new(cfg).unwrap();
        let start = sim.model().clone();
        let shard = sim.shards()[0].clone();
        let expected = local_train(&start, &shard, &sim.train_config(0, 1)).unwrap();
        sim.run_round().unwrap();
        let moved: Vec<f64> = sim.model().params().iter().zip(start.params().iter()).map(|(a, b)| a - b).collect();
        for (a, b) in moved.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn records_every_round_and_repeats_exactly() {
        let cfg = ExperimentConfig {
            eval_every: 2,
            ..small(3)
        };
        let mut a = run_experiment(&cfg).unwrap();
        let mut b = run_experiment(&cfg).unwrap();
        a.wall_time_secs = 0.0;
        b.wall_time_secs = 0.0;
        assert_eq!(a.rounds.len(), 3);
        assert_eq!(a, b);
        let evaluated: Vec<usize> = a.rounds.iter().filter(|r| r.ma.is_some()).map(|r| r.round).collect();
        assert_eq!(evaluated, vec![2, 3]);
    }

    #[test]
    fn zero_rounds() {
        let rec = run_experiment(&small(0)).unwrap();
        assert!(rec.rounds.is_empty());
        assert!(rec.summary.is_none());
    }

    #[test]
    fn oracle_has_zero_kappa_and_zero_drift() {
        for kind in [AttackKind::Badnet, AttackKind::Scaling, AttackKind::AdaB] {
            let cfg = ExperimentConfig {
                attack: AttackSpec {
                    kind,
                    attack_ratio: 0.4,
                    ..Default::default()
                },
                defense: Defense::FedavgStar,
                paired_run: true,
                ..small(3)
            };
            let rec = run_experiment(&cfg).unwrap();
            assert_eq!(rec.malicious_ids, vec![0, 1]);
            for r in &rec.rounds {
                assert_eq!(r.empirical_kappa, Some(0.0), "{kind:?}");
                assert_eq!(r.prop_error, Some(0.0), "{kind:?}");
                assert_eq!((r.selected_true_pos, r.selected_false_pos), (3, 0));
            }
        }
    }

    #[test]
    fn unattacked_fedavg_pair_stays_together() {
        let cfg = ExperimentConfig {
            paired_run: true,
            ..small(3)
        };
        assert_eq!(paired_run(&cfg).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn sampling_depends_on_seed_and_round_only() {
        let cfg = ExperimentConfig {
            n_clients: 10,
            sample_count_per_round: Some(4),
            ..small(1)
        };
        let sim = Simulation::new(cfg.clone()).unwrap();
        let other = Simulation::new(ExperimentConfig {
            attack: AttackSpec {
                kind: AttackKind::Scaling,
                ..Default::default()
            },
            ..cfg
        })
        .unwrap();
        for t in 1..5 {
            let p = sim.participants(t);
            assert_eq!(p.len(), 4);
            assert!(p.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(p, other.participants(t));
        }
        assert_ne!(sim.participants(1), sim.participants(2));
    }

    #[test]
    fn failing_defense_flags_round_and_keeps_model() {
        // Multi-Krum needs n >= m + 3
        let cfg = ExperimentConfig {
            n_clients: 3,
            defense: Defense::Multikrum {
                assumed_m: Some(1),
                select_count: None,
            },
            ..small(1)
        };
        let mut sim = Simulation::new(cfg).unwrap();
        let before = sim.model().params().clone();
        let report = sim.run_round().unwrap();
        assert!(report.metrics.flagged);
        assert_eq!(sim.model().params(), &before);
    }

    #[test]
    fn ada_b_with_exact_sign_matches_principal_sign() {
        let cfg = ExperimentConfig {
            attack: AttackSpec {
                kind: AttackKind::AdaB,
                ada_sign_estimate: SignEstimate::AllUpdates,
                attack_ratio: 0.4,
                ..Default::default()
            },
            defense: Defense::from_name("alignins").unwrap(),
            ..small(2)
        };
        let mut sim = Simulation::new(cfg).unwrap();
        for _ in 0..2 {
            let rep = sim.run_round().unwrap();
            let scores = rep.outcome.scores.unwrap();
            for (pos, u) in rep.updates.iter().enumerate() {
                if u.is_malicious {
                    assert_eq!(scores.mpsa[pos], 1.0);
                }
            }
        }
    }
}
