//! Aggregation rules mapping a round's client updates to one global update.

mod alignins;
mod baselines;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use alignins::{
    alignins, masking_count, mpsa_scores, principal_sign, tda_scores, AlignInsConfig,
};
pub use baselines::{
    fedavg, fedavg_oracle, foolsgold, foolsgold_weights, multi_krum, multi_krum_scores,
    rfa_geometric_median, rlr, RfaParams,
};

use crate::error::{invalid, Result};
use crate::vecops::{check_len, ParamVector};

/// One client's contribution to a round, as seen by a defense.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: ParamVector,
}

impl ClientUpdate {
    pub fn new(client_id: usize, delta: ParamVector) -> Self {
        ClientUpdate { client_id, delta }
    }
}

/// A client update paired with its ground-truth role.
///
/// Defenses only ever receive the inner [`ClientUpdate`]; the flag is reserved
/// for the oracle aggregator and for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUpdate {
    pub update: ClientUpdate,
    pub is_malicious: bool,
}

impl LabeledUpdate {
    pub fn benign(client_id: usize, delta: ParamVector) -> Self {
        LabeledUpdate {
            update: ClientUpdate::new(client_id, delta),
            is_malicious: false,
        }
    }

    pub fn malicious(client_id: usize, delta: ParamVector) -> Self {
        LabeledUpdate {
            update: ClientUpdate::new(client_id, delta),
            is_malicious: true,
        }
    }
}

/// Per-client alignment statistics computed by AlignIns, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub tda: Vec<f64>,
    pub mpsa: Vec<f64>,
    pub mz_tda: Vec<f64>,
    pub mz_mpsa: Vec<f64>,
}

/// Result of one aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub aggregated: ParamVector,
    /// Client ids that contributed, ascending.
    pub selected: Vec<usize>,
    pub scores: Option<AlignmentScores>,
    pub clip_threshold: Option<f64>,
    /// Set when the rule fell back to a degenerate answer (empty selection,
    /// all-zero weights).
    pub flagged: bool,
}

impl AggregationOutcome {
    pub(crate) fn plain(aggregated: ParamVector, mut selected: Vec<usize>) -> Self {
        selected.sort_unstable();
        AggregationOutcome {
            aggregated,
            selected,
            scores: None,
            clip_threshold: None,
            flagged: false,
        }
    }
}

/// Extra round information some rules need.
#[derive(Debug, Clone)]
pub struct RoundContext<'a> {
    /// Current global model parameters.
    pub global_model: &'a [f64],
    /// Coordinate range of the model's output layer.
    pub last_layer: Option<Range<usize>>,
}

/// A configured aggregation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields, from = "DefenseRepr")]
pub enum Defense {
    Alignins(AlignInsConfig),
    Fedavg,
    FedavgStar,
    Multikrum {
        /// Defaults to the configured malicious count.
        #[serde(default)]
        assumed_m: Option<usize>,
        /// Defaults to `n - assumed_m`.
        #[serde(default)]
        select_count: Option<usize>,
    },
    Rfa(RfaParams),
    Rlr {
        /// Defaults to `ceil(n/2) + 1`.
        #[serde(default)]
        vote_threshold: Option<usize>,
        #[serde(default = "one")]
        server_lr: f64,
    },
    Foolsgold,
}

fn one() -> f64 {
    1.0
}

// Unit variants of an internally tagged enum silently accept extra keys;
// empty struct variants reject them.
#[derive(Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
enum DefenseRepr {
    Alignins(AlignInsConfig),
    Fedavg {},
    FedavgStar {},
    Multikrum {
        #[serde(default)]
        assumed_m: Option<usize>,
        #[serde(default)]
        select_count: Option<usize>,
    },
    Rfa(RfaParams),
    Rlr {
        #[serde(default)]
        vote_threshold: Option<usize>,
        #[serde(default = "one")]
        server_lr: f64,
    },
    Foolsgold {},
}

impl From<DefenseRepr> for Defense {
    fn from(r: DefenseRepr) -> Self {
        match r {
            DefenseRepr::Alignins(c) => Defense::Alignins(c),
            DefenseRepr::Fedavg {} => Defense::Fedavg,
            DefenseRepr::FedavgStar {} => Defense::FedavgStar,
            DefenseRepr::Multikrum {
                assumed_m,
                select_count,
            } => Defense::Multikrum {
                assumed_m,
                select_count,
            },
            DefenseRepr::Rfa(p) => Defense::Rfa(p),
            DefenseRepr::Rlr {
                vote_threshold,
                server_lr,
            } => Defense::Rlr {
                vote_threshold,
                server_lr,
            },
            DefenseRepr::Foolsgold {} => Defense::Foolsgold,
        }
    }
}

impl Defense {
    /// Builds a defense with default parameters from its short name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "alignins" => Defense::Alignins(AlignInsConfig::default()),
            "fedavg" => Defense::Fedavg,
            "fedavg_star" => Defense::FedavgStar,
            "multikrum" => Defense::Multikrum {
                assumed_m: None,
                select_count: None,
            },
            "rfa" => Defense::Rfa(RfaParams::default()),
            "rlr" => Defense::Rlr {
                vote_threshold: None,
                server_lr: 1.0,
            },
            "foolsgold" => Defense::Foolsgold,
            other => return invalid(format!("unknown defense '{other}'")),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Defense::Alignins(_) => "alignins",
            Defense::Fedavg => "fedavg",
            Defense::FedavgStar => "fedavg_star",
            Defense::Multikrum { .. } => "multikrum",
            Defense::Rfa(_) => "rfa",
            Defense::Rlr { .. } => "rlr",
            Defense::Foolsgold => "foolsgold",
        }
    }

    /// Aggregates one round. Only [`Defense::FedavgStar`] reads the truth flags.
    ///
    /// `expected_malicious` feeds defaults that depend on the attacker count
    /// (Multi-Krum's `assumed_m`).
    pub fn aggregate(
        &self,
        updates: &[LabeledUpdate],
        ctx: &RoundContext<'_>,
        expected_malicious: usize,
    ) -> Result<AggregationOutcome> {
        if let Defense::FedavgStar = self {
            let aggregated = fedavg_oracle(updates)?;
            let selected = updates
                .iter()
                .filter(|u| !u.is_malicious)
                .map(|u| u.update.client_id)
                .collect();
            return Ok(AggregationOutcome::plain(aggregated, selected));
        }
        let blind: Vec<ClientUpdate> = updates.iter().map(|u| u.update.clone()).collect();
        self.aggregate_blind(&blind, ctx, expected_malicious)
    }

    /// Aggregates without any access to ground truth.
    pub fn aggregate_blind(
        &self,
        updates: &[ClientUpdate],
        ctx: &RoundContext<'_>,
        expected_malicious: usize,
    ) -> Result<AggregationOutcome> {
        let all_ids = || updates.iter().map(|u| u.client_id).collect::<Vec<_>>();
        let n = updates.len();
        match self {
            Defense::Alignins(cfg) => alignins(updates, ctx.global_model, cfg),
            Defense::Fedavg => Ok(AggregationOutcome::plain(fedavg(updates)?, all_ids())),
            Defense::FedavgStar => {
                invalid("fedavg_star needs ground truth; call Defense::aggregate")
            }
            Defense::Multikrum {
                assumed_m,
                select_count,
            } => {
                let m = assumed_m.unwrap_or(expected_malicious);
                let select = select_count.unwrap_or(n.saturating_sub(m));
                let (aggregated, chosen) = multi_krum(updates, m, select)?;
                Ok(AggregationOutcome::plain(aggregated, chosen))
            }
            Defense::Rfa(params) => Ok(AggregationOutcome::plain(
                rfa_geometric_median(updates, params)?,
                all_ids(),
            )),
            Defense::Rlr {
                vote_threshold,
                server_lr,
            } => {
                let threshold = vote_threshold.unwrap_or(n.div_ceil(2) + 1);
                Ok(AggregationOutcome::plain(
                    rlr(updates, threshold, *server_lr)?,
                    all_ids(),
                ))
            }
            Defense::Foolsgold => foolsgold(updates, ctx.last_layer.clone()),
        }
    }
}

/// Iterates updates in ascending client-id order, so sums do not depend on arrival order.
pub(crate) fn by_client_id(updates: &[ClientUpdate]) -> impl Iterator<Item = &ClientUpdate> {
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    order.into_iter()
}

/// Checks that `updates` is non-empty and uniformly sized; returns the dimension.
pub(crate) fn common_dim(updates: &[ClientUpdate]) -> Result<usize> {
    let first = match updates.first() {
        Some(u) => u.delta.dim(),
        None => return invalid("no client updates"),
    };
    for u in &updates[1..] {
        check_len(first, u.delta.dim())?;
    }
    Ok(first)
}
