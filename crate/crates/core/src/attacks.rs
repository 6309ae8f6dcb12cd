//! Malicious-client behaviors.
//!
//! Data attacks (Badnet, DBA) only change the client's dataset. Scaling, PGD and
//! Neurotoxin post-process the trained update. The adaptive ADA_A/ADA_B
//! attacks replace the update outright with a vector built from sign patterns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::vecops::{self, l2_norm, top_k_mask, ParamVector, SignVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Badnet,
    Dba,
    Scaling,
    Pgd,
    Neurotoxin,
    AdaA,
    AdaB,
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        AttackKind::None,
        AttackKind::Badnet,
        AttackKind::Dba,
        AttackKind::Scaling,
        AttackKind::Pgd,
        AttackKind::Neurotoxin,
        AttackKind::AdaA,
        AttackKind::AdaB,
    ];

    pub fn from_name(name: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .map_or_else(|| invalid(format!("unknown attack '{name}'")), Ok)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Badnet => "badnet",
            AttackKind::Dba => "dba",
            AttackKind::Scaling => "scaling",
            AttackKind::Pgd => "pgd",
            AttackKind::Neurotoxin => "neurotoxin",
            AttackKind::AdaA => "ada_a",
            AttackKind::AdaB => "ada_b",
        }
    }

    /// Whether malicious clients train on trigger-poisoned data.
    pub fn poisons_data(self) -> bool {
        matches!(
            self,
            AttackKind::Badnet | AttackKind::Dba | AttackKind::Scaling | AttackKind::Pgd | AttackKind::Neurotoxin
        )
    }

    /// Whether the submitted update replaces local training entirely.
    pub fn replaces_update(self) -> bool {
        matches!(self, AttackKind::AdaA | AttackKind::AdaB)
    }
}

/// How an ADA_B attacker estimates the principal sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignEstimate {
    /// Majority over the colluders' own honest updates plus the sign of the
    /// last observed global-model change.
    #[default]
    ColludersPlusGlobal,
    /// Majority over every update submitted this round (omniscient).
    AllUpdates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub scale_factor: f64,
    /// PGD radius as a multiple of the global model's norm.
    pub pgd_radius_ratio: f64,
    pub neurotoxin_bottom_frac: f64,
    pub poison_ratio: f64,
    /// Fraction of clients that are malicious.
    pub attack_ratio: f64,
    pub ada_sign_estimate: SignEstimate,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            scale_factor: 2.0,
            pgd_radius_ratio: 1.0,
            neurotoxin_bottom_frac: 0.75,
            poison_ratio: 0.5,
            attack_ratio: 0.2,
            ada_sign_estimate: SignEstimate::default(),
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("poison_ratio", self.poison_ratio),
            ("attack_ratio", self.attack_ratio),
            ("neurotoxin_bottom_frac", self.neurotoxin_bottom_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.neurotoxin_bottom_frac == 0.0 {
            return invalid("neurotoxin_bottom_frac must be positive");
        }
        if !(self.scale_factor > 0.0) {
            return invalid("scale_factor must be positive");
        }
        if !(self.pgd_radius_ratio > 0.0) {
            return invalid("pgd_radius_ratio must be positive");
        }
        Ok(())
    }

    /// `floor(attack_ratio * n_clients)`, or zero when there is no attack.
    pub fn malicious_count(&self, n_clients: usize) -> usize {
        if self.kind == AttackKind::None {
            0
        } else {
            (self.attack_ratio * n_clients as f64 + 1e-9).floor() as usize
        }
    }
}

pub fn scaling_attack(update: &[f64], factor: f64) -> Result<ParamVector> {
    if !(factor > 0.0) {
        return invalid("scale factor must be positive");
    }
    ParamVector::new(update.iter().map(|x| x * factor).collect())
}

/// Projects `local_model` onto the ball of `radius` around `global_model`.
pub fn pgd_project(local_model: &[f64], global_model: &[f64], radius: f64) -> Result<ParamVector> {
    vecops::check_len(global_model.len(), local_model.len())?;
    if !(radius > 0.0) {
        return invalid("projection radius must be positive");
    }
    let diff: Vec<f64> = local_model.iter().zip(global_model).map(|(l, g)| l - g).collect();
    let dist = l2_norm(&diff);
    if dist <= radius {
        return ParamVector::new(local_model.to_vec());
    }
    let s = radius / dist;
    ParamVector::new(global_model.iter().zip(&diff).map(|(g, d)| g + s * d).collect())
}

/// Zeroes the update on the `ceil((1 - bottom_frac) d)` coordinates where the
/// previous aggregate is largest. With no previous aggregate the update is
/// returned unchanged.
pub fn neurotoxin_mask(update: &[f64], prev_aggregate: Option<&[f64]>, bottom_frac: f64) -> Result<ParamVector> {
    if !(bottom_frac > 0.0 && bottom_frac <= 1.0) {
        return invalid("bottom fraction must lie in (0, 1]");
    }
    let Some(prev) = prev_aggregate else {
        return ParamVector::new(update.to_vec());
    };
    vecops::check_len(update.len(), prev.len())?;
    let d = update.len();
    let top = ((1.0 - bottom_frac) * d as f64 - 1e-9).ceil().max(0.0) as usize;
    if top == 0 {
        return ParamVector::new(update.to_vec());
    }
    let mask = top_k_mask(prev, top.min(d))?;
    ParamVector::new(
        update
            .iter()
            .zip(mask.bits())
            .map(|(&x, &hit)| if hit { 0.0 } else { x })
            .collect(),
    )
}

/// Spreads `magnitude` evenly over the nonzero coordinates of a sign pattern,
/// so the resulting vector has L2 norm exactly `magnitude`.
fn per_coordinate(signs: &[i8], magnitude: f64) -> f64 {
    let support = signs.iter().filter(|&&s| s != 0).count();
    if support == 0 {
        0.0
    } else {
        magnitude / (support as f64).sqrt()
    }
}

/// ADA_A: mirrors the signs of one randomly chosen visible benign update.
///
/// The output is `-sgn(chosen) * magnitude / sqrt(nnz)`.
pub fn ada_a<R: Rng>(benign_visible: &[&[f64]], magnitude: f64, rng: &mut R) -> Result<ParamVector> {
    if benign_visible.is_empty() {
        return invalid("ADA_A needs at least one visible benign update");
    }
    if !(magnitude >= 0.0) {
        return invalid("magnitude must be nonnegative");
    }
    let chosen = benign_visible[rng.random_range(0..benign_visible.len())];
    let signs = vecops::sign(chosen);
    let per_coord = per_coordinate(&signs, magnitude);
    ParamVector::new(signs.iter().map(|&s| -f64::from(s) * per_coord).collect())
}

/// ADA_B: an update pointing exactly along the estimated principal sign,
/// `p * magnitude / sqrt(nnz(p))`.
pub fn ada_b(principal: &SignVector, magnitude: f64) -> Result<ParamVector> {
    if !(magnitude >= 0.0) {
        return invalid("magnitude must be nonnegative");
    }
    let per_coord = per_coordinate(principal, magnitude);
    ParamVector::new(principal.iter().map(|&s| f64::from(s) * per_coord).collect())
}

/// Coordinate-wise majority sign of `votes` plus one extra vote per coordinate
/// from `tiebreak` (the last global-model change), used by ADA_B colluders.
pub fn estimate_principal_sign(votes: &[&[f64]], tiebreak: Option<&[f64]>) -> Result<SignVector> {
    let Some(first) = votes.first() else {
        return invalid("no updates to estimate a principal sign from");
    };
    let d = first.len();
    let mut tally = vec![0i64; d];
    for v in votes.iter().copied().chain(tiebreak) {
        vecops::check_len(d, v.len())?;
        for (t, &x) in tally.iter_mut().zip(v) {
            *t += i64::from(x > 0.0) - i64::from(x < 0.0);
        }
    }
    SignVector::new(tally.into_iter().map(|t| t.signum() as i8).collect())
}
