//! Cost and loss arithmetic for one synchronization interval.
//!
//! A user's *outage exposure* is the expected number of steps in the coming
//! interval during which the VNF is in outage while the user is inside the
//! edge coverage. Given exposures, the expected cost-loss sum of a decision
//! `(m, sync_set)` is
//!
//! ```text
//! S = c_nf * m + sum_u { l * T_u * (1 - m * s_u) + c_sp * s_u }
//! ```
//!
//! and the two achievable lower bounds are `c_nf + sum_u min(l T_u, c_sp)`
//! (migrate) and `sum_u l T_u` (stay).

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque user identifier.
pub type UserId = u64;

/// Monetary constants of the migration model plus the interval length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EconomicParams {
    /// Loss per subscriber per time step spent in an uncovered outage.
    pub loss_rate: f64,
    /// Cost of one VNF migration.
    pub cost_nf: f64,
    /// Cost of one subscriber-profile synchronization.
    pub cost_sp: f64,
    /// Synchronization interval in time steps.
    pub interval: usize,
}

impl Default for EconomicParams {
    fn default() -> Self {
        EconomicParams {
            loss_rate: 1.0,
            cost_nf: 8.0,
            cost_sp: 0.25,
            interval: 30,
        }
    }
}

impl EconomicParams {
    pub fn new(loss_rate: f64, cost_nf: f64, cost_sp: f64, interval: usize) -> Result<Self> {
        let params = EconomicParams {
            loss_rate,
            cost_nf,
            cost_sp,
            interval,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss_rate", self.loss_rate),
            ("cost_nf", self.cost_nf),
            ("cost_sp", self.cost_sp),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.interval == 0 {
            return Err(Error::invalid("interval must be >= 1"));
        }
        Ok(())
    }

    /// Multiplies every monetary field by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        EconomicParams {
            loss_rate: self.loss_rate * factor,
            cost_nf: self.cost_nf * factor,
            cost_sp: self.cost_sp * factor,
            interval: self.interval,
        }
    }
}

/// Expected outage-exposed time steps of one user over the coming interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutageExposure {
    pub user: UserId,
    pub exposure: f64,
}

impl OutageExposure {
    pub fn new(user: UserId, exposure: f64) -> Self {
        OutageExposure { user, exposure }
    }
}

/// Migration label plus the set of users whose profiles get synchronized.
///
/// A decision that does not migrate never carries a sync set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MigrationDecision {
    migrate: bool,
    sync_set: BTreeSet<UserId>,
}

impl MigrationDecision {
    pub fn stay() -> Self {
        MigrationDecision::default()
    }

    pub fn migrate<I: IntoIterator<Item = UserId>>(sync: I) -> Self {
        MigrationDecision {
            migrate: true,
            sync_set: sync.into_iter().collect(),
        }
    }

    pub fn new(migrate: bool, sync_set: BTreeSet<UserId>) -> Result<Self> {
        if !migrate && !sync_set.is_empty() {
            return Err(Error::invalid("a non-migrating decision cannot synchronize profiles"));
        }
        Ok(MigrationDecision { migrate, sync_set })
    }

    pub fn migrates(&self) -> bool {
        self.migrate
    }

    pub fn sync_set(&self) -> &BTreeSet<UserId> {
        &self.sync_set
    }

    pub fn is_synced(&self, user: UserId) -> bool {
        self.sync_set.contains(&user)
    }

    /// Whether `user` is protected against an outage: VNF migrated and profile synced.
    pub fn covers(&self, user: UserId) -> bool {
        self.migrate && self.sync_set.contains(&user)
    }
}

fn check_probabilities(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|p| !(0.0..=1.0).contains(p)) {
        Some(i) => Err(Error::invalid(format!("{name}[{i}] = {} is not a probability", v[i]))),
        None => Ok(()),
    }
}

/// `T_u = sum_tau p_o(tau) * p_v(tau)` over one horizon.
pub fn expected_outage_exposure(p_outage: &[f64], p_visit: &[f64]) -> Result<f64> {
    if p_outage.len() != p_visit.len() {
        return Err(Error::invalid(format!(
            "horizon length mismatch: {} outage vs {} visit probabilities",
            p_outage.len(),
            p_visit.len()
        )));
    }
    if p_outage.is_empty() {
        return Err(Error::invalid("horizon must contain at least one step"));
    }
    check_probabilities("p_outage", p_outage)?;
    check_probabilities("p_visit", p_visit)?;
    Ok(p_outage.iter().zip(p_visit).map(|(o, v)| o * v).sum())
}

pub(crate) fn validate_exposures(exposures: &[OutageExposure], params: &EconomicParams) -> Result<()> {
    params.validate()?;
    let horizon = params.interval as f64;
    let mut seen = HashSet::with_capacity(exposures.len());
    for e in exposures {
        if !e.exposure.is_finite() || e.exposure < 0.0 || e.exposure > horizon * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "exposure of user {} is {}, outside [0, {}]",
                e.user, e.exposure, params.interval
            )));
        }
        if !seen.insert(e.user) {
            return Err(Error::invalid(format!("user {} appears twice", e.user)));
        }
    }
    Ok(())
}

/// Expected sum of migration cost and outage loss for a concrete decision.
pub fn cost_loss_sum(
    decision: &MigrationDecision,
    exposures: &[OutageExposure],
    params: &EconomicParams,
) -> Result<f64> {
    validate_exposures(exposures, params)?;
    if let Some(unknown) = decision
        .sync_set
        .iter()
        .find(|u| !exposures.iter().any(|e| e.user == **u))
    {
        return Err(Error::invalid(format!("sync set references unknown user {unknown}")));
    }
    let m = if decision.migrate { 1.0 } else { 0.0 };
    let mut total = params.cost_nf * m;
    for e in exposures {
        let s = if decision.sync_set.contains(&e.user) { 1.0 } else { 0.0 };
        total += params.loss_rate * e.exposure * (1.0 - m * s) + params.cost_sp * s;
    }
    Ok(total)
}

/// Lower bound of the cost-loss sum under migration, with the sync set achieving it.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationBound {
    pub bound: f64,
    pub sync_set: BTreeSet<UserId>,
}

/// `c_nf + sum_u min(l T_u, c_sp)`; users with `l T_u >= c_sp` are synced (ties sync).
pub fn migration_bound(exposures: &[OutageExposure], params: &EconomicParams) -> Result<MigrationBound> {
    validate_exposures(exposures, params)?;
    let mut bound = params.cost_nf;
    let mut sync_set = BTreeSet::new();
    for e in exposures {
        let loss = params.loss_rate * e.exposure;
        if loss >= params.cost_sp {
            sync_set.insert(e.user);
            bound += params.cost_sp;
        } else {
            bound += loss;
        }
    }
    Ok(MigrationBound { bound, sync_set })
}

/// `sum_u l T_u`, achieved by neither migrating nor synchronizing.
pub fn no_migration_bound(exposures: &[OutageExposure], params: &EconomicParams) -> Result<f64> {
    validate_exposures(exposures, params)?;
    let mut bound = 0.0;
    for e in exposures {
        bound += params.loss_rate * e.exposure;
    }
    Ok(bound)
}
