//! Cost-loss-optimal migration decision for one synchronization interval.
//!
//! The controller accumulates each user's outage exposure over the horizon,
//! evaluates the migrate bound `S1` and the stay bound `S2`, and picks the
//! lower one. On an exact tie it stays (same expected sum, fewer operations).

use std::cmp::Ordering;

use crate::econ::{
    cost_loss_sum, expected_outage_exposure, migration_bound, no_migration_bound, validate_exposures,
    EconomicParams, MigrationDecision, OutageExposure, UserId,
};
use crate::error::{Error, Result};

/// Largest user universe [`brute_force_decide`] will enumerate.
pub const BRUTE_FORCE_MAX_USERS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionOutcome {
    pub decision: MigrationDecision,
    /// Lower bound of the cost-loss sum when migrating (`S1`).
    pub bound_migrate: f64,
    /// Lower bound of the cost-loss sum when staying (`S2`).
    pub bound_stay: f64,
    pub exposures: Vec<OutageExposure>,
}

impl DecisionOutcome {
    /// Expected cost-loss sum of the chosen decision.
    pub fn achieved(&self) -> f64 {
        if self.decision.migrates() {
            self.bound_migrate
        } else {
            self.bound_stay
        }
    }
}

/// Runs the decision from raw horizons: one outage-probability vector shared by
/// all users and one visit-probability vector per user.
pub fn decide(
    users: &[UserId],
    p_outage: &[f64],
    p_visit: &[Vec<f64>],
    params: &EconomicParams,
) -> Result<DecisionOutcome> {
    params.validate()?;
    if users.len() != p_visit.len() {
        return Err(Error::invalid(format!(
            "{} users but {} visit horizons",
            users.len(),
            p_visit.len()
        )));
    }
    if p_outage.len() != params.interval {
        return Err(Error::invalid(format!(
            "outage horizon has {} steps, interval is {}",
            p_outage.len(),
            params.interval
        )));
    }
    if let Some(p) = p_outage.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("outage probability {p} outside [0, 1]")));
    }
    let exposures = users
        .iter()
        .zip(p_visit)
        .map(|(&u, pv)| {
            if pv.len() != params.interval {
                return Err(Error::invalid(format!(
                    "visit horizon of user {u} has {} steps, interval is {}",
                    pv.len(),
                    params.interval
                )));
            }
            Ok(OutageExposure::new(u, expected_outage_exposure(p_outage, pv)?))
        })
        .collect::<Result<Vec<_>>>()?;
    decide_from_exposures(exposures, params)
}

/// Same decision as [`decide`] for precomputed exposures.
pub fn decide_from_exposures(exposures: Vec<OutageExposure>, params: &EconomicParams) -> Result<DecisionOutcome> {
    let migrate = migration_bound(&exposures, params)?;
    let stay = no_migration_bound(&exposures, params)?;
    let decision = if migrate.bound < stay {
        MigrationDecision::migrate(migrate.sync_set)
    } else {
        MigrationDecision::stay()
    };
    Ok(DecisionOutcome {
        decision,
        bound_migrate: migrate.bound,
        bound_stay: stay,
        exposures,
    })
}

/// Exhaustive search over every `(m, sync_set)` pair.
///
/// Ties prefer staying, then the smaller sync set, then the lexicographically
/// smaller list of user ids.
pub fn brute_force_decide(exposures: &[OutageExposure], params: &EconomicParams) -> Result<DecisionOutcome> {
    validate_exposures(exposures, params)?;
    let n = exposures.len();
    if n > BRUTE_FORCE_MAX_USERS {
        return Err(Error::Capacity(format!(
            "exhaustive search supports at most {BRUTE_FORCE_MAX_USERS} users, got {n}"
        )));
    }
    let stay = MigrationDecision::stay();
    let bound_stay = cost_loss_sum(&stay, exposures, params)?;

    let mut best_migrate: Option<(f64, Vec<UserId>)> = None;
    for mask in 0u32..(1u32 << n) {
        let mut set: Vec<UserId> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| exposures[i].user).collect();
        set.sort_unstable();
        let d = MigrationDecision::migrate(set.iter().copied());
        let sum = cost_loss_sum(&d, exposures, params)?;
        let better = match &best_migrate {
            None => true,
            Some((b, bset)) => match sum.partial_cmp(b).unwrap_or(Ordering::Equal) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => (set.len(), &set) < (bset.len(), bset),
            },
        };
        if better {
            best_migrate = Some((sum, set));
        }
    }
    let (bound_migrate, set) = best_migrate.expect("at least the empty sync set is enumerated");
    let decision = if bound_migrate < bound_stay {
        MigrationDecision::migrate(set)
    } else {
        stay
    };
    Ok(DecisionOutcome {
        decision,
        bound_migrate,
        bound_stay,
        exposures: exposures.to_vec(),
    })
}
