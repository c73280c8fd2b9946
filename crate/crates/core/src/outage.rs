//! Discrete-time Markov model of VNF reliability.
//!
//! Reliability is represented only through a partition of the chain's states
//! into outage and non-outage states. The outage probability `k` steps ahead
//! is the outage mass of the `k`-step forward distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Serializable chain definition, as found in the experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSpec {
    pub states: Vec<String>,
    /// Row-stochastic transition matrix, one row per state.
    pub transitions: Vec<Vec<f64>>,
    /// Names of the states in which the VNF counts as failed.
    pub outage_states: Vec<String>,
    pub initial_state: String,
}

impl Default for ChainSpec {
    /// Four-state chain covering status fluctuation (normal/degraded), rare
    /// disasters (direct normal -> outage) and repair.
    fn default() -> Self {
        ChainSpec {
            states: ["normal", "degraded", "outage", "repairing"].map(String::from).to_vec(),
            transitions: vec![
                vec![0.948, 0.05, 0.002, 0.0],
                vec![0.6, 0.2, 0.2, 0.0],
                vec![0.0, 0.0, 0.5, 0.5],
                vec![0.7, 0.0, 0.0, 0.3],
            ],
            outage_states: vec!["outage".into()],
            initial_state: "normal".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityChain {
    states: Vec<String>,
    /// Row-major `n x n`.
    matrix: Vec<f64>,
    outage: Vec<bool>,
    current: usize,
}

impl ReliabilityChain {
    pub fn new(states: Vec<String>, transitions: Vec<Vec<f64>>, outage_states: &[usize], initial: usize) -> Result<Self> {
        let n = states.len();
        if n < 2 {
            return Err(Error::invalid("a reliability chain needs at least two states"));
        }
        if transitions.len() != n {
            return Err(Error::invalid(format!("{} transition rows for {n} states", transitions.len())));
        }
        let mut matrix = Vec::with_capacity(n * n);
        for (i, row) in transitions.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::invalid(format!("row {i} sums to {sum}")));
            }
            matrix.extend_from_slice(row);
        }
        let mut outage = vec![false; n];
        for &s in outage_states {
            if s >= n {
                return Err(Error::invalid(format!("outage state {s} out of range")));
            }
            outage[s] = true;
        }
        let n_out = outage.iter().filter(|o| **o).count();
        if n_out == 0 || n_out == n {
            return Err(Error::invalid("outage states must be a nonempty strict subset"));
        }
        if initial >= n {
            return Err(Error::invalid(format!("initial state {initial} out of range")));
        }
        Ok(ReliabilityChain {
            states,
            matrix,
            outage,
            current: initial,
        })
    }

    pub fn from_spec(spec: &ChainSpec) -> Result<Self> {
        let index_of = |name: &str| {
            spec.states
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| Error::invalid(format!("unknown state name {name:?}")))
        };
        let outage = spec
            .outage_states
            .iter()
            .map(|s| index_of(s))
            .collect::<Result<Vec<_>>>()?;
        let initial = index_of(&spec.initial_state)?;
        ReliabilityChain::new(spec.states.clone(), spec.transitions.clone(), &outage, initial)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_names(&self) -> &[String] {
        &self.states
    }

    pub fn current_state(&self) -> usize {
        self.current
    }

    pub fn set_current_state(&mut self, state: usize) -> Result<()> {
        if state >= self.len() {
            return Err(Error::invalid(format!("state {state} out of range")));
        }
        self.current = state;
        Ok(())
    }

    pub fn is_outage(&self, state: usize) -> bool {
        self.outage[state]
    }

    pub fn in_outage(&self) -> bool {
        self.outage[self.current]
    }

    pub fn transition_row(&self, state: usize) -> &[f64] {
        let n = self.len();
        &self.matrix[state * n..(state + 1) * n]
    }

    /// Samples and moves to the next state.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let row = self.transition_row(self.current);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = None;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = Some(j);
                break;
            }
        }
        // Rounding can leave `acc` a hair below 1; fall back to the last reachable state.
        let next = next.unwrap_or_else(|| row.iter().rposition(|&p| p > 0.0).unwrap_or(self.current));
        self.current = next;
        next
    }

    fn propagate(&self, dist: &[f64], out: &mut [f64]) {
        let n = self.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(&self.matrix[i * n..(i + 1) * n]) {
                *o += mass * p;
            }
        }
    }

    fn outage_mass(&self, dist: &[f64]) -> f64 {
        dist.iter().zip(&self.outage).filter(|(_, o)| **o).map(|(m, _)| m).sum()
    }

    /// Probability of being in an outage state `k >= 1` steps after `from_state`.
    pub fn outage_probability(&self, from_state: usize, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::invalid("steps ahead must be >= 1"));
        }
        Ok(*self.outage_curve(from_state, k)?.last().expect("k >= 1"))
    }

    /// Outage probabilities for steps `1..=horizon` after the current state.
    pub fn outage_horizon(&self, horizon: usize) -> Result<Vec<f64>> {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        self.outage_curve(self.current, horizon)
    }

    fn outage_curve(&self, from_state: usize, steps: usize) -> Result<Vec<f64>> {
        if from_state >= self.len() {
            return Err(Error::invalid(format!("state {from_state} out of range")));
        }
        let mut dist = vec![0.0; self.len()];
        dist[from_state] = 1.0;
        let mut next = vec![0.0; self.len()];
        let mut curve = Vec::with_capacity(steps);
        for _ in 0..steps {
            self.propagate(&dist, &mut next);
            std::mem::swap(&mut dist, &mut next);
            curve.push(self.outage_mass(&dist).clamp(0.0, 1.0));
        }
        Ok(curve)
    }
}
