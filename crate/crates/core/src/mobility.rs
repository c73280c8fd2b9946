//! Edge-coverage visit probabilities from Monte-Carlo rollouts of the
//! single-step mobility model.

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::econ::UserId;
use crate::error::{Error, Result};
use crate::mdn::{MdnModel, Vec2, WINDOW_STEPS};
use crate::rng;

/// Positions needed to form one window plus the current position.
pub const MIN_HISTORY: usize = WINDOW_STEPS + 1;
const ROLLOUT_LABEL: u64 = 0x524f_4c4c;
/// Users per rollout batch; keeps the matrix products large.
const USERS_PER_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcGeometry {
    pub center: Vec2,
    pub radius: f64,
}

impl EcGeometry {
    pub fn new(center: Vec2, radius: f64) -> Result<Self> {
        let ec = EcGeometry { center, radius };
        ec.validate()?;
        Ok(ec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) || !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("EC radius must be positive and the center finite"));
        }
        Ok(())
    }

    pub fn contains(&self, p: Vec2) -> bool {
        membership(p, self)
    }

    pub fn distance(&self, p: Vec2) -> f64 {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1])
    }
}

/// Boundary counts as inside.
pub fn membership(position: Vec2, ec: &EcGeometry) -> bool {
    ec.distance(position) <= ec.radius
}

/// A user's recent uniform-rate positions, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct UserContext {
    pub user_id: UserId,
    positions: Vec<Vec2>,
    cold_start: bool,
}

impl UserContext {
    /// Requires at least 33 positions; only the last 33 are used.
    pub fn new(user_id: UserId, positions: Vec<Vec2>) -> Result<Self> {
        if positions.len() < MIN_HISTORY {
            return Err(Error::invalid(format!(
                "user {user_id} has {} positions, need {MIN_HISTORY}",
                positions.len()
            )));
        }
        Self::checked(user_id, positions, false)
    }

    /// Accepts a short history by padding it with zero displacements at the
    /// start; the context is flagged as a cold start when padding was needed.
    pub fn padded(user_id: UserId, positions: Vec<Vec2>) -> Result<Self> {
        let Some(&first) = positions.first() else {
            return Err(Error::invalid(format!("user {user_id} has no position")));
        };
        if positions.len() >= MIN_HISTORY {
            return Self::checked(user_id, positions, false);
        }
        let mut full = vec![first; MIN_HISTORY - positions.len()];
        full.extend(positions);
        Self::checked(user_id, full, true)
    }

    fn checked(user_id: UserId, mut positions: Vec<Vec2>, cold_start: bool) -> Result<Self> {
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("user {user_id} has a non-finite position")));
        }
        positions.drain(..positions.len() - MIN_HISTORY);
        Ok(UserContext {
            user_id,
            positions,
            cold_start,
        })
    }

    pub fn cold_start(&self) -> bool {
        self.cold_start
    }

    pub fn current_position(&self) -> Vec2 {
        *self.positions.last().expect("history is nonempty")
    }

    pub fn positions(&self) -> &[Vec2] {
        &self.positions
    }

    /// The 64 flattened displacements of the current window.
    pub fn window_values(&self) -> Vec<f64> {
        self.positions
            .windows(2)
            .flat_map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitForecast {
    pub user_id: UserId,
    pub probabilities: Vec<f64>,
    pub cold_start: bool,
}

fn check_args(model: &MdnModel, horizon: usize, n_rollouts: usize) -> Result<()> {
    if horizon == 0 || n_rollouts == 0 {
        return Err(Error::invalid("horizon and rollout count must be >= 1"));
    }
    if model.input_dim() != 2 * WINDOW_STEPS {
        return Err(Error::invalid(format!(
            "rollouts need a {}-input model, got {}",
            2 * WINDOW_STEPS,
            model.input_dim()
        )));
    }
    Ok(())
}

/// Fraction of `n_rollouts` autoregressive rollouts inside the EC at each of
/// the next `horizon` steps. Each rollout samples a displacement from the
/// model, moves, and slides its window by one step.
pub fn predict_visit_probabilities(
    model: &MdnModel,
    ctx: &UserContext,
    ec: &EcGeometry,
    horizon: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_args(model, horizon, n_rollouts)?;
    ec.validate()?;
    Ok(rollout_batch(model, std::slice::from_ref(ctx), ec, horizon, n_rollouts, seed)
        .pop()
        .expect("one user"))
}

/// Forecasts for many users. Each user draws from its own stream derived from
/// `(seed, user_id)`, so results do not depend on batching or scheduling.
pub fn predict_visit_batch(
    model: &MdnModel,
    contexts: &[UserContext],
    ec: &EcGeometry,
    horizon: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<VisitForecast>> {
    check_args(model, horizon, n_rollouts)?;
    ec.validate()?;
    let probs: Vec<Vec<f64>> = contexts
        .par_chunks(USERS_PER_BATCH)
        .flat_map_iter(|chunk| rollout_batch(model, chunk, ec, horizon, n_rollouts, seed))
        .collect();
    Ok(contexts
        .iter()
        .zip(probs)
        .map(|(c, probabilities)| VisitForecast {
            user_id: c.user_id,
            probabilities,
            cold_start: c.cold_start,
        })
        .collect())
}

fn rollout_batch(
    model: &MdnModel,
    contexts: &[UserContext],
    ec: &EcGeometry,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let width = 2 * WINDOW_STEPS;
    let rows = contexts.len() * n;
    let mut windows = Array2::<f64>::zeros((rows, width));
    let mut positions = Vec::with_capacity(rows);
    for (u, ctx) in contexts.iter().enumerate() {
        let w = ndarray::aview1(&ctx.window_values()).to_owned();
        for r in 0..n {
            windows.row_mut(u * n + r).assign(&w);
            positions.push(ctx.current_position());
        }
    }
    let mut rngs: Vec<_> = contexts
        .iter()
        .map(|c| rng::stream(seed, ROLLOUT_LABEL, c.user_id))
        .collect();
    let mut hits = vec![vec![0usize; horizon]; contexts.len()];
    for step in 0..horizon {
        let mixtures = model.forward_batch(windows.view());
        for (u, rng) in rngs.iter_mut().enumerate() {
            for r in 0..n {
                let row = u * n + r;
                let d = mixtures[row].sample(rng);
                let p = &mut positions[row];
                *p = [p[0] + d[0], p[1] + d[1]];
                if membership(*p, ec) {
                    hits[u][step] += 1;
                }
                if step + 1 < horizon {
                    let mut w = windows.row_mut(row);
                    let tail = w.slice(s![2..]).to_owned();
                    w.slice_mut(s![..width - 2]).assign(&tail);
                    w[width - 2] = d[0];
                    w[width - 1] = d[1];
                }
            }
        }
    }
    hits.into_iter()
        .map(|h| h.into_iter().map(|c| c as f64 / n as f64).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdn::{Architecture, MixtureParams};

    /// Zero weights with a head bias emitting one fixed Gaussian in physical units.
    pub(crate) fn constant_model(mean: Vec2, std: Vec2) -> MdnModel {
        let arch = Architecture {
            input_dim: 64,
            hidden: vec![4],
            components: 1,
        };
        let mut m = MdnModel::zeros(arch).unwrap();
        let head = m.layers_mut().last_mut().unwrap();
        head.bias[1] = mean[0];
        head.bias[2] = mean[1];
        head.bias[3] = std[0].ln();
        head.bias[4] = std[1].ln();
        m
    }

    fn still_history(p: Vec2) -> UserContext {
        UserContext::new(1, vec![p; MIN_HISTORY]).unwrap()
    }

    #[test]
    fn membership_examples() {
        let ec = EcGeometry::new([0.0, 0.0], 2000.0).unwrap();
        assert!(membership([0.0, 0.0], &ec));
        assert!(membership([2000.0, 0.0], &ec));
        assert!(!membership([2001.0, 0.0], &ec));
        assert!(EcGeometry::new([0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn stationary_user_inside_stays() {
        let m = constant_model([0.0, 0.0], [1e-6, 1e-6]);
        let ec = EcGeometry::new([4000.0, 4000.0], 2000.0).unwrap();
        let p = predict_visit_probabilities(&m, &still_history([4100.0, 3900.0]), &ec, 30, 50, 1).unwrap();
        assert_eq!(p, vec![1.0; 30]);
        let far = predict_visit_probabilities(&m, &still_history([104_000.0, 0.0]), &ec, 30, 50, 1).unwrap();
        assert_eq!(far, vec![0.0; 30]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = constant_model([0.0, 0.0], [1.0, 1.0]);
        let ec = EcGeometry::new([0.0, 0.0], 10.0).unwrap();
        assert!(UserContext::new(1, vec![[0.0, 0.0]; 32]).is_err());
        assert!(UserContext::padded(1, vec![]).is_err());
        let ctx = still_history([0.0, 0.0]);
        assert!(predict_visit_probabilities(&m, &ctx, &ec, 0, 10, 1).is_err());
        assert!(predict_visit_probabilities(&m, &ctx, &ec, 5, 0, 1).is_err());
    }

    #[test]
    fn padded_context_is_flagged() {
        let ctx = UserContext::padded(3, vec![[1.0, 1.0], [2.0, 1.0]]).unwrap();
        assert!(ctx.cold_start());
        assert_eq!(ctx.positions().len(), MIN_HISTORY);
        let v = ctx.window_values();
        assert_eq!(&v[..62], &[0.0; 62][..]);
        assert_eq!(&v[62..], &[1.0, 0.0]);
        let full = UserContext::padded(3, vec![[0.0, 0.0]; 40]).unwrap();
        assert!(!full.cold_start());
    }

    #[test]
    fn windows_slide_with_sampled_steps() {
        // Drift of 10 m per step to the east: position after k steps is start + 10k.
        let m = constant_model([10.0, 0.0], [1e-9, 1e-9]);
        let ec = EcGeometry::new([55.0, 0.0], 20.0).unwrap();
        let p = predict_visit_probabilities(&m, &still_history([0.0, 0.0]), &ec, 10, 4, 2).unwrap();
        let expect: Vec<f64> = (1..=10)
            .map(|k| if (10.0 * k as f64 - 55.0).abs() <= 20.0 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(p, expect);
    }

    #[test]
    fn batch_matches_single_and_is_seeded() {
        let m = MdnModel::new(Architecture::default(), 3).unwrap();
        let ec = EcGeometry::new([0.0, 0.0], 3.0).unwrap();
        let ctxs: Vec<_> = (0..40)
            .map(|u| {
                let pos = (0..MIN_HISTORY).map(|i| [i as f64 * 0.1, u as f64 * 0.05]).collect();
                UserContext::new(u, pos).unwrap()
            })
            .collect();
        let batch = predict_visit_batch(&m, &ctxs, &ec, 5, 8, 77).unwrap();
        for u in [0usize, 17, 39] {
            let single = predict_visit_probabilities(&m, &ctxs[u], &ec, 5, 8, 77).unwrap();
            assert_eq!(batch[u].probabilities, single);
        }
        assert_eq!(batch, predict_visit_batch(&m, &ctxs, &ec, 5, 8, 77).unwrap());
        assert!(batch.iter().flat_map(|f| &f.probabilities).all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn one_step_mass_matches_kernel() {
        let kernel = MixtureParams::gaussian([0.0, 0.0], [1.0, 1.0], 0.0).unwrap();
        let m = constant_model(kernel.components[0].mean, kernel.components[0].std);
        // Mass of a standard normal inside the unit disc: 1 - exp(-1/2).
        let ec = EcGeometry::new([0.0, 0.0], 1.0).unwrap();
        let p = predict_visit_probabilities(&m, &still_history([0.0, 0.0]), &ec, 1, 20_000, 5).unwrap();
        let truth = 1.0 - (-0.5f64).exp();
        let se = (truth * (1.0 - truth) / 20_000.0).sqrt();
        assert!((p[0] - truth).abs() < 3.0 * se, "{} vs {truth}", p[0]);
    }
}
