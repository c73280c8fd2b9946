//! Edge-coverage simulation: a user population moving by iid kernel draws,
//! a Markov outage process, and per-interval migration decisions scored by
//! realized loss plus incurred cost.
//!
//! The world (motion, outages and the controller's forecasts) does not depend
//! on the decisions taken, so it is simulated once per seed into a
//! [`WorldTrace`] and every policy is scored against the same trace.

use std::collections::{HashSet, VecDeque};
use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::decide;
use crate::econ::{cost_loss_sum, expected_outage_exposure, EconomicParams, MigrationDecision, OutageExposure, UserId};
use crate::error::{Error, Result};
use crate::mdn::{
    backward, train, Component, EpochLoss, FeatureWindow, MdnModel, MdnSettings, MixtureParams, RmsProp, Scaler,
    StepTarget, Vec2, WindowSet, WINDOW_STEPS,
};
use crate::mobility::{predict_visit_batch, EcGeometry, UserContext, MIN_HISTORY};
use crate::outage::{ChainSpec, ReliabilityChain};
use crate::rng;

const INIT: u64 = 0x494e_4954;
const MOVE: u64 = 0x4d4f_5645;
const ARRIVE: u64 = 0x4152_5256;
const CHAIN: u64 = 0x4348_4149;
const FORECAST: u64 = 0x4643_5354;
const MODEL: u64 = 0x4d4f_444c;
const KERNEL: u64 = 0x4b45_524e;

/// How per-step visit probabilities collapse into one number for the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisitReducer {
    /// `1 - prod(1 - p)`.
    #[default]
    ComplementProduct,
    Sum,
    Max,
}

impl VisitReducer {
    pub fn reduce(self, p_visit: &[f64]) -> f64 {
        match self {
            VisitReducer::ComplementProduct => 1.0 - p_visit.iter().map(|p| 1.0 - p).product::<f64>(),
            VisitReducer::Sum => p_visit.iter().sum(),
            VisitReducer::Max => p_visit.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Double-threshold baseline: migrate iff the mean outage probability exceeds
/// `p_o_threshold`; when migrating, sync users whose reduced visit
/// probability exceeds `p_v_threshold`.
pub fn double_threshold_decide(
    users: &[UserId],
    p_outage: &[f64],
    p_visit: &[Vec<f64>],
    p_o_threshold: f64,
    p_v_threshold: f64,
    reducer: VisitReducer,
) -> Result<MigrationDecision> {
    for (name, v) in [("P_o", p_o_threshold), ("P_v", p_v_threshold)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} threshold {v} outside [0, 1]")));
        }
    }
    if users.len() != p_visit.len() {
        return Err(Error::invalid("one visit horizon per user is required"));
    }
    if p_outage.is_empty() {
        return Err(Error::invalid("empty outage horizon"));
    }
    let mean_po = p_outage.iter().sum::<f64>() / p_outage.len() as f64;
    if mean_po <= p_o_threshold {
        return Ok(MigrationDecision::stay());
    }
    Ok(MigrationDecision::migrate(
        users
            .iter()
            .zip(p_visit)
            .filter(|(_, pv)| reducer.reduce(pv) > p_v_threshold)
            .map(|(&u, _)| u),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Side of the square region, meters.
    pub region_side: f64,
    pub ec: EcGeometry,
    pub population: usize,
    pub step_interval_s: f64,
    pub preconvergence_steps: usize,
    pub training_steps: usize,
    pub evaluation_steps: usize,
    pub n_rollouts: usize,
    /// Candidate users lie within `radius + factor * T * v_cap` of the EC center.
    pub candidate_radius_factor: f64,
    /// Quantile of observed step lengths used as `v_cap`.
    pub v_cap_quantile: f64,
    /// Size of the ground-truth kernel library.
    pub kernel_count: usize,
    /// Epochs of in-run training over the training-phase windows.
    pub train_epochs: usize,
    /// One optimizer step per interval on that interval's new windows.
    pub online_updates: bool,
    pub visit_reducer: VisitReducer,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            region_side: 8000.0,
            ec: EcGeometry {
                center: [4000.0, 4000.0],
                radius: 2000.0,
            },
            population: 1000,
            step_interval_s: 60.0,
            preconvergence_steps: 250,
            training_steps: 500,
            evaluation_steps: 4000,
            n_rollouts: 100,
            candidate_radius_factor: 1.0,
            v_cap_quantile: 0.99,
            kernel_count: 16,
            train_epochs: 15,
            online_updates: true,
            visit_reducer: VisitReducer::ComplementProduct,
        }
    }
}

impl SimConfig {
    /// 200 users and 1000 evaluation steps, with the rollout count and the
    /// in-run training epochs cut so a ten-seed benchmark fits on one core.
    pub fn desk_scale() -> Self {
        SimConfig {
            population: 200,
            evaluation_steps: 1000,
            n_rollouts: 16,
            train_epochs: 3,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.population == 0 || self.evaluation_steps == 0 || self.n_rollouts == 0 || self.kernel_count == 0 {
            return bad("population, evaluation_steps, n_rollouts and kernel_count must be >= 1");
        }
        if self.training_steps < MIN_HISTORY + 1 {
            return bad("training_steps must cover at least one window and its target");
        }
        if !(self.region_side > 0.0 && self.step_interval_s > 0.0) {
            return bad("region_side and step_interval_s must be positive");
        }
        self.ec.validate().map_err(|e| Error::Config(e.to_string()))?;
        let [cx, cy] = self.ec.center;
        let r = self.ec.radius;
        if cx - r < 0.0 || cy - r < 0.0 || cx + r > self.region_side || cy + r > self.region_side {
            return bad("EC disc must lie inside the region");
        }
        if !(self.candidate_radius_factor >= 0.0) || !(0.0..=1.0).contains(&self.v_cap_quantile) {
            return bad("candidate_radius_factor must be >= 0 and v_cap_quantile in [0, 1]");
        }
        Ok(())
    }
}

/// Everything a simulation run needs besides the seed and the kernels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub sim: SimConfig,
    pub economics: EconomicParams,
    pub chain: ChainSpec,
    pub mdn: MdnSettings,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.economics.validate().map_err(|e| Error::Config(e.to_string()))?;
        ReliabilityChain::from_spec(&self.chain).map_err(|e| Error::Config(e.to_string()))?;
        self.mdn.validate()
    }
}

/// Ground-truth step distributions; each simulated user draws iid
/// displacements from one of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelLibrary {
    pub kernels: Vec<MixtureParams>,
}

impl KernelLibrary {
    pub fn new(kernels: Vec<MixtureParams>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::invalid("kernel library is empty"));
        }
        for k in &kernels {
            k.validate()?;
        }
        Ok(KernelLibrary { kernels })
    }

    /// Pedestrian-like two-component kernels: a drifting walk with random
    /// heading and speed up to 50 m per step, and a slow wander.
    pub fn synthetic(count: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, KERNEL, 0);
        let kernels = (0..count)
            .map(|_| {
                let heading = r.random_range(0.0..std::f64::consts::TAU);
                let speed = r.random_range(0.0..50.0);
                let spread = r.random_range(10.0..30.0);
                let walk = r.random_range(0.5..0.9);
                let wander = r.random_range(3.0..10.0);
                MixtureParams::new(vec![
                    Component {
                        weight: walk,
                        mean: [speed * heading.cos(), speed * heading.sin()],
                        std: [spread * r.random_range(0.7..1.3), spread * r.random_range(0.7..1.3)],
                        rho: r.random_range(-0.5..0.5),
                    },
                    Component {
                        weight: 1.0 - walk,
                        mean: [0.0, 0.0],
                        std: [wander, wander],
                        rho: 0.0,
                    },
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        KernelLibrary::new(kernels)
    }

    /// Kernels emitted by a trained model: each is the model's mixture after
    /// rolling it forward from rest for `warmup` sampled steps.
    ///
    /// Warmup steps are clipped to the scaler's mean +- 4 sd per axis so an
    /// undertrained model cannot feed itself ever larger windows.
    pub fn from_model(model: &MdnModel, count: usize, warmup: usize, seed: u64) -> Result<Self> {
        let sc = model.scaler();
        let clip = |v: f64, k: usize| v.clamp(sc.mean[k] - 4.0 * sc.std[k], sc.mean[k] + 4.0 * sc.std[k]);
        let kernels = (0..count)
            .map(|j| {
                let mut r = rng::stream(seed, KERNEL, 1 + j as u64);
                let mut deltas: VecDeque<Vec2> = std::iter::repeat_n([0.0, 0.0], WINDOW_STEPS).collect();
                let window = |d: &VecDeque<Vec2>| FeatureWindow::from_deltas(&d.iter().copied().collect::<Vec<_>>());
                for _ in 0..warmup {
                    let [x, y] = model.forward(&window(&deltas)?)?.sample(&mut r);
                    let step = [clip(x, 0), clip(y, 1)];
                    deltas.pop_front();
                    deltas.push_back(step);
                }
                model.forward(&window(&deltas)?)
            })
            .collect::<Result<Vec<_>>>()?;
        KernelLibrary::new(kernels)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// Controller inputs captured at one interval boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalInputs {
    pub users: Vec<UserId>,
    pub p_outage: Vec<f64>,
    pub p_visit: Vec<Vec<f64>>,
    /// Candidates whose history had to be padded.
    pub cold_starts: usize,
}

impl IntervalInputs {
    pub fn exposures(&self) -> Result<Vec<OutageExposure>> {
        self.users
            .iter()
            .zip(&self.p_visit)
            .map(|(&u, pv)| Ok(OutageExposure::new(u, expected_outage_exposure(&self.p_outage, pv)?)))
            .collect()
    }
}

/// State of the world after one evaluation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub outage: bool,
    /// Users inside the EC, ascending.
    pub in_ec: Vec<UserId>,
    pub population: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldTrace {
    pub seed: u64,
    pub intervals: Vec<IntervalInputs>,
    /// `steps[k]` holds the `T` steps following interval boundary `k`.
    pub steps: Vec<Vec<StepRecord>>,
    pub v_cap: f64,
    pub training_curve: Vec<EpochLoss>,
    pub replacements: usize,
}

struct SimUser {
    id: UserId,
    kernel: usize,
    position: Vec2,
    history: VecDeque<Vec2>,
}

struct World<'a> {
    scenario: &'a Scenario,
    kernels: &'a KernelLibrary,
    users: Vec<SimUser>,
    next_id: UserId,
    history_cap: usize,
    move_rng: rng::SimRng,
    arrive_rng: rng::SimRng,
    replacements: usize,
}

impl World<'_> {
    fn outside(&self, p: Vec2) -> bool {
        let side = self.scenario.sim.region_side;
        !(0.0..=side).contains(&p[0]) || !(0.0..=side).contains(&p[1])
    }

    fn boundary_point(&mut self) -> Vec2 {
        let side = self.scenario.sim.region_side;
        let s = self.arrive_rng.random_range(0.0..4.0 * side);
        match (s / side) as usize {
            0 => [s, 0.0],
            1 => [side, s - side],
            2 => [3.0 * side - s, side],
            _ => [0.0, (4.0 * side - s).clamp(0.0, side)],
        }
    }

    /// Moves every user one step; returns the indices of replaced slots.
    fn step(&mut self) -> Vec<usize> {
        let mut replaced = Vec::new();
        for i in 0..self.users.len() {
            let d = self.kernels.kernels[self.users[i].kernel].sample(&mut self.move_rng);
            let p = self.users[i].position;
            let next = [p[0] + d[0], p[1] + d[1]];
            if self.outside(next) {
                let position = self.boundary_point();
                let kernel = self.arrive_rng.random_range(0..self.kernels.len());
                self.users[i] = SimUser {
                    id: self.next_id,
                    kernel,
                    position,
                    history: VecDeque::from([position]),
                };
                self.next_id += 1;
                self.replacements += 1;
                replaced.push(i);
            } else {
                let u = &mut self.users[i];
                u.position = next;
                if u.history.len() == self.history_cap {
                    u.history.pop_front();
                }
                u.history.push_back(next);
            }
        }
        replaced
    }
}

fn quantile(mut values: Vec<f64>, q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

fn windows_of(positions: &[Vec2], last_targets: Option<usize>) -> Vec<(FeatureWindow, StepTarget)> {
    let deltas: Vec<Vec2> = positions
        .windows(2)
        .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
        .collect();
    if deltas.len() <= WINDOW_STEPS {
        return Vec::new();
    }
    let n = deltas.len() - WINDOW_STEPS;
    let first = last_targets.map_or(0, |k| n.saturating_sub(k));
    (first..n)
        .map(|i| {
            (
                FeatureWindow::from_deltas(&deltas[i..i + WINDOW_STEPS]).expect("finite positions"),
                deltas[i + WINDOW_STEPS],
            )
        })
        .collect()
}

/// Trains the controller's model on training-phase windows, holding out a
/// tenth for validation.
fn train_controller(scenario: &Scenario, pairs: Vec<(FeatureWindow, StepTarget)>, seed: u64) -> Result<(MdnModel, RmsProp, Vec<EpochLoss>)> {
    let mut model = MdnModel::new(scenario.mdn.architecture(), rng::stream(seed, MODEL, 0).random())?;
    let mut optimizer = scenario.mdn.optimizer();
    if pairs.len() < 2 {
        return Err(Error::Data("training phase produced fewer than two windows".into()));
    }
    let mut pairs = pairs;
    pairs.shuffle(&mut rng::stream(seed, MODEL, 1));
    let n_val = (pairs.len() / 10).max(1);
    let val = WindowSet::from_pairs(&pairs[..n_val])?;
    let tr = WindowSet::from_pairs(&pairs[n_val..])?;
    model.set_scaler(Scaler::fit(&tr));
    let cfg = scenario.mdn.train_config(rng::stream(seed, MODEL, 2).random());
    let cfg = crate::mdn::TrainConfig {
        epochs: scenario.sim.train_epochs,
        ..cfg
    };
    let curve = train(&mut model, &tr, &val, &cfg, &mut optimizer)?;
    Ok((model, optimizer, curve))
}

/// Simulates motion, outages and the controller's forecasts for one seed.
pub fn simulate_world(scenario: &Scenario, kernels: &KernelLibrary, seed: u64) -> Result<WorldTrace> {
    scenario.validate()?;
    let sim = &scenario.sim;
    let interval = scenario.economics.interval;
    let mut chain = ReliabilityChain::from_spec(&scenario.chain)?;
    let mut chain_rng = rng::stream(seed, CHAIN, 0);
    let mut init_rng = rng::stream(seed, INIT, 0);
    let history_cap = MIN_HISTORY + interval;
    let users = (0..sim.population)
        .map(|i| {
            let position = [
                init_rng.random_range(0.0..sim.region_side),
                init_rng.random_range(0.0..sim.region_side),
            ];
            SimUser {
                id: i as UserId,
                kernel: init_rng.random_range(0..kernels.len()),
                position,
                history: VecDeque::from([position]),
            }
        })
        .collect();
    let mut world = World {
        scenario,
        kernels,
        users,
        next_id: sim.population as UserId,
        history_cap,
        move_rng: rng::stream(seed, MOVE, 0),
        arrive_rng: rng::stream(seed, ARRIVE, 0),
        replacements: 0,
    };

    for _ in 0..sim.preconvergence_steps {
        chain.step(&mut chain_rng);
        world.step();
    }

    // Full training-phase tracks, one per user lifetime.
    let mut tracks: Vec<Vec<Vec2>> = world.users.iter().map(|u| vec![u.position]).collect();
    let mut finished: Vec<Vec<Vec2>> = Vec::new();
    for _ in 0..sim.training_steps {
        chain.step(&mut chain_rng);
        for i in world.step() {
            finished.push(std::mem::take(&mut tracks[i]));
        }
        for (track, u) in tracks.iter_mut().zip(&world.users) {
            track.push(u.position);
        }
    }
    finished.extend(tracks);
    let step_lengths: Vec<f64> = finished
        .iter()
        .flat_map(|t| t.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])))
        .collect();
    let v_cap = quantile(step_lengths, sim.v_cap_quantile);
    let pairs: Vec<_> = finished.iter().flat_map(|t| windows_of(t, None)).collect();
    drop(finished);
    let (mut model, mut optimizer, training_curve) = train_controller(scenario, pairs, seed)?;
    info!(
        "seed {seed}: controller trained, val NLL {:.4}, v_cap {v_cap:.1} m/step",
        training_curve.last().map_or(f64::NAN, |e| e.val_nll)
    );

    let reach = sim.ec.radius + sim.candidate_radius_factor * interval as f64 * v_cap;
    let n_intervals = sim.evaluation_steps / interval;
    let mut intervals = Vec::with_capacity(n_intervals);
    let mut steps = Vec::with_capacity(n_intervals);
    for k in 0..n_intervals {
        let p_outage = chain.outage_horizon(interval)?;
        let contexts = world
            .users
            .iter()
            .filter(|u| sim.ec.distance(u.position) <= reach)
            .map(|u| UserContext::padded(u.id, u.history.iter().copied().collect()))
            .collect::<Result<Vec<_>>>()?;
        let forecast_seed: u64 = rng::stream(seed, FORECAST, k as u64).random();
        let forecasts = predict_visit_batch(&model, &contexts, &sim.ec, interval, sim.n_rollouts, forecast_seed)?;
        intervals.push(IntervalInputs {
            users: forecasts.iter().map(|f| f.user_id).collect(),
            cold_starts: forecasts.iter().filter(|f| f.cold_start).count(),
            p_visit: forecasts.into_iter().map(|f| f.probabilities).collect(),
            p_outage,
        });

        let mut records = Vec::with_capacity(interval);
        for _ in 0..interval {
            chain.step(&mut chain_rng);
            world.step();
            let mut in_ec: Vec<UserId> = world
                .users
                .iter()
                .filter(|u| sim.ec.contains(u.position))
                .map(|u| u.id)
                .collect();
            in_ec.sort_unstable();
            records.push(StepRecord {
                outage: chain.in_outage(),
                in_ec,
                population: world.users.len(),
            });
        }
        steps.push(records);

        if sim.online_updates {
            let fresh: Vec<_> = world
                .users
                .iter()
                .flat_map(|u| windows_of(&u.history.iter().copied().collect::<Vec<_>>(), Some(interval)))
                .collect();
            if !fresh.is_empty() {
                let (_, grads) = backward(&model, &WindowSet::from_pairs(&fresh)?)?;
                optimizer.step(&mut model, &grads);
            }
        }
    }
    Ok(WorldTrace {
        seed,
        intervals,
        steps,
        v_cap,
        training_curve,
        replacements: world.replacements,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Optimal,
    DoubleThreshold {
        p_o: f64,
        p_v: f64,
        reducer: VisitReducer,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalLedger {
    pub interval: usize,
    pub migrate: bool,
    pub n_synced: usize,
    pub realized_loss: f64,
    pub cost: f64,
    /// Controller bounds on the same inputs, whatever the policy.
    pub s1: f64,
    pub s2: f64,
    /// Expected cost-loss sum of the decision taken.
    pub expected_sum: f64,
    /// Loss that full coverage would have avoided on this trace.
    pub no_action_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RunSummary {
    pub total_loss: f64,
    pub total_cost: f64,
    pub total_sum: f64,
}

pub fn summarize(ledger: &[IntervalLedger]) -> RunSummary {
    let total_loss: f64 = ledger.iter().map(|l| l.realized_loss).sum();
    let total_cost: f64 = ledger.iter().map(|l| l.cost).sum();
    RunSummary {
        total_loss,
        total_cost,
        total_sum: total_loss + total_cost,
    }
}

/// Scores a policy on a trace. A user's loss is avoided on a step only if the
/// VNF was migrated and that user's profile synced at the interval boundary.
pub fn evaluate_policy(trace: &WorldTrace, policy: &Policy, params: &EconomicParams) -> Result<Vec<IntervalLedger>> {
    trace
        .intervals
        .iter()
        .zip(&trace.steps)
        .enumerate()
        .map(|(k, (inputs, records))| {
            let outcome = decide(&inputs.users, &inputs.p_outage, &inputs.p_visit, params)?;
            let (decision, expected_sum) = match policy {
                Policy::Optimal => {
                    let s = outcome.achieved();
                    (outcome.decision.clone(), s)
                }
                Policy::DoubleThreshold { p_o, p_v, reducer } => {
                    let d = double_threshold_decide(&inputs.users, &inputs.p_outage, &inputs.p_visit, *p_o, *p_v, *reducer)?;
                    let s = cost_loss_sum(&d, &outcome.exposures, params)?;
                    (d, s)
                }
            };
            let mut exposed = 0usize;
            let mut uncovered = 0usize;
            for r in records.iter().filter(|r| r.outage) {
                exposed += r.in_ec.len();
                uncovered += r.in_ec.iter().filter(|&&u| !decision.covers(u)).count();
            }
            let n_synced = decision.sync_set().len();
            Ok(IntervalLedger {
                interval: k,
                migrate: decision.migrates(),
                n_synced,
                realized_loss: params.loss_rate * uncovered as f64,
                cost: params.cost_nf * f64::from(u8::from(decision.migrates())) + params.cost_sp * n_synced as f64,
                s1: outcome.bound_migrate,
                s2: outcome.bound_stay,
                expected_sum,
                no_action_loss: params.loss_rate * exposed as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub ledger: Vec<IntervalLedger>,
    pub summary: RunSummary,
    pub trace: WorldTrace,
}

pub fn run_simulation(scenario: &Scenario, kernels: &KernelLibrary, policy: &Policy, seed: u64) -> Result<SimulationRun> {
    let trace = simulate_world(scenario, kernels, seed)?;
    let ledger = evaluate_policy(&trace, policy, &scenario.economics)?;
    Ok(SimulationRun {
        summary: summarize(&ledger),
        ledger,
        trace,
    })
}

pub fn write_ledger_csv<W: Write>(w: W, ledger: &[IntervalLedger]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["interval", "m", "n_synced", "realized_loss", "cost", "S1", "S2"])
        .map_err(csv_err)?;
    for l in ledger {
        wr.write_record([
            l.interval.to_string(),
            u8::from(l.migrate).to_string(),
            l.n_synced.to_string(),
            l.realized_loss.to_string(),
            l.cost.to_string(),
            l.s1.to_string(),
            l.s2.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    /// `None` for the optimal controller.
    pub thresholds: Option<(f64, f64)>,
    /// One total per seed, in seed order.
    pub totals: Vec<f64>,
    pub mean_total: f64,
    pub std_total: f64,
}

impl BenchmarkRow {
    fn new(thresholds: Option<(f64, f64)>, totals: Vec<f64>) -> Self {
        let n = totals.len() as f64;
        let mean_total = totals.iter().sum::<f64>() / n;
        let std_total = if totals.len() > 1 {
            (totals.iter().map(|t| (t - mean_total).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        BenchmarkRow {
            thresholds,
            totals,
            mean_total,
            std_total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkTable {
    pub seeds: Vec<u64>,
    /// Grid rows in `P_o`-major order.
    pub grid: Vec<BenchmarkRow>,
    pub optimal: BenchmarkRow,
}

impl BenchmarkTable {
    pub fn best_grid_row(&self) -> &BenchmarkRow {
        self.grid
            .iter()
            .min_by(|a, b| a.mean_total.total_cmp(&b.mean_total))
            .expect("grid is nonempty")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["P_o", "P_v", "mean_total", "std_total"]).map_err(csv_err)?;
        for r in &self.grid {
            let (po, pv) = r.thresholds.expect("grid rows carry thresholds");
            wr.write_record([po.to_string(), pv.to_string(), r.mean_total.to_string(), r.std_total.to_string()])
                .map_err(csv_err)?;
        }
        wr.write_record([
            "optimal".to_string(),
            "optimal".to_string(),
            self.optimal.mean_total.to_string(),
            self.optimal.std_total.to_string(),
        ])
        .map_err(csv_err)?;
        wr.flush()?;
        Ok(())
    }
}

/// Scores the optimal controller and every `(P_o, P_v)` pair on the same
/// per-seed traces.
pub fn benchmark_traces(traces: &[WorldTrace], p_o_grid: &[f64], p_v_grid: &[f64], scenario: &Scenario) -> Result<BenchmarkTable> {
    if p_o_grid.is_empty() || p_v_grid.is_empty() || traces.is_empty() {
        return Err(Error::invalid("grids and seed list must be nonempty"));
    }
    let params = &scenario.economics;
    let totals = |policy: Policy| -> Result<Vec<f64>> {
        traces
            .iter()
            .map(|t| Ok(summarize(&evaluate_policy(t, &policy, params)?).total_sum))
            .collect()
    };
    let mut grid = Vec::with_capacity(p_o_grid.len() * p_v_grid.len());
    for &p_o in p_o_grid {
        for &p_v in p_v_grid {
            let policy = Policy::DoubleThreshold {
                p_o,
                p_v,
                reducer: scenario.sim.visit_reducer,
            };
            grid.push(BenchmarkRow::new(Some((p_o, p_v)), totals(policy)?));
        }
    }
    Ok(BenchmarkTable {
        seeds: traces.iter().map(|t| t.seed).collect(),
        grid,
        optimal: BenchmarkRow::new(None, totals(Policy::Optimal)?),
    })
}

/// Simulates one trace per seed (in parallel) and benchmarks them.
pub fn benchmark_grid(
    scenario: &Scenario,
    kernels: &KernelLibrary,
    p_o_grid: &[f64],
    p_v_grid: &[f64],
    seeds: &[u64],
) -> Result<BenchmarkTable> {
    let traces = simulate_traces(scenario, kernels, seeds)?;
    benchmark_traces(&traces, p_o_grid, p_v_grid, scenario)
}

pub fn simulate_traces(scenario: &Scenario, kernels: &KernelLibrary, seeds: &[u64]) -> Result<Vec<WorldTrace>> {
    let unique: HashSet<_> = seeds.iter().collect();
    if unique.len() != seeds.len() {
        return Err(Error::invalid("duplicate seeds"));
    }
    seeds
        .par_iter()
        .map(|&s| simulate_world(scenario, kernels, s))
        .collect()
}

/// `{0.1, 0.2, ..., 0.9}`.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}
