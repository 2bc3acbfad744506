//! The tick/round loop of every scenario.
//!
//! Each tick all agents are measured, a network round runs on round ticks,
//! inputs are computed and the plants advance one tick. Messages delivered
//! in a round are acted upon in the next one.

use std::collections::{BTreeMap, BTreeSet};

use crate::control::{
    all_pairs, apply_actuation_zoh, consensus_track_input, consensus_update, design_lqr, design_sync_lqr,
    distributed_input, outgoing_gain, agreement_detector, remote_control_input, remote_estimate, ConsensusState,
    GainSet, PeerEstimate, RemoteLoopState, TriggerPredictor,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::netsim::{
    mode_change_tick, mode_coherent, run_round, Beacon, DeliveryAudit, Message, NetworkConfig, NodeId,
    NodeNetState, Payload, RoundOutcome, RoundSchedule, SlotAssignment, SlotPurpose,
};
use crate::plant::{diverged, lift_model, measure, step_plant, PlantModel, PlantState};
use crate::rng::Rng;
use crate::sched::{
    duty_cycle_metric, manager_allocate, synthesize_schedule, Demand, DemandAudit, ManagerState, ScheduleOutcome,
    StaticSchedule,
};

use super::config::{node_of, ModeConfig, ScenarioConfig, ScenarioKind, HOST};
use super::metrics::{pairwise_rmse, Departure, ModeWindow, SummaryMetrics};
use super::trace::TraceRecord;

const STREAM_NETWORK: u64 = 1;
const STREAM_DROP: u64 = 2;
const STREAM_AGENT: u64 = 16;

/// Ticks after a switch over which pole angles are compared.
pub const SWITCH_WINDOW_TICKS: u64 = 500;

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: SummaryMetrics,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub record_trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { record_trace: true }
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput> {
    run_scenario_with(cfg, RunOptions::default())
}

/// Runs a validated scenario. Divergence ends the run early but is not an
/// error: the partial trace comes back with `stable = false`.
pub fn run_scenario_with(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    super::stability::enforce_dwell(cfg)?;
    let mut eng = Engine::new(cfg, opts)?;
    let outcome = match cfg.scenario {
        ScenarioKind::Remote | ScenarioKind::RemoteDrops => run_remote(&mut eng),
        ScenarioKind::Consensus => run_consensus(&mut eng),
        ScenarioKind::SyncModes => run_sync(&mut eng),
        ScenarioKind::SelfTriggered => run_self_triggered(&mut eng),
    };
    match outcome {
        Ok(()) => {}
        Err(Error::Divergence { tick, detail }) => eng.divergence = Some(format!("tick {tick}: {detail}")),
        Err(e) => return Err(e),
    }
    Ok(eng.finish())
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    net: NetworkConfig,
    period: u64,
    models: Vec<PlantModel>,
    states: Vec<PlantState>,
    noise: Vec<Rng>,
    net_rng: Rng,
    node_states: BTreeMap<NodeId, NodeNetState>,
    seq: BTreeMap<NodeId, u64>,
    audit: DeliveryAudit,
    schedules: Vec<RoundSchedule>,
    record: bool,
    trace: Vec<TraceRecord>,
    positions: Vec<Vec<f64>>,
    angles: Vec<Vec<f64>>,
    distance: Vec<f64>,
    max_angle: f64,
    coherent: bool,
    divergence: Option<String>,
    summary_extra: Extra,
}

#[derive(Default)]
struct Extra {
    consensus_rounds: Option<u64>,
    consensus_spread: Vec<f64>,
    demand_violations: usize,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig, opts: RunOptions) -> Result<Self> {
        let net = cfg.network_config();
        let models = cfg.models()?;
        let n = cfg.agents.len();
        let first_mode = cfg.mode_plan()[0].id;
        Ok(Self {
            cfg,
            period: cfg.network.round_period as u64,
            states: cfg.agents.iter().map(|a| PlantState::new(Vector::from_vec(a.initial_state.clone()))).collect(),
            noise: (0..n).map(|i| Rng::stream(cfg.seed, STREAM_AGENT + i as u64)).collect(),
            net_rng: Rng::stream(cfg.seed, STREAM_NETWORK),
            node_states: net.node_ids.iter().map(|&id| (id, NodeNetState::new(first_mode))).collect(),
            net,
            models,
            seq: BTreeMap::new(),
            audit: DeliveryAudit::default(),
            schedules: Vec::new(),
            record: opts.record_trace,
            trace: Vec::new(),
            positions: Vec::new(),
            angles: Vec::new(),
            distance: vec![0.0; n],
            max_angle: 0.0,
            coherent: true,
            divergence: None,
            summary_extra: Extra::default(),
        })
    }

    fn agents(&self) -> usize {
        self.states.len()
    }

    fn measure_all(&mut self) -> Result<Vec<Vector>> {
        let mut ys = Vec::with_capacity(self.agents());
        for i in 0..self.agents() {
            ys.push(measure(&self.models[i], &self.states[i], &mut self.noise[i])?);
        }
        let pos: Vec<f64> = self.states.iter().map(|s| s.x[0]).collect();
        let ang: Vec<f64> = self.states.iter().map(|s| s.x.get(1).copied().unwrap_or(0.0).abs()).collect();
        self.max_angle = ang.iter().copied().fold(self.max_angle, f64::max);
        self.positions.push(pos);
        self.angles.push(ang);
        Ok(ys)
    }

    fn step_all(&mut self, us: &[Vector]) -> Result<()> {
        for i in 0..self.agents() {
            let prev = self.states[i].x[0];
            let next = step_plant(&self.models[i], &self.states[i], &us[i], &mut self.noise[i])?;
            if diverged(&next.x) {
                self.states[i] = next;
                return Err(Error::Divergence {
                    tick: self.states[i].tick,
                    detail: format!("agent {i} left the divergence bound"),
                });
            }
            self.distance[i] += (next.x[0] - prev).abs();
            self.states[i] = next;
        }
        Ok(())
    }

    fn message(&mut self, node: NodeId, beacon: &Beacon, payload: Payload, demand: Option<u32>) -> Option<Message> {
        if !self.node_states[&node].synced {
            return None;
        }
        let slot = beacon.round_schedule.slot_of(node)?.slot;
        let seq = self.seq.entry(node).or_insert(0);
        *seq += 1;
        Some(Message { sender: node, round_index: beacon.round_index, slot_index: slot, payload, demand, seq: *seq })
    }

    fn round(&mut self, beacon: &Beacon, outbox: &BTreeMap<NodeId, Message>) -> Result<RoundOutcome> {
        let out = run_round(&self.net, beacon, outbox, &self.node_states, &mut self.net_rng)?;
        self.audit.record_round(&out);
        self.node_states = out.node_states.clone();
        self.coherent &= mode_coherent(&self.node_states);
        self.schedules.push(beacon.round_schedule.clone());
        Ok(out)
    }

    fn row(&self, tick: u64, agent: usize, mode: u32, u: &Vector) -> TraceRecord {
        TraceRecord::new(tick, tick / self.period, agent, mode, self.states[agent].x.as_slice(), u[0])
    }

    fn push(&mut self, row: TraceRecord) {
        if self.record {
            self.trace.push(row);
        }
    }

    fn finish(self) -> RunOutput {
        let cfg = self.cfg;
        let ticks = self.positions.len() as u64;
        let plan = cfg.mode_plan();
        let mut windows = Vec::new();
        let mut departures = Vec::new();
        let mut ratios = Vec::new();
        let mut rmse_sync = None;
        match cfg.scenario {
            ScenarioKind::SyncModes => {
                let (mut sq, mut w) = (0.0, 0.0);
                for (k, m) in plan.iter().enumerate() {
                    let to = plan.get(k + 1).map_or(cfg.duration, |n| n.start);
                    let rmse = pairwise_rmse(&self.positions, &m.team, m.start as usize, to as usize);
                    if let Some(r) = rmse {
                        let weight = (to.min(ticks).saturating_sub(m.start)) as f64 * pairs(m.team.len());
                        sq += r * r * weight;
                        w += weight;
                    }
                    windows.push(ModeWindow { mode: m.id, from_tick: m.start, to_tick: to, team: m.team.clone(), rmse });
                    if k > 0 {
                        let prev = &plan[k - 1];
                        let remaining: Vec<usize> = m.team.iter().copied().filter(|a| prev.team.contains(a)).collect();
                        let left: Vec<usize> = prev.team.iter().copied().filter(|a| !m.team.contains(a)).collect();
                        if !left.is_empty() && remaining.len() >= 2 && m.start < ticks {
                            let before = pairwise_rmse(&self.positions, &remaining, prev.start as usize, m.start as usize);
                            let after = pairwise_rmse(&self.positions, &remaining, m.start as usize, to as usize);
                            if let (Some(b), Some(a)) = (before, after) {
                                departures.push(Departure { tick: m.start, left, remaining, rmse_before: b, rmse_after: a });
                            }
                        }
                        ratios.push(self.switch_ratio(m.start));
                    }
                }
                if w > 0.0 {
                    rmse_sync = Some((sq / w).sqrt());
                }
            }
            ScenarioKind::SelfTriggered => {
                let all: Vec<usize> = (0..self.agents()).collect();
                rmse_sync = pairwise_rmse(&self.positions, &all, 0, self.positions.len());
            }
            _ => {}
        }
        let summary = SummaryMetrics {
            scenario: cfg.scenario.as_str().to_string(),
            seed: cfg.seed,
            ticks,
            rounds: self.schedules.len() as u64,
            stable: self.divergence.is_none(),
            divergence: self.divergence,
            rmse_sync,
            consensus_rounds: self.summary_extra.consensus_rounds,
            consensus_spread: self.summary_extra.consensus_spread,
            duty_cycle: duty_cycle_metric(&self.schedules, cfg.network.slots_per_round),
            distance_traveled: self.distance,
            max_abs_angle: self.max_angle,
            mode_coherent: self.coherent,
            mode_windows: windows,
            departures,
            switch_angle_ratio: ratios,
            delivery_violations: self.audit.violations as usize,
            demand_violations: self.summary_extra.demand_violations,
        };
        RunOutput { summary, trace: self.trace }
    }

    /// Worst ratio over agents of the peak |angle| in the window after
    /// `tick` to the peak before it.
    fn switch_ratio(&self, tick: u64) -> f64 {
        let s = (tick as usize).min(self.angles.len());
        let e = (s + SWITCH_WINDOW_TICKS as usize).min(self.angles.len());
        (0..self.agents())
            .map(|i| {
                let pre = self.angles[..s].iter().map(|a| a[i]).fold(0.0, f64::max);
                let post = self.angles[s..e].iter().map(|a| a[i]).fold(0.0, f64::max);
                if pre > 0.0 {
                    post / pre
                } else if post > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

fn pairs(n: usize) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

fn diag(v: &[f64]) -> Mat {
    linalg::diag(v)
}

/// The static table for an always-on scenario.
pub fn static_schedule(cfg: &ScenarioConfig) -> Result<StaticSchedule> {
    match synthesize_schedule(&cfg.flow_set(), cfg.network.slots_per_round, cfg.max_hyperperiod)? {
        ScheduleOutcome::Feasible(s) => Ok(s),
        ScheduleOutcome::Infeasible => Err(Error::Infeasible("no static schedule serves every flow within its deadline".into())),
    }
}

/// Fills the unused slots of a round with switched-off slots.
pub fn pad_schedule(s: &RoundSchedule, slots_per_round: usize) -> RoundSchedule {
    let mut out = s.clone();
    for slot in s.assignments.len()..slots_per_round {
        out.assignments.push(SlotAssignment { slot, owner: HOST, purpose: SlotPurpose::Off });
    }
    out
}

fn slot_label(s: &RoundSchedule, node: NodeId) -> Option<String> {
    s.assignments.iter().find(|a| a.owner == node).map(|a| a.purpose.as_str().to_string())
}

fn sent_seq(out: &RoundOutcome, outbox: &BTreeMap<NodeId, Message>, node: NodeId) -> Option<u64> {
    out.transmitted.contains(&node).then(|| outbox[&node].seq)
}

/// Tick-rate stabilizer of every agent.
pub fn local_gains(cfg: &ScenarioConfig, models: &[PlantModel]) -> Result<Vec<Mat>> {
    let q = diag(&cfg.controller.local_q_diag);
    let r = diag(&cfg.controller.local_r_diag);
    models.iter().map(|m| design_lqr(m, &q, &r)).collect()
}

/// Round-rate models of the agents under their local stabilizers.
pub fn round_models(cfg: &ScenarioConfig, models: &[PlantModel], local: &[Mat]) -> Result<Vec<PlantModel>> {
    models
        .iter()
        .zip(local)
        .map(|(m, k)| lift_model(&m.with_state_feedback(k)?, cfg.network.round_period))
        .collect()
}

/// Team gains for the agents listed in `team`, in that order.
pub fn team_gains(cfg: &ScenarioConfig, cl: &[PlantModel], team: &[usize]) -> Result<GainSet> {
    let models: Vec<PlantModel> = team.iter().map(|&i| cl[i].clone()).collect();
    let q = vec![diag(&cfg.controller.sync_q_diag); team.len()];
    let r = vec![diag(&cfg.controller.sync_r_diag); team.len()];
    let mut g = design_sync_lqr(&models, &q, &r, &diag(&cfg.controller.q_sync_diag), &all_pairs(team.len()))?;
    g.delta = cfg.controller.delta;
    g.m_max = cfg.controller.m_max;
    Ok(g)
}

/// Remote loop gain of each agent at the round rate.
pub fn remote_gains(cfg: &ScenarioConfig, models: &[PlantModel]) -> Result<Vec<Mat>> {
    if let Some(rows) = &cfg.controller.gain {
        let f = linalg::from_rows(rows)?;
        return Ok(vec![f; models.len()]);
    }
    let q = diag(&cfg.controller.q_diag);
    let r = diag(&cfg.controller.r_diag);
    models
        .iter()
        .map(|m| design_lqr(&lift_model(m, cfg.network.round_period)?, &q, &r))
        .collect()
}

fn run_remote(e: &mut Engine) -> Result<()> {
    let cfg = e.cfg;
    let n_agents = e.agents();
    let b = cfg.network.slots_per_round;
    let table = static_schedule(cfg)?;
    let gains = remote_gains(cfg, &e.models)?;
    let rounds: Vec<PlantModel> =
        e.models.iter().map(|m| lift_model(m, cfg.network.round_period)).collect::<Result<_>>()?;
    let (n, m) = (e.models[0].state_dim(), e.models[0].input_dim());
    let mut loops = vec![RemoteLoopState::zero(n, m); n_agents];
    let mut applied = vec![Vector::zeros(m); n_agents];
    let mut drop_rng = Rng::stream(cfg.seed, STREAM_DROP);
    let drop_p: Vec<f64> = (0..n_agents)
        .map(|a| match &cfg.artificial_drop {
            Some(d) if d.agents.contains(&a) => d.probability,
            _ => 0.0,
        })
        .collect();
    let mut last: Option<RoundOutcome> = None;

    for t in 0..cfg.duration {
        let ys = e.measure_all()?;
        let mut round_rows: Vec<(Option<String>, u8, u8, Option<u64>)> = Vec::new();
        if t % e.period == 0 {
            let r = t / e.period;
            let mut phis = Vec::with_capacity(n_agents);
            for a in 0..n_agents {
                let got = last.as_ref().and_then(|o| match o.received_from(node_of(a), HOST) {
                    Some(Message { payload: Payload::Input(v), .. }) => Some(v.rows(a * m, m).into_owned()),
                    _ => None,
                });
                let dropped = drop_rng.bernoulli(drop_p[a]);
                let phi = got.is_some() && !dropped;
                let cmd = got.unwrap_or_else(|| applied[a].clone());
                applied[a] = apply_actuation_zoh(phi, &cmd, &applied[a]);
                phis.push(phi);
            }
            let mut stacked = Vector::zeros(n_agents * m);
            for a in 0..n_agents {
                let y = last.as_ref().and_then(|o| match o.received_from(HOST, node_of(a)) {
                    Some(Message { payload: Payload::State(y), .. }) => Some(y.clone()),
                    _ => None,
                });
                loops[a] = remote_estimate(&loops[a], &rounds[a], y.as_ref());
                if y.is_some() {
                    loops[a].last_meas_round = Some(r - 1);
                }
                let u_next = remote_control_input(&loops[a], &rounds[a], &gains[a]);
                stacked.rows_mut(a * m, m).copy_from(&u_next);
                loops[a].advance(u_next);
            }
            let beacon = Beacon::steady(0, r, pad_schedule(table.round(r), b));
            let mut outbox = BTreeMap::new();
            for a in 0..n_agents {
                if let Some(msg) = e.message(node_of(a), &beacon, Payload::State(ys[a].clone()), None) {
                    outbox.insert(node_of(a), msg);
                }
            }
            if let Some(msg) = e.message(HOST, &beacon, Payload::Input(stacked), None) {
                outbox.insert(HOST, msg);
            }
            let out = e.round(&beacon, &outbox)?;
            for a in 0..n_agents {
                round_rows.push((
                    slot_label(&beacon.round_schedule, node_of(a)),
                    out.received_from(HOST, node_of(a)).is_some() as u8,
                    phis[a] as u8,
                    sent_seq(&out, &outbox, node_of(a)),
                ));
            }
            last = Some(out);
        }
        for a in 0..n_agents {
            let mut row = e.row(t, a, 0, &applied[a]);
            if let Some((slot, theta, phi, seq)) = round_rows.get(a).cloned() {
                row.slot = slot;
                row.theta = Some(theta);
                row.phi = Some(phi);
                row.seq = seq;
            }
            e.push(row);
        }
        let us = applied.clone();
        e.step_all(&us)?;
    }
    Ok(())
}

fn run_consensus(e: &mut Engine) -> Result<()> {
    let cfg = e.cfg;
    let c = &cfg.controller;
    let n_agents = e.agents();
    let b = cfg.network.slots_per_round;
    let table = static_schedule(cfg)?;
    let local = local_gains(cfg, &e.models)?;
    let (n, m) = (e.models[0].state_dim(), e.models[0].input_dim());
    let weights = c.consensus_weights.matrix(n_agents)?;
    let mut track = GainSet::from_feedback(Mat::zeros(m, n), 1, n, m)?;
    track.track_gain = c.track_gain;
    track.integrator_gain = c.integrator_gain;
    let initial: Vec<f64> = cfg.agents.iter().map(|a| a.initial_state[0]).collect();
    let mut states: Vec<ConsensusState> =
        initial.iter().map(|&p| ConsensusState::new(Vector::from_element(1, p))).collect();
    let mut held: Vec<BTreeMap<usize, Vector>> = vec![BTreeMap::new(); n_agents];
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); n_agents];
    let mut integ = vec![0.0; n_agents];
    let mut last: Option<RoundOutcome> = None;
    let reference = |p: f64| {
        let mut r = Vector::zeros(n);
        r[0] = p;
        r
    };

    for t in 0..cfg.duration {
        let ys = e.measure_all()?;
        let mut round_rows = Vec::new();
        if t % e.period == 0 {
            let r = t / e.period;
            if let Some(o) = &last {
                for i in 0..n_agents {
                    for msg in &o.inboxes[&node_of(i)] {
                        if let Payload::Desired(v) = &msg.payload {
                            held[i].insert(msg.sender as usize - 1, v.clone());
                        }
                    }
                }
            }
            if r >= 1 {
                for i in 0..n_agents {
                    let row: Vec<f64> = weights.row(i).iter().copied().collect();
                    states[i] = consensus_update(&states[i], &held[i], &row, i);
                }
            }
            for i in 0..n_agents {
                history[i].push(states[i].x_des[0]);
                if !states[i].agreed && agreement_detector(&[&history[i]], c.agreement_tol, c.agreement_rounds) {
                    states[i].agree(r);
                }
            }
            let lo = states.iter().map(|s| s.x_des[0]).fold(f64::INFINITY, f64::min);
            let hi = states.iter().map(|s| s.x_des[0]).fold(f64::NEG_INFINITY, f64::max);
            e.summary_extra.consensus_spread.push(hi - lo);
            if e.summary_extra.consensus_rounds.is_none() && states.iter().all(|s| s.agreed) {
                let k = states.iter().filter_map(|s| s.agree_round).max().unwrap_or(0);
                e.summary_extra.consensus_rounds = Some(k.saturating_sub(c.agreement_rounds as u64));
            }
            let beacon = Beacon::steady(0, r, pad_schedule(table.round(r), b));
            let mut outbox = BTreeMap::new();
            for i in 0..n_agents {
                if let Some(msg) = e.message(node_of(i), &beacon, Payload::Desired(states[i].x_des.clone()), None) {
                    outbox.insert(node_of(i), msg);
                }
            }
            let out = e.round(&beacon, &outbox)?;
            for i in 0..n_agents {
                round_rows.push((slot_label(&beacon.round_schedule, node_of(i)), sent_seq(&out, &outbox, node_of(i))));
            }
            last = Some(out);
        }
        let mut us = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let u = if states[i].agreed {
                let target = states[i].x_star.as_ref().map_or(initial[i], |x| x[0]);
                let (u_track, next) = consensus_track_input(ys[i][0], &states[i], &track, integ[i])?;
                integ[i] = next;
                &local[i] * (&ys[i] - reference(target)) + u_track
            } else {
                &local[i] * (&ys[i] - reference(initial[i]))
            };
            let mut row = e.row(t, i, 0, &u);
            row.x_des = Some(states[i].x_des[0]);
            if let Some((slot, seq)) = round_rows.get(i).cloned() {
                row.slot = slot;
                row.seq = seq;
            }
            e.push(row);
            us.push(u);
        }
        e.step_all(&us)?;
    }
    Ok(())
}

/// Peer estimates as seen by an agent; peers never heard from are assumed
/// to sit where the agent itself is.
fn peer_view(
    held: &BTreeMap<usize, Vector>,
    team: &[usize],
    me: usize,
    own: &Vector,
    m: usize,
) -> BTreeMap<usize, PeerEstimate> {
    team.iter()
        .enumerate()
        .filter(|(_, &j)| j != me)
        .map(|(idx, &j)| {
            let x = held.get(&j).cloned().unwrap_or_else(|| own.clone());
            (idx, PeerEstimate { xhat_j: x, u12_last: Vector::zeros(m), last_rx_round: None })
        })
        .collect()
}

fn absorb_states(last: &Option<RoundOutcome>, held: &mut [BTreeMap<usize, Vector>]) {
    if let Some(o) = last {
        for (i, h) in held.iter_mut().enumerate() {
            for msg in &o.inboxes[&node_of(i)] {
                if let Payload::State(y) = &msg.payload {
                    if msg.sender != HOST {
                        h.insert(msg.sender as usize - 1, y.clone());
                    }
                }
            }
        }
    }
}

fn run_sync(e: &mut Engine) -> Result<()> {
    let cfg = e.cfg;
    let n_agents = e.agents();
    let b = cfg.network.slots_per_round;
    let table = static_schedule(cfg)?;
    let local = local_gains(cfg, &e.models)?;
    let cl = round_models(cfg, &e.models, &local)?;
    let m = e.models[0].input_dim();
    let plan: Vec<ModeConfig> = cfg.mode_plan();
    let mut mode_gains: BTreeMap<u32, (Vec<usize>, Option<GainSet>)> = BTreeMap::new();
    for mode in &plan {
        let g = if mode.team.len() >= 2 { Some(team_gains(cfg, &cl, &mode.team)?) } else { None };
        mode_gains.insert(mode.id, (mode.team.clone(), g));
    }
    let countdown = cfg.mode_countdown as u64;
    let mut beacon = Beacon::steady(plan[0].id, 0, RoundSchedule::default());
    let mut held: Vec<BTreeMap<usize, Vector>> = vec![BTreeMap::new(); n_agents];
    let mut u_sync = vec![Vector::zeros(m); n_agents];
    let mut last: Option<RoundOutcome> = None;

    for t in 0..cfg.duration {
        let ys = e.measure_all()?;
        let mut round_rows = Vec::new();
        if t % e.period == 0 {
            let r = t / e.period;
            if r > 0 {
                beacon = mode_change_tick(&beacon);
            }
            for mode in plan.iter().skip(1) {
                if mode.start / e.period == r + countdown {
                    beacon.next_mode = mode.id;
                    beacon.countdown = countdown as u32;
                }
            }
            beacon.round_index = r;
            beacon.round_schedule = pad_schedule(table.round(r), b);
            absorb_states(&last, &mut held);
            let mut outbox = BTreeMap::new();
            for i in 0..n_agents {
                if let Some(msg) = e.message(node_of(i), &beacon, Payload::State(ys[i].clone()), None) {
                    outbox.insert(node_of(i), msg);
                }
            }
            let out = e.round(&beacon, &outbox)?;
            for i in 0..n_agents {
                let st = &out.node_states[&node_of(i)];
                let (team, gains) = &mode_gains[&st.known_mode];
                u_sync[i] = match (st.synced, gains, team.iter().position(|&a| a == i)) {
                    (true, Some(g), Some(idx)) => {
                        let peers = peer_view(&held[i], team, i, &ys[i], m);
                        distributed_input(idx, &ys[i], &peers, g)?
                    }
                    _ => Vector::zeros(m),
                };
                round_rows.push((
                    slot_label(&beacon.round_schedule, node_of(i)),
                    sent_seq(&out, &outbox, node_of(i)),
                    out.participated(node_of(i)) as u8,
                ));
            }
            last = Some(out);
        }
        let mut us = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let u = &local[i] * &ys[i] + &u_sync[i];
            let mode = e.node_states[&node_of(i)].known_mode;
            let mut row = e.row(t, i, mode, &u);
            if let Some((slot, seq, heard)) = round_rows.get(i).cloned() {
                row.slot = slot;
                row.seq = seq;
                row.phi = Some(heard);
            }
            e.push(row);
            us.push(u);
        }
        e.step_all(&us)?;
    }
    Ok(())
}

fn run_self_triggered(e: &mut Engine) -> Result<()> {
    let cfg = e.cfg;
    let c = &cfg.controller;
    let n_agents = e.agents();
    let b = cfg.network.slots_per_round;
    let local = local_gains(cfg, &e.models)?;
    let cl = round_models(cfg, &e.models, &local)?;
    let m = e.models[0].input_dim();
    let team: Vec<usize> = (0..n_agents).collect();
    let gains = team_gains(cfg, &cl, &team)?;
    let predictors: Vec<TriggerPredictor> = (0..n_agents)
        .map(|j| {
            let phi = cl[j].a() + cl[j].b() * gains.block(j, j);
            let model = PlantModel::new(phi, cl[j].b().clone(), cl[j].sigma_v().clone(), cl[j].sigma_w().clone(), 1)?;
            Ok(TriggerPredictor::new(&model, outgoing_gain(&gains, j), c.m_max))
        })
        .collect::<Result<_>>()?;
    let nodes: Vec<NodeId> = team.iter().map(|&i| node_of(i)).collect();
    let mut manager = ManagerState::new(&nodes, HOST, cfg.manager_policy, c.m_max, 0);
    let mut demand_audit = DemandAudit::new(&nodes, 0);
    let mut granted_last: BTreeSet<NodeId> = BTreeSet::new();
    let mut held: Vec<BTreeMap<usize, Vector>> = vec![BTreeMap::new(); n_agents];
    let mut u_sync = vec![Vector::zeros(m); n_agents];
    let mut last: Option<RoundOutcome> = None;

    for t in 0..cfg.duration {
        let ys = e.measure_all()?;
        let mut round_rows = Vec::new();
        if t % e.period == 0 {
            let r = t / e.period;
            let mut demands = Vec::new();
            let mut losses = BTreeSet::new();
            if let Some(o) = &last {
                for &node in &granted_last {
                    match o.received_from(HOST, node) {
                        Some(msg) => demands.push(Demand { agent: node, next_needed: msg.demand.unwrap_or(1) }),
                        None => {
                            losses.insert(node);
                        }
                    }
                }
            }
            let (schedule, next) = manager_allocate(&manager, &demands, &losses, b, r)?;
            manager = next;
            absorb_states(&last, &mut held);
            let beacon = Beacon::steady(0, r, schedule);
            let mut outbox = BTreeMap::new();
            let mut declared = vec![None; n_agents];
            for j in 0..n_agents {
                let granted = beacon
                    .round_schedule
                    .slot_of(node_of(j))
                    .is_some_and(|s| s.purpose == SlotPurpose::Control);
                if !granted {
                    continue;
                }
                let peers = peer_view(&held[j], &team, j, &ys[j], m);
                let held_input = distributed_input(j, &Vector::zeros(ys[j].len()), &peers, &gains)?;
                let horizon = predictors[j].horizon(&ys[j], &held_input, c.delta, c.m_max);
                if let Some(msg) = e.message(node_of(j), &beacon, Payload::State(ys[j].clone()), Some(horizon)) {
                    outbox.insert(node_of(j), msg);
                    declared[j] = Some(horizon);
                }
            }
            let out = e.round(&beacon, &outbox)?;
            let delivered: BTreeMap<NodeId, u32> = outbox
                .iter()
                .filter(|(&node, _)| out.received_from(HOST, node).is_some())
                .map(|(&node, msg)| (node, msg.demand.unwrap_or(1)))
                .collect();
            demand_audit.record(r, &beacon.round_schedule, &delivered);
            granted_last = beacon
                .round_schedule
                .assignments
                .iter()
                .filter(|a| a.purpose == SlotPurpose::Control)
                .map(|a| a.owner)
                .collect();
            for i in 0..n_agents {
                let peers = peer_view(&held[i], &team, i, &ys[i], m);
                u_sync[i] = distributed_input(i, &ys[i], &peers, &gains)?;
                let sent = sent_seq(&out, &outbox, node_of(i));
                round_rows.push((
                    slot_label(&beacon.round_schedule, node_of(i)),
                    sent,
                    delivered.contains_key(&node_of(i)) as u8,
                    sent.and(declared[i]),
                ));
            }
            last = Some(out);
        }
        let mut us = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let u = &local[i] * &ys[i] + &u_sync[i];
            let mut row = e.row(t, i, 0, &u);
            if let Some((slot, seq, theta, demand)) = round_rows.get(i).cloned() {
                row.slot = slot;
                row.seq = seq;
                row.theta = Some(theta);
                row.demand = demand;
            }
            e.push(row);
            us.push(u);
        }
        e.step_all(&us)?;
    }
    e.summary_extra.demand_violations = demand_audit.violations.len();
    Ok(())
}
