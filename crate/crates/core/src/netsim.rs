//! Round-based multi-hop network abstraction.
//!
//! Every round opens with a beacon flood from the host followed by one flood
//! per scheduled data slot. A flood reaches each other node independently
//! with probability `1 - loss_prob`; hop count does not matter. Messages
//! delivered in round `r` are consumed at the start of round `r + 1`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::rng::Rng;

pub type NodeId = u32;
pub type ModeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossModel {
    /// One Bernoulli trial per (flood, receiver).
    #[default]
    PerReceiver,
    /// One Bernoulli trial per flood, shared by all receivers.
    PerFlood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub node_ids: Vec<NodeId>,
    pub host_id: NodeId,
    pub loss_prob: f64,
    /// Overrides `loss_prob` for beacon floods.
    pub beacon_loss_prob: Option<f64>,
    pub slots_per_round: usize,
    /// Round period in ticks.
    pub round_period: u32,
    pub loss_model: LossModel,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.node_ids.contains(&self.host_id) {
            problems.push(format!("host {} is not a network node", self.host_id));
        }
        let mut ids = self.node_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.node_ids.len() {
            problems.push("node ids are not unique".to_string());
        }
        for (name, p) in [("loss_prob", Some(self.loss_prob)), ("beacon_loss_prob", self.beacon_loss_prob)] {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(&p) {
                    problems.push(format!("{name} = {p} is outside [0, 1]"));
                }
            }
        }
        if self.slots_per_round == 0 {
            problems.push("slots_per_round must be positive".to_string());
        }
        if self.round_period == 0 {
            problems.push("round_period must be at least one tick".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn beacon_loss(&self) -> f64 {
        self.beacon_loss_prob.unwrap_or(self.loss_prob)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    State(Vector),
    Input(Vector),
    Desired(Vector),
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: NodeId,
    pub round_index: u64,
    pub slot_index: usize,
    pub payload: Payload,
    /// Rounds until the sender needs its next slot.
    pub demand: Option<u32>,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotPurpose {
    Control,
    Other,
    Off,
}

impl SlotPurpose {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotPurpose::Control => "control",
            SlotPurpose::Other => "other",
            SlotPurpose::Off => "off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAssignment {
    pub slot: usize,
    pub owner: NodeId,
    pub purpose: SlotPurpose,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub assignments: Vec<SlotAssignment>,
}

impl RoundSchedule {
    pub fn validate(&self, slots_per_round: usize) -> Result<()> {
        if self.assignments.len() > slots_per_round {
            return Err(Error::Protocol(format!(
                "schedule lists {} slots but a round has {slots_per_round}",
                self.assignments.len()
            )));
        }
        let mut seen = vec![false; slots_per_round];
        for a in &self.assignments {
            if a.slot >= slots_per_round || std::mem::replace(&mut seen[a.slot], true) {
                return Err(Error::Protocol(format!("slot {} is out of range or assigned twice", a.slot)));
            }
        }
        Ok(())
    }

    /// The active (non-off) slot owned by `node`, if any.
    pub fn slot_of(&self, node: NodeId) -> Option<&SlotAssignment> {
        self.assignments
            .iter()
            .find(|a| a.owner == node && a.purpose != SlotPurpose::Off)
    }

    pub fn count(&self, purpose: SlotPurpose) -> usize {
        self.assignments.iter().filter(|a| a.purpose == purpose).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Beacon {
    pub current_mode: ModeId,
    pub next_mode: ModeId,
    /// Rounds until `next_mode` takes over.
    pub countdown: u32,
    pub round_index: u64,
    pub round_schedule: RoundSchedule,
}

impl Beacon {
    pub fn steady(mode: ModeId, round_index: u64, round_schedule: RoundSchedule) -> Self {
        Self { current_mode: mode, next_mode: mode, countdown: 0, round_index, round_schedule }
    }

    pub fn switch_window_active(&self) -> bool {
        self.countdown > 0
    }
}

/// Beacon content for the following round.
pub fn mode_change_tick(beacon: &Beacon) -> Beacon {
    let mut next = beacon.clone();
    next.round_index += 1;
    if beacon.countdown > 1 {
        next.countdown -= 1;
    } else {
        next.current_mode = beacon.next_mode;
        next.countdown = 0;
    }
    next
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeNetState {
    pub synced: bool,
    pub known_mode: ModeId,
    pub missed_beacons: u32,
    /// Announced switch: target mode and rounds remaining as seen locally.
    pub pending: Option<(ModeId, u32)>,
}

impl NodeNetState {
    pub fn new(mode: ModeId) -> Self {
        Self { synced: true, known_mode: mode, missed_beacons: 0, pending: None }
    }
}

/// Mode bookkeeping of one node for one round.
///
/// A node that has heard the countdown of a pending switch follows it
/// locally through later beacon losses. A node that misses a beacon while a
/// switch window is open and has no countdown to follow can no longer be sure
/// of the mode and drops out until it hears a beacon again.
pub fn node_resync_policy(
    state: &NodeNetState,
    beacon_received: Option<&Beacon>,
    switch_window_active: bool,
) -> NodeNetState {
    let mut next = state.clone();
    match beacon_received {
        Some(b) => {
            next.synced = true;
            next.known_mode = b.current_mode;
            next.pending = (b.countdown > 0).then_some((b.next_mode, b.countdown));
            next.missed_beacons = 0;
        }
        None => {
            next.missed_beacons = next.missed_beacons.saturating_add(1);
            match state.pending {
                Some((mode, left)) if left <= 1 => {
                    next.known_mode = mode;
                    next.pending = None;
                }
                Some((mode, left)) => next.pending = Some((mode, left - 1)),
                None if switch_window_active => next.synced = false,
                None => {}
            }
        }
    }
    next
}

#[derive(Debug, Clone, Default)]
pub struct RoundOutcome {
    /// Messages each node received in this round, in slot order.
    pub inboxes: BTreeMap<NodeId, Vec<Message>>,
    pub node_states: BTreeMap<NodeId, NodeNetState>,
    /// Whether each node heard this round's beacon.
    pub beacon_received: BTreeMap<NodeId, bool>,
    /// Senders whose flood actually went out.
    pub transmitted: Vec<NodeId>,
}

impl RoundOutcome {
    pub fn participated(&self, node: NodeId) -> bool {
        self.beacon_received.get(&node).copied().unwrap_or(false)
    }

    pub fn received_from(&self, receiver: NodeId, sender: NodeId) -> Option<&Message> {
        self.inboxes.get(&receiver)?.iter().find(|m| m.sender == sender)
    }
}

/// Floods the beacon and every scheduled data slot of one round.
///
/// Nodes that miss the beacon do not know the schedule and sit the round
/// out. Loss draws are made for every (flood, receiver) pair in a fixed order
/// whether or not the receiver participates, so the loss pattern depends on
/// the seed alone.
pub fn run_round(
    cfg: &NetworkConfig,
    beacon: &Beacon,
    outbox: &BTreeMap<NodeId, Message>,
    node_states: &BTreeMap<NodeId, NodeNetState>,
    rng: &mut Rng,
) -> Result<RoundOutcome> {
    beacon.round_schedule.validate(cfg.slots_per_round)?;
    for (&node, msg) in outbox {
        let state = node_states
            .get(&node)
            .ok_or_else(|| Error::Protocol(format!("node {node} has no network state")))?;
        if !state.synced {
            return Err(Error::Protocol(format!("unsynced node {node} tried to transmit")));
        }
        let slot = beacon.round_schedule.slot_of(node).ok_or_else(|| {
            Error::Protocol(format!("node {node} transmits in round {} without owning a slot", beacon.round_index))
        })?;
        if msg.sender != node || msg.slot_index != slot.slot || msg.round_index != beacon.round_index {
            return Err(Error::Protocol(format!(
                "message of node {node} is stamped sender {} slot {} round {}, expected slot {} round {}",
                msg.sender, msg.slot_index, msg.round_index, slot.slot, beacon.round_index
            )));
        }
    }

    let mut nodes = cfg.node_ids.clone();
    nodes.sort_unstable();
    let window = beacon.switch_window_active();
    let beacon_loss = cfg.beacon_loss();

    let mut out = RoundOutcome::default();
    let flood_shared = (cfg.loss_model == LossModel::PerFlood).then(|| !rng.bernoulli(beacon_loss));
    for &node in &nodes {
        let heard = if node == cfg.host_id {
            // the host initiates the flood; still consume the draw to keep streams aligned
            if flood_shared.is_none() {
                rng.uniform();
            }
            true
        } else {
            match flood_shared {
                Some(shared) => shared,
                None => !rng.bernoulli(beacon_loss),
            }
        };
        let prev = node_states.get(&node).cloned().unwrap_or_else(|| NodeNetState::new(beacon.current_mode));
        let next = node_resync_policy(&prev, heard.then_some(beacon), window);
        out.beacon_received.insert(node, heard);
        out.node_states.insert(node, next);
        out.inboxes.insert(node, Vec::new());
    }

    let mut slots = beacon.round_schedule.assignments.clone();
    slots.sort_by_key(|a| a.slot);
    for slot in slots.iter().filter(|a| a.purpose != SlotPurpose::Off) {
        let shared = (cfg.loss_model == LossModel::PerFlood).then(|| !rng.bernoulli(cfg.loss_prob));
        let mut draws = BTreeMap::new();
        for &r in nodes.iter().filter(|&&r| r != slot.owner) {
            let ok = match shared {
                Some(s) => s,
                None => !rng.bernoulli(cfg.loss_prob),
            };
            draws.insert(r, ok);
        }
        let Some(msg) = outbox.get(&slot.owner) else { continue };
        if !out.participated(slot.owner) {
            continue;
        }
        out.transmitted.push(slot.owner);
        for (&r, &ok) in &draws {
            if ok && out.participated(r) {
                out.inboxes.get_mut(&r).expect("inbox exists").push(msg.clone());
            }
        }
    }
    Ok(out)
}

/// True when every synced node agrees on the current mode.
pub fn mode_coherent(states: &BTreeMap<NodeId, NodeNetState>) -> bool {
    let mut modes = states.values().filter(|s| s.synced).map(|s| s.known_mode);
    match modes.next() {
        Some(first) => modes.all(|m| m == first),
        None => true,
    }
}

/// Checks that every (sender, receiver) stream carries strictly increasing
/// sequence numbers.
#[derive(Debug, Clone, Default)]
pub struct DeliveryAudit {
    last: BTreeMap<(NodeId, NodeId), u64>,
    pub deliveries: u64,
    pub violations: u64,
}

impl DeliveryAudit {
    pub fn record(&mut self, receiver: NodeId, msg: &Message) {
        self.deliveries += 1;
        let key = (msg.sender, receiver);
        if let Some(&prev) = self.last.get(&key) {
            if msg.seq <= prev {
                self.violations += 1;
            }
        }
        self.last.insert(key, msg.seq);
    }

    pub fn record_round(&mut self, outcome: &RoundOutcome) {
        for (&r, msgs) in &outcome.inboxes {
            for m in msgs {
                self.record(r, m);
            }
        }
    }
}
