//! Slot scheduling: offline synthesis of periodic tables and the online
//! manager that turns control demands into per-round schedules.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{NodeId, RoundSchedule, SlotAssignment, SlotPurpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flow {
    pub id: u32,
    pub owner: NodeId,
    /// Rounds between releases.
    pub period: u32,
    /// Rounds after release within which the message must go out.
    pub deadline: u32,
    #[serde(default = "one")]
    pub slots_needed: u32,
}

fn one() -> u32 {
    1
}

impl Flow {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.period == 0 {
            problems.push(format!("flow {}: period must be positive", self.id));
        }
        if self.deadline == 0 || self.deadline > self.period {
            problems.push(format!("flow {}: deadline must lie in 1..=period", self.id));
        }
        if self.slots_needed != 1 {
            problems.push(format!("flow {}: only single-slot flows are supported", self.id));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StaticSchedule {
    pub hyperperiod: u32,
    /// Schedule of each round within the hyperperiod.
    pub table: Vec<RoundSchedule>,
    /// Flow id served by each control slot, parallel to `table`.
    #[serde(skip)]
    pub flow_of_slot: Vec<BTreeMap<usize, u32>>,
}

impl StaticSchedule {
    pub fn round(&self, round_index: u64) -> &RoundSchedule {
        &self.table[(round_index % self.hyperperiod as u64) as usize]
    }

    /// Checks every table invariant against the flows it was built for.
    pub fn verify(&self, flows: &[Flow], slots_per_round: usize) -> Result<()> {
        if self.table.len() != self.hyperperiod as usize {
            return Err(Error::Contract("table length differs from hyperperiod".into()));
        }
        for round in &self.table {
            round.validate(slots_per_round)?;
        }
        for f in flows {
            for k in 0..self.hyperperiod / f.period {
                let start = k * f.period;
                let hits: usize = (start..start + f.period)
                    .map(|r| self.flow_of_slot[r as usize].values().filter(|&&id| id == f.id).count())
                    .sum();
                let in_window = (start..start + f.deadline)
                    .any(|r| self.flow_of_slot[r as usize].values().any(|&id| id == f.id));
                if hits != 1 || !in_window {
                    return Err(Error::Contract(format!(
                        "flow {} instance {k} served {hits} times, within deadline: {in_window}",
                        f.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleOutcome {
    Feasible(StaticSchedule),
    Infeasible,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Least common multiple of the flow periods, or `None` past `cap`.
pub fn hyperperiod(flows: &[Flow], cap: u32) -> Option<u32> {
    let mut h: u64 = 1;
    for f in flows {
        h = h / gcd(h, f.period as u64) * f.period as u64;
        if h > cap as u64 {
            return None;
        }
    }
    Some(h as u32)
}

struct Instance {
    flow: usize,
    release: u32,
    deadline: u32,
}

/// Assigns every flow instance of one hyperperiod to a round inside its
/// deadline window and to the lowest free slot of that round.
///
/// Instances are placed in order of flow id, then release; each tries its
/// rounds earliest first and the search backtracks on dead ends.
pub fn synthesize_schedule(flows: &[Flow], slots_per_round: usize, max_hyperperiod: u32) -> Result<ScheduleOutcome> {
    if flows.is_empty() {
        return Err(Error::Config("no flows to schedule".into()));
    }
    let mut problems = Vec::new();
    for f in flows {
        if let Err(Error::Validation(p)) = f.validate() {
            problems.extend(p);
        }
    }
    let ids: BTreeSet<u32> = flows.iter().map(|f| f.id).collect();
    if ids.len() != flows.len() {
        problems.push("flow ids are not unique".into());
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let h = hyperperiod(flows, max_hyperperiod).ok_or_else(|| {
        Error::Config(format!("hyperperiod of the flow periods exceeds {max_hyperperiod} rounds"))
    })?;

    let mut order: Vec<usize> = (0..flows.len()).collect();
    order.sort_by_key(|&i| flows[i].id);
    let instances: Vec<Instance> = order
        .iter()
        .flat_map(|&i| {
            let f = flows[i];
            (0..h / f.period).map(move |k| Instance { flow: i, release: k * f.period, deadline: f.deadline })
        })
        .collect();

    let mut load = vec![0usize; h as usize];
    let mut choice = vec![0u32; instances.len()];
    if !place(&instances, &mut load, &mut choice, slots_per_round) {
        return Ok(ScheduleOutcome::Infeasible);
    }

    let mut table = vec![RoundSchedule::default(); h as usize];
    let mut flow_of_slot = vec![BTreeMap::new(); h as usize];
    for (inst, &round) in instances.iter().zip(&choice) {
        let f = flows[inst.flow];
        let r = round as usize;
        let slot = table[r].assignments.len();
        table[r].assignments.push(SlotAssignment { slot, owner: f.owner, purpose: SlotPurpose::Control });
        flow_of_slot[r].insert(slot, f.id);
    }
    Ok(ScheduleOutcome::Feasible(StaticSchedule { hyperperiod: h, table, flow_of_slot }))
}

/// Depth-first search over instance placements. A tentative placement is
/// kept only if the instances still to be placed can be completed, which is
/// decided exactly by earliest-deadline-first on the residual capacities;
/// the search therefore never has to undo a kept placement and returns the
/// first feasible assignment in search order.
fn place(instances: &[Instance], load: &mut [usize], choice: &mut [u32], cap: usize) -> bool {
    if !edf_completes(instances, load, cap) {
        return false;
    }
    for (idx, inst) in instances.iter().enumerate() {
        let mut placed = false;
        for r in inst.release..inst.release + inst.deadline {
            if load[r as usize] >= cap {
                continue;
            }
            load[r as usize] += 1;
            if edf_completes(&instances[idx + 1..], load, cap) {
                choice[idx] = r;
                placed = true;
                break;
            }
            load[r as usize] -= 1;
        }
        if !placed {
            return false;
        }
    }
    true
}

/// Whether unit instances fit into the rounds left free by `load`.
fn edf_completes(instances: &[Instance], load: &[usize], cap: usize) -> bool {
    let mut by_release: Vec<(u32, u32)> = instances.iter().map(|i| (i.release, i.release + i.deadline)).collect();
    by_release.sort_unstable();
    let mut next = 0;
    let mut ready = std::collections::BinaryHeap::new();
    for (r, &used) in load.iter().enumerate() {
        let r = r as u32;
        while next < by_release.len() && by_release[next].0 == r {
            ready.push(std::cmp::Reverse(by_release[next].1));
            next += 1;
        }
        for _ in 0..cap.saturating_sub(used) {
            if ready.pop().is_none() {
                break;
            }
        }
        if ready.peek().is_some_and(|std::cmp::Reverse(d)| *d <= r + 1) {
            return false;
        }
    }
    ready.is_empty() && next == by_release.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Demand {
    pub agent: NodeId,
    /// Rounds until the agent must transmit again.
    pub next_needed: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManagerPolicy {
    /// Free slots are switched off.
    #[default]
    EnergySaving,
    /// One free slot goes to other traffic, the rest are switched off.
    ReallocateOneThenSleep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManagerState {
    /// Round in which each agent is next due.
    pub pending: BTreeMap<NodeId, u64>,
    pub lost_last_round: BTreeSet<NodeId>,
    pub policy: ManagerPolicy,
    pub host: NodeId,
    pub m_max: u32,
}

impl ManagerState {
    /// Every agent due in `first_round`.
    pub fn new(agents: &[NodeId], host: NodeId, policy: ManagerPolicy, m_max: u32, first_round: u64) -> Self {
        Self {
            pending: agents.iter().map(|&a| (a, first_round)).collect(),
            lost_last_round: BTreeSet::new(),
            policy,
            host,
            m_max: m_max.max(1),
        }
    }
}

/// Schedule for `round`, given the demands heard and the scheduled messages
/// missed in the previous round.
///
/// A lost message gets a slot again right away. Demands reset the due round
/// of the agent that sent them.
pub fn manager_allocate(
    state: &ManagerState,
    received_demands: &[Demand],
    losses: &BTreeSet<NodeId>,
    slots_per_round: usize,
    round: u64,
) -> Result<(RoundSchedule, ManagerState)> {
    let mut next = state.clone();
    let sent_in = round.saturating_sub(1);
    for d in received_demands {
        let entry = next
            .pending
            .get_mut(&d.agent)
            .ok_or_else(|| Error::Contract(format!("demand from unknown agent {}", d.agent)))?;
        let m = d.next_needed.clamp(1, state.m_max);
        *entry = sent_in + m as u64;
    }
    for a in losses {
        if !next.pending.contains_key(a) {
            return Err(Error::Contract(format!("loss reported for unknown agent {a}")));
        }
    }
    next.lost_last_round = losses.clone();

    let control: BTreeSet<NodeId> = next
        .pending
        .iter()
        .filter(|(_, &due)| due <= round)
        .map(|(&a, _)| a)
        .chain(losses.iter().copied())
        .collect();
    if control.len() > slots_per_round {
        return Err(Error::Overload { demand: control.len(), capacity: slots_per_round });
    }
    let mut assignments: Vec<SlotAssignment> = control
        .iter()
        .enumerate()
        .map(|(slot, &owner)| SlotAssignment { slot, owner, purpose: SlotPurpose::Control })
        .collect();
    for slot in assignments.len()..slots_per_round {
        let purpose = match state.policy {
            ManagerPolicy::ReallocateOneThenSleep if slot == control.len() => SlotPurpose::Other,
            _ => SlotPurpose::Off,
        };
        assignments.push(SlotAssignment { slot, owner: state.host, purpose });
    }
    Ok((RoundSchedule { assignments }, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DutyCycle {
    pub control: f64,
    pub other: f64,
    pub off: f64,
    /// Fraction of slots with the radio on.
    pub active: f64,
}

/// Share of slots per purpose over a window of rounds. Slots a schedule
/// leaves unlisted count as off.
pub fn duty_cycle_metric(rounds: &[RoundSchedule], slots_per_round: usize) -> DutyCycle {
    let total = (rounds.len() * slots_per_round) as f64;
    if total == 0.0 {
        return DutyCycle::default();
    }
    let control = rounds.iter().map(|r| r.count(SlotPurpose::Control)).sum::<usize>() as f64 / total;
    let other = rounds.iter().map(|r| r.count(SlotPurpose::Other)).sum::<usize>() as f64 / total;
    DutyCycle { control, other, off: 1.0 - control - other, active: control + other }
}

/// Post-hoc check that the manager honored every declared demand.
///
/// After a delivered message declaring `M`, the agent must hold a control
/// slot in every round from `M` rounds later until one is used again.
#[derive(Debug, Clone, Default)]
pub struct DemandAudit {
    due: BTreeMap<NodeId, u64>,
    pub violations: Vec<String>,
}

impl DemandAudit {
    pub fn new(agents: &[NodeId], first_round: u64) -> Self {
        Self { due: agents.iter().map(|&a| (a, first_round)).collect(), violations: Vec::new() }
    }

    /// `delivered` maps each agent whose message reached the host this round
    /// to the demand it declared.
    pub fn record(&mut self, round: u64, schedule: &RoundSchedule, delivered: &BTreeMap<NodeId, u32>) {
        for (&agent, due) in self.due.iter_mut() {
            let granted = schedule
                .slot_of(agent)
                .is_some_and(|s| s.purpose == SlotPurpose::Control);
            if round >= *due && !granted {
                self.violations.push(format!("agent {agent} due since round {due} but not granted in round {round}"));
            }
            if let Some(&m) = delivered.get(&agent) {
                if !granted {
                    self.violations.push(format!("agent {agent} delivered in round {round} without a slot"));
                }
                *due = round + m.max(1) as u64;
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(id: u32, period: u32, deadline: u32) -> Flow {
        Flow { id, owner: id, period, deadline, slots_needed: 1 }
    }

    #[test]
    fn single_flow_every_round() {
        let out = synthesize_schedule(&[flow(0, 1, 1)], 1, 100).unwrap();
        let ScheduleOutcome::Feasible(s) = out else { panic!("infeasible") };
        assert_eq!(s.hyperperiod, 1);
        assert_eq!(s.round(7).assignments, vec![SlotAssignment { slot: 0, owner: 0, purpose: SlotPurpose::Control }]);
    }

    #[test]
    fn pigeonhole_is_infeasible() {
        let flows: Vec<Flow> = (0..6).map(|i| flow(i, 1, 1)).collect();
        assert_eq!(synthesize_schedule(&flows, 5, 100).unwrap(), ScheduleOutcome::Infeasible);
    }

    #[test]
    fn periods_two_and_four_share_one_slot() {
        let flows = [flow(0, 2, 2), flow(1, 4, 4)];
        let ScheduleOutcome::Feasible(s) = synthesize_schedule(&flows, 1, 100).unwrap() else { panic!() };
        assert_eq!(s.hyperperiod, 4);
        s.verify(&flows, 1).unwrap();
    }

    #[test]
    fn backtracking_finds_what_greedy_misses() {
        // flow 0 would greedily take round 0, leaving flow 1 nowhere
        let flows = [flow(0, 2, 2), flow(1, 2, 1)];
        let ScheduleOutcome::Feasible(s) = synthesize_schedule(&flows, 1, 100).unwrap() else { panic!() };
        s.verify(&flows, 1).unwrap();
        assert_eq!(s.flow_of_slot[0][&0], 1);
    }

    #[test]
    fn oversized_hyperperiod_is_config_error() {
        let flows = [flow(0, 97, 1), flow(1, 89, 1)];
        assert!(matches!(synthesize_schedule(&flows, 1, 1000), Err(Error::Config(_))));
        let bad = [flow(0, 2, 3)];
        assert!(matches!(synthesize_schedule(&bad, 1, 10), Err(Error::Validation(_))));
    }

    fn manager(n: u32, policy: ManagerPolicy) -> ManagerState {
        ManagerState::new(&(1..=n).collect::<Vec<_>>(), 0, policy, 20, 0)
    }

    #[test]
    fn all_due_fills_the_round() {
        let (s, _) = manager_allocate(&manager(5, ManagerPolicy::ReallocateOneThenSleep), &[], &BTreeSet::new(), 5, 0).unwrap();
        assert_eq!((s.count(SlotPurpose::Control), s.count(SlotPurpose::Other), s.count(SlotPurpose::Off)), (5, 0, 0));
    }

    #[test]
    fn two_due_with_one_other_slot() {
        let mut st = manager(5, ManagerPolicy::ReallocateOneThenSleep);
        for a in 3..=5 {
            st.pending.insert(a, 10);
        }
        let (s, _) = manager_allocate(&st, &[], &BTreeSet::new(), 5, 1).unwrap();
        assert_eq!((s.count(SlotPurpose::Control), s.count(SlotPurpose::Other), s.count(SlotPurpose::Off)), (2, 1, 2));
        let (s, _) = manager_allocate(&st.clone_with(ManagerPolicy::EnergySaving), &[], &BTreeSet::new(), 5, 1).unwrap();
        assert_eq!((s.count(SlotPurpose::Control), s.count(SlotPurpose::Other), s.count(SlotPurpose::Off)), (2, 0, 3));
    }

    impl ManagerState {
        fn clone_with(&self, policy: ManagerPolicy) -> Self {
            Self { policy, ..self.clone() }
        }
    }

    #[test]
    fn lost_message_is_reallocated() {
        let mut st = manager(2, ManagerPolicy::EnergySaving);
        st.pending.insert(1, 50);
        st.pending.insert(2, 50);
        let lost = BTreeSet::from([2]);
        let (s, next) = manager_allocate(&st, &[], &lost, 5, 7).unwrap();
        assert!(s.slot_of(2).is_some());
        assert!(s.slot_of(1).is_none());
        assert_eq!(next.lost_last_round, lost);
    }

    #[test]
    fn demand_sets_due_round_and_overload_errors() {
        let st = manager(3, ManagerPolicy::EnergySaving);
        let demands = [Demand { agent: 1, next_needed: 3 }, Demand { agent: 2, next_needed: 1 }, Demand { agent: 3, next_needed: 2 }];
        let (s, next) = manager_allocate(&st, &demands, &BTreeSet::new(), 3, 1).unwrap();
        assert_eq!(next.pending[&1], 3);
        assert_eq!(s.count(SlotPurpose::Control), 1);
        assert!(s.slot_of(2).is_some());
        let err = manager_allocate(&manager(4, ManagerPolicy::EnergySaving), &[], &BTreeSet::new(), 3, 0).unwrap_err();
        assert!(matches!(err, Error::Overload { demand: 4, capacity: 3 }));
    }

    #[test]
    fn duty_cycle_fractions() {
        let full = RoundSchedule {
            assignments: (0..5).map(|slot| SlotAssignment { slot, owner: 1, purpose: SlotPurpose::Control }).collect(),
        };
        let off = RoundSchedule {
            assignments: (0..5).map(|slot| SlotAssignment { slot, owner: 0, purpose: SlotPurpose::Off }).collect(),
        };
        assert_eq!(duty_cycle_metric(std::slice::from_ref(&full), 5).control, 1.0);
        let d = duty_cycle_metric(&[full.clone(), off.clone(), full, off], 5);
        assert_eq!(d.control, 0.5);
        assert_eq!(d.off, 0.5);
    }

    #[test]
    fn demand_audit_flags_missed_grant() {
        let mut audit = DemandAudit::new(&[1], 0);
        let with = RoundSchedule { assignments: vec![SlotAssignment { slot: 0, owner: 1, purpose: SlotPurpose::Control }] };
        let without = RoundSchedule::default();
        audit.record(0, &with, &BTreeMap::from([(1, 2)]));
        audit.record(1, &without, &BTreeMap::new());
        assert!(audit.ok());
        audit.record(2, &without, &BTreeMap::new());
        assert!(!audit.ok());
    }
}
