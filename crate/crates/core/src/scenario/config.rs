//! Scenario configuration documents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::netsim::{LossModel, NetworkConfig, NodeId};
use crate::plant::{default_sigma_v, default_sigma_w, PlantModel, Preset};
use crate::sched::{Flow, ManagerPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Remote,
    Consensus,
    SyncModes,
    SelfTriggered,
    RemoteDrops,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Remote => "remote",
            ScenarioKind::Consensus => "consensus",
            ScenarioKind::SyncModes => "sync_modes",
            ScenarioKind::SelfTriggered => "self_triggered",
            ScenarioKind::RemoteDrops => "remote_drops",
        }
    }

    pub fn is_remote(self) -> bool {
        matches!(self, ScenarioKind::Remote | ScenarioKind::RemoteDrops)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlantSpec {
    Preset(String),
    Matrices(MatrixPlant),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixPlant {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    #[serde(default)]
    pub sigma_v: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sigma_w: Option<Vec<Vec<f64>>>,
}

impl PlantSpec {
    pub fn model(&self, noise: bool) -> Result<PlantModel> {
        let model = match self {
            PlantSpec::Preset(name) => Preset::from_name(name)?.model(),
            PlantSpec::Matrices(m) => {
                let a = linalg::from_rows(&m.a)?;
                let b = linalg::from_rows(&m.b)?;
                let n = a.nrows();
                let sv = match &m.sigma_v {
                    Some(rows) => linalg::from_rows(rows)?,
                    None if n == 4 => default_sigma_v(),
                    None => Mat::zeros(n, n),
                };
                let sw = match &m.sigma_w {
                    Some(rows) => linalg::from_rows(rows)?,
                    None if n == 4 => default_sigma_w(),
                    None => Mat::zeros(n, n),
                };
                PlantModel::new(a, b, sv, sw, 1)?
            }
        };
        if noise {
            Ok(model)
        } else {
            let n = model.state_dim();
            model.with_noise(Mat::zeros(n, n), Mat::zeros(n, n))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub plant: PlantSpec,
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default)]
    pub beacon_loss_prob: Option<f64>,
    pub slots_per_round: usize,
    /// Ticks per round.
    pub round_period: u32,
    #[serde(default)]
    pub loss_model: LossModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Named("all_to_all".into())
    }
}

impl WeightSpec {
    pub fn matrix(&self, n: usize) -> Result<Mat> {
        match self {
            WeightSpec::Named(name) => match name.as_str() {
                "all_to_all" => Ok(Mat::from_element(n, n, 1.0 / n as f64)),
                "chain" => {
                    let mut w = Mat::zeros(n, n);
                    w[(0, 0)] = 1.0;
                    for i in 1..n {
                        w[(i, i)] = 0.5;
                        w[(i, i - 1)] = 0.5;
                    }
                    Ok(w)
                }
                other => Err(Error::Config(format!("unknown consensus weights '{other}'"))),
            },
            WeightSpec::Matrix(rows) => linalg::from_rows(rows),
        }
    }
}

/// Gains given directly or the weights to synthesize them from. Diagonal
/// weights are given as the diagonal entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Remote loop LQR weights, applied at the round rate.
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    /// Explicit remote gain `u = F x`, overriding synthesis.
    pub gain: Option<Vec<Vec<f64>>>,
    /// Local stabilizer weights at the tick rate.
    pub local_q_diag: Vec<f64>,
    pub local_r_diag: Vec<f64>,
    /// Per-agent weights of the team design.
    pub sync_q_diag: Vec<f64>,
    pub sync_r_diag: Vec<f64>,
    /// Penalty on pairwise state differences.
    pub q_sync_diag: Vec<f64>,
    pub consensus_weights: WeightSpec,
    pub track_gain: f64,
    pub integrator_gain: f64,
    pub agreement_tol: f64,
    pub agreement_rounds: usize,
    pub delta: f64,
    pub m_max: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            q_diag: vec![1.0, 1.0, 0.1, 0.1],
            r_diag: vec![0.1],
            gain: None,
            local_q_diag: vec![0.01, 10.0, 10.0, 0.1],
            local_r_diag: vec![0.01],
            sync_q_diag: vec![0.01, 0.0, 0.0, 0.0],
            sync_r_diag: vec![0.1],
            q_sync_diag: vec![10.0, 0.0, 0.0, 0.0],
            consensus_weights: WeightSpec::default(),
            track_gain: 50.0,
            integrator_gain: 5.0,
            agreement_tol: 1e-3,
            agreement_rounds: 3,
            delta: 0.0,
            m_max: 20,
        }
    }
}

/// Operating mode: from `start` (ticks) on, the listed agents synchronize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub id: u32,
    pub start: u64,
    #[serde(default)]
    pub team: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtificialDrop {
    pub probability: f64,
    /// Agent indices that discard received control messages.
    pub agents: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub seed: u64,
    /// Simulated length in ticks.
    pub duration: u64,
    pub network: NetworkSection,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub modes: Vec<ModeConfig>,
    /// Rounds of advance notice for a mode switch.
    #[serde(default = "default_countdown")]
    pub mode_countdown: u32,
    #[serde(default)]
    pub enforce_dwell: bool,
    #[serde(default)]
    pub artificial_drop: Option<ArtificialDrop>,
    #[serde(default)]
    pub manager_policy: ManagerPolicy,
    /// Process and measurement noise on or off.
    #[serde(default = "yes")]
    pub noise: bool,
    /// Flows for the `schedule` command; derived from the agents if absent.
    #[serde(default)]
    pub flows: Option<Vec<Flow>>,
    #[serde(default = "default_max_hyperperiod")]
    pub max_hyperperiod: u32,
}

fn default_countdown() -> u32 {
    3
}

fn yes() -> bool {
    true
}

fn default_max_hyperperiod() -> u32 {
    1000
}

pub const HOST: NodeId = 0;

pub fn node_of(agent: usize) -> NodeId {
    agent as NodeId + 1
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn network_config(&self) -> NetworkConfig {
        let mut node_ids = vec![HOST];
        node_ids.extend((0..self.agents.len()).map(node_of));
        NetworkConfig {
            node_ids,
            host_id: HOST,
            loss_prob: self.network.loss_prob,
            beacon_loss_prob: self.network.beacon_loss_prob,
            slots_per_round: self.network.slots_per_round,
            round_period: self.network.round_period,
            loss_model: self.network.loss_model,
        }
    }

    pub fn models(&self) -> Result<Vec<PlantModel>> {
        self.agents.iter().map(|a| a.plant.model(self.noise)).collect()
    }

    /// Modes sorted by start, with an implicit all-local mode 0 when the
    /// list is empty.
    pub fn mode_plan(&self) -> Vec<ModeConfig> {
        if self.modes.is_empty() {
            let team = match self.scenario {
                ScenarioKind::SelfTriggered => (0..self.agents.len()).collect(),
                _ => Vec::new(),
            };
            return vec![ModeConfig { id: 0, start: 0, team }];
        }
        let mut m = self.modes.clone();
        m.sort_by_key(|m| m.start);
        m
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.duration == 0 {
            p.push("duration must be positive".to_string());
        }
        if self.agents.is_empty() {
            p.push("at least one agent is required".to_string());
        }
        if let Err(Error::Validation(v)) = self.network_config().validate() {
            p.extend(v);
        }
        let mut dims = None;
        for (i, a) in self.agents.iter().enumerate() {
            match a.plant.model(self.noise) {
                Ok(m) => {
                    if a.initial_state.len() != m.state_dim() {
                        p.push(format!(
                            "agent {i}: initial_state has {} entries, plant has {} states",
                            a.initial_state.len(),
                            m.state_dim()
                        ));
                    }
                    if a.initial_state.iter().any(|v| !v.is_finite()) {
                        p.push(format!("agent {i}: initial_state is not finite"));
                    }
                    let d = (m.state_dim(), m.input_dim());
                    if *dims.get_or_insert(d) != d {
                        p.push(format!("agent {i}: plant dimensions differ from agent 0"));
                    }
                }
                Err(e) => p.push(format!("agent {i}: {e}")),
            }
        }
        let c = &self.controller;
        if let Some((n, m)) = dims {
            for (name, v, len) in [
                ("q_diag", &c.q_diag, n),
                ("r_diag", &c.r_diag, m),
                ("local_q_diag", &c.local_q_diag, n),
                ("local_r_diag", &c.local_r_diag, m),
                ("sync_q_diag", &c.sync_q_diag, n),
                ("sync_r_diag", &c.sync_r_diag, m),
                ("q_sync_diag", &c.q_sync_diag, n),
            ] {
                if v.len() != len {
                    p.push(format!("controller.{name} needs {len} entries, has {}", v.len()));
                }
                if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    p.push(format!("controller.{name} entries must be finite and nonnegative"));
                }
            }
            for (name, v) in [("r_diag", &c.r_diag), ("local_r_diag", &c.local_r_diag), ("sync_r_diag", &c.sync_r_diag)] {
                if v.iter().any(|x| *x <= 0.0) {
                    p.push(format!("controller.{name} entries must be positive"));
                }
            }
            if let Some(g) = &c.gain {
                if g.len() != m || g.iter().any(|r| r.len() != n) {
                    p.push(format!("controller.gain must be {m}x{n}"));
                }
            }
        }
        if !(c.delta >= 0.0 && c.delta.is_finite()) {
            p.push(format!("controller.delta must be finite and nonnegative, got {}", c.delta));
        }
        if c.m_max == 0 {
            p.push("controller.m_max must be at least 1".into());
        }
        if !(c.agreement_tol > 0.0) {
            p.push("controller.agreement_tol must be positive".into());
        }
        if self.scenario == ScenarioKind::Consensus && !self.agents.is_empty() {
            match c.consensus_weights.matrix(self.agents.len()) {
                Ok(w) => {
                    let n = self.agents.len();
                    if w.shape() != (n, n) {
                        p.push(format!("consensus weights must be {n}x{n}"));
                    } else {
                        for i in 0..n {
                            let row = w.row(i);
                            if row.iter().any(|x| *x < 0.0) || (row.sum() - 1.0).abs() > 1e-12 {
                                p.push(format!("consensus weight row {i} is not stochastic"));
                            }
                        }
                    }
                }
                Err(e) => p.push(e.to_string()),
            }
        }
        self.validate_modes(&mut p);
        if let Some(d) = &self.artificial_drop {
            if !(0.0..=1.0).contains(&d.probability) {
                p.push(format!("artificial_drop.probability {} outside [0, 1]", d.probability));
            }
            if let Some(bad) = d.agents.iter().find(|&&a| a >= self.agents.len()) {
                p.push(format!("artificial_drop names unknown agent {bad}"));
            }
        }
        let need = self.control_slots_needed();
        if need > self.network.slots_per_round {
            p.push(format!(
                "{} scenario needs {need} slots per round, network has {}",
                self.scenario.as_str(),
                self.network.slots_per_round
            ));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    fn validate_modes(&self, p: &mut Vec<String>) {
        let t = self.network.round_period.max(1) as u64;
        let plan = self.mode_plan();
        if plan[0].start != 0 {
            p.push("the first mode must start at tick 0".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for (k, m) in plan.iter().enumerate() {
            if !ids.insert(m.id) {
                p.push(format!("mode id {} is used twice", m.id));
            }
            if m.start % t != 0 {
                p.push(format!("mode {} starts at tick {}, not a round boundary", m.id, m.start));
            }
            if k > 0 {
                if m.start / t < self.mode_countdown as u64 {
                    p.push(format!("mode {} starts before its countdown can be announced", m.id));
                }
                if m.start / t < plan[k - 1].start / t + self.mode_countdown as u64 {
                    p.push(format!("mode {} is announced before the previous switch completes", m.id));
                }
            }
            if let Some(bad) = m.team.iter().find(|&&a| a >= self.agents.len()) {
                p.push(format!("mode {} lists unknown agent {bad}", m.id));
            }
        }
        if self.modes.len() > 1 && self.mode_countdown == 0 {
            p.push("mode_countdown must be at least 1 when modes switch".into());
        }
        if !self.modes.is_empty() && !matches!(self.scenario, ScenarioKind::SyncModes) {
            p.push(format!("modes are only supported by the sync_modes scenario, not {}", self.scenario.as_str()));
        }
    }

    /// Data slots each round needs with everyone transmitting.
    pub fn control_slots_needed(&self) -> usize {
        match self.scenario {
            ScenarioKind::Remote | ScenarioKind::RemoteDrops => self.agents.len() + 1,
            _ => self.agents.len(),
        }
    }

    /// One period-1 flow per transmitting node unless flows are given.
    pub fn flow_set(&self) -> Vec<Flow> {
        if let Some(f) = &self.flows {
            return f.clone();
        }
        let mut owners: Vec<NodeId> = (0..self.agents.len()).map(node_of).collect();
        if self.scenario.is_remote() {
            owners.push(HOST);
        }
        owners
            .into_iter()
            .enumerate()
            .map(|(id, owner)| Flow { id: id as u32, owner, period: 1, deadline: 1, slots_needed: 1 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> String {
        r#"{
            "scenario": "consensus",
            "seed": 3,
            "duration": 100,
            "network": {"slots_per_round": 5, "round_period": 10},
            "agents": [
                {"plant": "selfbuilt", "initial_state": [0.1, 0, 0, 0]},
                {"plant": {"a": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]], "b": [[0],[0],[0],[1]]},
                 "initial_state": [0, 0, 0, 0]}
            ]
        }"#
        .to_string()
    }

    #[test]
    fn parses_presets_and_matrices() {
        let c = ScenarioConfig::from_json(&base()).unwrap();
        c.validate().unwrap();
        assert_eq!(c.models().unwrap().len(), 2);
        assert_eq!(c.network_config().node_ids, vec![0, 1, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = base().replace("\"seed\": 3", "\"seed\": 3, \"sede\": 4");
        assert!(ScenarioConfig::from_json(&text).is_err());
        let text = base().replace("\"round_period\": 10", "\"round_period\": 10, \"jitter\": 1");
        assert!(ScenarioConfig::from_json(&text).is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = ScenarioConfig::from_json(&base()).unwrap();
        c.duration = 0;
        c.network.loss_prob = 2.0;
        c.agents[0].initial_state.pop();
        c.controller.delta = -1.0;
        match c.validate() {
            Err(Error::Validation(v)) => assert_eq!(v.len(), 4, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn named_weights() {
        let w = WeightSpec::Named("chain".into()).matrix(3).unwrap();
        assert_eq!(w[(0, 0)], 1.0);
        assert_eq!(w[(2, 1)], 0.5);
        assert!(WeightSpec::Named("ring".into()).matrix(3).is_err());
    }
}
