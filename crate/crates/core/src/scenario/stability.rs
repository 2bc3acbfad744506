//! Stability verdicts for scenario configurations.

use serde::Serialize;

use crate::analysis::{
    average_dwell_time, build_ensemble, build_ensemble_pair_models, mean_square_stable, pair_delivery_law,
    Architecture, ClosedLoopEnsemble, ModeStabilityData, StabilityReport,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::plant::lift_model;

use super::config::{ScenarioConfig, ScenarioKind};
use super::runner::{local_gains, remote_gains, round_models, team_gains};

#[derive(Debug, Clone, Serialize)]
pub struct LoopReport {
    pub label: String,
    #[serde(flatten)]
    pub report: StabilityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub mode: u32,
    pub stable: bool,
    pub loops: Vec<LoopReport>,
    /// Decay rate certified by the Lyapunov matrix, when the mode is stable.
    pub certified_rho: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityCheck {
    pub scenario: String,
    pub supported: bool,
    pub reason: Option<String>,
    pub stable: bool,
    pub modes: Vec<ModeReport>,
    /// Average dwell time in rounds.
    pub dwell_time_rounds: Option<f64>,
    pub switch_gaps_rounds: Vec<u64>,
    pub dwell_respected: Option<bool>,
}

impl StabilityCheck {
    fn unsupported(cfg: &ScenarioConfig, reason: &str) -> Self {
        Self {
            scenario: cfg.scenario.as_str().into(),
            supported: false,
            reason: Some(reason.into()),
            stable: false,
            modes: Vec::new(),
            dwell_time_rounds: None,
            switch_gaps_rounds: Vec::new(),
            dwell_respected: None,
        }
    }
}

/// Probability that a non-host node takes part in a round and a given
/// flood reaches its receiver.
fn delivery_loss(cfg: &ScenarioConfig, extra_drop: f64) -> f64 {
    let net = cfg.network_config();
    let ok = (1.0 - net.beacon_loss()) * (1.0 - net.loss_prob) * (1.0 - extra_drop);
    1.0 - ok
}

fn mode_report(mode: u32, loops: Vec<(String, ClosedLoopEnsemble)>) -> Result<(ModeReport, Option<ModeStabilityData>)> {
    let mut reports = Vec::new();
    for (label, ens) in &loops {
        reports.push(LoopReport { label: label.clone(), report: mean_square_stable(ens)? });
    }
    let stable = reports.iter().all(|r| r.report.stable);
    let data = if stable && loops.len() == 1 { Some(ModeStabilityData::from_ensemble(&loops[0].1)?) } else { None };
    Ok((ModeReport { mode, stable, loops: reports, certified_rho: data.as_ref().map(|d| d.rho) }, data))
}

/// Mean-square verdict per mode and the dwell-time bound across modes.
///
/// Covers the remote loop (one ensemble per agent) and two-agent teams.
/// The sensor and control messages of a remote loop both depend on the
/// plant node hearing the beacon, which correlates them across consecutive
/// rounds; the ensemble uses their marginal delivery probabilities.
pub fn check_stability(cfg: &ScenarioConfig) -> Result<StabilityCheck> {
    cfg.validate()?;
    let models = cfg.models()?;
    let mut modes = Vec::new();
    let mut data = Vec::new();
    match cfg.scenario {
        ScenarioKind::Remote | ScenarioKind::RemoteDrops => {
            let gains = remote_gains(cfg, &models)?;
            let mut loops = Vec::new();
            for (a, (m, f)) in models.iter().zip(&gains).enumerate() {
                let round = lift_model(m, cfg.network.round_period)?;
                let drop = match &cfg.artificial_drop {
                    Some(d) if d.agents.contains(&a) => d.probability,
                    _ => 0.0,
                };
                let ens = build_ensemble(&round, f, delivery_loss(cfg, 0.0), delivery_loss(cfg, drop), Architecture::Remote)?;
                loops.push((format!("agent {a}"), ens));
            }
            if loops.len() == 1 {
                let (r, d) = mode_report(0, loops)?;
                modes.push(r);
                data.extend(d);
            } else {
                let mut reports = Vec::new();
                for l in loops {
                    reports.extend(mode_report(0, vec![l])?.0.loops);
                }
                let stable = reports.iter().all(|r| r.report.stable);
                modes.push(ModeReport { mode: 0, stable, loops: reports, certified_rho: None });
            }
        }
        ScenarioKind::SyncModes if cfg.agents.len() == 2 => {
            let local = local_gains(cfg, &models)?;
            let cl = round_models(cfg, &models, &local)?;
            let net = cfg.network_config();
            let law = pair_delivery_law(net.beacon_loss(), net.loss_prob);
            for mode in cfg.mode_plan() {
                let f = if mode.team.len() == 2 {
                    let g = team_gains(cfg, &cl, &[0, 1])?;
                    // team order may differ from agent order
                    if mode.team == [1, 0] {
                        swap_pair(&g.f, g.input_dim, g.state_dim)
                    } else {
                        g.f
                    }
                } else {
                    Mat::zeros(2 * models[0].input_dim(), 2 * models[0].state_dim())
                };
                let ens = build_ensemble_pair_models([&cl[0], &cl[1]], &f, &law, Architecture::DistributedPair)?;
                let (r, d) = mode_report(mode.id, vec![("pair".into(), ens)])?;
                modes.push(r);
                data.extend(d);
            }
        }
        ScenarioKind::SyncModes => {
            return Ok(StabilityCheck::unsupported(cfg, "joint loss law of teams larger than two is not enumerated"));
        }
        ScenarioKind::Consensus | ScenarioKind::SelfTriggered => {
            return Ok(StabilityCheck::unsupported(cfg, "the loop is not linear time-invariant over rounds"));
        }
    }
    let stable = modes.iter().all(|m| m.stable);
    let plan = cfg.mode_plan();
    let period = cfg.network.round_period as u64;
    let gaps: Vec<u64> = plan.windows(2).map(|w| (w[1].start - w[0].start) / period).collect();
    let dwell = if stable && data.len() == modes.len() { Some(average_dwell_time(&data)?) } else { None };
    let respected = dwell.map(|tau| gaps.iter().all(|&g| g as f64 >= tau));
    Ok(StabilityCheck {
        scenario: cfg.scenario.as_str().into(),
        supported: true,
        reason: None,
        stable,
        modes,
        dwell_time_rounds: dwell,
        switch_gaps_rounds: gaps,
        dwell_respected: respected,
    })
}

fn swap_pair(f: &Mat, m: usize, n: usize) -> Mat {
    let mut out = f.clone();
    for (bi, bj, si, sj) in [(0, 0, 1, 1), (0, 1, 1, 0), (1, 0, 0, 1), (1, 1, 0, 0)] {
        out.view_mut((bi * m, bj * n), (m, n)).copy_from(&f.view((si * m, sj * n), (m, n)));
    }
    out
}

/// Rejects configurations whose switches come faster than the dwell bound.
pub fn enforce_dwell(cfg: &ScenarioConfig) -> Result<()> {
    if !cfg.enforce_dwell {
        return Ok(());
    }
    let check = check_stability(cfg)?;
    match (check.dwell_time_rounds, check.dwell_respected) {
        (Some(_), Some(true)) => Ok(()),
        (Some(tau), _) => Err(Error::Validation(vec![format!(
            "mode switches {:?} rounds apart violate the average dwell time of {tau:.2} rounds",
            check.switch_gaps_rounds
        )])),
        (None, _) => Err(Error::Validation(vec![format!(
            "dwell enforcement requested but no dwell time is available: {}",
            check.reason.unwrap_or_else(|| "a mode is not mean-square stable".into())
        )])),
    }
}
