//! Parameter sweeps over seeds, run in parallel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ScenarioConfig;
use super::metrics::{percentile, SummaryMetrics};
use super::runner::{run_scenario_with, RunOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Delta,
    LossProb,
}

impl SweepParam {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "delta" => Ok(Self::Delta),
            "loss_prob" => Ok(Self::LossProb),
            other => Err(Error::Argument(format!("unknown sweep parameter '{other}' (expected delta or loss_prob)"))),
        }
    }

    pub fn apply(self, cfg: &mut ScenarioConfig, value: f64) {
        match self {
            Self::Delta => cfg.controller.delta = value,
            Self::LossProb => cfg.network.loss_prob = value,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub summary: SummaryMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self { p25: percentile(values, 25.0)?, median: percentile(values, 50.0)?, p75: percentile(values, 75.0)? })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepAggregate {
    pub value: f64,
    pub runs: usize,
    pub stable_runs: usize,
    pub rmse_sync: Option<Quartiles>,
    pub control_fraction: Option<Quartiles>,
    pub active_fraction: Option<Quartiles>,
    pub mean_distance: Option<Quartiles>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAggregate>,
}

/// Every (value, seed) combination of `template`, with per-value medians
/// and quartiles.
pub fn sweep(template: &ScenarioConfig, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<SweepTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("sweep needs at least one value and one seed".into()));
    }
    let jobs: Vec<(f64, u64)> = values.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(value, seed)| {
            let mut cfg = template.clone();
            param.apply(&mut cfg, value);
            cfg.seed = seed;
            let out = run_scenario_with(&cfg, RunOptions { record_trace: false })?;
            Ok(SweepRow { value, seed, summary: out.summary })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregates = values
        .iter()
        .map(|&v| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
            let pick = |f: &dyn Fn(&SummaryMetrics) -> Option<f64>| -> Option<Quartiles> {
                Quartiles::of(&group.iter().filter_map(|r| f(&r.summary)).collect::<Vec<_>>())
            };
            SweepAggregate {
                value: v,
                runs: group.len(),
                stable_runs: group.iter().filter(|r| r.summary.stable).count(),
                rmse_sync: pick(&|s| s.rmse_sync),
                control_fraction: pick(&|s| Some(s.duty_cycle.control)),
                active_fraction: pick(&|s| Some(s.duty_cycle.active)),
                mean_distance: pick(&|s| {
                    let d = &s.distance_traveled;
                    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
                }),
            }
        })
        .collect();
    Ok(SweepTable { param, rows, aggregates })
}

pub fn write_rows_csv(path: &std::path::Path, table: &SweepTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "value", "seed", "stable", "rmse_sync", "control", "other", "off", "active", "max_abs_angle", "consensus_rounds",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &table.rows {
        let s = &r.summary;
        w.write_record([
            r.value.to_string(),
            r.seed.to_string(),
            s.stable.to_string(),
            opt(s.rmse_sync),
            s.duty_cycle.control.to_string(),
            s.duty_cycle.other.to_string(),
            s.duty_cycle.off.to_string(),
            s.duty_cycle.active.to_string(),
            s.max_abs_angle.to_string(),
            s.consensus_rounds.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
