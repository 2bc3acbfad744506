//! Summary statistics of a scenario run.

use serde::{Deserialize, Serialize};

use crate::sched::DutyCycle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeWindow {
    pub mode: u32,
    pub from_tick: u64,
    pub to_tick: u64,
    pub team: Vec<usize>,
    pub rmse: Option<f64>,
}

/// Synchronization error of the agents that stay in the team, before and
/// after others leave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Departure {
    pub tick: u64,
    pub left: Vec<usize>,
    pub remaining: Vec<usize>,
    pub rmse_before: f64,
    pub rmse_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub scenario: String,
    pub seed: u64,
    pub ticks: u64,
    pub rounds: u64,
    /// False when the divergence guard stopped the run.
    pub stable: bool,
    pub divergence: Option<String>,
    pub rmse_sync: Option<f64>,
    pub consensus_rounds: Option<u64>,
    /// Spread of the desired positions after each round.
    pub consensus_spread: Vec<f64>,
    pub duty_cycle: DutyCycle,
    pub distance_traveled: Vec<f64>,
    pub max_abs_angle: f64,
    pub mode_coherent: bool,
    pub mode_windows: Vec<ModeWindow>,
    pub departures: Vec<Departure>,
    /// Largest post-switch peak angle over the pre-switch peak, per switch.
    pub switch_angle_ratio: Vec<f64>,
    pub delivery_violations: usize,
    pub demand_violations: usize,
}

/// Root mean squared position difference over all pairs of `agents` and
/// ticks `from..to` of `positions[tick][agent]`.
pub fn pairwise_rmse(positions: &[Vec<f64>], agents: &[usize], from: usize, to: usize) -> Option<f64> {
    let to = to.min(positions.len());
    if agents.len() < 2 || from >= to {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for row in &positions[from..to] {
        for (k, &i) in agents.iter().enumerate() {
            for &j in &agents[k + 1..] {
                let d = row[i] - row[j];
                sum += d * d;
                count += 1;
            }
        }
    }
    Some((sum / count as f64).sqrt())
}

/// Linear-interpolation percentile of unsorted data, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_of_constant_offset() {
        let pos = vec![vec![0.0, 0.3, 0.6]; 4];
        // pair differences 0.3, 0.6, 0.3
        let expected = ((0.09 + 0.36 + 0.09) / 3.0f64).sqrt();
        assert!((pairwise_rmse(&pos, &[0, 1, 2], 0, 4).unwrap() - expected).abs() < 1e-15);
        assert!((pairwise_rmse(&pos, &[0, 1], 1, 3).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(pairwise_rmse(&pos, &[0], 0, 4), None);
    }

    #[test]
    fn percentiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 50.0), Some(2.5));
        assert_eq!(percentile(&v, 25.0), Some(1.75));
        assert_eq!(percentile(&v, 100.0), Some(4.0));
        assert_eq!(percentile(&[], 50.0), None);
    }
}
