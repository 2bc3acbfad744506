//! End-to-end acceptance criteria. Prints one [PASS]/[FAIL] line per
//! criterion and exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{config, ensemble_replay_gap, monte_carlo_growth, random_ensemble, round_rows, wired_equivalence_gap};
use wcps_core::analysis::{mean_square_stable, scalar_stability_boundary};
use wcps_core::control::{dare_residual, solve_dare};
use wcps_core::linalg;
use wcps_core::netsim::{run_round, Beacon, LossModel, Message, NetworkConfig, NodeNetState, Payload, RoundSchedule, SlotAssignment, SlotPurpose};
use wcps_core::plant::{lift_model, Preset};
use wcps_core::rng::Rng;
use wcps_core::scenario::trace::write_trace;
use wcps_core::scenario::{check_stability, run_scenario, sweep, SweepParam};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn consensus_all_to_all() -> Outcome {
    let cfg = config("consensus");
    let s = run_scenario(&cfg).unwrap().summary;
    let spread = &s.consensus_spread;
    check(
        cfg.agents.len() == 5 && cfg.network.loss_prob == 0.0 && spread[0] > 1e-9 && spread[1] < 1e-9 && s.consensus_rounds == Some(1),
        format!("spread {:.3} -> {:.1e} after one round, consensus_rounds {:?}", spread[0], spread[1], s.consensus_rounds),
    )
}

fn consensus_chain() -> Outcome {
    let cfg = config("consensus_chain");
    let positions: Vec<f64> = cfg.agents.iter().map(|a| a.initial_state[0]).collect();
    let lo = positions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = run_scenario(&cfg).unwrap().summary;
    let rounds = s.consensus_rounds.unwrap_or(u64::MAX);
    check(
        (lo, hi) == (-0.2, 0.3) && cfg.controller.agreement_rounds == 3 && (15..=40).contains(&rounds),
        format!("agreement after {rounds} rounds from positions in [{lo}, {hi}]"),
    )
}

fn remote_drops() -> Outcome {
    let cfg = config("remote_drops");
    let drop = cfg.artificial_drop.clone().unwrap();
    let dropping = drop.agents[0];
    let with = run_scenario(&cfg).unwrap().summary;
    let mut matched = cfg.clone();
    matched.artificial_drop = None;
    let without = run_scenario(&matched).unwrap().summary;
    let (d1, d0) = (with.distance_traveled[dropping], without.distance_traveled[dropping]);
    check(
        drop.probability == 0.1
            && cfg.network.loss_prob == 0.001
            && cfg.duration == 30_000
            && with.stable
            && with.max_abs_angle < 0.5
            && d1 > d0,
        format!(
            "stable {}, max |angle| {:.3} rad, distance {d1:.2} m with drops vs {d0:.2} m without",
            with.stable, with.max_abs_angle
        ),
    )
}

fn stability_analysis() -> Outcome {
    let cfg = config("remote");
    let report = check_stability(&cfg).unwrap();
    let rho = report.modes[0].loops.iter().map(|l| l.report.spectral_radius).fold(0.0, f64::max);
    let mut worst = 0.0_f64;
    for (a_c, a_o) in [(0.5, 1.2), (0.0, 2.0), (0.9, 1.01)] {
        let analytic = (a_o * a_o - 1.0) / (a_o * a_o - a_c * a_c);
        worst = worst.max((scalar_stability_boundary(a_c, a_o, 1e-9).unwrap() - analytic).abs());
    }
    check(
        cfg.network.round_period == 4 && cfg.network.loss_prob == 0.001 && report.stable && worst < 1e-6,
        format!("40 ms loop at loss 0.001: rho {rho:.4}, stable {}; scalar boundary error {worst:.1e}", report.stable),
    )
}

fn self_triggered_tradeoff() -> Outcome {
    let cfg = config("self_triggered");
    let deltas = [0.0, 0.01, 0.03, 0.1];
    let seeds: Vec<u64> = (1..=10).collect();
    let table = sweep(&cfg, SweepParam::Delta, &deltas, &seeds).unwrap();
    let agg = &table.aggregates;
    let control: Vec<f64> = agg.iter().map(|a| a.control_fraction.unwrap().median).collect();
    let rmse: Vec<f64> = agg.iter().map(|a| a.rmse_sync.unwrap().median).collect();
    let active: Vec<f64> = agg.iter().map(|a| a.active_fraction.unwrap().median).collect();
    let decreasing = control.windows(2).all(|w| w[1] < w[0]);
    let op = (1..deltas.len())
        .min_by(|&i, &j| (control[i] - 0.25).abs().total_cmp(&(control[j] - 0.25).abs()))
        .unwrap();
    let rmse_ratio = rmse[op] / rmse[0];
    let reduction = 1.0 - active[op] / active[0];
    check(
        cfg.agents.len() == 5
            && cfg.network.slots_per_round == 5
            && cfg.network.round_period == 5
            && decreasing
            && agg.iter().all(|a| a.stable_runs == seeds.len())
            && rmse_ratio <= 3.0
            && reduction >= 0.6,
        format!(
            "median control {:?}; at delta {} control {:.3}, rmse {:.2}x baseline, active slots -{:.0}%",
            control.iter().map(|c| (c * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            deltas[op],
            control[op],
            rmse_ratio,
            100.0 * reduction
        ),
    )
}

fn mode_change_safety() -> Outcome {
    let cfg = config("sync_modes");
    let starts: Vec<u64> = cfg.modes.iter().map(|m| m.start).collect();
    let s = run_scenario(&cfg).unwrap().summary;
    let ratios: Vec<f64> = s.departures.iter().map(|d| d.rmse_after / d.rmse_before).collect();
    check(
        cfg.agents.len() == 10
            && starts == [0, 600, 1800, 3000]
            && s.stable
            && s.mode_coherent
            && ratios.len() == 2
            && ratios.iter().all(|r| *r <= 2.0),
        format!(
            "stable {}, coherent {}, post/pre departure RMSE {:?}, max |angle| {:.3} rad",
            s.stable,
            s.mode_coherent,
            ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>(),
            s.max_abs_angle
        ),
    )
}

fn property_suites() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    // ordering audit under loss
    let mut violations = 0;
    for loss in [0.0, 0.1, 0.5, 0.9] {
        for name in ["remote", "self_triggered", "sync_modes"] {
            let mut cfg = config(name);
            cfg.duration = cfg.duration.min(2000);
            cfg.network.loss_prob = loss;
            let out = run_scenario(&cfg).unwrap();
            violations += out.summary.delivery_violations;
            for a in 0..cfg.agents.len() {
                let seqs: Vec<u64> = round_rows(&out.trace, a, cfg.network.round_period as u64).iter().filter_map(|r| r.seq).collect();
                violations += seqs.windows(2).filter(|w| w[0] >= w[1]).count();
            }
        }
    }
    ok &= violations == 0;
    notes.push(format!("ordering violations {violations}"));

    // empirical loss rate
    let net = NetworkConfig {
        node_ids: vec![0, 1],
        host_id: 0,
        loss_prob: 0.2,
        beacon_loss_prob: Some(0.0),
        slots_per_round: 1,
        round_period: 1,
        loss_model: LossModel::PerReceiver,
    };
    let sched = RoundSchedule { assignments: vec![SlotAssignment { slot: 0, owner: 0, purpose: SlotPurpose::Control }] };
    let states = BTreeMap::from([(0, NodeNetState::new(0)), (1, NodeNetState::new(0))]);
    let mut rng = Rng::new(3);
    let trials = 50_000u64;
    let mut lost = 0u64;
    for r in 0..trials {
        let msg = Message { sender: 0, round_index: r, slot_index: 0, payload: Payload::Other, demand: None, seq: r };
        let out = run_round(&net, &Beacon::steady(0, r, sched.clone()), &BTreeMap::from([(0, msg)]), &states, &mut rng).unwrap();
        lost += u64::from(out.inboxes[&1].is_empty());
    }
    let rate = lost as f64 / trials as f64;
    let ci = 3.29 * (0.2_f64 * 0.8 / trials as f64).sqrt();
    ok &= (rate - 0.2).abs() < ci;
    notes.push(format!("loss rate {rate:.4} (0.2 ± {ci:.4})"));

    // Riccati residuals
    let mut residual = 0.0_f64;
    for preset in [Preset::Selfbuilt, Preset::Perturbed] {
        for steps in [1, 4, 5, 10] {
            let m = lift_model(&preset.model(), steps).unwrap();
            let (q, r) = (linalg::diag(&[1.0, 1.0, 0.1, 0.1]), linalg::diag(&[0.1]));
            let p = solve_dare(m.a(), m.b(), &q, &r).unwrap();
            residual = residual.max(dare_residual(m.a(), m.b(), &q, &r, &p));
        }
    }
    ok &= residual < 1e-8;
    notes.push(format!("DARE residual {residual:.1e}"));

    let (dx, _) = wired_equivalence_gap(1000);
    ok &= dx < 1e-10;
    notes.push(format!("wired gap {dx:.1e}"));

    let (gap, _) = ensemble_replay_gap(500);
    ok &= gap < 1e-10;
    notes.push(format!("ensemble gap {gap:.1e}"));

    let mut rng = Rng::new(0x5eed);
    let mut disagreements = 0;
    for i in 0..20 {
        let target = if i % 2 == 0 { 0.9 + 0.08 * rng.uniform() } else { 1.02 + 0.08 * rng.uniform() };
        let ens = random_ensemble(&mut rng, target);
        let verdict = mean_square_stable(&ens).unwrap().stable;
        disagreements += usize::from(verdict != (monte_carlo_growth(&ens, &mut rng) < 1.0));
    }
    ok &= disagreements == 0;
    notes.push(format!("Monte Carlo disagreements {disagreements}/20"));

    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    for name in ["remote_drops", "consensus", "sync_modes", "self_triggered"] {
        let mut cfg = config(name);
        cfg.duration = cfg.duration.min(2000);
        cfg.network.loss_prob = 0.1;
        let bytes: Vec<Vec<u8>> = (0..2)
            .map(|i| {
                let p = dir.path().join(format!("{name}{i}.csv"));
                write_trace(&p, &run_scenario(&cfg).unwrap().trace).unwrap();
                std::fs::read(p).unwrap()
            })
            .collect();
        identical &= bytes[0] == bytes[1];
    }
    ok &= identical;
    notes.push(format!("reruns identical {identical}"));

    check(ok, notes.join(", "))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("1 consensus speed, all-to-all", consensus_all_to_all),
        ("2 consensus speed, chain", consensus_chain),
        ("3 remote stabilization under loss", remote_drops),
        ("4 stability analysis", stability_analysis),
        ("5 self-triggered trade-off", self_triggered_tradeoff),
        ("6 mode-change safety", mode_change_safety),
        ("7 property suites", property_suites),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {name}: {detail} ({:.1} s)", t.elapsed().as_secs_f64());
    }
    println!("{} of 7 criteria passed in {:.1} s", 7 - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
