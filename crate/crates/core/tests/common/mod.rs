#![allow(dead_code)]

use std::path::PathBuf;

use wcps_core::analysis::{mean_square_stable, remote_closed_loop, ClosedLoopEnsemble};
use wcps_core::linalg::{Mat, Vector};
use wcps_core::plant::lift_model;
use wcps_core::rng::Rng;
use wcps_core::scenario::config::ArtificialDrop;
use wcps_core::scenario::runner::remote_gains;
use wcps_core::scenario::trace::TraceRecord;
use wcps_core::scenario::{run_scenario, ScenarioConfig};

pub fn config(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.json"));
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Rows of one agent, one per tick.
pub fn agent_rows(trace: &[TraceRecord], agent: usize) -> Vec<&TraceRecord> {
    trace.iter().filter(|r| r.agent == agent).collect()
}

/// Rows of one agent written at round starts.
pub fn round_rows(trace: &[TraceRecord], agent: usize, period: u64) -> Vec<&TraceRecord> {
    trace.iter().filter(|r| r.agent == agent && r.tick % period == 0).collect()
}

pub fn state_of(r: &TraceRecord) -> Vec<f64> {
    [r.x0, r.x1, r.x2, r.x3].iter().map_while(|v| *v).collect()
}

pub fn quiet_remote(loss: f64, rounds: u64) -> ScenarioConfig {
    let mut cfg = config("remote");
    cfg.noise = false;
    cfg.network.loss_prob = loss;
    cfg.duration = rounds * cfg.network.round_period as u64;
    cfg
}

/// Largest state gap between the lossless remote loop and the wired loop
/// `u = F x` started from the same state once the prediction pipeline is
/// full (third round), together with the largest input gap.
pub fn wired_equivalence_gap(rounds: u64) -> (f64, f64) {
    let cfg = quiet_remote(0.0, rounds);
    let period = cfg.network.round_period as u64;
    let out = run_scenario(&cfg).unwrap();
    assert!(out.summary.stable);
    let models = cfg.models().unwrap();
    let gains = remote_gains(&cfg, &models).unwrap();
    let (mut dx, mut du) = (0.0_f64, 0.0_f64);
    for (a, model) in models.iter().enumerate() {
        let lifted = lift_model(model, cfg.network.round_period).unwrap();
        let wired = lifted.a() + lifted.b() * &gains[a];
        let rows = round_rows(&out.trace, a, period);
        assert_eq!(rows.len() as u64, rounds);
        let mut x = Vector::from_vec(state_of(rows[2]));
        for row in &rows[2..] {
            let sim = Vector::from_vec(state_of(row));
            dx = dx.max((&sim - &x).amax());
            du = du.max((row.u - (&gains[a] * &sim)[0]).abs());
            x = &wired * x;
        }
    }
    (dx, du)
}

/// Largest gap between a lossy noise-free run and the jump-linear closed
/// loop driven by the delivery outcomes recorded in its trace, and the
/// number of lost messages seen.
pub fn ensemble_replay_gap(rounds: u64) -> (f64, usize) {
    let mut cfg = quiet_remote(0.1, rounds);
    cfg.network.beacon_loss_prob = Some(0.05);
    cfg.artificial_drop = Some(ArtificialDrop { probability: 0.2, agents: vec![1] });
    let period = cfg.network.round_period as u64;
    let out = run_scenario(&cfg).unwrap();
    let models = cfg.models().unwrap();
    let gains = remote_gains(&cfg, &models).unwrap();
    let (mut worst, mut lost) = (0.0_f64, 0);
    for (a, model) in models.iter().enumerate() {
        let lifted = lift_model(model, cfg.network.round_period).unwrap();
        let members: Vec<Mat> = [(false, false), (false, true), (true, false), (true, true)]
            .iter()
            .map(|&(t, p)| remote_closed_loop(&lifted, &gains[a], t, p))
            .collect();
        let rows = round_rows(&out.trace, a, period);
        let n = model.state_dim();
        let mut z = Vector::zeros(members[0].nrows());
        z.rows_mut(0, n).copy_from(&Vector::from_vec(state_of(rows[0])));
        for k in 0..rows.len() - 1 {
            let theta = rows[k].theta.unwrap() == 1;
            let phi = rows[k].phi.unwrap() == 1;
            lost += usize::from(!theta) + usize::from(!phi);
            z = &members[2 * theta as usize + phi as usize] * z;
            let sim = Vector::from_vec(state_of(rows[k + 1]));
            worst = worst.max((&sim - z.rows(0, n)).amax());
        }
    }
    (worst, lost)
}

pub const TRAJECTORIES: usize = 10_000;
pub const STEPS: usize = 500;

/// Members share a random orthogonal core and differ by a small perturbation, so the
/// sample mean of |x|² is not dominated by rare switching paths.
pub fn random_ensemble(rng: &mut Rng, target_rho: f64) -> ClosedLoopEnsemble {
    let d = 2 + (rng.next_u64() % 2) as usize;
    let k = 2 + (rng.next_u64() % 2) as usize;
    let core = Mat::from_fn(d, d, |_, _| rng.gaussian()).qr().q();
    let mut weights: Vec<f64> = (0..k).map(|_| 0.2 + rng.uniform()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let members: Vec<(f64, Mat)> = weights
        .iter()
        .map(|&w| (w, &core + Mat::from_fn(d, d, |_, _| 0.08 * rng.gaussian())))
        .collect();
    let rho = mean_square_stable(&ClosedLoopEnsemble::new(members.clone()).unwrap()).unwrap().spectral_radius;
    let c = (target_rho / rho).sqrt();
    ClosedLoopEnsemble::new(members.into_iter().map(|(w, a)| (w, a * c)).collect()).unwrap()
}

pub fn pick(members: &[(f64, Mat)], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, (p, _)) in members.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    members.len() - 1
}

/// Mean of |x_k|² over independent trajectories for every k.
pub fn second_moment_curve(rng: &mut Rng, steps: usize, mut matrix_at: impl FnMut(usize, &mut Rng) -> Mat, d: usize) -> Vec<f64> {
    let mut sums = vec![0.0; steps + 1];
    for _ in 0..TRAJECTORIES {
        let mut x = wcps_core::linalg::Vector::from_fn(d, |_, _| rng.gaussian());
        sums[0] += x.norm_squared();
        for (k, s) in sums.iter_mut().enumerate().skip(1) {
            x = matrix_at(k - 1, rng) * x;
            *s += x.norm_squared();
        }
    }
    sums.iter().map(|s| s / TRAJECTORIES as f64).collect()
}

/// Per-step growth of the sampled second moment between steps 100 and
/// `STEPS`.
pub fn monte_carlo_growth(ens: &ClosedLoopEnsemble, rng: &mut Rng) -> f64 {
    let members = ens.members().to_vec();
    let curve = second_moment_curve(rng, STEPS, |_, r| members[pick(&members, r.uniform())].1.clone(), ens.dim());
    (curve[STEPS] / curve[100]).powf(1.0 / (STEPS - 100) as f64)
}

