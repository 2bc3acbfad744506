//! Static schedule synthesis against exhaustive search.

use proptest::prelude::*;
use wcps_core::netsim::SlotPurpose;
use wcps_core::rng::Rng;
use wcps_core::sched::{hyperperiod, synthesize_schedule, Flow, ScheduleOutcome};

/// Tries every assignment of flow instances to rounds in their windows.
fn brute_force_feasible(flows: &[Flow], slots: usize) -> bool {
    let h = hyperperiod(flows, 10_000).unwrap();
    let windows: Vec<(u32, u32)> = flows
        .iter()
        .flat_map(|f| (0..h / f.period).map(move |k| (k * f.period, f.deadline)))
        .collect();
    let mut pick = vec![0u32; windows.len()];
    loop {
        let mut load = vec![0usize; h as usize];
        for (w, &p) in windows.iter().zip(&pick) {
            load[(w.0 + p) as usize] += 1;
        }
        if load.iter().all(|&l| l <= slots) {
            return true;
        }
        // odometer over the choices
        let mut i = 0;
        loop {
            if i == pick.len() {
                return false;
            }
            pick[i] += 1;
            if pick[i] < windows[i].1 {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
    }
}

fn search_space(flows: &[Flow]) -> f64 {
    let h = hyperperiod(flows, 10_000).unwrap();
    flows.iter().map(|f| (f.deadline as f64).powi((h / f.period) as i32)).product()
}

fn random_flows(rng: &mut Rng) -> Vec<Flow> {
    let count = 1 + (rng.next_u64() % 4) as u32;
    (0..count)
        .map(|id| {
            let period = 1 + (rng.next_u64() % 6) as u32;
            let deadline = 1 + (rng.next_u64() % period as u64) as u32;
            Flow { id, owner: id + 1, period, deadline, slots_needed: 1 }
        })
        .collect()
}

#[test]
fn feasibility_agrees_with_exhaustive_search() {
    let mut rng = Rng::new(2718);
    let (mut checked, mut feasible) = (0, 0);
    while checked < 100 {
        let flows = random_flows(&mut rng);
        if search_space(&flows) > 2e5 {
            continue;
        }
        let slots = 1 + (rng.next_u64() % 2) as usize;
        let expected = brute_force_feasible(&flows, slots);
        match synthesize_schedule(&flows, slots, 1000).unwrap() {
            ScheduleOutcome::Feasible(s) => {
                assert!(expected, "synthesized a table the search says cannot exist: {flows:?}");
                s.verify(&flows, slots).unwrap();
                feasible += 1;
            }
            ScheduleOutcome::Infeasible => assert!(!expected, "missed a feasible table for {flows:?} with {slots} slots"),
        }
        checked += 1;
    }
    assert!(feasible > 20 && feasible < 100, "instances should mix both outcomes, {feasible} feasible");
}

proptest! {
    #[test]
    fn synthesized_tables_are_valid(
        specs in proptest::collection::vec((1u32..9, 1u32..9), 1..6),
        slots in 1usize..4,
    ) {
        let flows: Vec<Flow> = specs
            .iter()
            .enumerate()
            .map(|(i, &(p, d))| Flow { id: i as u32, owner: i as u32 + 1, period: p, deadline: d.min(p), slots_needed: 1 })
            .collect();
        if let ScheduleOutcome::Feasible(s) = synthesize_schedule(&flows, slots, 2000).unwrap() {
            prop_assert!(s.verify(&flows, slots).is_ok());
            for round in &s.table {
                prop_assert!(round.assignments.len() <= slots);
                prop_assert!(round.assignments.iter().all(|a| a.purpose == SlotPurpose::Control));
            }
            // utilization above one slot per round per slot is impossible
            let demand: f64 = flows.iter().map(|f| 1.0 / f.period as f64).sum();
            prop_assert!(demand <= slots as f64 + 1e-12);
        }
    }
}
