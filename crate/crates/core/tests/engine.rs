mod common;

use common::*;
use hamanet::model::CommunityId;
use hamanet::scenario::parse_scenario;
use hamanet::sim::adversary::{AdversaryProfile, Behavior};
use hamanet::sim::metrics::{DropReason, Metrics};
use hamanet::sim::time::SimTime;
use hamanet::sim::{run, RunOptions, Simulation};

const STAR: &str = r#"
[topology]
nodes = ["H", "A", "B", "C"]
edges = ["H-A", "H-B", "H-C"]

[[art]]
name = "TDMA"
layer = "mac"
params = { contention = 0 }

[[culture]]
name = "File service"
mac = "TDMA"
application = "FTP"

[[step]]
at = 0
action = "start_service"
node = "H"
culture = "File service"
"#;

#[test]
fn empty_scenario_reports_zeros() {
    let out = run_text("[topology]\nnodes = [\"A\", \"B\"]\nedges = [\"A-B\"]\n", 1);
    assert_eq!(out.report.metrics, Metrics::default());
    assert_eq!(out.report.trace_lines, 0);
    assert!(out.report.society.is_empty());
    assert_eq!(out.report.end_ticks, 0);
}

#[test]
fn lossless_unit_delay_arrives_one_unit_later() {
    let out = run_text(STAR, 1);
    for l in lines(out.trace.lines()) {
        if l.ev == "MCSTART_RX" && l.field("from") == Some("H") {
            assert_eq!(l.t, SimTime::from_units(1.0).ticks());
        }
    }
}

#[test]
fn degree_three_broadcast() {
    let out = run_text(STAR, 1);
    let from_hub = lines(out.trace.lines())
        .iter()
        .filter(|l| l.ev == "MCSTART_RX" && l.field("from") == Some("H"))
        .count();
    assert_eq!(from_hub, 3);
    // the hub, then each leaf once
    assert_eq!(out.report.metrics.broadcast_tx, 4);
}

#[test]
fn certain_loss_loses_everything() {
    let text = scenario_text("table4").replace(
        "[[step]]\nat = 30",
        "[[step]]\nat = 25\naction = \"set_loss\"\nloss = 1.0\n\n[[step]]\nat = 30",
    );
    let out = run(&parse_scenario(&text).unwrap(), 7, RunOptions::default());
    let m = &out.report.metrics;
    assert_eq!(m.data_sends, 10);
    assert_eq!(m.delivered, 0);
    assert_eq!(m.dropped_by(DropReason::Loss), 10);
    assert_eq!(m.link_losses, 10);
}

#[test]
fn undeclared_ops_bounce_off_machines() {
    let world = scenario("table4");
    let mut sim = Simulation::new(&world, 7, RunOptions::default());
    let x = world.nodes[world.node("N3").unwrap()].clone();
    let mut p = AdversaryProfile::new(x, Behavior::UndeclaredOp);
    p.rate = 1.0;
    p.start = SimTime::from_units(15.0);
    p.stop = Some(SimTime::from_units(25.0));
    sim.run_until(SimTime::from_units(14.0));
    sim.inject_adversary(p);
    let before = sim.tables_digest();
    sim.run_until(SimTime::from_units(29.0));
    assert_eq!(sim.tables_digest(), before);
    let m = sim.metrics();
    assert_eq!(m.adversary_packets, 10);
    let arrivals = count_ev(sim.trace().lines(), "OP_REJECT") as u64;
    assert_eq!(m.rejected_ops, arrivals);
    assert_eq!(m.dropped_by(DropReason::OpRejected), arrivals);
}

#[test]
fn unsolicited_replies_install_nothing() {
    let world = scenario("table4");
    let mut sim = Simulation::new(&world, 7, RunOptions::default());
    sim.run_until(SimTime::from_units(19.0));
    let b = world.nodes[world.node("N2").unwrap()].clone();
    let mut p = AdversaryProfile::new(b, Behavior::BogusRrep);
    p.rate = 2.0;
    p.start = SimTime::from_units(20.0);
    p.count = Some(10);
    sim.inject_adversary(p);
    let before = sim.tables_digest();
    sim.run_until(SimTime::from_units(29.0));
    assert_eq!(sim.tables_digest(), before);
    let m = sim.metrics();
    assert_eq!(m.stale_replies + m.rejected_replies, 10);
    assert_eq!(count_ev(sim.trace().lines(), "RREP_MERGE"), 0);
}

#[test]
fn bogus_reply_to_a_real_request_is_rejected() {
    let out = run(&scenario("adversary"), 2, RunOptions::default());
    let m = &out.report.metrics;
    assert!(m.rejected_replies >= 1);
    let merges = events(out.trace.lines(), "RREP_MERGE");
    assert_eq!(merges.len(), 1, "{merges:?}");
    assert_eq!(m.delivered, 1);
}

#[test]
fn same_seed_same_trace() {
    for name in SCENARIOS {
        let world = scenario(name);
        let a = run(&world, 42, RunOptions::default());
        let b = run(&world, 42, RunOptions::default());
        assert_eq!(a.report.trace_digest, b.report.trace_digest, "{name}");
        assert_eq!(a.report.snapshot, b.report.snapshot, "{name}");
    }
}

#[test]
fn bundled_scenarios_pass_the_audit() {
    for name in SCENARIOS {
        for seed in 0..3 {
            let out = run(&scenario(name), seed, RunOptions::default());
            assert!(out.report.audit.is_empty(), "{name}/{seed}: {:?}", out.report.audit);
            assert!(
                out.report.step_errors.is_empty(),
                "{name}/{seed}: {:?}",
                out.report.step_errors
            );
            let m = &out.report.metrics;
            assert_eq!(
                m.delivered + m.dropped_total() + m.in_flight,
                m.data_sends,
                "{name}/{seed}"
            );
        }
    }
}

#[test]
fn run_until_is_resumable() {
    let world = scenario("fig3");
    let whole = run(&world, 9, RunOptions::default());
    let mut sim = Simulation::new(&world, 9, RunOptions::default());
    for t in [5.0, 10.0, 33.3, 61.0] {
        sim.run_until(SimTime::from_units(t));
        assert!(sim.now() <= SimTime::from_units(t));
    }
    sim.run();
    assert_eq!(sim.finish().trace_digest, whole.report.trace_digest);
}

#[test]
fn hello_override() {
    let world = scenario("friend");
    let off = RunOptions {
        hello: Some(false),
        ..RunOptions::default()
    };
    let out = run(&world, 1, off);
    assert_eq!(events(out.trace.lines(), "HELLO_TX").len(), 0);
    assert!(out.sim.membership(3, &CommunityId::new("C1")).is_some());
}
