//! Shared scenario construction for integration tests.

use ringcast::apps::AppKind;
use ringcast::scenario::{
    FaultDecl, NodeDecl, RegionDecl, RoleDecl, Scenario, SecRingDecl, TreeNodeDecl, WorkloadDecl,
};
use ringcast::time::SimDuration;
use ringcast::timing::derive_params;

pub fn ms(v: u64) -> SimDuration {
    SimDuration::from_millis(v)
}

fn tree_node(name: &str, parent: Option<&str>, delay: SimDuration, loss: f64) -> TreeNodeDecl {
    TreeNodeDecl { name: name.into(), parent: parent.map(str::to_string), delay, loss, line: 0 }
}

fn node(name: &str, role: RoleDecl, attach: Option<&str>) -> NodeDecl {
    NodeDecl { name: name.into(), role, attach: attach.map(str::to_string), line: 0 }
}

/// A ring of `m` primaries and `n_sources` sources spread over `hubs` hubs
/// with per-hub loss, plus two reformation servers on a clean hub.
pub fn ring_scenario(m: usize, n_sources: usize, hub_loss: f64, seed: u64) -> Scenario {
    let mut sc = Scenario { seed, ..Default::default() };
    sc.name = format!("ring-m{m}-s{n_sources}");
    sc.app = AppKind::Ticker;
    sc.timing = derive_params(ms(50), 3, SimDuration::ZERO, SimDuration::ZERO);
    let hubs = 4.min(m.max(2));
    sc.tree.push(tree_node("root", None, SimDuration::ZERO, 0.0));
    for h in 0..hubs {
        sc.tree.push(tree_node(&format!("hub{h}"), Some("root"), ms(8 + h as u64), hub_loss));
    }
    // clean hub for control infrastructure
    sc.tree.push(tree_node("hubx", Some("root"), ms(6), 0.0));
    sc.tree.push(tree_node("leafx", Some("hubx"), ms(1), 0.0));
    for i in 0..m {
        let hub = format!("hub{}", i % hubs);
        let leaf = format!("p{i}");
        sc.tree.push(tree_node(&leaf, Some(&hub), ms(1 + (i % 3) as u64), 0.0));
        sc.nodes.push(node(&format!("rp{i}"), RoleDecl::Primary, Some(&leaf)));
        sc.ring.push(format!("rp{i}"));
    }
    for s in 0..n_sources {
        let hub = format!("hub{}", s % hubs);
        let leaf = format!("s{s}");
        sc.tree.push(tree_node(&leaf, Some(&hub), ms(2), 0.0));
        sc.nodes
            .push(node(&format!("src{s}"), RoleDecl::Source { tag: None }, Some(&leaf)));
    }
    sc.nodes.push(node("xr0", RoleDecl::Reformer, Some("leafx")));
    sc.nodes.push(node("xr1", RoleDecl::Reformer, Some("leafx")));
    sc
}

/// Adds a tick stream split evenly across the scenario's sources.
pub fn with_tick_stream(mut sc: Scenario, total: u64, every: SimDuration) -> Scenario {
    let sources: Vec<String> = sc
        .nodes
        .iter()
        .filter(|n| matches!(n.role, RoleDecl::Source { .. }))
        .map(|n| n.name.clone())
        .collect();
    let per = (total / sources.len() as u64).max(1);
    for (i, source) in sources.iter().enumerate() {
        sc.workload.push(WorkloadDecl::TickStream {
            source: source.clone(),
            symbol: format!("SYM{}", i % 7),
            start: ms(200) + SimDuration(i as u64 * 1000),
            every: every * sources.len() as u64,
            count: per,
        });
    }
    let span = every * total;
    sc.horizon = ms(200) + span + SimDuration(sc.timing.tau_t.0 * 30);
    sc
}

pub fn crash(mut sc: Scenario, node: &str, at: SimDuration) -> Scenario {
    sc.faults.push(FaultDecl::Crash { node: node.into(), at });
    sc
}

/// Attaches a secondary ring of `k` members to the scenario, assigned to
/// (and repaired by an endpoint at) `rp`.
pub fn with_secondary_ring(mut sc: Scenario, k: usize, rp: &str) -> Scenario {
    let mut order = Vec::new();
    for i in 0..k {
        let leaf = format!("sleaf{i}");
        sc.tree.push(tree_node(&leaf, Some("hub0"), ms(2), 0.0));
        let name = format!("rs{i}");
        sc.nodes.push(node(&name, RoleDecl::Secondary { assigned: rp.into() }, Some(&leaf)));
        order.push(name);
    }
    order.push(rp.to_string());
    sc.sec_rings.push(SecRingDecl { name: "sring0".into(), order });
    sc.nodes.push(node("rx0", RoleDecl::Repair { host: rp.into() }, None));
    sc
}

/// Adds a region with customers under `rt`, with the given fallback.
pub fn with_customers(
    mut sc: Scenario,
    rt: &str,
    fallback: &str,
    guaranteed: usize,
    best_effort: usize,
    hub_loss: f64,
) -> Scenario {
    use ringcast::layering::ServiceGrade;
    if !sc.nodes.iter().any(|n| matches!(&n.role, RoleDecl::Repair { host } if host == rt)) {
        sc.nodes.push(node(&format!("rx.{rt}"), RoleDecl::Repair { host: rt.into() }, None));
    }
    sc.regions.push(RegionDecl {
        rt: rt.into(),
        hub_delay: ms(4),
        hub_loss,
        leaf_delay: ms(1),
    });
    for i in 0..guaranteed + best_effort {
        let grade = if i < guaranteed { ServiceGrade::Guaranteed } else { ServiceGrade::BestEffort };
        sc.nodes.push(node(
            &format!("c.{rt}.{i}"),
            RoleDecl::Customer {
                region: rt.into(),
                fallback: Some(fallback.into()),
                grade,
                exchange: false,
            },
            None,
        ));
    }
    sc
}
