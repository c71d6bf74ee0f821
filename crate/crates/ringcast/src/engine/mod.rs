//! Scenario-driven simulation engine: builds the node set, drives every
//! handler from one deterministic event loop, and records the trace.

pub mod core;
pub mod edge;
pub mod messages;
pub mod passive;
pub mod primary;
pub mod recovery;
pub mod reformer;
pub mod secmember;
pub mod source;

use self::core::RingView;
use self::edge::CustomerNode;
use self::messages::{Action, RunCfg, TimerTag, Wire};
use self::passive::{RepairNode, SecondaryNode};
use self::primary::PrimaryNode;
use self::reformer::ReformerNode;
use self::secmember::SecMember;
use self::source::SourceNode;
use crate::apps::floor::{Accounts, TradeEvent};
use crate::apps::{AppRecord, OrderPayload, Price, Side};
use crate::layering::ServiceGrade;
use crate::protocol::NodeId;
use crate::scenario::{FaultDecl, RoleDecl, Scenario, ScenarioError, WorkloadDecl};
use crate::simnet::trace::{kind, Trace, TraceRecord};
use crate::simnet::{fnv1a, Net, Tree};
use crate::time::{SimDuration, SimTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

pub(crate) fn chain_hash(prev: u64, g: u64, payload: &[u8]) -> u64 {
    let mut h = prev ^ fnv1a(&g.to_le_bytes());
    h = h.rotate_left(13);
    h ^ fnv1a(payload)
}

/// Per-symbol released byte totals for stripe accounting (ticker payloads
/// only).
pub(crate) fn tick_symbol_bytes(records: &[messages::ReleasedRecord]) -> Option<String> {
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    for r in records {
        if let Ok(AppRecord::Tick { symbol, .. }) = AppRecord::decode(&r.payload) {
            *totals.entry(symbol).or_insert(0) += r.payload.len() as u64;
        }
    }
    if totals.is_empty() {
        return None;
    }
    Some(
        totals
            .into_iter()
            .map(|(s, b)| format!("{s}:{b}"))
            .collect::<Vec<_>>()
            .join(";"),
    )
}

#[derive(Debug)]
enum NodeBody {
    Primary(PrimaryNode),
    Secondary(SecondaryNode),
    Repair(RepairNode),
    Source(SourceNode),
    Customer(CustomerNode),
    Reformer(ReformerNode),
}

#[derive(Debug)]
struct Slot {
    body: NodeBody,
    alive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EventKind {
    Deliver(Wire),
    Timer(TimerTag),
    Submit(AppRecord),
    Crash,
    Recover,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Event {
    at: SimTime,
    seq: u64,
    target: NodeId,
    kind: EventKind,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunExit {
    /// Quiesced or reached the horizon cleanly.
    Clean,
    /// Every reformation server was exhausted.
    TotalFailure,
}

/// Final protocol state of one receiver, for direct assertions in tests.
#[derive(Debug, Clone)]
pub struct ReceiverSummary {
    pub role: &'static str,
    pub next_token: u64,
    pub committed: Vec<(u64, String, u64)>,
    pub release_hash: u64,
    pub released_through: u64,
    pub replay_fills: Vec<crate::apps::book::Fill>,
    pub confirmed_trades: Vec<TradeEvent>,
    pub crashed: bool,
}

#[derive(Debug, Clone)]
pub struct CustomerSummary {
    pub grade: ServiceGrade,
    pub exchange: bool,
    pub delivered_count: u64,
    pub delivered_hash: u64,
    pub lost: Vec<u64>,
    pub region: String,
    pub crashed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct FinalStates {
    pub receivers: BTreeMap<String, ReceiverSummary>,
    pub customers: BTreeMap<String, CustomerSummary>,
}

pub struct Engine {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    nodes: BTreeMap<NodeId, Slot>,
    net: Net,
    regions: BTreeMap<NodeId, Tree>,
    region_owner_of: BTreeMap<NodeId, NodeId>,
    cfg: RunCfg,
    trace: Trace,
    horizon: SimTime,
    seed: u64,
    inflight: i64,
    workload_pending: u64,
    idle_emits: u64,
    quiesce_threshold: u64,
    halted: Option<RunExit>,
}

impl Engine {
    pub fn build(sc: &Scenario) -> Result<Engine, ScenarioError> {
        sc.validate()?;
        let mut names: BTreeMap<NodeId, String> = BTreeMap::new();
        let mut ids: BTreeMap<String, NodeId> = BTreeMap::new();
        for (i, n) in sc.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            names.insert(id, n.name.clone());
            ids.insert(n.name.clone(), id);
        }
        let id_of = |name: &str| *ids.get(name).expect("validated name");

        // global tree
        let mut global = Tree::default();
        for t in &sc.tree {
            global
                .add_node(&t.name, t.parent.as_deref(), t.delay, t.loss)
                .expect("validated tree");
        }
        for n in &sc.nodes {
            let attach = match &n.role {
                RoleDecl::Repair { host } => sc.node(host).and_then(|h| h.attach.clone()),
                RoleDecl::Customer { .. } => None,
                _ => n.attach.clone(),
            };
            if let Some(at) = attach.or_else(|| n.attach.clone()) {
                global.attach(id_of(&n.name), &at).expect("validated attach");
            }
        }

        // region trees: one star per R_T that has customers or a repair
        // endpoint
        let mut regions: BTreeMap<NodeId, Tree> = BTreeMap::new();
        let mut region_owner_of: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let region_decl = |rt: &str| {
            sc.regions
                .iter()
                .find(|r| r.rt == rt)
                .map(|r| (r.hub_delay, r.hub_loss, r.leaf_delay))
                .unwrap_or((SimDuration::from_millis(5), 0.0, SimDuration::from_millis(1)))
        };
        let mut region_customers: BTreeMap<String, Vec<&crate::scenario::NodeDecl>> = BTreeMap::new();
        for n in &sc.nodes {
            if let RoleDecl::Customer { region, fallback, .. } = &n.role {
                region_customers.entry(region.clone()).or_default().push(n);
                if let Some(f) = fallback {
                    region_customers.entry(f.clone()).or_default().push(n);
                }
            }
        }
        for n in &sc.nodes {
            let rt_name = match &n.role {
                RoleDecl::Primary | RoleDecl::Secondary { .. } => &n.name,
                _ => continue,
            };
            let has_rx = sc
                .nodes
                .iter()
                .any(|r| matches!(&r.role, RoleDecl::Repair { host } if host == rt_name));
            let custs = region_customers.get(rt_name.as_str());
            if !has_rx && custs.is_none() {
                continue;
            }
            let (hub_delay, hub_loss, leaf_delay) = region_decl(rt_name);
            let mut tree = Tree::default();
            let root = format!("rgn.{rt_name}");
            let hub = format!("rgn.{rt_name}.hub");
            tree.add_node(&root, None, SimDuration::ZERO, 0.0).unwrap();
            tree.add_node(&hub, Some(&root), hub_delay, hub_loss).unwrap();
            tree.attach(id_of(rt_name), &root).unwrap();
            for r in sc.nodes.iter() {
                if matches!(&r.role, RoleDecl::Repair { host } if host == rt_name) {
                    tree.attach(id_of(&r.name), &root).unwrap();
                }
            }
            if let Some(custs) = custs {
                for c in custs {
                    let leaf = format!("rgn.{rt_name}.{}", c.name);
                    tree.add_node(&leaf, Some(&hub), leaf_delay, 0.0).unwrap();
                    tree.attach(id_of(&c.name), &leaf).unwrap();
                }
            }
            let rt_id = id_of(rt_name);
            regions.insert(rt_id, tree);
            region_owner_of.insert(rt_id, rt_id);
            for r in sc.nodes.iter() {
                if matches!(&r.role, RoleDecl::Repair { host } if host == rt_name) {
                    region_owner_of.insert(id_of(&r.name), rt_id);
                }
            }
        }

        // colocated endpoints: zero-delay internal links
        let mut internal_pairs = Vec::new();
        for n in &sc.nodes {
            if let RoleDecl::Repair { host } = &n.role {
                internal_pairs.push((id_of(&n.name), id_of(host)));
            }
        }

        let net = Net {
            seed: sc.seed,
            global,
            regions: BTreeMap::new(),
            unicast_delay_override: BTreeMap::new(),
            unicast_loss: sc.unicast_loss,
            internal_pairs,
            pair_counters: Default::default(),
        };

        let ring: Vec<NodeId> = sc.ring.iter().map(|n| id_of(n)).collect();
        let cfg = RunCfg {
            timing: sc.timing,
            k_cap: sc.k_cap,
            nack_enabled: sc.nack_enabled,
            k_p: sc.nack_k_p,
            app: sc.app,
            price_rule: sc.price_rule,
            trade_feed: sc.trade_feed,
            policy: sc.policy,
            start_token_plus_one: sc.start_token_plus_one,
            xr_order: sc.reformers().iter().map(|n| id_of(n)).collect(),
            names: names.clone(),
            join_window: sc.timing.tau_r * 2,
        };

        let ring_view = RingView { members: ring.clone(), epoch: SimTime::ZERO, base: 1, site0_pos: 0 };

        // per-node clock skew
        let skew_of = |name: &str| -> i64 {
            if sc.clock_skew == SimDuration::ZERO {
                return 0;
            }
            let mut rng = purpose_rng(sc.seed, "skew", name);
            let eps = sc.clock_skew.0 as i64;
            rng.gen_range(-eps..=eps)
        };

        // secondary ring memberships
        let mut sec_of: BTreeMap<NodeId, SecMember> = BTreeMap::new();
        let mut sec_rings_by_id: BTreeMap<u16, Vec<NodeId>> = BTreeMap::new();
        for (i, sr) in sc.sec_rings.iter().enumerate() {
            let order: Vec<NodeId> = sr.order.iter().map(|n| id_of(n)).collect();
            sec_rings_by_id.insert(i as u16, order.clone());
            for member in &order {
                sec_of.insert(*member, SecMember::new(i as u16, order.clone(), *member));
            }
        }

        // repair endpoints per R_T
        let mut rx_of: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for n in &sc.nodes {
            if let RoleDecl::Repair { host } = &n.role {
                rx_of.insert(id_of(host), id_of(&n.name));
            }
        }

        // per-gateway accounts
        let mut accounts_by_source: BTreeMap<NodeId, Accounts> = BTreeMap::new();
        let default_gateway = sc.sources().next().map(|n| id_of(&n.name));
        for a in &sc.accounts {
            let gw = a.via.as_ref().map(|v| id_of(v)).or(default_gateway);
            if let Some(gw) = gw {
                accounts_by_source.entry(gw).or_default().add_trader(
                    &a.trader,
                    a.funds.0,
                    a.positions.clone(),
                );
            }
        }

        let mut nodes: BTreeMap<NodeId, Slot> = BTreeMap::new();
        for n in &sc.nodes {
            let id = id_of(&n.name);
            let has_region = regions.contains_key(&id);
            let body = match &n.role {
                RoleDecl::Primary => NodeBody::Primary(PrimaryNode::new(
                    id,
                    ring_view.clone(),
                    skew_of(&n.name),
                    has_region,
                    sec_of.get(&id).cloned(),
                )),
                RoleDecl::Secondary { assigned } => {
                    let rx = rx_of[&id_of(assigned)];
                    NodeBody::Secondary(SecondaryNode::new(
                        id,
                        ring_view.clone(),
                        rx,
                        sec_of.get(&id).cloned(),
                        has_region,
                        skew_of(&n.name),
                    ))
                }
                RoleDecl::Repair { host } => {
                    NodeBody::Repair(RepairNode::new(id, ring_view.clone(), id_of(host)))
                }
                RoleDecl::Source { tag } => NodeBody::Source(SourceNode::new(
                    id,
                    tag.unwrap_or_else(|| fnv1a(n.name.as_bytes())),
                    accounts_by_source.remove(&id).unwrap_or_default(),
                )),
                RoleDecl::Reformer => NodeBody::Reformer(ReformerNode::new(
                    id,
                    ring.clone(),
                    sec_rings_by_id.clone(),
                )),
                RoleDecl::Customer { region, fallback, grade, exchange } => {
                    NodeBody::Customer(CustomerNode::new(
                        id,
                        *grade,
                        id_of(region),
                        fallback.as_ref().map(|f| id_of(f)),
                        rx_of
                            .iter()
                            .map(|(rt, rx)| (*rt, *rx))
                            .collect(),
                        *exchange,
                    ))
                }
            };
            nodes.insert(id, Slot { body, alive: true });
        }

        let mut engine = Engine {
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            net,
            regions,
            region_owner_of,
            cfg,
            trace: Trace::default(),
            horizon: SimTime::ZERO + sc.horizon,
            seed: sc.seed,
            inflight: 0,
            workload_pending: 0,
            idle_emits: 0,
            quiesce_threshold: (2 * ring.len() as u64 + 2).max(6),
            halted: None,
        };
        engine.write_meta(sc, &ring);
        engine.schedule_workload(sc, &ids)?;
        engine.schedule_faults(sc, &ids);
        Ok(engine)
    }

    fn write_meta(&mut self, sc: &Scenario, ring: &[NodeId]) {
        let t = &sc.timing;
        let names = &self.cfg.names;
        let join = |list: &[NodeId]| {
            list.iter().map(|n| names[n].clone()).collect::<Vec<_>>().join(";")
        };
        self.trace.push(
            TraceRecord::new(SimTime::ZERO, "-", kind::META)
                .field("format", 1)
                .field("name", sc.name.replace(['\t', ' '], "_"))
                .field("seed", sc.seed)
                .field("app", sc.app.name())
                .field("m", ring.len())
                .field("tau_t", t.tau_t.0)
                .field("tau_r", t.tau_r.0)
                .field("delta_a", t.delta_a.0)
                .field("delta_n", t.delta_n.0)
                .field("k_r", t.k_r)
                .field("k_p", sc.nack_k_p)
                .field("nack", u64::from(sc.nack_enabled))
                .field("skew", sc.clock_skew.0)
                .field("unfair", u64::from(t.delta_a == SimDuration::ZERO)),
        );
        self.trace.push(
            TraceRecord::new(SimTime::ZERO, "-", kind::META)
                .field("ring", join(ring))
                .field("site0", names[&ring[0]].clone()),
        );
        let secondaries: Vec<NodeId> = sc
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.role, RoleDecl::Secondary { .. }))
            .map(|(i, _)| NodeId(i as u32))
            .collect();
        let repairs: Vec<NodeId> = sc
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.role, RoleDecl::Repair { .. }))
            .map(|(i, _)| NodeId(i as u32))
            .collect();
        self.trace.push(
            TraceRecord::new(SimTime::ZERO, "-", kind::META)
                .field("secondaries", join(&secondaries))
                .field("repairs", join(&repairs)),
        );
        if let Some(striping) = &sc.striping {
            if let Ok(table) = crate::layering::assign_stripes(&striping.symbol_rates, striping.budget) {
                let rendered = table
                    .stripes
                    .iter()
                    .flat_map(|s| s.symbols.iter().map(move |sym| format!("{sym}:{}", s.id)))
                    .collect::<Vec<_>>()
                    .join(";");
                self.trace.push(
                    TraceRecord::new(SimTime::ZERO, "-", kind::META)
                        .field("stripe_budget", striping.budget)
                        .field("stripe_table", rendered),
                );
            }
        }
    }

    fn schedule_workload(&mut self, sc: &Scenario, ids: &BTreeMap<String, NodeId>) -> Result<(), ScenarioError> {
        let start = SimTime::ZERO;
        let mut submits: Vec<(SimTime, NodeId, AppRecord)> = Vec::new();
        for (wi, w) in sc.workload.iter().enumerate() {
            match w {
                WorkloadDecl::Tick { at, source, symbol, price, qty } => {
                    submits.push((
                        start + *at,
                        ids[source],
                        AppRecord::Tick { symbol: symbol.clone(), price: *price, qty: *qty },
                    ));
                }
                WorkloadDecl::TickStream { source, symbol, start: s0, every, count } => {
                    let mut rng = purpose_rng(sc.seed, "tick", &format!("{wi}.{source}.{symbol}"));
                    let mut price = 100_0000i64;
                    for j in 0..*count {
                        price += rng.gen_range(-500i64..=500);
                        price = price.max(1_0000);
                        submits.push((
                            start + *s0 + *every * j,
                            ids[source],
                            AppRecord::Tick {
                                symbol: symbol.clone(),
                                price: Price(price as u64),
                                qty: rng.gen_range(1..=500),
                            },
                        ));
                    }
                }
                WorkloadDecl::Order { at, via, order } => {
                    submits.push((start + *at, ids[via], AppRecord::Order(order.clone())));
                }
                WorkloadDecl::OrderFlow { via, traders, symbol, start: s0, every, count } => {
                    let mut rng = purpose_rng(sc.seed, "flow", &format!("{wi}.{via}"));
                    for j in 0..*count {
                        let trader = traders[rng.gen_range(0..traders.len())].clone();
                        let side = if rng.gen_bool(0.5) { Side::Buy } else { Side::Sell };
                        let price = Price::from_units(rng.gen_range(95..=105));
                        let qty = rng.gen_range(1..=10);
                        submits.push((
                            start + *s0 + *every * j,
                            ids[via],
                            AppRecord::Order(OrderPayload::Limit {
                                trader,
                                side,
                                symbol: symbol.clone(),
                                price,
                                qty,
                            }),
                        ));
                    }
                }
                WorkloadDecl::PairTrials {
                    near_via,
                    far_via,
                    near_trader,
                    far_trader,
                    symbol,
                    start: s0,
                    spacing,
                    count,
                } => {
                    let mut rng = purpose_rng(sc.seed, "pairs", &format!("{wi}"));
                    let cycle = sc.timing.tau_t.0 * sc.ring.len() as u64;
                    for j in 0..*count {
                        let phase = SimDuration(rng.gen_range(0..cycle.max(1)));
                        let at = start + *s0 + *spacing * j + phase;
                        // both traders submit at the identical instant
                        for (via, trader) in [(near_via, near_trader), (far_via, far_trader)] {
                            submits.push((
                                at,
                                ids[via],
                                AppRecord::Order(OrderPayload::Limit {
                                    trader: trader.clone(),
                                    side: Side::Buy,
                                    symbol: symbol.clone(),
                                    price: Price::from_units(1),
                                    qty: 1,
                                }),
                            ));
                        }
                    }
                }
            }
        }
        submits.sort_by_key(|(at, id, _)| (*at, *id));
        self.workload_pending = submits.len() as u64;
        for (at, target, record) in submits {
            self.push_event(at, target, EventKind::Submit(record));
        }
        Ok(())
    }

    fn schedule_faults(&mut self, sc: &Scenario, ids: &BTreeMap<String, NodeId>) {
        for f in &sc.faults {
            match f {
                FaultDecl::Crash { node, at } => {
                    self.push_event(SimTime::ZERO + *at, ids[node], EventKind::Crash)
                }
                FaultDecl::Recover { node, at } => {
                    self.push_event(SimTime::ZERO + *at, ids[node], EventKind::Recover)
                }
            }
        }
    }

    fn push_event(&mut self, at: SimTime, target: NodeId, kind: EventKind) {
        if matches!(kind, EventKind::Deliver(_)) {
            self.inflight += 1;
        }
        self.seq += 1;
        self.queue.push(Reverse(Event { at, seq: self.seq, target, kind }));
    }

    /// Runs to quiescence, the horizon, or total failure.
    pub fn run(mut self) -> (Trace, FinalStates, RunExit) {
        // initial timers
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            let mut slot = self.nodes.remove(&id).unwrap();
            let mut out = Vec::new();
            match &mut slot.body {
                NodeBody::Primary(p) => p.start(self.now, &self.cfg, &mut out),
                NodeBody::Secondary(s) => s.start(self.now, &self.cfg, &mut out),
                NodeBody::Repair(r) => r.start(self.now, &self.cfg, &mut out),
                NodeBody::Customer(c) => c.start(self.now, &self.cfg, &mut out),
                _ => {}
            }
            self.nodes.insert(id, slot);
            self.process_actions(id, out);
        }

        while let Some(Reverse(ev)) = self.queue.pop() {
            if matches!(ev.kind, EventKind::Deliver(_)) {
                self.inflight -= 1;
            }
            if ev.at > self.horizon {
                self.trace.push(TraceRecord::new(self.horizon, "-", kind::HORIZON));
                break;
            }
            self.now = ev.at;
            self.dispatch(ev);
            if self.halted.is_some() {
                break;
            }
            if self.quiescent() {
                self.trace.push(TraceRecord::new(self.now, "-", kind::QUIESCE));
                break;
            }
        }
        let exit = self.halted.unwrap_or(RunExit::Clean);
        let finals = self.collect_finals();
        (self.trace, finals, exit)
    }

    fn dispatch(&mut self, ev: Event) {
        let Some(mut slot) = self.nodes.remove(&ev.target) else { return };
        let mut out = Vec::new();
        match (&ev.kind, slot.alive) {
            (EventKind::Crash, _) => {
                slot.alive = false;
                self.trace
                    .push(TraceRecord::new(self.now, self.cfg.name(ev.target), kind::CRASH));
            }
            (EventKind::Recover, _) => {
                slot.alive = true;
                slot.body = self.fresh_body(ev.target, &slot.body);
                self.trace
                    .push(TraceRecord::new(self.now, self.cfg.name(ev.target), kind::RECOVER));
            }
            (_, false) => {
                // dead nodes ignore traffic and timers
            }
            (EventKind::Submit(record), true) => {
                self.workload_pending -= 1;
                if let NodeBody::Source(s) = &mut slot.body {
                    s.submit(record.clone(), self.now, &self.cfg, &mut out);
                }
            }
            (EventKind::Deliver(wire), true) => match &mut slot.body {
                NodeBody::Primary(p) => p.on_deliver(wire.clone(), self.now, &self.cfg, &mut out),
                NodeBody::Secondary(s) => s.on_deliver(wire.clone(), self.now, &self.cfg, &mut out),
                NodeBody::Repair(r) => r.on_deliver(wire.clone(), self.now, &self.cfg, &mut out),
                NodeBody::Source(s) => s.on_deliver(wire.clone(), self.now, &self.cfg, &mut out),
                NodeBody::Customer(c) => c.on_deliver(wire.clone(), self.now, &self.cfg, &mut out),
                NodeBody::Reformer(x) => x.on_deliver(wire.clone(), self.now, &self.cfg, &mut out),
            },
            (EventKind::Timer(tag), true) => match &mut slot.body {
                NodeBody::Primary(p) => p.on_timer(*tag, self.now, &self.cfg, &mut out),
                NodeBody::Secondary(s) => s.on_timer(*tag, self.now, &self.cfg, &mut out),
                NodeBody::Repair(r) => r.on_timer(*tag, self.now, &self.cfg, &mut out),
                NodeBody::Source(s) => s.on_timer(*tag, self.now, &self.cfg, &mut out),
                NodeBody::Customer(c) => c.on_timer(*tag, self.now, &self.cfg, &mut out),
                NodeBody::Reformer(x) => x.on_timer(*tag, self.now, &self.cfg, &mut out),
            },
        }
        self.nodes.insert(ev.target, slot);
        self.process_actions(ev.target, out);
    }

    fn fresh_body(&self, id: NodeId, old: &NodeBody) -> NodeBody {
        // fail-stop restart: protocol state is gone; the node rejoins only
        // through a reformation invitation
        match old {
            NodeBody::Primary(p) => {
                let mut fresh = PrimaryNode::new(id, p.core.ring.clone(), p.skew_us, p.has_region, p.sec.clone());
                fresh.in_ring = false;
                NodeBody::Primary(fresh)
            }
            NodeBody::Secondary(s) => NodeBody::Secondary(SecondaryNode::new(
                id,
                s.core.ring.clone(),
                s.core.fixed_target.unwrap_or(id),
                s.sec.clone(),
                s.has_region,
                s.skew_us,
            )),
            NodeBody::Repair(r) => NodeBody::Repair(RepairNode::new(id, r.core.ring.clone(), r.host)),
            NodeBody::Source(s) => NodeBody::Source(SourceNode::new(id, s.ss.identity_tag, s.accounts.clone())),
            NodeBody::Customer(c) => NodeBody::Customer(CustomerNode::new(
                id,
                c.cs.grade,
                c.region,
                c.fallback,
                c.rx_of.clone(),
                c.exchange,
            )),
            NodeBody::Reformer(x) => {
                NodeBody::Reformer(ReformerNode::new(id, x.known_ring.clone(), x.sec_rings.clone()))
            }
        }
    }

    fn process_actions(&mut self, from: NodeId, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Trace(rec) => {
                    if rec.kind == kind::EMIT {
                        match rec.get_u64("k") {
                            Some(0) => self.idle_emits += 1,
                            _ => self.idle_emits = 0,
                        }
                    }
                    self.trace.push(rec);
                }
                Action::Timer(at, tag) => {
                    self.push_event(at.max(self.now), from, EventKind::Timer(tag));
                }
                Action::Unicast(to, wire) => {
                    match self.net.unicast(from, to, self.now) {
                        Some(d) => self.push_event(d.at, d.to, EventKind::Deliver(wire)),
                        None => self.trace.push(
                            TraceRecord::new(self.now, "-", kind::DROP)
                                .field("path", format!("{}>{}", self.cfg.name(from), self.cfg.name(to))),
                        ),
                    }
                }
                Action::Multicast(wire, key) => {
                    let (deliveries, drops) = self.net.global.multicast(self.seed, from, self.now, key);
                    for d in drops {
                        let missed = d
                            .missed
                            .iter()
                            .map(|n| self.cfg.name(*n).to_string())
                            .collect::<Vec<_>>()
                            .join(";");
                        self.trace.push(
                            TraceRecord::new(self.now, "-", kind::DROP)
                                .field("at_tree", d.tree_node)
                                .field("missed", missed),
                        );
                    }
                    for d in deliveries {
                        self.push_event(d.at, d.to, EventKind::Deliver(wire.clone()));
                    }
                }
                Action::Region(wire, key) => {
                    let Some(owner) = self.region_owner_of.get(&from).copied() else { continue };
                    let Some(tree) = self.regions.get(&owner) else { continue };
                    let (deliveries, drops) = tree.multicast(self.seed, from, self.now, key);
                    for d in drops {
                        let missed = d
                            .missed
                            .iter()
                            .map(|n| self.cfg.name(*n).to_string())
                            .collect::<Vec<_>>()
                            .join(";");
                        self.trace.push(
                            TraceRecord::new(self.now, "-", kind::DROP)
                                .field("at_tree", d.tree_node)
                                .field("missed", missed),
                        );
                    }
                    for d in deliveries {
                        self.push_event(d.at, d.to, EventKind::Deliver(wire.clone()));
                    }
                }
                Action::TotalFailure => {
                    self.trace.push(TraceRecord::new(self.now, "-", kind::TOTAL_FAILURE));
                    self.halted = Some(RunExit::TotalFailure);
                }
            }
        }
    }

    fn quiescent(&self) -> bool {
        if self.workload_pending > 0 || self.inflight > 0 || self.idle_emits < self.quiesce_threshold {
            return false;
        }
        self.nodes.values().all(|slot| {
            !slot.alive
                || match &slot.body {
                    NodeBody::Primary(p) => p.quiet(),
                    NodeBody::Secondary(s) => s.quiet(),
                    NodeBody::Repair(r) => r.quiet(),
                    NodeBody::Source(s) => s.quiet(),
                    NodeBody::Customer(c) => c.quiet(),
                    NodeBody::Reformer(x) => x.quiet(),
                }
        })
    }

    fn collect_finals(&self) -> FinalStates {
        let mut finals = FinalStates::default();
        for (id, slot) in &self.nodes {
            let name = self.cfg.name(*id).to_string();
            match &slot.body {
                NodeBody::Primary(p) => {
                    finals.receivers.insert(
                        name,
                        ReceiverSummary {
                            role: "primary",
                            next_token: p.core.rs.next_token,
                            committed: committed_of(&p.core.rs, &self.cfg),
                            release_hash: p.release_hash,
                            released_through: p.released_through,
                            replay_fills: p.replayed_fills(&self.cfg),
                            confirmed_trades: p.arbiter.confirmed.clone(),
                            crashed: !slot.alive,
                        },
                    );
                }
                NodeBody::Secondary(s) => {
                    finals.receivers.insert(
                        name,
                        ReceiverSummary {
                            role: "secondary",
                            next_token: s.core.rs.next_token,
                            committed: committed_of(&s.core.rs, &self.cfg),
                            release_hash: s.release_hash,
                            released_through: s.released_through,
                            replay_fills: Vec::new(),
                            confirmed_trades: Vec::new(),
                            crashed: !slot.alive,
                        },
                    );
                }
                NodeBody::Repair(r) => {
                    finals.receivers.insert(
                        name,
                        ReceiverSummary {
                            role: "repair",
                            next_token: r.core.rs.next_token,
                            committed: committed_of(&r.core.rs, &self.cfg),
                            release_hash: 0,
                            released_through: 0,
                            replay_fills: Vec::new(),
                            confirmed_trades: Vec::new(),
                            crashed: !slot.alive,
                        },
                    );
                }
                NodeBody::Customer(c) => {
                    finals.customers.insert(
                        name,
                        CustomerSummary {
                            grade: c.cs.grade,
                            exchange: c.exchange,
                            delivered_count: c.delivered_count,
                            delivered_hash: c.delivered_hash,
                            lost: c.cs.permanently_lost.iter().copied().collect(),
                            region: self.cfg.name(c.region).to_string(),
                            crashed: !slot.alive,
                        },
                    );
                }
                _ => {}
            }
        }
        finals
    }
}

fn committed_of(rs: &crate::protocol::ReceiverState, cfg: &RunCfg) -> Vec<(u64, String, u64)> {
    rs.log
        .iter()
        .map(|(g, (msg, _))| (*g, cfg.name(msg.source).to_string(), msg.source_seq))
        .collect()
}

fn purpose_rng(seed: u64, purpose: &str, name: &str) -> ChaCha8Rng {
    let mix = seed ^ fnv1a(purpose.as_bytes()).rotate_left(17) ^ fnv1a(name.as_bytes());
    ChaCha8Rng::seed_from_u64(mix)
}
