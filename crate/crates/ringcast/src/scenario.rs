//! Scenario files: a flat, line-oriented format with section headers and
//! `key = value` pairs, validated against every module's invariants before a
//! run starts.

use crate::apps::book::PriceRule;
use crate::apps::{AppKind, OrderPayload, Price, Side};
use crate::layering::ServiceGrade;
use crate::nack::nack_sets;
use crate::reformation::ReformationPolicy;
use crate::time::{parse_duration, SimDuration};
use crate::timing::{derive_params, TimingParams};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

pub const FORMAT_TAG: &str = "ringcast-scenario v1";

#[derive(Debug, Error)]
#[error("scenario error at line {line}, field `{field}`: {reason}")]
pub struct ScenarioError {
    pub line: usize,
    pub field: String,
    pub reason: String,
}

impl ScenarioError {
    fn new(line: usize, field: &str, reason: impl fmt::Display) -> Self {
        ScenarioError { line, field: field.to_string(), reason: reason.to_string() }
    }
}

#[derive(Debug, Clone)]
pub struct TreeNodeDecl {
    pub name: String,
    pub parent: Option<String>,
    pub delay: SimDuration,
    pub loss: f64,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoleDecl {
    Source { tag: Option<u64> },
    Primary,
    Secondary { assigned: String },
    Repair { host: String },
    Reformer,
    Customer { region: String, fallback: Option<String>, grade: ServiceGrade, exchange: bool },
}

#[derive(Debug, Clone)]
pub struct NodeDecl {
    pub name: String,
    pub role: RoleDecl,
    /// Tree attachment; customers attach inside their region tree instead.
    pub attach: Option<String>,
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct RegionDecl {
    pub rt: String,
    pub hub_delay: SimDuration,
    pub hub_loss: f64,
    pub leaf_delay: SimDuration,
}

#[derive(Debug, Clone)]
pub struct SecRingDecl {
    pub name: String,
    pub order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadDecl {
    Tick { at: SimDuration, source: String, symbol: String, price: Price, qty: u64 },
    TickStream { source: String, symbol: String, start: SimDuration, every: SimDuration, count: u64 },
    Order { at: SimDuration, via: String, order: OrderPayload },
    OrderFlow { via: String, traders: Vec<String>, symbol: String, start: SimDuration, every: SimDuration, count: u64 },
    /// Paired near/far submissions at seeded phases for fairness trials.
    PairTrials {
        near_via: String,
        far_via: String,
        near_trader: String,
        far_trader: String,
        symbol: String,
        start: SimDuration,
        spacing: SimDuration,
        count: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultDecl {
    Crash { node: String, at: SimDuration },
    Recover { node: String, at: SimDuration },
}

#[derive(Debug, Clone)]
pub struct StripingDecl {
    pub budget: u64,
    pub symbol_rates: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct AccountDecl {
    pub trader: String,
    pub funds: Price,
    pub positions: Vec<(String, u64)>,
    pub via: Option<String>,
}

/// Which trade stream cmd_run writes to trades.out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TradeFeed {
    Tentative,
    Confirmed,
    Both,
}

/// A fully parsed scenario. `validate()` must pass before a run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub horizon: SimDuration,
    pub tree: Vec<TreeNodeDecl>,
    pub nodes: Vec<NodeDecl>,
    pub ring: Vec<String>,
    pub sec_rings: Vec<SecRingDecl>,
    pub regions: Vec<RegionDecl>,
    pub timing: TimingParams,
    pub k_cap: usize,
    pub clock_skew: SimDuration,
    pub nack_enabled: bool,
    pub nack_k_p: usize,
    pub app: AppKind,
    pub price_rule: PriceRule,
    pub trade_feed: TradeFeed,
    pub output_rt: Option<String>,
    pub policy: ReformationPolicy,
    pub start_token_plus_one: bool,
    pub unicast_loss: f64,
    pub accounts: Vec<AccountDecl>,
    pub workload: Vec<WorkloadDecl>,
    pub faults: Vec<FaultDecl>,
    pub striping: Option<StripingDecl>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "unnamed".into(),
            seed: 0,
            horizon: SimDuration::from_secs(60),
            tree: Vec::new(),
            nodes: Vec::new(),
            ring: Vec::new(),
            sec_rings: Vec::new(),
            regions: Vec::new(),
            timing: derive_params(SimDuration::from_millis(75), 3, SimDuration::ZERO, SimDuration::ZERO),
            k_cap: 1024,
            clock_skew: SimDuration::ZERO,
            nack_enabled: false,
            nack_k_p: 1,
            app: AppKind::Ticker,
            price_rule: PriceRule::SellerPrice,
            trade_feed: TradeFeed::Confirmed,
            output_rt: None,
            policy: ReformationPolicy::Ticker,
            start_token_plus_one: false,
            unicast_loss: 0.0,
            accounts: Vec::new(),
            workload: Vec::new(),
            faults: Vec::new(),
            striping: None,
        }
    }
}

impl Scenario {
    pub fn node(&self, name: &str) -> Option<&NodeDecl> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn sources(&self) -> impl Iterator<Item = &NodeDecl> {
        self.nodes.iter().filter(|n| matches!(n.role, RoleDecl::Source { .. }))
    }

    pub fn reformers(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.role == RoleDecl::Reformer)
            .map(|n| n.name.clone())
            .collect()
    }

    /// All R_T names: primaries plus secondaries.
    pub fn rt_nodes(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.role, RoleDecl::Primary | RoleDecl::Secondary { .. }))
            .map(|n| n.name.clone())
            .collect()
    }

    /// Cross-module validation. Errors name the offending field and the
    /// declaration line where one exists.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |line: usize, field: &str, reason: String| Err(ScenarioError::new(line, field, reason));

        // tree shape
        let mut tree_names = BTreeSet::new();
        let mut roots = 0;
        for t in &self.tree {
            if !tree_names.insert(t.name.clone()) {
                return err(t.line, "node", format!("duplicate tree node `{}`", t.name));
            }
            match &t.parent {
                None => roots += 1,
                Some(p) => {
                    if !tree_names.contains(p) {
                        return err(t.line, "parent", format!("unknown parent `{p}` (declare parents first)"));
                    }
                }
            }
            if !(0.0..=1.0).contains(&t.loss) {
                return err(t.line, "loss", format!("loss {} outside [0,1]", t.loss));
            }
        }
        if self.tree.is_empty() {
            return err(0, "tree", "no tree nodes declared".into());
        }
        if roots != 1 {
            return err(self.tree[0].line, "parent", format!("tree must have exactly one root, found {roots}"));
        }
        if !(0.0..=1.0).contains(&self.unicast_loss) {
            return err(0, "unicast_loss", format!("{} outside [0,1]", self.unicast_loss));
        }

        // node declarations
        let mut names = BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(n.name.clone()) {
                return err(n.line, "name", format!("duplicate node `{}`", n.name));
            }
            if let Some(at) = &n.attach {
                if !tree_names.contains(at) {
                    return err(n.line, "attach", format!("unknown tree node `{at}`"));
                }
            }
            let needs_attach = !matches!(n.role, RoleDecl::Customer { .. } | RoleDecl::Repair { .. });
            if needs_attach && n.attach.is_none() {
                return err(n.line, "attach", format!("node `{}` needs a tree attachment", n.name));
            }
        }
        let is_role = |name: &str, want: fn(&RoleDecl) -> bool| self.node(name).map(|n| want(&n.role)).unwrap_or(false);
        let is_primary = |name: &str| is_role(name, |r| matches!(r, RoleDecl::Primary));
        let is_rt = |name: &str| is_role(name, |r| matches!(r, RoleDecl::Primary | RoleDecl::Secondary { .. }));

        // ring
        if self.ring.is_empty() {
            return err(0, "ring", "primary ring is empty".into());
        }
        let mut seen = BTreeSet::new();
        for name in &self.ring {
            if !is_primary(name) {
                return err(0, "ring", format!("ring member `{name}` is not a declared primary"));
            }
            if !seen.insert(name) {
                return err(0, "ring", format!("ring member `{name}` repeated"));
            }
        }
        for n in &self.nodes {
            if matches!(n.role, RoleDecl::Primary) && !self.ring.contains(&n.name) {
                return err(n.line, "ring", format!("primary `{}` missing from the ring", n.name));
            }
        }

        // nack parameters against the ring
        let m = self.ring.len();
        if let Err(e) = nack_sets(0, m, self.nack_k_p) {
            return err(0, "nack_k_p", e.to_string());
        }

        // timing invariants (delta_a = 0 is the documented unfair mode)
        if let Err(e) = self.timing.validate() {
            return err(0, "timing", e.to_string());
        }
        if self.k_cap == 0 {
            return err(0, "k_cap", "k_cap must be at least 1".into());
        }

        // secondary rings: exactly one bridging primary, members declared,
        // assigned primaries exist
        let mut in_sec_ring: BTreeSet<String> = BTreeSet::new();
        for sr in &self.sec_rings {
            let bridges: Vec<&String> = sr.order.iter().filter(|n| is_primary(n)).collect();
            if bridges.len() != 1 {
                return err(0, "secring", format!(
                    "secondary ring `{}` must contain exactly one primary, found {}",
                    sr.name,
                    bridges.len()
                ));
            }
            if *bridges[0] != sr.order[sr.order.len() - 1] {
                return err(0, "secring", format!("secondary ring `{}`: the bridging primary sits last", sr.name));
            }
            for member in &sr.order[..sr.order.len() - 1] {
                match self.node(member).map(|n| &n.role) {
                    Some(RoleDecl::Secondary { .. }) => {}
                    _ => return err(0, "secring", format!("`{member}` in ring `{}` is not a secondary", sr.name)),
                }
                if !in_sec_ring.insert(member.clone()) {
                    return err(0, "secring", format!("secondary `{member}` appears in two rings"));
                }
            }
        }
        for n in &self.nodes {
            match &n.role {
                RoleDecl::Secondary { assigned } => {
                    if !is_primary(assigned) {
                        return err(n.line, "assigned", format!("assigned `{assigned}` is not a primary"));
                    }
                    if !in_sec_ring.contains(&n.name) {
                        return err(n.line, "secring", format!("secondary `{}` belongs to no secondary ring", n.name));
                    }
                    let has_rx = self
                        .nodes
                        .iter()
                        .any(|r| matches!(&r.role, RoleDecl::Repair { host } if host == assigned));
                    if !has_rx {
                        return err(n.line, "assigned", format!(
                            "assigned primary `{assigned}` needs a colocated repair endpoint to support `{}`",
                            n.name
                        ));
                    }
                }
                RoleDecl::Repair { host } => {
                    if !is_rt(host) {
                        return err(n.line, "host", format!("repair host `{host}` is not an R_T"));
                    }
                }
                RoleDecl::Customer { region, fallback, grade, .. } => {
                    if !is_rt(region) {
                        return err(n.line, "region", format!("customer region `{region}` is not an R_T"));
                    }
                    match fallback {
                        None => {
                            return err(n.line, "fallback", format!(
                                "customer `{}` needs a fallback R_T (two remulticast sources)",
                                n.name
                            ))
                        }
                        Some(f) => {
                            if !is_rt(f) {
                                return err(n.line, "fallback", format!("fallback `{f}` is not an R_T"));
                            }
                            if f == region {
                                return err(n.line, "fallback", "fallback must differ from the region".into());
                            }
                        }
                    }
                    if *grade == ServiceGrade::Guaranteed {
                        let has_rx = self
                            .nodes
                            .iter()
                            .any(|r| matches!(&r.role, RoleDecl::Repair { host } if host == region));
                        if !has_rx {
                            return err(n.line, "grade", format!(
                                "guaranteed customer `{}` needs a repair endpoint at region `{region}`",
                                n.name
                            ));
                        }
                    }
                }
                _ => {}
            }
        }
        for r in &self.regions {
            if !is_rt(&r.rt) {
                return err(0, "region", format!("region owner `{}` is not an R_T", r.rt));
            }
            if !(0.0..=1.0).contains(&r.hub_loss) {
                return err(0, "hub_loss", format!("{} outside [0,1]", r.hub_loss));
            }
        }

        // reformation servers must exist when failures are scheduled
        if self.reformers().is_empty() && !self.faults.is_empty() {
            return err(0, "reformer", "fault schedules need at least one reformation server".into());
        }

        // app inputs
        for a in &self.accounts {
            if let Some(via) = &a.via {
                if self.node(via).map(|n| !matches!(n.role, RoleDecl::Source { .. })).unwrap_or(true) {
                    return err(0, "via", format!("account gateway `{via}` is not a source"));
                }
            }
        }
        let trader_known = |t: &str| self.accounts.iter().any(|a| a.trader == t);
        for w in &self.workload {
            match w {
                WorkloadDecl::Tick { source, .. } | WorkloadDecl::TickStream { source, .. } => {
                    if self.node(source).map(|n| !matches!(n.role, RoleDecl::Source { .. })).unwrap_or(true) {
                        return err(0, "source", format!("workload source `{source}` is not a source"));
                    }
                }
                WorkloadDecl::Order { via, order, .. } => {
                    if self.node(via).is_none() {
                        return err(0, "via", format!("order gateway `{via}` undeclared"));
                    }
                    if self.app != AppKind::Ticker && !trader_known(order.trader()) {
                        return err(0, "trader", format!("trader `{}` has no account", order.trader()));
                    }
                }
                WorkloadDecl::OrderFlow { via, traders, .. } => {
                    if self.node(via).is_none() {
                        return err(0, "via", format!("order gateway `{via}` undeclared"));
                    }
                    for t in traders {
                        if !trader_known(t) {
                            return err(0, "trader", format!("trader `{t}` has no account"));
                        }
                    }
                }
                WorkloadDecl::PairTrials { near_via, far_via, .. } => {
                    for v in [near_via, far_via] {
                        if self.node(v).is_none() {
                            return err(0, "via", format!("trial gateway `{v}` undeclared"));
                        }
                    }
                }
            }
        }

        // striping: every symbol must fit the budget
        if let Some(s) = &self.striping {
            if let Err(e) = crate::layering::assign_stripes(&s.symbol_rates, s.budget) {
                return err(0, "striping", e.to_string());
            }
        }

        // faults reference known nodes
        for f in &self.faults {
            let node = match f {
                FaultDecl::Crash { node, .. } | FaultDecl::Recover { node, .. } => node,
            };
            if self.node(node).is_none() {
                return err(0, "faults", format!("fault names unknown node `{node}`"));
            }
        }
        if let Some(rt) = &self.output_rt {
            if !is_rt(rt) {
                return err(0, "output_rt", format!("output_rt `{rt}` is not an R_T"));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        parse_scenario(text)
    }

    pub fn to_text(&self) -> String {
        render_scenario(self)
    }
}

// ---------------------------------------------------------------------------
// parsing

struct LineCtx<'a> {
    line: usize,
    key: &'a str,
    bare: Vec<&'a str>,
    kv: BTreeMap<&'a str, &'a str>,
}

impl<'a> LineCtx<'a> {
    fn get(&self, k: &str) -> Option<&'a str> {
        self.kv.get(k).copied()
    }

    fn req(&self, k: &str) -> Result<&'a str, ScenarioError> {
        self.get(k).ok_or_else(|| ScenarioError::new(self.line, k, "missing field"))
    }

    fn parse_u64(&self, k: &str, v: &str) -> Result<u64, ScenarioError> {
        v.parse().map_err(|_| ScenarioError::new(self.line, k, format!("`{v}` is not an integer")))
    }

    fn req_u64(&self, k: &str) -> Result<u64, ScenarioError> {
        self.parse_u64(k, self.req(k)?)
    }

    fn parse_f64(&self, k: &str, v: &str) -> Result<f64, ScenarioError> {
        v.parse().map_err(|_| ScenarioError::new(self.line, k, format!("`{v}` is not a number")))
    }

    fn parse_dur(&self, k: &str, v: &str) -> Result<SimDuration, ScenarioError> {
        parse_duration(v).map_err(|e| ScenarioError::new(self.line, k, e))
    }

    fn req_dur(&self, k: &str) -> Result<SimDuration, ScenarioError> {
        self.parse_dur(k, self.req(k)?)
    }

    fn req_price(&self, k: &str) -> Result<Price, ScenarioError> {
        let v = self.req(k)?;
        Price::parse(v).ok_or_else(|| ScenarioError::new(self.line, k, format!("`{v}` is not a price")))
    }
}

fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut lines = text.lines().enumerate();
    let Some((_, first)) = lines.next() else {
        return Err(ScenarioError::new(1, "format", "empty file"));
    };
    if first.trim() != FORMAT_TAG {
        return Err(ScenarioError::new(1, "format", format!("expected `{FORMAT_TAG}` on line 1")));
    }

    let mut sc = Scenario::default();
    let mut section = String::new();
    let mut timing_base: (SimDuration, u32, SimDuration, SimDuration) =
        (SimDuration::from_millis(75), 3, SimDuration::ZERO, SimDuration::ZERO);
    let mut timing_overrides: BTreeMap<String, SimDuration> = BTreeMap::new();
    let mut striping: Option<StripingDecl> = None;

    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let Some((key, rest)) = line.split_once('=') else {
            return Err(ScenarioError::new(lineno, "line", "expected `key = value`"));
        };
        let key = key.trim();
        let mut bare = Vec::new();
        let mut kv = BTreeMap::new();
        for tok in rest.split_whitespace() {
            match tok.split_once('=') {
                Some((k, v)) => {
                    kv.insert(k, v);
                }
                None => bare.push(tok),
            }
        }
        let ctx = LineCtx { line: lineno, key, bare, kv };
        apply_line(&mut sc, &section, &ctx, &mut timing_base, &mut timing_overrides, &mut striping)?;
    }

    sc.timing = derive_params(timing_base.0, timing_base.1, timing_base.2, timing_base.3);
    for (k, v) in &timing_overrides {
        match k.as_str() {
            "tau_t" => sc.timing.tau_t = *v,
            "tau_r" => sc.timing.tau_r = *v,
            "delta_a" => sc.timing.delta_a = *v,
            _ => unreachable!(),
        }
    }
    sc.striping = striping;
    Ok(sc)
}

fn apply_line(
    sc: &mut Scenario,
    section: &str,
    ctx: &LineCtx<'_>,
    timing_base: &mut (SimDuration, u32, SimDuration, SimDuration),
    timing_overrides: &mut BTreeMap<String, SimDuration>,
    striping: &mut Option<StripingDecl>,
) -> Result<(), ScenarioError> {
    let line = ctx.line;
    let bad = |field: &str, reason: String| Err(ScenarioError::new(line, field, reason));
    match (section, ctx.key) {
        ("meta", "name") => sc.name = ctx.bare.join(" "),
        ("meta", "seed") => sc.seed = ctx.parse_u64("seed", ctx.bare.first().unwrap_or(&""))?,
        ("meta", "horizon") => sc.horizon = ctx.parse_dur("horizon", ctx.bare.first().unwrap_or(&""))?,
        ("tree", "node") => {
            let name = ctx.bare.first().ok_or_else(|| ScenarioError::new(line, "node", "missing name"))?;
            sc.tree.push(TreeNodeDecl {
                name: name.to_string(),
                parent: ctx.get("parent").map(str::to_string),
                delay: match ctx.get("delay") {
                    Some(d) => ctx.parse_dur("delay", d)?,
                    None => SimDuration::ZERO,
                },
                loss: match ctx.get("loss") {
                    Some(l) => ctx.parse_f64("loss", l)?,
                    None => 0.0,
                },
                line,
            });
        }
        ("nodes", role @ ("source" | "primary" | "secondary" | "repair" | "reformer" | "customer")) => {
            let name = ctx.bare.first().ok_or_else(|| ScenarioError::new(line, role, "missing name"))?;
            let role_decl = match role {
                "source" => RoleDecl::Source {
                    tag: match ctx.get("tag") {
                        Some(t) => Some(ctx.parse_u64("tag", t)?),
                        None => None,
                    },
                },
                "primary" => RoleDecl::Primary,
                "secondary" => RoleDecl::Secondary { assigned: ctx.req("assigned")?.to_string() },
                "repair" => RoleDecl::Repair { host: ctx.req("host")?.to_string() },
                "reformer" => RoleDecl::Reformer,
                "customer" => RoleDecl::Customer {
                    region: ctx.req("region")?.to_string(),
                    fallback: ctx.get("fallback").map(str::to_string),
                    grade: match ctx.get("grade").unwrap_or("best_effort") {
                        "guaranteed" => ServiceGrade::Guaranteed,
                        "best_effort" => ServiceGrade::BestEffort,
                        g => return bad("grade", format!("unknown grade `{g}`")),
                    },
                    exchange: ctx.get("exchange") == Some("true"),
                },
                _ => unreachable!(),
            };
            sc.nodes.push(NodeDecl {
                name: name.to_string(),
                role: role_decl,
                attach: ctx.get("attach").map(str::to_string),
                line,
            });
        }
        ("ring", "order") => sc.ring = ctx.bare.iter().map(|s| s.to_string()).collect(),
        (s, "order") if s.starts_with("secring") => {
            let name = s.strip_prefix("secring").unwrap_or("").trim();
            if name.is_empty() {
                return bad("secring", "secondary ring section needs a name: [secring <name>]".into());
            }
            sc.sec_rings.push(SecRingDecl {
                name: name.to_string(),
                order: ctx.bare.iter().map(|s| s.to_string()).collect(),
            });
        }
        ("regions", "region") => {
            let rt = ctx.bare.first().ok_or_else(|| ScenarioError::new(line, "region", "missing R_T name"))?;
            sc.regions.push(RegionDecl {
                rt: rt.to_string(),
                hub_delay: match ctx.get("hub_delay") {
                    Some(d) => ctx.parse_dur("hub_delay", d)?,
                    None => SimDuration::from_millis(5),
                },
                hub_loss: match ctx.get("hub_loss") {
                    Some(l) => ctx.parse_f64("hub_loss", l)?,
                    None => 0.0,
                },
                leaf_delay: match ctx.get("leaf_delay") {
                    Some(d) => ctx.parse_dur("leaf_delay", d)?,
                    None => SimDuration::from_millis(1),
                },
            });
        }
        ("timing", "delta_n") => timing_base.0 = ctx.parse_dur("delta_n", ctx.bare.first().unwrap_or(&""))?,
        ("timing", "k_r") => timing_base.1 = ctx.parse_u64("k_r", ctx.bare.first().unwrap_or(&""))? as u32,
        ("timing", "x") => timing_base.2 = ctx.parse_dur("x", ctx.bare.first().unwrap_or(&""))?,
        ("timing", "p") => timing_base.3 = ctx.parse_dur("p", ctx.bare.first().unwrap_or(&""))?,
        ("timing", k @ ("tau_t" | "tau_r" | "delta_a")) => {
            timing_overrides.insert(k.to_string(), ctx.parse_dur(k, ctx.bare.first().unwrap_or(&""))?);
        }
        ("timing", "k_cap") => sc.k_cap = ctx.parse_u64("k_cap", ctx.bare.first().unwrap_or(&""))? as usize,
        ("timing", "clock_skew") => {
            sc.clock_skew = ctx.parse_dur("clock_skew", ctx.bare.first().unwrap_or(&""))?;
        }
        ("nack", "enabled") => sc.nack_enabled = ctx.bare.first() == Some(&"true"),
        ("nack", "k_p") => sc.nack_k_p = ctx.parse_u64("k_p", ctx.bare.first().unwrap_or(&""))? as usize,
        ("app", "kind") => {
            let k = ctx.bare.first().unwrap_or(&"");
            sc.app = AppKind::parse(k).ok_or_else(|| ScenarioError::new(line, "kind", format!("unknown app `{k}`")))?;
            if sc.app == AppKind::Floor {
                sc.policy = ReformationPolicy::Conservative;
            }
        }
        ("app", "price_rule") => {
            let r = ctx.bare.first().unwrap_or(&"");
            sc.price_rule = PriceRule::parse(r)
                .ok_or_else(|| ScenarioError::new(line, "price_rule", format!("unknown rule `{r}`")))?;
        }
        ("app", "trade_feed") => {
            sc.trade_feed = match *ctx.bare.first().unwrap_or(&"") {
                "tentative" => TradeFeed::Tentative,
                "confirmed" => TradeFeed::Confirmed,
                "both" => TradeFeed::Both,
                f => return bad("trade_feed", format!("unknown feed `{f}`")),
            };
        }
        ("app", "output_rt") => sc.output_rt = ctx.bare.first().map(|s| s.to_string()),
        ("app", "policy") => {
            sc.policy = match *ctx.bare.first().unwrap_or(&"") {
                "ticker" => ReformationPolicy::Ticker,
                "conservative" => ReformationPolicy::Conservative,
                p => return bad("policy", format!("unknown policy `{p}`")),
            };
        }
        ("app", "start_token_plus_one") => sc.start_token_plus_one = ctx.bare.first() == Some(&"true"),
        ("net", "unicast_loss") => {
            sc.unicast_loss = ctx.parse_f64("unicast_loss", ctx.bare.first().unwrap_or(&""))?;
        }
        ("accounts", "trader") => {
            let name = ctx.bare.first().ok_or_else(|| ScenarioError::new(line, "trader", "missing name"))?;
            let mut positions = Vec::new();
            if let Some(p) = ctx.get("positions") {
                for part in p.split(',') {
                    let Some((sym, qty)) = part.split_once(':') else {
                        return bad("positions", format!("`{part}` is not symbol:qty"));
                    };
                    positions.push((sym.to_string(), ctx.parse_u64("positions", qty)?));
                }
            }
            sc.accounts.push(AccountDecl {
                trader: name.to_string(),
                funds: match ctx.get("funds") {
                    Some(f) => Price::parse(f).ok_or_else(|| ScenarioError::new(line, "funds", "bad price"))?,
                    None => Price(0),
                },
                positions,
                via: ctx.get("via").map(str::to_string),
            });
        }
        ("workload", "tick") => sc.workload.push(WorkloadDecl::Tick {
            at: ctx.req_dur("at")?,
            source: ctx.req("source")?.to_string(),
            symbol: ctx.req("symbol")?.to_string(),
            price: ctx.req_price("price")?,
            qty: ctx.req_u64("qty")?,
        }),
        ("workload", "tickstream") => sc.workload.push(WorkloadDecl::TickStream {
            source: ctx.req("source")?.to_string(),
            symbol: ctx.req("symbol")?.to_string(),
            start: ctx.req_dur("start")?,
            every: ctx.req_dur("every")?,
            count: ctx.req_u64("count")?,
        }),
        ("workload", "order") => {
            let trader = ctx.req("trader")?.to_string();
            let order = if let Some(cancel) = ctx.get("cancel") {
                OrderPayload::Cancel { trader, ref_seq: ctx.parse_u64("cancel", cancel)? }
            } else {
                OrderPayload::Limit {
                    trader,
                    side: match ctx.req("side")? {
                        "buy" => Side::Buy,
                        "sell" => Side::Sell,
                        s => return bad("side", format!("unknown side `{s}`")),
                    },
                    symbol: ctx.req("symbol")?.to_string(),
                    price: ctx.req_price("price")?,
                    qty: ctx.req_u64("qty")?,
                }
            };
            sc.workload.push(WorkloadDecl::Order {
                at: ctx.req_dur("at")?,
                via: ctx.req("via")?.to_string(),
                order,
            });
        }
        ("workload", "orderflow") => sc.workload.push(WorkloadDecl::OrderFlow {
            via: ctx.req("via")?.to_string(),
            traders: ctx.req("traders")?.split(',').map(str::to_string).collect(),
            symbol: ctx.req("symbol")?.to_string(),
            start: ctx.req_dur("start")?,
            every: ctx.req_dur("every")?,
            count: ctx.req_u64("count")?,
        }),
        ("workload", "pairtrials") => sc.workload.push(WorkloadDecl::PairTrials {
            near_via: ctx.req("near_via")?.to_string(),
            far_via: ctx.req("far_via")?.to_string(),
            near_trader: ctx.req("near")?.to_string(),
            far_trader: ctx.req("far")?.to_string(),
            symbol: ctx.req("symbol")?.to_string(),
            start: ctx.req_dur("start")?,
            spacing: ctx.req_dur("spacing")?,
            count: ctx.req_u64("count")?,
        }),
        ("faults", "crash") => sc.faults.push(FaultDecl::Crash {
            node: ctx.bare.first().unwrap_or(&"").to_string(),
            at: ctx.req_dur("at")?,
        }),
        ("faults", "recover") => sc.faults.push(FaultDecl::Recover {
            node: ctx.bare.first().unwrap_or(&"").to_string(),
            at: ctx.req_dur("at")?,
        }),
        ("striping", "budget") => {
            striping.get_or_insert(StripingDecl { budget: 0, symbol_rates: BTreeMap::new() }).budget =
                ctx.parse_u64("budget", ctx.bare.first().unwrap_or(&""))?;
        }
        ("striping", "symbol") => {
            let name = ctx.bare.first().ok_or_else(|| ScenarioError::new(line, "symbol", "missing name"))?;
            let rate = ctx.req_u64("rate")?;
            striping
                .get_or_insert(StripingDecl { budget: 0, symbol_rates: BTreeMap::new() })
                .symbol_rates
                .insert(name.to_string(), rate);
        }
        _ => {
            return bad(ctx.key, format!("unknown key `{}` in section `[{section}]`", ctx.key));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// rendering (sweeps rewrite scenarios; tests round-trip)

fn render_scenario(sc: &Scenario) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_TAG}\n");
    let _ = writeln!(out, "[meta]\nname = {}\nseed = {}\nhorizon = {}\n", sc.name, sc.seed, sc.horizon);
    let _ = writeln!(out, "[tree]");
    for t in &sc.tree {
        let mut line = format!("node = {}", t.name);
        if let Some(p) = &t.parent {
            line += &format!(" parent={p} delay={}", t.delay);
        }
        if t.loss > 0.0 {
            line += &format!(" loss={}", t.loss);
        }
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out, "\n[nodes]");
    for n in &sc.nodes {
        let attach = n.attach.as_ref().map(|a| format!(" attach={a}")).unwrap_or_default();
        let line = match &n.role {
            RoleDecl::Source { tag } => format!(
                "source = {}{attach}{}",
                n.name,
                tag.map(|t| format!(" tag={t}")).unwrap_or_default()
            ),
            RoleDecl::Primary => format!("primary = {}{attach}", n.name),
            RoleDecl::Secondary { assigned } => format!("secondary = {}{attach} assigned={assigned}", n.name),
            RoleDecl::Repair { host } => format!("repair = {}{attach} host={host}", n.name),
            RoleDecl::Reformer => format!("reformer = {}{attach}", n.name),
            RoleDecl::Customer { region, fallback, grade, exchange } => format!(
                "customer = {}{attach} region={region}{}{}{}",
                n.name,
                fallback.as_ref().map(|f| format!(" fallback={f}")).unwrap_or_default(),
                match grade {
                    ServiceGrade::Guaranteed => " grade=guaranteed",
                    ServiceGrade::BestEffort => " grade=best_effort",
                },
                if *exchange { " exchange=true" } else { "" }
            ),
        };
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out, "\n[ring]\norder = {}", sc.ring.join(" "));
    for sr in &sc.sec_rings {
        let _ = writeln!(out, "\n[secring {}]\norder = {}", sr.name, sr.order.join(" "));
    }
    if !sc.regions.is_empty() {
        let _ = writeln!(out, "\n[regions]");
        for r in &sc.regions {
            let _ = writeln!(
                out,
                "region = {} hub_delay={} hub_loss={} leaf_delay={}",
                r.rt, r.hub_delay, r.hub_loss, r.leaf_delay
            );
        }
    }
    let t = &sc.timing;
    let _ = writeln!(out, "\n[timing]\ndelta_n = {}\nk_r = {}\nx = {}\np = {}", t.delta_n, t.k_r, t.x, t.p);
    let derived = derive_params(t.delta_n, t.k_r, t.x, t.p);
    if t.tau_r != derived.tau_r {
        let _ = writeln!(out, "tau_r = {}", t.tau_r);
    }
    if t.tau_t != derived.tau_t {
        let _ = writeln!(out, "tau_t = {}", t.tau_t);
    }
    if t.delta_a != derived.delta_a {
        let _ = writeln!(out, "delta_a = {}", t.delta_a);
    }
    let _ = writeln!(out, "k_cap = {}", sc.k_cap);
    if sc.clock_skew != SimDuration::ZERO {
        let _ = writeln!(out, "clock_skew = {}", sc.clock_skew);
    }
    let _ = writeln!(out, "\n[nack]\nenabled = {}\nk_p = {}", sc.nack_enabled, sc.nack_k_p);
    let _ = writeln!(out, "\n[app]\nkind = {}", sc.app.name());
    let _ = writeln!(out, "price_rule = {}", sc.price_rule.name());
    let _ = writeln!(
        out,
        "trade_feed = {}",
        match sc.trade_feed {
            TradeFeed::Tentative => "tentative",
            TradeFeed::Confirmed => "confirmed",
            TradeFeed::Both => "both",
        }
    );
    if let Some(rt) = &sc.output_rt {
        let _ = writeln!(out, "output_rt = {rt}");
    }
    let _ = writeln!(
        out,
        "policy = {}",
        match sc.policy {
            ReformationPolicy::Ticker => "ticker",
            ReformationPolicy::Conservative => "conservative",
        }
    );
    if sc.start_token_plus_one {
        let _ = writeln!(out, "start_token_plus_one = true");
    }
    if sc.unicast_loss > 0.0 {
        let _ = writeln!(out, "\n[net]\nunicast_loss = {}", sc.unicast_loss);
    }
    if !sc.accounts.is_empty() {
        let _ = writeln!(out, "\n[accounts]");
        for a in &sc.accounts {
            let positions = if a.positions.is_empty() {
                String::new()
            } else {
                format!(
                    " positions={}",
                    a.positions.iter().map(|(s, q)| format!("{s}:{q}")).collect::<Vec<_>>().join(",")
                )
            };
            let via = a.via.as_ref().map(|v| format!(" via={v}")).unwrap_or_default();
            let _ = writeln!(out, "trader = {} funds={}{positions}{via}", a.trader, a.funds);
        }
    }
    if !sc.workload.is_empty() {
        let _ = writeln!(out, "\n[workload]");
        for w in &sc.workload {
            let line = match w {
                WorkloadDecl::Tick { at, source, symbol, price, qty } => {
                    format!("tick = at={at} source={source} symbol={symbol} price={price} qty={qty}")
                }
                WorkloadDecl::TickStream { source, symbol, start, every, count } => format!(
                    "tickstream = source={source} symbol={symbol} start={start} every={every} count={count}"
                ),
                WorkloadDecl::Order { at, via, order } => match order {
                    OrderPayload::Limit { trader, side, symbol, price, qty } => format!(
                        "order = at={at} via={via} trader={trader} side={} symbol={symbol} price={price} qty={qty}",
                        match side {
                            Side::Buy => "buy",
                            Side::Sell => "sell",
                        }
                    ),
                    OrderPayload::Cancel { trader, ref_seq } => {
                        format!("order = at={at} via={via} trader={trader} cancel={ref_seq}")
                    }
                },
                WorkloadDecl::OrderFlow { via, traders, symbol, start, every, count } => format!(
                    "orderflow = via={via} traders={} symbol={symbol} start={start} every={every} count={count}",
                    traders.join(",")
                ),
                WorkloadDecl::PairTrials {
                    near_via,
                    far_via,
                    near_trader,
                    far_trader,
                    symbol,
                    start,
                    spacing,
                    count,
                } => format!(
                    "pairtrials = near_via={near_via} far_via={far_via} near={near_trader} far={far_trader} symbol={symbol} start={start} spacing={spacing} count={count}"
                ),
            };
            let _ = writeln!(out, "{line}");
        }
    }
    if !sc.faults.is_empty() {
        let _ = writeln!(out, "\n[faults]");
        for f in &sc.faults {
            match f {
                FaultDecl::Crash { node, at } => {
                    let _ = writeln!(out, "crash = {node} at={at}");
                }
                FaultDecl::Recover { node, at } => {
                    let _ = writeln!(out, "recover = {node} at={at}");
                }
            }
        }
    }
    if let Some(s) = &sc.striping {
        let _ = writeln!(out, "\n[striping]\nbudget = {}", s.budget);
        for (sym, rate) in &s.symbol_rates {
            let _ = writeln!(out, "symbol = {sym} rate={rate}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
ringcast-scenario v1

[meta]
name = smoke
seed = 7
horizon = 30s

[tree]
node = root
node = hubA parent=root delay=10ms loss=0.02
node = leafA parent=hubA delay=1ms
node = leafB parent=hubA delay=2ms
node = leafC parent=root delay=20ms

[nodes]
source = s0 attach=leafA
primary = rp0 attach=leafB
primary = rp1 attach=leafC
reformer = xr0 attach=leafA

[ring]
order = rp0 rp1

[timing]
delta_n = 75ms
k_r = 3
x = 0
p = 0

[nack]
enabled = false
k_p = 1

[app]
kind = ticker

[workload]
tick = at=1s source=s0 symbol=IBM price=105.25 qty=100
";

    #[test]
    fn parse_and_validate_sample() {
        let sc = Scenario::parse(SAMPLE).unwrap();
        assert_eq!(sc.name, "smoke");
        assert_eq!(sc.seed, 7);
        assert_eq!(sc.ring, vec!["rp0", "rp1"]);
        assert_eq!(sc.timing.tau_t, SimDuration::from_millis(525));
        sc.validate().unwrap();
    }

    #[test]
    fn format_tag_required() {
        let e = Scenario::parse("bogus v9\n").unwrap_err();
        assert_eq!(e.line, 1);
    }

    #[test]
    fn bad_kp_names_field() {
        let mut sc = Scenario::parse(SAMPLE).unwrap();
        sc.nack_k_p = 5; // m = 2
        let e = sc.validate().unwrap_err();
        assert_eq!(e.field, "nack_k_p");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = format!("{SAMPLE}\n[meta]\nbogus = 1\n");
        let e = Scenario::parse(&text).unwrap_err();
        assert_eq!(e.field, "bogus");
        assert!(e.line > 30);
    }

    #[test]
    fn render_round_trips() {
        let sc = Scenario::parse(SAMPLE).unwrap();
        let text = sc.to_text();
        let again = Scenario::parse(&text).unwrap();
        assert_eq!(again.name, sc.name);
        assert_eq!(again.ring, sc.ring);
        assert_eq!(again.timing, sc.timing);
        assert_eq!(again.workload, sc.workload);
        again.validate().unwrap();
    }

    #[test]
    fn validation_catches_missing_fallback() {
        let text = SAMPLE.replace("[ring]", "customer = c0 region=rp0 grade=best_effort\n\n[ring]");
        let sc = Scenario::parse(&text).unwrap();
        let e = sc.validate().unwrap_err();
        assert_eq!(e.field, "fallback");
    }

    #[test]
    fn validation_catches_duplicate_tree_nodes() {
        let text =
            SAMPLE.replace("node = leafC parent=root delay=20ms", "node = leafA parent=root delay=20ms");
        let sc = Scenario::parse(&text).unwrap();
        let e = sc.validate().unwrap_err();
        assert!(e.reason.contains("duplicate tree node"));
    }
}
