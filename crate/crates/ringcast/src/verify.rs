//! Trace verification: replays a run trace and checks the protocol's
//! end-to-end guarantees — total order, the knowledge chain at each
//! acknowledgement, the single-acknowledger rule, zero release-time spread,
//! control-message economy, and NACK request-wave bounds.

use crate::nack::wave_index;
use crate::simnet::trace::{kind, Trace};
use crate::time::{SimDuration, SimTime};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// One verification check's outcome.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    /// "skipped" checks pass vacuously (e.g. spread in unfair mode).
    pub skipped: bool,
    pub detail: String,
    /// 1-based index of the first offending record.
    pub first_violation: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.skipped {
                "SKIP"
            } else if c.pass {
                "PASS"
            } else {
                "FAIL"
            };
            write!(f, "{status} {name}", name = c.name)?;
            if !c.detail.is_empty() {
                write!(f, ": {}", c.detail)?;
            }
            if let Some(line) = c.first_violation {
                write!(f, " (first at record {line})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Segment {
    from: SimTime,
    ring: Vec<String>,
    epoch: SimTime,
    base: u64,
    site0_pos: usize,
}

impl Segment {
    fn sched(&self, token: u64, tau_t: SimDuration) -> SimTime {
        let steps = token.max(self.base) - self.base + 1;
        self.epoch + tau_t * steps
    }

    fn pos_of(&self, node: &str) -> Option<usize> {
        self.ring.iter().position(|n| n == node)
    }
}

struct Run<'t> {
    trace: &'t Trace,
    tau_t: SimDuration,
    delta_a: SimDuration,
    k_p: usize,
    unfair: bool,
    skew: u64,
    segments: Vec<Segment>,
    secondaries: BTreeSet<String>,
    rts: BTreeSet<String>,
    crash_at: BTreeMap<String, SimTime>,
    recover_at: BTreeMap<String, SimTime>,
    reform_marks: Vec<SimTime>,
    lossless: bool,
}

impl<'t> Run<'t> {
    fn segment_at(&self, at: SimTime) -> &Segment {
        self.segments
            .iter()
            .rev()
            .find(|s| s.from <= at)
            .unwrap_or(&self.segments[0])
    }

    fn crashed_by(&self, node: &str, at: SimTime) -> bool {
        match (self.crash_at.get(node), self.recover_at.get(node)) {
            (Some(c), None) => *c <= at,
            (Some(c), Some(r)) => *c <= at && at < *r,
            _ => false,
        }
    }

    fn reformation_overlaps(&self, lo: SimTime, hi: SimTime) -> bool {
        let pad = self.tau_t * 2;
        self.reform_marks
            .iter()
            .any(|t| t.0.saturating_sub(pad.0) <= hi.0 && lo.0 <= t.0 + pad.0)
    }
}

fn load(trace: &Trace) -> Result<Run<'_>, String> {
    let meta_u64 = |key: &str| -> Option<u64> { trace.meta(key)?.parse().ok() };
    let tau_t = SimDuration(meta_u64("tau_t").ok_or("trace missing META tau_t")?);
    let delta_a = SimDuration(meta_u64("delta_a").ok_or("trace missing META delta_a")?);
    let k_p = meta_u64("k_p").unwrap_or(1) as usize;
    let unfair = meta_u64("unfair").unwrap_or(0) == 1;
    let skew = meta_u64("skew").unwrap_or(0);
    let ring: Vec<String> = trace
        .meta("ring")
        .ok_or("trace missing META ring")?
        .split(';')
        .map(str::to_string)
        .collect();
    let secondaries: BTreeSet<String> = trace
        .meta("secondaries")
        .unwrap_or("")
        .split(';')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let mut rts: BTreeSet<String> = ring.iter().cloned().collect();
    rts.extend(secondaries.iter().cloned());

    let mut segments = vec![Segment {
        from: SimTime::ZERO,
        ring: ring.clone(),
        epoch: SimTime::ZERO,
        base: 1,
        site0_pos: 0,
    }];
    let mut crash_at = BTreeMap::new();
    let mut recover_at = BTreeMap::new();
    let mut reform_marks = Vec::new();
    let mut lossless = true;
    for rec in &trace.records {
        match rec.kind.as_str() {
            kind::NEW_RING => {
                let members: Vec<String> = rec
                    .get("members")
                    .unwrap_or("")
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                let site = rec.get("site").unwrap_or("").to_string();
                let site0_pos = members.iter().position(|m| *m == site).unwrap_or(0);
                segments.push(Segment {
                    from: rec.at,
                    ring: members,
                    epoch: SimTime(rec.get_u64("epoch").unwrap_or(rec.at.0)),
                    base: rec.get_u64("start").unwrap_or(1),
                    site0_pos,
                });
                reform_marks.push(rec.at);
            }
            kind::REPORT => reform_marks.push(rec.at),
            kind::CRASH => {
                crash_at.insert(rec.node.clone(), rec.at);
            }
            kind::RECOVER => {
                recover_at.insert(rec.node.clone(), rec.at);
            }
            kind::DROP => lossless = false,
            _ => {}
        }
    }
    Ok(Run {
        trace,
        tau_t,
        delta_a,
        k_p,
        unfair,
        skew,
        segments,
        secondaries,
        rts,
        crash_at,
        recover_at,
        reform_marks,
        lossless,
    })
}

/// Runs every check against a trace.
pub fn verify_trace(trace: &Trace) -> Result<VerifyReport, String> {
    let run = load(trace)?;
    let mut report = VerifyReport::default();
    report.checks.push(check_total_order(&run));
    report.checks.push(check_knowledge_chain(&run));
    report.checks.push(check_single_acknowledger(&run));
    report.checks.push(check_release_spread(&run));
    report.checks.push(check_economy(&run));
    report.checks.push(check_nack_bounds(&run));
    report.checks.push(check_repair_isolation(&run));
    Ok(report)
}

fn pass(name: &'static str, detail: String) -> CheckResult {
    CheckResult { name, pass: true, skipped: false, detail, first_violation: None }
}

fn skip(name: &'static str, detail: String) -> CheckResult {
    CheckResult { name, pass: true, skipped: true, detail, first_violation: None }
}

fn fail(name: &'static str, detail: String, line: usize) -> CheckResult {
    CheckResult { name, pass: false, skipped: false, detail, first_violation: Some(line) }
}

/// No global sequence number is ever committed with two different labels by
/// nodes that were both alive to tell about it.
fn check_total_order(run: &Run<'_>) -> CheckResult {
    // batch content keyed by (token, bh) from EMIT records
    let mut batches: BTreeMap<(u64, u64), (u64, Vec<String>)> = BTreeMap::new();
    // first committed label per global seq: (label, node, at, line)
    let mut committed: BTreeMap<u64, (String, String, SimTime, usize)> = BTreeMap::new();
    let mut commits_checked = 0u64;
    for (i, rec) in run.trace.records.iter().enumerate() {
        let line = i + 1;
        match rec.kind.as_str() {
            kind::EMIT => {
                let token = rec.get_u64("token").unwrap_or(0);
                let bh = rec.get_u64("bh").unwrap_or(0);
                let base = rec.get_u64("base").unwrap_or(0);
                let labels: Vec<String> = rec
                    .get("labels")
                    .unwrap_or("")
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                batches.entry((token, bh)).or_insert((base, labels));
            }
            kind::COMMIT => {
                let token = rec.get_u64("token").unwrap_or(0);
                let bh = rec.get_u64("bh").unwrap_or(0);
                let Some((base, labels)) = batches.get(&(token, bh)) else {
                    return fail("total-order", format!("commit of unknown batch token {token}"), line);
                };
                commits_checked += 1;
                for (j, label) in labels.iter().enumerate() {
                    let g = base + j as u64;
                    match committed.get(&g) {
                        None => {
                            committed.insert(g, (label.clone(), rec.node.clone(), rec.at, line));
                        }
                        Some((prev_label, prev_node, prev_at, _)) if prev_label != label => {
                            // a conflicting commit is excused only if its
                            // author died before the later one happened
                            let earlier_died = run.crashed_by(prev_node, rec.at);
                            let this_died = run.crashed_by(&rec.node, *prev_at);
                            if !(earlier_died || this_died) {
                                return fail(
                                    "total-order",
                                    format!(
                                        "global {g} committed as {prev_label} by {prev_node} and {label} by {}",
                                        rec.node
                                    ),
                                    line,
                                );
                            }
                        }
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }
    pass("total-order", format!("{commits_checked} commits consistent"))
}

/// At the instant a node emits ack t, the member at ring distance j behind
/// it is complete through token t - j, for every token of the current
/// epoch.
fn check_knowledge_chain(run: &Run<'_>) -> CheckResult {
    // per node: sorted commit times by token
    let mut commit_time: BTreeMap<(String, u64), SimTime> = BTreeMap::new();
    for rec in &run.trace.records {
        if rec.kind == kind::COMMIT {
            if let Some(t) = rec.get_u64("token") {
                commit_time.entry((rec.node.clone(), t)).or_insert(rec.at);
            }
        }
    }
    let mut emits_checked = 0u64;
    for (i, rec) in run.trace.records.iter().enumerate() {
        if rec.kind != kind::EMIT {
            continue;
        }
        let t = rec.get_u64("token").unwrap_or(0);
        let seg = run.segment_at(rec.at);
        let Some(pos) = seg.pos_of(&rec.node) else { continue };
        let m = seg.ring.len();
        emits_checked += 1;
        for j in 1..m as u64 {
            if t < seg.base + j {
                break; // tokens before this epoch belong to an older ring
            }
            let want = t - j;
            let member = &seg.ring[(pos + m - j as usize) % m];
            if run.crashed_by(member, rec.at) {
                continue;
            }
            match commit_time.get(&(member.clone(), want)) {
                Some(at) if *at <= rec.at => {}
                _ => {
                    return fail(
                        "knowledge-chain",
                        format!("emit of token {t} by {}: {member} not complete through {want}", rec.node),
                        i + 1,
                    );
                }
            }
        }
    }
    pass("knowledge-chain", format!("{emits_checked} emissions checked"))
}

/// Token-holding intervals never overlap: the holder from ACCEPT (or
/// appointment) to EMIT is unique at every instant.
fn check_single_acknowledger(run: &Run<'_>) -> CheckResult {
    // build (start, end, node, line) intervals
    let mut open: BTreeMap<String, (SimTime, usize)> = BTreeMap::new();
    let mut intervals: Vec<(SimTime, SimTime, String, usize)> = Vec::new();
    for (i, rec) in run.trace.records.iter().enumerate() {
        match rec.kind.as_str() {
            kind::ACCEPT => {
                open.insert(rec.node.clone(), (rec.at, i + 1));
            }
            kind::NEW_RING => {
                // every holder role dissolves; the appointed site holds from
                // the announcement
                for (node, (start, line)) in std::mem::take(&mut open) {
                    intervals.push((start, rec.at, node, line));
                }
                if let Some(site) = rec.get("site") {
                    open.insert(site.to_string(), (rec.at, i + 1));
                }
            }
            kind::EMIT => {
                if let Some((start, line)) = open.remove(&rec.node) {
                    intervals.push((start, rec.at, rec.node.clone(), line));
                } else {
                    // the initial site holds from time zero
                    intervals.push((SimTime::ZERO, rec.at, rec.node.clone(), i + 1));
                }
            }
            kind::CRASH => {
                if let Some((start, line)) = open.remove(&rec.node) {
                    intervals.push((start, rec.at, rec.node.clone(), line));
                }
            }
            _ => {}
        }
    }
    intervals.sort_by_key(|(s, ..)| *s);
    let mut furthest: Option<(SimTime, String)> = None;
    for (start, end, node, line) in &intervals {
        if let Some((f_end, f_node)) = &furthest {
            if node != f_node && *start < *f_end {
                return fail(
                    "single-acknowledger",
                    format!("{f_node} still held the token when {node} took it at {start}"),
                    *line,
                );
            }
        }
        if furthest.as_ref().map_or(true, |(f, _)| end > f) {
            furthest = Some((*end, node.clone()));
        }
    }
    pass("single-acknowledger", format!("{} holding intervals disjoint", intervals.len()))
}

/// Every operable R_T releases each batch at one identical instant.
fn check_release_spread(run: &Run<'_>) -> CheckResult {
    if run.unfair {
        return skip("release-spread", "unfair mode (delta_a = 0)".into());
    }
    let tolerance = 2 * run.skew;
    // (token, bh) -> emit time, releases
    let mut emit_at: BTreeMap<(u64, u64), SimTime> = BTreeMap::new();
    let mut releases: BTreeMap<(u64, u64), Vec<(String, SimTime, usize)>> = BTreeMap::new();
    for (i, rec) in run.trace.records.iter().enumerate() {
        match rec.kind.as_str() {
            kind::EMIT => {
                let key = (rec.get_u64("token").unwrap_or(0), rec.get_u64("bh").unwrap_or(0));
                emit_at.entry(key).or_insert(rec.at);
            }
            kind::RELEASE => {
                if rec.get_u64("catchup").unwrap_or(0) == 1 {
                    continue;
                }
                let key = (rec.get_u64("token").unwrap_or(0), rec.get_u64("bh").unwrap_or(0));
                releases.entry(key).or_default().push((rec.node.clone(), rec.at, i + 1));
            }
            _ => {}
        }
    }
    let mut checked = 0u64;
    let mut skipped = 0u64;
    for (key, rel) in &releases {
        let emit = emit_at.get(key).copied().unwrap_or(rel[0].1);
        let window_hi = rel.iter().map(|(_, at, _)| *at).max().unwrap_or(emit) + run.delta_a;
        if run.reformation_overlaps(emit, window_hi) {
            skipped += 1;
            continue;
        }
        checked += 1;
        let lo = rel.iter().map(|(_, at, _)| *at).min().unwrap();
        let hi = rel.iter().map(|(_, at, _)| *at).max().unwrap();
        if hi.0 - lo.0 > tolerance {
            let line = rel.iter().map(|(_, _, l)| *l).max().unwrap();
            return fail(
                "release-spread",
                format!("batch token {} released with spread {}us", key.0, hi.0 - lo.0),
                line,
            );
        }
        // every operable R_T must have released
        let released: BTreeSet<&String> = rel.iter().map(|(n, _, _)| n).collect();
        for rt in &run.rts {
            if released.contains(rt) || run.crashed_by(rt, hi) {
                continue;
            }
            // a late commit shows up as a catch-up release; treat a missing
            // one as a violation
            let caught_up = run.trace.records.iter().any(|r| {
                r.kind == kind::RELEASE
                    && r.node == *rt
                    && (r.get_u64("token").unwrap_or(0), r.get_u64("bh").unwrap_or(0)) == *key
            });
            if !caught_up {
                let line = rel.iter().map(|(_, _, l)| *l).max().unwrap();
                return fail(
                    "release-spread",
                    format!("batch token {} never released by operable {rt}", key.0),
                    line,
                );
            }
        }
    }
    pass("release-spread", format!("{checked} batches at zero spread, {skipped} in reformation windows"))
}

/// In lossless runs the number of control messages equals the number of
/// elapsed token periods: every token emitted exactly once.
fn check_economy(run: &Run<'_>) -> CheckResult {
    if !run.lossless {
        return skip("control-economy", "run had injected losses".into());
    }
    let mut seen: BTreeMap<u64, u64> = BTreeMap::new();
    let mut emits = 0u64;
    for (i, rec) in run.trace.records.iter().enumerate() {
        if rec.kind != kind::EMIT {
            continue;
        }
        emits += 1;
        let t = rec.get_u64("token").unwrap_or(0);
        let count = seen.entry(t).or_insert(0);
        *count += 1;
        if *count > 1 {
            return fail("control-economy", format!("token {t} emitted {count} times"), i + 1);
        }
    }
    let t_max = seen.keys().max().copied().unwrap_or(0);
    if emits != t_max {
        return fail(
            "control-economy",
            format!("{emits} control messages over {t_max} token periods"),
            run.trace.records.len(),
        );
    }
    for t in 1..=t_max {
        if !seen.contains_key(&t) {
            return fail("control-economy", format!("token {t} never emitted"), run.trace.records.len());
        }
    }
    pass("control-economy", format!("{emits} control messages = {t_max} token periods"))
}

/// Message-recovery requests obey the NACK wave schedule: a ring member may
/// request the batch of token t only from its wave onward.
fn check_nack_bounds(run: &Run<'_>) -> CheckResult {
    if run.k_p <= 1 {
        return pass("nack-bounds", "k_p = 1, every wave immediate".into());
    }
    let mut checked = 0u64;
    for (i, rec) in run.trace.records.iter().enumerate() {
        if rec.kind != kind::REQUEST {
            continue;
        }
        let seg = run.segment_at(rec.at);
        let Some(pos) = seg.pos_of(&rec.node) else { continue };
        for item in rec.get("items").unwrap_or("").split(',') {
            // message-by-label items encode the covering token as m<t>:...
            let Some(rest) = item.strip_prefix("m") else { continue };
            let Some((token_str, _)) = rest.split_once(':') else { continue };
            let Ok(token) = token_str.parse::<u64>() else { continue };
            if token < seg.base {
                continue;
            }
            let i_wave = wave_index(pos, (seg.site0_pos + (token - seg.base) as usize) % seg.ring.len(), seg.ring.len(), run.k_p);
            let earliest = seg.sched(token + i_wave as u64, run.tau_t);
            checked += 1;
            if rec.at < earliest {
                return fail(
                    "nack-bounds",
                    format!(
                        "{} requested token {token} batch at {} before wave {i_wave} opened at {earliest}",
                        rec.node, rec.at
                    ),
                    i + 1,
                );
            }
        }
    }
    pass("nack-bounds", format!("{checked} gated requests in schedule"))
}

/// Secondary-receiver recovery never reaches a ring member: their requests
/// go to repair endpoints only.
fn check_repair_isolation(run: &Run<'_>) -> CheckResult {
    let mut checked = 0u64;
    for (i, rec) in run.trace.records.iter().enumerate() {
        if rec.kind != kind::REQUEST || !run.secondaries.contains(&rec.node) {
            continue;
        }
        checked += 1;
        let to = rec.get("to").unwrap_or("");
        let seg = run.segment_at(rec.at);
        if seg.ring.iter().any(|r| r == to) {
            return fail(
                "repair-isolation",
                format!("secondary {} sent recovery to ring member {to}", rec.node),
                i + 1,
            );
        }
    }
    pass("repair-isolation", format!("{checked} secondary requests kept off the ring"))
}
