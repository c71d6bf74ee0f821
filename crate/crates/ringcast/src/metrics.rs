//! Run metrics, computed as a pure fold over the trace so the metrics file
//! can always be recomputed from the trace it shipped with.

use crate::simnet::trace::{kind, Trace};
use crate::time::SimTime;
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_us: u64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub max_us: u64,
}

impl LatencySummary {
    fn from_samples(mut samples: Vec<u64>) -> LatencySummary {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        samples.sort_unstable();
        let count = samples.len() as u64;
        let sum: u64 = samples.iter().sum();
        let pick = |q_num: usize, q_den: usize| samples[(samples.len() - 1) * q_num / q_den];
        LatencySummary {
            count,
            mean_us: sum / count,
            p50_us: pick(1, 2),
            p95_us: pick(19, 20),
            max_us: *samples.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StripeMetric {
    pub stripe: u32,
    pub bytes: u64,
    pub avg_rate_bits: u64,
}

/// Terminal summary of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub messages_submitted: u64,
    pub resends: u64,
    /// Acknowledgement emissions (the protocol's control messages).
    pub control_messages: u64,
    /// Highest token number emitted.
    pub token_periods: u64,
    pub commits: u64,
    pub explicit_requests: u64,
    pub duplicate_requests: u64,
    pub retransmissions: u64,
    pub losses_injected: u64,
    pub reformations: u64,
    pub release_batches: u64,
    /// Max release-time spread over any batch (catch-up releases excluded).
    pub max_release_spread_us: u64,
    pub commit_latency: LatencySummary,
    pub release_latency: LatencySummary,
    pub gate_rejects: u64,
    pub tag_rejects: u64,
    pub edge_requests: u64,
    pub permanently_lost: u64,
    pub fallbacks: u64,
    pub sec_passes: u64,
    pub trades_tentative: u64,
    pub trades_confirmed: u64,
    pub total_failure: bool,
    pub quiesced: bool,
    pub horizon_reached: bool,
    pub stripes: Vec<StripeMetric>,
}

impl Metrics {
    /// True when the run hit the horizon without quiescing.
    pub fn livelocked(&self) -> bool {
        self.horizon_reached && !self.quiesced && !self.total_failure
    }

    pub fn from_trace(trace: &Trace) -> Metrics {
        let mut m = Metrics::default();
        // submit time per (source, seq) for latency joins
        let mut submit_at: BTreeMap<(String, u64), SimTime> = BTreeMap::new();
        // emitted batches: token -> (base, labels)
        let mut batches: BTreeMap<(u64, u64), Vec<(String, u64)>> = BTreeMap::new();
        let mut commit_samples: Vec<u64> = Vec::new();
        let mut release_samples: Vec<u64> = Vec::new();
        // per (token, bh): release times of non-catchup releases
        let mut releases: BTreeMap<(u64, u64), (SimTime, SimTime)> = BTreeMap::new();
        let mut released_tokens: BTreeMap<(u64, u64), bool> = BTreeMap::new();
        // striping: symbol -> stripe from META, then bytes per stripe
        let mut stripe_of: BTreeMap<String, u32> = BTreeMap::new();
        let mut stripe_bytes: BTreeMap<u32, u64> = BTreeMap::new();
        let mut stripe_span: Option<(SimTime, SimTime)> = None;

        for rec in &trace.records {
            match rec.kind.as_str() {
                kind::META => {
                    if let Some(table) = rec.get("stripe_table") {
                        for pair in table.split(';').filter(|p| !p.is_empty()) {
                            if let Some((sym, id)) = pair.rsplit_once(':') {
                                if let Ok(id) = id.parse() {
                                    stripe_of.insert(sym.to_string(), id);
                                }
                            }
                        }
                    }
                }
                kind::SUBMIT => {
                    m.messages_submitted += 1;
                    if let Some(seq) = rec.get_u64("seq") {
                        submit_at.insert((rec.node.clone(), seq), rec.at);
                    }
                }
                kind::RESEND => m.resends += 1,
                kind::EMIT => {
                    m.control_messages += 1;
                    let token = rec.get_u64("token").unwrap_or(0);
                    m.token_periods = m.token_periods.max(token);
                    let bh = rec.get_u64("bh").unwrap_or(0);
                    let labels: Vec<(String, u64)> = rec
                        .get("labels")
                        .unwrap_or("")
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .filter_map(|s| {
                            let (src, seq) = s.rsplit_once(':')?;
                            Some((src.to_string(), seq.parse().ok()?))
                        })
                        .collect();
                    for label in &labels {
                        if let Some(t0) = submit_at.get(label) {
                            commit_samples.push(rec.at.0.saturating_sub(t0.0));
                        }
                    }
                    batches.entry((token, bh)).or_insert(labels);
                }
                kind::COMMIT => m.commits += 1,
                kind::REQUEST => m.explicit_requests += 1,
                kind::DUP_REQUEST => m.duplicate_requests += 1,
                kind::RETRANS => m.retransmissions += 1,
                kind::DROP => m.losses_injected += 1,
                kind::NEW_RING => m.reformations += 1,
                kind::RELEASE => {
                    let catchup = rec.get_u64("catchup").unwrap_or(0) == 1;
                    let token = rec.get_u64("token").unwrap_or(0);
                    let bh = rec.get_u64("bh").unwrap_or(0);
                    let key = (token, bh);
                    if !catchup {
                        let entry = releases.entry(key).or_insert((rec.at, rec.at));
                        entry.0 = entry.0.min(rec.at);
                        entry.1 = entry.1.max(rec.at);
                    }
                    if let Some(syms) = rec.get("syms") {
                        let span = stripe_span.get_or_insert((rec.at, rec.at));
                        span.0 = span.0.min(rec.at);
                        span.1 = span.1.max(rec.at);
                        if !released_tokens.contains_key(&key) {
                            for part in syms.split(';').filter(|p| !p.is_empty()) {
                                if let Some((sym, bytes)) = part.rsplit_once(':') {
                                    if let (Some(stripe), Ok(b)) =
                                        (stripe_of.get(sym), bytes.parse::<u64>())
                                    {
                                        *stripe_bytes.entry(*stripe).or_insert(0) += b;
                                    }
                                }
                            }
                        }
                    }
                    // per-message release latency, measured at the first
                    // release of each batch
                    if !released_tokens.contains_key(&key) {
                        released_tokens.insert(key, true);
                        m.release_batches += 1;
                        if let Some(labels) = batches.get(&key) {
                            for label in labels {
                                if let Some(t0) = submit_at.get(label) {
                                    release_samples.push(rec.at.0.saturating_sub(t0.0));
                                }
                            }
                        }
                    }
                }
                kind::GATE_REJECT => m.gate_rejects += 1,
                kind::TAG_REJECT => m.tag_rejects += 1,
                kind::EDGE_REQUEST => m.edge_requests += 1,
                kind::EDGE_LOST => m.permanently_lost += 1,
                kind::FALLBACK => m.fallbacks += 1,
                kind::SEC_PASS => m.sec_passes += 1,
                kind::TRADE_TENTATIVE => m.trades_tentative += 1,
                kind::TRADE_CONFIRMED => m.trades_confirmed += 1,
                kind::TOTAL_FAILURE => m.total_failure = true,
                kind::QUIESCE => m.quiesced = true,
                kind::HORIZON => m.horizon_reached = true,
                _ => {}
            }
        }
        m.max_release_spread_us = releases
            .values()
            .map(|(lo, hi)| hi.0 - lo.0)
            .max()
            .unwrap_or(0);
        m.commit_latency = LatencySummary::from_samples(commit_samples);
        m.release_latency = LatencySummary::from_samples(release_samples);
        if let Some((lo, hi)) = stripe_span {
            let span_us = (hi.0 - lo.0).max(1);
            m.stripes = stripe_bytes
                .into_iter()
                .map(|(stripe, bytes)| StripeMetric {
                    stripe,
                    bytes,
                    avg_rate_bits: bytes * 8 * 1_000_000 / span_us,
                })
                .collect();
        }
        m
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn parse(text: &str) -> Result<Metrics, String> {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut stripes = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| format!("bad line `{line}`"))?;
            if let Some(rest) = k.strip_prefix("stripe.") {
                let id: u32 = rest.parse().map_err(|_| format!("bad stripe id `{rest}`"))?;
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 2 {
                    return Err(format!("bad stripe line `{line}`"));
                }
                stripes.push(StripeMetric {
                    stripe: id,
                    bytes: parts[0].parse().map_err(|_| "bad bytes".to_string())?,
                    avg_rate_bits: parts[1].parse().map_err(|_| "bad rate".to_string())?,
                });
                continue;
            }
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<u64, String> {
            fields.get(k).ok_or_else(|| format!("missing `{k}`"))?.parse().map_err(|_| format!("bad `{k}`"))
        };
        let get_bool = |k: &str| -> Result<bool, String> { Ok(get(k)? == 1) };
        let latency = |prefix: &str| -> Result<LatencySummary, String> {
            Ok(LatencySummary {
                count: get(&format!("{prefix}.count"))?,
                mean_us: get(&format!("{prefix}.mean_us"))?,
                p50_us: get(&format!("{prefix}.p50_us"))?,
                p95_us: get(&format!("{prefix}.p95_us"))?,
                max_us: get(&format!("{prefix}.max_us"))?,
            })
        };
        Ok(Metrics {
            messages_submitted: get("messages_submitted")?,
            resends: get("resends")?,
            control_messages: get("control_messages")?,
            token_periods: get("token_periods")?,
            commits: get("commits")?,
            explicit_requests: get("explicit_requests")?,
            duplicate_requests: get("duplicate_requests")?,
            retransmissions: get("retransmissions")?,
            losses_injected: get("losses_injected")?,
            reformations: get("reformations")?,
            release_batches: get("release_batches")?,
            max_release_spread_us: get("max_release_spread_us")?,
            commit_latency: latency("commit_latency")?,
            release_latency: latency("release_latency")?,
            gate_rejects: get("gate_rejects")?,
            tag_rejects: get("tag_rejects")?,
            edge_requests: get("edge_requests")?,
            permanently_lost: get("permanently_lost")?,
            fallbacks: get("fallbacks")?,
            sec_passes: get("sec_passes")?,
            trades_tentative: get("trades_tentative")?,
            trades_confirmed: get("trades_confirmed")?,
            total_failure: get_bool("total_failure")?,
            quiesced: get_bool("quiesced")?,
            horizon_reached: get_bool("horizon_reached")?,
            stripes,
        })
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = |v: bool| u64::from(v);
        writeln!(f, "messages_submitted = {}", self.messages_submitted)?;
        writeln!(f, "resends = {}", self.resends)?;
        writeln!(f, "control_messages = {}", self.control_messages)?;
        writeln!(f, "token_periods = {}", self.token_periods)?;
        writeln!(f, "commits = {}", self.commits)?;
        writeln!(f, "explicit_requests = {}", self.explicit_requests)?;
        writeln!(f, "duplicate_requests = {}", self.duplicate_requests)?;
        writeln!(f, "retransmissions = {}", self.retransmissions)?;
        writeln!(f, "losses_injected = {}", self.losses_injected)?;
        writeln!(f, "reformations = {}", self.reformations)?;
        writeln!(f, "release_batches = {}", self.release_batches)?;
        writeln!(f, "max_release_spread_us = {}", self.max_release_spread_us)?;
        for (prefix, l) in [("commit_latency", &self.commit_latency), ("release_latency", &self.release_latency)] {
            writeln!(f, "{prefix}.count = {}", l.count)?;
            writeln!(f, "{prefix}.mean_us = {}", l.mean_us)?;
            writeln!(f, "{prefix}.p50_us = {}", l.p50_us)?;
            writeln!(f, "{prefix}.p95_us = {}", l.p95_us)?;
            writeln!(f, "{prefix}.max_us = {}", l.max_us)?;
        }
        writeln!(f, "gate_rejects = {}", self.gate_rejects)?;
        writeln!(f, "tag_rejects = {}", self.tag_rejects)?;
        writeln!(f, "edge_requests = {}", self.edge_requests)?;
        writeln!(f, "permanently_lost = {}", self.permanently_lost)?;
        writeln!(f, "fallbacks = {}", self.fallbacks)?;
        writeln!(f, "sec_passes = {}", self.sec_passes)?;
        writeln!(f, "trades_tentative = {}", self.trades_tentative)?;
        writeln!(f, "trades_confirmed = {}", self.trades_confirmed)?;
        writeln!(f, "total_failure = {}", b(self.total_failure))?;
        writeln!(f, "quiesced = {}", b(self.quiesced))?;
        writeln!(f, "horizon_reached = {}", b(self.horizon_reached))?;
        for s in &self.stripes {
            writeln!(f, "stripe.{} = {},{}", s.stripe, s.bytes, s.avg_rate_bits)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut m = Metrics {
            messages_submitted: 10,
            control_messages: 4,
            token_periods: 4,
            quiesced: true,
            ..Default::default()
        };
        m.commit_latency = LatencySummary { count: 10, mean_us: 5, p50_us: 4, p95_us: 9, max_us: 12 };
        m.stripes.push(StripeMetric { stripe: 0, bytes: 100, avg_rate_bits: 800 });
        let text = m.to_text();
        assert_eq!(Metrics::parse(&text).unwrap(), m);
    }
}
