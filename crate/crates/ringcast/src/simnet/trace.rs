//! Append-only run trace: one tab-separated record per line. Identical
//! scenario + seed produces a byte-identical trace.

use crate::time::SimTime;
use std::fmt;
use std::io::{self, BufRead, Write};
use thiserror::Error;

/// Record kinds written by the engine. The verifier replays these.
pub mod kind {
    pub const META: &str = "META";
    pub const SUBMIT: &str = "SUBMIT";
    pub const RESEND: &str = "RESEND";
    pub const GATE_REJECT: &str = "GATE_REJECT";
    pub const TAG_REJECT: &str = "TAG_REJECT";
    pub const EMIT: &str = "EMIT";
    pub const COMMIT: &str = "COMMIT";
    pub const ACCEPT: &str = "ACCEPT";
    pub const RELEASE: &str = "RELEASE";
    pub const WITHHELD: &str = "WITHHELD";
    pub const REQUEST: &str = "REQUEST";
    pub const DUP_REQUEST: &str = "DUP_REQUEST";
    pub const RETRANS: &str = "RETRANS";
    pub const DROP: &str = "DROP";
    pub const CRASH: &str = "CRASH";
    pub const RECOVER: &str = "RECOVER";
    pub const REPORT: &str = "REPORT";
    pub const INVITE: &str = "INVITE";
    pub const JOIN: &str = "JOIN";
    pub const NEW_RING: &str = "NEW_RING";
    pub const SEC_PASS: &str = "SEC_PASS";
    pub const SEC_RING: &str = "SEC_RING";
    pub const FALLBACK: &str = "FALLBACK";
    pub const EDGE_REQUEST: &str = "EDGE_REQUEST";
    pub const EDGE_LOST: &str = "EDGE_LOST";
    pub const CUSTOMER_DELIVER: &str = "CUSTOMER_DELIVER";
    pub const TRADE_TENTATIVE: &str = "TRADE_TENTATIVE";
    pub const TRADE_CONFIRMED: &str = "TRADE_CONFIRMED";
    pub const TOTAL_FAILURE: &str = "TOTAL_FAILURE";
    pub const QUIESCE: &str = "QUIESCE";
    pub const HORIZON: &str = "HORIZON";
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One trace record: time, node, kind, then `key=value` detail fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub at: SimTime,
    pub node: String,
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl TraceRecord {
    pub fn new(at: SimTime, node: impl Into<String>, kind: &str) -> Self {
        TraceRecord { at, node: node.into(), kind: kind.to_string(), fields: Vec::new() }
    }

    pub fn field(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key)?.parse().ok()
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.at, self.node, self.kind)?;
        for (k, v) in &self.fields {
            write!(f, "\t{k}={v}")?;
        }
        Ok(())
    }
}

/// The whole run trace plus convenience IO.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for rec in &self.records {
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Trace, TraceParseError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(parse_line(&line, i + 1)?);
        }
        Ok(Trace { records })
    }

    pub fn parse(text: &str) -> Result<Trace, TraceParseError> {
        Trace::read_from(text.as_bytes())
    }

    /// META fields collected from the head of the trace.
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.records
            .iter()
            .take_while(|r| r.kind == kind::META)
            .find_map(|r| r.get(key))
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<TraceRecord, TraceParseError> {
    let mut parts = line.split('\t');
    let err = |reason: &str| TraceParseError::Malformed { line: lineno, reason: reason.to_string() };
    let at: u64 = parts
        .next()
        .ok_or_else(|| err("missing time"))?
        .parse()
        .map_err(|_| err("bad time"))?;
    let node = parts.next().ok_or_else(|| err("missing node"))?.to_string();
    let kind = parts.next().ok_or_else(|| err("missing kind"))?.to_string();
    if kind.is_empty() {
        return Err(err("empty kind"));
    }
    let mut fields = Vec::new();
    for p in parts {
        match p.split_once('=') {
            Some((k, v)) => fields.push((k.to_string(), v.to_string())),
            None => return Err(err(&format!("field `{p}` is not key=value"))),
        }
    }
    Ok(TraceRecord { at: SimTime(at), node, kind, fields })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut t = Trace::default();
        t.push(TraceRecord::new(SimTime(0), "-", kind::META).field("seed", 42).field("m", 3));
        t.push(
            TraceRecord::new(SimTime(525000), "rp0", kind::EMIT)
                .field("token", 1)
                .field("base", 1)
                .field("k", 2),
        );
        let text = t.to_text();
        let parsed = Trace::parse(&text).unwrap();
        assert_eq!(parsed.records, t.records);
        assert_eq!(parsed.meta("seed"), Some("42"));
        assert_eq!(parsed.records[1].get_u64("token"), Some(1));
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let e = Trace::parse("1\trp0\n").unwrap_err();
        assert!(matches!(e, TraceParseError::Malformed { line: 1, .. }));
        let e = Trace::parse("1\trp0\tEMIT\tnokv\n").unwrap_err();
        assert!(e.to_string().contains("line 1"));
        assert!(Trace::parse("x\trp0\tEMIT\n").is_err());
    }
}
