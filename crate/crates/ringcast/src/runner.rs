//! Running scenarios: the library face behind the CLI's `run`, `verify` and
//! `metrics` subcommands.

use crate::engine::{Engine, FinalStates, RunExit};
use crate::metrics::Metrics;
use crate::scenario::{Scenario, ScenarioError, TradeFeed};
use crate::simnet::trace::{kind, Trace};
use std::fs;
use std::io;
use std::path::Path;

/// Everything one run produces.
#[derive(Debug)]
pub struct RunOutcome {
    pub trace: Trace,
    pub metrics: Metrics,
    pub exit: RunExit,
    pub finals: FinalStates,
}

/// Validates and runs a scenario to quiescence, horizon or total failure.
pub fn run_scenario(sc: &Scenario) -> Result<RunOutcome, ScenarioError> {
    let engine = Engine::build(sc)?;
    let (trace, finals, exit) = engine.run();
    let metrics = Metrics::from_trace(&trace);
    Ok(RunOutcome { trace, metrics, exit, finals })
}

/// Runs a scenario file and writes `trace.tsv`, `metrics.txt` and the
/// application output into `out_dir`.
pub fn run_to_dir(sc: &Scenario, out_dir: &Path) -> Result<RunOutcome, io::Error> {
    let outcome = run_scenario(sc)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    fs::create_dir_all(out_dir)?;
    let mut trace_file = fs::File::create(out_dir.join("trace.tsv"))?;
    outcome.trace.write_to(&mut trace_file)?;
    fs::write(out_dir.join("metrics.txt"), outcome.metrics.to_text())?;
    match sc.app {
        crate::apps::AppKind::Ticker | crate::apps::AppKind::Orders => {
            fs::write(out_dir.join("ticker.out"), ticker_output(&outcome.trace, sc))?;
        }
        crate::apps::AppKind::Floor => {
            fs::write(out_dir.join("trades.out"), trades_output(&outcome.trace, sc.trade_feed))?;
        }
    }
    Ok(outcome)
}

/// One line per released record from the reference R_T:
/// `release-time global_seq source payload`.
pub fn ticker_output(trace: &Trace, sc: &Scenario) -> String {
    let reference = sc
        .output_rt
        .clone()
        .unwrap_or_else(|| sc.ring.first().cloned().unwrap_or_default());
    // join RELEASE batches with the batch content from EMIT records
    let mut batches: std::collections::BTreeMap<(u64, u64), Vec<String>> = Default::default();
    for rec in &trace.records {
        if rec.kind == kind::EMIT {
            let key = (rec.get_u64("token").unwrap_or(0), rec.get_u64("bh").unwrap_or(0));
            let labels = rec
                .get("labels")
                .unwrap_or("")
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            batches.entry(key).or_insert(labels);
        }
    }
    let mut out = String::new();
    for rec in &trace.records {
        if rec.kind != kind::RELEASE || rec.node != reference {
            continue;
        }
        let key = (rec.get_u64("token").unwrap_or(0), rec.get_u64("bh").unwrap_or(0));
        let base = rec.get_u64("base").unwrap_or(0);
        if let Some(labels) = batches.get(&key) {
            for (j, label) in labels.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{}\n", rec.at, base + j as u64, label));
            }
        }
    }
    out
}

/// One line per trade event in the configured feed, with both token stamps.
pub fn trades_output(trace: &Trace, feed: TradeFeed) -> String {
    let mut out = String::new();
    for rec in &trace.records {
        let wanted = match rec.kind.as_str() {
            kind::TRADE_TENTATIVE => matches!(feed, TradeFeed::Tentative | TradeFeed::Both),
            kind::TRADE_CONFIRMED => matches!(feed, TradeFeed::Confirmed | TradeFeed::Both),
            _ => false,
        };
        if !wanted {
            continue;
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\tbuy={}\tsell={}\tprice={}\tqty={}\ttentative_at={}\tconfirmed_at={}\n",
            rec.at,
            rec.node,
            rec.kind,
            rec.get("sym").unwrap_or("-"),
            rec.get("buy").unwrap_or("-"),
            rec.get("sell").unwrap_or("-"),
            rec.get("price").unwrap_or("-"),
            rec.get("qty").unwrap_or("-"),
            rec.get("tentative").unwrap_or("-"),
            rec.get("confirmed").unwrap_or("-"),
        ));
    }
    out
}

/// Loads a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let sc = Scenario::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    sc.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(sc)
}
