//! The three exchange applications layered on the protocol: unified ticker,
//! unified order stream with credential gating, and the distributed trading
//! floor.

pub mod book;
pub mod floor;

use std::fmt;
use thiserror::Error;

/// Which application a scenario drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppKind {
    Ticker,
    Orders,
    Floor,
}

impl AppKind {
    pub fn parse(s: &str) -> Option<AppKind> {
        match s {
            "ticker" => Some(AppKind::Ticker),
            "orders" => Some(AppKind::Orders),
            "floor" => Some(AppKind::Floor),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AppKind::Ticker => "ticker",
            AppKind::Orders => "orders",
            AppKind::Floor => "floor",
        }
    }
}

/// Decimal currency with four fractional digits, kept in integer ticks so
/// book arithmetic is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Price(pub u64);

impl Price {
    pub const SCALE: u64 = 10_000;

    pub fn from_units(units: u64) -> Price {
        Price(units * Self::SCALE)
    }

    pub fn parse(s: &str) -> Option<Price> {
        let (whole, frac) = match s.split_once('.') {
            None => (s, ""),
            Some((w, f)) => (w, f),
        };
        if frac.len() > 4 || whole.is_empty() && frac.is_empty() {
            return None;
        }
        let whole: u64 = if whole.is_empty() { 0 } else { whole.parse().ok()? };
        let mut frac_ticks = 0u64;
        if !frac.is_empty() {
            let digits: u64 = frac.parse().ok()?;
            frac_ticks = digits * 10u64.pow(4 - frac.len() as u32);
        }
        Some(Price(whole * Self::SCALE + frac_ticks))
    }
}

impl fmt::Display for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / Self::SCALE;
        let frac = self.0 % Self::SCALE;
        if frac == 0 {
            write!(f, "{whole}")
        } else {
            let s = format!("{frac:04}");
            write!(f, "{whole}.{}", s.trim_end_matches('0'))
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bad payload: {0}")]
pub struct PayloadError(String);

/// Order side. A cancel references the (trader, source_seq) of the order it
/// withdraws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Buy,
    Sell,
}

/// One trader instruction carried as a source-message payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrderPayload {
    Limit { trader: String, side: Side, symbol: String, price: Price, qty: u64 },
    Cancel { trader: String, ref_seq: u64 },
}

impl OrderPayload {
    pub fn trader(&self) -> &str {
        match self {
            OrderPayload::Limit { trader, .. } | OrderPayload::Cancel { trader, .. } => trader,
        }
    }
}

/// Application payloads on the wire: ticker trade reports and orders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppRecord {
    Tick { symbol: String, price: Price, qty: u64 },
    Order(OrderPayload),
}

impl AppRecord {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            AppRecord::Tick { symbol, price, qty } => format!("T {symbol} {price} {qty}").into_bytes(),
            AppRecord::Order(OrderPayload::Limit { trader, side, symbol, price, qty }) => {
                let s = match side {
                    Side::Buy => 'B',
                    Side::Sell => 'S',
                };
                format!("O {s} {trader} {symbol} {price} {qty}").into_bytes()
            }
            AppRecord::Order(OrderPayload::Cancel { trader, ref_seq }) => {
                format!("O C {trader} {ref_seq}").into_bytes()
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<AppRecord, PayloadError> {
        let text = std::str::from_utf8(bytes).map_err(|_| PayloadError("not utf-8".into()))?;
        let toks: Vec<&str> = text.split_whitespace().collect();
        let bad = || PayloadError(text.to_string());
        match toks.as_slice() {
            ["T", symbol, price, qty] => Ok(AppRecord::Tick {
                symbol: symbol.to_string(),
                price: Price::parse(price).ok_or_else(bad)?,
                qty: qty.parse().map_err(|_| bad())?,
            }),
            ["O", "B" | "S", trader, symbol, price, qty] => Ok(AppRecord::Order(OrderPayload::Limit {
                trader: trader.to_string(),
                side: if toks[1] == "B" { Side::Buy } else { Side::Sell },
                symbol: symbol.to_string(),
                price: Price::parse(price).ok_or_else(bad)?,
                qty: qty.parse().map_err(|_| bad())?,
            })),
            ["O", "C", trader, ref_seq] => Ok(AppRecord::Order(OrderPayload::Cancel {
                trader: trader.to_string(),
                ref_seq: ref_seq.parse().map_err(|_| bad())?,
            })),
            _ => Err(bad()),
        }
    }

    pub fn symbol(&self) -> Option<&str> {
        match self {
            AppRecord::Tick { symbol, .. } => Some(symbol),
            AppRecord::Order(OrderPayload::Limit { symbol, .. }) => Some(symbol),
            AppRecord::Order(OrderPayload::Cancel { .. }) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn price_parse_and_display() {
        assert_eq!(Price::parse("105").unwrap(), Price(1_050_000));
        assert_eq!(Price::parse("102.5").unwrap(), Price(1_025_000));
        assert_eq!(Price::parse("0.0001").unwrap(), Price(1));
        assert_eq!(Price::parse("105.25").unwrap().to_string(), "105.25");
        assert_eq!(Price(1_025_000).to_string(), "102.5");
        assert!(Price::parse("1.00001").is_none());
        assert!(Price::parse("").is_none());
    }

    #[test]
    fn payload_round_trip() {
        let records = [
            AppRecord::Tick { symbol: "IBM".into(), price: Price::parse("105.25").unwrap(), qty: 100 },
            AppRecord::Order(OrderPayload::Limit {
                trader: "alice".into(),
                side: Side::Buy,
                symbol: "X".into(),
                price: Price::from_units(42),
                qty: 7,
            }),
            AppRecord::Order(OrderPayload::Cancel { trader: "bob".into(), ref_seq: 12 }),
        ];
        for r in records {
            assert_eq!(AppRecord::decode(&r.encode()).unwrap(), r);
        }
        assert!(AppRecord::decode(b"garbage").is_err());
    }
}
