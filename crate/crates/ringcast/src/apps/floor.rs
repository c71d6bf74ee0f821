//! Trading-floor specifics: the credential gate at primary sources and the
//! tentative/confirmed trade records the token-site arbiter emits.

use super::book::Fill;
use super::{OrderPayload, Price, Side};
use std::collections::BTreeMap;

/// Why an order was refused at the gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    UnknownTrader,
    InsufficientPosition,
    InsufficientFunds,
}

impl RejectReason {
    pub fn name(&self) -> &'static str {
        match self {
            RejectReason::UnknownTrader => "unknown_trader",
            RejectReason::InsufficientPosition => "insufficient_position",
            RejectReason::InsufficientFunds => "insufficient_funds",
        }
    }
}

/// Scenario-level account bookkeeping: funds and per-symbol positions, with
/// running reservations for accepted orders. No settlement.
#[derive(Debug, Clone, Default)]
pub struct Accounts {
    entries: BTreeMap<String, Account>,
}

#[derive(Debug, Clone, Default)]
struct Account {
    funds: u64,
    positions: BTreeMap<String, u64>,
}

impl Accounts {
    pub fn add_trader(&mut self, trader: &str, funds: u64, positions: Vec<(String, u64)>) {
        self.entries.insert(
            trader.to_string(),
            Account { funds, positions: positions.into_iter().collect() },
        );
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Credential check at the primary source: a sell needs position, a buy
    /// needs funds for price*quantity. Accepted orders reserve what they
    /// claimed; rejected ones never enter the multicast group.
    pub fn gate_order(&mut self, order: &OrderPayload) -> Result<(), RejectReason> {
        let trader = order.trader();
        let account = self.entries.get_mut(trader).ok_or(RejectReason::UnknownTrader)?;
        match order {
            OrderPayload::Cancel { .. } => Ok(()),
            OrderPayload::Limit { side: Side::Sell, symbol, qty, .. } => {
                let held = account.positions.entry(symbol.clone()).or_insert(0);
                if *held < *qty {
                    return Err(RejectReason::InsufficientPosition);
                }
                *held -= qty;
                Ok(())
            }
            OrderPayload::Limit { side: Side::Buy, price, qty, .. } => {
                let cost = cost_of(*price, *qty);
                if account.funds < cost {
                    return Err(RejectReason::InsufficientFunds);
                }
                account.funds -= cost;
                Ok(())
            }
        }
    }
}

/// Price*quantity in price ticks.
fn cost_of(price: Price, qty: u64) -> u64 {
    price.0 * qty
}

/// A trade as reported by the arbiter: the fill plus the token stamps. The
/// confirmation lands one full ring cycle after the tentative report, so
/// `confirmed_at >= tentative_at + m` against the confirming ring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TradeEvent {
    pub fill: Fill,
    pub tentative_at: u64,
    pub confirmed_at: Option<u64>,
}

/// Tracks the tentative trades a node reported while it was the arbiter and
/// confirms them once the node next holds a token at least one full ring
/// cycle later.
#[derive(Debug, Clone, Default)]
pub struct ArbiterLog {
    pub outstanding: Vec<TradeEvent>,
    pub confirmed: Vec<TradeEvent>,
}

impl ArbiterLog {
    /// Records tentative trades reported while acknowledging token `t`.
    pub fn report_tentative(&mut self, fills: Vec<Fill>, token: u64) -> Vec<TradeEvent> {
        let events: Vec<TradeEvent> = fills
            .into_iter()
            .map(|fill| TradeEvent { fill, tentative_at: token, confirmed_at: None })
            .collect();
        self.outstanding.extend(events.clone());
        events
    }

    /// Confirms every outstanding tentative reported at token <= t - m.
    pub fn confirm_through(&mut self, t: u64, m: usize) -> Vec<TradeEvent> {
        let cutoff = t.saturating_sub(m as u64);
        let mut confirmed = Vec::new();
        self.outstanding.retain_mut(|ev| {
            if ev.tentative_at <= cutoff {
                ev.confirmed_at = Some(t);
                confirmed.push(ev.clone());
                false
            } else {
                true
            }
        });
        self.confirmed.extend(confirmed.clone());
        confirmed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accounts() -> Accounts {
        let mut a = Accounts::default();
        a.add_trader("alice", 1_000 * Price::SCALE, vec![("IBM".into(), 100)]);
        a.add_trader("bob", 49 * Price::SCALE, vec![("IBM".into(), 10)]);
        a
    }

    fn sell(trader: &str, qty: u64) -> OrderPayload {
        OrderPayload::Limit {
            trader: trader.into(),
            side: Side::Sell,
            symbol: "IBM".into(),
            price: Price::from_units(10),
            qty,
        }
    }

    fn buy(trader: &str, price: u64, qty: u64) -> OrderPayload {
        OrderPayload::Limit {
            trader: trader.into(),
            side: Side::Buy,
            symbol: "IBM".into(),
            price: Price::from_units(price),
            qty,
        }
    }

    #[test]
    fn gate_checks_position_and_funds() {
        let mut a = accounts();
        assert_eq!(a.gate_order(&sell("alice", 50)), Ok(()));
        assert_eq!(a.gate_order(&sell("bob", 50)), Err(RejectReason::InsufficientPosition));
        // 10 shares at 5 = 50 > 49 funds
        assert_eq!(a.gate_order(&buy("bob", 5, 10)), Err(RejectReason::InsufficientFunds));
        assert_eq!(a.gate_order(&buy("alice", 5, 10)), Ok(()));
        assert_eq!(
            a.gate_order(&buy("mallory", 1, 1)),
            Err(RejectReason::UnknownTrader)
        );
    }

    #[test]
    fn accepted_orders_reserve() {
        let mut a = accounts();
        assert_eq!(a.gate_order(&sell("alice", 60)), Ok(()));
        // the first sell reserved 60 of 100 shares
        assert_eq!(a.gate_order(&sell("alice", 60)), Err(RejectReason::InsufficientPosition));
    }

    #[test]
    fn confirmation_waits_one_full_cycle() {
        let mut log = ArbiterLog::default();
        let fill = Fill {
            symbol: "X".into(),
            buy_seq: 2,
            sell_seq: 1,
            price: Price::from_units(5),
            qty: 1,
        };
        let tentative = log.report_tentative(vec![fill], 10);
        assert_eq!(tentative.len(), 1);
        assert_eq!(tentative[0].tentative_at, 10);
        // next holding at t=17 with m=8: 10 > 17-8, not yet confirmable
        assert!(log.confirm_through(17, 8).is_empty());
        let confirmed = log.confirm_through(18, 8);
        assert_eq!(confirmed.len(), 1);
        assert_eq!(confirmed[0].confirmed_at, Some(18));
        assert!(confirmed[0].confirmed_at.unwrap() >= confirmed[0].tentative_at + 8);
        assert!(log.confirm_through(26, 8).is_empty());
    }
}
