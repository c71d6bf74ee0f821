//! Price-time-priority order book. Book state is a pure function of the
//! committed prefix of the global sequence, so any two nodes with the same
//! prefix hold identical books and derive identical trades.

use super::{OrderPayload, Price, Side};
use std::collections::BTreeMap;

/// Execution-price rule when a buy at A crosses a sell at B <= A.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceRule {
    BuyerPrice,
    SellerPrice,
    Midpoint,
}

impl PriceRule {
    pub fn parse(s: &str) -> Option<PriceRule> {
        match s {
            "buyer" => Some(PriceRule::BuyerPrice),
            "seller" => Some(PriceRule::SellerPrice),
            "midpoint" => Some(PriceRule::Midpoint),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PriceRule::BuyerPrice => "buyer",
            PriceRule::SellerPrice => "seller",
            PriceRule::Midpoint => "midpoint",
        }
    }

    fn execution_price(&self, buy: Price, sell: Price) -> Price {
        match self {
            PriceRule::BuyerPrice => buy,
            PriceRule::SellerPrice => sell,
            PriceRule::Midpoint => Price((buy.0 + sell.0) / 2),
        }
    }
}

/// A resting order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestingOrder {
    pub trader: String,
    pub symbol: String,
    pub side: Side,
    pub price: Price,
    pub qty: u64,
    pub global_seq: u64,
    /// The (trader, source_seq) reference cancels use.
    pub ref_seq: u64,
}

/// One execution between a buy and a sell, identified by the orders' global
/// sequence numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fill {
    pub symbol: String,
    pub buy_seq: u64,
    pub sell_seq: u64,
    pub price: Price,
    pub qty: u64,
}

/// Outcome of applying one committed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Applied {
    Fills(Vec<Fill>),
    Rested,
    Cancelled,
    /// Cancel of an unknown or already-filled order.
    CancelNoOp,
}

#[derive(Debug, Clone, Default)]
struct SymbolBook {
    /// Buys keyed for best-first iteration: (max price, min seq) first.
    buys: BTreeMap<(std::cmp::Reverse<Price>, u64), RestingOrder>,
    /// Sells keyed (min price, min seq) first.
    sells: BTreeMap<(Price, u64), RestingOrder>,
}

/// The full book plus the deterministic replay cursor.
#[derive(Debug, Clone, Default)]
pub struct OrderBook {
    symbols: BTreeMap<String, SymbolBook>,
    cancel_index: BTreeMap<(String, u64), (String, Side, Price, u64)>,
}

impl OrderBook {
    pub fn new() -> Self {
        OrderBook::default()
    }

    /// Applies one committed order in global-sequence order. `ref_seq` is
    /// the per-source sequence of the carrying message, used as the cancel
    /// reference.
    pub fn apply(
        &mut self,
        order: &OrderPayload,
        global_seq: u64,
        ref_seq: u64,
        rule: PriceRule,
    ) -> Applied {
        match order {
            OrderPayload::Cancel { trader, ref_seq } => self.cancel(trader, *ref_seq),
            OrderPayload::Limit { trader, side, symbol, price, qty } => {
                self.cross(trader, *side, symbol, *price, *qty, global_seq, ref_seq, rule)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn cross(
        &mut self,
        trader: &str,
        side: Side,
        symbol: &str,
        price: Price,
        mut qty: u64,
        global_seq: u64,
        ref_seq: u64,
        rule: PriceRule,
    ) -> Applied {
        let book = self.symbols.entry(symbol.to_string()).or_default();
        let mut fills = Vec::new();
        match side {
            Side::Buy => {
                while qty > 0 {
                    let Some((key, best)) = book.sells.iter().next().map(|(k, v)| (*k, v.clone()))
                    else {
                        break;
                    };
                    if best.price > price {
                        break;
                    }
                    let take = qty.min(best.qty);
                    fills.push(Fill {
                        symbol: symbol.to_string(),
                        buy_seq: global_seq,
                        sell_seq: best.global_seq,
                        price: rule.execution_price(price, best.price),
                        qty: take,
                    });
                    qty -= take;
                    if take == best.qty {
                        book.sells.remove(&key);
                        self.cancel_index.remove(&(best.trader.clone(), best.ref_seq));
                    } else {
                        book.sells.get_mut(&key).unwrap().qty -= take;
                    }
                }
            }
            Side::Sell => {
                while qty > 0 {
                    let Some((key, best)) = book.buys.iter().next().map(|(k, v)| (*k, v.clone()))
                    else {
                        break;
                    };
                    if best.price < price {
                        break;
                    }
                    let take = qty.min(best.qty);
                    fills.push(Fill {
                        symbol: symbol.to_string(),
                        buy_seq: best.global_seq,
                        sell_seq: global_seq,
                        price: rule.execution_price(best.price, price),
                        qty: take,
                    });
                    qty -= take;
                    if take == best.qty {
                        book.buys.remove(&key);
                        self.cancel_index.remove(&(best.trader.clone(), best.ref_seq));
                    } else {
                        book.buys.get_mut(&key).unwrap().qty -= take;
                    }
                }
            }
        }
        if qty > 0 {
            let resting = RestingOrder {
                trader: trader.to_string(),
                symbol: symbol.to_string(),
                side,
                price,
                qty,
                global_seq,
                ref_seq,
            };
            match side {
                Side::Buy => {
                    book.buys.insert((std::cmp::Reverse(price), global_seq), resting);
                }
                Side::Sell => {
                    book.sells.insert((price, global_seq), resting);
                }
            }
            self.cancel_index.insert(
                (trader.to_string(), ref_seq),
                (symbol.to_string(), side, price, global_seq),
            );
            if fills.is_empty() {
                return Applied::Rested;
            }
        }
        if fills.is_empty() {
            Applied::Rested
        } else {
            Applied::Fills(fills)
        }
    }

    fn cancel(&mut self, trader: &str, ref_seq: u64) -> Applied {
        let Some((symbol, side, price, global_seq)) =
            self.cancel_index.remove(&(trader.to_string(), ref_seq))
        else {
            return Applied::CancelNoOp;
        };
        let book = self.symbols.get_mut(&symbol).expect("indexed symbol exists");
        let removed = match side {
            Side::Buy => book.buys.remove(&(std::cmp::Reverse(price), global_seq)).is_some(),
            Side::Sell => book.sells.remove(&(price, global_seq)).is_some(),
        };
        debug_assert!(removed);
        Applied::Cancelled
    }

    pub fn resting(&self, symbol: &str) -> (Vec<&RestingOrder>, Vec<&RestingOrder>) {
        match self.symbols.get(symbol) {
            None => (Vec::new(), Vec::new()),
            Some(b) => (b.buys.values().collect(), b.sells.values().collect()),
        }
    }
}

/// Replays a committed order stream into a book, collecting every fill.
/// Trades are a pure function of (sequence, price rule).
pub fn replay_fills<'a, I>(orders: I, rule: PriceRule) -> Vec<Fill>
where
    I: IntoIterator<Item = (u64, u64, &'a OrderPayload)>,
{
    let mut book = OrderBook::new();
    let mut fills = Vec::new();
    for (global_seq, ref_seq, order) in orders {
        if let Applied::Fills(f) = book.apply(order, global_seq, ref_seq, rule) {
            fills.extend(f);
        }
    }
    fills
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn limit(trader: &str, side: Side, price: &str, qty: u64) -> OrderPayload {
        OrderPayload::Limit {
            trader: trader.into(),
            side,
            symbol: "X".into(),
            price: Price::parse(price).unwrap(),
            qty,
        }
    }

    #[test]
    fn price_rules_on_a_cross() {
        for (rule, expect) in [
            (PriceRule::BuyerPrice, "105"),
            (PriceRule::SellerPrice, "100"),
            (PriceRule::Midpoint, "102.5"),
        ] {
            let mut book = OrderBook::new();
            assert_eq!(book.apply(&limit("s", Side::Sell, "100", 10), 1, 1, rule), Applied::Rested);
            let applied = book.apply(&limit("b", Side::Buy, "105", 10), 2, 1, rule);
            let Applied::Fills(fills) = applied else { panic!("expected fills") };
            assert_eq!(fills.len(), 1);
            assert_eq!(fills[0].price, Price::parse(expect).unwrap());
            assert_eq!(fills[0].buy_seq, 2);
            assert_eq!(fills[0].sell_seq, 1);
        }
    }

    #[test]
    fn no_cross_rests() {
        let mut book = OrderBook::new();
        book.apply(&limit("s", Side::Sell, "101", 10), 1, 1, PriceRule::SellerPrice);
        let applied = book.apply(&limit("b", Side::Buy, "100", 10), 2, 1, PriceRule::SellerPrice);
        assert_eq!(applied, Applied::Rested);
        let (buys, sells) = book.resting("X");
        assert_eq!((buys.len(), sells.len()), (1, 1));
    }

    #[test]
    fn time_priority_at_equal_price() {
        let mut book = OrderBook::new();
        book.apply(&limit("s1", Side::Sell, "100", 5), 7, 1, PriceRule::SellerPrice);
        book.apply(&limit("s2", Side::Sell, "100", 5), 9, 2, PriceRule::SellerPrice);
        let Applied::Fills(fills) = book.apply(&limit("b", Side::Buy, "100", 5), 10, 1, PriceRule::SellerPrice)
        else {
            panic!()
        };
        assert_eq!(fills[0].sell_seq, 7);
    }

    #[test]
    fn partial_fills_split_quantity() {
        let mut book = OrderBook::new();
        book.apply(&limit("s", Side::Sell, "100", 4), 1, 1, PriceRule::SellerPrice);
        book.apply(&limit("s", Side::Sell, "101", 4), 2, 2, PriceRule::SellerPrice);
        let Applied::Fills(fills) = book.apply(&limit("b", Side::Buy, "101", 6), 3, 1, PriceRule::SellerPrice)
        else {
            panic!()
        };
        assert_eq!(fills.len(), 2);
        assert_eq!(fills[0].qty, 4);
        assert_eq!(fills[1].qty, 2);
        let (_, sells) = book.resting("X");
        assert_eq!(sells[0].qty, 2);
    }

    #[test]
    fn cancel_removes_resting_and_noops_otherwise() {
        let mut book = OrderBook::new();
        book.apply(&limit("a", Side::Buy, "99", 5), 1, 4, PriceRule::SellerPrice);
        assert_eq!(
            book.apply(&OrderPayload::Cancel { trader: "a".into(), ref_seq: 4 }, 2, 5, PriceRule::SellerPrice),
            Applied::Cancelled
        );
        assert_eq!(
            book.apply(&OrderPayload::Cancel { trader: "a".into(), ref_seq: 4 }, 3, 6, PriceRule::SellerPrice),
            Applied::CancelNoOp
        );
        let (buys, _) = book.resting("X");
        assert!(buys.is_empty());
    }

    proptest! {
        /// Replay determinism: identical committed prefixes yield identical
        /// fills, and a longer prefix extends the shorter one's fills.
        #[test]
        fn replay_is_prefix_deterministic(ops in proptest::collection::vec((0u8..4, 1u64..6, 95u64..105), 1..40)) {
            let orders: Vec<(u64, u64, OrderPayload)> = ops
                .iter()
                .enumerate()
                .map(|(i, (side, qty, price))| {
                    let payload = match side % 2 {
                        0 => OrderPayload::Limit {
                            trader: format!("t{}", side % 3),
                            side: Side::Buy,
                            symbol: "X".into(),
                            price: Price::from_units(*price),
                            qty: *qty,
                        },
                        _ => OrderPayload::Limit {
                            trader: format!("t{}", side % 3),
                            side: Side::Sell,
                            symbol: "X".into(),
                            price: Price::from_units(*price),
                            qty: *qty,
                        },
                    };
                    ((i + 1) as u64, (i + 1) as u64, payload)
                })
                .collect();
            let all: Vec<(u64, u64, &OrderPayload)> = orders.iter().map(|(g, r, o)| (*g, *r, o)).collect();
            let full_a = replay_fills(all.clone(), PriceRule::SellerPrice);
            let full_b = replay_fills(all.clone(), PriceRule::SellerPrice);
            prop_assert_eq!(&full_a, &full_b);
            let cut = all.len() / 2;
            let half = replay_fills(all[..cut].to_vec(), PriceRule::SellerPrice);
            prop_assert!(full_a.len() >= half.len());
            prop_assert_eq!(&full_a[..half.len()], &half[..]);
        }
    }
}
