//! Zero-intelligence stochastic order-book baseline.
//!
//! Limit orders, market orders, and cancellations arrive as independent
//! Poisson streams. Limit orders land at integer tick distances from the
//! best opposite quote, market orders eat the best level, and resting
//! shares cancel at a per-share hazard. The book is kept to the top
//! `n_levels` per side (quotes pushed below that band evaporate), so the
//! emitted Level-2 snapshots are the complete internal state. One state
//! is emitted per event with exponential waiting times, giving a
//! comparison stream with realistic queue churn but no strategic order
//! placement.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{BookState, LevelQuote, Side, Ticks};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("need at least {need} states, found {found}")]
    TooFewStates { need: usize, found: usize },
    #[error("bad input data: {0}")]
    BadData(String),
}

/// Arrival intensities and sizing for the simulator. Each side's level
/// at distance `d` ticks from the best opposite quote receives limit
/// orders at its own intensity (index `d - 1`), so single-event-type
/// configurations are expressible; `market_rate` is per direction;
/// `cancel_rate` is per resting share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContParams {
    pub bid_limit_rates: Vec<f64>,
    pub ask_limit_rates: Vec<f64>,
    pub market_rate: f64,
    pub cancel_rate: f64,
    pub order_size: i64,
    pub n_levels: usize,
    pub seed: u64,
}

/// Power-law limit intensities `k / d^gamma` for distances `1..=n`.
pub fn power_law_rates(k: f64, gamma: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|d| k / (d as f64).powf(gamma)).collect()
}

impl ContParams {
    /// Symmetric power-law limit ladders on both sides, with the
    /// illustrative defaults `k = 1`, `gamma = 0.6` when in doubt.
    pub fn power_law(
        k: f64,
        gamma: f64,
        market_rate: f64,
        cancel_rate: f64,
        order_size: i64,
        n_levels: usize,
        seed: u64,
    ) -> Self {
        let rates = power_law_rates(k, gamma, n_levels);
        Self {
            bid_limit_rates: rates.clone(),
            ask_limit_rates: rates,
            market_rate,
            cancel_rate,
            order_size,
            n_levels,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.n_levels == 0 {
            return Err(BaselineError::BadParams("n_levels must be at least 1".into()));
        }
        for (name, rates) in [("bid_limit_rates", &self.bid_limit_rates), ("ask_limit_rates", &self.ask_limit_rates)] {
            if rates.len() != self.n_levels {
                return Err(BaselineError::BadParams(format!(
                    "{name} has {} entries for {} levels",
                    rates.len(),
                    self.n_levels
                )));
            }
        }
        if self.order_size < 1 {
            return Err(BaselineError::BadParams(format!("order_size {} below 1", self.order_size)));
        }
        let rates_ok = self
            .bid_limit_rates
            .iter()
            .chain(&self.ask_limit_rates)
            .all(|r| r.is_finite() && *r >= 0.0)
            && self.market_rate.is_finite()
            && self.market_rate >= 0.0
            && self.cancel_rate.is_finite()
            && self.cancel_rate >= 0.0;
        if !rates_ok {
            return Err(BaselineError::BadParams("rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Event {
    Limit(Side, usize),
    Market(Side),
    Cancel(Side, Ticks),
}

/// Simulation output: one state per event, flagged if the run stopped
/// before `horizon` because one side emptied or no event was possible.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub states: Vec<BookState>,
    pub horizon: usize,
    pub halted_early: bool,
}

impl SimResult {
    pub fn emitted(&self) -> usize {
        self.states.len()
    }
}

struct Ladders {
    bids: BTreeMap<Ticks, i64>,
    asks: BTreeMap<Ticks, i64>,
}

impl Ladders {
    fn from_state(init: &BookState) -> Self {
        let mut bids = BTreeMap::new();
        let mut asks = BTreeMap::new();
        for q in &init.bids {
            if !q.is_absent() && q.size > 0 {
                *bids.entry(q.price).or_insert(0) += q.size;
            }
        }
        for q in &init.asks {
            if !q.is_absent() && q.size > 0 {
                *asks.entry(q.price).or_insert(0) += q.size;
            }
        }
        Self { bids, asks }
    }

    fn best_bid(&self) -> Option<Ticks> {
        self.bids.keys().next_back().copied()
    }

    fn best_ask(&self) -> Option<Ticks> {
        self.asks.keys().next().copied()
    }

    /// Drop quotes below the top `n` price ranks on each side.
    fn prune(&mut self, n: usize) {
        while self.bids.len() > n {
            let k = *self.bids.keys().next().unwrap();
            self.bids.remove(&k);
        }
        while self.asks.len() > n {
            let k = *self.asks.keys().next_back().unwrap();
            self.asks.remove(&k);
        }
    }

    fn snapshot(&self, timestamp: f64, n: usize) -> BookState {
        let mut bids: Vec<LevelQuote> =
            self.bids.iter().rev().take(n).map(|(&p, &s)| LevelQuote::new(p, s)).collect();
        let mut asks: Vec<LevelQuote> = self.asks.iter().take(n).map(|(&p, &s)| LevelQuote::new(p, s)).collect();
        while bids.len() < n {
            bids.push(LevelQuote::absent(Side::Bid));
        }
        while asks.len() < n {
            asks.push(LevelQuote::absent(Side::Ask));
        }
        BookState::new(timestamp, asks, bids)
    }
}

/// Event-driven simulation from `init` for up to `horizon` events. The
/// next event is drawn proportional to intensity (cancellations weighted
/// by resting shares), waiting times are exponential in the total
/// intensity, and every event emits one state. Deterministic in
/// `params.seed`.
pub fn simulate(params: &ContParams, init: &BookState, horizon: usize) -> Result<SimResult, BaselineError> {
    params.validate()?;
    if horizon == 0 {
        return Err(BaselineError::BadParams("horizon must be at least 1".into()));
    }
    init.validate().map_err(|e| BaselineError::BadData(format!("invalid initial state: {e}")))?;
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    let mut book = Ladders::from_state(init);
    book.prune(params.n_levels);
    let mut t = init.timestamp;
    let mut states = Vec::with_capacity(horizon);
    let mut events: Vec<(Event, f64)> = Vec::new();
    let mut halted_early = false;
    for _ in 0..horizon {
        if book.bids.is_empty() || book.asks.is_empty() {
            halted_early = true;
            break;
        }
        events.clear();
        for (d, &rate) in params.bid_limit_rates.iter().enumerate() {
            if rate > 0.0 {
                events.push((Event::Limit(Side::Bid, d + 1), rate));
            }
        }
        for (d, &rate) in params.ask_limit_rates.iter().enumerate() {
            if rate > 0.0 {
                events.push((Event::Limit(Side::Ask, d + 1), rate));
            }
        }
        if params.market_rate > 0.0 {
            events.push((Event::Market(Side::Bid), params.market_rate));
            events.push((Event::Market(Side::Ask), params.market_rate));
        }
        if params.cancel_rate > 0.0 {
            for (&p, &s) in &book.bids {
                events.push((Event::Cancel(Side::Bid, p), params.cancel_rate * s as f64));
            }
            for (&p, &s) in &book.asks {
                events.push((Event::Cancel(Side::Ask, p), params.cancel_rate * s as f64));
            }
        }
        let total: f64 = events.iter().map(|(_, r)| r).sum();
        if total <= 0.0 {
            halted_early = true;
            break;
        }
        t += -(1.0 - rng.random::<f64>()).ln() / total;
        let mut x = rng.random::<f64>() * total;
        let mut chosen = events[events.len() - 1].0;
        for &(ev, rate) in &events {
            if x < rate {
                chosen = ev;
                break;
            }
            x -= rate;
        }
        apply_event(&mut book, chosen, params.order_size);
        book.prune(params.n_levels);
        states.push(book.snapshot(t, params.n_levels));
    }
    Ok(SimResult { states, horizon, halted_early })
}

fn apply_event(book: &mut Ladders, ev: Event, order_size: i64) {
    match ev {
        Event::Limit(Side::Bid, d) => {
            let p = book.best_ask().expect("asks nonempty") - d as Ticks;
            *book.bids.entry(p).or_insert(0) += order_size;
        }
        Event::Limit(Side::Ask, d) => {
            let p = book.best_bid().expect("bids nonempty") + d as Ticks;
            *book.asks.entry(p).or_insert(0) += order_size;
        }
        Event::Market(Side::Ask) => {
            // A market buy lifts asks from the best level up.
            let mut remaining = order_size;
            while remaining > 0 {
                let Some(p) = book.best_ask() else { break };
                let s = book.asks.get_mut(&p).unwrap();
                let take = remaining.min(*s);
                *s -= take;
                remaining -= take;
                if *s == 0 {
                    book.asks.remove(&p);
                }
            }
        }
        Event::Market(Side::Bid) => {
            let mut remaining = order_size;
            while remaining > 0 {
                let Some(p) = book.best_bid() else { break };
                let s = book.bids.get_mut(&p).unwrap();
                let take = remaining.min(*s);
                *s -= take;
                remaining -= take;
                if *s == 0 {
                    book.bids.remove(&p);
                }
            }
        }
        Event::Cancel(Side::Bid, p) => {
            if let Some(s) = book.bids.get_mut(&p) {
                *s -= order_size.min(*s);
                if *s == 0 {
                    book.bids.remove(&p);
                }
            }
        }
        Event::Cancel(Side::Ask, p) => {
            if let Some(s) = book.asks.get_mut(&p) {
                *s -= order_size.min(*s);
                if *s == 0 {
                    book.asks.remove(&p);
                }
            }
        }
    }
}

/// Attribution of size decrements at the best quote, which Level-2 data
/// cannot split into market orders and cancellations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrateOptions {
    /// Fraction of best-quote decrements attributed to market orders.
    pub market_share: f64,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        Self { market_share: 0.5 }
    }
}

/// Coarse moment-matching fit with the default 50/50 market/cancel
/// attribution. See [`calibrate_with`].
pub fn calibrate(states: &[BookState]) -> Result<ContParams, BaselineError> {
    calibrate_with(states, &CalibrateOptions::default())
}

/// Estimates arrival intensities from event frequencies. Size increments
/// count as limit arrivals bucketed by tick distance to the previous
/// opposite best; size decrements at the best quote split into market
/// and cancel flow by `opts.market_share`, deeper decrements count as
/// cancellations outright. Rates are normalized by elapsed time (and for
/// cancellations by average resting shares); per-side rates assume
/// bid/ask symmetry. A coarse fit, not a likelihood estimate.
pub fn calibrate_with(states: &[BookState], opts: &CalibrateOptions) -> Result<ContParams, BaselineError> {
    const MIN_STATES: usize = 1000;
    if states.len() < MIN_STATES {
        return Err(BaselineError::TooFewStates { need: MIN_STATES, found: states.len() });
    }
    if !(0.0..=1.0).contains(&opts.market_share) {
        return Err(BaselineError::BadParams(format!("market_share {} outside [0, 1]", opts.market_share)));
    }
    let n = states[0].levels();
    let elapsed = states.last().unwrap().timestamp - states[0].timestamp;
    if elapsed <= 0.0 {
        return Err(BaselineError::BadData("timestamps do not advance".into()));
    }
    let mut limit_counts = vec![0u64; n];
    let mut best_decrements = 0u64;
    let mut deep_decrements = 0u64;
    let mut increment_shares = 0i64;
    let mut increment_events = 0u64;
    let mut shares_total = 0i64;
    for w in states.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        for (side, prev_quotes, cur_quotes) in
            [(Side::Bid, &prev.bids, &cur.bids), (Side::Ask, &prev.asks, &cur.asks)]
        {
            let size_in = |quotes: &[LevelQuote], p: Ticks| {
                quotes.iter().find(|q| !q.is_absent() && q.price == p).map_or(0, |q| q.size)
            };
            let prev_best = prev_quotes.first().filter(|q| !q.is_absent()).map(|q| q.price);
            let opposite_best = match side {
                Side::Bid => prev.best_ask().map(|q| q.price),
                Side::Ask => prev.best_bid().map(|q| q.price),
            };
            for q in cur_quotes.iter().filter(|q| !q.is_absent()) {
                let delta = q.size - size_in(prev_quotes, q.price);
                if delta > 0 {
                    if let Some(opp) = opposite_best {
                        let d = match side {
                            Side::Bid => opp - q.price,
                            Side::Ask => q.price - opp,
                        };
                        if (1..=n as i64).contains(&d) {
                            limit_counts[(d - 1) as usize] += 1;
                            increment_shares += delta;
                            increment_events += 1;
                        }
                    }
                }
            }
            for q in prev_quotes.iter().filter(|q| !q.is_absent()) {
                if q.size > size_in(cur_quotes, q.price) {
                    if prev_best == Some(q.price) {
                        best_decrements += 1;
                    } else {
                        deep_decrements += 1;
                    }
                }
            }
        }
        shares_total += cur.bids.iter().chain(&cur.asks).map(|q| q.size).sum::<i64>();
    }
    let limit_rates: Vec<f64> = limit_counts.iter().map(|&c| c as f64 / (2.0 * elapsed)).collect();
    let market_rate = opts.market_share * best_decrements as f64 / (2.0 * elapsed);
    let cancel_events = deep_decrements as f64 + (1.0 - opts.market_share) * best_decrements as f64;
    let avg_shares = shares_total as f64 / (states.len() - 1) as f64;
    let cancel_rate = if avg_shares > 0.0 { cancel_events / (avg_shares * elapsed) } else { 0.0 };
    let order_size = if increment_events > 0 {
        (increment_shares as f64 / increment_events as f64).round().max(1.0) as i64
    } else {
        1
    };
    Ok(ContParams {
        bid_limit_rates: limit_rates.clone(),
        ask_limit_rates: limit_rates,
        market_rate,
        cancel_rate,
        order_size,
        n_levels: n,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::book_imbalance;
    use crate::synth::{gen_stream, SynthRegime};

    fn symmetric_init(n: usize, depth: i64) -> BookState {
        let bids = (0..n).map(|l| LevelQuote::new(999 - l as i64, depth)).collect();
        let asks = (0..n).map(|l| LevelQuote::new(1001 + l as i64, depth)).collect();
        BookState::new(0.0, asks, bids)
    }

    fn default_params(seed: u64) -> ContParams {
        ContParams::power_law(1.0, 0.6, 0.5, 0.01, 10, 4, seed)
    }

    #[test]
    fn power_law_ladder_values() {
        let r = power_law_rates(1.0, 0.6, 4);
        assert_eq!(r[0], 1.0);
        assert!((r[1] - 1.0 / 2f64.powf(0.6)).abs() < 1e-15);
        assert!((r[3] - 1.0 / 4f64.powf(0.6)).abs() < 1e-15);
        assert!(r.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn params_validation() {
        let mut p = default_params(0);
        assert!(p.validate().is_ok());
        p.market_rate = -1.0;
        assert!(p.validate().is_err());
        let mut p = default_params(0);
        p.order_size = 0;
        assert!(p.validate().is_err());
        let mut p = default_params(0);
        p.ask_limit_rates.pop();
        assert!(p.validate().is_err());
    }

    #[test]
    fn single_limit_rate_grows_best_bid() {
        // Only limit bids at distance 1 can fire: arrivals stack on the
        // tick just under the ask, growing by order_size per event.
        let params = ContParams {
            bid_limit_rates: vec![1.0, 0.0],
            ask_limit_rates: vec![0.0, 0.0],
            market_rate: 0.0,
            cancel_rate: 0.0,
            order_size: 7,
            n_levels: 2,
            seed: 3,
        };
        let init = symmetric_init(2, 5);
        let out = simulate(&params, &init, 6).unwrap();
        assert_eq!(out.emitted(), 6);
        assert!(!out.halted_early);
        for (i, s) in out.states.iter().enumerate() {
            let best = s.best_bid().unwrap();
            assert_eq!(best.price, 1000);
            assert_eq!(best.size, 7 * (i as i64 + 1));
            // The ask side never moves.
            assert_eq!(s.best_ask().unwrap(), LevelQuote::new(1001, 5));
        }
    }

    #[test]
    fn market_order_depletes_level_and_shifts_ladder() {
        let params = ContParams {
            bid_limit_rates: vec![0.0, 0.0],
            ask_limit_rates: vec![0.0, 0.0],
            market_rate: 1.0,
            cancel_rate: 0.0,
            order_size: 10,
            n_levels: 2,
            seed: 0,
        };
        let init = BookState::new(
            0.0,
            vec![LevelQuote::new(1001, 10), LevelQuote::new(1002, 7)],
            vec![LevelQuote::new(999, 10), LevelQuote::new(998, 7)],
        );
        let mut saw_buy = false;
        for seed in 0..10 {
            let out = simulate(&ContParams { seed, ..params.clone() }, &init, 1).unwrap();
            let s = &out.states[0];
            if s.best_ask().map(|q| q.price) == Some(1002) {
                // The buy consumed the whole best ask; the ladder shifted.
                saw_buy = true;
                assert_eq!(s.best_ask().unwrap().size, 7);
                assert!(s.asks[1].is_absent());
                assert_eq!(s.bids, init.bids);
            } else {
                // Otherwise the first event was a market sell.
                assert_eq!(s.best_bid().map(|q| q.price), Some(998));
                assert_eq!(s.asks, init.asks);
            }
        }
        assert!(saw_buy);
    }

    #[test]
    fn early_halt_when_one_side_empties() {
        let params = ContParams {
            bid_limit_rates: vec![0.0],
            ask_limit_rates: vec![0.0],
            market_rate: 1.0,
            cancel_rate: 0.0,
            order_size: 10,
            n_levels: 1,
            seed: 1,
        };
        let init = BookState::new(0.0, vec![LevelQuote::new(1001, 10)], vec![LevelQuote::new(999, 10)]);
        let out = simulate(&params, &init, 50).unwrap();
        assert!(out.halted_early);
        assert!(out.emitted() < 50);
        assert!(out.emitted() >= 1);
        let last = out.states.last().unwrap();
        assert!(last.best_bid().is_none() || last.best_ask().is_none());
    }

    #[test]
    fn simulated_books_stay_valid_and_uncrossed() {
        let params = default_params(11);
        let out = simulate(&params, &symmetric_init(4, 50), 30_000).unwrap();
        assert!(!out.halted_early);
        for s in &out.states {
            s.validate().unwrap();
            assert!(s.bids.iter().chain(&s.asks).all(|q| q.size >= 0));
        }
    }

    #[test]
    fn seed_determinism() {
        let init = symmetric_init(4, 50);
        let a = simulate(&default_params(5), &init, 2000).unwrap();
        let b = simulate(&default_params(5), &init, 2000).unwrap();
        assert_eq!(a.states, b.states);
        let c = simulate(&default_params(6), &init, 2000).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn symmetric_parameters_center_imbalance() {
        // Independent runs give independent draws of the time-averaged
        // imbalance; by symmetry its expectation is exactly 0.
        let mut run_means = Vec::new();
        for seed in 0..30 {
            let out = simulate(&default_params(seed), &symmetric_init(4, 50), 2000).unwrap();
            let imb = book_imbalance(&out.states, 4).unwrap();
            let mean: f64 = imb.values.iter().sum::<f64>() / imb.values.len() as f64;
            run_means.push(mean);
        }
        let k = run_means.len() as f64;
        let grand = run_means.iter().sum::<f64>() / k;
        let var = run_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (k - 1.0);
        let se = (var / k).sqrt();
        assert!(grand.abs() <= 3.0 * se, "mean imbalance {grand} exceeds 3 x {se}");
    }

    #[test]
    fn calibrate_recovers_limit_rates() {
        let params = default_params(21);
        let out = simulate(&params, &symmetric_init(4, 50), 100_000).unwrap();
        assert!(!out.halted_early);
        let fit = calibrate(&out.states).unwrap();
        assert_eq!(fit.n_levels, 4);
        assert_eq!(fit.order_size, params.order_size);
        assert_eq!(fit.bid_limit_rates, fit.ask_limit_rates);
        for (est, truth) in fit.bid_limit_rates.iter().zip(&params.bid_limit_rates) {
            let rel = (est - truth).abs() / truth;
            assert!(rel < 0.2, "estimated {est} vs {truth} (rel {rel})");
        }
        assert!(fit.market_rate > 0.0);
        assert!(fit.cancel_rate > 0.0);
    }

    #[test]
    fn calibrate_constant_stream_gives_zero_rates() {
        let states = gen_stream(SynthRegime::Constant, 1500, 3, 9).unwrap();
        let fit = calibrate(&states).unwrap();
        assert!(fit.bid_limit_rates.iter().all(|&r| r == 0.0));
        assert_eq!(fit.market_rate, 0.0);
        assert_eq!(fit.cancel_rate, 0.0);
        assert_eq!(fit.order_size, 1);
        assert!(calibrate(&states[..999]).is_err());
    }

    #[test]
    fn calibrate_single_increment_fixture() {
        // One limit arrival at distance 1, ten shares, over 1000 time
        // units: a single nonzero bucket at rate 1 / (2 * 1000).
        let quiet = |t: f64, bid_size: i64| {
            BookState::new(t, vec![LevelQuote::new(1001, 5)], vec![LevelQuote::new(1000, bid_size)])
        };
        let mut states: Vec<BookState> = (0..600).map(|i| quiet(i as f64, 5)).collect();
        states.extend((600..=1000).map(|i| quiet(i as f64, 15)));
        let fit = calibrate(&states).unwrap();
        assert_eq!(fit.bid_limit_rates, vec![1.0 / 2000.0]);
        assert_eq!(fit.order_size, 10);
        assert_eq!(fit.market_rate, 0.0);
        assert_eq!(fit.cancel_rate, 0.0);
    }
}
