//! Deterministic synthetic Level-2 stream generators.
//!
//! Four regimes cover the conditions the rest of the crate is tested
//! against: a frozen book, a random-walk mid with mean-reverting sizes,
//! a large-tick regime where the mid freezes for geometrically distributed
//! run lengths (sparse signal), and a small-tick regime with a busy mid
//! and a volatile spread. Every stream is a pure function of its seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{BookState, LevelQuote, Shares, Ticks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthRegime {
    /// Identical book at every step.
    Constant,
    /// Lazy random-walk mid, mean-reverting sizes, occasional spread moves.
    Walk,
    /// Mid frozen for geometric run lengths; deep, slowly varying sizes.
    LargeTick,
    /// Frequent mid moves, thin books, volatile spread.
    SmallTick,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown regime `{0}`")]
    UnknownRegime(String),
    #[error("length must be at least 1")]
    EmptyStream,
    #[error("levels must be at least 1")]
    NoLevels,
}

impl std::str::FromStr for SynthRegime {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(SynthRegime::Constant),
            "walk" => Ok(SynthRegime::Walk),
            "large_tick" => Ok(SynthRegime::LargeTick),
            "small_tick" => Ok(SynthRegime::SmallTick),
            other => Err(SynthError::UnknownRegime(other.to_string())),
        }
    }
}

struct RegimeParams {
    start_mid: Ticks,
    base_size: Shares,
    size_jitter: Shares,
    /// Probability that the mid moves one tick at a step.
    move_prob: f64,
    /// Probability that the spread widens/narrows at a step.
    spread_prob: f64,
    max_spread: Ticks,
    /// Mean-reversion factor applied to the deviation of each size from
    /// its per-level target, in 1/64ths.
    reversion_64: i64,
}

impl RegimeParams {
    fn for_regime(regime: SynthRegime) -> Self {
        match regime {
            SynthRegime::Constant => Self {
                start_mid: 1_000_000,
                base_size: 40,
                size_jitter: 0,
                move_prob: 0.0,
                spread_prob: 0.0,
                max_spread: 2,
                reversion_64: 0,
            },
            SynthRegime::Walk => Self {
                start_mid: 1_000_000,
                base_size: 40,
                size_jitter: 6,
                move_prob: 0.35,
                spread_prob: 0.05,
                max_spread: 4,
                reversion_64: 16,
            },
            SynthRegime::LargeTick => Self {
                start_mid: 250_000,
                base_size: 400,
                size_jitter: 25,
                // Effective move probability; runs between moves are
                // geometric with mean 1/p, mimicking a pinned large-tick mid.
                move_prob: 0.02,
                spread_prob: 0.0,
                max_spread: 2,
                reversion_64: 8,
            },
            SynthRegime::SmallTick => Self {
                start_mid: 2_000_000,
                base_size: 12,
                size_jitter: 5,
                move_prob: 0.7,
                spread_prob: 0.15,
                max_spread: 8,
                reversion_64: 24,
            },
        }
    }
}

/// Generates `length` valid book states with `levels` quote levels per
/// side. Deterministic in `seed`; timestamps are cumulative exponential
/// waits starting inside regular trading hours.
pub fn gen_stream(
    regime: SynthRegime,
    length: usize,
    levels: usize,
    seed: u64,
) -> Result<Vec<BookState>, SynthError> {
    if length == 0 {
        return Err(SynthError::EmptyStream);
    }
    if levels == 0 {
        return Err(SynthError::NoLevels);
    }
    let p = RegimeParams::for_regime(regime);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = levels;

    let mut mid2 = 2 * p.start_mid; // track twice the mid so half-ticks stay integral
    let mut spread: Ticks = 2;
    let mut ask_sizes: Vec<Shares> = Vec::with_capacity(n);
    let mut bid_sizes: Vec<Shares> = Vec::with_capacity(n);
    for level in 0..n {
        // Deeper levels rest more stock.
        let target = p.base_size + p.base_size * level as i64 / 2;
        ask_sizes.push(target);
        bid_sizes.push(target);
    }
    let targets = ask_sizes.clone();

    let mut t = 34_200.0; // 09:30
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        if p.move_prob > 0.0 && rng.random::<f64>() < p.move_prob {
            mid2 += if rng.random::<bool>() { 2 } else { -2 };
        }
        if p.spread_prob > 0.0 && rng.random::<f64>() < p.spread_prob {
            spread += if rng.random::<bool>() { 1 } else { -1 };
            spread = spread.clamp(1, p.max_spread);
        }
        for level in 0..n {
            for sizes in [&mut ask_sizes, &mut bid_sizes] {
                let s = &mut sizes[level];
                let pull = (targets[level] - *s) * p.reversion_64 / 64;
                let jitter = if p.size_jitter > 0 { rng.random_range(-p.size_jitter..=p.size_jitter) } else { 0 };
                *s = (*s + pull + jitter).max(1);
            }
        }
        // Place the quotes around the (possibly half-tick) mid.
        let best_bid = (mid2 - spread) / 2;
        let best_ask = best_bid + spread;
        let asks = (0..n).map(|l| LevelQuote::new(best_ask + l as Ticks, ask_sizes[l])).collect();
        let bids = (0..n).map(|l| LevelQuote::new(best_bid - l as Ticks, bid_sizes[l])).collect();
        t += -rng.random::<f64>().max(1e-12).ln() * 0.05;
        out.push(BookState::new(t, asks, bids));
    }
    Ok(out)
}
