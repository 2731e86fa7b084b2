//! Randomized invariants: distances behave like metrics, codecs round
//! trip arbitrary valid inputs, the decoder never emits an invalid
//! book, and the simulator preserves book validity for any sane
//! parameter draw.

use lobdiff::baseline::{self, ContParams};
use lobdiff::book::{BookState, LevelQuote};
use lobdiff::codec::{self, LobImage, NormSpec};
use lobdiff::diffusion::{make_subschedule, p_sample_step, q_sample, DiffusionSchedule};
use lobdiff::metrics;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// One column of quotes built from positive gaps and sizes, so the book
/// is valid by construction.
#[derive(Debug, Clone)]
struct ColSpec {
    mid_step: i64,
    spread: i64,
    ask_gaps: Vec<i64>,
    ask_sizes: Vec<i64>,
    bid_gaps: Vec<i64>,
    bid_sizes: Vec<i64>,
}

fn arb_col(levels: usize) -> impl Strategy<Value = ColSpec> {
    (
        -1i64..=1,
        1i64..4,
        proptest::collection::vec(1i64..3, levels),
        proptest::collection::vec(1i64..500, levels),
        proptest::collection::vec(1i64..3, levels),
        proptest::collection::vec(1i64..500, levels),
    )
        .prop_map(|(mid_step, spread, ask_gaps, ask_sizes, bid_gaps, bid_sizes)| ColSpec {
            mid_step,
            spread,
            ask_gaps,
            ask_sizes,
            bid_gaps,
            bid_sizes,
        })
}

fn build_window(cols: &[ColSpec]) -> Vec<BookState> {
    let mut mid = 10_000i64;
    let mut out = Vec::with_capacity(cols.len());
    for (i, c) in cols.iter().enumerate() {
        mid += c.mid_step;
        let mut asks = Vec::new();
        let mut price = mid + c.spread;
        for (gap, size) in c.ask_gaps.iter().zip(&c.ask_sizes) {
            asks.push(LevelQuote::new(price, *size));
            price += gap;
        }
        let mut bids = Vec::new();
        let mut price = mid;
        for (gap, size) in c.bid_gaps.iter().zip(&c.bid_sizes) {
            bids.push(LevelQuote::new(price, *size));
            price -= gap;
        }
        let state = BookState::new(i as f64 * 0.25, asks, bids);
        state.validate().expect("constructed books are valid");
        out.push(state);
    }
    out
}

fn arb_window() -> impl Strategy<Value = Vec<BookState>> {
    (1usize..4, 2usize..32)
        .prop_flat_map(|(levels, cols)| proptest::collection::vec(arb_col(levels), cols))
        .prop_map(|cols| build_window(&cols))
}

proptest! {
    #[test]
    fn wasserstein_is_a_metric_on_empiricals(
        a in proptest::collection::vec(-100.0f64..100.0, 1..40),
        b in proptest::collection::vec(-100.0f64..100.0, 1..40),
        c in proptest::collection::vec(-100.0f64..100.0, 1..40),
    ) {
        let ab = metrics::wasserstein1(&a, &b).unwrap();
        let ba = metrics::wasserstein1(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9, "symmetry: {ab} vs {ba}");
        prop_assert_eq!(metrics::wasserstein1(&a, &a).unwrap(), 0.0);
        let ac = metrics::wasserstein1(&a, &c).unwrap();
        let bc = metrics::wasserstein1(&b, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9, "triangle: {ac} > {ab} + {bc}");
    }

    #[test]
    fn wasserstein_is_translation_invariant(
        a in proptest::collection::vec(-100.0f64..100.0, 1..40),
        b in proptest::collection::vec(-100.0f64..100.0, 1..40),
        shift in -50.0f64..50.0,
    ) {
        let base = metrics::wasserstein1(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let sb: Vec<f64> = b.iter().map(|v| v + shift).collect();
        let shifted = metrics::wasserstein1(&sa, &sb).unwrap();
        prop_assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
    }

    #[test]
    fn histogram_l1_is_bounded_and_symmetric(
        a in proptest::collection::vec(-100.0f64..100.0, 1..40),
        b in proptest::collection::vec(-100.0f64..100.0, 1..40),
        bins in 1usize..20,
    ) {
        let ab = metrics::l1_distance(&a, &b, bins).unwrap();
        let ba = metrics::l1_distance(&b, &a, bins).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&ab), "out of range: {ab}");
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(metrics::l1_distance(&a, &a, bins).unwrap(), 0.0);
    }

    #[test]
    fn bootstrap_interval_contains_the_point_estimate(
        a in proptest::collection::vec(-10.0f64..10.0, 1..25),
        b in proptest::collection::vec(-10.0f64..10.0, 1..25),
        seed in 0u64..1000,
    ) {
        let point = metrics::wasserstein1(&a, &b).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (lo, hi) =
            metrics::bootstrap_ci(|x, y| metrics::wasserstein1(x, y), &a, &b, 100, 0.9, &mut rng).unwrap();
        prop_assert!(lo <= point && point <= hi, "[{lo}, {hi}] misses {point}");
    }

    #[test]
    fn imbalance_stays_in_the_unit_interval(window in arb_window()) {
        let depth = window[0].levels();
        let series = metrics::book_imbalance(&window, depth).unwrap();
        for v in &series.values {
            prop_assert!((-1.0..=1.0).contains(v), "imbalance {v}");
        }
        let spreads = metrics::spread(&window);
        for v in &spreads.values {
            prop_assert!(*v > 0.0, "non-positive spread {v}");
        }
    }

    #[test]
    fn order_flow_negates_under_side_mirroring(window in arb_window()) {
        let mirrored: Vec<BookState> = window
            .iter()
            .map(|s| {
                let asks = s.bids.iter().map(|q| LevelQuote::new(-q.price, q.size)).collect();
                let bids = s.asks.iter().map(|q| LevelQuote::new(-q.price, q.size)).collect();
                let m = BookState::new(s.timestamp, asks, bids);
                m.validate().expect("mirror of a valid book is valid");
                m
            })
            .collect();
        let fwd = metrics::ofi(&window, 1).unwrap();
        let rev = metrics::ofi(&mirrored, 1).unwrap();
        prop_assert_eq!(fwd.values.len(), rev.values.len());
        for (x, y) in fwd.values.iter().zip(&rev.values) {
            prop_assert!((x + y).abs() < 1e-12, "mirror breaks antisymmetry: {x} vs {y}");
        }
    }

    #[test]
    fn subschedules_ascend_and_end_at_t(t in 1usize..2000, k in 1usize..200) {
        prop_assume!(k <= t);
        let sub = make_subschedule(t, k).unwrap();
        prop_assert_eq!(sub.steps.len(), k);
        prop_assert_eq!(*sub.steps.last().unwrap(), t);
        prop_assert!(sub.steps.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*sub.steps.first().unwrap() >= 1);
    }

    #[test]
    fn one_step_reverse_inverts_the_forward_marginal(
        beta in 1e-5f64..0.5,
        seed in 0u64..1000,
    ) {
        let sched = DiffusionSchedule::linear(1, beta, beta).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x0 = lobdiff::diffusion::randn3(&mut rng, (2, 4, 4));
        let eps = lobdiff::diffusion::randn3(&mut rng, (2, 4, 4));
        let x1 = q_sample(x0.view(), 1, eps.view(), &sched);
        let back = p_sample_step(&x1, 1, &eps, &sched, None);
        for (a, b) in x0.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn encode_decode_is_the_identity_on_valid_windows(window in arb_window()) {
        let levels = window[0].levels();
        let img = codec::encode_window(&window, levels).unwrap();
        let out = codec::decode_image(&img).unwrap();
        prop_assert_eq!(out.report.repaired_columns, 0);
        for (a, b) in window.iter().zip(&out.states) {
            prop_assert_eq!(&a.asks, &b.asks);
            prop_assert_eq!(&a.bids, &b.bids);
        }
    }

    #[test]
    fn normalized_windows_round_trip_in_band(window in arb_window()) {
        let levels = window[0].levels();
        let img = codec::encode_window(&window, levels).unwrap();
        let hist = (window.len() / 2).max(1);
        let spec = NormSpec::full_history(hist);
        let normed = codec::normalize(&img, &spec).unwrap();
        let raw = codec::denormalize(&normed).unwrap();
        let np = normed.norm.as_ref().unwrap();
        for (idx, &orig) in img.prices.indexed_iter() {
            let back = raw.prices[idx];
            if orig != back {
                let v = normed.prices[idx];
                prop_assert!(v == np.price_clip.0 || v == np.price_clip.1);
            }
        }
        for (idx, &orig) in img.sizes.indexed_iter() {
            let back = raw.sizes[idx];
            if orig != back {
                let v = normed.sizes[idx];
                prop_assert!(v == np.size_clip.0 || v == np.size_clip.1);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoding_arbitrary_grids_yields_valid_books(
        levels in 1usize..4,
        cols in 1usize..16,
        seed in 0u64..10_000,
        price_scale in 0.1f64..1e5,
        size_scale in 0.1f64..1e4,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let noise = lobdiff::diffusion::randn3(&mut rng, (2, 2 * levels, cols));
        let prices: Array2<f64> = noise.slice(ndarray::s![0, .., ..]).mapv(|v| v * price_scale);
        let sizes: Array2<f64> = noise.slice(ndarray::s![1, .., ..]).mapv(|v| v * size_scale);
        let img = LobImage::from_grids(prices, sizes, (0..cols).map(|i| i as f64).collect(), levels).unwrap();
        let out = codec::decode_image(&img).unwrap();
        prop_assert_eq!(out.states.len(), cols);
        for st in &out.states {
            prop_assert!(st.validate().is_ok(), "decoder emitted invalid book: {:?}", st);
            prop_assert_eq!(st.levels(), levels);
        }
        prop_assert!(out.report.repaired_columns <= out.report.columns);
    }

    #[test]
    fn padding_round_trips_any_grid(levels in 1usize..6, cols_extra in 0usize..40, seed in 0u64..1000) {
        let rows = 2 * levels;
        let cols = rows + cols_extra;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let g = lobdiff::diffusion::randn3(&mut rng, (2, rows, cols));
        let img = LobImage::from_grids(
            g.slice(ndarray::s![0, .., ..]).to_owned(),
            g.slice(ndarray::s![1, .., ..]).to_owned(),
            (0..cols).map(|i| i as f64).collect(),
            levels,
        )
        .unwrap();
        let (square, prov) = codec::pad_to_square(&img).unwrap();
        prop_assert_eq!(square.dim(), (2, cols, cols));
        let (p, s) = codec::unpad(&square, &prov).unwrap();
        for (a, b) in p.iter().zip(img.prices.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in s.iter().zip(img.sizes.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn simulation_preserves_book_validity(
        k in 0.5f64..3.0,
        gamma in 0.2f64..1.0,
        market in 0.0f64..0.5,
        cancel in 0.001f64..0.05,
        order in 1i64..20,
        levels in 2usize..5,
        seed in 0u64..1000,
    ) {
        let params = ContParams::power_law(k, gamma, market, cancel, order, levels, seed);
        let bids = (0..levels).map(|l| LevelQuote::new(500 - 1 - l as i64, 60)).collect();
        let asks = (0..levels).map(|l| LevelQuote::new(500 + 1 + l as i64, 60)).collect();
        let init = BookState::new(0.0, asks, bids);
        let sim = baseline::simulate(&params, &init, 300).unwrap();
        let mut last_t = 0.0;
        for st in &sim.states {
            prop_assert!(st.validate().is_ok());
            prop_assert!(st.timestamp > last_t);
            last_t = st.timestamp;
        }
    }
}
