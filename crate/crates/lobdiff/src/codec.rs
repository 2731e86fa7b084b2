//! Book windows as 2-channel images and back.
//!
//! A window of `T` consecutive book states over `n` levels per side maps
//! to two `2n x T` grids (prices, sizes). Row 0 holds the least
//! competitive bid and prices increase with the row index, so the best
//! bid sits at row `n-1` and the best ask directly above it at row `n`;
//! each column is one book state. Ask sizes are negated so the size
//! channel changes sign exactly at the spread.
//!
//! Normalization centres prices on the window's opening mid, divides each
//! channel by a standard deviation taken from the history region, and
//! clips to the central 95% band of the window's values. Everything needed
//! to invert the transform is recorded in [`NormParams`].
//!
//! Square padding repeats each of the `2n` rows so the grid reaches the
//! model resolution `T x T`; leftover slots repeat the rows nearest the
//! spread, where most of the signal lives. A [`RowProvenance`] map makes
//! the padding exactly invertible by averaging.

use std::io::{Read, Write};

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{BookState, LevelQuote, Side};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("window is empty")]
    EmptyWindow,
    #[error("state {index} has {found} levels, need at least {need}")]
    LevelCount { index: usize, found: usize, need: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("column 0 has no usable best bid/ask, mid(t0) unavailable")]
    MidUnavailable,
    #[error("image is already normalized")]
    AlreadyNormalized,
    #[error("image has no normalization record")]
    NotNormalized,
    #[error("image is normalized; decode expects raw units")]
    NotRaw,
    #[error("{rows} padded rows exceed resolution {resolution}")]
    TooManyLevels { rows: usize, resolution: usize },
    #[error("history_len {history_len} must be below the column count {cols}")]
    BadHistoryLen { history_len: usize, cols: usize },
    #[error("invalid normalization spec: {0}")]
    BadNormSpec(String),
    #[error("provenance mismatch: {0}")]
    Provenance(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt image container: {0}")]
    Corrupt(String),
}

/// Everything required to invert [`normalize`]: the opening mid, the
/// per-channel scale, the recorded clip band, and which columns the
/// statistics were taken from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    /// Mid price of the window's first column, in ticks.
    pub mid0: f64,
    pub price_std: f64,
    pub size_std: f64,
    /// Clip band per channel, in normalized units.
    pub price_clip: (f64, f64),
    pub size_clip: (f64, f64),
    /// Trailing history columns the standard deviations were computed over.
    pub rolling_window: usize,
    /// Columns the clip percentiles were computed over (prefix length).
    pub stat_cols: usize,
    /// Set when a flat channel forced the fallback scale of 1.
    pub degenerate_price: bool,
    pub degenerate_size: bool,
}

/// How to compute normalization statistics.
///
/// Standard deviations come from the trailing `rolling_window` columns of
/// the history region (all of it by default). Clip percentiles come from
/// the first `stat_cols` columns (the whole window by default; pass the
/// history length at inference time when the future columns hold no data).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormSpec {
    pub history_len: usize,
    pub rolling_window: Option<usize>,
    pub stat_cols: Option<usize>,
}

impl NormSpec {
    /// Statistics over the full history, percentiles over the full window.
    pub fn full_history(history_len: usize) -> Self {
        Self { history_len, rolling_window: None, stat_cols: None }
    }

    /// All statistics restricted to the history region, for inference
    /// inputs whose future columns are placeholders.
    pub fn history_only(history_len: usize) -> Self {
        Self { history_len, rolling_window: None, stat_cols: Some(history_len) }
    }
}

/// A book window in image form: price and size grids of shape
/// `[2n rows x T columns]` plus window metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LobImage {
    pub prices: Array2<f64>,
    pub sizes: Array2<f64>,
    /// One timestamp per column, carried as metadata only.
    pub timestamps: Vec<f64>,
    /// Levels per side, `n`; the grids have `2n` rows.
    pub levels: usize,
    pub norm: Option<NormParams>,
}

impl LobImage {
    pub fn from_grids(
        prices: Array2<f64>,
        sizes: Array2<f64>,
        timestamps: Vec<f64>,
        levels: usize,
    ) -> Result<Self, CodecError> {
        if prices.dim() != sizes.dim() {
            return Err(CodecError::Dimension(format!(
                "price grid {:?} vs size grid {:?}",
                prices.dim(),
                sizes.dim()
            )));
        }
        if prices.nrows() != 2 * levels {
            return Err(CodecError::Dimension(format!(
                "{} rows for {} levels per side",
                prices.nrows(),
                levels
            )));
        }
        if timestamps.len() != prices.ncols() {
            return Err(CodecError::Dimension(format!(
                "{} timestamps for {} columns",
                timestamps.len(),
                prices.ncols()
            )));
        }
        Ok(Self { prices, sizes, timestamps, levels, norm: None })
    }

    /// Replaces the grids, keeping metadata and normalization record.
    pub fn like(&self, prices: Array2<f64>, sizes: Array2<f64>) -> Result<Self, CodecError> {
        let mut img = Self::from_grids(prices, sizes, self.timestamps.clone(), self.levels)?;
        img.norm = self.norm.clone();
        Ok(img)
    }

    /// Number of time columns.
    pub fn cols(&self) -> usize {
        self.prices.ncols()
    }

    /// Number of rows, `2n`.
    pub fn rows(&self) -> usize {
        self.prices.nrows()
    }

    /// Grid row for a quote: bids fill rows `n-1` down to `0`, asks rows
    /// `n` up to `2n-1`, so price increases with the row index.
    pub fn row_of(&self, side: Side, level: usize) -> usize {
        match side {
            Side::Bid => self.levels - 1 - level,
            Side::Ask => self.levels + level,
        }
    }
}

/// Encodes a window of book states to an unnormalized image.
///
/// States may carry more than `levels` levels; the top `levels` are used.
/// Ask sizes are negated. Absent levels contribute size 0 and a price
/// extrapolated one tick per level beyond the deepest present quote
/// (decoding ignores prices wherever the size is zero).
pub fn encode_window(window: &[BookState], levels: usize) -> Result<LobImage, CodecError> {
    if window.is_empty() {
        return Err(CodecError::EmptyWindow);
    }
    if levels == 0 {
        return Err(CodecError::Dimension("levels must be at least 1".into()));
    }
    let cols = window.len();
    let rows = 2 * levels;
    let mut prices = Array2::zeros((rows, cols));
    let mut sizes = Array2::zeros((rows, cols));
    for (c, state) in window.iter().enumerate() {
        if state.levels() < levels {
            return Err(CodecError::LevelCount { index: c, found: state.levels(), need: levels });
        }
        let filled_bids = fill_side_prices(state, Side::Bid, levels);
        let filled_asks = fill_side_prices(state, Side::Ask, levels);
        for l in 0..levels {
            let bid = state.bids[l];
            let ask = state.asks[l];
            let br = levels - 1 - l;
            let ar = levels + l;
            prices[(br, c)] = filled_bids[l];
            sizes[(br, c)] = bid.size as f64;
            prices[(ar, c)] = filled_asks[l];
            sizes[(ar, c)] = -(ask.size as f64);
        }
    }
    let timestamps = window.iter().map(|s| s.timestamp).collect();
    LobImage::from_grids(prices, sizes, timestamps, levels)
}

fn fill_side_prices(state: &BookState, side: Side, levels: usize) -> Vec<f64> {
    let quotes = match side {
        Side::Bid => &state.bids,
        Side::Ask => &state.asks,
    };
    let step = match side {
        Side::Bid => -1.0,
        Side::Ask => 1.0,
    };
    let mut out = Vec::with_capacity(levels);
    let mut anchor: Option<(usize, f64)> = None;
    for (l, q) in quotes.iter().take(levels).enumerate() {
        if !q.is_absent() {
            anchor = Some((l, q.price as f64));
            out.push(q.price as f64);
        } else {
            let (al, ap) = anchor.unwrap_or_else(|| {
                // Whole side absent so far: lean on the opposite best, one
                // tick inside, or zero when the column is totally empty.
                let opposite = match side {
                    Side::Bid => state.best_ask().map(|q| q.price as f64 - 1.0),
                    Side::Ask => state.best_bid().map(|q| q.price as f64 + 1.0),
                };
                (l, opposite.unwrap_or(0.0) - step)
            });
            out.push(ap + step * (l - al) as f64);
        }
    }
    out
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / n as f64).sqrt()
}

fn root_mean_square(values: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut ss = 0.0;
    for v in values {
        n += 1;
        ss += v * v;
    }
    if n == 0 {
        return 0.0;
    }
    (ss / n as f64).sqrt()
}

/// Linear-interpolated quantile of a sorted slice (the numpy default).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

const CLIP_LO_Q: f64 = 0.025;
const CLIP_HI_Q: f64 = 0.975;
const FLAT_EPS: f64 = 1e-12;

/// Normalizes an image: prices centred on the opening mid and scaled by
/// the history standard deviation, sizes scaled by their history RMS
/// (zero mean assumed), then both channels clipped to their central 95%
/// band. The returned image carries a populated [`NormParams`].
pub fn normalize(img: &LobImage, spec: &NormSpec) -> Result<LobImage, CodecError> {
    if img.norm.is_some() {
        return Err(CodecError::AlreadyNormalized);
    }
    let cols = img.cols();
    let n = img.levels;
    if spec.history_len == 0 || spec.history_len > cols {
        return Err(CodecError::BadNormSpec(format!(
            "history_len {} outside 1..={}",
            spec.history_len, cols
        )));
    }
    let stat_cols = spec.stat_cols.unwrap_or(cols);
    if stat_cols == 0 || stat_cols > cols {
        return Err(CodecError::BadNormSpec(format!("stat_cols {} outside 1..={}", stat_cols, cols)));
    }
    let rolling = spec.rolling_window.unwrap_or(spec.history_len).min(spec.history_len);
    if rolling == 0 {
        return Err(CodecError::BadNormSpec("rolling_window must be at least 1".into()));
    }

    // mid(t0) from the first column's inside quotes.
    let best_bid_row = n - 1;
    let best_ask_row = n;
    if img.sizes[(best_bid_row, 0)] == 0.0 || img.sizes[(best_ask_row, 0)] == 0.0 {
        return Err(CodecError::MidUnavailable);
    }
    let mid0 = (img.prices[(best_bid_row, 0)] + img.prices[(best_ask_row, 0)]) / 2.0;

    let std_range = s![.., spec.history_len - rolling..spec.history_len];
    let mut price_std = population_std(img.prices.slice(std_range).iter().copied());
    let mut size_std = root_mean_square(img.sizes.slice(std_range).iter().copied());
    let degenerate_price = price_std < FLAT_EPS;
    let degenerate_size = size_std < FLAT_EPS;
    if degenerate_price {
        price_std = 1.0;
    }
    if degenerate_size {
        size_std = 1.0;
    }

    let prices = img.prices.mapv(|p| (p - mid0) / price_std);
    let sizes = img.sizes.mapv(|v| v / size_std);

    let band = |grid: &Array2<f64>, keep_zero: bool| {
        let mut vals: Vec<f64> = grid.slice(s![.., 0..stat_cols]).iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut lo = quantile_sorted(&vals, CLIP_LO_Q);
        let mut hi = quantile_sorted(&vals, CLIP_HI_Q);
        if keep_zero {
            // The size channel must keep its sign convention through
            // clipping: the band always straddles zero.
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        if lo >= hi {
            lo -= 0.5;
            hi += 0.5;
        }
        (lo, hi)
    };
    let price_clip = band(&prices, false);
    let size_clip = band(&sizes, true);

    let prices = prices.mapv(|v| v.clamp(price_clip.0, price_clip.1));
    let sizes = sizes.mapv(|v| v.clamp(size_clip.0, size_clip.1));

    let mut out = LobImage::from_grids(prices, sizes, img.timestamps.clone(), img.levels)?;
    out.norm = Some(NormParams {
        mid0,
        price_std,
        size_std,
        price_clip,
        size_clip,
        rolling_window: rolling,
        stat_cols,
        degenerate_price,
        degenerate_size,
    });
    Ok(out)
}

/// Inverts [`normalize`] (clipping excluded: it is lossy). Prices are
/// rounded back to the tick grid; sizes are rounded to integers with the
/// ask negation preserved, never leaving the valid sign range.
pub fn denormalize(img: &LobImage) -> Result<LobImage, CodecError> {
    let norm = img.norm.as_ref().ok_or(CodecError::NotNormalized)?;
    let n = img.levels;
    let prices = img.prices.mapv(|v| (v * norm.price_std + norm.mid0).round());
    let mut sizes = img.sizes.mapv(|v| (v * norm.size_std).round());
    for ((r, _), v) in sizes.indexed_iter_mut() {
        if r < n {
            *v = v.max(0.0); // bid rows are non-negative
        } else {
            *v = v.min(0.0); // ask rows are non-positive
        }
    }
    let mut out = LobImage::from_grids(prices, sizes, img.timestamps.clone(), img.levels)?;
    out.norm = None;
    Ok(out)
}

/// Repairs applied while decoding an image back to book states.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub columns: usize,
    /// Columns needing at least one repair.
    pub repaired_columns: usize,
    /// Side-columns whose present quotes had to be re-sorted by price.
    pub resorted: usize,
    /// Quotes merged because two levels landed on the same price.
    pub merged: usize,
    /// Cells whose size had the wrong sign and was clamped to zero.
    pub clamped_sizes: usize,
    /// Quotes dropped to uncross the inside.
    pub uncrossed_drops: usize,
    /// Absent levels that sat above present ones and were compacted away.
    pub compacted: usize,
}

impl DecodeReport {
    /// Fraction of columns that needed any repair.
    pub fn repair_rate(&self) -> f64 {
        if self.columns == 0 {
            0.0
        } else {
            self.repaired_columns as f64 / self.columns as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub states: Vec<BookState>,
    pub report: DecodeReport,
}

/// Decodes a raw-unit image back to book states, repairing whatever a
/// generative model got wrong: sizes with the wrong sign are clamped,
/// present quotes are re-sorted by price within each side, duplicate
/// prices merge, gaps compact toward the inside, and a crossed inside is
/// resolved by dropping the smaller quote. Every repair is counted; the
/// output always satisfies the book invariants.
pub fn decode_image(img: &LobImage) -> Result<DecodeOutcome, CodecError> {
    if img.norm.is_some() {
        return Err(CodecError::NotRaw);
    }
    let n = img.levels;
    let cols = img.cols();
    let mut report = DecodeReport { columns: cols, ..Default::default() };
    let mut states = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut repaired = false;
        let mut side_quotes = |side: Side| -> Vec<LevelQuote> {
            let mut present: Vec<LevelQuote> = Vec::with_capacity(n);
            let mut seen_absent = false;
            for l in 0..n {
                let r = img.row_of(side, l);
                let price = img.prices[(r, c)].round() as i64;
                let raw = img.sizes[(r, c)].round() as i64;
                let size = match side {
                    Side::Bid => raw,
                    Side::Ask => -raw,
                };
                if size < 0 {
                    report.clamped_sizes += 1;
                    repaired = true;
                    seen_absent = true;
                    continue;
                }
                if size == 0 {
                    seen_absent = true;
                    continue;
                }
                if seen_absent {
                    report.compacted += 1;
                    repaired = true;
                }
                present.push(LevelQuote::new(price, size));
            }
            // Sort by price: descending bids, ascending asks.
            let sorted = {
                let mut v = present.clone();
                match side {
                    Side::Bid => v.sort_by(|a, b| b.price.cmp(&a.price)),
                    Side::Ask => v.sort_by(|a, b| a.price.cmp(&b.price)),
                }
                v
            };
            if sorted.iter().map(|q| q.price).ne(present.iter().map(|q| q.price)) {
                report.resorted += 1;
                repaired = true;
            }
            // Merge duplicate prices.
            let mut merged: Vec<LevelQuote> = Vec::with_capacity(sorted.len());
            for q in sorted {
                match merged.last_mut() {
                    Some(last) if last.price == q.price => {
                        last.size += q.size;
                        report.merged += 1;
                        repaired = true;
                    }
                    _ => merged.push(q),
                }
            }
            merged
        };
        let mut bids = side_quotes(Side::Bid);
        let mut asks = side_quotes(Side::Ask);
        // Uncross: drop the smaller inside quote until bid < ask.
        while let (Some(&b), Some(&a)) = (bids.first(), asks.first()) {
            if b.price < a.price {
                break;
            }
            report.uncrossed_drops += 1;
            repaired = true;
            if b.size < a.size {
                bids.remove(0);
            } else {
                asks.remove(0);
            }
        }
        bids.resize(n, LevelQuote::absent(Side::Bid));
        asks.resize(n, LevelQuote::absent(Side::Ask));
        let ts = img.timestamps.get(c).copied().unwrap_or(c as f64);
        let state = BookState::new(ts, asks, bids);
        debug_assert!(state.validate().is_ok(), "decode produced invalid state: {:?}", state.validate());
        states.push(state);
        if repaired {
            report.repaired_columns += 1;
        }
    }
    Ok(DecodeOutcome { states, report })
}

/// Which original row each padded row came from, for exact inversion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowProvenance {
    /// Original row count, `2n`.
    pub rows: usize,
    /// `map[padded_row] = original_row`, non-decreasing, length `T`.
    pub map: Vec<usize>,
}

impl RowProvenance {
    /// Builds the repetition plan: every row `T / 2n` times, with the
    /// leftover slots going to the rows nearest the spread.
    pub fn build(rows: usize, resolution: usize) -> Result<Self, CodecError> {
        if rows == 0 || rows % 2 != 0 {
            return Err(CodecError::Dimension(format!("row count {rows} must be even and positive")));
        }
        if rows > resolution {
            return Err(CodecError::TooManyLevels { rows, resolution });
        }
        let k = resolution / rows;
        let r = resolution - k * rows;
        let n = rows / 2;
        // Rank rows by distance to the bid/ask boundary, bid side first on ties.
        let mut ranked: Vec<usize> = (0..rows).collect();
        ranked.sort_by_key(|&row| {
            let d = if row < n { n - 1 - row } else { row - n };
            (d, row)
        });
        let mut extra = vec![0usize; rows];
        for &row in ranked.iter().take(r) {
            extra[row] = 1;
        }
        let mut map = Vec::with_capacity(resolution);
        for row in 0..rows {
            for _ in 0..k + extra[row] {
                map.push(row);
            }
        }
        debug_assert_eq!(map.len(), resolution);
        Ok(Self { rows, map })
    }

    /// Copies of a given original row.
    pub fn count_of(&self, row: usize) -> usize {
        self.map.iter().filter(|&&m| m == row).count()
    }
}

/// Pads the level dimension up to a square `[2, T, T]` grid (channel 0 =
/// prices, channel 1 = sizes) by repeating rows per [`RowProvenance`].
pub fn pad_to_square(img: &LobImage) -> Result<(Array3<f64>, RowProvenance), CodecError> {
    let t = img.cols();
    let prov = RowProvenance::build(img.rows(), t)?;
    let mut square = Array3::zeros((2, t, t));
    for (j, &orig) in prov.map.iter().enumerate() {
        square.slice_mut(s![0, j, ..]).assign(&img.prices.row(orig));
        square.slice_mut(s![1, j, ..]).assign(&img.sizes.row(orig));
    }
    Ok((square, prov))
}

/// Inverts [`pad_to_square`]: each original row is the arithmetic mean of
/// its repeated copies. Returns `(prices, sizes)` grids.
pub fn unpad(square: &Array3<f64>, prov: &RowProvenance) -> Result<(Array2<f64>, Array2<f64>), CodecError> {
    let (ch, h, w) = square.dim();
    if ch != 2 {
        return Err(CodecError::Provenance(format!("expected 2 channels, found {ch}")));
    }
    if h != prov.map.len() {
        return Err(CodecError::Provenance(format!("{h} padded rows vs provenance {}", prov.map.len())));
    }
    if prov.map.iter().any(|&m| m >= prov.rows) {
        return Err(CodecError::Provenance("row index out of range".into()));
    }
    let mut prices = Array2::zeros((prov.rows, w));
    let mut sizes = Array2::zeros((prov.rows, w));
    let mut counts = vec![0usize; prov.rows];
    for (j, &orig) in prov.map.iter().enumerate() {
        counts[orig] += 1;
        let mut pr = prices.row_mut(orig);
        pr += &square.slice(s![0, j, ..]);
        let mut sr = sizes.row_mut(orig);
        sr += &square.slice(s![1, j, ..]);
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(CodecError::Provenance("some original row has no copies".into()));
    }
    for row in 0..prov.rows {
        let inv = 1.0 / counts[row] as f64;
        prices.row_mut(row).mapv_inplace(|v| v * inv);
        sizes.row_mut(row).mapv_inplace(|v| v * inv);
    }
    Ok((prices, sizes))
}

/// The model's conditioning input: channels 0-1 carry the noised image,
/// channels 2-3 the unnoised history with the future zeroed, channel 4
/// the per-column inpainting mask (0 history, 1 future).
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintInput {
    /// Shape `[5, T, T]`.
    pub data: Array3<f64>,
    pub history_len: usize,
}

impl InpaintInput {
    /// The three context channels (unnoised history and mask), reusable
    /// across every step of a sampling loop.
    pub fn context(&self) -> ndarray::ArrayView3<'_, f64> {
        self.data.slice(s![2..5, .., ..])
    }
}

/// Builds the stacked 5-channel input from the clean square image and a
/// noised copy. Noise covers the whole image; the history/future split
/// only affects the context channels and the mask.
pub fn build_inpaint_input(
    square: &Array3<f64>,
    noised: &Array3<f64>,
    history_len: usize,
) -> Result<InpaintInput, CodecError> {
    if square.dim() != noised.dim() {
        return Err(CodecError::Dimension(format!("square {:?} vs noised {:?}", square.dim(), noised.dim())));
    }
    let (ch, h, w) = square.dim();
    if ch != 2 || h != w {
        return Err(CodecError::Dimension(format!("expected [2, T, T], found [{ch}, {h}, {w}]")));
    }
    if history_len >= w {
        return Err(CodecError::BadHistoryLen { history_len, cols: w });
    }
    let mut data = Array3::zeros((5, h, w));
    data.slice_mut(s![0..2, .., ..]).assign(noised);
    data.slice_mut(s![2..4, .., 0..history_len]).assign(&square.slice(s![.., .., 0..history_len]));
    data.slice_mut(s![4, .., history_len..]).fill(1.0);
    Ok(InpaintInput { data, history_len })
}

const IMAGE_MAGIC: &[u8; 8] = b"LOBIMG1\n";

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Writes the binary image container: shape header, timestamps, row-major
/// price grid, row-major size grid, then the normalization record.
pub fn write_lob_image<W: Write>(mut w: W, img: &LobImage) -> Result<(), CodecError> {
    w.write_all(IMAGE_MAGIC)?;
    write_u64(&mut w, img.levels as u64)?;
    write_u64(&mut w, img.rows() as u64)?;
    write_u64(&mut w, img.cols() as u64)?;
    write_u64(&mut w, img.norm.is_some() as u64)?;
    for &t in &img.timestamps {
        write_f64(&mut w, t)?;
    }
    for &v in img.prices.iter() {
        write_f64(&mut w, v)?;
    }
    for &v in img.sizes.iter() {
        write_f64(&mut w, v)?;
    }
    if let Some(nm) = &img.norm {
        write_f64(&mut w, nm.mid0)?;
        write_f64(&mut w, nm.price_std)?;
        write_f64(&mut w, nm.size_std)?;
        write_f64(&mut w, nm.price_clip.0)?;
        write_f64(&mut w, nm.price_clip.1)?;
        write_f64(&mut w, nm.size_clip.0)?;
        write_f64(&mut w, nm.size_clip.1)?;
        write_u64(&mut w, nm.rolling_window as u64)?;
        write_u64(&mut w, nm.stat_cols as u64)?;
        write_u64(&mut w, nm.degenerate_price as u64)?;
        write_u64(&mut w, nm.degenerate_size as u64)?;
    }
    Ok(())
}

/// Reads the container written by [`write_lob_image`].
pub fn read_lob_image<R: Read>(mut r: R) -> Result<LobImage, CodecError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != IMAGE_MAGIC {
        return Err(CodecError::Corrupt("bad magic".into()));
    }
    let levels = read_u64(&mut r)? as usize;
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    let has_norm = read_u64(&mut r)? != 0;
    if rows != 2 * levels {
        return Err(CodecError::Corrupt(format!("{rows} rows vs {levels} levels")));
    }
    if rows.saturating_mul(cols) > (1 << 30) {
        return Err(CodecError::Corrupt("unreasonable image size".into()));
    }
    let mut timestamps = Vec::with_capacity(cols);
    for _ in 0..cols {
        timestamps.push(read_f64(&mut r)?);
    }
    let read_grid = |r: &mut R| -> Result<Array2<f64>, CodecError> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(read_f64(r)?);
        }
        Array2::from_shape_vec((rows, cols), data).map_err(|e| CodecError::Corrupt(e.to_string()))
    };
    let prices = read_grid(&mut r)?;
    let sizes = read_grid(&mut r)?;
    let mut img = LobImage::from_grids(prices, sizes, timestamps, levels)?;
    if has_norm {
        img.norm = Some(NormParams {
            mid0: read_f64(&mut r)?,
            price_std: read_f64(&mut r)?,
            size_std: read_f64(&mut r)?,
            price_clip: (read_f64(&mut r)?, read_f64(&mut r)?),
            size_clip: (read_f64(&mut r)?, read_f64(&mut r)?),
            rolling_window: read_u64(&mut r)? as usize,
            stat_cols: read_u64(&mut r)? as usize,
            degenerate_price: read_u64(&mut r)? != 0,
            degenerate_size: read_u64(&mut r)? != 0,
        });
    }
    Ok(img)
}

/// Lossless CSV debug dump: one `(row, col, price, size)` line per cell,
/// timestamps and normalization in `#` comment lines. Rust's shortest
/// round-trip float formatting keeps it exact.
pub fn write_lob_image_csv<W: Write>(mut w: W, img: &LobImage) -> Result<(), CodecError> {
    writeln!(w, "# levels={} rows={} cols={}", img.levels, img.rows(), img.cols())?;
    if let Some(nm) = &img.norm {
        writeln!(
            w,
            "# norm mid0={} price_std={} size_std={} price_clip=({},{}) size_clip=({},{}) rolling={} stat_cols={}",
            nm.mid0,
            nm.price_std,
            nm.size_std,
            nm.price_clip.0,
            nm.price_clip.1,
            nm.size_clip.0,
            nm.size_clip.1,
            nm.rolling_window,
            nm.stat_cols
        )?;
    }
    writeln!(w, "# timestamps={}", img.timestamps.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";"))?;
    writeln!(w, "row,col,price,size")?;
    for ((row, col), &p) in img.prices.indexed_iter() {
        writeln!(w, "{},{},{},{}", row, col, p, img.sizes[(row, col)])?;
    }
    Ok(())
}
