//! Level-2 order book data model and LOBSTER-style CSV ingestion.
//!
//! A book snapshot is a fixed number of quote levels per side. Files follow
//! the LOBSTER orderbook convention: one row per book update, `4n` numeric
//! columns in the order `ask_price_1, ask_size_1, bid_price_1, bid_size_1,
//! ..., ask_price_n, ask_size_n, bid_price_n, bid_size_n`, comma separated,
//! no header. Prices are integer ticks (1e-4 currency units). Empty levels
//! use a sentinel price and size zero.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Price in integer ticks (1e-4 currency units).
pub type Ticks = i64;
/// Resting size in shares.
pub type Shares = i64;

/// Sentinel price for an absent ask level (LOBSTER convention).
pub const ABSENT_ASK_PRICE: Ticks = 9_999_999_999;
/// Sentinel price for an absent bid level (LOBSTER convention).
pub const ABSENT_BID_PRICE: Ticks = -9_999_999_999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Bid,
    Ask,
}

impl Side {
    pub fn absent_price(self) -> Ticks {
        match self {
            Side::Bid => ABSENT_BID_PRICE,
            Side::Ask => ABSENT_ASK_PRICE,
        }
    }
}

/// One price level: integer tick price and resting share count.
///
/// `size == 0` marks an absent level; absent levels always carry the
/// side's sentinel price so that serialized books are canonical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelQuote {
    pub price: Ticks,
    pub size: Shares,
}

impl LevelQuote {
    pub fn new(price: Ticks, size: Shares) -> Self {
        Self { price, size }
    }

    /// The canonical absent quote for `side`.
    pub fn absent(side: Side) -> Self {
        Self { price: side.absent_price(), size: 0 }
    }

    pub fn is_absent(&self) -> bool {
        self.size == 0
    }
}

/// One order book snapshot: timestamp (seconds after midnight, metadata
/// only) plus `n` ask levels ascending in price and `n` bid levels
/// descending in price. Index 0 is the best quote on each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookState {
    pub timestamp: f64,
    pub asks: Vec<LevelQuote>,
    pub bids: Vec<LevelQuote>,
}

/// Validation failure for a single book state.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BookIssue {
    #[error("crossed book: best ask {ask} <= best bid {bid}")]
    Crossed { bid: Ticks, ask: Ticks },
    #[error("{side:?} prices not strictly ordered at level {level}")]
    NonMonotone { side: Side, level: usize },
    #[error("negative size {size} at {side:?} level {level}")]
    NegativeSize { side: Side, level: usize, size: Shares },
    #[error("absent {side:?} level {level} sits above a present level")]
    AbsentAbovePresent { side: Side, level: usize },
}

impl BookState {
    pub fn new(timestamp: f64, asks: Vec<LevelQuote>, bids: Vec<LevelQuote>) -> Self {
        Self { timestamp, asks, bids }
    }

    /// Number of levels per side.
    pub fn levels(&self) -> usize {
        self.asks.len()
    }

    pub fn best_bid(&self) -> Option<LevelQuote> {
        self.bids.first().copied().filter(|q| !q.is_absent())
    }

    pub fn best_ask(&self) -> Option<LevelQuote> {
        self.asks.first().copied().filter(|q| !q.is_absent())
    }

    /// Mid price in ticks; `None` unless both best quotes are present.
    pub fn mid(&self) -> Option<f64> {
        match (self.best_bid(), self.best_ask()) {
            (Some(b), Some(a)) => Some((a.price as f64 + b.price as f64) / 2.0),
            _ => None,
        }
    }

    /// Replaces every size-0 level with the canonical absent quote.
    pub fn canonicalize(&mut self) {
        for q in &mut self.asks {
            if q.size == 0 {
                *q = LevelQuote::absent(Side::Ask);
            }
        }
        for q in &mut self.bids {
            if q.size == 0 {
                *q = LevelQuote::absent(Side::Bid);
            }
        }
    }

    /// Checks all book invariants: non-negative sizes, strict price ordering
    /// among present levels, no absent level shallower than a present one,
    /// and an uncrossed inside.
    pub fn validate(&self) -> Result<(), BookIssue> {
        for (side, quotes) in [(Side::Ask, &self.asks), (Side::Bid, &self.bids)] {
            let mut seen_absent = false;
            let mut last_present: Option<Ticks> = None;
            for (level, q) in quotes.iter().enumerate() {
                if q.size < 0 {
                    return Err(BookIssue::NegativeSize { side, level: level + 1, size: q.size });
                }
                if q.is_absent() {
                    seen_absent = true;
                    continue;
                }
                if seen_absent {
                    return Err(BookIssue::AbsentAbovePresent { side, level: level + 1 });
                }
                if let Some(prev) = last_present {
                    let ordered = match side {
                        Side::Ask => q.price > prev,
                        Side::Bid => q.price < prev,
                    };
                    if !ordered {
                        return Err(BookIssue::NonMonotone { side, level: level + 1 });
                    }
                }
                last_present = Some(q.price);
            }
        }
        if let (Some(bid), Some(ask)) = (self.best_bid(), self.best_ask()) {
            if ask.price <= bid.price {
                return Err(BookIssue::Crossed { bid: bid.price, ask: ask.price });
            }
        }
        Ok(())
    }
}

/// Window geometry: `history_len + pred_len` consecutive states form one
/// training or evaluation example over the top `levels` book levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history_len: usize,
    pub pred_len: usize,
    pub levels: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(history_len: usize, pred_len: usize, levels: usize, stride: usize) -> Result<Self, IngestError> {
        let spec = Self { history_len, pred_len, levels, stride };
        if history_len == 0 || pred_len == 0 {
            return Err(IngestError::BadWindowSpec {
                reason: "history_len and pred_len must both be at least 1".into(),
            });
        }
        if levels == 0 {
            return Err(IngestError::BadWindowSpec { reason: "levels must be at least 1".into() });
        }
        if stride == 0 {
            return Err(IngestError::BadWindowSpec { reason: "stride must be at least 1".into() });
        }
        Ok(spec)
    }

    /// Total states per window, `history_len + pred_len`.
    pub fn total_len(&self) -> usize {
        self.history_len + self.pred_len
    }
}

/// Window iteration mode. Training windows step forward by the full history
/// length so no two histories overlap; evaluation windows use the
/// configured stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowMode {
    Train,
    Eval,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error("row {row}: {issue}")]
    Invalid { row: usize, issue: BookIssue },
    #[error("timestamp file has {times} rows but book file has {rows}")]
    TimesMismatch { times: usize, rows: usize },
    #[error("invalid window spec: {reason}")]
    BadWindowSpec { reason: String },
}

impl IngestError {
    /// Row number the error refers to, if any (1-based).
    pub fn row(&self) -> Option<usize> {
        match self {
            IngestError::Malformed { row, .. } | IngestError::Invalid { row, .. } => Some(*row),
            _ => None,
        }
    }
}

/// Outcome of a lenient scan: every parsable, valid row becomes a state;
/// offending rows are skipped and recorded.
#[derive(Debug, Default)]
pub struct ScanReport {
    pub states: Vec<BookState>,
    pub violations: Vec<(usize, String)>,
    pub rows_read: usize,
}

fn parse_row(record: &csv::StringRecord, row: usize, levels: usize, timestamp: f64) -> Result<BookState, IngestError> {
    let expect = 4 * levels;
    if record.len() != expect {
        return Err(IngestError::Malformed {
            row,
            reason: format!("expected {} columns for {} levels, found {}", expect, levels, record.len()),
        });
    }
    let field = |idx: usize| -> Result<i64, IngestError> {
        let raw = record.get(idx).unwrap_or("").trim();
        raw.parse::<i64>().map_err(|_| IngestError::Malformed {
            row,
            reason: format!("column {}: `{}` is not an integer", idx + 1, raw),
        })
    };
    let mut asks = Vec::with_capacity(levels);
    let mut bids = Vec::with_capacity(levels);
    for level in 0..levels {
        asks.push(LevelQuote::new(field(4 * level)?, field(4 * level + 1)?));
        bids.push(LevelQuote::new(field(4 * level + 2)?, field(4 * level + 3)?));
    }
    let mut state = BookState::new(timestamp, asks, bids);
    state.canonicalize();
    state.validate().map_err(|issue| IngestError::Invalid { row, issue })?;
    Ok(state)
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(rdr)
}

/// Strict parse of a LOBSTER-style orderbook stream: the first offending
/// row aborts with its row number. Timestamps default to the row index
/// unless `times` supplies one per row.
pub fn parse_orderbook_reader<R: Read>(
    rdr: R,
    levels: usize,
    times: Option<&[f64]>,
) -> Result<Vec<BookState>, IngestError> {
    let mut out = Vec::new();
    for (i, record) in csv_reader(rdr).records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| IngestError::Malformed { row, reason: e.to_string() })?;
        let ts = match times {
            Some(ts) => *ts.get(i).ok_or(IngestError::TimesMismatch { times: ts.len(), rows: row })?,
            None => i as f64,
        };
        out.push(parse_row(&record, row, levels, ts)?);
    }
    if let Some(ts) = times {
        if ts.len() != out.len() {
            return Err(IngestError::TimesMismatch { times: ts.len(), rows: out.len() });
        }
    }
    Ok(out)
}

/// Strict parse of an orderbook file. See [`parse_orderbook_reader`].
pub fn parse_orderbook_file(path: &Path, levels: usize) -> Result<Vec<BookState>, IngestError> {
    parse_orderbook_reader(File::open(path)?, levels, None)
}

/// Strict parse with a companion timestamp file (one row per book row;
/// the first numeric column is the time in seconds after midnight, so a
/// LOBSTER message file works directly).
pub fn parse_orderbook_file_with_times(
    path: &Path,
    times_path: &Path,
    levels: usize,
) -> Result<Vec<BookState>, IngestError> {
    let times = read_times_file(times_path)?;
    parse_orderbook_reader(File::open(path)?, levels, Some(&times))
}

/// Reads one timestamp per row from a single- or multi-column CSV
/// (first column wins).
pub fn read_times_file(path: &Path) -> Result<Vec<f64>, IngestError> {
    let mut out = Vec::new();
    for (i, record) in csv_reader(File::open(path)?).records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| IngestError::Malformed { row, reason: e.to_string() })?;
        let raw = record.get(0).unwrap_or("").trim();
        let t = raw.parse::<f64>().map_err(|_| IngestError::Malformed {
            row,
            reason: format!("`{}` is not a timestamp", raw),
        })?;
        out.push(t);
    }
    Ok(out)
}

/// Lenient scan: parses every row, collecting violations instead of
/// aborting. Used by the `ingest` command for validation summaries.
pub fn scan_orderbook_reader<R: Read>(rdr: R, levels: usize) -> Result<ScanReport, IngestError> {
    let mut report = ScanReport::default();
    for (i, record) in csv_reader(rdr).records().enumerate() {
        let row = i + 1;
        report.rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                report.violations.push((row, e.to_string()));
                continue;
            }
        };
        match parse_row(&record, row, levels, i as f64) {
            Ok(state) => report.states.push(state),
            Err(e) => report.violations.push((row, e.to_string())),
        }
    }
    Ok(report)
}

/// Lenient scan of a file. See [`scan_orderbook_reader`].
pub fn scan_orderbook_file(path: &Path, levels: usize) -> Result<ScanReport, IngestError> {
    scan_orderbook_reader(File::open(path)?, levels)
}

/// Writes states in the same 4n-column layout the parser consumes.
/// Round trips are bit exact: integers in, identical integers out.
pub fn write_orderbook<W: Write>(mut w: W, states: &[BookState]) -> Result<(), IngestError> {
    for state in states {
        let mut cols = Vec::with_capacity(4 * state.levels());
        for level in 0..state.levels() {
            let a = state.asks[level];
            let b = state.bids[level];
            cols.push(a.price.to_string());
            cols.push(a.size.to_string());
            cols.push(b.price.to_string());
            cols.push(b.size.to_string());
        }
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}

/// Writes states to a file. See [`write_orderbook`].
pub fn write_orderbook_file(path: &Path, states: &[BookState]) -> Result<(), IngestError> {
    write_orderbook(File::create(path)?, states)
}

/// Keeps only states with `open <= timestamp < close`, preserving order.
pub fn restrict_trading_hours(states: &[BookState], open: f64, close: f64) -> Vec<BookState> {
    states
        .iter()
        .filter(|s| s.timestamp >= open && s.timestamp < close)
        .cloned()
        .collect()
}

/// Iterates fixed-length windows of `spec.total_len()` consecutive states.
///
/// Train mode strides by the full history length so consecutive training
/// histories never overlap; eval mode strides by `spec.stride`. A trailing
/// partial window is dropped; fewer than `total_len` states yields nothing.
pub fn iterate_windows<'a>(
    states: &'a [BookState],
    spec: &WindowSpec,
    mode: WindowMode,
) -> impl Iterator<Item = &'a [BookState]> + 'a {
    let total = spec.total_len();
    let stride = match mode {
        WindowMode::Train => spec.history_len,
        WindowMode::Eval => spec.stride,
    };
    let last_start = states.len().checked_sub(total);
    (0..)
        .map(move |k| k * stride)
        .take_while(move |start| matches!(last_start, Some(last) if *start <= last))
        .map(move |start| &states[start..start + total])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quote(p: Ticks, s: Shares) -> LevelQuote {
        LevelQuote::new(p, s)
    }

    fn simple_state(ts: f64, bid: Ticks, ask: Ticks) -> BookState {
        BookState::new(ts, vec![quote(ask, 10)], vec![quote(bid, 10)])
    }

    #[test]
    fn parses_single_level_row() {
        let states = parse_orderbook_reader("1000200,18,999900,5".as_bytes(), 1, None).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].asks, vec![quote(1_000_200, 18)]);
        assert_eq!(states[0].bids, vec![quote(999_900, 5)]);
        assert_eq!(states[0].timestamp, 0.0);
    }

    #[test]
    fn crossed_book_is_rejected_with_row_number() {
        let data = "1000200,18,999900,5\n999800,7,999900,5\n";
        let err = parse_orderbook_reader(data.as_bytes(), 1, None).unwrap_err();
        assert_eq!(err.row(), Some(2));
        assert!(matches!(err, IngestError::Invalid { issue: BookIssue::Crossed { .. }, .. }));
    }

    #[test]
    fn malformed_rows_are_rejected_with_row_number() {
        let err = parse_orderbook_reader("1,2,3".as_bytes(), 1, None).unwrap_err();
        assert_eq!(err.row(), Some(1));
        let err = parse_orderbook_reader("a,2,3,4".as_bytes(), 1, None).unwrap_err();
        assert!(matches!(err, IngestError::Malformed { row: 1, .. }));
    }

    #[test]
    fn three_row_two_level_fixture_field_by_field() {
        let data = "\
1001,5,999,7,1002,4,998,6
1001,5,1000,2,1003,9,997,1
1002,8,1000,3,1004,2,996,4
";
        let states = parse_orderbook_reader(data.as_bytes(), 2, None).unwrap();
        assert_eq!(states.len(), 3);
        assert_eq!(states[0].asks, vec![quote(1001, 5), quote(1002, 4)]);
        assert_eq!(states[0].bids, vec![quote(999, 7), quote(998, 6)]);
        assert_eq!(states[1].asks, vec![quote(1001, 5), quote(1003, 9)]);
        assert_eq!(states[1].bids, vec![quote(1000, 2), quote(997, 1)]);
        assert_eq!(states[2].asks, vec![quote(1002, 8), quote(1004, 2)]);
        assert_eq!(states[2].bids, vec![quote(1000, 3), quote(996, 4)]);
        assert_eq!(states[1].timestamp, 1.0);
    }

    #[test]
    fn size_zero_levels_become_canonical_absent_quotes() {
        let data = "1001,5,999,7,12345,0,-42,0";
        let states = parse_orderbook_reader(data.as_bytes(), 2, None).unwrap();
        assert_eq!(states[0].asks[1], LevelQuote::absent(Side::Ask));
        assert_eq!(states[0].bids[1], LevelQuote::absent(Side::Bid));
    }

    #[test]
    fn absent_level_above_present_is_rejected() {
        let data = "1001,0,999,7,1002,4,998,6";
        let err = parse_orderbook_reader(data.as_bytes(), 2, None).unwrap_err();
        assert!(matches!(
            err,
            IngestError::Invalid { issue: BookIssue::AbsentAbovePresent { side: Side::Ask, .. }, .. }
        ));
    }

    #[test]
    fn non_monotone_and_negative_sizes_are_rejected() {
        let err = parse_orderbook_reader("1001,5,999,7,1001,4,998,6".as_bytes(), 2, None).unwrap_err();
        assert!(matches!(err, IngestError::Invalid { issue: BookIssue::NonMonotone { side: Side::Ask, .. }, .. }));
        let err = parse_orderbook_reader("1001,-5,999,7".as_bytes(), 1, None).unwrap_err();
        assert!(matches!(err, IngestError::Invalid { issue: BookIssue::NegativeSize { .. }, .. }));
    }

    #[test]
    fn timestamp_file_is_applied() {
        let states =
            parse_orderbook_reader("1001,5,999,7\n1001,5,999,7".as_bytes(), 1, Some(&[34200.5, 34201.0])).unwrap();
        assert_eq!(states[0].timestamp, 34200.5);
        assert_eq!(states[1].timestamp, 34201.0);
        let err = parse_orderbook_reader("1001,5,999,7\n1001,5,999,7".as_bytes(), 1, Some(&[1.0])).unwrap_err();
        assert!(matches!(err, IngestError::TimesMismatch { .. }));
    }

    #[test]
    fn trading_hours_identity_when_all_inside() {
        let states: Vec<_> = (0..5).map(|i| simple_state(34200.0 + i as f64, 999, 1001)).collect();
        let kept = restrict_trading_hours(&states, 34200.0, 57600.0);
        assert_eq!(kept, states);
    }

    #[test]
    fn trading_hours_all_before_open_is_empty() {
        let states: Vec<_> = (0..5).map(|i| simple_state(1000.0 + i as f64, 999, 1001)).collect();
        assert!(restrict_trading_hours(&states, 34200.0, 57600.0).is_empty());
    }

    #[test]
    fn trading_hours_mixed_fixture_keeps_two_of_five_in_order() {
        let times = [34199.0, 34200.0, 40000.0, 57600.0, 60000.0];
        let states: Vec<_> = times.iter().map(|&t| simple_state(t, 999, 1001)).collect();
        let kept = restrict_trading_hours(&states, 34200.0, 57600.0);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].timestamp, 34200.0);
        assert_eq!(kept[1].timestamp, 40000.0);
    }

    #[test]
    fn train_windows_stride_by_history_len() {
        // 512 states, history 156, pred 100: start 312 would need 568 states.
        let states: Vec<_> = (0..512).map(|i| simple_state(i as f64, 999, 1001)).collect();
        let spec = WindowSpec::new(156, 100, 1, 1).unwrap();
        let wins: Vec<_> = iterate_windows(&states, &spec, WindowMode::Train).collect();
        assert_eq!(wins.len(), 2);
        assert_eq!(wins[0][0].timestamp, 0.0);
        assert_eq!(wins[1][0].timestamp, 156.0);
        assert!(wins.iter().all(|w| w.len() == 256));
    }

    #[test]
    fn exact_length_input_gives_one_window() {
        let states: Vec<_> = (0..256).map(|i| simple_state(i as f64, 999, 1001)).collect();
        let spec = WindowSpec::new(156, 100, 1, 1).unwrap();
        assert_eq!(iterate_windows(&states, &spec, WindowMode::Train).count(), 1);
        assert_eq!(iterate_windows(&states, &spec, WindowMode::Eval).count(), 1);
    }

    #[test]
    fn eval_windows_use_configured_stride() {
        let states: Vec<_> = (0..258).map(|i| simple_state(i as f64, 999, 1001)).collect();
        let spec = WindowSpec::new(156, 100, 1, 1).unwrap();
        let wins: Vec<_> = iterate_windows(&states, &spec, WindowMode::Eval).collect();
        assert_eq!(wins.len(), 3);
        let starts: Vec<f64> = wins.iter().map(|w| w[0].timestamp).collect();
        assert_eq!(starts, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn short_input_yields_no_windows() {
        let states: Vec<_> = (0..255).map(|i| simple_state(i as f64, 999, 1001)).collect();
        let spec = WindowSpec::new(156, 100, 1, 1).unwrap();
        assert_eq!(iterate_windows(&states, &spec, WindowMode::Train).count(), 0);
    }

    #[test]
    fn train_histories_never_overlap() {
        let states: Vec<_> = (0..1000).map(|i| simple_state(i as f64, 999, 1001)).collect();
        let spec = WindowSpec::new(64, 32, 1, 1).unwrap();
        let mut covered = vec![0u8; states.len()];
        for w in iterate_windows(&states, &spec, WindowMode::Train) {
            let start = w[0].timestamp as usize;
            for slot in &mut covered[start..start + spec.history_len] {
                *slot += 1;
            }
        }
        assert!(covered.iter().all(|&c| c <= 1));
    }

    #[test]
    fn write_then_parse_round_trips_exactly() {
        let data = "\
1001,5,999,7,1002,4,9999999999,0
1001,5,1000,2,1003,9,997,1
";
        let states = parse_orderbook_reader(data.as_bytes(), 2, None).unwrap();
        let mut buf = Vec::new();
        write_orderbook(&mut buf, &states).unwrap();
        let reparsed = parse_orderbook_reader(buf.as_slice(), 2, None).unwrap();
        assert_eq!(states, reparsed);
    }

    #[test]
    fn lenient_scan_counts_violations_with_rows() {
        let data = "\
1001,5,999,7
999,5,1001,7
not,numeric,at,all
1002,5,1000,7
";
        let report = scan_orderbook_reader(data.as_bytes(), 1).unwrap();
        assert_eq!(report.rows_read, 4);
        assert_eq!(report.states.len(), 2);
        assert_eq!(report.violations.len(), 2);
        assert_eq!(report.violations[0].0, 2);
        assert_eq!(report.violations[1].0, 3);
    }

    #[test]
    fn window_spec_rejects_degenerate_geometry() {
        assert!(WindowSpec::new(0, 10, 1, 1).is_err());
        assert!(WindowSpec::new(10, 0, 1, 1).is_err());
        assert!(WindowSpec::new(10, 10, 0, 1).is_err());
        assert!(WindowSpec::new(10, 10, 1, 0).is_err());
    }
}
