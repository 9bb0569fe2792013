//! Headline labeling: join each headline to the next trading day's return
//! and map that return to one of twelve ordinal buckets.

mod prices;

pub use prices::{load_prices_csv, FixturePrices, HttpPriceSource, PriceSource, RetryPolicy};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest calendar gap still treated as "the next trading day".
pub const MAX_GAP_DAYS: i64 = 5;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("return must be finite, got {0}")]
    NonFinite(f64),
    #[error("invalid price series for {ticker}: {message}")]
    InvalidSeries { ticker: String, message: String },
    #[error("{path} line {line}: {message}")]
    Csv {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unknown bucket label {0:?}")]
    UnknownLabel(String),
    #[error("price source failed for {ticker} after {attempts} attempt(s): {message}")]
    PriceSource {
        ticker: String,
        attempts: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = LabelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Headline {
    pub text: String,
    pub ticker: String,
    pub date: NaiveDate,
}

/// Adjusted closes for one ticker, strictly increasing in date.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    ticker: String,
    bars: Vec<(NaiveDate, f64)>,
}

impl PriceSeries {
    /// Sorts by date, then rejects duplicate dates and non-positive prices.
    pub fn new(ticker: impl Into<String>, mut bars: Vec<(NaiveDate, f64)>) -> Result<Self> {
        let ticker = ticker.into();
        bars.sort_by_key(|(d, _)| *d);
        let bad = |message: String| LabelError::InvalidSeries {
            ticker: ticker.clone(),
            message,
        };
        if let Some(w) = bars.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(bad(format!("duplicate date {}", w[0].0)));
        }
        if let Some((d, p)) = bars.iter().find(|(_, p)| !(p.is_finite() && *p > 0.0)) {
            return Err(bad(format!("price {p} on {d} is not positive")));
        }
        Ok(Self { ticker, bars })
    }

    pub fn ticker(&self) -> &str {
        &self.ticker
    }

    pub fn bars(&self) -> &[(NaiveDate, f64)] {
        &self.bars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    UnknownTicker,
    PriceGap,
    OutOfRange,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::UnknownTicker => "unknown_ticker",
            SkipReason::PriceGap => "price_gap",
            SkipReason::OutOfRange => "out_of_range",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Percent change from the last close on or before `date` to the following
/// close, provided the two are at most [`MAX_GAP_DAYS`] apart.
pub fn next_day_return(series: &PriceSeries, date: NaiveDate) -> Result<f64, SkipReason> {
    let bars = &series.bars;
    let after = bars.partition_point(|(d, _)| *d <= date);
    if after == 0 || after == bars.len() {
        return Err(SkipReason::OutOfRange);
    }
    let (t0, p0) = bars[after - 1];
    let (t1, p1) = bars[after];
    if (t1 - t0).num_days() > MAX_GAP_DAYS {
        return Err(SkipReason::PriceGap);
    }
    Ok(100.0 * (p1 - p0) / p0)
}

/// The twelve return buckets, from "down 5+ percent" to "up 5+ percent".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReturnBucket {
    #[serde(rename = "D5+")]
    D5Plus,
    D5,
    D4,
    D3,
    D2,
    D1,
    U1,
    U2,
    U3,
    U4,
    U5,
    #[serde(rename = "U5+")]
    U5Plus,
}

impl ReturnBucket {
    pub const ALL: [ReturnBucket; 12] = [
        ReturnBucket::D5Plus,
        ReturnBucket::D5,
        ReturnBucket::D4,
        ReturnBucket::D3,
        ReturnBucket::D2,
        ReturnBucket::D1,
        ReturnBucket::U1,
        ReturnBucket::U2,
        ReturnBucket::U3,
        ReturnBucket::U4,
        ReturnBucket::U5,
        ReturnBucket::U5Plus,
    ];

    /// Signed integer code: −6 for D5+ through +6 for U5+, never 0.
    pub fn code(self) -> i32 {
        let i = self as i32;
        if i < 6 {
            i - 6
        } else {
            i - 5
        }
    }

    pub fn label(self) -> &'static str {
        [
            "D5+", "D5", "D4", "D3", "D2", "D1", "U1", "U2", "U3", "U4", "U5", "U5+",
        ][self as usize]
    }
}

impl fmt::Display for ReturnBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ReturnBucket {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        ReturnBucket::ALL
            .into_iter()
            .find(|b| b.label().eq_ignore_ascii_case(t))
            .ok_or_else(|| LabelError::UnknownLabel(s.to_string()))
    }
}

/// Buckets are half-open on the left: U_k covers (k−1, k], D_k covers
/// (−k, −k+1], and zero falls in D1.
pub fn bucket_of(return_pct: f64) -> Result<ReturnBucket> {
    if !return_pct.is_finite() {
        return Err(LabelError::NonFinite(return_pct));
    }
    let code = if return_pct > 0.0 {
        return_pct.ceil().min(6.0) as i64
    } else {
        -((-return_pct).floor() + 1.0).min(6.0) as i64
    };
    Ok(code_to_bucket(code))
}

/// Total inverse of [`ReturnBucket::code`]: clamps to [−6, 6], 0 maps to D1.
pub fn code_to_bucket(code: i64) -> ReturnBucket {
    let c = code.clamp(-6, 6);
    let index = match c {
        0 => 5,
        c if c < 0 => c + 6,
        c => c + 5,
    };
    ReturnBucket::ALL[index as usize]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledHeadline {
    pub headline: Headline,
    pub return_pct: f64,
    pub bucket: ReturnBucket,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedHeadline {
    /// Position in the input list.
    pub index: usize,
    pub ticker: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: Vec<SkippedHeadline>,
}

impl SkipReport {
    pub fn counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for s in &self.skipped {
            *out.entry(s.reason.as_str()).or_insert(0) += 1;
        }
        out
    }

    pub fn total(&self) -> usize {
        self.skipped.len()
    }
}

/// Labels every headline whose next-day return is available; the rest land
/// in the skip report. Output keeps input order. Each ticker is fetched once.
pub fn build_labeled_dataset(
    headlines: &[Headline],
    source: &dyn PriceSource,
) -> Result<(Vec<LabeledHeadline>, SkipReport)> {
    let mut ranges: BTreeMap<&str, (NaiveDate, NaiveDate)> = BTreeMap::new();
    for h in headlines {
        let r = ranges.entry(h.ticker.as_str()).or_insert((h.date, h.date));
        r.0 = r.0.min(h.date);
        r.1 = r.1.max(h.date);
    }
    let pad = chrono::Duration::days(MAX_GAP_DAYS + 2);
    let mut series: HashMap<&str, Option<PriceSeries>> = HashMap::new();
    for (ticker, (lo, hi)) in ranges {
        series.insert(ticker, source.series(ticker, lo - pad, hi + pad)?);
    }

    let mut labeled = Vec::new();
    let mut report = SkipReport::default();
    for (index, h) in headlines.iter().enumerate() {
        let outcome = match &series[h.ticker.as_str()] {
            None => Err(SkipReason::UnknownTicker),
            Some(s) => next_day_return(s, h.date),
        };
        match outcome {
            Ok(r) => labeled.push(LabeledHeadline {
                headline: h.clone(),
                return_pct: r,
                bucket: bucket_of(r)?,
            }),
            Err(reason) => report.skipped.push(SkippedHeadline {
                index,
                ticker: h.ticker.clone(),
                reason,
            }),
        }
    }
    Ok((labeled, report))
}

pub(crate) fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

fn csv_reader(path: &Path) -> Result<(csv::Reader<std::fs::File>, HashMap<String, usize>)> {
    let file = std::fs::File::open(path).map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| LabelError::Csv {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
        .collect();
    Ok((reader, headers))
}

pub(crate) fn column(
    headers: &HashMap<String, usize>,
    name: &str,
    path: &Path,
) -> Result<usize> {
    headers.get(name).copied().ok_or_else(|| LabelError::Csv {
        path: path.display().to_string(),
        line: 1,
        message: format!("missing required column {name:?}"),
    })
}

/// Reads a headlines CSV with columns `headline,ticker,date` (others ignored).
pub fn load_headlines_csv(path: &Path) -> Result<Vec<Headline>> {
    let (mut reader, headers) = csv_reader(path)?;
    let (ci, ct, cd) = (
        column(&headers, "headline", path)?,
        column(&headers, "ticker", path)?,
        column(&headers, "date", path)?,
    );
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let err = |message: String| LabelError::Csv {
            path: path.display().to_string(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let get = |c: usize| rec.get(c).unwrap_or("").trim();
        let (text, ticker, date) = (get(ci), get(ct), get(cd));
        if text.is_empty() || ticker.is_empty() {
            return Err(err("headline and ticker must be non-empty".into()));
        }
        let date = parse_date(date).ok_or_else(|| err(format!("invalid date {date:?}")))?;
        out.push(Headline {
            text: text.to_string(),
            ticker: ticker.to_string(),
            date,
        });
    }
    Ok(out)
}

/// Writes `headline,ticker,date,return_pct,bucket,code`.
pub fn write_labeled_csv(path: &Path, rows: &[LabeledHeadline]) -> Result<()> {
    let io = |e: csv::Error| LabelError::Csv {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["headline", "ticker", "date", "return_pct", "bucket", "code"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.headline.text.as_str(),
            &r.headline.ticker,
            &r.headline.date.to_string(),
            &format!("{}", r.return_pct),
            r.bucket.label(),
            &r.bucket.code().to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads the output of [`write_labeled_csv`]. The bucket column is
/// authoritative; the return is kept for diagnostics.
pub fn load_labeled_csv(path: &Path) -> Result<Vec<LabeledHeadline>> {
    let (mut reader, headers) = csv_reader(path)?;
    let (ci, ct, cd, cr, cb) = (
        column(&headers, "headline", path)?,
        column(&headers, "ticker", path)?,
        column(&headers, "date", path)?,
        column(&headers, "return_pct", path)?,
        column(&headers, "bucket", path)?,
    );
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let err = |message: String| LabelError::Csv {
            path: path.display().to_string(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let get = |c: usize| rec.get(c).unwrap_or("").trim();
        let date = parse_date(get(cd)).ok_or_else(|| err(format!("invalid date {:?}", get(cd))))?;
        let return_pct: f64 = get(cr)
            .parse()
            .map_err(|_| err(format!("invalid return {:?}", get(cr))))?;
        let bucket: ReturnBucket = get(cb).parse().map_err(|e: LabelError| err(e.to_string()))?;
        out.push(LabeledHeadline {
            headline: Headline {
                text: get(ci).to_string(),
                ticker: get(ct).to_string(),
                date,
            },
            return_pct,
            bucket,
        });
    }
    Ok(out)
}
