use std::collections::HashMap;
use std::path::Path;
use std::thread;
use std::time::Duration;

use chrono::NaiveDate;
use serde::Deserialize;

pub use crate::retry::RetryPolicy;

use super::{column, csv_reader, parse_date, LabelError, PriceSeries, Result};

/// Supplies daily adjusted closes. `Ok(None)` means the ticker is unknown.
pub trait PriceSource {
    fn series(&self, ticker: &str, start: NaiveDate, end: NaiveDate) -> Result<Option<PriceSeries>>;
}

/// In-memory prices, usually loaded from a CSV fixture.
#[derive(Debug, Clone, Default)]
pub struct FixturePrices {
    series: HashMap<String, PriceSeries>,
}

impl FixturePrices {
    pub fn insert(&mut self, series: PriceSeries) {
        self.series.insert(series.ticker().to_string(), series);
    }

    pub fn tickers(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }
}

impl PriceSource for FixturePrices {
    fn series(&self, ticker: &str, start: NaiveDate, end: NaiveDate) -> Result<Option<PriceSeries>> {
        let Some(s) = self.series.get(ticker) else {
            return Ok(None);
        };
        let bars = s
            .bars()
            .iter()
            .copied()
            .filter(|(d, _)| (start..=end).contains(d))
            .collect();
        PriceSeries::new(ticker, bars).map(Some)
    }
}

/// Reads `ticker,date,adj_close` rows (header required, any row order).
pub fn load_prices_csv(path: &Path) -> Result<FixturePrices> {
    let (mut reader, headers) = csv_reader(path)?;
    let (ct, cd, cp) = (
        column(&headers, "ticker", path)?,
        column(&headers, "date", path)?,
        column(&headers, "adj_close", path)?,
    );
    let mut bars: HashMap<String, Vec<(NaiveDate, f64)>> = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let err = |message: String| LabelError::Csv {
            path: path.display().to_string(),
            line: i + 2,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let get = |c: usize| rec.get(c).unwrap_or("").trim();
        let date = parse_date(get(cd)).ok_or_else(|| err(format!("invalid date {:?}", get(cd))))?;
        let price: f64 = get(cp)
            .parse()
            .map_err(|_| err(format!("invalid price {:?}", get(cp))))?;
        bars.entry(get(ct).to_string()).or_default().push((date, price));
    }
    let mut out = FixturePrices::default();
    for (ticker, b) in bars {
        out.insert(PriceSeries::new(ticker, b)?);
    }
    Ok(out)
}

/// HTTP backend: `GET <base>/daily?ticker=T&start=D1&end=D2` returning a JSON
/// array of `{date, adjClose}`. A 404 means the ticker is unknown.
#[derive(Debug, Clone)]
pub struct HttpPriceSource {
    pub base_url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

pub const PRICE_TOKEN_ENV: &str = "PRICE_API_TOKEN";

#[derive(Deserialize)]
struct Bar {
    date: String,
    #[serde(rename = "adjClose")]
    adj_close: f64,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpPriceSource {
    /// Reads the bearer token from `PRICE_API_TOKEN` when set.
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            token: std::env::var(PRICE_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
        }
    }

    fn fetch(&self, agent: &ureq::Agent, ticker: &str, start: NaiveDate, end: NaiveDate) -> Result<Option<Vec<Bar>>, Attempt> {
        let mut req = agent
            .get(format!("{}/daily", self.base_url))
            .query("ticker", ticker)
            .query("start", start.to_string())
            .query("end", end.to_string());
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        match req.call() {
            Ok(mut resp) => resp
                .body_mut()
                .read_json::<Vec<Bar>>()
                .map(Some)
                .map_err(|e| Attempt::Fatal(format!("bad response body: {e}"))),
            Err(ureq::Error::StatusCode(404)) => Ok(None),
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                Err(Attempt::Retry(format!("HTTP {code}")))
            }
            Err(ureq::Error::StatusCode(code)) => Err(Attempt::Fatal(format!("HTTP {code}"))),
            Err(e) => Err(Attempt::Retry(e.to_string())),
        }
    }
}

impl PriceSource for HttpPriceSource {
    fn series(&self, ticker: &str, start: NaiveDate, end: NaiveDate) -> Result<Option<PriceSeries>> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut attempt = 0;
        let bars = loop {
            attempt += 1;
            match self.fetch(&agent, ticker, start, end) {
                Ok(b) => break b,
                Err(Attempt::Retry(msg)) if attempt <= self.retry.max_retries => {
                    let delay = self.retry.delay(attempt);
                    log::warn!("price request for {ticker} failed ({msg}); retrying in {delay:?}");
                    thread::sleep(delay);
                }
                Err(Attempt::Retry(message) | Attempt::Fatal(message)) => {
                    return Err(LabelError::PriceSource {
                        ticker: ticker.to_string(),
                        attempts: attempt,
                        message,
                    })
                }
            }
        };
        let Some(bars) = bars else {
            return Ok(None);
        };
        let parsed = bars
            .into_iter()
            .map(|b| {
                parse_date(&b.date).map(|d| (d, b.adj_close)).ok_or_else(|| LabelError::PriceSource {
                    ticker: ticker.to_string(),
                    attempts: attempt,
                    message: format!("invalid date {:?}", b.date),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PriceSeries::new(ticker, parsed).map(Some)
    }
}
