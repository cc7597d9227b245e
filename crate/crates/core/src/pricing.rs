//! Prices, per-request cost records and the margin ledger.
//!
//! Amounts are fixed-point decimals with nine fractional digits, so sums over
//! a ledger are exact.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::bpe::{count_chars, Vocabulary};

const SCALE: i128 = 1_000_000_000;
const DIGITS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MoneyError {
    #[error("not a decimal amount: {0:?}")]
    Syntax(String),
    #[error("{0:?} has more than 9 fractional digits")]
    TooPrecise(String),
    #[error("amount {0:?} is out of range")]
    Overflow(String),
}

/// A decimal amount in units of 10⁻⁹.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(i128);

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_nanos(nanos: i128) -> Self {
        Money(nanos)
    }

    pub const fn nanos(self) -> i128 {
        self.0
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    /// `self × num / den`, rounded half away from zero.
    pub fn mul_div(self, num: i128, den: i128) -> Money {
        assert!(den > 0, "denominator must be positive");
        let p = self.0 * num;
        let (q, r) = (p / den, p % den);
        let bump = if 2 * r.abs() >= den { p.signum() } else { 0 };
        Money(q + bump)
    }
}

impl FromStr for Money {
    type Err = MoneyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let (neg, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        let digits = |d: &str| d.bytes().all(|b| b.is_ascii_digit());
        if (int.is_empty() && frac.is_empty()) || !digits(int) || !digits(frac) {
            return Err(MoneyError::Syntax(s.to_string()));
        }
        let frac_trimmed = frac.trim_end_matches('0');
        if frac_trimmed.len() > DIGITS {
            return Err(MoneyError::TooPrecise(s.to_string()));
        }
        let overflow = || MoneyError::Overflow(s.to_string());
        let whole: i128 = if int.is_empty() { 0 } else { int.parse().map_err(|_| overflow())? };
        let mut fraction: i128 = 0;
        for (i, b) in frac_trimmed.bytes().enumerate() {
            fraction += i128::from(b - b'0') * 10i128.pow((DIGITS - 1 - i) as u32);
        }
        let nanos = whole
            .checked_mul(SCALE)
            .and_then(|w| w.checked_add(fraction))
            .ok_or_else(overflow)?;
        Ok(Money(if neg { -nanos } else { nanos }))
    }
}

impl fmt::Display for Money {
    /// Shortest exact form: `0.002`, `-1.5`, `3`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let (int, frac) = (abs / SCALE as u128, abs % SCALE as u128);
        if frac == 0 {
            write!(f, "{sign}{int}")
        } else {
            let frac = format!("{frac:09}");
            write!(f, "{sign}{int}.{}", frac.trim_end_matches('0'))
        }
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Money {
    /// Accepts decimal strings and, for hand-written configs, plain numbers.
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(i64),
            Float(f64),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Text(s) => s,
            Raw::Int(i) => i.to_string(),
            Raw::Float(x) if x.is_finite() => x.to_string(),
            Raw::Float(x) => return Err(serde::de::Error::custom(format!("invalid amount {x}"))),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Money> for Money {
    fn sum<I: Iterator<Item = &'a Money>>(iter: I) -> Money {
        iter.copied().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum PricingUnit {
    #[default]
    #[serde(rename = "per_1k_tokens", alias = "tokens")]
    Per1kTokens,
    #[serde(rename = "per_1k_chars", alias = "chars")]
    Per1kChars,
}

impl PricingUnit {
    pub fn count(self, text: &str, vocab: &Vocabulary) -> u64 {
        match self {
            PricingUnit::Per1kTokens => vocab.count_tokens(text) as u64,
            PricingUnit::Per1kChars => count_chars(text) as u64,
        }
    }
}

/// `units × rate / 1000`, exact up to rounding at the ninth decimal.
pub fn compute_cost(units: u64, rate_per_1k: Money, _unit: PricingUnit) -> Money {
    rate_per_1k.mul_div(i128::from(units), 1000)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PricingError {
    #[error("{0} rate is negative")]
    NegativeRate(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingModel {
    #[serde(default)]
    pub unit: PricingUnit,
    pub input_rate: Money,
    pub output_rate: Money,
    #[serde(default = "default_currency")]
    pub currency: String,
}

fn default_currency() -> String {
    "USD".to_string()
}

impl PricingModel {
    pub fn new(unit: PricingUnit, input_rate: Money, output_rate: Money) -> Self {
        PricingModel {
            unit,
            input_rate,
            output_rate,
            currency: default_currency(),
        }
    }

    pub fn validate(&self) -> Result<(), PricingError> {
        if self.input_rate.is_negative() {
            return Err(PricingError::NegativeRate("input"));
        }
        if self.output_rate.is_negative() {
            return Err(PricingError::NegativeRate("output"));
        }
        Ok(())
    }

    pub fn price(&self, input_units: u64, output_units: u64) -> Money {
        compute_cost(input_units, self.input_rate, self.unit)
            + compute_cost(output_units, self.output_rate, self.unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Completed,
    Failed,
}

/// One proxied request. Units are counted under the upstream pricing unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub request_id: String,
    pub received_at: DateTime<Utc>,
    pub completed_at: DateTime<Utc>,
    pub status: RecordStatus,
    /// The prompt went upstream unmodified.
    pub passed_through: bool,
    pub unit: PricingUnit,
    pub original_units: u64,
    pub abstracted_units: u64,
    pub upstream_output_units: u64,
    pub user_price: Money,
    pub upstream_cost: Money,
    pub margin: Money,
    pub currency: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CostRecord {
    pub fn check(&self) -> bool {
        self.margin == self.user_price - self.upstream_cost
            && (self.passed_through || self.status == RecordStatus::Failed || self.abstracted_units <= self.original_units)
    }
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ledger {path}:{line_no}: {source}")]
    Corrupt {
        path: PathBuf,
        line_no: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Every record of a JSON-lines ledger file, without opening it for writing.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<CostRecord>, LedgerError> {
    let path = path.as_ref();
    let io = |source| LedgerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| LedgerError::Corrupt {
            path: path.to_path_buf(),
            line_no: n + 1,
            source,
        })?);
    }
    Ok(records)
}

#[derive(Debug, Default)]
struct LedgerInner {
    records: Vec<CostRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

/// Append-only record log, optionally persisted as JSON lines.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    inner: Arc<Mutex<LedgerInner>>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Ledger::default()
    }

    /// Open `path`, loading existing records; new records are appended to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let path = path.as_ref().to_path_buf();
        let records = if path.exists() { read_records(&path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| LedgerError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Ledger {
            inner: Arc::new(Mutex::new(LedgerInner {
                records,
                sink: Some((path, BufWriter::new(file))),
            })),
        })
    }

    pub fn append(&self, record: CostRecord) -> Result<(), LedgerError> {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((path, sink)) = &mut inner.sink {
            let line = serde_json::to_string(&record).expect("records serialize");
            writeln!(sink, "{line}")
                .and_then(|_| sink.flush())
                .map_err(|source| LedgerError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        inner.records.push(record);
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<CostRecord> {
        self.inner
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .records
            .clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn report(&self, window: Window) -> MarginReport {
        margin_report(&self.snapshot(), window)
    }
}

/// Half-open time range on `received_at`; missing bounds are unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Window {
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl Window {
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.from.is_none_or(|f| t >= f) && self.to.is_none_or(|to| t < to)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub window: Window,
    pub records: usize,
    pub failed: usize,
    pub total_user_price: Money,
    pub total_upstream_cost: Money,
    pub total_margin: Money,
    pub mean_user_price: Money,
    pub mean_upstream_cost: Money,
    pub mean_margin: Money,
    pub total_original_units: u64,
    pub total_abstracted_units: u64,
    /// Mean over records of the per-request unit reduction, in percent.
    pub mean_unit_reduction_pct: f64,
}

pub fn margin_report(records: &[CostRecord], window: Window) -> MarginReport {
    let selected: Vec<&CostRecord> = records.iter().filter(|r| window.contains(r.received_at)).collect();
    let n = selected.len() as i128;
    let total_user_price: Money = selected.iter().map(|r| r.user_price).sum();
    let total_upstream_cost: Money = selected.iter().map(|r| r.upstream_cost).sum();
    let total_margin: Money = selected.iter().map(|r| r.margin).sum();
    let mean = |total: Money| if n == 0 { Money::ZERO } else { total.mul_div(1, n) };
    let mean_unit_reduction_pct = if selected.is_empty() {
        0.0
    } else {
        selected
            .iter()
            .map(|r| crate::engine::reduction_pct(r.original_units as usize, r.abstracted_units as usize))
            .sum::<f64>()
            / selected.len() as f64
    };
    MarginReport {
        window,
        records: selected.len(),
        failed: selected.iter().filter(|r| r.status == RecordStatus::Failed).count(),
        total_user_price,
        total_upstream_cost,
        total_margin,
        mean_user_price: mean(total_user_price),
        mean_upstream_cost: mean(total_upstream_cost),
        mean_margin: mean(total_margin),
        total_original_units: selected.iter().map(|r| r.original_units).sum(),
        total_abstracted_units: selected.iter().map(|r| r.abstracted_units).sum(),
        mean_unit_reduction_pct,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(s: &str) -> Money {
        s.parse().unwrap()
    }

    #[test]
    fn parses_and_prints() {
        assert_eq!(m("0.002").nanos(), 2_000_000);
        assert_eq!(m("1").nanos(), SCALE);
        assert_eq!(m("-1.50").to_string(), "-1.5");
        assert_eq!(m(".5").to_string(), "0.5");
        assert_eq!(m("0.000000001").nanos(), 1);
        assert_eq!(m("0.0000000010").nanos(), 1);
        assert_eq!(Money::ZERO.to_string(), "0");
        assert!(matches!("0.0000000001".parse::<Money>(), Err(MoneyError::TooPrecise(_))));
        for bad in ["", ".", "1e3", "abc", "1.2.3", "--1"] {
            assert!(matches!(bad.parse::<Money>(), Err(MoneyError::Syntax(_))), "{bad}");
        }
    }

    #[test]
    fn serde_forms() {
        let model: PricingModel =
            serde_json::from_str(r#"{"unit":"per_1k_chars","input_rate":0.001,"output_rate":"0.002"}"#).unwrap();
        assert_eq!(model.input_rate, m("0.001"));
        assert_eq!(model.output_rate, m("0.002"));
        assert_eq!(model.currency, "USD");
        assert_eq!(serde_json::to_string(&m("0.25")).unwrap(), "\"0.25\"");
        assert!(serde_json::from_str::<PricingModel>(r#"{"input_rate":1,"output_rate":1,"extra":1}"#).is_err());
    }

    #[test]
    fn costs() {
        let tokens = PricingUnit::Per1kTokens;
        assert_eq!(compute_cost(0, m("0.002"), tokens), Money::ZERO);
        assert_eq!(compute_cost(1000, m("0.002"), tokens), m("0.002"));
        assert_eq!(compute_cost(1000, m("0.001"), PricingUnit::Per1kChars), m("0.001"));
        assert_eq!(compute_cost(1, m("0.002"), tokens), m("0.000002"));
        // 1 × 0.000000001 / 1000 rounds to zero; 500 units round half up.
        assert_eq!(compute_cost(1, m("0.000000001"), tokens), Money::ZERO);
        assert_eq!(compute_cost(500, m("0.000000001"), tokens).nanos(), 1);
    }

    #[test]
    fn negative_rates_rejected() {
        let model = PricingModel::new(PricingUnit::Per1kTokens, m("-0.1"), m("0"));
        assert_eq!(model.validate(), Err(PricingError::NegativeRate("input")));
    }

    fn record(i: i64, user: Money, upstream: Money) -> CostRecord {
        let t = DateTime::from_timestamp(1_700_000_000 + i, 0).unwrap();
        CostRecord {
            request_id: format!("r{i}"),
            received_at: t,
            completed_at: t,
            status: RecordStatus::Completed,
            passed_through: false,
            unit: PricingUnit::Per1kTokens,
            original_units: 10,
            abstracted_units: 8,
            upstream_output_units: 5,
            user_price: user,
            upstream_cost: upstream,
            margin: user - upstream,
            currency: "USD".into(),
            error: None,
        }
    }

    #[test]
    fn empty_report_is_zero() {
        let report = margin_report(&[], Window::default());
        assert_eq!(report.records, 0);
        assert_eq!(report.total_margin, Money::ZERO);
        assert_eq!(report.mean_margin, Money::ZERO);
        assert_eq!(report.mean_unit_reduction_pct, 0.0);
    }

    #[test]
    fn margins_add_up() {
        let rs = [
            record(0, m("0.003"), m("0.002")),
            record(1, m("0.005"), m("0.003")),
        ];
        let report = margin_report(&rs, Window::default());
        assert_eq!(report.total_margin, m("0.003"));
        assert_eq!(report.mean_margin, m("0.0015"));
        assert!((report.mean_unit_reduction_pct - 20.0).abs() < 1e-12);
        let window = Window {
            from: Some(rs[1].received_at),
            to: None,
        };
        assert_eq!(margin_report(&rs, window).total_margin, m("0.002"));
    }

    #[test]
    fn ledger_persists_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let ledger = Ledger::open(&path).unwrap();
        ledger.append(record(0, m("0.01"), m("0.004"))).unwrap();
        ledger.append(record(1, m("0.02"), m("0.001"))).unwrap();
        drop(ledger);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let reopened = Ledger::open(&path).unwrap();
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.report(Window::default()).total_margin, m("0.025"));
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(Ledger::open(&path), Err(LedgerError::Corrupt { line_no: 1, .. })));
    }

    proptest! {
        #[test]
        fn display_round_trips(nanos in -10i128.pow(20)..10i128.pow(20)) {
            let money = Money::from_nanos(nanos);
            prop_assert_eq!(money.to_string().parse::<Money>().unwrap(), money);
        }

        #[test]
        fn conservation(pairs in prop::collection::vec((0i64..10_000_000, 0i64..10_000_000), 0..100)) {
            let rs: Vec<_> = pairs
                .iter()
                .enumerate()
                .map(|(i, &(u, c))| record(i as i64, Money::from_nanos(u.into()), Money::from_nanos(c.into())))
                .collect();
            let report = margin_report(&rs, Window::default());
            prop_assert_eq!(report.total_margin, report.total_user_price - report.total_upstream_cost);
            let by_hand: i128 = pairs.iter().map(|&(u, c)| i128::from(u - c)).sum();
            prop_assert_eq!(report.total_margin.nanos(), by_hand);
        }
    }
}
