//! UCI diabetes records: parsing, per-patient series and long-memory
//! analysis of blood glucose.
//!
//! Each line is `date \t time \t code \t value` with dates as `MM-DD-YYYY`
//! and times as `H:MM`.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use fracrl_core::sysid::{estimate_hurst, HurstFit, SysIdError, MIN_HURST_LEN};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Unreadable { path: String, source: std::io::Error },
    #[error("{skipped} of {lines} lines are malformed")]
    TooManyMalformed { skipped: usize, lines: usize },
    #[error("need at least {required} glucose samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },
    #[error("glucose series is degenerate: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Estimation(SysIdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsulinType {
    Regular,
    Nph,
    UltraLente,
}

impl InsulinType {
    pub fn code(self) -> u32 {
        match self {
            InsulinType::Regular => 33,
            InsulinType::Nph => 34,
            InsulinType::UltraLente => 35,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Glucose,
    Insulin(InsulinType),
    /// Documented non-measurement event (meals, exercise, symptoms).
    Event,
    Unknown,
}

pub fn classify(code: u32) -> RecordKind {
    match code {
        33 => RecordKind::Insulin(InsulinType::Regular),
        34 => RecordKind::Insulin(InsulinType::Nph),
        35 => RecordKind::Insulin(InsulinType::UltraLente),
        48 | 57..=64 => RecordKind::Glucose,
        65..=72 => RecordKind::Event,
        _ => RecordKind::Unknown,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UciRecord {
    pub date: NaiveDate,
    pub minute_of_day: u32,
    pub code: u32,
    pub value: f64,
    /// The four fields exactly as read.
    raw: [String; 4],
}

impl UciRecord {
    pub fn kind(&self) -> RecordKind {
        classify(self.code)
    }

    pub fn is_known(&self) -> bool {
        self.kind() != RecordKind::Unknown
    }

    /// Minutes since 0001-01-01.
    pub fn timestamp(&self) -> i64 {
        i64::from(self.date.num_days_from_ce()) * 1440 + i64::from(self.minute_of_day)
    }

    pub fn to_line(&self) -> String {
        self.raw.join("\t")
    }

    fn parse(line: &str) -> Option<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return None;
        }
        let date = NaiveDate::parse_from_str(fields[0].trim(), "%m-%d-%Y").ok()?;
        let (h, m) = fields[1].trim().split_once(':')?;
        let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
        if h > 23 || m > 59 {
            return None;
        }
        let code: u32 = fields[2].trim().parse().ok()?;
        let value: f64 = fields[3].trim().parse().ok().filter(|v: &f64| v.is_finite())?;
        Some(Self {
            date,
            minute_of_day: h * 60 + m,
            code,
            value,
            raw: [fields[0], fields[1], fields[2], fields[3]].map(String::from),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedUci {
    pub records: Vec<UciRecord>,
    pub skipped: usize,
}

impl ParsedUci {
    pub fn unknown_codes(&self) -> usize {
        self.records.iter().filter(|r| !r.is_known()).count()
    }
}

/// Tolerant parse: blank lines are ignored, malformed lines skipped and
/// counted. Fails when more than half of the non-blank lines are malformed.
pub fn parse_uci(content: &str) -> Result<ParsedUci, DataError> {
    let mut out = ParsedUci::default();
    let mut lines = 0;
    for line in content.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match UciRecord::parse(line) {
            Some(r) => out.records.push(r),
            None => out.skipped += 1,
        }
    }
    if out.skipped * 2 > lines {
        return Err(DataError::TooManyMalformed {
            skipped: out.skipped,
            lines,
        });
    }
    if out.skipped > 0 {
        log::debug!("skipped {} malformed lines of {lines}", out.skipped);
    }
    let unknown = out.unknown_codes();
    if unknown > 0 {
        log::warn!("{unknown} records carry undocumented codes");
    }
    Ok(out)
}

pub fn read_uci_file(path: &Path) -> Result<ParsedUci, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    parse_uci(&String::from_utf8_lossy(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InsulinDose {
    pub t_minutes: i64,
    pub units: f64,
    pub kind: InsulinType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientSeries {
    pub patient: String,
    /// `(minutes, mg/dL)`, time-sorted; equal timestamps keep file order.
    pub bg: Vec<(i64, f64)>,
    pub insulin: Vec<InsulinDose>,
}

impl PatientSeries {
    pub fn from_records(patient: impl Into<String>, records: &[UciRecord]) -> Self {
        let mut bg = Vec::new();
        let mut insulin = Vec::new();
        for r in records {
            match r.kind() {
                RecordKind::Glucose => bg.push((r.timestamp(), r.value)),
                RecordKind::Insulin(kind) => insulin.push(InsulinDose {
                    t_minutes: r.timestamp(),
                    units: r.value,
                    kind,
                }),
                RecordKind::Event | RecordKind::Unknown => {}
            }
        }
        bg.sort_by_key(|p| p.0);
        insulin.sort_by_key(|d| d.t_minutes);
        Self {
            patient: patient.into(),
            bg,
            insulin,
        }
    }

    /// Regular-insulin doses, the default action channel.
    pub fn regular_insulin(&self) -> Vec<(i64, f64)> {
        self.insulin
            .iter()
            .filter(|d| d.kind == InsulinType::Regular)
            .map(|d| (d.t_minutes, d.units))
            .collect()
    }
}

/// Median of the positive gaps between consecutive timestamps.
pub fn median_interval(times: &[i64]) -> Option<i64> {
    let mut gaps: Vec<i64> = times.windows(2).map(|w| w[1] - w[0]).filter(|&g| g > 0).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable();
    Some(gaps[gaps.len() / 2])
}

/// Last observation carried forward onto a grid starting at the first
/// sample with the median spacing.
pub fn resample_locf(points: &[(i64, f64)]) -> Option<Vec<f64>> {
    let times: Vec<i64> = points.iter().map(|p| p.0).collect();
    let step = median_interval(&times)?;
    let (t0, t_end) = (times[0], times[times.len() - 1]);
    let mut out = Vec::with_capacity(((t_end - t0) / step + 1) as usize);
    let mut idx = 0;
    let mut t = t0;
    while t <= t_end {
        while idx + 1 < points.len() && points[idx + 1].0 <= t {
            idx += 1;
        }
        out.push(points[idx].1);
        t += step;
    }
    Some(out)
}

/// Wavelet-variance Hurst fit of the resampled glucose series.
pub fn analyze_memory(series: &PatientSeries) -> Result<HurstFit, DataError> {
    if series.bg.len() < MIN_HURST_LEN {
        return Err(DataError::InsufficientSamples {
            required: MIN_HURST_LEN,
            got: series.bg.len(),
        });
    }
    let grid = resample_locf(&series.bg)
        .ok_or_else(|| DataError::Degenerate("all samples share one timestamp".into()))?;
    let fit = estimate_hurst(&grid).map_err(|e| match e {
        SysIdError::Degenerate { .. } => DataError::Degenerate(e.to_string()),
        SysIdError::TooShort { required, got } => DataError::InsufficientSamples { required, got },
        other => DataError::Estimation(other),
    })?;
    if fit.scales.len() < 3 {
        return Err(DataError::InsufficientSamples {
            required: MIN_HURST_LEN,
            got: grid.len(),
        });
    }
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPoint {
    pub level: usize,
    pub log2var: f64,
}

/// Per-patient output of the memory analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub patient: String,
    pub alpha: f64,
    pub hurst: f64,
    pub slope: f64,
    pub points: Vec<LevelPoint>,
}

impl MemoryReport {
    pub fn new(patient: &str, fit: &HurstFit) -> Self {
        Self {
            patient: patient.to_string(),
            alpha: fit.alpha,
            hurst: fit.hurst,
            slope: fit.slope,
            points: fit
                .scales
                .iter()
                .zip(&fit.log2_variances)
                .map(|(&level, &log2var)| LevelPoint { level, log2var })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_glucose_line() {
        let p = parse_uci("04-21-1991\t9:09\t58\t100\n").unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.skipped, 0);
        let r = &p.records[0];
        assert_eq!(r.kind(), RecordKind::Glucose);
        assert_eq!(r.value, 100.0);
        assert_eq!(r.minute_of_day, 9 * 60 + 9);
        assert_eq!(r.date, NaiveDate::from_ymd_opt(1991, 4, 21).unwrap());
    }

    #[test]
    fn empty_input() {
        let p = parse_uci("").unwrap();
        assert!(p.records.is_empty());
        assert_eq!(p.skipped, 0);
    }

    #[test]
    fn malformed_lines_counted() {
        let text = "04-21-1991\t9:09\t58\t100\n04-21-1991\t9:09\t33\t9\n04-21-1991\t9:10\t58\t0Hi\n";
        let p = parse_uci(text).unwrap();
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.skipped, 1);
        assert_eq!(p.records[1].kind(), RecordKind::Insulin(InsulinType::Regular));
    }

    #[test]
    fn mostly_malformed_is_an_error() {
        let text = "garbage\n04-21-1991\t9:09\t58\t100\nmore garbage\n";
        assert!(matches!(parse_uci(text), Err(DataError::TooManyMalformed { skipped: 2, lines: 3 })));
        // exactly half is tolerated
        assert!(parse_uci("x\n04-21-1991\t9:09\t58\t100\n").is_ok());
    }

    #[test]
    fn bad_fields_are_malformed() {
        for line in [
            "13-40-1991\t9:09\t58\t100",
            "04-21-1991\t25:00\t58\t100",
            "04-21-1991\t9:09\tx\t100",
            "04-21-1991\t9:09\t58\tNaN",
            "04-21-1991\t9:09\t58",
        ] {
            assert!(UciRecord::parse(line).is_none(), "{line}");
        }
    }

    #[test]
    fn codes_classified() {
        assert_eq!(classify(48), RecordKind::Glucose);
        for c in 57..=64 {
            assert_eq!(classify(c), RecordKind::Glucose);
        }
        assert_eq!(classify(34), RecordKind::Insulin(InsulinType::Nph));
        assert_eq!(classify(35), RecordKind::Insulin(InsulinType::UltraLente));
        assert_eq!(classify(66), RecordKind::Event);
        assert_eq!(classify(99), RecordKind::Unknown);
        let p = parse_uci("04-21-1991\t9:09\t99\t1\n").unwrap();
        assert_eq!(p.unknown_codes(), 1);
    }

    #[test]
    fn series_sorted_with_duplicates_kept() {
        let text = "04-22-1991\t8:00\t58\t150\n04-21-1991\t9:00\t58\t100\n04-21-1991\t9:00\t60\t110\n04-21-1991\t9:05\t34\t12\n";
        let s = PatientSeries::from_records("p", &parse_uci(text).unwrap().records);
        let values: Vec<f64> = s.bg.iter().map(|p| p.1).collect();
        assert_eq!(values, vec![100.0, 110.0, 150.0]);
        assert_eq!(s.insulin.len(), 1);
        assert!(s.regular_insulin().is_empty());
    }

    #[test]
    fn locf_on_median_grid() {
        let pts = [(0, 1.0), (10, 2.0), (20, 3.0), (45, 4.0)];
        assert_eq!(median_interval(&[0, 10, 20, 45]), Some(10));
        assert_eq!(resample_locf(&pts).unwrap(), vec![1.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(resample_locf(&[(5, 1.0), (5, 2.0)]), None);
    }

    #[test]
    fn too_few_samples() {
        let s = PatientSeries {
            patient: "p".into(),
            bg: (0..63).map(|i| (i * 5, 100.0 + i as f64)).collect(),
            insulin: Vec::new(),
        };
        assert!(matches!(analyze_memory(&s), Err(DataError::InsufficientSamples { required: 64, got: 63 })));
    }

    #[test]
    fn constant_series_is_degenerate() {
        let s = PatientSeries {
            patient: "p".into(),
            bg: (0..256).map(|i| (i * 5, 120.0)).collect(),
            insulin: Vec::new(),
        };
        assert!(matches!(analyze_memory(&s), Err(DataError::Degenerate(_))));
    }
}
