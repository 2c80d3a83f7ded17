//! Duration-following metrics and reports.
//!
//! `MAE = mean |d - t|` in seconds and `MAPE = mean |d - t| / t * 100`, where
//! `d` is the realized duration and `t` the instructed one. Reports break both
//! down by half-open target-duration bins.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub source: String,
    pub t_inst_s: f64,
    pub actual_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_last_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub truncated: bool,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, t_inst_s: f64, actual_s: f64) -> Self {
        Self {
            id: id.into(),
            source: "toy".into(),
            t_inst_s,
            actual_s,
            t_last_s: None,
            text: None,
            truncated: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_inst_s.is_finite() && self.t_inst_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{}: t_inst_s must be positive, got {}",
                self.id, self.t_inst_s
            )));
        }
        if !(self.actual_s.is_finite() && self.actual_s >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{}: actual_s must be non-negative, got {}",
                self.id, self.actual_s
            )));
        }
        if let Some(t) = self.t_last_s {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{}: t_last_s must be non-negative, got {t}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn abs_error(&self) -> f64 {
        (self.actual_s - self.t_inst_s).abs()
    }

    pub fn pct_error(&self) -> f64 {
        self.abs_error() / self.t_inst_s * 100.0
    }
}

fn non_empty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::InvalidArgument("metrics need at least one record".into()))
    } else {
        Ok(())
    }
}

pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(records.iter().map(EvalRecord::abs_error).sum::<f64>() / records.len() as f64)
}

/// Mean of per-record percentage errors.
pub fn mape(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(records.iter().map(EvalRecord::pct_error).sum::<f64>() / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub n: usize,
    pub mae_s: f64,
    pub mape_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    /// Mean |t_last - actual|.
    pub marker_mae_s: f64,
    /// Mean |t_inst - actual| over the same records.
    pub target_mae_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub n: usize,
    pub mae_s: Option<f64>,
    pub mape_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae_s: f64,
    pub mape_pct: f64,
    pub bin_width_s: f64,
    pub bins: Vec<BinRow>,
    pub calibration: Option<CalibrationReport>,
    pub truncated: SubsetMetrics,
}

pub const DEFAULT_BIN_WIDTH_S: f64 = 10.0;

/// Overall and per-bin metrics over half-open target bins
/// `[k * width, (k + 1) * width)`. Empty bins are omitted.
pub fn bin_report(records: &[EvalRecord], bin_width_s: f64) -> Result<EvalReport> {
    non_empty(records)?;
    if !(bin_width_s.is_finite() && bin_width_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bin width must be positive, got {bin_width_s}"
        )));
    }
    let mut by_bin: BTreeMap<i64, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        by_bin
            .entry((r.t_inst_s / bin_width_s).floor() as i64)
            .or_default()
            .push(r);
    }
    let bins = by_bin
        .into_iter()
        .map(|(k, rs)| {
            let n = rs.len() as f64;
            BinRow {
                bin_lo: k as f64 * bin_width_s,
                bin_hi: (k + 1) as f64 * bin_width_s,
                n: rs.len(),
                mae_s: rs.iter().map(|r| r.abs_error()).sum::<f64>() / n,
                mape_pct: rs.iter().map(|r| r.pct_error()).sum::<f64>() / n,
            }
        })
        .collect();

    let with_marker: Vec<&EvalRecord> = records.iter().filter(|r| r.t_last_s.is_some()).collect();
    let calibration = (!with_marker.is_empty()).then(|| {
        let n = with_marker.len() as f64;
        CalibrationReport {
            n: with_marker.len(),
            marker_mae_s: with_marker
                .iter()
                .map(|r| (r.t_last_s.unwrap_or(0.0) - r.actual_s).abs())
                .sum::<f64>()
                / n,
            target_mae_s: with_marker.iter().map(|r| r.abs_error()).sum::<f64>() / n,
        }
    });

    let truncated: Vec<EvalRecord> = records.iter().filter(|r| r.truncated).cloned().collect();
    Ok(EvalReport {
        n: records.len(),
        mae_s: mae(records)?,
        mape_pct: mape(records)?,
        bin_width_s,
        bins,
        calibration,
        truncated: SubsetMetrics {
            n: truncated.len(),
            mae_s: mae(&truncated).ok(),
            mape_pct: mape(&truncated).ok(),
        },
    })
}

/// `"0.90 / 2.7%"`: MAE with two decimals, MAPE with one.
pub fn format_mae_mape(mae_s: f64, mape_pct: f64) -> String {
    format!("{mae_s:.2} / {mape_pct:.1}%")
}

pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "N = {}", report.n);
    let _ = writeln!(
        out,
        "overall MAE (s) / MAPE (%): {}",
        format_mae_mape(report.mae_s, report.mape_pct)
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<16} {:>6}  MAE (s) / MAPE (%)", "target bin (s)", "n");
    for b in &report.bins {
        let label = format!("[{}, {})", b.bin_lo, b.bin_hi);
        let _ = writeln!(out, "{label:<16} {:>6}  {}", b.n, format_mae_mape(b.mae_s, b.mape_pct));
    }
    if let Some(c) = &report.calibration {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "final marker vs actual: {:.2} s   target vs actual: {:.2} s   (n = {})",
            c.marker_mae_s, c.target_mae_s, c.n
        );
    }
    if report.truncated.n > 0 {
        let _ = writeln!(
            out,
            "truncated: {} ({})",
            report.truncated.n,
            format_mae_mape(
                report.truncated.mae_s.unwrap_or(0.0),
                report.truncated.mape_pct.unwrap_or(0.0)
            )
        );
    }
    out
}

pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,n,mae_s,mape_pct\n");
    for b in &report.bins {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            b.bin_lo, b.bin_hi, b.n, b.mae_s, b.mape_pct
        );
    }
    out
}

/// Writes `<stem>.json`, `<stem>.csv` and `<stem>.txt` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(report)? + "\n",
        ),
        (dir.join(format!("{stem}.csv")), render_csv(report)),
        (dir.join(format!("{stem}.txt")), render_table(report)),
    ];
    let mut paths = Vec::new();
    for (path, body) in files {
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSONL records; the first malformed or invalid line aborts with its
/// line number.
pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let record: EvalRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        record.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn build(values: impl IntoIterator<Item = f64>, bin_width: f64) -> Self {
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for v in values {
            *counts.entry((v / bin_width).floor() as i64).or_default() += 1;
        }
        let bins = counts
            .into_iter()
            .map(|(k, count)| HistogramBin {
                lo: k as f64 * bin_width,
                hi: (k + 1) as f64 * bin_width,
                count,
            })
            .collect();
        Self { bin_width, bins }
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{}", b.lo, b.hi, b.count);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsBins {
    pub count_width: f64,
    pub time_width_s: f64,
    pub interval_width_s: f64,
}

impl Default for StatsBins {
    fn default() -> Self {
        Self {
            count_width: 1.0,
            time_width_s: 1.0,
            interval_width_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerStats {
    pub responses: usize,
    pub markers_per_response: Histogram,
    pub marker_times: Histogram,
    pub inter_marker_intervals: Histogram,
}

/// Histograms of marker count per response, marker values, and gaps between
/// consecutive markers.
pub fn marker_stats(responses: &[Vec<f64>], bins: &StatsBins) -> Result<MarkerStats> {
    if ![bins.count_width, bins.time_width_s, bins.interval_width_s]
        .iter()
        .all(|w| w.is_finite() && *w > 0.0)
    {
        return Err(Error::InvalidArgument(format!(
            "histogram widths must be positive, got {bins:?}"
        )));
    }
    Ok(MarkerStats {
        responses: responses.len(),
        markers_per_response: Histogram::build(responses.iter().map(|r| r.len() as f64), bins.count_width),
        marker_times: Histogram::build(responses.iter().flatten().copied(), bins.time_width_s),
        inter_marker_intervals: Histogram::build(
            responses.iter().flat_map(|r| r.windows(2).map(|w| w[1] - w[0])),
            bins.interval_width_s,
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TargetSetting {
    /// 10 to 30 s.
    Short,
    /// 30 to 60 s.
    Long,
    Custom {
        lo_s: f64,
        hi_s: f64,
    },
}

impl TargetSetting {
    pub fn range(self) -> (f64, f64) {
        match self {
            TargetSetting::Short => (10.0, 30.0),
            TargetSetting::Long => (30.0, 60.0),
            TargetSetting::Custom { lo_s, hi_s } => (lo_s, hi_s),
        }
    }
}

/// Uniform target durations for a setting.
pub fn sample_targets(setting: TargetSetting, n: usize, master_seed: u64) -> Result<Vec<f64>> {
    let (lo, hi) = setting.range();
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
        return Err(Error::InvalidArgument(format!(
            "target range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
        )));
    }
    let mut rng = seed::rng_for(master_seed, &[seed::tag::EVAL_TARGETS]);
    Ok((0..n).map(|_| rng.gen_range(lo..=hi)).collect())
}
