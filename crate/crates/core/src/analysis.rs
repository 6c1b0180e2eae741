//! Summaries and comparison tables over measured results.
//!
//! Latency curves are summarized by their plateau (median of the last few
//! buffer sizes), bandwidth curves by their peak. Two result sets are
//! compared with [`ratio_table`], which expresses each subject metric as a
//! percentage of the baseline, rounded half-up to one decimal place.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AccessMode, RatioRow, RatioTable, GB};
use crate::stats;
use crate::sweep::{SweepKind, SweepReport};

/// A plateau whose tail spread exceeds this fraction of its median is
/// reported as not converged.
pub const PLATEAU_SPREAD_LIMIT: f64 = 0.05;

/// Points at least this far below the running maximum are flagged.
pub const DEGRADATION_THRESHOLD_PERCENT: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LatencyReadOnly,
    LatencyWriteBack,
    BandwidthReadOnly,
    BandwidthWriteBack,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::LatencyReadOnly,
        Metric::LatencyWriteBack,
        Metric::BandwidthReadOnly,
        Metric::BandwidthWriteBack,
    ];

    pub fn latency(mode: AccessMode) -> Self {
        match mode {
            AccessMode::ReadOnly => Metric::LatencyReadOnly,
            AccessMode::WriteBack => Metric::LatencyWriteBack,
        }
    }

    pub fn bandwidth(mode: AccessMode) -> Self {
        match mode {
            AccessMode::ReadOnly => Metric::BandwidthReadOnly,
            AccessMode::WriteBack => Metric::BandwidthWriteBack,
        }
    }

    pub fn group(self) -> &'static str {
        match self {
            Metric::LatencyReadOnly | Metric::LatencyWriteBack => "Latency",
            Metric::BandwidthReadOnly | Metric::BandwidthWriteBack => "Bandwidth",
        }
    }

    pub fn mode(self) -> AccessMode {
        match self {
            Metric::LatencyReadOnly | Metric::BandwidthReadOnly => AccessMode::ReadOnly,
            Metric::LatencyWriteBack | Metric::BandwidthWriteBack => AccessMode::WriteBack,
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::LatencyReadOnly | Metric::LatencyWriteBack => "ns",
            Metric::BandwidthReadOnly | Metric::BandwidthWriteBack => "GB/s",
        }
    }

    pub fn name(self) -> String {
        format!("{} {}", self.group(), self.mode().long_name())
    }
}

/// Summary values of one device configuration: latencies in ns, bandwidths
/// in decimal GB/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub label: String,
    pub values: BTreeMap<Metric, f64>,
}

impl ResultSet {
    pub fn new(label: impl Into<String>) -> Self {
        ResultSet { label: label.into(), values: BTreeMap::new() }
    }

    pub fn with(mut self, metric: Metric, value: f64) -> Self {
        self.values.insert(metric, value);
        self
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.get(&metric).copied()
    }

    /// Latency plateaus and bandwidth peaks of every series in `reports`.
    pub fn from_reports(label: impl Into<String>, reports: &[SweepReport], tail_points: usize) -> Result<Self> {
        let mut set = ResultSet::new(label);
        for report in reports {
            for series in &report.series {
                let points = series.points();
                if points.is_empty() {
                    continue;
                }
                match report.plan.kind {
                    SweepKind::LatencyVsBuffer => {
                        let tail = tail_points.min(collapse_replicates(&points).len());
                        let p = plateau(&points, tail)?;
                        set.values.insert(Metric::latency(series.mode), p.value);
                    }
                    SweepKind::BandwidthVsWorkers => {
                        let (_, bw) = peak(&points)?;
                        set.values.insert(Metric::bandwidth(series.mode), bw / GB);
                    }
                }
            }
        }
        Ok(set)
    }
}

/// Published summary values of the reference machine: interleaved DRAM,
/// interleaved NVM (DCPMM), and non-interleaved NVM.
pub mod reference {
    use super::{Metric, ResultSet};

    pub const DRAM_LATENCY_RO_NS: f64 = 93.5;
    pub const DRAM_LATENCY_WB_NS: f64 = 96.1;
    pub const DCPMM_LATENCY_RO_NS: f64 = 374.1;
    pub const DCPMM_LATENCY_WB_NS: f64 = 391.2;
    pub const DCPMM_NI_LATENCY_RO_NS: f64 = 394.5;
    pub const DCPMM_NI_LATENCY_WB_NS: f64 = 458.4;

    pub const DRAM_BANDWIDTH_RO_GBPS: f64 = 101.3;
    pub const DRAM_BANDWIDTH_WB_GBPS: f64 = 37.4;
    pub const DCPMM_BANDWIDTH_RO_GBPS: f64 = 37.6;
    pub const DCPMM_BANDWIDTH_WB_GBPS: f64 = 2.9;
    pub const DCPMM_NI_BANDWIDTH_RO_GBPS: f64 = 6.4;
    pub const DCPMM_NI_BANDWIDTH_WB_GBPS: f64 = 0.46;

    /// Published ratios of interleaved DCPMM to DRAM, in `Metric::ALL` order.
    pub const DCPMM_VS_DRAM_PERCENT: [f64; 4] = [400.1, 407.1, 37.1, 7.8];
    /// Published ratios of non-interleaved to interleaved DCPMM.
    pub const NON_INTERLEAVED_VS_INTERLEAVED_PERCENT: [f64; 4] = [105.5, 117.2, 17.0, 15.9];

    pub fn dram_interleaved() -> ResultSet {
        ResultSet::new("DRAM")
            .with(Metric::LatencyReadOnly, DRAM_LATENCY_RO_NS)
            .with(Metric::LatencyWriteBack, DRAM_LATENCY_WB_NS)
            .with(Metric::BandwidthReadOnly, DRAM_BANDWIDTH_RO_GBPS)
            .with(Metric::BandwidthWriteBack, DRAM_BANDWIDTH_WB_GBPS)
    }

    pub fn dcpmm_interleaved() -> ResultSet {
        ResultSet::new("DCPMM")
            .with(Metric::LatencyReadOnly, DCPMM_LATENCY_RO_NS)
            .with(Metric::LatencyWriteBack, DCPMM_LATENCY_WB_NS)
            .with(Metric::BandwidthReadOnly, DCPMM_BANDWIDTH_RO_GBPS)
            .with(Metric::BandwidthWriteBack, DCPMM_BANDWIDTH_WB_GBPS)
    }

    pub fn dcpmm_non_interleaved() -> ResultSet {
        ResultSet::new("Non-Interleaved")
            .with(Metric::LatencyReadOnly, DCPMM_NI_LATENCY_RO_NS)
            .with(Metric::LatencyWriteBack, DCPMM_NI_LATENCY_WB_NS)
            .with(Metric::BandwidthReadOnly, DCPMM_NI_BANDWIDTH_RO_GBPS)
            .with(Metric::BandwidthWriteBack, DCPMM_NI_BANDWIDTH_WB_GBPS)
    }
}

pub fn ratio_percent(baseline: f64, subject: f64) -> f64 {
    stats::round_half_up_1dp(subject / baseline * 100.0)
}

pub fn ratio_table(baseline: &ResultSet, subject: &ResultSet, metrics: &[Metric]) -> Result<RatioTable> {
    let rows = metrics
        .iter()
        .map(|&m| {
            let b = baseline
                .get(m)
                .ok_or_else(|| Error::MissingMetric(format!("{} ({})", m.name(), baseline.label)))?;
            let s = subject
                .get(m)
                .ok_or_else(|| Error::MissingMetric(format!("{} ({})", m.name(), subject.label)))?;
            Ok(RatioRow {
                metric: m.name(),
                unit: m.unit().to_string(),
                baseline_value: b,
                subject_value: s,
                ratio_percent: ratio_percent(b, s),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RatioTable {
        baseline_label: baseline.label.clone(),
        subject_label: subject.label.clone(),
        rows,
    })
}

/// Metrics present in both sets, in canonical order.
pub fn common_metrics(a: &ResultSet, b: &ResultSet) -> Vec<Metric> {
    Metric::ALL
        .into_iter()
        .filter(|m| a.get(*m).is_some() && b.get(*m).is_some())
        .collect()
}

/// Merges replicated measurements of the same point into their median and
/// sorts by point. The result does not depend on replicate order.
pub fn collapse_replicates(series: &[(u64, f64)]) -> Vec<(u64, f64)> {
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &(p, v) in series {
        groups.entry(p).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(p, vs)| (p, stats::median(&vs).expect("group is non-empty")))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub value: f64,
    /// max - min over the tail points.
    pub spread: f64,
    pub converged: bool,
}

/// Median of the last `tail_points` points of a latency-vs-buffer series.
pub fn plateau(series: &[(u64, f64)], tail_points: usize) -> Result<Plateau> {
    let points = collapse_replicates(series);
    if tail_points == 0 || points.len() < tail_points {
        return Err(Error::ShortSeries { have: points.len(), need: tail_points.max(1) });
    }
    let tail: Vec<f64> = points[points.len() - tail_points..].iter().map(|p| p.1).collect();
    let value = stats::median(&tail).expect("tail is non-empty");
    let max = tail.iter().copied().fold(f64::MIN, f64::max);
    let min = tail.iter().copied().fold(f64::MAX, f64::min);
    let spread = max - min;
    Ok(Plateau { value, spread, converged: spread <= PLATEAU_SPREAD_LIMIT * value })
}

/// Highest point of a bandwidth-vs-workers series; ties go to the smaller
/// worker count.
pub fn peak(series: &[(u64, f64)]) -> Result<(u64, f64)> {
    collapse_replicates(series)
        .into_iter()
        .fold(None, |best: Option<(u64, f64)>, (p, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((p, v)),
        })
        .ok_or(Error::EmptySeries)
}

/// Points whose bandwidth is at least 25% below the running maximum, with
/// the drop in percent.
pub fn degradation_check(series: &[(u64, f64)]) -> Vec<(u64, f64)> {
    let points = collapse_replicates(series);
    if points.len() < 2 {
        return Vec::new();
    }
    let mut running_max = f64::MIN;
    let mut flagged = Vec::new();
    for (p, v) in points {
        if v > running_max {
            running_max = v;
            continue;
        }
        let drop = (running_max - v) / running_max * 100.0;
        if drop >= DEGRADATION_THRESHOLD_PERCENT {
            flagged.push((p, stats::round_half_up_1dp(drop)));
        }
    }
    flagged
}

fn format_value(value: f64, unit: &str) -> String {
    if value.abs() < 1.0 && value != 0.0 {
        format!("{value:.2} {unit}")
    } else {
        format!("{value:.1} {unit}")
    }
}

/// Renders a ratio table as aligned text: group, access mode, baseline,
/// subject, ratio.
pub fn render_ratio_table(table: &RatioTable) -> String {
    let rows: Vec<[String; 5]> = table
        .rows
        .iter()
        .map(|r| {
            let (group, mode) = r.metric.split_once(' ').unwrap_or((&r.metric, ""));
            [
                group.to_string(),
                mode.to_string(),
                format_value(r.baseline_value, &r.unit),
                format_value(r.subject_value, &r.unit),
                format!("{:.1}%", r.ratio_percent),
            ]
        })
        .collect();
    let header = [
        String::new(),
        String::new(),
        table.baseline_label.clone(),
        table.subject_label.clone(),
        "Ratio".to_string(),
    ];
    let mut widths = [0usize; 5];
    for row in rows.iter().chain(std::iter::once(&header)) {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[String; 5], last_group: Option<&str>| {
        let group = if last_group == Some(row[0].as_str()) { "" } else { row[0].as_str() };
        let _ = writeln!(
            out,
            "{:<w0$}  {:<w1$} | {:>w2$} | {:>w3$} | {:>w4$}",
            group,
            row[1],
            row[2],
            row[3],
            row[4],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3],
            w4 = widths[4],
        );
    };
    line(&mut out, &header, None);
    let rule_len = widths.iter().sum::<usize>() + 12;
    let _ = writeln!(out, "{}", "-".repeat(rule_len));
    let mut last: Option<&str> = None;
    for row in &rows {
        line(&mut out, row, last);
        last = Some(row[0].as_str());
    }
    out
}

/// Plot-ready columns `x<TAB>y<TAB>series`: buffer bytes and ns per access
/// for latency sweeps, worker count and GB/s for bandwidth sweeps.
pub fn series_tsv(report: &SweepReport) -> String {
    let (x, y) = match report.plan.kind {
        SweepKind::LatencyVsBuffer => ("buffer_bytes", "ns_per_access"),
        SweepKind::BandwidthVsWorkers => ("workers", "gb_per_s"),
    };
    let mut out = format!("{x}\t{y}\tseries\n");
    for series in &report.series {
        let label = format!("{} {}", report.plan.device.name, series.mode.label());
        for (p, v) in series.points() {
            let v = match report.plan.kind {
                SweepKind::LatencyVsBuffer => v,
                SweepKind::BandwidthVsWorkers => v / GB,
            };
            let _ = writeln!(out, "{p}\t{v}\t{label}");
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub device: String,
    pub kind: SweepKind,
    pub mode: AccessMode,
    /// Latency plateau (ns) or peak bandwidth (GB/s).
    pub value: f64,
    pub unit: String,
    /// Worker count at peak, for bandwidth sweeps.
    pub at_point: Option<u64>,
    pub converged: Option<bool>,
    pub degraded_points: Vec<(u64, f64)>,
    pub unbalanced_points: Vec<u64>,
}

/// One summary row per series of `report`.
pub fn summarize(report: &SweepReport, tail_points: usize) -> Result<Vec<SeriesSummary>> {
    let mut out = Vec::new();
    for series in &report.series {
        let points = series.points();
        if points.is_empty() {
            continue;
        }
        let summary = match report.plan.kind {
            SweepKind::LatencyVsBuffer => {
                let tail = tail_points.min(collapse_replicates(&points).len());
                let p = plateau(&points, tail)?;
                SeriesSummary {
                    device: report.plan.device.name.clone(),
                    kind: report.plan.kind,
                    mode: series.mode,
                    value: p.value,
                    unit: "ns".into(),
                    at_point: None,
                    converged: Some(p.converged),
                    degraded_points: Vec::new(),
                    unbalanced_points: Vec::new(),
                }
            }
            SweepKind::BandwidthVsWorkers => {
                let (at, bw) = peak(&points)?;
                let unbalanced = series
                    .entries
                    .iter()
                    .filter(|e| match &e.result {
                        crate::sweep::Measurement::Bandwidth(r) => r.is_unbalanced(),
                        _ => false,
                    })
                    .map(|e| e.point)
                    .collect();
                SeriesSummary {
                    device: report.plan.device.name.clone(),
                    kind: report.plan.kind,
                    mode: series.mode,
                    value: bw / GB,
                    unit: "GB/s".into(),
                    at_point: Some(at),
                    converged: None,
                    degraded_points: degradation_check(&points),
                    unbalanced_points: unbalanced,
                }
            }
        };
        out.push(summary);
    }
    Ok(out)
}

pub fn render_summaries(summaries: &[SeriesSummary]) -> String {
    let mut out = String::new();
    for s in summaries {
        let what = match s.kind {
            SweepKind::LatencyVsBuffer => "latency plateau",
            SweepKind::BandwidthVsWorkers => "peak bandwidth",
        };
        let _ = write!(out, "{:<12} {:<2} {:<16} {}", s.device, s.mode.label(), what, format_value(s.value, &s.unit));
        if let Some(at) = s.at_point {
            let _ = write!(out, " at {at} workers");
        }
        if s.converged == Some(false) {
            out.push_str(" (not converged)");
        }
        for (p, drop) in &s.degraded_points {
            let _ = write!(out, " [drop {drop:.1}% at {p}]");
        }
        if !s.unbalanced_points.is_empty() {
            let _ = write!(out, " [unbalanced at {:?}]", s.unbalanced_points);
        }
        out.push('\n');
    }
    out
}
