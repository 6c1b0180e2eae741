//! Measurement sweeps: latency against buffer size and bandwidth against
//! worker count, for one device and one or both access modes.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chase::measure_latency;
use crate::env::EnvReport;
use crate::error::{Error, Result};
use crate::model::{
    AccessMode, Bytes, ChaseResult, ChaseSpec, DeviceProfile, Nanos, Record, StreamResult,
    StreamSpec, CACHELINE_BYTES, DEFAULT_PAGE_BYTES, GIB,
};
use crate::store::RunStore;
use crate::stream::run_stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    LatencyVsBuffer,
    BandwidthVsWorkers,
}

impl SweepKind {
    pub fn slug(self) -> &'static str {
        match self {
            SweepKind::LatencyVsBuffer => "latency",
            SweepKind::BandwidthVsWorkers => "bandwidth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub kind: SweepKind,
    pub device: DeviceProfile,
    pub modes: Vec<AccessMode>,
    /// Buffer sizes in bytes, or worker counts.
    pub points: Vec<u64>,
    pub seed: u64,
    pub runs: u32,
    pub warmup_passes: u32,
    pub min_timed_duration: Nanos,
    pub window_bytes: Option<Bytes>,
    pub per_worker_bytes: Bytes,
    /// Stream passes; `None` picks the default for `per_worker_bytes`.
    pub passes: Option<u32>,
    /// Cores available to the sweep. Latency points pin to the first one,
    /// a bandwidth point with `n` workers uses the first `n`.
    pub cores: Vec<u32>,
    pub page_bytes: Bytes,
}

impl SweepPlan {
    pub fn new(kind: SweepKind, device: DeviceProfile, points: Vec<u64>, cores: Vec<u32>) -> Self {
        SweepPlan {
            kind,
            device,
            modes: AccessMode::ALL.to_vec(),
            points,
            seed: ChaseSpec::DEFAULT_SEED,
            runs: 5,
            warmup_passes: 1,
            min_timed_duration: Nanos::from_millis(200),
            window_bytes: None,
            per_worker_bytes: StreamSpec::DEFAULT_PER_WORKER,
            passes: None,
            cores,
            page_bytes: Bytes(DEFAULT_PAGE_BYTES),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidSpec("sweep has no points".into()));
        }
        if self.points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("sweep points must be strictly increasing".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidSpec("sweep has no access modes".into()));
        }
        if self.cores.is_empty() {
            return Err(Error::InvalidSpec("sweep has no cores to pin to".into()));
        }
        for (mode, point) in self.measurements() {
            match self.kind {
                SweepKind::LatencyVsBuffer => self.chase_spec(mode, point).validate()?,
                SweepKind::BandwidthVsWorkers => {
                    if point == 0 || point as usize > self.cores.len() {
                        return Err(Error::InvalidSpec(format!(
                            "worker count {point} outside 1..={}",
                            self.cores.len()
                        )));
                    }
                    self.stream_spec(mode, point).validate()?
                }
            }
        }
        Ok(())
    }

    /// Execution order: points ascending, modes in plan order within a point.
    pub fn measurements(&self) -> impl Iterator<Item = (AccessMode, u64)> + '_ {
        self.points
            .iter()
            .flat_map(move |&p| self.modes.iter().map(move |&m| (m, p)))
    }

    /// Digest of the canonical serialization, used to match resumed runs.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("plan serialization is total");
        hex::encode(Sha256::digest(&canonical))[..16].to_string()
    }

    pub fn chase_spec(&self, mode: AccessMode, buffer_bytes: u64) -> ChaseSpec {
        ChaseSpec {
            buffer_bytes: Bytes(buffer_bytes),
            mode,
            window_bytes: self.window_bytes.filter(|w| w.0 <= buffer_bytes),
            seed: self.seed,
            min_timed_duration: self.min_timed_duration,
            warmup_passes: self.warmup_passes,
            runs: self.runs,
            pin_core: self.cores[0],
        }
    }

    pub fn stream_spec(&self, mode: AccessMode, workers: u64) -> StreamSpec {
        let cores = &self.cores[..(workers as usize).min(self.cores.len())];
        let mut spec = StreamSpec::new(cores, self.per_worker_bytes, mode);
        spec.seed = self.seed;
        if let Some(p) = self.passes {
            spec.passes = p;
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Measurement {
    Latency(ChaseResult),
    Bandwidth(StreamResult),
}

impl Measurement {
    /// ns per access for latency, bytes per second for bandwidth.
    pub fn value(&self) -> f64 {
        match self {
            Measurement::Latency(r) => r.ns_per_access,
            Measurement::Bandwidth(r) => r.bandwidth,
        }
    }

    pub fn check_accounting(&self) -> Result<()> {
        match self {
            Measurement::Latency(r) => r.check_accounting(),
            Measurement::Bandwidth(r) => r.check_accounting(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub point: u64,
    /// Wall-clock interval of the measurement, nanoseconds since the Unix epoch.
    pub started_ns: u64,
    pub finished_ns: u64,
    pub result: Measurement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub mode: AccessMode,
    pub entries: Vec<SeriesEntry>,
}

impl Series {
    pub fn points(&self) -> Vec<(u64, f64)> {
        self.entries.iter().map(|e| (e.point, e.result.value())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub plan: SweepPlan,
    pub plan_hash: String,
    pub env: EnvReport,
    pub series: Vec<Series>,
    pub started_ns: u64,
    pub finished_ns: Option<u64>,
}

impl SweepReport {
    pub fn empty(plan: SweepPlan, env: EnvReport) -> Self {
        SweepReport {
            plan_hash: plan.hash(),
            series: plan
                .modes
                .iter()
                .map(|&mode| Series { mode, entries: Vec::new() })
                .collect(),
            plan,
            env,
            started_ns: now_ns(),
            finished_ns: None,
        }
    }

    pub fn series(&self, mode: AccessMode) -> Option<&Series> {
        self.series.iter().find(|s| s.mode == mode)
    }

    fn series_mut(&mut self, mode: AccessMode) -> &mut Series {
        self.series
            .iter_mut()
            .find(|s| s.mode == mode)
            .expect("series exists for every planned mode")
    }

    pub fn entry(&self, mode: AccessMode, point: u64) -> Option<&SeriesEntry> {
        self.series(mode)?.entries.iter().find(|e| e.point == point)
    }

    pub fn is_complete(&self) -> bool {
        self.plan
            .measurements()
            .all(|(m, p)| self.entry(m, p).is_some())
    }

    /// All entries across modes ordered by start time.
    pub fn entries_by_time(&self) -> Vec<&SeriesEntry> {
        let mut all: Vec<_> = self.series.iter().flat_map(|s| &s.entries).collect();
        all.sort_by_key(|e| e.started_ns);
        all
    }
}

impl Record for SweepPlan {
    const KIND: &'static str = "sweep_plan";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[
            ("points", "bytes (latency_vs_buffer) or workers (bandwidth_vs_workers)"),
            ("min_timed_duration", "ns"),
            ("window_bytes", "bytes"),
            ("per_worker_bytes", "bytes"),
            ("page_bytes", "bytes"),
        ]
    }
}

impl Record for SweepReport {
    const KIND: &'static str = "sweep_report";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[
            ("series.entries.point", "bytes (latency_vs_buffer) or workers (bandwidth_vs_workers)"),
            ("series.entries.started_ns", "ns since Unix epoch"),
            ("series.entries.finished_ns", "ns since Unix epoch"),
            ("series.entries.result", "see chase_result / stream_result"),
        ]
    }
}

#[derive(Debug, thiserror::Error)]
#[error("sweep failed at {}: {source}", describe_point(.mode, .point))]
pub struct SweepError {
    pub mode: Option<AccessMode>,
    pub point: Option<u64>,
    #[source]
    pub source: Error,
    /// Everything measured before the failure.
    pub partial: Box<SweepReport>,
}

fn describe_point(mode: &Option<AccessMode>, point: &Option<u64>) -> String {
    match (mode, point) {
        (Some(m), Some(p)) => format!("{m} point {p}"),
        _ => "plan validation".to_string(),
    }
}

pub fn now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

fn measure(plan: &SweepPlan, mode: AccessMode, point: u64) -> Result<Measurement> {
    match plan.kind {
        SweepKind::LatencyVsBuffer => {
            measure_latency(&plan.device, &plan.chase_spec(mode, point), plan.page_bytes)
                .map(Measurement::Latency)
        }
        SweepKind::BandwidthVsWorkers => {
            run_stream(&plan.stream_spec(mode, point), &plan.device, plan.page_bytes)
                .map(Measurement::Bandwidth)
        }
    }
}

/// Executes `plan` one measurement at a time, points ascending.
///
/// With a `store`, every finished point is persisted before the next one
/// starts, and points already recorded for the same plan hash are reused
/// instead of re-measured. Each measurement maps and releases its own
/// buffers.
pub fn run_sweep(
    plan: &SweepPlan,
    env: &EnvReport,
    store: Option<&RunStore>,
) -> std::result::Result<SweepReport, SweepError> {
    let mut report = SweepReport::empty(plan.clone(), env.clone());
    let fail = |report: &SweepReport, mode, point, source| SweepError {
        mode,
        point,
        source,
        partial: Box::new(report.clone()),
    };
    if let Err(e) = plan.validate() {
        return Err(fail(&report, None, None, e));
    }

    if let Some(store) = store {
        let existing = store
            .load_entries(&report.plan_hash)
            .map_err(|e| fail(&report, None, None, e))?;
        for (mode, entry) in existing {
            if plan.modes.contains(&mode) && plan.points.contains(&entry.point) {
                report.series_mut(mode).entries.push(entry);
            }
        }
        store.write_plan(plan).map_err(|e| fail(&report, None, None, e))?;
    }

    for (mode, point) in plan.measurements() {
        if report.entry(mode, point).is_some() {
            continue;
        }
        let started_ns = now_ns();
        let result = measure(plan, mode, point)
            .map_err(|e| fail(&report, Some(mode), Some(point), e))?;
        let entry = SeriesEntry { point, started_ns, finished_ns: now_ns(), result };
        if let Some(store) = store {
            store
                .append_entry(&report.plan_hash, plan.kind, mode, &entry, env)
                .map_err(|e| fail(&report, Some(mode), Some(point), e))?;
        }
        report.series_mut(mode).entries.push(entry);
    }

    for s in &mut report.series {
        s.entries.sort_by_key(|e| e.point);
    }
    report.finished_ns = Some(now_ns());
    if let Some(store) = store {
        store.write_report(&report).map_err(|e| fail(&report, None, None, e))?;
    }
    Ok(report)
}

/// Powers of two from 32 KiB up to `cap` (itself capped at 4 GiB).
pub fn buffer_grid(cap: Bytes) -> Vec<u64> {
    let cap = cap.0.min(4 * GIB);
    let mut points = Vec::new();
    let mut b = 32 * 1024u64;
    while b <= cap {
        points.push(b);
        b *= 2;
    }
    if points.is_empty() {
        let floor = (cap / CACHELINE_BYTES).max(1) * CACHELINE_BYTES;
        points.push(floor);
    }
    points
}

/// The default experimental grid for `device`: a latency sweep over buffer
/// sizes and a bandwidth sweep over 1..=cores-in-node workers, both modes.
pub fn default_plans(device: &DeviceProfile, topology: &EnvReport) -> Vec<SweepPlan> {
    let cores = topology.cores_in_node(device.numa_node);
    let available = device
        .capacity()
        .or_else(|| topology.node(device.numa_node).and_then(|n| n.memory_bytes))
        .unwrap_or(Bytes(4 * GIB));
    let latency = SweepPlan::new(
        SweepKind::LatencyVsBuffer,
        device.clone(),
        buffer_grid(available),
        cores.clone(),
    );
    let workers: Vec<u64> = (1..=cores.len() as u64).collect();
    let mut plans = vec![latency];
    if !workers.is_empty() {
        plans.push(SweepPlan::new(
            SweepKind::BandwidthVsWorkers,
            device.clone(),
            workers,
            cores,
        ));
    }
    plans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::current_affinity;
    use crate::env::{AslrSetting, CacheSizes, NumaNode, ThpSetting};
    use crate::model::{Backing, MIB};

    pub(crate) fn topology(cores: u32, memory: Bytes) -> EnvReport {
        EnvReport {
            smt_enabled: Some(false),
            transparent_huge_pages: ThpSetting::Never,
            aslr: AslrSetting::Off,
            numa_nodes: vec![NumaNode {
                node: 0,
                cores: (0..cores).collect(),
                memory_bytes: Some(memory),
            }],
            cache_sizes: CacheSizes::default(),
            page_bytes: Bytes(4096),
            governor: "unknown".into(),
            warnings: vec![],
        }
    }

    #[test]
    fn default_grid_for_24_core_node() {
        let plans = default_plans(&DeviceProfile::anonymous("dram", 0), &topology(24, Bytes::gib(96)));
        assert_eq!(plans.len(), 2);
        assert_eq!(plans[1].points, (1..=24).collect::<Vec<u64>>());
        let lat = &plans[0].points;
        assert_eq!(lat.first(), Some(&(32 * 1024)));
        assert_eq!(lat.last(), Some(&(4 * GIB)));
        assert_eq!(lat.len(), 18);
        for plan in &plans {
            assert_eq!(plan.modes, AccessMode::ALL.to_vec());
            plan.validate().unwrap();
        }
    }

    #[test]
    fn default_grid_for_laptop() {
        let plans = default_plans(&DeviceProfile::anonymous("dram", 0), &topology(4, Bytes::gib(16)));
        assert_eq!(plans[1].points, vec![1, 2, 3, 4]);
    }

    #[test]
    fn buffer_points_capped_by_device() {
        let mut device = DeviceProfile::anonymous("nvm", 0);
        device.backing = Backing::PhysicalRange {
            base_address: Bytes(0),
            length: Bytes::mib(256),
            device: "/dev/mem".into(),
        };
        let plans = default_plans(&device, &topology(4, Bytes::gib(16)));
        assert_eq!(plans[0].points.last(), Some(&(256 * MIB)));
    }

    #[test]
    fn plan_validation() {
        let device = DeviceProfile::anonymous("dram", 0);
        let mut plan = SweepPlan::new(SweepKind::LatencyVsBuffer, device.clone(), vec![4096, 4096], vec![0]);
        assert!(plan.validate().is_err());
        plan.points = vec![];
        assert!(plan.validate().is_err());
        plan.points = vec![4096];
        plan.modes.clear();
        assert!(plan.validate().is_err());
        let plan = SweepPlan::new(SweepKind::BandwidthVsWorkers, device, vec![1, 2], vec![0]);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn plan_hash_tracks_content() {
        let device = DeviceProfile::anonymous("dram", 0);
        let a = SweepPlan::new(SweepKind::LatencyVsBuffer, device.clone(), vec![4096], vec![0]);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn single_point_sweep() {
        let core = current_affinity().unwrap()[0];
        let mut plan = SweepPlan::new(
            SweepKind::LatencyVsBuffer,
            DeviceProfile::anonymous("dram", 0),
            vec![16 * 1024],
            vec![core],
        );
        plan.runs = 1;
        plan.min_timed_duration = Nanos::from_millis(1);
        let env = crate::env::inspect_environment();
        let report = run_sweep(&plan, &env, None).unwrap();
        assert!(report.is_complete());
        assert_eq!(report.series.len(), 2);
        for s in &report.series {
            assert_eq!(s.entries.len(), 1);
        }
    }

    #[test]
    fn failure_keeps_partial_report() {
        let core = current_affinity().unwrap()[0];
        let mut plan = SweepPlan::new(
            SweepKind::LatencyVsBuffer,
            DeviceProfile::anonymous("dram", 0),
            vec![4096, 1 << 46],
            vec![core],
        );
        plan.runs = 1;
        plan.modes = vec![AccessMode::ReadOnly];
        plan.min_timed_duration = Nanos::from_millis(1);
        let env = crate::env::inspect_environment();
        let err = run_sweep(&plan, &env, None).unwrap_err();
        assert_eq!(err.point, Some(1 << 46));
        assert!(matches!(err.source, Error::Exhausted(_)));
        assert_eq!(err.partial.series[0].entries.len(), 1);
    }
}
