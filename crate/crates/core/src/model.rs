//! Shared data model and the on-disk document schema.
//!
//! Durations are stored as integer nanoseconds and sizes as integer bytes.
//! Derived quantities (`ns_per_access`, `bandwidth` in bytes per second) are
//! stored alongside the raw fields they come from, and
//! [`ChaseResult::check_accounting`] / [`StreamResult::check_accounting`]
//! recompute them to catch inconsistent records. GB/s is a presentation
//! unit only and always means decimal gigabytes (10^9 bytes).

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::env::EnvReport;
use crate::error::{Error, Result};
use crate::stats;

/// Size of one chase node and the unit of bandwidth accounting.
pub const CACHELINE_BYTES: u64 = 64;
pub const DEFAULT_PAGE_BYTES: u64 = 4096;
pub const GIB: u64 = 1 << 30;
pub const MIB: u64 = 1 << 20;
pub const KIB: u64 = 1 << 10;

/// Decimal gigabyte, used for every GB/s figure.
pub const GB: f64 = 1e9;

pub const SCHEMA_NAME: &str = "memprobe";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bytes(pub u64);

impl Bytes {
    pub const fn kib(n: u64) -> Self {
        Bytes(n * KIB)
    }
    pub const fn mib(n: u64) -> Self {
        Bytes(n * MIB)
    }
    pub const fn gib(n: u64) -> Self {
        Bytes(n * GIB)
    }
    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Bytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        if v >= GIB && v % GIB == 0 {
            write!(f, "{}GiB", v / GIB)
        } else if v >= MIB && v % MIB == 0 {
            write!(f, "{}MiB", v / MIB)
        } else if v >= KIB && v % KIB == 0 {
            write!(f, "{}KiB", v / KIB)
        } else {
            write!(f, "{}B", v)
        }
    }
}

impl FromStr for Bytes {
    type Err = Error;

    /// Accepts plain byte counts and binary suffixes: `4096`, `32K`, `32KiB`, `1G`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
        let (digits, suffix) = s.split_at(split);
        let n: u64 = digits
            .parse()
            .map_err(|_| Error::InvalidSpec(format!("bad byte count `{s}`")))?;
        let mult = match suffix.trim().to_ascii_lowercase().as_str() {
            "" | "b" => 1,
            "k" | "kib" | "kb" => KIB,
            "m" | "mib" | "mb" => MIB,
            "g" | "gib" | "gb" => GIB,
            other => return Err(Error::InvalidSpec(format!("unknown size suffix `{other}`"))),
        };
        n.checked_mul(mult)
            .map(Bytes)
            .ok_or_else(|| Error::InvalidSpec(format!("byte count `{s}` overflows")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Nanos(pub u64);

impl Nanos {
    pub const fn from_millis(ms: u64) -> Self {
        Nanos(ms * 1_000_000)
    }
    pub fn get(self) -> u64 {
        self.0
    }
}

impl From<std::time::Duration> for Nanos {
    fn from(d: std::time::Duration) -> Self {
        Nanos(d.as_nanos() as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Dram,
    Nvm,
    File,
}

fn default_device_file() -> PathBuf {
    PathBuf::from("/dev/mem")
}

/// Where a device's bytes come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Backing {
    Anonymous,
    /// A raw physical address range reached through a device file. The
    /// device defaults to `/dev/mem`; a dax character device or an ordinary
    /// file can be substituted on machines without raw access.
    PhysicalRange {
        base_address: Bytes,
        length: Bytes,
        #[serde(default = "default_device_file")]
        device: PathBuf,
    },
    FilePath { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub kind: DeviceKind,
    #[serde(default)]
    pub numa_node: u32,
    pub backing: Backing,
    #[serde(default)]
    pub interleaved: bool,
    #[serde(default)]
    pub description: String,
}

impl DeviceProfile {
    pub fn anonymous(name: impl Into<String>, numa_node: u32) -> Self {
        DeviceProfile {
            name: name.into(),
            kind: DeviceKind::Dram,
            numa_node,
            backing: Backing::Anonymous,
            interleaved: true,
            description: String::new(),
        }
    }

    /// Upper bound on mappable bytes, when the backing imposes one.
    pub fn capacity(&self) -> Option<Bytes> {
        match &self.backing {
            Backing::PhysicalRange { length, .. } => Some(*length),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Backing::PhysicalRange { base_address, length, .. } = &self.backing {
            if length.0 == 0 {
                return Err(Error::InvalidSpec(format!(
                    "profile `{}`: physical range length must be > 0",
                    self.name
                )));
            }
            if base_address.0 % DEFAULT_PAGE_BYTES != 0 {
                return Err(Error::InvalidSpec(format!(
                    "profile `{}`: base address {:#x} is not page aligned",
                    self.name, base_address.0
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    ReadOnly,
    WriteBack,
}

impl AccessMode {
    pub const ALL: [AccessMode; 2] = [AccessMode::ReadOnly, AccessMode::WriteBack];

    /// Short label used in tables and file names.
    pub fn label(self) -> &'static str {
        match self {
            AccessMode::ReadOnly => "RO",
            AccessMode::WriteBack => "WB",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            AccessMode::ReadOnly => "Read-only",
            AccessMode::WriteBack => "Write-back",
        }
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AccessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ro" | "read_only" | "read-only" => Ok(AccessMode::ReadOnly),
            "wb" | "write_back" | "write-back" => Ok(AccessMode::WriteBack),
            _ => Err(Error::InvalidSpec(format!("unknown access mode `{s}`"))),
        }
    }
}

/// Parameters of one latency measurement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChaseSpec {
    pub buffer_bytes: Bytes,
    pub mode: AccessMode,
    /// Random jumps stay inside windows of this size; global random when absent.
    pub window_bytes: Option<Bytes>,
    pub seed: u64,
    pub min_timed_duration: Nanos,
    pub warmup_passes: u32,
    pub runs: u32,
    pub pin_core: u32,
}

impl ChaseSpec {
    pub const DEFAULT_SEED: u64 = 0x6d65_6d70_726f_6265;

    pub fn new(buffer_bytes: Bytes, mode: AccessMode) -> Self {
        ChaseSpec {
            buffer_bytes,
            mode,
            window_bytes: None,
            seed: Self::DEFAULT_SEED,
            min_timed_duration: Nanos::from_millis(200),
            warmup_passes: 1,
            runs: 5,
            pin_core: 0,
        }
    }

    pub fn node_count(&self) -> u64 {
        self.buffer_bytes.0 / CACHELINE_BYTES
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.buffer_bytes.0;
        if b == 0 || b % CACHELINE_BYTES != 0 {
            return Err(Error::InvalidSpec(format!(
                "buffer_bytes {b} must be a positive multiple of {CACHELINE_BYTES}"
            )));
        }
        if let Some(w) = self.window_bytes {
            if w.0 == 0 || w.0 % CACHELINE_BYTES != 0 || w.0 > b {
                return Err(Error::InvalidSpec(format!(
                    "window_bytes {} must be a positive multiple of {CACHELINE_BYTES} and <= buffer_bytes {b}",
                    w.0
                )));
            }
        }
        if self.runs == 0 {
            return Err(Error::InvalidSpec("runs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one latency measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaseResult {
    pub spec: ChaseSpec,
    /// Full traversals timed in every run.
    pub passes_timed: u64,
    pub hops_timed: u64,
    /// Elapsed time of each run.
    pub elapsed: Vec<Nanos>,
    /// Median over runs of `elapsed / hops_timed`.
    pub ns_per_access: f64,
    /// Interquartile range of the per-run ns-per-access values.
    pub dispersion: f64,
    pub checksum: u64,
    /// SHA-256 over the successor offsets, hex encoded.
    pub layout_digest: String,
    pub device: DeviceProfile,
}

impl ChaseResult {
    pub fn per_run_ns(elapsed: &[Nanos], hops: u64) -> Vec<f64> {
        elapsed.iter().map(|e| e.0 as f64 / hops as f64).collect()
    }

    /// Verifies that the derived fields agree with the raw ones.
    pub fn check_accounting(&self) -> Result<()> {
        let nodes = self.spec.node_count();
        if self.hops_timed != nodes * self.passes_timed {
            return Err(Error::Schema(format!(
                "hops_timed {} != node_count {} x passes_timed {}",
                self.hops_timed, nodes, self.passes_timed
            )));
        }
        let per_run = Self::per_run_ns(&self.elapsed, self.hops_timed);
        let expected = stats::median(&per_run)
            .ok_or_else(|| Error::Schema("chase result has no runs".into()))?;
        if expected.to_bits() != self.ns_per_access.to_bits() {
            return Err(Error::Schema(format!(
                "ns_per_access {} != recomputed {}",
                self.ns_per_access, expected
            )));
        }
        Ok(())
    }
}

/// Parameters of one bandwidth measurement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub worker_count: u32,
    pub per_worker_bytes: Bytes,
    pub mode: AccessMode,
    pub pin_cores: Vec<u32>,
    pub passes: u32,
    pub seed: u64,
}

impl StreamSpec {
    pub const DEFAULT_PER_WORKER: Bytes = Bytes::gib(1);
    /// Conservative single-core scan rate used to pick a default pass count.
    const ASSUMED_CORE_BYTES_PER_SEC: u64 = 10_000_000_000;

    /// A spec pinning worker `i` to `cores[i]`.
    pub fn new(cores: &[u32], per_worker_bytes: Bytes, mode: AccessMode) -> Self {
        StreamSpec {
            worker_count: cores.len() as u32,
            per_worker_bytes,
            mode,
            pin_cores: cores.to_vec(),
            passes: Self::default_passes(per_worker_bytes),
            seed: ChaseSpec::DEFAULT_SEED,
        }
    }

    /// Enough passes for each worker to scan for at least a second at the
    /// assumed per-core rate.
    pub fn default_passes(per_worker_bytes: Bytes) -> u32 {
        let b = per_worker_bytes.0.max(1);
        Self::ASSUMED_CORE_BYTES_PER_SEC.div_ceil(b).clamp(1, 1_000_000) as u32
    }

    pub fn total_bytes(&self) -> Bytes {
        Bytes(self.worker_count as u64 * self.per_worker_bytes.0 * self.passes as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_worker_bytes.0 == 0 || self.per_worker_bytes.0 % CACHELINE_BYTES != 0 {
            return Err(Error::InvalidSpec(format!(
                "per_worker_bytes {} must be a positive multiple of {CACHELINE_BYTES}",
                self.per_worker_bytes.0
            )));
        }
        if self.pin_cores.len() != self.worker_count as usize {
            return Err(Error::InvalidSpec(format!(
                "pin_cores has {} entries for {} workers",
                self.pin_cores.len(),
                self.worker_count
            )));
        }
        let mut sorted = self.pin_cores.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSpec("pin_cores contains duplicates".into()));
        }
        if self.passes == 0 {
            return Err(Error::InvalidSpec("passes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one bandwidth measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamResult {
    pub spec: StreamSpec,
    pub total_bytes: Bytes,
    /// Start barrier release to the last worker's completion.
    pub wall_time: Nanos,
    /// Bytes per second, `total_bytes * 1e9 / wall_time`.
    pub bandwidth: f64,
    pub per_worker_time: Vec<Nanos>,
    pub checksum: u64,
    pub device: DeviceProfile,
}

/// Skew above this fraction of wall time marks a run as unbalanced.
pub const SKEW_LIMIT: f64 = 0.2;

impl StreamResult {
    pub fn bandwidth_from(total: Bytes, wall: Nanos) -> f64 {
        total.0 as f64 * 1e9 / wall.0 as f64
    }

    pub fn gb_per_sec(&self) -> f64 {
        self.bandwidth / GB
    }

    /// Spread between the slowest and fastest worker, as a fraction of wall time.
    pub fn skew(&self) -> f64 {
        let max = self.per_worker_time.iter().map(|t| t.0).max().unwrap_or(0);
        let min = self.per_worker_time.iter().map(|t| t.0).min().unwrap_or(0);
        if self.wall_time.0 == 0 {
            return 0.0;
        }
        (max - min) as f64 / self.wall_time.0 as f64
    }

    pub fn is_unbalanced(&self) -> bool {
        self.skew() > SKEW_LIMIT
    }

    pub fn check_accounting(&self) -> Result<()> {
        if self.total_bytes != self.spec.total_bytes() {
            return Err(Error::Schema(format!(
                "total_bytes {} != workers x per_worker_bytes x passes = {}",
                self.total_bytes.0,
                self.spec.total_bytes().0
            )));
        }
        let expected = Self::bandwidth_from(self.total_bytes, self.wall_time);
        if expected.to_bits() != self.bandwidth.to_bits() {
            return Err(Error::Schema(format!(
                "bandwidth {} != recomputed {}",
                self.bandwidth, expected
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub metric: String,
    pub unit: String,
    pub baseline_value: f64,
    pub subject_value: f64,
    /// `subject / baseline * 100`, half-up to one decimal place.
    pub ratio_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub baseline_label: String,
    pub subject_label: String,
    pub rows: Vec<RatioRow>,
}

/// A record type that can be persisted as a versioned document.
pub trait Record: Serialize + DeserializeOwned {
    const KIND: &'static str;

    /// Units of the record's top-level quantitative fields.
    fn units() -> &'static [(&'static str, &'static str)];
}

impl Record for ChaseResult {
    const KIND: &'static str = "chase_result";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[
            ("spec.buffer_bytes", "bytes"),
            ("spec.window_bytes", "bytes"),
            ("spec.min_timed_duration", "ns"),
            ("elapsed", "ns"),
            ("ns_per_access", "ns"),
            ("dispersion", "ns"),
        ]
    }
}

impl Record for StreamResult {
    const KIND: &'static str = "stream_result";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[
            ("spec.per_worker_bytes", "bytes"),
            ("total_bytes", "bytes"),
            ("wall_time", "ns"),
            ("bandwidth", "bytes/s"),
            ("per_worker_time", "ns"),
        ]
    }
}

impl Record for RatioTable {
    const KIND: &'static str = "ratio_table";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[("rows.ratio_percent", "percent")]
    }
}

impl Record for DeviceProfile {
    const KIND: &'static str = "device_profile";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[("backing.base_address", "bytes"), ("backing.length", "bytes")]
    }
}

/// Envelope written to disk around every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub schema: String,
    pub version: u32,
    pub kind: String,
    pub units: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvReport>,
    pub record: T,
}

impl<T: Record> Document<T> {
    pub fn new(record: T, env: Option<EnvReport>) -> Self {
        Document {
            schema: SCHEMA_NAME.to_string(),
            version: SCHEMA_VERSION,
            kind: T::KIND.to_string(),
            units: T::units()
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            env,
            record,
        }
    }
}

/// Renders a record as a canonical pretty-printed JSON document.
pub fn serialize<T: Record>(record: &T, env: Option<&EnvReport>) -> String
where
    T: Clone,
{
    let doc = Document::new(record.clone(), env.cloned());
    // Records hold only strings, integers, finite floats and maps with string keys.
    serde_json::to_string_pretty(&doc).expect("record serialization is total")
}

pub fn deserialize_document<T: Record>(text: &str) -> Result<Document<T>> {
    let doc: Document<T> = serde_json::from_str(text)?;
    if doc.schema != SCHEMA_NAME {
        return Err(Error::Schema(format!("unexpected schema `{}`", doc.schema)));
    }
    if doc.version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            doc.version
        )));
    }
    if doc.kind != T::KIND {
        return Err(Error::Schema(format!(
            "document kind `{}` is not `{}`",
            doc.kind,
            T::KIND
        )));
    }
    Ok(doc)
}

pub fn deserialize<T: Record>(text: &str) -> Result<T> {
    Ok(deserialize_document(text)?.record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_parsing() {
        assert_eq!("32K".parse::<Bytes>().unwrap(), Bytes::kib(32));
        assert_eq!("1GiB".parse::<Bytes>().unwrap(), Bytes::gib(1));
        assert_eq!("4096".parse::<Bytes>().unwrap(), Bytes(4096));
        assert!("12Q".parse::<Bytes>().is_err());
        assert_eq!(Bytes::mib(256).to_string(), "256MiB");
        assert_eq!(Bytes(100).to_string(), "100B");
    }

    #[test]
    fn chase_spec_validation() {
        let mut s = ChaseSpec::new(Bytes::kib(16), AccessMode::ReadOnly);
        s.validate().unwrap();
        s.buffer_bytes = Bytes(100);
        assert!(s.validate().is_err());
        s.buffer_bytes = Bytes::kib(16);
        s.window_bytes = Bytes::kib(32).into();
        assert!(s.validate().is_err());
        s.window_bytes = Some(Bytes(96));
        assert!(s.validate().is_err());
        s.window_bytes = Some(Bytes::kib(4));
        s.validate().unwrap();
        s.runs = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn stream_spec_validation() {
        let mut s = StreamSpec::new(&[0, 1], Bytes::mib(1), AccessMode::ReadOnly);
        s.validate().unwrap();
        s.pin_cores = vec![1, 1];
        assert!(s.validate().is_err());
        s.pin_cores = vec![0];
        assert!(s.validate().is_err());
        assert_eq!(StreamSpec::default_passes(Bytes::gib(1)), 10);
    }

    #[test]
    fn profile_validation() {
        let mut p = DeviceProfile::anonymous("dram", 0);
        p.validate().unwrap();
        p.backing = Backing::PhysicalRange {
            base_address: Bytes(4097),
            length: Bytes::gib(1),
            device: default_device_file(),
        };
        assert!(p.validate().is_err());
        p.backing = Backing::PhysicalRange {
            base_address: Bytes(0x1_0000_0000),
            length: Bytes(0),
            device: default_device_file(),
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn synthetic_chase_accounting() {
        let mut spec = ChaseSpec::new(Bytes(64 * 2_560_000), AccessMode::ReadOnly);
        spec.runs = 1;
        let r = ChaseResult {
            spec,
            passes_timed: 1,
            hops_timed: 2_560_000,
            elapsed: vec![Nanos(1_000_000_000)],
            ns_per_access: 1e9 / 2_560_000.0,
            dispersion: 0.0,
            checksum: 0,
            layout_digest: String::new(),
            device: DeviceProfile::anonymous("dram", 0),
        };
        r.check_accounting().unwrap();
        assert_eq!(stats::round_half_up_1dp(r.ns_per_access), 390.6);
    }

    #[test]
    fn synthetic_stream_accounting() {
        let spec = StreamSpec {
            worker_count: 1,
            per_worker_bytes: Bytes(1_000_000_000),
            mode: AccessMode::ReadOnly,
            pin_cores: vec![0],
            passes: 1,
            seed: 1,
        };
        let total = spec.total_bytes();
        let wall = Nanos(250_000_000);
        let r = StreamResult {
            spec,
            total_bytes: total,
            wall_time: wall,
            bandwidth: StreamResult::bandwidth_from(total, wall),
            per_worker_time: vec![wall],
            checksum: 0,
            device: DeviceProfile::anonymous("dram", 0),
        };
        r.check_accounting().unwrap();
        assert_eq!(r.gb_per_sec(), 4.0);
        assert!(!r.is_unbalanced());
    }

    #[test]
    fn chase_document_carries_value_and_unit() {
        let mut spec = ChaseSpec::new(Bytes::gib(1), AccessMode::ReadOnly);
        spec.runs = 1;
        let r = ChaseResult {
            spec,
            passes_timed: 1,
            hops_timed: GIB / 64,
            elapsed: vec![Nanos(0)],
            ns_per_access: 374.1,
            dispersion: 0.0,
            checksum: 7,
            layout_digest: "00".into(),
            device: DeviceProfile::anonymous("dcpmm", 0),
        };
        let text = serialize(&r, None);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["record"]["ns_per_access"], 374.1);
        assert_eq!(v["units"]["ns_per_access"], "ns");
        assert_eq!(v["kind"], "chase_result");
        assert_eq!(deserialize::<ChaseResult>(&text).unwrap(), r);
        assert!(deserialize::<StreamResult>(&text).is_err());
    }
}
