//! Run directories.
//!
//! ```text
//! <run>/
//!   env.json                     environment snapshot at run start
//!   plan-<kind>.json             one per sweep kind
//!   raw/<kind>/<mode>-<point>.json   one document per measurement
//!   index.jsonl                  append-only results index
//!   report-<kind>.json           assembled sweep report
//!   rendered/                    text tables, structured summaries, plot data
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EnvReport;
use crate::error::Result;
use crate::model::{deserialize, serialize, AccessMode, Record};
use crate::sweep::{SeriesEntry, SweepKind, SweepPlan, SweepReport};

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub plan_hash: String,
    pub kind: SweepKind,
    pub mode: AccessMode,
    pub point: u64,
    /// Path of the raw document, relative to the run directory.
    pub path: PathBuf,
}

/// A persisted measurement point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub plan_hash: String,
    pub mode: AccessMode,
    pub entry: SeriesEntry,
}

impl Record for PointRecord {
    const KIND: &'static str = "sweep_point";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[
            ("entry.point", "bytes (latency) or workers (bandwidth)"),
            ("entry.started_ns", "ns since Unix epoch"),
            ("entry.finished_ns", "ns since Unix epoch"),
        ]
    }
}

impl Record for EnvReport {
    const KIND: &'static str = "env_report";
    fn units() -> &'static [(&'static str, &'static str)] {
        &[
            ("numa_nodes.memory_bytes", "bytes"),
            ("cache_sizes", "bytes"),
            ("page_bytes", "bytes"),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct RunStore {
    dir: PathBuf,
}

pub const INDEX_FILE: &str = "index.jsonl";
pub const ENV_FILE: &str = "env.json";
pub const RENDERED_DIR: &str = "rendered";

impl RunStore {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("raw"))?;
        fs::create_dir_all(dir.join(RENDERED_DIR))?;
        Ok(RunStore { dir })
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("run directory {} does not exist", dir.display()),
            )
            .into());
        }
        Ok(RunStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_atomic(&self, rel: &Path, contents: &str) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, contents)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn write_env(&self, env: &EnvReport) -> Result<()> {
        self.write_atomic(Path::new(ENV_FILE), &serialize(env, None))
    }

    pub fn read_env(&self) -> Result<EnvReport> {
        deserialize(&fs::read_to_string(self.dir.join(ENV_FILE))?)
    }

    pub fn write_plan(&self, plan: &SweepPlan) -> Result<()> {
        let rel = format!("plan-{}.json", plan.kind.slug());
        self.write_atomic(Path::new(&rel), &serialize(plan, None))
    }

    pub fn append_entry(
        &self,
        plan_hash: &str,
        kind: SweepKind,
        mode: AccessMode,
        entry: &SeriesEntry,
        env: &EnvReport,
    ) -> Result<()> {
        let rel = PathBuf::from("raw")
            .join(kind.slug())
            .join(format!("{}-{}.json", mode.label().to_ascii_lowercase(), entry.point));
        let record = PointRecord { plan_hash: plan_hash.to_string(), mode, entry: entry.clone() };
        self.write_atomic(&rel, &serialize(&record, Some(env)))?;
        let line = serde_json::to_string(&IndexEntry {
            plan_hash: plan_hash.to_string(),
            kind,
            mode,
            point: entry.point,
            path: rel,
        })?;
        let mut index = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(INDEX_FILE))?;
        writeln!(index, "{line}")?;
        index.sync_data()?;
        Ok(())
    }

    pub fn index(&self) -> Result<Vec<IndexEntry>> {
        let path = self.dir.join(INDEX_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(path)?;
        // A crash can leave a torn final line; it is skipped.
        Ok(text
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect())
    }

    /// Points already recorded for a plan.
    pub fn load_entries(&self, plan_hash: &str) -> Result<Vec<(AccessMode, SeriesEntry)>> {
        let mut out: Vec<(AccessMode, SeriesEntry)> = Vec::new();
        for item in self.index()?.into_iter().filter(|e| e.plan_hash == plan_hash) {
            let Ok(text) = fs::read_to_string(self.dir.join(&item.path)) else {
                continue;
            };
            let record: PointRecord = deserialize(&text)?;
            if !out.iter().any(|(m, e)| *m == record.mode && e.point == record.entry.point) {
                out.push((record.mode, record.entry));
            }
        }
        Ok(out)
    }

    pub fn write_report(&self, report: &SweepReport) -> Result<()> {
        let rel = format!("report-{}.json", report.plan.kind.slug());
        self.write_atomic(Path::new(&rel), &serialize(report, None))
    }

    pub fn load_reports(&self) -> Result<Vec<SweepReport>> {
        let mut reports = Vec::new();
        for kind in [SweepKind::LatencyVsBuffer, SweepKind::BandwidthVsWorkers] {
            let path = self.dir.join(format!("report-{}.json", kind.slug()));
            if path.exists() {
                reports.push(deserialize(&fs::read_to_string(path)?)?);
            }
        }
        Ok(reports)
    }

    pub fn write_rendered(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let rel = Path::new(RENDERED_DIR).join(name);
        self.write_atomic(&rel, contents)?;
        Ok(self.dir.join(rel))
    }
}
