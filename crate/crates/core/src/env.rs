//! Inspection of the platform settings that make runs comparable: SMT,
//! transparent huge pages, address-space randomization, NUMA topology and
//! cache sizes. Nothing here writes to system controls.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bytes, DEFAULT_PAGE_BYTES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThpSetting {
    Always,
    Madvise,
    Never,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AslrSetting {
    Off,
    Partial,
    Full,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumaNode {
    pub node: u32,
    pub cores: Vec<u32>,
    pub memory_bytes: Option<Bytes>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSizes {
    pub l1d: Option<Bytes>,
    pub l2: Option<Bytes>,
    pub llc: Option<Bytes>,
}

/// Snapshot of the platform state. `None` / `unknown` marks facts that could
/// not be read; each one also leaves a warning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvReport {
    pub smt_enabled: Option<bool>,
    pub transparent_huge_pages: ThpSetting,
    pub aslr: AslrSetting,
    pub numa_nodes: Vec<NumaNode>,
    pub cache_sizes: CacheSizes,
    pub page_bytes: Bytes,
    pub governor: String,
    pub warnings: Vec<String>,
}

impl EnvReport {
    pub fn node(&self, node: u32) -> Option<&NumaNode> {
        self.numa_nodes.iter().find(|n| n.node == node)
    }

    pub fn cores_in_node(&self, node: u32) -> Vec<u32> {
        self.node(node).map(|n| n.cores.clone()).unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Strict,
    #[default]
    Advisory,
}

/// Reads platform facts from a sysfs/procfs pair. Tests point it at fake trees.
#[derive(Clone, Debug)]
pub struct Introspector {
    sys: PathBuf,
    proc: PathBuf,
}

impl Default for Introspector {
    fn default() -> Self {
        Introspector::new("/sys", "/proc")
    }
}

fn read_trimmed(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok().map(|s| s.trim().to_string())
}

/// Parses sysfs cpu lists such as `0-3,8,10-11`.
pub fn parse_cpu_list(text: &str) -> Option<Vec<u32>> {
    let mut cpus = Vec::new();
    for part in text.trim().split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u32, u32) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
                if a > b {
                    return None;
                }
                cpus.extend(a..=b);
            }
            None => cpus.push(part.trim().parse().ok()?),
        }
    }
    Some(cpus)
}

/// Parses sysfs cache sizes such as `48K` or `105M`.
fn parse_cache_size(text: &str) -> Option<Bytes> {
    let t = text.trim();
    let (num, mult) = match t.chars().last()? {
        'K' => (&t[..t.len() - 1], 1024),
        'M' => (&t[..t.len() - 1], 1024 * 1024),
        'G' => (&t[..t.len() - 1], 1024 * 1024 * 1024),
        _ => (t, 1),
    };
    num.parse::<u64>().ok().map(|n| Bytes(n * mult))
}

fn parse_meminfo_kb(text: &str, key: &str) -> Option<Bytes> {
    text.lines().find_map(|line| {
        let rest = line.split_once(key)?.1.trim_start_matches(':').trim();
        let kb: u64 = rest.split_whitespace().next()?.parse().ok()?;
        Some(Bytes(kb * 1024))
    })
}

impl Introspector {
    pub fn new(sys: impl Into<PathBuf>, proc: impl Into<PathBuf>) -> Self {
        Introspector { sys: sys.into(), proc: proc.into() }
    }

    fn cpu_dir(&self) -> PathBuf {
        self.sys.join("devices/system/cpu")
    }

    pub fn online_cpus(&self) -> Option<Vec<u32>> {
        read_trimmed(&self.cpu_dir().join("online")).and_then(|s| parse_cpu_list(&s))
    }

    fn smt(&self) -> Option<bool> {
        let smt = self.cpu_dir().join("smt");
        if let Some(active) = read_trimmed(&smt.join("active")) {
            return Some(active == "1");
        }
        match read_trimmed(&smt.join("control")).as_deref() {
            Some("on") => return Some(true),
            Some("off" | "forceoff" | "notsupported" | "notimplemented") => return Some(false),
            _ => {}
        }
        let siblings =
            read_trimmed(&self.cpu_dir().join("cpu0/topology/thread_siblings_list"))?;
        parse_cpu_list(&siblings).map(|s| s.len() > 1)
    }

    fn thp(&self) -> ThpSetting {
        let Some(text) = read_trimmed(&self.sys.join("kernel/mm/transparent_hugepage/enabled"))
        else {
            return ThpSetting::Unknown;
        };
        let selected = text
            .split_whitespace()
            .find(|w| w.starts_with('[') && w.ends_with(']'))
            .map(|w| w.trim_matches(|c| c == '[' || c == ']'));
        match selected {
            Some("always") => ThpSetting::Always,
            Some("madvise") => ThpSetting::Madvise,
            Some("never") => ThpSetting::Never,
            _ => ThpSetting::Unknown,
        }
    }

    fn aslr(&self) -> AslrSetting {
        match read_trimmed(&self.proc.join("sys/kernel/randomize_va_space")).as_deref() {
            Some("0") => AslrSetting::Off,
            Some("1") => AslrSetting::Partial,
            Some("2") => AslrSetting::Full,
            _ => AslrSetting::Unknown,
        }
    }

    fn caches(&self) -> CacheSizes {
        let mut sizes = CacheSizes::default();
        let mut llc_level = 0;
        let Ok(entries) = fs::read_dir(self.cpu_dir().join("cpu0/cache")) else {
            return sizes;
        };
        for entry in entries.flatten() {
            let dir = entry.path();
            if !dir.file_name().is_some_and(|n| n.to_string_lossy().starts_with("index")) {
                continue;
            }
            let level: u32 = match read_trimmed(&dir.join("level")).and_then(|l| l.parse().ok()) {
                Some(l) => l,
                None => continue,
            };
            let kind = read_trimmed(&dir.join("type")).unwrap_or_default();
            let Some(size) = read_trimmed(&dir.join("size")).and_then(|s| parse_cache_size(&s))
            else {
                continue;
            };
            match (level, kind.as_str()) {
                (1, "Data") => sizes.l1d = Some(size),
                (2, "Data" | "Unified") => sizes.l2 = Some(size),
                _ => {}
            }
            if kind != "Instruction" && level > llc_level {
                llc_level = level;
                sizes.llc = Some(size);
            }
        }
        sizes
    }

    pub fn numa_nodes(&self) -> Vec<NumaNode> {
        let node_dir = self.sys.join("devices/system/node");
        let mut nodes = Vec::new();
        if let Ok(entries) = fs::read_dir(&node_dir) {
            for entry in entries.flatten() {
                let name = entry.file_name().to_string_lossy().to_string();
                let Some(id) = name.strip_prefix("node").and_then(|n| n.parse::<u32>().ok())
                else {
                    continue;
                };
                let cores = read_trimmed(&entry.path().join("cpulist"))
                    .and_then(|s| parse_cpu_list(&s))
                    .unwrap_or_default();
                let memory_bytes = fs::read_to_string(entry.path().join("meminfo"))
                    .ok()
                    .and_then(|t| parse_meminfo_kb(&t, "MemTotal"));
                nodes.push(NumaNode { node: id, cores, memory_bytes });
            }
        }
        nodes.sort_by_key(|n| n.node);
        nodes
    }

    pub fn mem_available(&self) -> Option<Bytes> {
        let text = fs::read_to_string(self.proc.join("meminfo")).ok()?;
        parse_meminfo_kb(&text, "MemAvailable")
    }

    pub fn inspect(&self) -> EnvReport {
        let mut warnings = Vec::new();

        let smt_enabled = self.smt();
        match smt_enabled {
            Some(true) => warnings
                .push("SMT active: reference configuration disables hyper-threading".into()),
            None => warnings.push("SMT state unknown".into()),
            Some(false) => {}
        }

        let transparent_huge_pages = self.thp();
        match transparent_huge_pages {
            ThpSetting::Never => {}
            ThpSetting::Unknown => warnings.push("transparent huge page setting unknown".into()),
            other => warnings.push(format!(
                "transparent huge pages set to {other:?}: reference configuration disables THP \
                 (benchmark regions still request 4 KiB pages)"
            )),
        }

        let aslr = self.aslr();
        match aslr {
            AslrSetting::Off => {}
            AslrSetting::Unknown => warnings.push("ASLR setting unknown".into()),
            other => warnings.push(format!(
                "ASLR is {other:?}: reference configuration disables address randomization"
            )),
        }

        let mut numa_nodes = self.numa_nodes();
        if numa_nodes.is_empty() {
            warnings.push("no NUMA topology found; assuming a single node 0".into());
            let cores = self.online_cpus().unwrap_or_default();
            let memory_bytes = fs::read_to_string(self.proc.join("meminfo"))
                .ok()
                .and_then(|t| parse_meminfo_kb(&t, "MemTotal"));
            numa_nodes.push(NumaNode { node: 0, cores, memory_bytes });
        }

        let cache_sizes = self.caches();
        if cache_sizes.llc.is_none() {
            warnings.push("last-level cache size unknown".into());
        }

        let governor = read_trimmed(&self.cpu_dir().join("cpu0/cpufreq/scaling_governor"))
            .unwrap_or_else(|| "unknown".to_string());

        EnvReport {
            smt_enabled,
            transparent_huge_pages,
            aslr,
            numa_nodes,
            cache_sizes,
            page_bytes: Bytes(system_page_bytes()),
            governor,
            warnings,
        }
    }
}

pub fn system_page_bytes() -> u64 {
    // SAFETY: sysconf has no memory-safety preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as u64
    } else {
        DEFAULT_PAGE_BYTES
    }
}

/// Snapshot of the live host.
pub fn inspect_environment() -> EnvReport {
    Introspector::default().inspect()
}

/// Applies a policy to a report. Returns the warnings to annotate the run
/// with, or a [`Error::Policy`] listing every violated condition.
pub fn enforce(policy: Policy, report: &EnvReport) -> Result<Vec<String>> {
    let mut violations = Vec::new();
    match report.smt_enabled {
        Some(false) => {}
        Some(true) => violations.push("SMT is enabled".to_string()),
        None => violations.push("SMT state unknown".to_string()),
    }
    if report.transparent_huge_pages != ThpSetting::Never {
        violations.push(format!(
            "THP is {:?}, expected never",
            report.transparent_huge_pages
        ));
    }
    if report.aslr != AslrSetting::Off {
        violations.push(format!("ASLR is {:?}, expected off", report.aslr));
    }
    match policy {
        Policy::Strict if !violations.is_empty() => Err(Error::Policy { violations }),
        _ => Ok(report.warnings.clone()),
    }
}
