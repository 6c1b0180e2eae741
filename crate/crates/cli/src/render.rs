//! Plain-text views of records for `--format text`.

use std::fmt::Write;

use memprobe::env::EnvReport;
use memprobe::{Bytes, ChaseResult, DeviceProfile, StreamResult};

fn opt_bytes(b: Option<Bytes>) -> String {
    b.map(|b| b.to_string()).unwrap_or_else(|| "unknown".into())
}

fn device_line(d: &DeviceProfile) -> String {
    let kind = format!("{:?}", d.kind).to_ascii_lowercase();
    let il = if d.interleaved { "interleaved" } else { "non-interleaved" };
    format!("{} ({kind}, node {}, {il})", d.name, d.numa_node)
}

pub fn env(r: &EnvReport) -> String {
    let mut out = String::new();
    let smt = match r.smt_enabled {
        Some(true) => "on",
        Some(false) => "off",
        None => "unknown",
    };
    let _ = writeln!(out, "smt              {smt}");
    let _ = writeln!(out, "thp              {:?}", r.transparent_huge_pages);
    let _ = writeln!(out, "aslr             {:?}", r.aslr);
    let _ = writeln!(out, "governor         {}", r.governor);
    let _ = writeln!(out, "page size        {}", r.page_bytes);
    let _ = writeln!(
        out,
        "caches           L1d {}, L2 {}, LLC {}",
        opt_bytes(r.cache_sizes.l1d),
        opt_bytes(r.cache_sizes.l2),
        opt_bytes(r.cache_sizes.llc)
    );
    for n in &r.numa_nodes {
        let _ = writeln!(
            out,
            "node {:<11} {} cores {:?}, memory {}",
            n.node,
            n.cores.len(),
            n.cores,
            opt_bytes(n.memory_bytes)
        );
    }
    for w in &r.warnings {
        let _ = writeln!(out, "warning          {w}");
    }
    out
}

pub fn chase(r: &ChaseResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "device         {}", device_line(&r.device));
    let _ = writeln!(out, "mode           {}", r.spec.mode.long_name());
    let _ = writeln!(out, "buffer         {}", r.spec.buffer_bytes);
    if let Some(w) = r.spec.window_bytes {
        let _ = writeln!(out, "window         {w}");
    }
    let _ = writeln!(out, "runs           {} x {} hops", r.elapsed.len(), r.hops_timed);
    let _ = writeln!(out, "ns_per_access  {:.2}", r.ns_per_access);
    let _ = writeln!(out, "iqr            {:.2} ns", r.dispersion);
    let _ = writeln!(out, "layout         {}", r.layout_digest);
    out
}

pub fn stream(r: &StreamResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "device      {}", device_line(&r.device));
    let _ = writeln!(out, "mode        {}", r.spec.mode.long_name());
    let _ = writeln!(out, "workers     {} on cores {:?}", r.spec.worker_count, r.spec.pin_cores);
    let _ = writeln!(
        out,
        "scanned     {} ({} per worker, {} passes)",
        r.total_bytes, r.spec.per_worker_bytes, r.spec.passes
    );
    let _ = writeln!(out, "wall        {:.3} ms", r.wall_time.0 as f64 / 1e6);
    let _ = writeln!(out, "bandwidth   {:.2} GB/s", r.gb_per_sec());
    let _ = write!(out, "skew        {:.3}", r.skew());
    if r.is_unbalanced() {
        out.push_str(" (unbalanced)");
    }
    out.push('\n');
    out
}
