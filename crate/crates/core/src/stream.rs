//! Multi-worker sequential-scan bandwidth benchmark.
//!
//! Each worker owns a private buffer and is pinned to its own core. All
//! workers wait on a shared start barrier; wall time runs from the barrier
//! release to the completion of the last worker. Read mode consumes all
//! eight words of every cacheline, write mode stores exactly one word per
//! cacheline so each line is dirtied and later written back on eviction.

use std::hint::black_box;
use std::ptr;
use std::sync::Barrier;
use std::time::Instant;

use crate::backend::{map_region, pin_current_to_core, regions_disjoint, MappedRegion};
use crate::env::Introspector;
use crate::error::{Error, Result};
use crate::model::{AccessMode, Bytes, DeviceProfile, Nanos, StreamResult, StreamSpec};

const WORDS_PER_LINE: usize = 8;

#[derive(Debug)]
pub struct WorkerAssignment {
    pub worker_id: usize,
    pub region: MappedRegion,
    pub core: u32,
    pub mode: AccessMode,
}

/// Cores belonging to `node`, falling back to all online CPUs when the host
/// exposes no NUMA topology.
pub fn cores_in_node(node: u32) -> Vec<u32> {
    let intro = Introspector::default();
    let nodes = intro.numa_nodes();
    if nodes.is_empty() {
        return intro.online_cpus().unwrap_or_default();
    }
    nodes
        .into_iter()
        .find(|n| n.node == node)
        .map(|n| n.cores)
        .unwrap_or_default()
}

fn scan_read(base: *const u64, words: usize, passes: u32) -> u64 {
    let mut acc = [0u64; WORDS_PER_LINE];
    for _ in 0..passes {
        // SAFETY: base points to `words` initialized u64s owned by this worker.
        let buf = black_box(unsafe { std::slice::from_raw_parts(base, words) });
        for line in buf.chunks_exact(WORDS_PER_LINE) {
            for (a, w) in acc.iter_mut().zip(line) {
                *a = a.wrapping_add(*w);
            }
        }
    }
    acc.iter().fold(0, |x, &y| x ^ y)
}

fn scan_write(base: *mut u64, words: usize, passes: u32, seed: u64) -> u64 {
    let mut value = seed;
    for _ in 0..passes {
        let mut i = 0;
        while i < words {
            // SAFETY: i < words; the buffer is owned by this worker.
            unsafe { ptr::write_volatile(base.add(i), value) };
            value = value.wrapping_add(1);
            i += WORDS_PER_LINE;
        }
    }
    value
}

struct WorkerOutcome {
    start: Instant,
    end: Instant,
    checksum: u64,
}

fn run_worker(a: &mut WorkerAssignment, barrier: &Barrier, passes: u32, seed: u64) -> Result<WorkerOutcome> {
    let pinned = pin_current_to_core(a.core);
    // Every worker must reach the barrier, even when pinning failed.
    barrier.wait();
    pinned?;
    let words = (a.region.len() as usize) / std::mem::size_of::<u64>();
    let start = Instant::now();
    let checksum = match a.mode {
        AccessMode::ReadOnly => scan_read(a.region.as_ptr() as *const u64, words, passes),
        AccessMode::WriteBack => scan_write(
            a.region.as_mut_ptr() as *mut u64,
            words,
            passes,
            seed ^ a.worker_id as u64,
        ),
    };
    let end = Instant::now();
    Ok(WorkerOutcome { start, end, checksum: black_box(checksum) })
}

/// Runs one bandwidth measurement with `spec.worker_count` pinned workers
/// scanning private buffers mapped from `device`.
pub fn run_stream(spec: &StreamSpec, device: &DeviceProfile, page_bytes: Bytes) -> Result<StreamResult> {
    if spec.worker_count == 0 {
        return Err(Error::Topology("at least one worker is required".into()));
    }
    spec.validate()?;
    let domain = cores_in_node(device.numa_node);
    if spec.worker_count as usize > domain.len() {
        return Err(Error::Topology(format!(
            "{} workers requested but NUMA node {} has {} cores",
            spec.worker_count,
            device.numa_node,
            domain.len()
        )));
    }
    if let Some(c) = spec.pin_cores.iter().find(|c| !domain.contains(c)) {
        return Err(Error::Topology(format!(
            "core {c} is not in NUMA node {}",
            device.numa_node
        )));
    }

    let total_mapped = spec.per_worker_bytes.0 * spec.worker_count as u64;
    if let Some(avail) = Introspector::default().mem_available() {
        if matches!(device.backing, crate::model::Backing::Anonymous) && total_mapped > avail.0 {
            return Err(Error::Exhausted(format!(
                "{} workers x {} exceeds {} available",
                spec.worker_count,
                spec.per_worker_bytes,
                Bytes(avail.0)
            )));
        }
    }
    if let Some(cap) = device.capacity() {
        if total_mapped > cap.0 {
            return Err(Error::Exhausted(format!(
                "{} workers x {} exceeds the {} device",
                spec.worker_count, spec.per_worker_bytes, cap
            )));
        }
    }

    // Physical ranges are carved into consecutive, non-overlapping slices.
    let mut assignments = Vec::with_capacity(spec.worker_count as usize);
    for (worker_id, &core) in spec.pin_cores.iter().enumerate() {
        let profile = worker_profile(device, worker_id as u64, spec.per_worker_bytes);
        let region = map_region(&profile, spec.per_worker_bytes, page_bytes)?;
        assignments.push(WorkerAssignment { worker_id, region, core, mode: spec.mode });
    }
    if !regions_disjoint(assignments.iter().map(|a| &a.region)) {
        return Err(Error::State("worker buffers overlap".into()));
    }

    let barrier = Barrier::new(assignments.len() + 1);
    let passes = spec.passes;
    let seed = spec.seed;
    let (released_at, outcomes) = std::thread::scope(|s| {
        let handles: Vec<_> = assignments
            .iter_mut()
            .map(|a| {
                let barrier = &barrier;
                s.spawn(move || run_worker(a, barrier, passes, seed))
            })
            .collect();
        barrier.wait();
        let released_at = Instant::now();
        let outcomes: Vec<Result<WorkerOutcome>> = handles
            .into_iter()
            .map(|h| h.join().expect("stream worker panicked"))
            .collect();
        (released_at, outcomes)
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    for a in &mut assignments {
        a.region.release()?;
    }

    // On an oversubscribed host a worker can observe the release before the
    // coordinator does, so the window opens at the earliest observation.
    let opened = outcomes.iter().map(|o| o.start).chain([released_at]).min().expect("non-empty");
    let last_end = outcomes.iter().map(|o| o.end).max().expect("at least one worker");
    let wall_time = Nanos::from(last_end.saturating_duration_since(opened)).max(Nanos(1));
    let per_worker_time = outcomes
        .iter()
        .map(|o| Nanos::from(o.end.saturating_duration_since(o.start)))
        .collect();
    let checksum = outcomes.iter().fold(0u64, |acc, o| acc ^ o.checksum);
    let total_bytes = spec.total_bytes();

    Ok(StreamResult {
        spec: spec.clone(),
        total_bytes,
        wall_time,
        bandwidth: StreamResult::bandwidth_from(total_bytes, wall_time),
        per_worker_time,
        checksum,
        device: device.clone(),
    })
}

fn worker_profile(device: &DeviceProfile, worker: u64, per_worker: Bytes) -> DeviceProfile {
    use crate::model::Backing;
    let mut profile = device.clone();
    match &mut profile.backing {
        Backing::PhysicalRange { base_address, length, .. } => {
            base_address.0 += worker * per_worker.0;
            *length = per_worker;
        }
        Backing::FilePath { path } => {
            let mut name = path.as_os_str().to_owned();
            name.push(format!(".w{worker}"));
            *path = name.into();
        }
        Backing::Anonymous => {}
    }
    profile
}
