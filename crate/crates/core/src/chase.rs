//! Pointer-chase latency benchmark.
//!
//! The buffer is split into 64-byte nodes. The first 8 bytes of every node
//! hold the byte offset of its successor, and the successor mapping forms a
//! single random cycle, so each load address depends on the value returned
//! by the previous load and neither the prefetcher nor out-of-order
//! execution can overlap misses. In write-back mode every visited node also
//! gets a store to bytes `[8, 16)` before the link is followed, leaving the
//! line modified so that its eviction costs a write to memory.
//!
//! Windowed mode restricts the random jumps to consecutive windows (e.g.
//! 256 KiB): the nodes of one window are visited in random order, then the
//! walk moves on to the next window, and the last window links back to the
//! first node. This trades away most TLB misses and lets the TLB penalty
//! of the global layout be quantified.

use std::hint::black_box;
use std::ptr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backend::{map_region, pin_current_to_core, MappedRegion};
use crate::error::{Error, Result};
use crate::model::{
    AccessMode, Bytes, ChaseResult, ChaseSpec, DeviceProfile, Nanos, CACHELINE_BYTES,
};
use crate::stats;

/// Successor links laid out in the leading `node_count * 64` bytes of a region.
#[derive(Debug)]
pub struct ChaseLayout<'r> {
    region: &'r mut MappedRegion,
    node_count: u64,
    window_bytes: Option<Bytes>,
}

/// Shuffles `succ` (initially the identity) into a uniformly random cyclic
/// permutation: following `i -> succ[i]` from any node visits every node.
fn sattolo(succ: &mut [u32], rng: &mut ChaCha8Rng) {
    for i in (1..succ.len()).rev() {
        let j = rng.gen_range(0..i);
        succ.swap(i, j);
    }
}

impl<'r> ChaseLayout<'r> {
    pub fn node_count(&self) -> u64 {
        self.node_count
    }

    pub fn buffer_bytes(&self) -> Bytes {
        Bytes(self.node_count * CACHELINE_BYTES)
    }

    pub fn window_bytes(&self) -> Option<Bytes> {
        self.window_bytes
    }

    pub fn region(&self) -> &MappedRegion {
        self.region
    }

    /// Index of the node that follows node `i`.
    pub fn successor(&self, i: u64) -> u64 {
        assert!(i < self.node_count);
        // SAFETY: i < node_count, and node_count * 64 <= region length.
        let off = unsafe {
            ptr::read_volatile(self.region.as_ptr().add((i * CACHELINE_BYTES) as usize) as *const u64)
        };
        off / CACHELINE_BYTES
    }

    pub fn successors(&self) -> Vec<u64> {
        (0..self.node_count).map(|i| self.successor(i)).collect()
    }

    /// SHA-256 over the successor offsets in node order, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for i in 0..self.node_count {
            hasher.update((self.successor(i) * CACHELINE_BYTES).to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    fn write_link(&mut self, node: u64, successor: u64) {
        // SAFETY: node < node_count, inside the mapped region.
        unsafe {
            ptr::write_volatile(
                self.region.as_mut_ptr().add((node * CACHELINE_BYTES) as usize) as *mut u64,
                successor * CACHELINE_BYTES,
            );
        }
    }
}

/// Builds a random single-cycle chase over the first `buffer_bytes` of
/// `region`. The same seed always yields the same layout.
pub fn build_layout<'r>(
    region: &'r mut MappedRegion,
    buffer_bytes: Bytes,
    seed: u64,
    window_bytes: Option<Bytes>,
) -> Result<ChaseLayout<'r>> {
    if region.is_released() {
        return Err(Error::State("cannot build a layout on a released region".into()));
    }
    let b = buffer_bytes.0;
    if b < CACHELINE_BYTES || b % CACHELINE_BYTES != 0 {
        return Err(Error::Size(format!(
            "buffer of {b} bytes is not a positive multiple of {CACHELINE_BYTES}"
        )));
    }
    if b > region.len() {
        return Err(Error::Size(format!(
            "buffer of {b} bytes exceeds the {}-byte region",
            region.len()
        )));
    }
    let node_count = b / CACHELINE_BYTES;
    if node_count > u32::MAX as u64 {
        return Err(Error::Size(format!("{node_count} nodes exceed the supported maximum")));
    }
    let window_nodes = match window_bytes {
        None => node_count,
        Some(w) => {
            if w.0 == 0 || w.0 % CACHELINE_BYTES != 0 || w.0 > b {
                return Err(Error::Size(format!(
                    "window of {} bytes must be a positive multiple of {CACHELINE_BYTES} no larger than the buffer",
                    w.0
                )));
            }
            w.0 / CACHELINE_BYTES
        }
    };

    let mut layout = ChaseLayout { region, node_count, window_bytes };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut succ: Vec<u32> = Vec::with_capacity(window_nodes as usize);
    let mut start = 0u64;
    while start < node_count {
        let len = window_nodes.min(node_count - start);
        let next_window = if start + len == node_count { 0 } else { start + len };
        succ.clear();
        succ.extend(0..len as u32);
        sattolo(&mut succ, &mut rng);
        // The link that would close the window's cycle goes to the next window.
        for (local, &target) in succ.iter().enumerate() {
            let to = if target == 0 { next_window } else { start + target as u64 };
            layout.write_link(start + local as u64, to);
        }
        start += len;
    }
    Ok(layout)
}

/// Clock resolution of the monotonic clock backing [`Instant`].
fn monotonic_resolution_ns() -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: ts is a valid out-pointer.
    let rc = unsafe { libc::clock_getres(libc::CLOCK_MONOTONIC, &mut ts) };
    if rc != 0 {
        return u64::MAX;
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// Walks `passes` full cycles starting at node 0 with dependent loads.
/// Returns the order-sensitive checksum of the final pass.
///
/// # Safety
/// `base` must point to a valid chase layout of `nodes` nodes.
#[inline(never)]
unsafe fn traverse_read_only(base: *const u8, nodes: u64, passes: u64) -> u64 {
    let mut off = 0usize;
    let mut last = 0u64;
    for _ in 0..passes {
        let mut sum = 0u64;
        for _ in 0..nodes {
            off = ptr::read_volatile(base.add(off) as *const u64) as usize;
            sum = sum.rotate_left(5) ^ off as u64;
        }
        last = sum;
    }
    black_box(off);
    last
}

/// Like [`traverse_read_only`], but stores the running hop counter into
/// bytes `[8, 16)` of each node before loading its link.
///
/// # Safety
/// `base` must point to a valid, writable chase layout of `nodes` nodes.
#[inline(never)]
unsafe fn traverse_write_back(base: *mut u8, nodes: u64, passes: u64, hop_base: u64) -> u64 {
    let mut off = 0usize;
    let mut last = 0u64;
    let mut hop = hop_base;
    for _ in 0..passes {
        let mut sum = 0u64;
        for _ in 0..nodes {
            let node = base.add(off);
            ptr::write_volatile(node.add(8) as *mut u64, hop);
            hop = hop.wrapping_add(1);
            off = ptr::read_volatile(node as *const u64) as usize;
            sum = sum.rotate_left(5) ^ off as u64;
        }
        last = sum;
    }
    black_box(off);
    last
}

struct Walker {
    base: *mut u8,
    nodes: u64,
    mode: AccessMode,
    hops_done: u64,
}

impl Walker {
    fn walk(&mut self, passes: u64) -> u64 {
        // SAFETY: base/nodes come from a ChaseLayout that is borrowed mutably
        // for the whole measurement.
        let sum = unsafe {
            match self.mode {
                AccessMode::ReadOnly => traverse_read_only(self.base, self.nodes, passes),
                AccessMode::WriteBack => {
                    traverse_write_back(self.base, self.nodes, passes, self.hops_done)
                }
            }
        };
        self.hops_done = self.hops_done.wrapping_add(self.nodes * passes);
        sum
    }

    fn timed(&mut self, passes: u64) -> (Nanos, u64) {
        let start = Instant::now();
        let sum = self.walk(passes);
        (Nanos::from(start.elapsed()), sum)
    }
}

// Moves the raw node pointer onto the measurement thread.
struct SendPtr(*mut u8);
unsafe impl Send for SendPtr {}

/// Runs the latency measurement described by `spec` on `layout`, on a
/// dedicated thread pinned to `spec.pin_core`.
///
/// After `warmup_passes` untimed traversals, the number of passes per run
/// is calibrated by doubling until one block takes at least
/// `min_timed_duration`; every run then times that many passes.
pub fn run_chase(
    layout: &mut ChaseLayout<'_>,
    spec: &ChaseSpec,
    device: &DeviceProfile,
) -> Result<ChaseResult> {
    spec.validate()?;
    if spec.buffer_bytes != layout.buffer_bytes() || spec.window_bytes != layout.window_bytes {
        return Err(Error::InvalidSpec(format!(
            "spec ({} / window {:?}) does not match layout ({} / window {:?})",
            spec.buffer_bytes,
            spec.window_bytes,
            layout.buffer_bytes(),
            layout.window_bytes
        )));
    }
    let resolution = monotonic_resolution_ns();
    if resolution.saturating_mul(100) > spec.min_timed_duration.0 {
        return Err(Error::Clock {
            resolution_ns: resolution,
            min_timed_ns: spec.min_timed_duration.0,
        });
    }

    let nodes = layout.node_count;
    let base = SendPtr(layout.region.as_mut_ptr());
    let mode = spec.mode;
    let min = spec.min_timed_duration;
    let warmup = spec.warmup_passes as u64;
    let runs = spec.runs;
    let core = spec.pin_core;

    let measured: Result<(u64, Vec<Nanos>, u64)> = std::thread::scope(|s| {
        s.spawn(move || {
            let base = base;
            pin_current_to_core(core)?;
            let mut walker = Walker { base: base.0, nodes, mode, hops_done: 0 };
            if warmup > 0 {
                walker.walk(warmup);
            }
            let mut passes = 1u64;
            loop {
                let (t, _) = walker.timed(passes);
                if t >= min {
                    break;
                }
                let scale = if t.0 == 0 { 16 } else { (min.0 / t.0 + 1).min(16) };
                passes *= scale.max(2);
            }
            let mut elapsed = Vec::with_capacity(runs as usize);
            let mut checksum = 0;
            for _ in 0..runs {
                let (t, sum) = walker.timed(passes);
                elapsed.push(t);
                checksum = sum;
            }
            Ok((passes, elapsed, checksum))
        })
        .join()
        .expect("chase thread panicked")
    });
    let (passes_timed, elapsed, checksum) = measured?;

    let hops_timed = nodes * passes_timed;
    let per_run = ChaseResult::per_run_ns(&elapsed, hops_timed);
    let ns_per_access = stats::median(&per_run).expect("runs >= 1");
    let dispersion = stats::iqr(&per_run).expect("runs >= 1");

    Ok(ChaseResult {
        spec: spec.clone(),
        passes_timed,
        hops_timed,
        elapsed,
        ns_per_access,
        dispersion,
        checksum,
        layout_digest: layout.digest(),
        device: device.clone(),
    })
}

/// Maps a fresh region for `spec`, builds the layout, measures, and releases
/// the region again.
pub fn measure_latency(device: &DeviceProfile, spec: &ChaseSpec, page_bytes: Bytes) -> Result<ChaseResult> {
    spec.validate()?;
    let mut region = map_region(device, spec.buffer_bytes, page_bytes)?;
    let result = {
        let mut layout = build_layout(&mut region, spec.buffer_bytes, spec.seed, spec.window_bytes)?;
        run_chase(&mut layout, spec, device)
    };
    region.release()?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::current_affinity;
    use crate::model::KIB;

    fn region(bytes: u64) -> MappedRegion {
        map_region(&DeviceProfile::anonymous("dram", 0), Bytes(bytes), Bytes(4096)).unwrap()
    }

    fn walk_visits_all(succ: &[u64]) -> bool {
        let n = succ.len();
        let mut seen = vec![false; n];
        let mut cur = 0usize;
        for _ in 0..n {
            if seen[cur] {
                return false;
            }
            seen[cur] = true;
            cur = succ[cur] as usize;
        }
        cur == 0
    }

    #[test]
    fn single_node_loops_to_itself() {
        let mut r = region(4096);
        let layout = build_layout(&mut r, Bytes(64), 1, None).unwrap();
        assert_eq!(layout.successors(), vec![0]);
    }

    #[test]
    fn four_nodes_form_one_cycle() {
        let mut r = region(4096);
        for seed in 0..50 {
            let layout = build_layout(&mut r, Bytes(256), seed, None).unwrap();
            let succ = layout.successors();
            assert!(walk_visits_all(&succ), "seed {seed}: {succ:?}");
            assert!(succ.iter().enumerate().all(|(i, &s)| s != i as u64));
        }
    }

    #[test]
    fn full_window_equals_global() {
        let mut r = region(256 * KIB);
        let global = build_layout(&mut r, Bytes::kib(256), 9, None).unwrap().successors();
        let windowed = build_layout(&mut r, Bytes::kib(256), 9, Some(Bytes::kib(256)))
            .unwrap()
            .successors();
        assert_eq!(global, windowed);
    }

    #[test]
    fn windows_are_visited_in_order() {
        let mut r = region(64 * KIB);
        // 1000 nodes, windows of 64 nodes; the last window is partial.
        let layout = build_layout(&mut r, Bytes(64 * 1000), 3, Some(Bytes(64 * 64))).unwrap();
        let succ = layout.successors();
        assert!(walk_visits_all(&succ));
        let mut cur = 0u64;
        let mut windows_seen = vec![0u64];
        for _ in 0..1000 {
            let w = cur / 64;
            if *windows_seen.last().unwrap() != w {
                assert_eq!(w, windows_seen.last().unwrap() + 1);
                windows_seen.push(w);
            }
            cur = succ[cur as usize];
        }
        assert_eq!(windows_seen.len(), 16);
    }

    #[test]
    fn layout_errors() {
        let mut r = region(4096);
        assert!(matches!(build_layout(&mut r, Bytes(0), 0, None), Err(Error::Size(_))));
        assert!(matches!(build_layout(&mut r, Bytes(100), 0, None), Err(Error::Size(_))));
        assert!(matches!(build_layout(&mut r, Bytes(8192), 0, None), Err(Error::Size(_))));
        assert!(matches!(
            build_layout(&mut r, Bytes(4096), 0, Some(Bytes(8192))),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn same_seed_same_layout_different_seed_differs() {
        let mut r = region(64 * KIB);
        let a = build_layout(&mut r, Bytes::kib(64), 42, None).unwrap().digest();
        let b = build_layout(&mut r, Bytes::kib(64), 42, None).unwrap().digest();
        let c = build_layout(&mut r, Bytes::kib(64), 43, None).unwrap().digest();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn quick_spec(bytes: u64, mode: AccessMode) -> ChaseSpec {
        let mut spec = ChaseSpec::new(Bytes(bytes), mode);
        spec.min_timed_duration = Nanos::from_millis(2);
        spec.runs = 3;
        spec.pin_core = current_affinity().unwrap()[0];
        spec
    }

    #[test]
    fn run_reports_consistent_accounting() {
        let device = DeviceProfile::anonymous("dram", 0);
        for mode in AccessMode::ALL {
            let spec = quick_spec(32 * KIB, mode);
            let r = measure_latency(&device, &spec, Bytes(4096)).unwrap();
            r.check_accounting().unwrap();
            assert_eq!(r.elapsed.len(), 3);
            assert!(r.ns_per_access > 0.0);
            assert!(r.elapsed.iter().all(|e| e.0 > 0));
        }
    }

    #[test]
    fn write_back_stores_hop_counter() {
        let device = DeviceProfile::anonymous("dram", 0);
        let mut spec = quick_spec(4096, AccessMode::WriteBack);
        spec.warmup_passes = 0;
        let mut r = region(4096);
        let mut layout = build_layout(&mut r, Bytes(4096), spec.seed, None).unwrap();
        run_chase(&mut layout, &spec, &device).unwrap();
        // Node 0 is always the first hop of a pass, so its counter is a multiple of 64.
        let slot = unsafe { ptr::read(layout.region().as_ptr().add(8) as *const u64) };
        assert!(slot > 0);
        assert_eq!(slot % 64, 0);
        // The links themselves are untouched.
        assert!(walk_visits_all(&layout.successors()));
    }

    #[test]
    fn checksum_is_deterministic() {
        let device = DeviceProfile::anonymous("dram", 0);
        let spec = quick_spec(16 * KIB, AccessMode::ReadOnly);
        let a = measure_latency(&device, &spec, Bytes(4096)).unwrap();
        let b = measure_latency(&device, &spec, Bytes(4096)).unwrap();
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.layout_digest, b.layout_digest);
        let mut other = spec.clone();
        other.seed ^= 1;
        let c = measure_latency(&device, &other, Bytes(4096)).unwrap();
        assert_ne!(a.checksum, c.checksum);
    }

    #[test]
    fn tiny_min_duration_is_clock_error() {
        let device = DeviceProfile::anonymous("dram", 0);
        let mut spec = quick_spec(4096, AccessMode::ReadOnly);
        spec.min_timed_duration = Nanos(0);
        assert!(matches!(
            measure_latency(&device, &spec, Bytes(4096)),
            Err(Error::Clock { .. })
        ));
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        let device = DeviceProfile::anonymous("dram", 0);
        let mut r = region(8192);
        let mut layout = build_layout(&mut r, Bytes(4096), 1, None).unwrap();
        let spec = quick_spec(8192, AccessMode::ReadOnly);
        assert!(matches!(run_chase(&mut layout, &spec, &device), Err(Error::InvalidSpec(_))));
    }
}
