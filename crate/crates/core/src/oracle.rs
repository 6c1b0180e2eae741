//! Brute-force checkers used by the test suites.
//!
//! Nothing in here shares code with the paths it checks: the walkers follow
//! links one by one with a visited set, the accounting helpers recompute
//! derived fields from raw ones, and [`ToyCacheModel`] is a tiny
//! set-associative LRU cache with an optional next-line prefetcher, used to
//! show that a random single-cycle chase defeats prefetching while a
//! sequential scan does not.

use crate::chase::ChaseLayout;
use crate::model::{ChaseResult, StreamResult};

/// Anything that maps a node index to its successor.
pub trait Successors {
    fn node_count(&self) -> u64;
    fn successor(&self, node: u64) -> u64;
}

impl Successors for ChaseLayout<'_> {
    fn node_count(&self) -> u64 {
        ChaseLayout::node_count(self)
    }
    fn successor(&self, node: u64) -> u64 {
        ChaseLayout::successor(self, node)
    }
}

impl Successors for [u64] {
    fn node_count(&self) -> u64 {
        self.len() as u64
    }
    fn successor(&self, node: u64) -> u64 {
        self[node as usize]
    }
}

impl Successors for Vec<u64> {
    fn node_count(&self) -> u64 {
        self.len() as u64
    }
    fn successor(&self, node: u64) -> u64 {
        self[node as usize]
    }
}

/// True iff walking from node 0 for `node_count` steps visits every node
/// exactly once and lands back on node 0.
pub fn walk_and_verify<S: Successors + ?Sized>(layout: &S) -> bool {
    let n = layout.node_count();
    if n == 0 {
        return false;
    }
    let mut visited = vec![false; n as usize];
    let mut cur = 0u64;
    for _ in 0..n {
        if cur >= n || visited[cur as usize] {
            return false;
        }
        visited[cur as usize] = true;
        cur = layout.successor(cur);
    }
    cur == 0
}

/// For a windowed layout: the walk from node 0 covers every window's nodes
/// contiguously, windows in ascending order, each node exactly once.
pub fn verify_window_coverage<S: Successors + ?Sized>(layout: &S, window_nodes: u64) -> bool {
    let n = layout.node_count();
    if window_nodes == 0 || !walk_and_verify(layout) {
        return false;
    }
    let mut cur = 0u64;
    let mut window = 0u64;
    let mut seen_in_window = 0u64;
    for _ in 0..n {
        let w = cur / window_nodes;
        if w != window {
            let expected = window_nodes.min(n - window * window_nodes);
            if w != window + 1 || seen_in_window != expected {
                return false;
            }
            window = w;
            seen_in_window = 0;
        }
        seen_in_window += 1;
        cur = layout.successor(cur);
    }
    seen_in_window == window_nodes.min(n - window * window_nodes)
}

/// Byte addresses touched by `passes` traversals of `layout` from node 0.
pub fn chase_trace<S: Successors + ?Sized>(layout: &S, passes: u64) -> Vec<u64> {
    let n = layout.node_count();
    let mut trace = Vec::with_capacity((n * passes) as usize);
    let mut cur = 0u64;
    for _ in 0..n * passes {
        trace.push(cur * 64);
        cur = layout.successor(cur);
    }
    trace
}

/// Byte addresses of `passes` sequential scans over `lines` cachelines.
pub fn sequential_trace(lines: u64, passes: u64) -> Vec<u64> {
    (0..passes).flat_map(|_| (0..lines).map(|l| l * 64)).collect()
}

/// Median of per-run ns-per-hop values, recomputed from raw fields.
pub fn reference_ns_per_access(result: &ChaseResult) -> f64 {
    let hops = result.hops_timed as f64;
    let mut v: Vec<f64> = result.elapsed.iter().map(|e| e.0 as f64 / hops).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn reference_bandwidth(result: &StreamResult) -> f64 {
    let total = result.spec.worker_count as u64
        * result.spec.per_worker_bytes.0
        * result.spec.passes as u64;
    total as f64 * 1e9 / result.wall_time.0 as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prefetch {
    None,
    /// On a demand miss, also fetch the following line.
    NextLine,
}

#[derive(Clone, Copy, Debug)]
struct Way {
    tag: u64,
    last_used: u64,
}

#[derive(Clone, Debug)]
pub struct ToyCacheModel {
    pub line_bytes: u64,
    pub capacity_lines: u64,
    pub associativity: u64,
    pub prefetch: Prefetch,
    sets: Vec<Vec<Way>>,
    clock: u64,
    accesses: u64,
    misses: u64,
}

impl ToyCacheModel {
    pub fn new(capacity_lines: u64, associativity: u64, prefetch: Prefetch) -> Self {
        assert!(associativity >= 1 && capacity_lines >= associativity);
        assert_eq!(capacity_lines % associativity, 0, "capacity must be a whole number of sets");
        let num_sets = capacity_lines / associativity;
        ToyCacheModel {
            line_bytes: 64,
            capacity_lines,
            associativity,
            prefetch,
            sets: vec![Vec::with_capacity(associativity as usize); num_sets as usize],
            clock: 0,
            accesses: 0,
            misses: 0,
        }
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    /// Clears the counters but keeps the cache contents.
    pub fn reset_counters(&mut self) {
        self.accesses = 0;
        self.misses = 0;
    }

    /// Looks `line` up; on a miss installs it, evicting the LRU way.
    /// Returns whether it was a hit.
    fn touch(&mut self, line: u64) -> bool {
        self.clock += 1;
        let num_sets = self.sets.len() as u64;
        let set = &mut self.sets[(line % num_sets) as usize];
        let tag = line / num_sets;
        if let Some(way) = set.iter_mut().find(|w| w.tag == tag) {
            way.last_used = self.clock;
            return true;
        }
        let way = Way { tag, last_used: self.clock };
        if (set.len() as u64) < self.associativity {
            set.push(way);
        } else {
            let lru = set
                .iter_mut()
                .min_by_key(|w| w.last_used)
                .expect("associativity >= 1");
            *lru = way;
        }
        false
    }

    pub fn access(&mut self, addr: u64) -> bool {
        let line = addr / self.line_bytes;
        self.accesses += 1;
        let hit = self.touch(line);
        if !hit {
            self.misses += 1;
            if self.prefetch == Prefetch::NextLine {
                self.touch(line + 1);
            }
        }
        hit
    }
}

/// Runs `trace` through `model` and returns the miss ratio of this trace
/// alone (counters are reset first, cache contents are kept).
pub fn simulate_misses(trace: &[u64], model: &mut ToyCacheModel) -> f64 {
    assert!(!trace.is_empty(), "trace must not be empty");
    model.reset_counters();
    for &addr in trace {
        model.access(addr);
    }
    model.misses as f64 / model.accesses as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::map_region;
    use crate::chase::build_layout;
    use crate::model::{Bytes, DeviceProfile};

    #[test]
    fn single_node_cycle() {
        assert!(walk_and_verify(&vec![0u64]));
    }

    #[test]
    fn broken_cycle_is_detected() {
        let mut region =
            map_region(&DeviceProfile::anonymous("dram", 0), Bytes(64 * 1024), Bytes(4096)).unwrap();
        let layout = build_layout(&mut region, Bytes(64 * 1024), 11, None).unwrap();
        assert!(walk_and_verify(&layout));
        let mut succ = layout.successors();
        succ.swap(10, 500);
        assert!(!walk_and_verify(&succ));
    }

    #[test]
    fn out_of_range_link_fails() {
        assert!(!walk_and_verify(&vec![1u64, 7]));
        assert!(!walk_and_verify(&Vec::<u64>::new()));
    }

    #[test]
    fn window_coverage_rejects_interleaving() {
        // 0 -> 2 -> 1 -> 3 -> 0 is one cycle but jumps between windows of 2.
        assert!(walk_and_verify(&vec![2u64, 3, 1, 0]));
        assert!(!verify_window_coverage(&vec![2u64, 3, 1, 0], 2));
        // 0 -> 1 -> 3 -> 2 -> 0 stays in window 0, then window 1.
        assert!(verify_window_coverage(&vec![1u64, 3, 0, 2], 2));
    }

    #[test]
    fn sequential_with_prefetch_hides_alternate_misses() {
        let mut m = ToyCacheModel::new(1024, 8, Prefetch::NextLine);
        let ratio = simulate_misses(&sequential_trace(2048, 1), &mut m);
        assert!(ratio < 0.55, "{ratio}");
        let mut m = ToyCacheModel::new(1024, 8, Prefetch::None);
        assert_eq!(simulate_misses(&sequential_trace(2048, 1), &mut m), 1.0);
    }

    #[test]
    fn random_cycle_defeats_prefetch() {
        let capacity = 1024u64;
        let nodes = 8 * capacity;
        let mut region =
            map_region(&DeviceProfile::anonymous("dram", 0), Bytes(nodes * 64), Bytes(4096)).unwrap();
        let layout = build_layout(&mut region, Bytes(nodes * 64), 5, None).unwrap();
        let mut m = ToyCacheModel::new(capacity, 8, Prefetch::NextLine);
        let ratio = simulate_misses(&chase_trace(&layout, 2), &mut m);
        assert!(ratio > 0.9, "{ratio}");
    }

    #[test]
    fn resident_trace_hits_on_second_pass() {
        let mut m = ToyCacheModel::new(256, 4, Prefetch::None);
        let trace = sequential_trace(128, 1);
        assert_eq!(simulate_misses(&trace, &mut m), 1.0);
        assert_eq!(simulate_misses(&trace, &mut m), 0.0);
    }

    #[test]
    fn direct_mapped_conflicts() {
        let mut m = ToyCacheModel::new(4, 1, Prefetch::None);
        // Lines 0 and 4 share set 0 and evict each other.
        let trace = [0, 256, 0, 256];
        assert_eq!(simulate_misses(&trace, &mut m), 1.0);
    }

    #[test]
    fn model_is_deterministic() {
        let trace: Vec<u64> = (0..5000u64).map(|i| (i * 7919 % 3001) * 64).collect();
        let mut a = ToyCacheModel::new(512, 4, Prefetch::NextLine);
        let mut b = ToyCacheModel::new(512, 4, Prefetch::NextLine);
        simulate_misses(&trace, &mut a);
        simulate_misses(&trace, &mut b);
        assert_eq!(a.misses(), b.misses());
    }
}
