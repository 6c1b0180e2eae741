//! Resident-set accounting lives in its own test binary so no other test
//! maps memory concurrently.

use memprobe::backend::{map_region, resident_set_bytes};
use memprobe::{Bytes, DeviceProfile};

const MIB: u64 = 1 << 20;

#[test]
fn releasing_regions_returns_resident_memory() {
    let device = DeviceProfile::anonymous("dram", 0);
    let baseline = resident_set_bytes().unwrap();
    let mut regions: Vec<_> = (0..4)
        .map(|_| map_region(&device, Bytes::mib(64), Bytes(4096)).unwrap())
        .collect();
    let grown = resident_set_bytes().unwrap();
    assert!(grown >= baseline + 250 * MIB, "rss did not grow: {baseline} -> {grown}");
    for r in &mut regions {
        r.release().unwrap();
    }
    let after = resident_set_bytes().unwrap();
    assert!(after < baseline + 8 * MIB, "rss {after} vs baseline {baseline}");
}
