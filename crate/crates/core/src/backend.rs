//! Mapping, pre-faulting and pinning of benchmark memory.
//!
//! Three backings are supported: anonymous memory bound to a NUMA node, a
//! raw physical range reached through a device file (`/dev/mem` or a dax
//! device), and an ordinary file. Every region is pre-faulted before it is
//! handed out, so no measurement pays for first-touch page faults.

use std::fs::OpenOptions;
use std::os::fd::AsRawFd;
use std::os::unix::fs::OpenOptionsExt;
use std::ptr::{self, NonNull};

use crate::env::{system_page_bytes, Introspector};
use crate::error::{Error, Result};
use crate::model::{Backing, Bytes, DeviceProfile, MIB};

const MPOL_BIND: libc::c_int = 2;
const HUGE_2M: u64 = 2 * MIB;

/// A mapped, pre-faulted buffer. Unmapped on [`MappedRegion::release`] or drop.
#[derive(Debug)]
pub struct MappedRegion {
    base: NonNull<u8>,
    length: u64,
    page_bytes: u64,
    numa_node: u32,
    source: Backing,
    released: bool,
}

// The region owns its mapping exclusively; moving it to another thread moves
// that ownership.
unsafe impl Send for MappedRegion {}

impl MappedRegion {
    pub fn base_addr(&self) -> usize {
        self.base.as_ptr() as usize
    }

    pub fn len(&self) -> u64 {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn page_bytes(&self) -> u64 {
        self.page_bytes
    }

    pub fn page_count(&self) -> u64 {
        self.length / self.page_bytes
    }

    pub fn numa_node(&self) -> u32 {
        self.numa_node
    }

    pub fn source(&self) -> &Backing {
        &self.source
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.base.as_ptr()
    }

    pub fn as_mut_ptr(&mut self) -> *mut u8 {
        self.base.as_ptr()
    }

    /// `[start, end)` virtual address interval.
    pub fn interval(&self) -> (usize, usize) {
        (self.base_addr(), self.base_addr() + self.length as usize)
    }

    /// Number of pages currently resident according to `mincore`.
    pub fn resident_pages(&self) -> Result<u64> {
        self.check_live()?;
        let sys_page = system_page_bytes();
        let n = self.length.div_ceil(sys_page) as usize;
        let mut vec = vec![0u8; n];
        // SAFETY: base/length describe a live mapping; vec holds one byte per page.
        let rc = unsafe {
            libc::mincore(self.base.as_ptr().cast(), self.length as usize, vec.as_mut_ptr())
        };
        if rc != 0 {
            return Err(std::io::Error::last_os_error().into());
        }
        let resident = vec.iter().filter(|b| *b & 1 == 1).count() as u64;
        Ok(resident * sys_page / self.page_bytes)
    }

    /// NUMA node of `samples` evenly spaced pages, as reported by `move_pages`.
    /// Negative entries are errno values for pages the kernel could not place.
    pub fn sample_page_nodes(&self, samples: usize) -> Result<Vec<i32>> {
        self.check_live()?;
        let pages = self.page_count().max(1) as usize;
        let samples = samples.clamp(1, pages);
        let stride = pages / samples;
        let mut addrs: Vec<*mut libc::c_void> = (0..samples)
            .map(|i| {
                // SAFETY: i * stride < pages, so the offset stays inside the mapping.
                unsafe { self.base.as_ptr().add(i * stride * self.page_bytes as usize).cast() }
            })
            .collect();
        let mut status = vec![0i32; samples];
        // SAFETY: addrs and status have `samples` entries; null nodes means query only.
        let rc = unsafe {
            libc::syscall(
                libc::SYS_move_pages,
                0,
                samples as libc::c_ulong,
                addrs.as_mut_ptr(),
                ptr::null::<libc::c_int>(),
                status.as_mut_ptr(),
                0,
            )
        };
        if rc != 0 {
            return Err(std::io::Error::last_os_error().into());
        }
        Ok(status)
    }

    pub fn release(&mut self) -> Result<()> {
        if self.released {
            return Err(Error::State("region already released".into()));
        }
        // SAFETY: the mapping is live and owned by this handle.
        let rc = unsafe { libc::munmap(self.base.as_ptr().cast(), self.length as usize) };
        if rc != 0 {
            return Err(std::io::Error::last_os_error().into());
        }
        self.released = true;
        Ok(())
    }

    fn check_live(&self) -> Result<()> {
        if self.released {
            Err(Error::State("region has been released".into()))
        } else {
            Ok(())
        }
    }
}

impl Drop for MappedRegion {
    fn drop(&mut self) {
        if !self.released {
            // SAFETY: the mapping is live and owned by this handle.
            unsafe { libc::munmap(self.base.as_ptr().cast(), self.length as usize) };
        }
    }
}

/// True if no two regions share an address.
pub fn regions_disjoint<'a>(regions: impl IntoIterator<Item = &'a MappedRegion>) -> bool {
    let mut intervals: Vec<_> = regions.into_iter().map(MappedRegion::interval).collect();
    intervals.sort_unstable();
    intervals.windows(2).all(|w| w[0].1 <= w[1].0)
}

fn bind_to_node(base: *mut u8, length: usize, node: u32) -> Result<()> {
    let bits = libc::c_ulong::BITS as usize;
    let mut mask = vec![0 as libc::c_ulong; node as usize / bits + 1];
    mask[node as usize / bits] |= 1 << (node as usize % bits);
    // SAFETY: base/length describe a fresh mapping; mask covers maxnode bits.
    let rc = unsafe {
        libc::syscall(
            libc::SYS_mbind,
            base,
            length,
            MPOL_BIND,
            mask.as_ptr(),
            (mask.len() * bits + 1) as libc::c_ulong,
            0 as libc::c_uint,
        )
    };
    if rc != 0 {
        return Err(Error::Exhausted(format!(
            "binding to NUMA node {node} failed: {}",
            std::io::Error::last_os_error()
        )));
    }
    Ok(())
}

/// Touches every page with one store. Fresh anonymous memory gets a zero
/// store; other backings have the existing byte written back so file and
/// device contents survive.
fn prefault(base: *mut u8, length: u64, page_bytes: u64, preserve: bool) {
    let mut off = 0u64;
    while off < length {
        // SAFETY: off < length, inside the mapping.
        unsafe {
            let p = base.add(off as usize);
            let v = if preserve { ptr::read_volatile(p) } else { 0 };
            ptr::write_volatile(p, v);
        }
        off += page_bytes;
    }
}

fn mmap_err(what: &str) -> Error {
    let err = std::io::Error::last_os_error();
    Error::Exhausted(format!("{what}: {err}"))
}

/// Maps `length` bytes (rounded up to whole pages) from `profile`'s backing,
/// binds anonymous memory to the profile's NUMA node and pre-faults it.
///
/// `page_bytes` is 4096 by default; 2 MiB requests explicit huge pages for
/// anonymous backings.
pub fn map_region(profile: &DeviceProfile, length: Bytes, page_bytes: Bytes) -> Result<MappedRegion> {
    profile.validate()?;
    let sys_page = system_page_bytes();
    let page = page_bytes.0;
    if !page.is_power_of_two() || page < sys_page {
        return Err(Error::InvalidSpec(format!(
            "page size {page} must be a power of two >= {sys_page}"
        )));
    }
    if page != sys_page && page != HUGE_2M {
        return Err(Error::InvalidSpec(format!("unsupported page size {page}")));
    }
    if length.0 == 0 {
        return Err(Error::InvalidSpec("region length must be > 0".into()));
    }
    let len = length.0.div_ceil(page) * page;

    let intro = Introspector::default();
    let nodes = intro.numa_nodes();
    if !nodes.is_empty() && !nodes.iter().any(|n| n.node == profile.numa_node) {
        return Err(Error::Topology(format!(
            "NUMA node {} is not present on this host",
            profile.numa_node
        )));
    }

    let (base, preserve) = match &profile.backing {
        Backing::Anonymous => {
            if let Some(avail) = intro.mem_available() {
                if len > avail.0 {
                    return Err(Error::Exhausted(format!(
                        "{} requested, {} available",
                        Bytes(len),
                        Bytes(avail.0)
                    )));
                }
            }
            let mut flags = libc::MAP_PRIVATE | libc::MAP_ANONYMOUS;
            if page == HUGE_2M {
                flags |= libc::MAP_HUGETLB | libc::MAP_HUGE_2MB;
            }
            // SAFETY: anonymous mapping with no address hint.
            let p = unsafe {
                libc::mmap(
                    ptr::null_mut(),
                    len as usize,
                    libc::PROT_READ | libc::PROT_WRITE,
                    flags,
                    -1,
                    0,
                )
            };
            if p == libc::MAP_FAILED {
                return Err(mmap_err("anonymous mmap failed"));
            }
            let p = p.cast::<u8>();
            if page != HUGE_2M {
                // SAFETY: p/len is the mapping created above. Best effort: kernels
                // without THP reject the advice, which is harmless.
                unsafe { libc::madvise(p.cast(), len as usize, libc::MADV_NOHUGEPAGE) };
            }
            if !nodes.is_empty() {
                if let Err(e) = bind_to_node(p, len as usize, profile.numa_node) {
                    // SAFETY: undo the mapping created above.
                    unsafe { libc::munmap(p.cast(), len as usize) };
                    return Err(e);
                }
            }
            (p, false)
        }
        Backing::PhysicalRange { base_address, length: range_len, device } => {
            if len > range_len.0 {
                return Err(Error::Range(format!(
                    "{} requested from a {} physical range",
                    Bytes(len),
                    *range_len
                )));
            }
            let file = OpenOptions::new()
                .read(true)
                .write(true)
                .custom_flags(libc::O_SYNC)
                .open(device)
                .map_err(|source| Error::Privilege { path: device.clone(), source })?;
            // SAFETY: shared mapping of an open device at a page-aligned offset.
            let p = unsafe {
                libc::mmap(
                    ptr::null_mut(),
                    len as usize,
                    libc::PROT_READ | libc::PROT_WRITE,
                    libc::MAP_SHARED,
                    file.as_raw_fd(),
                    base_address.0 as libc::off_t,
                )
            };
            if p == libc::MAP_FAILED {
                let err = std::io::Error::last_os_error();
                if err.raw_os_error() == Some(libc::EPERM) || err.raw_os_error() == Some(libc::EACCES) {
                    return Err(Error::Privilege { path: device.clone(), source: err });
                }
                return Err(Error::Exhausted(format!("device mmap failed: {err}")));
            }
            (p.cast::<u8>(), true)
        }
        Backing::FilePath { path } => {
            let file = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(false)
                .open(path)
                .map_err(|source| Error::Privilege { path: path.clone(), source })?;
            if file.metadata()?.len() < len {
                file.set_len(len)?;
            }
            // SAFETY: shared mapping of a file at least `len` bytes long.
            let p = unsafe {
                libc::mmap(
                    ptr::null_mut(),
                    len as usize,
                    libc::PROT_READ | libc::PROT_WRITE,
                    libc::MAP_SHARED,
                    file.as_raw_fd(),
                    0,
                )
            };
            if p == libc::MAP_FAILED {
                return Err(mmap_err("file mmap failed"));
            }
            (p.cast::<u8>(), true)
        }
    };

    prefault(base, len, page, preserve);

    let region = MappedRegion {
        base: NonNull::new(base).expect("mmap returned null"),
        length: len,
        page_bytes: page,
        numa_node: profile.numa_node,
        source: profile.backing.clone(),
        released: false,
    };

    if matches!(profile.backing, Backing::Anonymous) {
        let resident = region.resident_pages()?;
        if resident < region.page_count() {
            return Err(Error::Exhausted(format!(
                "only {resident} of {} pages resident after pre-faulting",
                region.page_count()
            )));
        }
    }
    Ok(region)
}

const CPU_SETSIZE: u32 = libc::CPU_SETSIZE as u32;

/// CPUs the calling thread may run on.
pub fn current_affinity() -> Result<Vec<u32>> {
    // SAFETY: cpu_set_t is plain data; zeroed is a valid empty set.
    let mut set: libc::cpu_set_t = unsafe { std::mem::zeroed() };
    // SAFETY: set is a valid cpu_set_t of the size passed.
    let rc = unsafe { libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) };
    if rc != 0 {
        return Err(Error::Affinity(std::io::Error::last_os_error().to_string()));
    }
    // SAFETY: CPU_ISSET reads within the set for indices < CPU_SETSIZE.
    Ok((0..CPU_SETSIZE)
        .filter(|&c| unsafe { libc::CPU_ISSET(c as usize, &set) })
        .collect())
}

/// Restricts the calling thread to `core` and confirms it by reading the
/// effective affinity back.
pub fn pin_current_to_core(core: u32) -> Result<u32> {
    if core >= CPU_SETSIZE {
        return Err(Error::Affinity(format!("core {core} is out of range")));
    }
    // SAFETY: zeroed cpu_set_t is an empty set; CPU_SET index is in range.
    let mut set: libc::cpu_set_t = unsafe { std::mem::zeroed() };
    unsafe { libc::CPU_SET(core as usize, &mut set) };
    // SAFETY: set is a valid cpu_set_t of the size passed.
    let rc = unsafe { libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) };
    if rc != 0 {
        return Err(Error::Affinity(format!(
            "core {core}: {}",
            std::io::Error::last_os_error()
        )));
    }
    let effective = current_affinity()?;
    if effective != [core] {
        return Err(Error::Affinity(format!(
            "requested core {core}, effective affinity {effective:?}"
        )));
    }
    Ok(core)
}

/// Resident set size of this process, in bytes.
pub fn resident_set_bytes() -> Result<u64> {
    let text = std::fs::read_to_string("/proc/self/statm")?;
    let pages: u64 = text
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Schema("unparseable /proc/self/statm".into()))?;
    Ok(pages * system_page_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DeviceKind, GIB, KIB};

    fn anon() -> DeviceProfile {
        DeviceProfile::anonymous("dram", 0)
    }

    fn page() -> Bytes {
        Bytes(4096)
    }

    #[test]
    fn anonymous_region_is_resident() {
        let r = map_region(&anon(), Bytes::mib(8), page()).unwrap();
        assert_eq!(r.page_count(), 2048);
        assert_eq!(r.resident_pages().unwrap(), 2048);
        assert_eq!(r.base_addr() % 4096, 0);
        assert_eq!(r.len() % 4096, 0);
    }

    #[test]
    fn page_count_of_one_gib() {
        let r = map_region(&anon(), Bytes::gib(1), page()).unwrap();
        assert_eq!(r.page_count(), GIB / (4 * KIB));
        assert_eq!(r.resident_pages().unwrap(), 262_144);
    }

    #[test]
    fn length_rounds_up_to_pages() {
        let r = map_region(&anon(), Bytes(100), page()).unwrap();
        assert_eq!(r.len(), 4096);
    }

    #[test]
    fn physical_range_without_device_is_privilege_error() {
        let profile = DeviceProfile {
            name: "dcpmm".into(),
            kind: DeviceKind::Nvm,
            numa_node: 0,
            backing: Backing::PhysicalRange {
                base_address: Bytes(0x40_0000_0000),
                length: Bytes::gib(1),
                device: "/nonexistent/dev/mem".into(),
            },
            interleaved: true,
            description: String::new(),
        };
        match map_region(&profile, Bytes::gib(1), page()) {
            Err(Error::Privilege { .. }) => {}
            other => panic!("expected privilege error, got {other:?}"),
        }
        match map_region(&profile, Bytes::gib(2), page()) {
            Err(Error::Range(_)) => {}
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn physical_range_through_substitute_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pmem");
        std::fs::write(&path, vec![0xabu8; 3 * 4096]).unwrap();
        let profile = DeviceProfile {
            name: "fake-nvm".into(),
            kind: DeviceKind::Nvm,
            numa_node: 0,
            backing: Backing::PhysicalRange {
                base_address: Bytes(4096),
                length: Bytes(8192),
                device: path,
            },
            interleaved: false,
            description: String::new(),
        };
        let r = map_region(&profile, Bytes(8192), page()).unwrap();
        // Pre-faulting must not alter device contents.
        assert_eq!(unsafe { *r.as_ptr() }, 0xab);
    }

    #[test]
    fn file_backing_grows_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("region");
        let profile = DeviceProfile {
            name: "file".into(),
            kind: DeviceKind::File,
            numa_node: 0,
            backing: Backing::FilePath { path: path.clone() },
            interleaved: false,
            description: String::new(),
        };
        let r = map_region(&profile, Bytes::mib(1), page()).unwrap();
        assert_eq!(r.len(), Bytes::mib(1).0);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), Bytes::mib(1).0);
    }

    #[test]
    fn missing_numa_node_is_rejected() {
        let profile = DeviceProfile::anonymous("far", 4000);
        assert!(matches!(
            map_region(&profile, Bytes::mib(1), page()),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn oversized_anonymous_request_is_exhausted() {
        assert!(matches!(
            map_region(&anon(), Bytes::gib(1 << 14), page()),
            Err(Error::Exhausted(_))
        ));
    }

    #[test]
    fn double_release_is_state_error() {
        let mut r = map_region(&anon(), Bytes::mib(1), page()).unwrap();
        r.release().unwrap();
        assert!(matches!(r.release(), Err(Error::State(_))));
        assert!(matches!(r.resident_pages(), Err(Error::State(_))));
    }

    #[test]
    fn anonymous_regions_are_disjoint() {
        let regions: Vec<_> = (0..8)
            .map(|_| map_region(&anon(), Bytes::mib(2), page()).unwrap())
            .collect();
        assert!(regions_disjoint(&regions));
    }

    #[test]
    fn disjointness_detects_overlap() {
        let a = map_region(&anon(), Bytes::mib(1), page()).unwrap();
        let fake = MappedRegion {
            base: NonNull::new(unsafe { a.as_ptr().add(4096) } as *mut u8).unwrap(),
            length: 4096,
            page_bytes: 4096,
            numa_node: 0,
            source: Backing::Anonymous,
            // Already "released" so drop does not unmap memory owned by `a`.
            released: true,
        };
        assert!(!regions_disjoint([&a, &fake]));
    }

    #[test]
    fn anonymous_pages_land_on_requested_node() {
        let r = map_region(&anon(), Bytes::mib(64), page()).unwrap();
        let nodes = r.sample_page_nodes(1024).unwrap();
        let on_node = nodes.iter().filter(|&&n| n == 0).count();
        assert!(on_node * 100 >= nodes.len() * 99, "{on_node}/{}", nodes.len());
    }

    #[test]
    fn pinning_round_trips() {
        let allowed = current_affinity().unwrap();
        let core = allowed[0];
        std::thread::spawn(move || {
            assert_eq!(pin_current_to_core(core).unwrap(), core);
            assert_eq!(current_affinity().unwrap(), vec![core]);
            assert!(matches!(pin_current_to_core(4096), Err(Error::Affinity(_))));
        })
        .join()
        .unwrap();
    }
}
