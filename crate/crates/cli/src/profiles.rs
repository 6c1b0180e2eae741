//! Device profiles kept in a hand-edited TOML file:
//!
//! ```toml
//! [[profile]]
//! name = "pmem0"
//! kind = "nvm"
//! numa_node = 0
//! interleaved = true
//! backing = { type = "physical_range", base_address = 0x2080000000, length = 0x1f80000000, device = "/dev/mem" }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use memprobe::DeviceProfile;
use serde::{Deserialize, Serialize};

/// Always available, even without a profile file.
pub const BUILTIN_PROFILE: &str = "local";

/// Looked up in the working directory when neither the flag nor the
/// environment variable names a file.
pub const DEFAULT_STORE_FILE: &str = "memprobe-profiles.toml";

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ProfileStore {
    #[serde(default, rename = "profile")]
    pub profiles: Vec<DeviceProfile>,
}

impl ProfileStore {
    /// Loads `path`, or the default file when present, or an empty store.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let path: PathBuf = match path {
            Some(p) => p.to_path_buf(),
            None => {
                let p = PathBuf::from(DEFAULT_STORE_FILE);
                if !p.exists() {
                    return Ok(ProfileStore::default());
                }
                p
            }
        };
        let text = fs::read_to_string(&path)
            .map_err(|e| format!("cannot read profile store {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let store: ProfileStore = toml::from_str(text).map_err(|e| e.to_string())?;
        for (i, p) in store.profiles.iter().enumerate() {
            p.validate().map_err(|e| e.to_string())?;
            if store.profiles[..i].iter().any(|q| q.name == p.name) {
                return Err(format!("profile `{}` is defined twice", p.name));
            }
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<DeviceProfile, String> {
        if let Some(p) = self.profiles.iter().find(|p| p.name == name) {
            return Ok(p.clone());
        }
        if name == BUILTIN_PROFILE {
            return Ok(DeviceProfile::anonymous(BUILTIN_PROFILE, 0));
        }
        let known: Vec<&str> = self.profiles.iter().map(|p| p.name.as_str()).collect();
        Err(format!(
            "no profile named `{name}` (known: {BUILTIN_PROFILE}{}{})",
            if known.is_empty() { "" } else { ", " },
            known.join(", ")
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use memprobe::{Backing, DeviceKind};

    #[test]
    fn parses_all_backings() {
        let store = ProfileStore::parse(
            r#"
            [[profile]]
            name = "dram"
            kind = "dram"
            backing = { type = "anonymous" }

            [[profile]]
            name = "pmem"
            kind = "nvm"
            numa_node = 1
            interleaved = false
            backing = { type = "physical_range", base_address = 0x100000000, length = 0x40000000 }

            [[profile]]
            name = "dax"
            kind = "file"
            backing = { type = "file_path", path = "/mnt/pmem/probe" }
            "#,
        )
        .unwrap();
        assert_eq!(store.profiles.len(), 3);
        let pmem = store.get("pmem").unwrap();
        assert_eq!(pmem.kind, DeviceKind::Nvm);
        assert_eq!(pmem.numa_node, 1);
        match pmem.backing {
            Backing::PhysicalRange { base_address, length, device } => {
                assert_eq!(base_address.0, 0x1_0000_0000);
                assert_eq!(length.0, 1 << 30);
                assert_eq!(device, PathBuf::from("/dev/mem"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn builtin_and_missing() {
        let store = ProfileStore::default();
        assert_eq!(store.get("local").unwrap().backing, Backing::Anonymous);
        assert!(store.get("nope").unwrap_err().contains("nope"));
    }

    #[test]
    fn rejects_duplicates_and_misaligned_ranges() {
        let dup = "[[profile]]\nname='a'\nkind='dram'\nbacking={type='anonymous'}\n".repeat(2);
        assert!(ProfileStore::parse(&dup).is_err());
        let bad = "[[profile]]\nname='a'\nkind='nvm'\nbacking={type='physical_range',base_address=4097,length=4096}\n";
        assert!(ProfileStore::parse(bad).is_err());
    }
}
