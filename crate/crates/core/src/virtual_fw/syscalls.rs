use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FwError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handler {
    Thread,
    Io,
    Network,
}

impl Handler {
    pub const ALL: [Handler; 3] = [Handler::Thread, Handler::Io, Handler::Network];
}

fn default_full_os() -> u64 {
    2500
}

/// One catalog row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallEntry {
    pub name: String,
    pub handler: Handler,
    #[serde(default)]
    pub category: String,
    /// Cost of the emulated call.
    pub cost_ns: u64,
    /// Cost of the same call on a full OS, excluding context switches.
    #[serde(default = "default_full_os")]
    pub full_os_ns: u64,
    #[serde(default)]
    pub implemented: bool,
    /// Wrapper collapsed onto another entry (e.g. `open` onto `openat`).
    #[serde(default, deserialize_with = "empty_as_none")]
    pub alias_of: Option<String>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.is_empty()))
}

/// Syscall catalog keyed by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyscallTable {
    entries: BTreeMap<String, SyscallEntry>,
}

const BUILTIN: &str = include_str!("../../data/syscalls.csv");

impl SyscallTable {
    pub fn builtin() -> Self {
        Self::from_csv(BUILTIN).expect("bundled syscall table is valid")
    }

    /// Parses a CSV catalog. Required columns are `name`, `handler` and
    /// `cost_ns`; `category`, `full_os_ns`, `implemented` and `alias_of`
    /// are optional.
    pub fn from_csv(text: &str) -> Result<Self, FwError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut entries = BTreeMap::new();
        for row in rdr.deserialize::<SyscallEntry>() {
            let e = row.map_err(|e| FwError::Catalog(e.to_string()))?;
            if entries.contains_key(&e.name) {
                return Err(FwError::Catalog(format!("duplicate entry {}", e.name)));
            }
            entries.insert(e.name.clone(), e);
        }
        let table = Self { entries };
        for e in table.entries.values() {
            if let Some(target) = &e.alias_of {
                let t = table.entries.get(target).ok_or_else(|| {
                    FwError::Catalog(format!("{} aliases unknown {target}", e.name))
                })?;
                if t.alias_of.is_some() || t.handler != e.handler {
                    return Err(FwError::Catalog(format!(
                        "{} must alias a plain entry of the same handler",
                        e.name
                    )));
                }
            }
        }
        Ok(table)
    }

    pub fn get(&self, name: &str) -> Option<&SyscallEntry> {
        self.entries.get(name)
    }

    /// Follows an alias to the entry that actually executes.
    pub fn resolve(&self, name: &str) -> Result<&SyscallEntry, FwError> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| FwError::UnimplementedSyscall(name.to_string()))?;
        let target = match &e.alias_of {
            Some(t) => &self.entries[t],
            None => e,
        };
        if !target.implemented {
            return Err(FwError::UnimplementedSyscall(name.to_string()));
        }
        Ok(target)
    }

    pub fn entries(&self) -> impl Iterator<Item = &SyscallEntry> {
        self.entries.values()
    }

    pub fn count(&self, handler: Handler) -> usize {
        self.entries
            .values()
            .filter(|e| e.handler == handler)
            .count()
    }

    pub fn implemented(&self, handler: Handler) -> Vec<&str> {
        self.entries
            .values()
            .filter(|e| e.handler == handler && e.implemented)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn aliases(&self) -> Vec<(&str, &str)> {
        self.entries
            .values()
            .filter_map(|e| e.alias_of.as_deref().map(|t| (e.name.as_str(), t)))
            .collect()
    }

    pub fn set_costs(&mut self, emulated_ns: u64, full_os_ns: u64) {
        for e in self.entries.values_mut() {
            e.cost_ns = emulated_ns;
            e.full_os_ns = full_os_ns;
        }
    }

    pub fn mean_cost(&self, full_os: bool) -> f64 {
        let implemented: Vec<_> = self.entries.values().filter(|e| e.implemented).collect();
        let sum: u64 = implemented
            .iter()
            .map(|e| if full_os { e.full_os_ns } else { e.cost_ns })
            .sum();
        sum as f64 / implemented.len().max(1) as f64
    }
}
