use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::lambda_fs::{FsError, FsImage, Ino, ROOT_INO};
use crate::nvme::PcieFunction;

/// Work done by one walk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WalkStats {
    /// Directory lookups performed against the filesystem.
    pub lookups: u32,
    /// Prefixes served from the cache (0 or 1 per walk).
    pub hits: u32,
}

/// Path-prefix to inode cache with LRU eviction. Entries are checked
/// against the live inode table before use; inode numbers are never
/// reused, so a live hit is always current.
#[derive(Debug, Clone)]
pub struct IoNodeCache {
    capacity: usize,
    map: BTreeMap<String, Ino>,
    order: VecDeque<String>,
}

impl IoNodeCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            map: BTreeMap::new(),
            order: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.map.clear();
        self.order.clear();
    }

    /// Drops `prefix` and everything cached below it.
    pub fn invalidate(&mut self, prefix: &str) {
        let dir = format!("{}/", prefix.trim_end_matches('/'));
        self.map.retain(|k, _| k != prefix && !k.starts_with(&dir));
        self.order.retain(|k| k != prefix && !k.starts_with(&dir));
    }

    fn touch(&mut self, key: &str) {
        if let Some(pos) = self.order.iter().position(|k| k == key) {
            let k = self.order.remove(pos).unwrap();
            self.order.push_back(k);
        }
    }

    fn insert(&mut self, key: String, ino: Ino) {
        if self.capacity == 0 {
            return;
        }
        if self.map.insert(key.clone(), ino).is_some() {
            self.touch(&key);
            return;
        }
        self.order.push_back(key);
        while self.map.len() > self.capacity {
            let old = self.order.pop_front().expect("order tracks map");
            self.map.remove(&old);
        }
    }

    pub fn get(&self, key: &str) -> Option<Ino> {
        self.map.get(key).copied()
    }

    /// Resolves `path` from the longest live cached prefix, filling the
    /// cache with every prefix it had to look up.
    pub fn walk(&mut self, fs: &FsImage, path: &str) -> Result<(Ino, WalkStats), FsError> {
        if !path.starts_with('/') {
            return Err(FsError::InvalidPath(path.to_string()));
        }
        let comps: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
        let mut stats = WalkStats::default();
        let mut start = 0;
        let mut ino = ROOT_INO;
        for k in (1..=comps.len()).rev() {
            let key = format!("/{}", comps[..k].join("/"));
            if let Some(cached) = self.map.get(&key).copied() {
                if fs.is_live(cached) {
                    self.touch(&key);
                    stats.hits = 1;
                    start = k;
                    ino = cached;
                    break;
                }
                self.map.remove(&key);
                self.order.retain(|o| *o != key);
            }
        }
        for k in start..comps.len() {
            stats.lookups += 1;
            ino = fs
                .lookup_child(ino, comps[k])?
                .ok_or_else(|| FsError::PathNotFound(path.to_string()))?;
            if !PcieFunction::Firmware.sees(fs.inode(ino)?.ns) {
                return Err(FsError::NamespaceNotVisible {
                    path: path.to_string(),
                    function: PcieFunction::Firmware,
                });
            }
            self.insert(format!("/{}", comps[..=k].join("/")), ino);
        }
        Ok((ino, stats))
    }
}
