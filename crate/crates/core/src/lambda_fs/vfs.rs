use std::collections::BTreeMap;

use super::Ino;

#[derive(Debug, Clone)]
struct Entry {
    data: Vec<u8>,
    valid: bool,
}

/// The host kernel's cached view of sharable files.
#[derive(Debug, Clone, Default)]
pub struct VfsCacheModel {
    entries: BTreeMap<Ino, Entry>,
    invalidations: u64,
}

impl VfsCacheModel {
    /// Cached contents, if present and still valid.
    pub fn get(&self, ino: Ino) -> Option<&[u8]> {
        self.entries
            .get(&ino)
            .filter(|e| e.valid)
            .map(|e| e.data.as_slice())
    }

    pub fn fill(&mut self, ino: Ino, data: Vec<u8>) {
        self.entries.insert(ino, Entry { data, valid: true });
    }

    pub fn invalidate(&mut self, ino: Ino) {
        if let Some(e) = self.entries.get_mut(&ino) {
            if e.valid {
                e.valid = false;
                self.invalidations += 1;
            }
        }
    }

    pub fn is_valid(&self, ino: Ino) -> bool {
        self.entries.get(&ino).is_some_and(|e| e.valid)
    }

    pub fn invalidations(&self) -> u64 {
        self.invalidations
    }
}
