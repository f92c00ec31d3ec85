use std::collections::BTreeSet;

use crate::lambda_fs::{FsError, FsImage};
use crate::nvme::PcieFunction;

const FW: PcieFunction = PcieFunction::Firmware;
pub const WHITEOUT_PREFIX: &str = ".wh.";
pub const OPAQUE_MARKER: &str = ".wh..wh..opq";

fn join(base: &str, rel: &str) -> String {
    let rel = rel.trim_matches('/');
    if rel.is_empty() {
        base.to_string()
    } else {
        format!("{}/{}", base.trim_end_matches('/'), rel)
    }
}

/// `/a/b/c` yields `/a`, `/a/b`, `/a/b/c`.
fn prefixes(rel: &str) -> Vec<String> {
    let parts: Vec<&str> = rel.split('/').filter(|c| !c.is_empty()).collect();
    (1..=parts.len())
        .map(|k| format!("/{}", parts[..k].join("/")))
        .collect()
}

fn split(rel: &str) -> (String, String) {
    let rel = format!("/{}", rel.trim_matches('/'));
    let (dir, name) = rel.rsplit_once('/').expect("leading slash");
    (
        if dir.is_empty() {
            "/".into()
        } else {
            dir.into()
        },
        name.into(),
    )
}

fn whiteout_path(rel: &str) -> String {
    let (dir, name) = split(rel);
    join(&dir, &format!("{WHITEOUT_PREFIX}{name}"))
}

/// Merged view of read-only lower directories under one writable upper
/// directory. Deletions of lower entries leave whiteout markers in the
/// upper; a directory recreated over a whiteout becomes opaque.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Overlay {
    /// Lowest first.
    pub lowers: Vec<String>,
    pub upper: String,
}

impl Overlay {
    pub fn new(lowers: Vec<String>, upper: &str) -> Self {
        Self {
            lowers,
            upper: upper.to_string(),
        }
    }

    fn in_upper(&self, fs: &FsImage, rel: &str) -> bool {
        fs.exists(&join(&self.upper, rel), FW)
    }

    /// Lowers are hidden at `rel` by a whiteout on it or an ancestor, or by
    /// an opaque ancestor directory.
    fn lowers_hidden(&self, fs: &FsImage, rel: &str) -> bool {
        let ps = prefixes(rel);
        ps.iter().any(|q| self.in_upper(fs, &whiteout_path(q)))
            || ps[..ps.len().saturating_sub(1)]
                .iter()
                .any(|q| self.in_upper(fs, &join(q, OPAQUE_MARKER)))
    }

    /// The concrete path backing `rel`, if it is visible.
    pub fn resolve(&self, fs: &FsImage, rel: &str) -> Option<String> {
        if prefixes(rel)
            .iter()
            .any(|q| split(q).1.starts_with(WHITEOUT_PREFIX))
        {
            return None;
        }
        let up = join(&self.upper, rel);
        if fs.exists(&up, FW) {
            return Some(up);
        }
        if self.lowers_hidden(fs, rel) {
            return None;
        }
        self.lowers
            .iter()
            .rev()
            .map(|l| join(l, rel))
            .find(|p| fs.exists(p, FW))
    }

    pub fn exists(&self, fs: &FsImage, rel: &str) -> bool {
        self.resolve(fs, rel).is_some()
    }

    pub fn read(&self, fs: &FsImage, rel: &str) -> Result<Vec<u8>, FsError> {
        let path = self
            .resolve(fs, rel)
            .ok_or_else(|| FsError::PathNotFound(rel.to_string()))?;
        fs.read_all(fs.lookup(&path, FW)?)
    }

    /// Makes `rel` writable in the upper and returns its upper path. Lower
    /// content is copied up when `copy_up` is set.
    pub fn prepare_write(
        &self,
        fs: &mut FsImage,
        rel: &str,
        copy_up: bool,
    ) -> Result<String, FsError> {
        if prefixes(rel)
            .iter()
            .any(|q| split(q).1.starts_with(WHITEOUT_PREFIX))
            || prefixes(rel).is_empty()
        {
            return Err(FsError::InvalidPath(rel.to_string()));
        }
        let up = join(&self.upper, rel);
        if fs.exists(&up, FW) {
            return Ok(up);
        }
        let existing = if copy_up {
            self.read(fs, rel).ok()
        } else {
            None
        };
        let ps = prefixes(rel);
        for (i, q) in ps.iter().enumerate() {
            let wh = join(&self.upper, &whiteout_path(q));
            if fs.exists(&wh, FW) {
                fs.unlink(&wh, FW)?;
                if i + 1 < ps.len() {
                    fs.mkdir_all(&join(&self.upper, q), FW)?;
                    fs.create_all(&join(&self.upper, &join(q, OPAQUE_MARKER)), FW)?;
                }
            }
        }
        let ino = fs.create_all(&up, FW)?;
        if let Some(bytes) = existing {
            fs.write_all(ino, &bytes)?;
        }
        Ok(up)
    }

    pub fn write(&self, fs: &mut FsImage, rel: &str, bytes: &[u8]) -> Result<(), FsError> {
        let up = self.prepare_write(fs, rel, false)?;
        let ino = fs.lookup(&up, FW)?;
        fs.write_all(ino, bytes)
    }

    pub fn append(&self, fs: &mut FsImage, rel: &str, bytes: &[u8]) -> Result<(), FsError> {
        let up = self.prepare_write(fs, rel, true)?;
        let ino = fs.lookup(&up, FW)?;
        fs.append(ino, bytes)
    }

    /// Removes `rel` from the merged view; lower bytes are left in place.
    pub fn remove(&self, fs: &mut FsImage, rel: &str) -> Result<(), FsError> {
        if !self.exists(fs, rel) {
            return Err(FsError::PathNotFound(rel.to_string()));
        }
        let up = join(&self.upper, rel);
        if fs.exists(&up, FW) {
            fs.remove_all(&up, FW)?;
        }
        if self.exists(fs, rel) {
            fs.create_all(&join(&self.upper, &whiteout_path(rel)), FW)?;
        }
        Ok(())
    }

    /// Visible names in directory `rel`.
    pub fn list(&self, fs: &FsImage, rel: &str) -> Result<Vec<String>, FsError> {
        let mut names = BTreeSet::new();
        let up = join(&self.upper, rel);
        if let Ok(entries) = fs.list_path(&up, FW) {
            names.extend(entries.into_iter().map(|e| e.name));
        }
        for l in &self.lowers {
            if let Ok(entries) = fs.list_path(&join(l, rel), FW) {
                names.extend(entries.into_iter().map(|e| e.name));
            }
        }
        Ok(names
            .into_iter()
            .filter(|n| !n.starts_with(WHITEOUT_PREFIX) && self.exists(fs, &join(rel, n)))
            .collect())
    }
}
