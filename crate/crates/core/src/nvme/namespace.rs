use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::NvmeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamespaceKind {
    /// Firmware-only; holds images and container state.
    Private,
    /// Visible to both the host and containers.
    Sharable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcieFunction {
    Firmware,
    Host,
}

impl PcieFunction {
    pub fn sees(self, kind: NamespaceKind) -> bool {
        match self {
            PcieFunction::Firmware => true,
            PcieFunction::Host => kind == NamespaceKind::Sharable,
        }
    }
}

/// Requested namespace layout entry. `blocks` is a half-open range of
/// physical media blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamespaceSpec {
    pub kind: NamespaceKind,
    pub blocks: Range<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Namespace {
    pub nsid: u32,
    pub kind: NamespaceKind,
    pub blocks: Range<u64>,
}

impl Namespace {
    pub fn len(&self) -> u64 {
        self.blocks.end - self.blocks.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Maps a namespace-relative LBA to a physical block.
    pub fn physical(&self, lba: u64) -> Option<u64> {
        (lba < self.len()).then(|| self.blocks.start + lba)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamespaceTable {
    namespaces: Vec<Namespace>,
}

impl NamespaceTable {
    /// Builds the table; nsids are assigned from 1 in declaration order.
    pub fn define(layout: &[NamespaceSpec]) -> Result<Self, NvmeError> {
        for s in layout {
            if s.blocks.start >= s.blocks.end {
                return Err(NvmeError::EmptyRange);
            }
        }
        for (i, a) in layout.iter().enumerate() {
            for b in &layout[i + 1..] {
                if a.blocks.start < b.blocks.end && b.blocks.start < a.blocks.end {
                    return Err(NvmeError::OverlappingRanges);
                }
            }
        }
        for kind in [NamespaceKind::Private, NamespaceKind::Sharable] {
            match layout.iter().filter(|s| s.kind == kind).count() {
                0 => return Err(NvmeError::MissingKind(kind)),
                1 => {}
                _ => return Err(NvmeError::DuplicateKind(kind)),
            }
        }
        let namespaces = layout
            .iter()
            .enumerate()
            .map(|(i, s)| Namespace {
                nsid: i as u32 + 1,
                kind: s.kind,
                blocks: s.blocks.clone(),
            })
            .collect();
        Ok(Self { namespaces })
    }

    pub fn get(&self, nsid: u32) -> Option<&Namespace> {
        self.namespaces.iter().find(|n| n.nsid == nsid)
    }

    pub fn by_kind(&self, kind: NamespaceKind) -> &Namespace {
        self.namespaces
            .iter()
            .find(|n| n.kind == kind)
            .expect("both kinds exist by construction")
    }

    pub fn all(&self) -> &[Namespace] {
        &self.namespaces
    }

    /// Namespaces exposed through `function`.
    pub fn visible(&self, function: PcieFunction) -> Vec<&Namespace> {
        self.namespaces
            .iter()
            .filter(|n| function.sees(n.kind))
            .collect()
    }

    pub fn is_visible(&self, nsid: u32, function: PcieFunction) -> bool {
        self.get(nsid).is_some_and(|n| function.sees(n.kind))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: NamespaceKind, blocks: Range<u64>) -> NamespaceSpec {
        NamespaceSpec { kind, blocks }
    }

    #[test]
    fn function_views() {
        let t = NamespaceTable::define(&[
            spec(NamespaceKind::Private, 0..1000),
            spec(NamespaceKind::Sharable, 1000..10000),
        ])
        .unwrap();
        let fw: Vec<_> = t
            .visible(PcieFunction::Firmware)
            .iter()
            .map(|n| n.nsid)
            .collect();
        let host: Vec<_> = t
            .visible(PcieFunction::Host)
            .iter()
            .map(|n| n.nsid)
            .collect();
        assert_eq!(fw, vec![1, 2]);
        assert_eq!(host, vec![2]);
        assert_eq!(t.by_kind(NamespaceKind::Sharable).physical(5), Some(1005));
        assert_eq!(t.by_kind(NamespaceKind::Private).physical(1000), None);
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let r = NamespaceTable::define(&[
            spec(NamespaceKind::Private, 0..1000),
            spec(NamespaceKind::Sharable, 999..2000),
        ]);
        assert_eq!(r, Err(NvmeError::OverlappingRanges));
    }

    #[test]
    fn missing_and_duplicate_kinds() {
        let r = NamespaceTable::define(&[spec(NamespaceKind::Private, 0..1000)]);
        assert_eq!(r, Err(NvmeError::MissingKind(NamespaceKind::Sharable)));
        let r = NamespaceTable::define(&[
            spec(NamespaceKind::Private, 0..10),
            spec(NamespaceKind::Private, 10..20),
            spec(NamespaceKind::Sharable, 20..30),
        ]);
        assert_eq!(r, Err(NvmeError::DuplicateKind(NamespaceKind::Private)));
    }
}
