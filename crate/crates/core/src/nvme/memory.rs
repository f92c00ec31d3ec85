use std::collections::BTreeMap;

use super::{NvmeError, PAGE_SIZE};

/// Address of a page in the simulated host address space.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Default,
    serde::Serialize,
    serde::Deserialize,
)]
pub struct PageAddr(pub u64);

impl PageAddr {
    pub fn is_aligned(self) -> bool {
        self.0.is_multiple_of(PAGE_SIZE as u64)
    }
}

/// One 4096-byte page.
#[derive(Clone, PartialEq, Eq)]
pub struct Page(Box<[u8; PAGE_SIZE]>);

impl Page {
    pub fn zeroed() -> Self {
        Page(Box::new([0u8; PAGE_SIZE]))
    }

    /// Builds a page whose prefix is `bytes`; the rest is zero.
    pub fn from_prefix(bytes: &[u8]) -> Option<Self> {
        if bytes.len() > PAGE_SIZE {
            return None;
        }
        let mut p = Self::zeroed();
        p.0[..bytes.len()].copy_from_slice(bytes);
        Some(p)
    }

    pub fn as_bytes(&self) -> &[u8; PAGE_SIZE] {
        &self.0
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8; PAGE_SIZE] {
        &mut self.0
    }
}

impl Default for Page {
    fn default() -> Self {
        Self::zeroed()
    }
}

impl std::fmt::Debug for Page {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let used = self.0.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
        write!(f, "Page({used} non-zero-prefix bytes)")
    }
}

/// Host DRAM pages reachable by PRP entries.
#[derive(Debug, Default, Clone)]
pub struct HostMemory {
    pages: BTreeMap<PageAddr, Page>,
    next: u64,
}

impl HostMemory {
    pub fn new() -> Self {
        // Address 0 is never handed out so a zeroed PRP is always invalid.
        Self {
            pages: BTreeMap::new(),
            next: PAGE_SIZE as u64,
        }
    }

    pub fn alloc(&mut self) -> PageAddr {
        let addr = PageAddr(self.next);
        self.next += PAGE_SIZE as u64;
        self.pages.insert(addr, Page::zeroed());
        addr
    }

    pub fn alloc_with(&mut self, page: Page) -> PageAddr {
        let addr = self.alloc();
        self.pages.insert(addr, page);
        addr
    }

    pub fn free(&mut self, addr: PageAddr) -> Option<Page> {
        self.pages.remove(&addr)
    }

    pub fn page(&self, addr: PageAddr) -> Result<&Page, NvmeError> {
        self.pages.get(&addr).ok_or(NvmeError::UnmappedPage(addr.0))
    }

    pub fn page_mut(&mut self, addr: PageAddr) -> Result<&mut Page, NvmeError> {
        self.pages
            .get_mut(&addr)
            .ok_or(NvmeError::UnmappedPage(addr.0))
    }

    pub fn mapped(&self) -> usize {
        self.pages.len()
    }
}
