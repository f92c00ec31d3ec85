use std::collections::BTreeMap;

use serde::Serialize;

use super::FwError;
use crate::nvme::PAGE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CpuMode {
    Privileged,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Fw,
    Isp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FaultRecord {
    pub addr: u64,
    pub mode: CpuMode,
}

/// Device DRAM split into the firmware pool (handler tables) and the ISP
/// pool (call arguments and container data). The memory protection unit
/// only lets privileged code touch the firmware pool.
#[derive(Debug, Clone)]
pub struct MemoryPools {
    fw_pages: u64,
    isp_pages: u64,
    isp_used: Vec<bool>,
    mode: CpuMode,
    faults: Vec<FaultRecord>,
    granted: BTreeMap<(Pool, CpuMode), u64>,
}

impl MemoryPools {
    pub fn new(fw_pages: u64, isp_pages: u64) -> Self {
        Self {
            fw_pages,
            isp_pages,
            isp_used: vec![false; isp_pages as usize],
            mode: CpuMode::User,
            faults: Vec::new(),
            granted: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> CpuMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: CpuMode) {
        self.mode = mode;
    }

    pub fn fw_range(&self) -> std::ops::Range<u64> {
        0..self.fw_pages * PAGE_SIZE as u64
    }

    pub fn isp_range(&self) -> std::ops::Range<u64> {
        let start = self.fw_range().end;
        start..start + self.isp_pages * PAGE_SIZE as u64
    }

    pub fn pool_of(&self, addr: u64) -> Option<Pool> {
        if self.fw_range().contains(&addr) {
            Some(Pool::Fw)
        } else if self.isp_range().contains(&addr) {
            Some(Pool::Isp)
        } else {
            None
        }
    }

    /// Checks one access in the current mode.
    pub fn access(&mut self, addr: u64) -> Result<Pool, FwError> {
        match (self.pool_of(addr), self.mode) {
            (None, _) => {
                self.faults.push(FaultRecord {
                    addr,
                    mode: self.mode,
                });
                Err(FwError::Fault { addr })
            }
            (Some(Pool::Fw), CpuMode::User) => {
                self.faults.push(FaultRecord {
                    addr,
                    mode: self.mode,
                });
                Err(FwError::Fault { addr })
            }
            (Some(p), mode) => {
                *self.granted.entry((p, mode)).or_default() += 1;
                Ok(p)
            }
        }
    }

    /// Runs `f` in privileged mode and returns to the previous mode.
    pub fn privileged<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.mode;
        self.mode = CpuMode::Privileged;
        let r = f(self);
        self.mode = prev;
        r
    }

    pub fn alloc_isp(&mut self, pages: usize) -> Result<u64, FwError> {
        let n = self.isp_used.len();
        let mut run = 0;
        for i in 0..n {
            run = if self.isp_used[i] { 0 } else { run + 1 };
            if run == pages.max(1) {
                let first = i + 1 - run;
                self.isp_used[first..=i].fill(true);
                return Ok(self.isp_range().start + (first * PAGE_SIZE) as u64);
            }
        }
        Err(FwError::OutOfMemory)
    }

    pub fn free_isp(&mut self, addr: u64, pages: usize) {
        let first = ((addr - self.isp_range().start) / PAGE_SIZE as u64) as usize;
        let end = (first + pages.max(1)).min(self.isp_used.len());
        self.isp_used[first..end].fill(false);
    }

    pub fn isp_pages_used(&self) -> usize {
        self.isp_used.iter().filter(|u| **u).count()
    }

    pub fn faults(&self) -> &[FaultRecord] {
        &self.faults
    }

    /// Accesses that were allowed, by pool and mode.
    pub fn granted(&self, pool: Pool, mode: CpuMode) -> u64 {
        self.granted.get(&(pool, mode)).copied().unwrap_or(0)
    }
}
