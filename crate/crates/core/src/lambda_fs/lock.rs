use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use super::{FsError, Ino};
use crate::nvme::PcieFunction;

pub type HandleId = u64;
pub type WaitTicket = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Host,
    Container,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Host => Side::Container,
            Side::Container => Side::Host,
        }
    }

    pub fn function(self) -> PcieFunction {
        match self {
            Side::Host => PcieFunction::Host,
            Side::Container => PcieFunction::Firmware,
        }
    }

    fn idx(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Handle {
    pub id: HandleId,
    pub side: Side,
    pub ino: Ino,
    pub parent: Ino,
}

/// Snapshot of one inode's counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct InodeLock {
    pub ino: Ino,
    refs: [u32; 2],
}

impl InodeLock {
    pub fn refcount(&self, side: Side) -> u32 {
        self.refs[side.idx()]
    }

    pub fn holder(&self) -> Option<Side> {
        match self.refs {
            [0, 0] => None,
            [_, 0] => Some(Side::Host),
            [0, _] => Some(Side::Container),
            _ => unreachable!("both sides hold inode {}", self.ino),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpenOutcome {
    Granted(Handle),
    Blocked(WaitTicket),
}

/// A handle issued to an earlier blocked request (`ticket`) or directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grant {
    pub ticket: Option<WaitTicket>,
    pub handle: Handle,
}

#[derive(Debug, Clone, Copy)]
struct Waiter {
    ticket: WaitTicket,
    side: Side,
    ino: Ino,
    parent: Ino,
}

/// Per-side reference counts over files and their immediate parent
/// directories, with a FIFO queue of blocked opens.
#[derive(Debug, Clone, Default)]
pub struct LockManager {
    refs: BTreeMap<Ino, [u32; 2]>,
    handles: BTreeMap<HandleId, Handle>,
    waiters: VecDeque<Waiter>,
    fenced: BTreeSet<Ino>,
    next_id: u64,
}

impl LockManager {
    pub fn lock_state(&self, ino: Ino) -> InodeLock {
        InodeLock {
            ino,
            refs: self.refs.get(&ino).copied().unwrap_or_default(),
        }
    }

    fn count(&self, ino: Ino, side: Side) -> u32 {
        self.refs.get(&ino).map_or(0, |r| r[side.idx()])
    }

    /// Holds container opens on `ino` (and on files beneath it) back.
    pub fn fence(&mut self, ino: Ino) {
        self.fenced.insert(ino);
    }

    pub fn unfence(&mut self, ino: Ino) {
        self.fenced.remove(&ino);
    }

    pub fn admissible(&self, side: Side, ino: Ino, parent: Ino) -> bool {
        let other = side.other();
        let fenced = side == Side::Container
            && (self.fenced.contains(&ino) || self.fenced.contains(&parent));
        !fenced && self.count(ino, other) == 0 && self.count(parent, other) == 0
    }

    fn issue(&mut self, side: Side, ino: Ino, parent: Ino) -> Handle {
        self.next_id += 1;
        let h = Handle {
            id: self.next_id,
            side,
            ino,
            parent,
        };
        self.refs.entry(ino).or_default()[side.idx()] += 1;
        if parent != ino {
            self.refs.entry(parent).or_default()[side.idx()] += 1;
        }
        self.handles.insert(h.id, h);
        h
    }

    pub fn open(&mut self, side: Side, ino: Ino, parent: Ino) -> OpenOutcome {
        if self.admissible(side, ino, parent) {
            OpenOutcome::Granted(self.issue(side, ino, parent))
        } else {
            self.next_id += 1;
            let ticket = self.next_id;
            self.waiters.push_back(Waiter {
                ticket,
                side,
                ino,
                parent,
            });
            OpenOutcome::Blocked(ticket)
        }
    }

    pub fn close(&mut self, id: HandleId) -> Result<Vec<Grant>, FsError> {
        let h = self.handles.remove(&id).ok_or(FsError::DoubleClose(id))?;
        for ino in [h.ino, h.parent].into_iter().collect::<BTreeSet<_>>() {
            let r = self.refs.get_mut(&ino).expect("held inode has counters");
            r[h.side.idx()] -= 1;
            if *r == [0, 0] {
                self.refs.remove(&ino);
            }
        }
        Ok(self.reevaluate())
    }

    /// Walks the wait queue in arrival order, granting every request that
    /// has become admissible.
    pub fn reevaluate(&mut self) -> Vec<Grant> {
        let mut grants = Vec::new();
        let mut i = 0;
        while i < self.waiters.len() {
            let w = self.waiters[i];
            if self.admissible(w.side, w.ino, w.parent) {
                self.waiters.remove(i);
                let handle = self.issue(w.side, w.ino, w.parent);
                grants.push(Grant {
                    ticket: Some(w.ticket),
                    handle,
                });
            } else {
                i += 1;
            }
        }
        grants
    }

    pub fn cancel(&mut self, ticket: WaitTicket) -> Result<(), FsError> {
        let pos = self
            .waiters
            .iter()
            .position(|w| w.ticket == ticket)
            .ok_or(FsError::UnknownTicket(ticket))?;
        self.waiters.remove(pos);
        Ok(())
    }

    pub fn handle(&self, id: HandleId) -> Result<Handle, FsError> {
        self.handles
            .get(&id)
            .copied()
            .ok_or(FsError::DoubleClose(id))
    }

    pub fn live_handles(&self) -> impl Iterator<Item = &Handle> {
        self.handles.values()
    }

    pub fn waiting(&self) -> usize {
        self.waiters.len()
    }

    /// Pending tickets with their side and inode, oldest first.
    pub fn waiters(&self) -> Vec<(WaitTicket, Side, Ino)> {
        self.waiters
            .iter()
            .map(|w| (w.ticket, w.side, w.ino))
            .collect()
    }

    /// Verifies counters against the live handle set and mutual exclusion.
    pub fn check(&self) -> Result<(), String> {
        let mut expected: BTreeMap<Ino, [u32; 2]> = BTreeMap::new();
        for h in self.handles.values() {
            expected.entry(h.ino).or_default()[h.side.idx()] += 1;
            if h.parent != h.ino {
                expected.entry(h.parent).or_default()[h.side.idx()] += 1;
            }
        }
        if expected != self.refs {
            return Err(format!(
                "counters {:?} disagree with handles {:?}",
                self.refs, expected
            ));
        }
        if let Some((ino, _)) = self.refs.iter().find(|(_, r)| r[0] > 0 && r[1] > 0) {
            return Err(format!("both sides hold inode {ino}"));
        }
        if let Some(w) = self
            .waiters
            .iter()
            .find(|w| self.admissible(w.side, w.ino, w.parent))
        {
            return Err(format!(
                "ticket {} is admissible but still waiting",
                w.ticket
            ));
        }
        Ok(())
    }
}
