use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use super::{NamespaceTable, NvmeCommand, NvmeError, PcieFunction};

pub type QueueId = u16;

pub const DEFAULT_SQ_DEPTH: usize = 64;

/// Handle returned by a successful submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CommandTicket {
    pub queue: QueueId,
    pub command_id: u16,
    /// Value of the SQ doorbell after this submission.
    pub doorbell: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CompletionEntry {
    pub queue: QueueId,
    pub command_id: u16,
    pub status: u8,
    /// Command-specific result dword.
    pub result: u32,
}

/// Message-signaled interrupt raised for one completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MsiEvent {
    pub queue: QueueId,
    pub command_id: u16,
    pub status: u8,
}

#[derive(Debug, Clone, Copy)]
struct Outstanding {
    function: PcieFunction,
    fetched: bool,
}

/// One SQ/CQ pair.
#[derive(Debug, Clone)]
pub struct QueuePair {
    id: QueueId,
    depth: usize,
    sq: VecDeque<NvmeCommand>,
    outstanding: BTreeMap<u16, Outstanding>,
    cq: VecDeque<CompletionEntry>,
    sq_doorbell: u64,
    cq_doorbell: u64,
    fetched: u64,
}

impl QueuePair {
    pub fn new(id: QueueId, depth: usize) -> Self {
        Self {
            id,
            depth,
            sq: VecDeque::new(),
            outstanding: BTreeMap::new(),
            cq: VecDeque::new(),
            sq_doorbell: 0,
            cq_doorbell: 0,
            fetched: 0,
        }
    }

    pub fn id(&self) -> QueueId {
        self.id
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn submitted(&self) -> u64 {
        self.sq_doorbell
    }

    pub fn completed(&self) -> u64 {
        self.cq_doorbell
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn free_slots(&self) -> usize {
        self.depth - self.outstanding.len()
    }

    /// Commands submitted but not yet fetched by the device.
    pub fn unfetched(&self) -> usize {
        self.sq.len()
    }

    pub fn is_outstanding(&self, command_id: u16) -> bool {
        self.outstanding.contains_key(&command_id)
    }

    /// Host-side submission through `function`.
    ///
    /// Vendor commands carry nsid 0 and bypass the namespace check.
    pub fn submit(
        &mut self,
        cmd: NvmeCommand,
        function: PcieFunction,
        namespaces: &NamespaceTable,
    ) -> Result<CommandTicket, NvmeError> {
        if self.outstanding.len() >= self.depth {
            return Err(NvmeError::QueueFull(self.id));
        }
        if self.outstanding.contains_key(&cmd.command_id) {
            return Err(NvmeError::DuplicateCommandId(cmd.command_id));
        }
        let vendor_unbound = cmd.opcode.is_vendor() && cmd.nsid == 0;
        if !vendor_unbound && !namespaces.is_visible(cmd.nsid, function) {
            return Err(NvmeError::NamespaceNotVisible {
                nsid: cmd.nsid,
                function,
            });
        }
        cmd.validate()?;
        self.outstanding.insert(
            cmd.command_id,
            Outstanding {
                function,
                fetched: false,
            },
        );
        self.sq.push_back(cmd);
        self.sq_doorbell += 1;
        Ok(CommandTicket {
            queue: self.id,
            command_id: cmd.command_id,
            doorbell: self.sq_doorbell,
        })
    }

    /// Device-side fetch of the oldest unfetched command.
    pub fn fetch(&mut self) -> Result<(NvmeCommand, PcieFunction), NvmeError> {
        let cmd = self.sq.pop_front().ok_or(NvmeError::Empty)?;
        let o = self
            .outstanding
            .get_mut(&cmd.command_id)
            .expect("queued commands are outstanding");
        o.fetched = true;
        self.fetched += 1;
        Ok((cmd, o.function))
    }

    /// Device-side completion; appends a CQ entry and returns the MSI.
    pub fn complete(
        &mut self,
        command_id: u16,
        status: u8,
        result: u32,
    ) -> Result<MsiEvent, NvmeError> {
        match self.outstanding.get(&command_id) {
            None => return Err(NvmeError::UnknownCommand(command_id)),
            Some(o) if !o.fetched => return Err(NvmeError::NotFetched(command_id)),
            Some(_) => {}
        }
        self.outstanding.remove(&command_id);
        self.cq.push_back(CompletionEntry {
            queue: self.id,
            command_id,
            status,
            result,
        });
        self.cq_doorbell += 1;
        Ok(MsiEvent {
            queue: self.id,
            command_id,
            status,
        })
    }

    /// Host-side reap of the oldest completion entry.
    pub fn reap(&mut self) -> Option<CompletionEntry> {
        self.cq.pop_front()
    }

    pub fn pending_completions(&self) -> usize {
        self.cq.len()
    }
}
