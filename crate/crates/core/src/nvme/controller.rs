use std::collections::BTreeMap;

use serde::Serialize;

use super::{
    status, CommandTicket, HostMemory, MsiEvent, NamespaceKind, NamespaceTable, NvmeCommand,
    NvmeError, Opcode, Page, PcieFunction, QueueId, QueuePair,
};
use crate::sim::Nanos;

/// Device-side costs charged per fetch and per completion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct NvmeTiming {
    pub fetch_ns: Nanos,
    pub complete_ns: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AccessKind {
    Read,
    Write,
}

/// One media access attempt, kept for visibility audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AccessRecord {
    pub function: PcieFunction,
    pub nsid: u32,
    pub kind: AccessKind,
    /// Physical block, if the LBA mapped to one.
    pub block: Option<u64>,
    pub status: u8,
}

/// Outcome of one fetched command during [`Controller::process`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Processed {
    /// Block I/O executed and completed by the controller.
    Completed(MsiEvent),
    /// Vendor command left outstanding for the caller to handle.
    Vendor {
        queue: QueueId,
        cmd: NvmeCommand,
        function: PcieFunction,
    },
}

#[derive(Debug, Clone)]
pub struct Controller {
    namespaces: NamespaceTable,
    queues: BTreeMap<QueueId, QueuePair>,
    next_queue: QueueId,
    pub memory: HostMemory,
    media: BTreeMap<u64, Page>,
    timing: NvmeTiming,
    now: Nanos,
    access_log: Vec<AccessRecord>,
    msi_log: Vec<(Nanos, MsiEvent)>,
}

impl Controller {
    pub fn new(namespaces: NamespaceTable, timing: NvmeTiming) -> Self {
        Self {
            namespaces,
            queues: BTreeMap::new(),
            next_queue: 1,
            memory: HostMemory::new(),
            media: BTreeMap::new(),
            timing,
            now: 0,
            access_log: Vec::new(),
            msi_log: Vec::new(),
        }
    }

    pub fn namespaces(&self) -> &NamespaceTable {
        &self.namespaces
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn advance(&mut self, ns: Nanos) {
        self.now += ns;
    }

    pub fn add_queue(&mut self, depth: usize) -> QueueId {
        let id = self.next_queue;
        self.next_queue += 1;
        self.queues.insert(id, QueuePair::new(id, depth));
        id
    }

    pub fn queue(&self, qid: QueueId) -> Result<&QueuePair, NvmeError> {
        self.queues.get(&qid).ok_or(NvmeError::UnknownQueue(qid))
    }

    pub fn queue_mut(&mut self, qid: QueueId) -> Result<&mut QueuePair, NvmeError> {
        self.queues
            .get_mut(&qid)
            .ok_or(NvmeError::UnknownQueue(qid))
    }

    pub fn queue_ids(&self) -> Vec<QueueId> {
        self.queues.keys().copied().collect()
    }

    pub fn submit(
        &mut self,
        qid: QueueId,
        cmd: NvmeCommand,
        function: PcieFunction,
    ) -> Result<CommandTicket, NvmeError> {
        let q = self
            .queues
            .get_mut(&qid)
            .ok_or(NvmeError::UnknownQueue(qid))?;
        q.submit(cmd, function, &self.namespaces)
    }

    pub fn fetch(&mut self, qid: QueueId) -> Result<(NvmeCommand, PcieFunction), NvmeError> {
        let r = self.queue_mut(qid)?.fetch()?;
        self.now += self.timing.fetch_ns;
        Ok(r)
    }

    pub fn complete(
        &mut self,
        qid: QueueId,
        command_id: u16,
        status: u8,
        result: u32,
    ) -> Result<MsiEvent, NvmeError> {
        let msi = self.queue_mut(qid)?.complete(command_id, status, result)?;
        self.now += self.timing.complete_ns;
        self.msi_log.push((self.now, msi));
        Ok(msi)
    }

    /// Fetches every pending command on `qid`, executing block I/O and
    /// handing vendor commands back.
    pub fn process(&mut self, qid: QueueId) -> Result<Vec<Processed>, NvmeError> {
        let mut out = Vec::new();
        loop {
            let (cmd, function) = match self.fetch(qid) {
                Ok(c) => c,
                Err(NvmeError::Empty) => break,
                Err(e) => return Err(e),
            };
            if cmd.opcode.is_vendor() {
                out.push(Processed::Vendor {
                    queue: qid,
                    cmd,
                    function,
                });
                continue;
            }
            let st = self.execute_block(&cmd, function);
            out.push(Processed::Completed(self.complete(
                qid,
                cmd.command_id,
                st,
                0,
            )?));
        }
        Ok(out)
    }

    fn execute_block(&mut self, cmd: &NvmeCommand, function: PcieFunction) -> u8 {
        let kind = if cmd.opcode == Opcode::Write {
            AccessKind::Write
        } else {
            AccessKind::Read
        };
        let mut record = AccessRecord {
            function,
            nsid: cmd.nsid,
            kind,
            block: None,
            status: status::SUCCESS,
        };
        record.status = match self.namespaces.get(cmd.nsid) {
            None => status::INVALID_FIELD,
            Some(ns) if !function.sees(ns.kind) => status::ACCESS_DENIED,
            Some(ns) => match ns.physical(cmd.lba) {
                None => status::LBA_OUT_OF_RANGE,
                Some(block) => {
                    record.block = Some(block);
                    self.transfer(cmd, kind, block)
                }
            },
        };
        self.access_log.push(record);
        record.status
    }

    fn transfer(&mut self, cmd: &NvmeCommand, kind: AccessKind, block: u64) -> u8 {
        let len = cmd.length as usize;
        match kind {
            AccessKind::Write => {
                let Ok(src) = self.memory.page(cmd.prp) else {
                    return status::INVALID_FIELD;
                };
                let data = src.as_bytes()[..len].to_vec();
                let dst = self.media.entry(block).or_default();
                dst.as_bytes_mut()[..len].copy_from_slice(&data);
            }
            AccessKind::Read => {
                let data = self
                    .media
                    .get(&block)
                    .map(|p| p.as_bytes()[..len].to_vec())
                    .unwrap_or_else(|| vec![0; len]);
                let Ok(dst) = self.memory.page_mut(cmd.prp) else {
                    return status::INVALID_FIELD;
                };
                dst.as_bytes_mut()[..len].copy_from_slice(&data);
            }
        }
        status::SUCCESS
    }

    /// Raw media view for firmware-internal consumers.
    pub fn media_block(&self, block: u64) -> Option<&Page> {
        self.media.get(&block)
    }

    pub fn access_log(&self) -> &[AccessRecord] {
        &self.access_log
    }

    pub fn msi_log(&self) -> &[(Nanos, MsiEvent)] {
        &self.msi_log
    }

    /// Successful host-function accesses that landed on a private block.
    pub fn host_private_violations(&self) -> usize {
        let private = &self.namespaces.by_kind(NamespaceKind::Private).blocks;
        self.access_log
            .iter()
            .filter(|r| r.function == PcieFunction::Host && r.status == status::SUCCESS)
            .filter(|r| r.block.is_some_and(|b| private.contains(&b)))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvme::{NamespaceSpec, DEFAULT_SQ_DEPTH};

    fn controller() -> Controller {
        let t = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..1000,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 1000..10000,
            },
        ])
        .unwrap();
        Controller::new(
            t,
            NvmeTiming {
                fetch_ns: 100,
                complete_ns: 200,
            },
        )
    }

    #[test]
    fn write_then_read_round_trip() {
        let mut c = controller();
        let q = c.add_queue(DEFAULT_SQ_DEPTH);
        let src = c
            .memory
            .alloc_with(Page::from_prefix(b"hello media").unwrap());
        let dst = c.memory.alloc();
        c.submit(q, NvmeCommand::write(1, 2, 42, src), PcieFunction::Host)
            .unwrap();
        c.submit(q, NvmeCommand::read(2, 2, 42, dst), PcieFunction::Host)
            .unwrap();
        let done = c.process(q).unwrap();
        assert_eq!(done.len(), 2);
        assert_eq!(
            &c.memory.page(dst).unwrap().as_bytes()[..11],
            b"hello media"
        );
        assert!(c.media_block(1042).is_some());
        assert_eq!(c.now(), 600);
        assert_eq!(c.msi_log().len(), 2);
        assert_eq!(c.host_private_violations(), 0);
    }

    #[test]
    fn out_of_range_lba_fails_in_status() {
        let mut c = controller();
        let q = c.add_queue(4);
        let p = c.memory.alloc();
        c.submit(q, NvmeCommand::read(1, 2, 9000, p), PcieFunction::Host)
            .unwrap();
        let done = c.process(q).unwrap();
        assert!(matches!(done[0], Processed::Completed(m) if m.status == status::LBA_OUT_OF_RANGE));
    }

    #[test]
    fn vendor_commands_are_returned() {
        let mut c = controller();
        let q = c.add_queue(4);
        let p = c.memory.alloc();
        c.submit(
            q,
            NvmeCommand::new(Opcode::EtherTransmit, 9, 0, p),
            PcieFunction::Host,
        )
        .unwrap();
        let done = c.process(q).unwrap();
        assert!(matches!(done[0], Processed::Vendor { cmd, .. } if cmd.command_id == 9));
        assert!(c.queue(q).unwrap().is_outstanding(9));
        c.complete(q, 9, 0, 0).unwrap();
        assert_eq!(c.queue(q).unwrap().outstanding(), 0);
    }
}
