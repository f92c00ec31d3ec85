use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::{decode, encode_tx, EtherOnError, EthernetFrame};
use crate::nvme::{
    status, CommandTicket, CompletionEntry, Controller, MsiEvent, NvmeCommand, NvmeError, Opcode,
    PageAddr, PcieFunction, Processed, QueueId, DEFAULT_SQ_DEPTH,
};

/// Marker placed in dword 12 of every receive command.
pub const RECEPTION_CODE: u32 = 0x4554_4F4E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtherOnConfig {
    pub upcall_slots: usize,
    /// Frames the device may hold while no receive slot is armed.
    pub pending_bound: usize,
    /// Use an SQ of its own instead of sharing one with block I/O.
    pub dedicated_sq: bool,
    /// Re-arm a slot as soon as its frame has been handed up.
    pub auto_rearm: bool,
    pub sq_depth: usize,
}

impl Default for EtherOnConfig {
    fn default() -> Self {
        Self {
            upcall_slots: 4,
            pending_bound: 256,
            dedicated_sq: true,
            auto_rearm: true,
            sq_depth: DEFAULT_SQ_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SlotState {
    /// Outstanding on the SQ, waiting for a frame.
    Armed,
    /// Completed by the device, not yet serviced by the driver.
    Delivering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UpcallSlot {
    pub command_id: u16,
    pub page: PageAddr,
    pub state: SlotState,
}

/// Receive commands the driver keeps on one SQ.
#[derive(Debug, Clone, Default)]
pub struct UpcallPool {
    capacity: usize,
    slots: BTreeMap<u16, PageAddr>,
}

impl UpcallPool {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self, ctrl: &Controller, queue: QueueId) -> Vec<UpcallSlot> {
        let qp = ctrl.queue(queue).ok();
        self.slots
            .iter()
            .map(|(&command_id, &page)| UpcallSlot {
                command_id,
                page,
                state: if qp.is_some_and(|q| q.is_outstanding(command_id)) {
                    SlotState::Armed
                } else {
                    SlotState::Delivering
                },
            })
            .collect()
    }
}

/// Frames and completions collected by one [`EtherOnDriver::service`] pass.
#[derive(Debug, Default)]
pub struct DriverOutput {
    pub frames: Vec<EthernetFrame>,
    pub rejected: Vec<EtherOnError>,
    /// Completions that belong to neither Ether-oN nor the pool (shared SQ).
    pub other: Vec<CompletionEntry>,
    pub transmitted: usize,
}

/// Host-side Ether-oN driver.
#[derive(Debug)]
pub struct EtherOnDriver {
    config: EtherOnConfig,
    queue: QueueId,
    pool: UpcallPool,
    tx_inflight: BTreeMap<u16, PageAddr>,
    next_cid: u16,
    received: u64,
}

impl EtherOnDriver {
    /// Attaches to `shared` when the config does not ask for a dedicated SQ.
    pub fn attach(ctrl: &mut Controller, config: EtherOnConfig, shared: Option<QueueId>) -> Self {
        let queue = match shared {
            Some(q) if !config.dedicated_sq => q,
            _ => ctrl.add_queue(config.sq_depth),
        };
        Self {
            config,
            queue,
            pool: UpcallPool::default(),
            tx_inflight: BTreeMap::new(),
            next_cid: 0x8000,
            received: 0,
        }
    }

    pub fn queue(&self) -> QueueId {
        self.queue
    }

    pub fn config(&self) -> &EtherOnConfig {
        &self.config
    }

    pub fn pool(&self) -> &UpcallPool {
        &self.pool
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn armed(&self, ctrl: &Controller) -> usize {
        self.pool
            .slots(ctrl, self.queue)
            .iter()
            .filter(|s| s.state == SlotState::Armed)
            .count()
    }

    fn alloc_cid(&mut self, ctrl: &Controller) -> Result<u16, EtherOnError> {
        let qp = ctrl.queue(self.queue)?;
        for _ in 0..=u16::MAX {
            let cid = self.next_cid;
            self.next_cid = self.next_cid.wrapping_add(1);
            if !qp.is_outstanding(cid) && !self.pool.slots.contains_key(&cid) {
                return Ok(cid);
            }
        }
        Err(NvmeError::QueueFull(self.queue).into())
    }

    /// Sets the pool size to `n` and submits receive commands until `n` are
    /// held. Fails without submitting anything if the SQ lacks room.
    pub fn arm_upcalls(
        &mut self,
        ctrl: &mut Controller,
        n: usize,
    ) -> Result<&UpcallPool, EtherOnError> {
        let missing = n.saturating_sub(self.pool.slots.len());
        if ctrl.queue(self.queue)?.free_slots() < missing {
            return Err(NvmeError::QueueFull(self.queue).into());
        }
        self.pool.capacity = n;
        for _ in 0..missing {
            self.arm_one(ctrl)?;
        }
        Ok(&self.pool)
    }

    fn arm_one(&mut self, ctrl: &mut Controller) -> Result<(), EtherOnError> {
        let cid = self.alloc_cid(ctrl)?;
        let page = ctrl.memory.alloc();
        let mut cmd = NvmeCommand::new(Opcode::EtherReceive, cid, 0, page);
        cmd.cdw12 = RECEPTION_CODE;
        if let Err(e) = ctrl.submit(self.queue, cmd, PcieFunction::Host) {
            ctrl.memory.free(page);
            return Err(e.into());
        }
        self.pool.slots.insert(cid, page);
        Ok(())
    }

    /// Refills the pool to its capacity.
    pub fn rearm(&mut self, ctrl: &mut Controller) -> Result<usize, EtherOnError> {
        let mut n = 0;
        while self.pool.slots.len() < self.pool.capacity {
            self.arm_one(ctrl)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn transmit(
        &mut self,
        ctrl: &mut Controller,
        frame: &EthernetFrame,
    ) -> Result<CommandTicket, EtherOnError> {
        let cid = self.alloc_cid(ctrl)?;
        let (mut cmd, page) = encode_tx(frame, cid)?;
        cmd.prp = ctrl.memory.alloc_with(page);
        match ctrl.submit(self.queue, cmd, PcieFunction::Host) {
            Ok(t) => {
                self.tx_inflight.insert(cid, cmd.prp);
                Ok(t)
            }
            Err(e) => {
                ctrl.memory.free(cmd.prp);
                Err(e.into())
            }
        }
    }

    /// Drains the CQ: decodes delivered frames, re-arms consumed slots and
    /// releases transmit pages.
    pub fn service(&mut self, ctrl: &mut Controller) -> Result<DriverOutput, EtherOnError> {
        let mut out = DriverOutput::default();
        while let Some(entry) = ctrl.queue_mut(self.queue)?.reap() {
            if let Some(page_addr) = self.pool.slots.remove(&entry.command_id) {
                let page = ctrl
                    .memory
                    .free(page_addr)
                    .ok_or(NvmeError::UnmappedPage(page_addr.0))?;
                let mut cmd =
                    NvmeCommand::new(Opcode::EtherReceive, entry.command_id, 0, page_addr);
                cmd.length = entry.result;
                match decode(&cmd, &page) {
                    Ok(f) => {
                        self.received += 1;
                        out.frames.push(f);
                    }
                    Err(e) => out.rejected.push(e),
                }
                if self.config.auto_rearm {
                    self.arm_one(ctrl)?;
                }
            } else if let Some(page_addr) = self.tx_inflight.remove(&entry.command_id) {
                ctrl.memory.free(page_addr);
                out.transmitted += 1;
            } else {
                out.other.push(entry);
            }
        }
        Ok(out)
    }
}

/// Device-side end of the tunnel.
#[derive(Debug)]
pub struct DeviceNic {
    queue: QueueId,
    armed: VecDeque<(u16, PageAddr)>,
    pending: VecDeque<EthernetFrame>,
    pending_bound: usize,
    delivered: u64,
}

impl DeviceNic {
    pub fn new(queue: QueueId, config: &EtherOnConfig) -> Self {
        Self {
            queue,
            armed: VecDeque::new(),
            pending: VecDeque::new(),
            pending_bound: config.pending_bound,
            delivered: 0,
        }
    }

    pub fn queue(&self) -> QueueId {
        self.queue
    }

    pub fn armed(&self) -> usize {
        self.armed.len()
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Fetches everything on the SQ. Transmit commands are decoded and
    /// completed; receive commands become armed slots, which are then used
    /// to flush pending frames.
    pub fn poll(&mut self, ctrl: &mut Controller) -> Result<Vec<EthernetFrame>, EtherOnError> {
        let mut inbound = Vec::new();
        for p in ctrl.process(self.queue)? {
            let Processed::Vendor { queue, cmd, .. } = p else {
                continue;
            };
            match cmd.opcode {
                Opcode::EtherReceive if cmd.cdw12 == RECEPTION_CODE => {
                    self.armed.push_back((cmd.command_id, cmd.prp))
                }
                Opcode::EtherReceive => {
                    ctrl.complete(queue, cmd.command_id, status::INVALID_FIELD, 0)?;
                }
                _ => {
                    let decoded = ctrl
                        .memory
                        .page(cmd.prp)
                        .map_err(EtherOnError::from)
                        .and_then(|pg| decode(&cmd, pg));
                    let st = if decoded.is_ok() {
                        status::SUCCESS
                    } else {
                        status::INVALID_FIELD
                    };
                    ctrl.complete(queue, cmd.command_id, st, 0)?;
                    if let Ok(f) = decoded {
                        inbound.push(f);
                    }
                }
            }
        }
        self.flush(ctrl)?;
        Ok(inbound)
    }

    /// Hands a frame to the host. Returns the MSI if an armed slot took it,
    /// `None` if it was queued behind earlier frames or for lack of a slot.
    pub fn deliver_upcall(
        &mut self,
        ctrl: &mut Controller,
        frame: EthernetFrame,
    ) -> Result<Option<MsiEvent>, EtherOnError> {
        let bytes = frame.to_bytes()?;
        if self.pending.is_empty() {
            if let Some(msi) = self.try_deliver(ctrl, &bytes)? {
                return Ok(Some(msi));
            }
        }
        if self.pending.len() >= self.pending_bound {
            return Err(EtherOnError::PendingOverflow(self.pending_bound));
        }
        self.pending.push_back(frame);
        Ok(None)
    }

    fn try_deliver(
        &mut self,
        ctrl: &mut Controller,
        bytes: &[u8],
    ) -> Result<Option<MsiEvent>, EtherOnError> {
        let Some((cid, prp)) = self.armed.pop_front() else {
            return Ok(None);
        };
        let page = ctrl.memory.page_mut(prp)?;
        page.as_bytes_mut()[..bytes.len()].copy_from_slice(bytes);
        let msi = ctrl.complete(self.queue, cid, status::SUCCESS, bytes.len() as u32)?;
        self.delivered += 1;
        Ok(Some(msi))
    }

    fn flush(&mut self, ctrl: &mut Controller) -> Result<(), EtherOnError> {
        while !self.armed.is_empty() {
            let Some(frame) = self.pending.pop_front() else {
                break;
            };
            self.try_deliver(ctrl, &frame.to_bytes()?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ether_on::{MacAddr, ETHERTYPE_IPV4};
    use crate::nvme::{NamespaceKind, NamespaceSpec, NamespaceTable, NvmeTiming};

    fn setup(config: EtherOnConfig) -> (Controller, EtherOnDriver, DeviceNic) {
        let t = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..100,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 100..200,
            },
        ])
        .unwrap();
        let mut ctrl = Controller::new(t, NvmeTiming::default());
        let drv = EtherOnDriver::attach(&mut ctrl, config, None);
        let nic = DeviceNic::new(drv.queue(), &config);
        (ctrl, drv, nic)
    }

    fn frame(tag: u8) -> EthernetFrame {
        EthernetFrame::new(
            MacAddr::from_node(0),
            MacAddr::from_node(1),
            ETHERTYPE_IPV4,
            vec![tag; 60],
        )
    }

    #[test]
    fn four_slots_armed() {
        let (mut ctrl, mut drv, _) = setup(EtherOnConfig::default());
        assert_eq!(drv.arm_upcalls(&mut ctrl, 4).unwrap().len(), 4);
        assert_eq!(drv.armed(&ctrl), 4);
        assert!(ctrl.queue(drv.queue()).unwrap().submitted() == 4);
    }

    #[test]
    fn one_frame_round_trip_restores_pool() {
        let (mut ctrl, mut drv, mut nic) = setup(EtherOnConfig::default());
        drv.arm_upcalls(&mut ctrl, 4).unwrap();
        nic.poll(&mut ctrl).unwrap();
        let msi = nic.deliver_upcall(&mut ctrl, frame(1)).unwrap();
        assert!(msi.is_some());
        assert_eq!(drv.armed(&ctrl), 3);
        let out = drv.service(&mut ctrl).unwrap();
        assert_eq!(out.frames, vec![frame(1)]);
        assert_eq!(drv.armed(&ctrl), 4);
    }

    #[test]
    fn fifth_frame_waits_for_rearm() {
        let (mut ctrl, mut drv, mut nic) = setup(EtherOnConfig::default());
        drv.arm_upcalls(&mut ctrl, 4).unwrap();
        nic.poll(&mut ctrl).unwrap();
        let delivered: Vec<_> = (0..5)
            .map(|i| nic.deliver_upcall(&mut ctrl, frame(i)).unwrap().is_some())
            .collect();
        assert_eq!(delivered, [true, true, true, true, false]);
        assert_eq!(nic.pending(), 1);
        let first = drv.service(&mut ctrl).unwrap();
        assert_eq!(first.frames.len(), 4);
        nic.poll(&mut ctrl).unwrap();
        assert_eq!(nic.pending(), 0);
        let second = drv.service(&mut ctrl).unwrap();
        assert_eq!(second.frames, vec![frame(4)]);
    }

    #[test]
    fn empty_pool_starves() {
        let (mut ctrl, mut drv, mut nic) = setup(EtherOnConfig {
            auto_rearm: false,
            ..Default::default()
        });
        assert!(drv.arm_upcalls(&mut ctrl, 0).unwrap().is_empty());
        nic.poll(&mut ctrl).unwrap();
        assert_eq!(nic.deliver_upcall(&mut ctrl, frame(0)).unwrap(), None);
        for _ in 0..3 {
            nic.poll(&mut ctrl).unwrap();
            drv.service(&mut ctrl).unwrap();
        }
        assert_eq!(nic.pending(), 1);
    }

    #[test]
    fn arm_fails_atomically_when_sq_nearly_full() {
        let (mut ctrl, mut drv, _) = setup(EtherOnConfig {
            sq_depth: 6,
            ..Default::default()
        });
        for i in 0..3 {
            drv.transmit(&mut ctrl, &frame(i)).unwrap();
        }
        assert_eq!(
            drv.arm_upcalls(&mut ctrl, 4).unwrap_err(),
            EtherOnError::Nvme(NvmeError::QueueFull(drv.queue()))
        );
        assert_eq!(drv.pool().len(), 0);
        assert_eq!(ctrl.queue(drv.queue()).unwrap().outstanding(), 3);
    }

    #[test]
    fn transmit_reaches_device() {
        let (mut ctrl, mut drv, mut nic) = setup(EtherOnConfig::default());
        drv.transmit(&mut ctrl, &frame(9)).unwrap();
        assert_eq!(nic.poll(&mut ctrl).unwrap(), vec![frame(9)]);
        assert_eq!(drv.service(&mut ctrl).unwrap().transmitted, 1);
        assert_eq!(ctrl.memory.mapped(), 0);
    }

    #[test]
    fn pending_bound_enforced() {
        let (mut ctrl, _, mut nic) = setup(EtherOnConfig {
            pending_bound: 2,
            ..Default::default()
        });
        nic.deliver_upcall(&mut ctrl, frame(0)).unwrap();
        nic.deliver_upcall(&mut ctrl, frame(1)).unwrap();
        assert_eq!(
            nic.deliver_upcall(&mut ctrl, frame(2)),
            Err(EtherOnError::PendingOverflow(2))
        );
    }
}
