//! Event-level replay of a workload through the simulator.
//!
//! Every counted event is executed by the component that owns it:
//! packets and LBA handshakes cross Ether-oN, I/O requests are NVMe reads,
//! syscalls and path walks run through Virtual-FW, and compute time is
//! charged by the firmware scheduler. Each executed event is charged the
//! unit cost from the replay's own cost table, so the result can be
//! checked against [`evaluate`](super::evaluate) per component.

use std::fmt::Display;

use rand::Rng;
use serde::Serialize;

use super::{
    evaluate, Breakdown, Component, CostParam, CostTable, LatencyError, ModelKind,
    WorkloadDescriptor,
};
use crate::ether_on::{
    DeviceNic, EtherOnConfig, EtherOnDriver, EthernetFrame, MacAddr, ETHERTYPE_IPV4,
};
use crate::lambda_fs::{LambdaFs, SyncKind, SyncMessage};
use crate::nvme::{
    Controller, NamespaceKind, NamespaceSpec, NamespaceTable, NvmeCommand, NvmeTiming,
    PcieFunction, QueueId, PAGE_SIZE,
};
use crate::virtual_fw::{Arg, ExecMode, FwConfig, RootfsView, SyscallInvocation, Tid, VirtualFw};

/// Upper bound on events per replay.
pub const MAX_REPLAY_EVENTS: u64 = 100_000;

const SHARED_BLOCKS: u64 = 4096;
const IO_QUEUE_DEPTH: usize = 64;
const SCHED_TICKS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentDelta {
    pub component: Component,
    pub analytical: f64,
    pub replayed: f64,
    /// |replayed - analytical| / analytical; 0 when both are 0.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub workload: String,
    pub model: ModelKind,
    pub events: u64,
    pub analytical: Breakdown,
    pub replayed: Breakdown,
    pub deltas: Vec<ComponentDelta>,
}

impl ReplayReport {
    /// Components whose relative delta exceeds `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<Component> {
        self.deltas
            .iter()
            .filter(|d| d.relative > tolerance)
            .map(|d| d.component)
            .collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.failures(tolerance).is_empty()
    }
}

fn sim<T, E: Display>(r: Result<T, E>) -> Result<T, LatencyError> {
    r.map_err(|e| LatencyError::Replay(e.to_string()))
}

struct AnyEntry;

impl RootfsView for AnyEntry {
    fn has_entry(&self, _: &str) -> bool {
        true
    }
}

struct Rig {
    ctrl: Controller,
    driver: EtherOnDriver,
    nic: DeviceNic,
    fw: VirtualFw,
    tid: Tid,
    io_queue: QueueId,
    shared_nsid: u32,
    host: MacAddr,
    device: MacAddr,
}

impl Rig {
    fn new(fw_config: FwConfig) -> Result<Self, LatencyError> {
        let table = sim(NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..1024,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 1024..1024 + SHARED_BLOCKS,
            },
        ]))?;
        let shared_nsid = table.by_kind(NamespaceKind::Sharable).nsid;
        let fs = sim(LambdaFs::mkfs(table.all()))?;
        let mut ctrl = Controller::new(table, NvmeTiming::default());
        let eo = EtherOnConfig::default();
        let mut driver = EtherOnDriver::attach(&mut ctrl, eo, None);
        sim(driver.arm_upcalls(&mut ctrl, eo.upcall_slots))?;
        let nic = DeviceNic::new(driver.queue(), &eo);
        let io_queue = ctrl.add_queue(IO_QUEUE_DEPTH);
        let mut fw = VirtualFw::new(fw_config, fs, [10, 0, 0, 2].into());
        let tid = sim(fw.spawn_container_thread("replay", "/replay", &AnyEntry))?.tid;
        Ok(Self {
            ctrl,
            driver,
            nic,
            fw,
            tid,
            io_queue,
            shared_nsid,
            host: MacAddr::from_node(0),
            device: MacAddr::from_node(1),
        })
    }

    /// Host-to-device frame; returns whether it arrived intact.
    fn send_down(&mut self, frame: &EthernetFrame) -> Result<bool, LatencyError> {
        sim(self.driver.transmit(&mut self.ctrl, frame))?;
        let got = sim(self.nic.poll(&mut self.ctrl))?;
        sim(self.driver.service(&mut self.ctrl))?;
        Ok(got.iter().any(|f| f == frame))
    }

    /// Bind and ack for one file; returns whether the ack reached the host.
    fn handshake(&mut self, seq: u64, path: &str) -> Result<bool, LatencyError> {
        let ino = sim(self.fw.fs.image.lookup(path, PcieFunction::Host))?;
        let bind = SyncMessage {
            seq,
            kind: SyncKind::Bind,
            path: path.to_string(),
            ino,
        };
        if !self.send_down(&bind.to_frame(self.device, self.host))? {
            return Ok(false);
        }
        let ack = bind.ack();
        sim(self
            .nic
            .deliver_upcall(&mut self.ctrl, ack.to_frame(self.host, self.device)))?;
        let out = sim(self.driver.service(&mut self.ctrl))?;
        Ok(out
            .frames
            .iter()
            .filter_map(SyncMessage::from_frame)
            .any(|m| m == ack))
    }

    fn syscall(&mut self, name: &str, args: Vec<Arg>) -> Result<i64, LatencyError> {
        Ok(sim(self
            .fw
            .emulate(&SyscallInvocation::new(self.tid, name, args)))?
        .ret)
    }

    /// Reads `bytes` as page-sized NVMe commands. Returns the bytes that
    /// completed successfully and, when `copy` is set, copies them once
    /// more into a second buffer.
    fn read_request(
        &mut self,
        function: PcieFunction,
        first_lba: u64,
        bytes: u64,
        copy: &mut Option<Vec<u8>>,
    ) -> Result<u64, LatencyError> {
        let mut done = 0;
        let mut left = bytes;
        let mut lba = first_lba;
        let mut inflight = Vec::new();
        let mut next_cid: u16 = 0;
        while left > 0 || !inflight.is_empty() {
            let free = sim(self.ctrl.queue(self.io_queue))?.free_slots();
            if left > 0 && free > 0 {
                let len = left.min(PAGE_SIZE as u64);
                let prp = self.ctrl.memory.alloc();
                next_cid = next_cid.wrapping_add(1).max(1);
                let cid = next_cid;
                let mut cmd = NvmeCommand::read(cid, self.shared_nsid, lba % SHARED_BLOCKS, prp);
                cmd.length = len as u32;
                sim(self.ctrl.submit(self.io_queue, cmd, function))?;
                inflight.push((cid, prp, len));
                left -= len;
                lba += 1;
                continue;
            }
            sim(self.ctrl.process(self.io_queue))?;
            let q = sim(self.ctrl.queue_mut(self.io_queue))?;
            let mut reaped = Vec::new();
            while let Some(c) = q.reap() {
                reaped.push(c);
            }
            for c in reaped {
                let Some(pos) = inflight.iter().position(|(cid, _, _)| *cid == c.command_id) else {
                    return Err(LatencyError::Replay(format!(
                        "unexpected completion {}",
                        c.command_id
                    )));
                };
                let (_, prp, len) = inflight.swap_remove(pos);
                let page = self
                    .ctrl
                    .memory
                    .free(prp)
                    .ok_or_else(|| LatencyError::Replay("lost PRP page".into()))?;
                if c.status == 0 {
                    done += len;
                    if let Some(buf) = copy.as_mut() {
                        buf.clear();
                        buf.extend_from_slice(&page.as_bytes()[..len as usize]);
                    }
                }
            }
        }
        Ok(done)
    }
}

fn cost(t: &CostTable, model: ModelKind, p: CostParam) -> Result<f64, LatencyError> {
    t.get(p)
        .ok_or(LatencyError::MissingCalibration { model, param: p })
}

/// Replays `w` under `model`, charging events from `simulated`, and
/// compares with the analytical breakdown under `analytical`.
pub fn replay(
    w: &WorkloadDescriptor,
    model: ModelKind,
    analytical: &CostTable,
    simulated: &CostTable,
) -> Result<ReplayReport, LatencyError> {
    w.validate()?;
    if w.event_count() > MAX_REPLAY_EVENTS {
        return Err(LatencyError::InvalidWorkload(format!(
            "{} events exceed the replay limit {MAX_REPLAY_EVENTS}",
            w.event_count()
        )));
    }
    let expected = evaluate(w, &model.into(), analytical)?;
    simulated.covers(model)?;
    simulated.validate()?;
    let c = |p| cost(simulated, model, p);
    use CostParam::*;
    let clock = if model.on_device() {
        c(ClockRatio)?
    } else {
        1.0
    };

    let per_syscall = match model {
        ModelKind::Host => c(HostSyscall)?,
        ModelKind::PIspR | ModelKind::PIspV => c(BareSyscall)?,
        ModelKind::DNaive | ModelKind::DFullOs => c(HostSyscall)? * c(OsStackSurcharge)?,
        ModelKind::DVirtFw => c(EmulatedSyscall)?,
    }
    .round() as u64;
    let walk_clock = if matches!(
        model,
        ModelKind::DNaive | ModelKind::DFullOs | ModelKind::DVirtFw
    ) {
        clock
    } else {
        1.0
    };
    let walk_ns = (c(WalkPerPath)? * walk_clock).round() as u64;
    let compute_target = (w.reference_exec_ns as f64 * c(ComputePerRefNs)? * clock).round() as u64;
    let mut fw_config = FwConfig {
        cores: 1,
        quantum_ns: compute_target.div_ceil(SCHED_TICKS).max(1),
        walk_lookup_ns: walk_ns,
        walk_hit_ns: walk_ns,
        ..FwConfig::default()
    };
    if model.is_pisp() {
        fw_config.mode = ExecMode::FullOs;
        fw_config.full_os_syscall_ns = per_syscall;
        fw_config.context_switch_ns = c(CtxPerSyscall)?.round() as u64;
        fw_config.emulated_syscall_ns = per_syscall.min(fw_config.full_os_syscall_ns);
    } else {
        fw_config.mode = ExecMode::Emulated;
        fw_config.emulated_syscall_ns = per_syscall;
        fw_config.full_os_syscall_ns = per_syscall.max(fw_config.full_os_syscall_ns);
    }
    let mut rig = Rig::new(fw_config)?;

    // Setup is not charged.
    let files: Vec<String> = (0..w.files_opened).map(|i| format!("/f{i}")).collect();
    for f in &files {
        sim(rig.fw.fs.image.create(f, PcieFunction::Host))?;
    }
    sim(rig.fw.fs.image.mkdir("/w", PcieFunction::Host))?;
    let base = rig.fw.stats().clone();

    let mut out = Breakdown::default();

    // Network: workload packets, plus one RPC frame per syscall for P.ISP-R.
    let mut network = 0.0;
    for i in 0..w.tcp_packets {
        let f = EthernetFrame::new(
            rig.device,
            rig.host,
            ETHERTYPE_IPV4,
            (i as u32).to_be_bytes().repeat(16),
        );
        if rig.send_down(&f)? {
            network += c(NetPerPacket)?;
        }
    }
    if model == ModelKind::PIspR {
        for i in 0..w.syscall_count {
            let f = EthernetFrame::new(
                rig.device,
                rig.host,
                ETHERTYPE_IPV4,
                (i as u32).to_le_bytes().repeat(8),
            );
            if rig.send_down(&f)? {
                network += c(RpcPerSyscall)?;
            }
        }
    }
    out.set(Component::Network, network);

    // LBA-set: one bind/ack round trip per file for P.ISP.
    if model.is_pisp() {
        let mut done = 0u64;
        for (i, f) in files.iter().enumerate() {
            if rig.handshake(i as u64 + 1, f)? {
                done += 1;
            }
        }
        out.set(Component::LbaSet, done as f64 * c(HandshakePerFile)?);
    }

    // Storage.
    let function = if model == ModelKind::Host {
        PcieFunction::Host
    } else {
        PcieFunction::Firmware
    };
    let per_byte = c(FlashPerByte)?
        + match model {
            ModelKind::Host => c(PciePerByte)?,
            _ => 0.0,
        };
    let mut copy_buf = (model == ModelKind::DNaive).then(Vec::new);
    let (mut requests, mut bytes, mut copied) = (0u64, 0u64, 0u64);
    for i in 0..w.io_count {
        let size = (i + 1) * w.io_bytes / w.io_count - i * w.io_bytes / w.io_count;
        let got = rig.read_request(function, i * 7, size, &mut copy_buf)?;
        if got == size {
            requests += 1;
        }
        bytes += got;
        if copy_buf.is_some() {
            copied += got;
        }
    }
    let copy_cost = if model == ModelKind::DNaive {
        copied as f64 * c(CopyPerByte)?
    } else {
        0.0
    };
    out.set(
        Component::Storage,
        requests as f64 * c(IoPerRequest)? + bytes as f64 * per_byte + copy_cost,
    );

    // System and Kernel-ctx: opens and closes first, then filler calls;
    // opens count toward the path walks.
    let opens = w.files_opened.min(w.syscall_count / 2);
    let mut issued = 0;
    for f in files.iter().take(opens as usize) {
        let fd = rig.syscall("openat", vec![Arg::Str(f.clone()), Arg::Int(0)])?;
        rig.syscall("close", vec![Arg::Int(fd)])?;
        issued += 2;
    }
    for _ in issued..w.syscall_count {
        rig.syscall("brk", vec![Arg::Int(0)])?;
    }
    for i in opens..w.path_walk_count {
        let path = if files.is_empty() {
            "/w".to_string()
        } else {
            files[(i % files.len() as u64) as usize].clone()
        };
        sim(rig.fw.path_walk(&path))?;
    }
    let stats = rig.fw.stats();
    out.set(
        Component::System,
        (stats.syscall_ns - base.syscall_ns + stats.walk_ns - base.walk_ns) as f64,
    );
    out.set(
        Component::KernelCtx,
        (stats.kernel_ctx_ns - base.kernel_ctx_ns) as f64,
    );

    // Compute.
    let before = rig.fw.sched.thread(rig.tid).map(|t| t.cpu_ns).unwrap_or(0);
    rig.fw.sched.run_for(compute_target);
    let after = rig.fw.sched.thread(rig.tid).map(|t| t.cpu_ns).unwrap_or(0);
    out.set(Component::Compute, (after - before) as f64);

    let deltas = Component::ALL
        .into_iter()
        .map(|comp| {
            let (a, r) = (expected.get(comp), out.get(comp));
            let relative = if a == 0.0 && r == 0.0 {
                0.0
            } else if a == 0.0 {
                f64::INFINITY
            } else {
                (r - a).abs() / a
            };
            ComponentDelta {
                component: comp,
                analytical: a,
                replayed: r,
                relative,
            }
        })
        .collect();
    Ok(ReplayReport {
        workload: w.name.clone(),
        model,
        events: w.event_count(),
        analytical: expected,
        replayed: out,
        deltas,
    })
}

/// A random workload with at most `max_events` events.
pub fn synthetic_workload(rng: &mut impl Rng, name: &str, max_events: u64) -> WorkloadDescriptor {
    let budget = max_events.max(6);
    let mut take = |share: u64| rng.gen_range(0..=budget * share / 100);
    let io_count = take(30);
    let syscall_count = take(25);
    let files_opened = take(5);
    let path_walk_count = take(20).max(files_opened.min(syscall_count / 2));
    let tcp_packets = take(20);
    WorkloadDescriptor {
        name: name.to_string(),
        io_bytes: io_count * rng.gen_range(512..=65_536),
        io_count,
        syscall_count,
        path_walk_count,
        files_opened,
        tcp_packets,
        reference_exec_ns: rng.gen_range(0..=50_000_000),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn costs() -> CostTable {
        crate::defaults::defaults().latency.costs.clone()
    }

    fn small() -> WorkloadDescriptor {
        WorkloadDescriptor {
            name: "small".into(),
            io_bytes: 100 * 16_384 + 77,
            io_count: 100,
            syscall_count: 60,
            path_walk_count: 40,
            files_opened: 10,
            tcp_packets: 30,
            reference_exec_ns: 2_000_000,
        }
    }

    #[test]
    fn every_model_agrees() {
        for m in ModelKind::ALL {
            let r = replay(&small(), m, &costs(), &costs()).unwrap();
            assert!(r.passes(0.10), "{m}: {:#?}", r.deltas);
            assert!(
                r.deltas.iter().all(|d| d.relative < 0.001),
                "{m}: {:#?}",
                r.deltas
            );
        }
    }

    #[test]
    fn empty_workload_is_zero() {
        let w = WorkloadDescriptor {
            name: "zero".into(),
            io_bytes: 0,
            io_count: 0,
            syscall_count: 0,
            path_walk_count: 0,
            files_opened: 0,
            tcp_packets: 0,
            reference_exec_ns: 0,
        };
        let r = replay(&w, ModelKind::PIspR, &costs(), &costs()).unwrap();
        assert_eq!(r.analytical.total(), 0.0);
        assert_eq!(r.replayed.total(), 0.0);
    }

    #[test]
    fn miscalibrated_replay_names_the_component() {
        let wrong = costs().with(CostParam::HandshakePerFile, 30_000.0);
        let r = replay(&small(), ModelKind::PIspV, &costs(), &wrong).unwrap();
        assert_eq!(r.failures(0.10), vec![Component::LbaSet]);
    }

    #[test]
    fn oversized_workload_rejected() {
        let mut w = small();
        w.tcp_packets = MAX_REPLAY_EVENTS;
        assert!(matches!(
            replay(&w, ModelKind::Host, &costs(), &costs()),
            Err(LatencyError::InvalidWorkload(_))
        ));
    }
}
