//! `net-test`: Ether-oN codec and tunnel, upcall bursts, and namespace
//! isolation under random traffic.

use dockerssd::ether_on::{
    decode, encode_tx, DeviceNic, EtherOnConfig, EtherOnDriver, EtherOnError, EthernetFrame,
    MacAddr, MAX_FRAME, MAX_PAYLOAD, MIN_FRAME,
};
use dockerssd::nvme::{
    Controller, NamespaceKind, NamespaceSpec, NamespaceTable, NvmeCommand, NvmeError, NvmeTiming,
    PcieFunction, DEFAULT_SQ_DEPTH,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::scenario::NetParams;
use crate::{module, Artifacts, CliError};

const PRIVATE_BLOCKS: u64 = 1024;
const SHARABLE_BLOCKS: u64 = 7168;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodecReport {
    pub frames: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub codec_mismatches: usize,
    pub tunnel_mismatches: usize,
    pub bit_flips: u64,
    pub undetected_flips: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BurstReport {
    pub k: usize,
    pub slots: usize,
    /// Frames that found an armed slot on arrival.
    pub immediate: usize,
    /// Frames handed to the host per service round; round 0 is the burst.
    pub per_round: Vec<usize>,
    pub in_order: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsolationReport {
    pub commands: usize,
    pub host_commands: usize,
    /// Host submissions naming the private namespace, all refused.
    pub host_private_refused: usize,
    pub host_private_accepted: usize,
    pub firmware_private_accesses: usize,
    /// Successful host accesses that landed on a private block.
    pub violations: usize,
    pub audited_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetReport {
    pub seed: u64,
    pub codec: CodecReport,
    pub bursts: Vec<BurstReport>,
    pub isolation: IsolationReport,
}

impl NetReport {
    pub fn artifacts(&self) -> Artifacts {
        let mut a = Artifacts::default();
        a.json("net_report.json", self);
        let mut csv = String::from("k,slots,immediate,rounds,per_round,in_order\n");
        for b in &self.bursts {
            let rounds: Vec<String> = b.per_round.iter().map(usize::to_string).collect();
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.k,
                b.slots,
                b.immediate,
                b.per_round.len(),
                rounds.join(" "),
                b.in_order
            ));
        }
        a.text("upcall_bursts.csv", csv);
        a
    }
}

pub fn run(p: &NetParams, seed: u64) -> Result<NetReport, CliError> {
    if p.upcall_slots == 0 || p.exhaustive_flip_every == 0 {
        return Err(CliError::InvalidScenario(
            "upcall_slots and exhaustive_flip_every must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codec = codec(p, &mut rng)?;
    let bursts = (1..=p.max_burst)
        .map(|k| burst(k, p.upcall_slots))
        .collect::<Result<_, _>>()?;
    let isolation = isolation(p.isolation_commands, &mut rng)?;
    Ok(NetReport {
        seed,
        codec,
        bursts,
        isolation,
    })
}

fn controller() -> Result<Controller, CliError> {
    let t = NamespaceTable::define(&[
        NamespaceSpec {
            kind: NamespaceKind::Private,
            blocks: 0..PRIVATE_BLOCKS,
        },
        NamespaceSpec {
            kind: NamespaceKind::Sharable,
            blocks: PRIVATE_BLOCKS..PRIVATE_BLOCKS + SHARABLE_BLOCKS,
        },
    ])
    .map_err(module("namespaces"))?;
    Ok(Controller::new(t, NvmeTiming::default()))
}

/// Frames between the 64-byte minimum and the 1518-byte maximum. The first
/// two are the extremes and get exhaustive bit flips.
fn random_frame(i: usize, rng: &mut ChaCha8Rng) -> EthernetFrame {
    let min_payload = MIN_FRAME - (MAX_FRAME - MAX_PAYLOAD);
    let len = match i {
        0 => min_payload,
        1 => MAX_PAYLOAD,
        _ => rng.gen_range(min_payload..=MAX_PAYLOAD),
    };
    let payload = (0..len).map(|_| rng.gen()).collect();
    EthernetFrame::new(MacAddr(rng.gen()), MacAddr(rng.gen()), rng.gen(), payload)
}

fn codec(p: &NetParams, rng: &mut ChaCha8Rng) -> Result<CodecReport, CliError> {
    let mut ctrl = controller()?;
    let config = EtherOnConfig::default();
    let mut drv = EtherOnDriver::attach(&mut ctrl, config, None);
    let mut nic = DeviceNic::new(drv.queue(), &config);
    let mut r = CodecReport {
        frames: p.frames,
        min_len: usize::MAX,
        max_len: 0,
        codec_mismatches: 0,
        tunnel_mismatches: 0,
        bit_flips: 0,
        undetected_flips: 0,
    };
    for i in 0..p.frames {
        let f = random_frame(i, rng);
        let (cmd, mut page) = encode_tx(&f, i as u16).map_err(module("encode"))?;
        let len = cmd.length as usize;
        r.min_len = r.min_len.min(len);
        r.max_len = r.max_len.max(len);
        if decode(&cmd, &page).ok().as_ref() != Some(&f) {
            r.codec_mismatches += 1;
        }
        let bits: Vec<usize> = if i < 2 || i % p.exhaustive_flip_every == 0 {
            (0..len * 8).collect()
        } else {
            (0..p.random_flips)
                .map(|_| rng.gen_range(0..len * 8))
                .collect()
        };
        for b in bits {
            let bytes = page.as_bytes_mut();
            bytes[b / 8] ^= 1 << (b % 8);
            r.bit_flips += 1;
            if !matches!(decode(&cmd, &page), Err(EtherOnError::BadChecksum { .. })) {
                r.undetected_flips += 1;
            }
            page.as_bytes_mut()[b / 8] ^= 1 << (b % 8);
        }
        drv.transmit(&mut ctrl, &f).map_err(module("transmit"))?;
        let got = nic.poll(&mut ctrl).map_err(module("device poll"))?;
        if got.as_slice() != std::slice::from_ref(&f) {
            r.tunnel_mismatches += 1;
        }
        drv.service(&mut ctrl).map_err(module("host service"))?;
    }
    if p.frames == 0 {
        r.min_len = 0;
    }
    Ok(r)
}

/// Sends `k` frames device-to-host at once, then alternates host service
/// and device polls until all have arrived.
fn burst(k: usize, slots: usize) -> Result<BurstReport, CliError> {
    let mut ctrl = controller()?;
    let config = EtherOnConfig {
        upcall_slots: slots,
        pending_bound: k.max(1),
        ..Default::default()
    };
    let mut drv = EtherOnDriver::attach(&mut ctrl, config, None);
    let mut nic = DeviceNic::new(drv.queue(), &config);
    drv.arm_upcalls(&mut ctrl, slots).map_err(module("arm"))?;
    nic.poll(&mut ctrl).map_err(module("device poll"))?;
    let sent: Vec<EthernetFrame> = (0..k)
        .map(|i| {
            EthernetFrame::new(
                MacAddr::from_node(0),
                MacAddr::from_node(1),
                0x0800,
                (i as u32).to_be_bytes().repeat(12),
            )
        })
        .collect();
    let mut immediate = 0;
    for f in &sent {
        if nic
            .deliver_upcall(&mut ctrl, f.clone())
            .map_err(module("upcall"))?
            .is_some()
        {
            immediate += 1;
        }
    }
    let mut got = Vec::new();
    let mut per_round = Vec::new();
    for _ in 0..=k {
        let out = drv.service(&mut ctrl).map_err(module("host service"))?;
        per_round.push(out.frames.len());
        got.extend(out.frames);
        if got.len() == k {
            break;
        }
        nic.poll(&mut ctrl).map_err(module("device poll"))?;
    }
    Ok(BurstReport {
        k,
        slots,
        immediate,
        per_round,
        in_order: got == sent,
    })
}

fn isolation(commands: usize, rng: &mut ChaCha8Rng) -> Result<IsolationReport, CliError> {
    let mut c = controller()?;
    let q = c.add_queue(DEFAULT_SQ_DEPTH);
    let page = c.memory.alloc();
    let mut r = IsolationReport {
        commands,
        host_commands: 0,
        host_private_refused: 0,
        host_private_accepted: 0,
        firmware_private_accesses: 0,
        violations: 0,
        audited_records: 0,
    };
    let span = PRIVATE_BLOCKS + SHARABLE_BLOCKS + 64;
    for i in 0..commands {
        let host = rng.gen_bool(0.5);
        let function = if host {
            PcieFunction::Host
        } else {
            PcieFunction::Firmware
        };
        let nsid = rng.gen_range(0..=3);
        let lba = rng.gen_range(0..span);
        let id = i as u16;
        let cmd = if rng.gen() {
            NvmeCommand::write(id, nsid, lba, page)
        } else {
            NvmeCommand::read(id, nsid, lba, page)
        };
        if host {
            r.host_commands += 1;
        }
        match c.submit(q, cmd, function) {
            Ok(_) if host && nsid == 1 => r.host_private_accepted += 1,
            Ok(_) => {}
            Err(NvmeError::NamespaceNotVisible { .. }) if host && nsid == 1 => {
                r.host_private_refused += 1
            }
            Err(NvmeError::NamespaceNotVisible { .. }) => {}
            Err(e) => return Err(module("submit")(e)),
        }
        if c.queue(q).map_err(module("queue"))?.free_slots() == 0 || rng.gen_ratio(1, 16) {
            c.process(q).map_err(module("process"))?;
            while c.queue_mut(q).map_err(module("queue"))?.reap().is_some() {}
        }
    }
    c.process(q).map_err(module("process"))?;
    let private = c
        .namespaces()
        .by_kind(NamespaceKind::Private)
        .blocks
        .clone();
    for a in c.access_log() {
        r.audited_records += 1;
        let on_private = a.block.is_some_and(|b| private.contains(&b));
        match a.function {
            PcieFunction::Host if on_private || (a.nsid == 1 && a.status == 0) => r.violations += 1,
            PcieFunction::Firmware if on_private => r.firmware_private_accesses += 1,
            _ => {}
        }
    }
    r.violations = r.violations.max(c.host_private_violations());
    Ok(r)
}
