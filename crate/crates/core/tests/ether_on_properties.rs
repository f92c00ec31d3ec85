use dockerssd::ether_on::{
    decode, encode_tx, DeviceNic, EtherOnConfig, EtherOnDriver, EtherOnError, EthernetFrame,
    MacAddr, MAX_PAYLOAD,
};
use dockerssd::nvme::{
    Controller, NamespaceKind, NamespaceSpec, NamespaceTable, NvmeCommand, NvmeTiming, Page,
    PcieFunction,
};
use proptest::prelude::*;

/// Reflected CRC-32 (polynomial 0xEDB88320), one bit at a time.
fn crc32_bitwise(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in data {
        crc ^= byte as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

fn controller() -> Controller {
    let t = NamespaceTable::define(&[
        NamespaceSpec {
            kind: NamespaceKind::Private,
            blocks: 0..64,
        },
        NamespaceSpec {
            kind: NamespaceKind::Sharable,
            blocks: 64..256,
        },
    ])
    .unwrap();
    Controller::new(
        t,
        NvmeTiming {
            fetch_ns: 10,
            complete_ns: 20,
        },
    )
}

fn arb_frame() -> impl Strategy<Value = EthernetFrame> {
    (
        any::<[u8; 6]>(),
        any::<[u8; 6]>(),
        any::<u16>(),
        prop::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD),
    )
        .prop_map(|(d, s, t, p)| EthernetFrame::new(MacAddr(d), MacAddr(s), t, p))
}

fn unhex(s: &str) -> Vec<u8> {
    if s == "-" {
        return Vec::new();
    }
    hex::decode(s).unwrap()
}

#[test]
fn golden_vectors() {
    let text = include_str!("golden/ether_on_frames.txt");
    let mut n = 0;
    for line in text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
    {
        let f: Vec<&str> = line.split_whitespace().collect();
        let frame = EthernetFrame::new(
            MacAddr(unhex(f[1]).try_into().unwrap()),
            MacAddr(unhex(f[2]).try_into().unwrap()),
            u16::from_str_radix(f[3], 16).unwrap(),
            unhex(f[4]),
        );
        let expected = unhex(f[5]);
        let (cmd, page) = encode_tx(&frame, 1).unwrap();
        assert_eq!(cmd.length as usize, expected.len(), "{}", f[0]);
        assert_eq!(
            &page.as_bytes()[..expected.len()],
            &expected[..],
            "{}",
            f[0]
        );
        assert_eq!(decode(&cmd, &page).unwrap(), frame, "{}", f[0]);
        n += 1;
    }
    assert_eq!(n, 4);
}

#[test]
fn ten_thousand_random_round_trips() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xE0E1);
    for _ in 0..10_000 {
        let len = rng.gen_range(0..=MAX_PAYLOAD);
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let f = EthernetFrame::new(MacAddr(rng.gen()), MacAddr(rng.gen()), rng.gen(), payload);
        let (cmd, page) = encode_tx(&f, rng.gen()).unwrap();
        let bytes = &page.as_bytes()[..cmd.length as usize];
        let (body, fcs) = bytes.split_at(bytes.len() - 4);
        assert_eq!(
            u32::from_le_bytes(fcs.try_into().unwrap()),
            crc32_bitwise(body)
        );
        assert_eq!(decode(&cmd, &page).unwrap(), f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip(f in arb_frame()) {
        let (cmd, page) = encode_tx(&f, 0).unwrap();
        prop_assert_eq!(decode(&cmd, &page).unwrap(), f);
    }

    #[test]
    fn single_bit_flips_are_caught(f in arb_frame(), bit in any::<prop::sample::Index>()) {
        let (cmd, mut page) = encode_tx(&f, 0).unwrap();
        let nbits = cmd.length as usize * 8;
        let b = bit.index(nbits);
        page.as_bytes_mut()[b / 8] ^= 1 << (b % 8);
        let bytes = &page.as_bytes()[..cmd.length as usize];
        let (body, fcs) = bytes.split_at(bytes.len() - 4);
        prop_assert_ne!(u32::from_le_bytes(fcs.try_into().unwrap()), crc32_bitwise(body));
        let is_bad_checksum = matches!(decode(&cmd, &page), Err(EtherOnError::BadChecksum { .. }));
        prop_assert!(is_bad_checksum);
    }

    /// Random interleaving of device sends, device polls and driver
    /// services: no frame is lost or reordered, the pool never exceeds its
    /// size and is full again once everything has drained.
    #[test]
    fn upcall_conservation(ops in prop::collection::vec(0u8..3, 1..400), slots in 1usize..6) {
        let mut ctrl = controller();
        let config = EtherOnConfig { upcall_slots: slots, ..Default::default() };
        let mut drv = EtherOnDriver::attach(&mut ctrl, config, None);
        let mut nic = DeviceNic::new(drv.queue(), &config);
        drv.arm_upcalls(&mut ctrl, slots).unwrap();
        let mut sent = Vec::new();
        let mut got = Vec::new();
        for op in ops {
            match op {
                0 => {
                    let f = EthernetFrame::new(MacAddr::from_node(0), MacAddr::from_node(1), 0x0800, (sent.len() as u32).to_be_bytes().to_vec());
                    nic.deliver_upcall(&mut ctrl, f.clone()).unwrap();
                    sent.push(f);
                }
                1 => { nic.poll(&mut ctrl).unwrap(); }
                _ => got.extend(drv.service(&mut ctrl).unwrap().frames),
            }
            prop_assert!(drv.pool().len() <= slots);
            prop_assert!(drv.armed(&ctrl) <= slots);
            let in_flight = sent.len() - got.len();
            let delivering = drv.pool().len() - drv.armed(&ctrl);
            prop_assert_eq!(in_flight, nic.pending() + delivering);
        }
        for _ in 0..(sent.len() + 2) {
            nic.poll(&mut ctrl).unwrap();
            got.extend(drv.service(&mut ctrl).unwrap().frames);
        }
        nic.poll(&mut ctrl).unwrap();
        prop_assert_eq!(&got, &sent);
        prop_assert_eq!(drv.armed(&ctrl), slots);
    }
}

/// Runs block writes on one SQ and Ether-oN traffic on another, either
/// interleaved or strictly one after the other.
fn mixed_run(interleave: bool) -> (Vec<EthernetFrame>, Vec<Vec<u8>>) {
    let mut ctrl = controller();
    let config = EtherOnConfig::default();
    let mut drv = EtherOnDriver::attach(&mut ctrl, config, None);
    let mut nic = DeviceNic::new(drv.queue(), &config);
    let blk = ctrl.add_queue(64);
    drv.arm_upcalls(&mut ctrl, 4).unwrap();
    let frames: Vec<EthernetFrame> = (0..20u8)
        .map(|i| {
            EthernetFrame::new(
                MacAddr::from_node(1),
                MacAddr::from_node(0),
                0x0800,
                vec![i; 100 + i as usize],
            )
        })
        .collect();
    let mut received = Vec::new();
    let mut net_step = |ctrl: &mut Controller, i: usize, received: &mut Vec<EthernetFrame>| {
        drv.transmit(ctrl, &frames[i]).unwrap();
        for f in nic.poll(ctrl).unwrap() {
            nic.deliver_upcall(ctrl, f).unwrap();
        }
        received.extend(drv.service(ctrl).unwrap().frames);
    };
    let block_step = |ctrl: &mut Controller, i: usize| {
        let page = ctrl
            .memory
            .alloc_with(Page::from_prefix(&[i as u8 + 1; 512]).unwrap());
        ctrl.submit(
            blk,
            NvmeCommand::write(i as u16, 2, i as u64, page),
            PcieFunction::Host,
        )
        .unwrap();
        ctrl.process(blk).unwrap();
        ctrl.queue_mut(blk).unwrap().reap();
        ctrl.memory.free(page);
    };
    if interleave {
        for i in 0..20 {
            block_step(&mut ctrl, i);
            net_step(&mut ctrl, i, &mut received);
        }
    } else {
        for i in 0..20 {
            net_step(&mut ctrl, i, &mut received);
        }
        for i in 0..20 {
            block_step(&mut ctrl, i);
        }
    }
    let blocks = (64..84)
        .map(|b| ctrl.media_block(b).unwrap().as_bytes().to_vec())
        .collect();
    (received, blocks)
}

#[test]
fn network_and_block_traffic_are_independent() {
    let (f1, b1) = mixed_run(true);
    let (f2, b2) = mixed_run(false);
    assert_eq!(f1.len(), 20);
    assert_eq!(f1, f2);
    assert_eq!(b1, b2);
}
