//! Ethernet carried inside vendor-specific NVMe commands.
//!
//! Host-to-device frames ride in transmit commands (0xE0). Device-to-host
//! frames need a command already sitting in the SQ, so the host driver keeps
//! a small pool of receive commands (0xE1) armed at all times.

mod endpoint;
mod frame;
mod upcall;

pub use endpoint::{assign_ips, ArpTable, Endpoint, EndpointRole, Subnet};
pub use frame::{
    decode, encode_tx, EthernetFrame, MacAddr, ETHERTYPE_IPV4, ETHERTYPE_SYNC, FCS_LEN, HEADER_LEN,
    MAX_FRAME, MAX_PAYLOAD, MIN_FRAME,
};
pub use upcall::{
    DeviceNic, DriverOutput, EtherOnConfig, EtherOnDriver, SlotState, UpcallPool, UpcallSlot,
    RECEPTION_CODE,
};

use thiserror::Error;

use crate::nvme::NvmeError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EtherOnError {
    #[error("frame of {0} bytes exceeds the maximum encoded size")]
    FrameTooLarge(usize),
    #[error("frame check sequence mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    BadChecksum { stored: u32, computed: u32 },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("opcode {0:#04x} is not an Ether-oN opcode")]
    WrongOpcode(u8),
    #[error("no armed receive slot")]
    NoArmedSlot,
    #[error("device pending buffer is full ({0} frames)")]
    PendingOverflow(usize),
    #[error("subnet cannot hold {requested} endpoints ({usable} usable)")]
    SubnetExhausted { requested: usize, usable: usize },
    #[error("invalid subnet: {0}")]
    InvalidSubnet(String),
    #[error(transparent)]
    Nvme(#[from] NvmeError),
}
