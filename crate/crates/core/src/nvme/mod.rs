//! Simulated NVMe substrate.
//!
//! Commands travel host -> device through a submission queue (SQ) and come
//! back through a completion queue (CQ). Every command references exactly one
//! 4 KiB page (its PRP). The controller exposes two PCIe functions: the
//! firmware function sees every namespace, the host function only the
//! sharable one.

mod command;
mod controller;
mod memory;
mod namespace;
mod queue;

pub use command::{NvmeCommand, Opcode, COMMAND_BYTES};
pub use controller::{AccessKind, AccessRecord, Controller, NvmeTiming, Processed};
pub use memory::{HostMemory, Page, PageAddr};
pub use namespace::{Namespace, NamespaceKind, NamespaceSpec, NamespaceTable, PcieFunction};
pub use queue::{CommandTicket, CompletionEntry, MsiEvent, QueueId, QueuePair, DEFAULT_SQ_DEPTH};

use thiserror::Error;

/// Size of a PRP page and of a logical block.
pub const PAGE_SIZE: usize = 4096;

/// Completion status codes. Only success and a handful of failures are
/// distinguished.
pub mod status {
    pub const SUCCESS: u8 = 0x00;
    pub const INVALID_OPCODE: u8 = 0x01;
    pub const INVALID_FIELD: u8 = 0x02;
    pub const LBA_OUT_OF_RANGE: u8 = 0x80;
    pub const ACCESS_DENIED: u8 = 0x86;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NvmeError {
    #[error("submission queue {0} is full")]
    QueueFull(QueueId),
    #[error("command id {0} is already outstanding")]
    DuplicateCommandId(u16),
    #[error("namespace {nsid} is not visible to the {function:?} function")]
    NamespaceNotVisible { nsid: u32, function: PcieFunction },
    #[error("submission queue is empty")]
    Empty,
    #[error("command id {0} is not outstanding")]
    UnknownCommand(u16),
    #[error("command id {0} has not been fetched by the device")]
    NotFetched(u16),
    #[error("opcode {0:#04x} is not supported")]
    InvalidOpcode(u8),
    #[error("transfer length {0} exceeds one page")]
    LengthTooLarge(u32),
    #[error("PRP address {0:#x} is not page aligned")]
    UnalignedPrp(u64),
    #[error("PRP address {0:#x} is not mapped")]
    UnmappedPage(u64),
    #[error("namespace block ranges overlap")]
    OverlappingRanges,
    #[error("no {0:?} namespace declared")]
    MissingKind(NamespaceKind),
    #[error("more than one {0:?} namespace declared")]
    DuplicateKind(NamespaceKind),
    #[error("namespace block range is empty")]
    EmptyRange,
    #[error("unknown queue {0}")]
    UnknownQueue(QueueId),
}
