use std::fmt;

use super::EtherOnError;
use crate::nvme::{NvmeCommand, Opcode, Page, PageAddr};

pub const HEADER_LEN: usize = 14;
pub const FCS_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 1500;
pub const MAX_FRAME: usize = HEADER_LEN + MAX_PAYLOAD + FCS_LEN;
pub const MIN_FRAME: usize = 64;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
/// Local experimental ethertype used for namespace synchronization messages.
pub const ETHERTYPE_SYNC: u16 = 0x88B5;

#[derive(
    Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, serde::Serialize, serde::Deserialize,
)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    /// Locally administered address derived from a node id.
    pub fn from_node(id: u32) -> Self {
        let b = id.to_be_bytes();
        MacAddr([0x02, 0x00, b[0], b[1], b[2], b[3]])
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

/// An Ethernet II frame. The FCS is computed on encode and checked on
/// decode, so it is not stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EthernetFrame {
    pub dst: MacAddr,
    pub src: MacAddr,
    pub ethertype: u16,
    pub payload: Vec<u8>,
}

impl EthernetFrame {
    pub fn new(dst: MacAddr, src: MacAddr, ethertype: u16, payload: Vec<u8>) -> Self {
        Self {
            dst,
            src,
            ethertype,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + FCS_LEN
    }

    /// Wire bytes: `[dst 6][src 6][ethertype 2, big-endian][payload][fcs 4, little-endian]`.
    pub fn to_bytes(&self) -> Result<Vec<u8>, EtherOnError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(EtherOnError::FrameTooLarge(self.encoded_len()));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.dst.0);
        out.extend_from_slice(&self.src.0);
        out.extend_from_slice(&self.ethertype.to_be_bytes());
        out.extend_from_slice(&self.payload);
        let fcs = crc32fast::hash(&out);
        out.extend_from_slice(&fcs.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EtherOnError> {
        if bytes.len() < HEADER_LEN + FCS_LEN {
            return Err(EtherOnError::MalformedFrame(format!(
                "{} bytes is shorter than a header",
                bytes.len()
            )));
        }
        if bytes.len() > MAX_FRAME {
            return Err(EtherOnError::MalformedFrame(format!(
                "{} bytes exceeds {MAX_FRAME}",
                bytes.len()
            )));
        }
        let (body, fcs) = bytes.split_at(bytes.len() - FCS_LEN);
        let stored = u32::from_le_bytes(fcs.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(EtherOnError::BadChecksum { stored, computed });
        }
        Ok(Self {
            dst: MacAddr(body[0..6].try_into().unwrap()),
            src: MacAddr(body[6..12].try_into().unwrap()),
            ethertype: u16::from_be_bytes([body[12], body[13]]),
            payload: body[HEADER_LEN..].to_vec(),
        })
    }
}

/// Packs a frame into a transmit command and its page. The command's PRP
/// is left at zero; the caller maps the page and patches it in.
pub fn encode_tx(
    frame: &EthernetFrame,
    command_id: u16,
) -> Result<(NvmeCommand, Page), EtherOnError> {
    let bytes = frame.to_bytes()?;
    let page = Page::from_prefix(&bytes).ok_or(EtherOnError::FrameTooLarge(bytes.len()))?;
    let mut cmd = NvmeCommand::new(Opcode::EtherTransmit, command_id, 0, PageAddr(0));
    cmd.length = bytes.len() as u32;
    Ok((cmd, page))
}

/// Reconstructs the frame held in the first `cmd.length` bytes of `page`.
pub fn decode(cmd: &NvmeCommand, page: &Page) -> Result<EthernetFrame, EtherOnError> {
    if !cmd.opcode.is_vendor() {
        return Err(EtherOnError::WrongOpcode(cmd.opcode.code()));
    }
    let len = cmd.length as usize;
    if len > page.as_bytes().len() {
        return Err(EtherOnError::MalformedFrame(format!(
            "length {len} exceeds page"
        )));
    }
    EthernetFrame::from_bytes(&page.as_bytes()[..len])
}
