use crate::ether_on::{EthernetFrame, MacAddr, ETHERTYPE_SYNC};

use super::Ino;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncKind {
    /// Device tells the host a path is now shared with containers.
    Bind = 1,
    /// Host confirms it has applied a bind.
    Ack = 2,
}

/// Namespace synchronization message exchanged over Ether-oN.
///
/// Payload: `[kind 1][seq 8, BE][ino 8, BE][path utf-8]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncMessage {
    pub seq: u64,
    pub kind: SyncKind,
    pub path: String,
    pub ino: Ino,
}

impl SyncMessage {
    pub fn ack(&self) -> SyncMessage {
        SyncMessage {
            kind: SyncKind::Ack,
            ..self.clone()
        }
    }

    pub fn to_frame(&self, dst: MacAddr, src: MacAddr) -> EthernetFrame {
        let mut payload = vec![self.kind as u8];
        payload.extend_from_slice(&self.seq.to_be_bytes());
        payload.extend_from_slice(&self.ino.to_be_bytes());
        payload.extend_from_slice(self.path.as_bytes());
        EthernetFrame::new(dst, src, ETHERTYPE_SYNC, payload)
    }

    pub fn from_frame(frame: &EthernetFrame) -> Option<SyncMessage> {
        let p = &frame.payload;
        if frame.ethertype != ETHERTYPE_SYNC || p.len() < 17 {
            return None;
        }
        let kind = match p[0] {
            1 => SyncKind::Bind,
            2 => SyncKind::Ack,
            _ => return None,
        };
        Some(SyncMessage {
            kind,
            seq: u64::from_be_bytes(p[1..9].try_into().ok()?),
            ino: u64::from_be_bytes(p[9..17].try_into().ok()?),
            path: String::from_utf8(p[17..].to_vec()).ok()?,
        })
    }
}
