use super::{NvmeError, PageAddr, PAGE_SIZE};

/// Size of a serialized submission queue entry.
pub const COMMAND_BYTES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Write,
    Read,
    /// Vendor-specific: host-to-device Ethernet frame.
    EtherTransmit,
    /// Vendor-specific: pre-armed receive slot for device-to-host frames.
    EtherReceive,
}

impl Opcode {
    pub const fn code(self) -> u8 {
        match self {
            Opcode::Write => 0x01,
            Opcode::Read => 0x02,
            Opcode::EtherTransmit => 0xE0,
            Opcode::EtherReceive => 0xE1,
        }
    }

    pub const fn is_vendor(self) -> bool {
        matches!(self, Opcode::EtherTransmit | Opcode::EtherReceive)
    }
}

impl TryFrom<u8> for Opcode {
    type Error = NvmeError;

    fn try_from(code: u8) -> Result<Self, Self::Error> {
        match code {
            0x01 => Ok(Opcode::Write),
            0x02 => Ok(Opcode::Read),
            0xE0 => Ok(Opcode::EtherTransmit),
            0xE1 => Ok(Opcode::EtherReceive),
            other => Err(NvmeError::InvalidOpcode(other)),
        }
    }
}

/// One submission queue entry.
///
/// Serialized layout (little-endian), 64 bytes:
///
/// | bytes  | field                                  |
/// |--------|----------------------------------------|
/// | 0      | opcode                                 |
/// | 1      | flags (always 0)                       |
/// | 2..4   | command id                             |
/// | 4..8   | namespace id                           |
/// | 24..32 | PRP entry 1 (page address)             |
/// | 40..48 | starting LBA (dwords 10-11)            |
/// | 48..52 | dword 12 (reception code for 0xE1)     |
/// | 52..56 | dword 13: transfer length in bytes     |
///
/// All other bytes are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NvmeCommand {
    pub opcode: Opcode,
    pub command_id: u16,
    pub nsid: u32,
    pub prp: PageAddr,
    pub lba: u64,
    pub cdw12: u32,
    pub length: u32,
}

impl NvmeCommand {
    pub fn new(opcode: Opcode, command_id: u16, nsid: u32, prp: PageAddr) -> Self {
        Self {
            opcode,
            command_id,
            nsid,
            prp,
            lba: 0,
            cdw12: 0,
            length: PAGE_SIZE as u32,
        }
    }

    pub fn read(command_id: u16, nsid: u32, lba: u64, prp: PageAddr) -> Self {
        Self {
            lba,
            ..Self::new(Opcode::Read, command_id, nsid, prp)
        }
    }

    pub fn write(command_id: u16, nsid: u32, lba: u64, prp: PageAddr) -> Self {
        Self {
            lba,
            ..Self::new(Opcode::Write, command_id, nsid, prp)
        }
    }

    /// Checks the single-page PRP invariants.
    pub fn validate(&self) -> Result<(), NvmeError> {
        if !self.prp.is_aligned() {
            return Err(NvmeError::UnalignedPrp(self.prp.0));
        }
        if self.length as usize > PAGE_SIZE {
            return Err(NvmeError::LengthTooLarge(self.length));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; COMMAND_BYTES] {
        let mut b = [0u8; COMMAND_BYTES];
        b[0] = self.opcode.code();
        b[2..4].copy_from_slice(&self.command_id.to_le_bytes());
        b[4..8].copy_from_slice(&self.nsid.to_le_bytes());
        b[24..32].copy_from_slice(&self.prp.0.to_le_bytes());
        b[40..48].copy_from_slice(&self.lba.to_le_bytes());
        b[48..52].copy_from_slice(&self.cdw12.to_le_bytes());
        b[52..56].copy_from_slice(&self.length.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; COMMAND_BYTES]) -> Result<Self, NvmeError> {
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        Ok(Self {
            opcode: Opcode::try_from(b[0])?,
            command_id: u16::from_le_bytes([b[2], b[3]]),
            nsid: u32_at(4),
            prp: PageAddr(u64_at(24)),
            lba: u64_at(40),
            cdw12: u32_at(48),
            length: u32_at(52),
        })
    }
}
