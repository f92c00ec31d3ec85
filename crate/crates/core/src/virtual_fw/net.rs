//! Minimal IPv4/TCP: segment codec plus a socket layer driven by the TCP
//! state machine. The link below is lossless and in order, so there are no
//! retransmission timers and TIME_WAIT expires immediately.

use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;

use serde::Serialize;

use super::tcp::{tcp_step, TcpEvent, TcpState};
use super::FwError;

pub const IPV4_HEADER: usize = 20;
pub const TCP_HEADER: usize = 20;
pub const MSS: usize = 1500 - IPV4_HEADER - TCP_HEADER;
pub const PROTO_TCP: u8 = 6;

pub mod flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TcpSegment {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub payload: Vec<u8>,
}

fn ones_complement(chunks: &[&[u8]]) -> u16 {
    let mut sum = 0u32;
    for c in chunks {
        for pair in c.chunks(2) {
            let word = if pair.len() == 2 {
                u16::from_be_bytes([pair[0], pair[1]])
            } else {
                u16::from_be_bytes([pair[0], 0])
            };
            sum += word as u32;
        }
    }
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

/// Serializes an IPv4 packet carrying one TCP segment.
pub fn encode_packet(src: Ipv4Addr, dst: Ipv4Addr, seg: &TcpSegment) -> Vec<u8> {
    let tcp_len = TCP_HEADER + seg.payload.len();
    let mut tcp = Vec::with_capacity(tcp_len);
    tcp.extend_from_slice(&seg.src_port.to_be_bytes());
    tcp.extend_from_slice(&seg.dst_port.to_be_bytes());
    tcp.extend_from_slice(&seg.seq.to_be_bytes());
    tcp.extend_from_slice(&seg.ack.to_be_bytes());
    tcp.push(5 << 4);
    tcp.push(seg.flags);
    tcp.extend_from_slice(&0xFFFFu16.to_be_bytes());
    tcp.extend_from_slice(&[0, 0, 0, 0]);
    tcp.extend_from_slice(&seg.payload);
    let pseudo = pseudo_header(src, dst, tcp_len);
    let ck = ones_complement(&[&pseudo, &tcp]);
    tcp[16..18].copy_from_slice(&ck.to_be_bytes());

    let total = IPV4_HEADER + tcp_len;
    let mut ip = vec![0x45, 0];
    ip.extend_from_slice(&(total as u16).to_be_bytes());
    ip.extend_from_slice(&[0, 0, 0x40, 0, 64, PROTO_TCP, 0, 0]);
    ip.extend_from_slice(&src.octets());
    ip.extend_from_slice(&dst.octets());
    let ck = ones_complement(&[&ip]);
    ip[10..12].copy_from_slice(&ck.to_be_bytes());
    ip.extend_from_slice(&tcp);
    ip
}

fn pseudo_header(src: Ipv4Addr, dst: Ipv4Addr, tcp_len: usize) -> Vec<u8> {
    let mut p = Vec::with_capacity(12);
    p.extend_from_slice(&src.octets());
    p.extend_from_slice(&dst.octets());
    p.extend_from_slice(&[0, PROTO_TCP]);
    p.extend_from_slice(&(tcp_len as u16).to_be_bytes());
    p
}

pub fn decode_packet(bytes: &[u8]) -> Result<(Ipv4Addr, Ipv4Addr, TcpSegment), FwError> {
    let bad = |why: &str| FwError::MalformedPacket(why.to_string());
    if bytes.len() < IPV4_HEADER + TCP_HEADER || bytes[0] != 0x45 {
        return Err(bad("not a 20-byte-header IPv4 packet"));
    }
    let total = u16::from_be_bytes([bytes[2], bytes[3]]) as usize;
    if total != bytes.len() {
        return Err(bad("length mismatch"));
    }
    if ones_complement(&[&bytes[..IPV4_HEADER]]) != 0 {
        return Err(bad("IP header checksum"));
    }
    if bytes[9] != PROTO_TCP {
        return Err(bad("not TCP"));
    }
    let src = Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]);
    let dst = Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]);
    let tcp = &bytes[IPV4_HEADER..];
    if ones_complement(&[&pseudo_header(src, dst, tcp.len()), tcp]) != 0 {
        return Err(bad("TCP checksum"));
    }
    if tcp[12] >> 4 != 5 {
        return Err(bad("TCP options unsupported"));
    }
    let u32_at = |o: usize| u32::from_be_bytes(tcp[o..o + 4].try_into().unwrap());
    Ok((
        src,
        dst,
        TcpSegment {
            src_port: u16::from_be_bytes([tcp[0], tcp[1]]),
            dst_port: u16::from_be_bytes([tcp[2], tcp[3]]),
            seq: u32_at(4),
            ack: u32_at(8),
            flags: tcp[13],
            payload: tcp[TCP_HEADER..].to_vec(),
        },
    ))
}

pub type SocketId = u32;

#[derive(Debug, Clone)]
struct Stream {
    local_port: u16,
    remote: (Ipv4Addr, u16),
    state: TcpState,
    snd_nxt: u32,
    rcv_nxt: u32,
    rx: Vec<u8>,
    listener: Option<SocketId>,
    peer_fin: bool,
}

#[derive(Debug, Clone)]
enum Socket {
    Fresh {
        port: Option<u16>,
    },
    Listener {
        port: u16,
        backlog: VecDeque<SocketId>,
    },
    Stream(Stream),
}

/// Sockets of one IP endpoint.
#[derive(Debug, Clone)]
pub struct NetStack {
    ip: Ipv4Addr,
    sockets: BTreeMap<SocketId, Socket>,
    next_id: SocketId,
    next_port: u16,
    outbox: VecDeque<(Ipv4Addr, Vec<u8>)>,
    transitions: Vec<(SocketId, TcpState, TcpEvent, TcpState)>,
    dropped: u64,
}

impl NetStack {
    pub fn new(ip: Ipv4Addr) -> Self {
        Self {
            ip,
            sockets: BTreeMap::new(),
            next_id: 1,
            next_port: 49152,
            outbox: VecDeque::new(),
            transitions: Vec::new(),
            dropped: 0,
        }
    }

    pub fn ip(&self) -> Ipv4Addr {
        self.ip
    }

    /// Every FSM transition taken, in order.
    pub fn transitions(&self) -> &[(SocketId, TcpState, TcpEvent, TcpState)] {
        &self.transitions
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn socket(&mut self) -> SocketId {
        let id = self.next_id;
        self.next_id += 1;
        self.sockets.insert(id, Socket::Fresh { port: None });
        id
    }

    fn port_taken(&self, port: u16) -> bool {
        self.sockets.values().any(|s| match s {
            Socket::Fresh { port: Some(p) } | Socket::Listener { port: p, .. } => *p == port,
            _ => false,
        })
    }

    pub fn bind(&mut self, id: SocketId, port: u16) -> Result<(), FwError> {
        if self.port_taken(port) {
            return Err(FwError::AddrInUse(port));
        }
        match self.sockets.get_mut(&id) {
            Some(Socket::Fresh { port: p }) => {
                *p = Some(port);
                Ok(())
            }
            _ => Err(FwError::BadSocket(id)),
        }
    }

    pub fn listen(&mut self, id: SocketId) -> Result<(), FwError> {
        match self.sockets.get(&id) {
            Some(Socket::Fresh { port: Some(port) }) => {
                let port = *port;
                self.record(id, TcpState::Closed, TcpEvent::PassiveOpen)?;
                self.sockets.insert(
                    id,
                    Socket::Listener {
                        port,
                        backlog: VecDeque::new(),
                    },
                );
                Ok(())
            }
            _ => Err(FwError::BadSocket(id)),
        }
    }

    pub fn accept(&mut self, id: SocketId) -> Result<Option<SocketId>, FwError> {
        match self.sockets.get_mut(&id) {
            Some(Socket::Listener { backlog, .. }) => Ok(backlog.pop_front()),
            _ => Err(FwError::BadSocket(id)),
        }
    }

    fn record(
        &mut self,
        id: SocketId,
        state: TcpState,
        event: TcpEvent,
    ) -> Result<TcpState, FwError> {
        let next = tcp_step(state, event)?;
        self.transitions.push((id, state, event, next));
        Ok(next)
    }

    fn isn(&self, local_port: u16, remote: (Ipv4Addr, u16)) -> u32 {
        let r = u32::from(remote.0);
        (r.rotate_left(7) ^ ((local_port as u32) << 16) ^ remote.1 as u32)
            .wrapping_mul(2_654_435_761)
    }

    fn emit(&mut self, stream: &Stream, flags: u8, seq: u32, payload: Vec<u8>) {
        let seg = TcpSegment {
            src_port: stream.local_port,
            dst_port: stream.remote.1,
            seq,
            ack: if flags & flags::ACK != 0 {
                stream.rcv_nxt
            } else {
                0
            },
            flags,
            payload,
        };
        self.outbox.push_back((
            stream.remote.0,
            encode_packet(self.ip, stream.remote.0, &seg),
        ));
    }

    pub fn connect(&mut self, id: SocketId, ip: Ipv4Addr, port: u16) -> Result<(), FwError> {
        let local_port = match self.sockets.get(&id) {
            Some(Socket::Fresh { port: p }) => match p {
                Some(p) => *p,
                None => {
                    let p = self.next_port;
                    self.next_port = self.next_port.wrapping_add(1).max(49152);
                    p
                }
            },
            _ => return Err(FwError::BadSocket(id)),
        };
        let state = self.record(id, TcpState::Closed, TcpEvent::ActiveOpen)?;
        let isn = self.isn(local_port, (ip, port));
        let s = Stream {
            local_port,
            remote: (ip, port),
            state,
            snd_nxt: isn.wrapping_add(1),
            rcv_nxt: 0,
            rx: Vec::new(),
            listener: None,
            peer_fin: false,
        };
        self.emit(&s, flags::SYN, isn, Vec::new());
        self.sockets.insert(id, Socket::Stream(s));
        Ok(())
    }

    fn stream_mut(&mut self, id: SocketId) -> Result<&mut Stream, FwError> {
        match self.sockets.get_mut(&id) {
            Some(Socket::Stream(s)) => Ok(s),
            _ => Err(FwError::BadSocket(id)),
        }
    }

    pub fn state(&self, id: SocketId) -> Option<TcpState> {
        match self.sockets.get(&id)? {
            Socket::Fresh { .. } => Some(TcpState::Closed),
            Socket::Listener { .. } => Some(TcpState::Listen),
            Socket::Stream(s) => Some(s.state),
        }
    }

    /// Queues `data` in MSS-sized segments.
    pub fn send(&mut self, id: SocketId, data: &[u8]) -> Result<usize, FwError> {
        let s = self.stream_mut(id)?.clone();
        if !matches!(s.state, TcpState::Established | TcpState::CloseWait) {
            return Err(FwError::NotConnected(id));
        }
        let mut seq = s.snd_nxt;
        for chunk in data.chunks(MSS) {
            self.emit(&s, flags::ACK | flags::PSH, seq, chunk.to_vec());
            seq = seq.wrapping_add(chunk.len() as u32);
        }
        self.stream_mut(id)?.snd_nxt = seq;
        Ok(data.len())
    }

    pub fn recv(&mut self, id: SocketId) -> Result<Vec<u8>, FwError> {
        Ok(std::mem::take(&mut self.stream_mut(id)?.rx))
    }

    /// Bytes waiting, or a pending connection on a listener.
    pub fn readable(&self, id: SocketId) -> bool {
        match self.sockets.get(&id) {
            Some(Socket::Listener { backlog, .. }) => !backlog.is_empty(),
            Some(Socket::Stream(s)) => !s.rx.is_empty() || s.peer_fin,
            _ => false,
        }
    }

    pub fn peer_closed(&self, id: SocketId) -> bool {
        matches!(self.sockets.get(&id), Some(Socket::Stream(s)) if s.peer_fin)
    }

    pub fn close(&mut self, id: SocketId) -> Result<(), FwError> {
        match self.sockets.get(&id).cloned() {
            None => Err(FwError::BadSocket(id)),
            Some(Socket::Fresh { .. }) => {
                self.sockets.remove(&id);
                Ok(())
            }
            Some(Socket::Listener { .. }) => {
                self.record(id, TcpState::Listen, TcpEvent::Close)?;
                self.sockets.remove(&id);
                Ok(())
            }
            Some(Socket::Stream(s)) => {
                let next = self.record(id, s.state, TcpEvent::Close)?;
                if next == TcpState::Closed {
                    self.sockets.remove(&id);
                    return Ok(());
                }
                self.emit(&s, flags::FIN | flags::ACK, s.snd_nxt, Vec::new());
                let st = self.stream_mut(id)?;
                st.snd_nxt = st.snd_nxt.wrapping_add(1);
                st.state = next;
                Ok(())
            }
        }
    }

    pub fn take_outbox(&mut self) -> Vec<(Ipv4Addr, Vec<u8>)> {
        self.outbox.drain(..).collect()
    }

    /// Handles one inbound packet. Returns false if it matched no socket.
    pub fn ingest(&mut self, packet: &[u8]) -> Result<bool, FwError> {
        let (src, dst, seg) = decode_packet(packet)?;
        if dst != self.ip {
            self.dropped += 1;
            return Ok(false);
        }
        let found = self.sockets.iter().find_map(|(id, s)| match s {
            Socket::Stream(st)
                if st.local_port == seg.dst_port && st.remote == (src, seg.src_port) =>
            {
                Some(*id)
            }
            _ => None,
        });
        if let Some(id) = found {
            self.on_segment(id, seg)?;
            return Ok(true);
        }
        let listener = self.sockets.iter().find_map(|(id, s)| match s {
            Socket::Listener { port, .. } if *port == seg.dst_port => Some(*id),
            _ => None,
        });
        match listener {
            Some(lid) if seg.flags & flags::SYN != 0 && seg.flags & flags::ACK == 0 => {
                let state = tcp_step(TcpState::Listen, TcpEvent::Syn)?;
                let id = self.socket();
                self.transitions
                    .push((id, TcpState::Listen, TcpEvent::Syn, state));
                let isn = self.isn(seg.dst_port, (src, seg.src_port));
                let s = Stream {
                    local_port: seg.dst_port,
                    remote: (src, seg.src_port),
                    state,
                    snd_nxt: isn.wrapping_add(1),
                    rcv_nxt: seg.seq.wrapping_add(1),
                    rx: Vec::new(),
                    listener: Some(lid),
                    peer_fin: false,
                };
                self.emit(&s, flags::SYN | flags::ACK, isn, Vec::new());
                self.sockets.insert(id, Socket::Stream(s));
                Ok(true)
            }
            _ => {
                self.dropped += 1;
                Ok(false)
            }
        }
    }

    fn on_segment(&mut self, id: SocketId, seg: TcpSegment) -> Result<(), FwError> {
        let mut s = self.stream_mut(id)?.clone();
        let syn = seg.flags & flags::SYN != 0;
        let ack = seg.flags & flags::ACK != 0;
        let fin = seg.flags & flags::FIN != 0;
        if syn && ack && s.state == TcpState::SynSent {
            s.state = self.record(id, s.state, TcpEvent::SynAck)?;
            s.rcv_nxt = seg.seq.wrapping_add(1);
            self.emit(&s, flags::ACK, s.snd_nxt, Vec::new());
            *self.stream_mut(id)? = s;
            return Ok(());
        }
        if syn {
            self.record(id, s.state, TcpEvent::Syn)?;
        }
        if ack
            && matches!(
                s.state,
                TcpState::SynRcvd | TcpState::FinWait1 | TcpState::LastAck
            )
        {
            let acked_all = seg.ack == s.snd_nxt;
            if s.state == TcpState::SynRcvd || acked_all {
                let prev = s.state;
                s.state = self.record(id, prev, TcpEvent::Ack)?;
                if prev == TcpState::SynRcvd {
                    if let Some(Socket::Listener { backlog, .. }) =
                        s.listener.and_then(|l| self.sockets.get_mut(&l))
                    {
                        backlog.push_back(id);
                    }
                }
            }
        } else if ack && s.state == TcpState::Established && seg.payload.is_empty() && !fin {
            s.state = self.record(id, s.state, TcpEvent::Ack)?;
        }
        let mut reply = false;
        if !seg.payload.is_empty() && seg.seq == s.rcv_nxt {
            s.rx.extend_from_slice(&seg.payload);
            s.rcv_nxt = s.rcv_nxt.wrapping_add(seg.payload.len() as u32);
            reply = true;
        }
        if fin {
            s.rcv_nxt = s.rcv_nxt.wrapping_add(1);
            s.state = self.record(id, s.state, TcpEvent::Fin)?;
            s.peer_fin = true;
            reply = true;
        }
        if reply {
            self.emit(&s, flags::ACK, s.snd_nxt, Vec::new());
        }
        if s.state == TcpState::TimeWait {
            s.state = self.record(id, s.state, TcpEvent::Timeout)?;
        }
        if s.state == TcpState::Closed && s.rx.is_empty() {
            self.sockets.remove(&id);
        } else {
            *self.stream_mut(id)? = s;
        }
        Ok(())
    }

    /// Open stream sockets.
    pub fn streams(&self) -> Vec<SocketId> {
        self.sockets
            .iter()
            .filter(|(_, s)| matches!(s, Socket::Stream(_)))
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Moves every queued packet between two stacks until both are quiet.
pub fn pump(a: &mut NetStack, b: &mut NetStack) -> Result<usize, FwError> {
    let mut moved = 0;
    loop {
        let from_a = a.take_outbox();
        let from_b = b.take_outbox();
        if from_a.is_empty() && from_b.is_empty() {
            return Ok(moved);
        }
        for (_, p) in from_a {
            b.ingest(&p)?;
            moved += 1;
        }
        for (_, p) in from_b {
            a.ingest(&p)?;
            moved += 1;
        }
    }
}
