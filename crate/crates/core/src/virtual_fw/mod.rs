//! Virtual-FW: the firmware layer that runs containers.
//!
//! Three handlers (thread, I/O, network) serve emulated system calls as
//! plain function calls. Handler tables live in the firmware pool, call
//! arguments in the ISP pool; only privileged code may touch the former.

mod cache;
pub mod net;
mod pools;
mod sched;
mod syscalls;
mod tcp;

pub use cache::{IoNodeCache, WalkStats};
pub use pools::{CpuMode, FaultRecord, MemoryPools, Pool};
pub use sched::{Scheduler, ThreadRecord, ThreadState, Tid};
pub use syscalls::{Handler, SyscallEntry, SyscallTable};
pub use tcp::{tcp_step, TcpEvent, TcpState};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lambda_fs::{FsError, HandleId, Ino, LambdaFs, OpenOutcome, Side};
use crate::nvme::PcieFunction;
use crate::sim::Nanos;
use net::{NetStack, SocketId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FwError {
    #[error("syscall catalog: {0}")]
    Catalog(String),
    #[error("syscall {0} is not implemented")]
    UnimplementedSyscall(String),
    #[error("memory protection fault at {addr:#x}")]
    Fault { addr: u64 },
    #[error("ISP pool exhausted")]
    OutOfMemory,
    #[error("illegal TCP transition: {event:?} in {state:?}")]
    IllegalTransition { state: TcpState, event: TcpEvent },
    #[error("malformed packet: {0}")]
    MalformedPacket(String),
    #[error("port {0} already bound")]
    AddrInUse(u16),
    #[error("socket {0} is not usable for this operation")]
    BadSocket(SocketId),
    #[error("socket {0} is not connected")]
    NotConnected(SocketId),
    #[error("entry script {0} not found in rootfs")]
    NoEntryScript(String),
    #[error("unknown thread {0}")]
    UnknownThread(Tid),
    #[error("bad arguments to {0}")]
    BadArguments(String),
    #[error(transparent)]
    Fs(#[from] FsError),
}

/// Whether calls are served by function-level emulation or by a full
/// kernel with a context switch on every return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Emulated,
    FullOs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FwConfig {
    pub fw_pages: u64,
    pub isp_pages: u64,
    pub cores: usize,
    pub quantum_ns: Nanos,
    pub cache_capacity: usize,
    pub emulated_syscall_ns: u64,
    pub full_os_syscall_ns: u64,
    pub context_switch_ns: u64,
    /// Cost of one directory lookup during a path walk.
    pub walk_lookup_ns: u64,
    /// Cost of consulting the I/O node cache.
    pub walk_hit_ns: u64,
    pub mode: ExecMode,
}

impl Default for FwConfig {
    fn default() -> Self {
        Self {
            fw_pages: 256,
            isp_pages: 4096,
            cores: 6,
            quantum_ns: 1_000_000,
            cache_capacity: 1024,
            emulated_syscall_ns: 500,
            full_os_syscall_ns: 2500,
            context_switch_ns: 5000,
            walk_lookup_ns: 1000,
            walk_hit_ns: 100,
            mode: ExecMode::Emulated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arg {
    Int(i64),
    Str(String),
    Bytes(Vec<u8>),
    /// User pointer; dereferenced in user mode while staging arguments.
    Ptr(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallInvocation {
    pub tid: Tid,
    pub name: String,
    pub args: Vec<Arg>,
}

impl SyscallInvocation {
    pub fn new(tid: Tid, name: &str, args: Vec<Arg>) -> Self {
        Self {
            tid,
            name: name.to_string(),
            args,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyscallResult {
    /// Return value; negative values are errno codes.
    pub ret: i64,
    pub data: Option<Vec<u8>>,
    pub handler: Handler,
    /// The entry that ran, after alias collapsing.
    pub executed: String,
    pub cost_ns: u64,
    /// Context-switch time charged; zero under emulation.
    pub kernel_ctx_ns: u64,
    pub walk: WalkStats,
}

pub mod errno {
    pub const ENOENT: i64 = 2;
    pub const ESRCH: i64 = 3;
    pub const EBADF: i64 = 9;
    pub const EAGAIN: i64 = 11;
    pub const ENOMEM: i64 = 12;
    pub const EACCES: i64 = 13;
    pub const EEXIST: i64 = 17;
    pub const ENOTDIR: i64 = 20;
    pub const EISDIR: i64 = 21;
    pub const EINVAL: i64 = 22;
    pub const ENOSPC: i64 = 28;
    pub const ENOTEMPTY: i64 = 39;
    pub const EADDRINUSE: i64 = 98;
    pub const ENOTCONN: i64 = 107;
}

fn fs_errno(e: &FsError) -> i64 {
    use errno::*;
    -match e {
        FsError::PathNotFound(_) | FsError::StaleInode(_) => ENOENT,
        FsError::NamespaceNotVisible { .. } | FsError::PrivatePathBind(_) => EACCES,
        FsError::AlreadyExists(_) => EEXIST,
        FsError::NotADirectory(_) => ENOTDIR,
        FsError::IsADirectory(_) => EISDIR,
        FsError::DirectoryNotEmpty(_) => ENOTEMPTY,
        FsError::StorageFull(_) => ENOSPC,
        FsError::DoubleClose(_) => EBADF,
        _ => EINVAL,
    }
}

fn net_errno(e: &FwError) -> i64 {
    -match e {
        FwError::AddrInUse(_) => errno::EADDRINUSE,
        FwError::NotConnected(_) => errno::ENOTCONN,
        FwError::BadSocket(_) => errno::EBADF,
        _ => errno::EINVAL,
    }
}

#[derive(Debug, Clone)]
enum Fd {
    File {
        handle: HandleId,
        ino: Ino,
        pos: u64,
    },
    PipeRead(u32),
    PipeWrite(u32),
    Mq(String),
    Socket(SocketId),
    Epoll(BTreeSet<i32>),
}

/// Anything that can tell whether a container's entry script exists.
pub trait RootfsView {
    fn has_entry(&self, entry: &str) -> bool;
}

/// Counters accumulated across all emulated calls.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FwStats {
    pub calls: BTreeMap<Handler, u64>,
    pub syscall_ns: u64,
    pub kernel_ctx_ns: u64,
    pub walk_ns: u64,
    pub walk_lookups: u64,
    pub walk_hits: u64,
    pub faults: u64,
}

#[derive(Debug, Clone)]
pub struct VirtualFw {
    pub config: FwConfig,
    pub pools: MemoryPools,
    pub syscalls: SyscallTable,
    pub fs: LambdaFs,
    pub cache: IoNodeCache,
    pub sched: Scheduler,
    pub net: NetStack,
    fds: BTreeMap<Tid, BTreeMap<i32, Fd>>,
    pipes: BTreeMap<u32, VecDeque<u8>>,
    queues: BTreeMap<String, VecDeque<Vec<u8>>>,
    mappings: BTreeMap<u64, usize>,
    next_pipe: u32,
    stats: FwStats,
}

impl VirtualFw {
    pub fn new(config: FwConfig, fs: LambdaFs, ip: Ipv4Addr) -> Self {
        let mut syscalls = SyscallTable::builtin();
        syscalls.set_costs(config.emulated_syscall_ns, config.full_os_syscall_ns);
        Self {
            pools: MemoryPools::new(config.fw_pages, config.isp_pages),
            cache: IoNodeCache::new(config.cache_capacity),
            sched: Scheduler::new(config.cores, config.quantum_ns),
            net: NetStack::new(ip),
            syscalls,
            fs,
            config,
            fds: BTreeMap::new(),
            pipes: BTreeMap::new(),
            queues: BTreeMap::new(),
            mappings: BTreeMap::new(),
            next_pipe: 1,
            stats: FwStats::default(),
        }
    }

    pub fn stats(&self) -> &FwStats {
        &self.stats
    }

    /// Creates a container thread whose entry script must exist in `rootfs`.
    pub fn spawn_container_thread(
        &mut self,
        owner: &str,
        entry: &str,
        rootfs: &dyn RootfsView,
    ) -> Result<ThreadRecord, FwError> {
        if entry.is_empty() || !rootfs.has_entry(entry) {
            return Err(FwError::NoEntryScript(entry.to_string()));
        }
        self.spawn(owner, entry, None)
    }

    fn spawn(
        &mut self,
        owner: &str,
        entry: &str,
        parent: Option<Tid>,
    ) -> Result<ThreadRecord, FwError> {
        let tcb = self.pools.alloc_isp(1)?;
        let rec = self.sched.spawn(owner, entry, parent, tcb);
        self.fds.insert(rec.tid, BTreeMap::new());
        Ok(rec)
    }

    /// Ends a thread and releases its descriptors.
    pub fn exit_thread(&mut self, tid: Tid) -> Result<(), FwError> {
        let rec = self
            .sched
            .thread(tid)
            .ok_or(FwError::UnknownThread(tid))?
            .clone();
        if self.sched.exit(tid) {
            self.pools.free_isp(rec.tcb_addr, 1);
            let fds: Vec<i32> = self
                .fds
                .get(&tid)
                .map(|m| m.keys().copied().collect())
                .unwrap_or_default();
            for fd in fds {
                self.close_fd(tid, fd);
            }
        }
        Ok(())
    }

    pub fn exit_owner(&mut self, owner: &str) -> usize {
        let tids: Vec<Tid> = self
            .sched
            .threads()
            .filter(|t| t.owner == owner && t.state != ThreadState::Exited)
            .map(|t| t.tid)
            .collect();
        for &t in &tids {
            let _ = self.exit_thread(t);
        }
        tids.len()
    }

    /// Walks through the I/O node cache and charges the walk cost.
    pub fn path_walk(&mut self, path: &str) -> Result<(Ino, WalkStats), FsError> {
        let r = self.cache.walk(&self.fs.image, path);
        if let Ok((_, w)) = &r {
            self.charge_walk(*w);
        }
        r
    }

    fn charge_walk(&mut self, w: WalkStats) {
        self.stats.walk_lookups += w.lookups as u64;
        self.stats.walk_hits += w.hits as u64;
        self.stats.walk_ns +=
            w.lookups as u64 * self.config.walk_lookup_ns + w.hits as u64 * self.config.walk_hit_ns;
    }

    /// The socket behind a descriptor of `tid`.
    pub fn socket_of(&self, tid: Tid, fd: i32) -> Option<SocketId> {
        match self.fds.get(&tid)?.get(&fd)? {
            Fd::Socket(s) => Some(*s),
            _ => None,
        }
    }

    fn fd_table(&mut self, tid: Tid) -> &mut BTreeMap<i32, Fd> {
        self.fds.entry(tid).or_default()
    }

    fn install(&mut self, tid: Tid, fd: Fd) -> i64 {
        let table = self.fd_table(tid);
        let n = (3..).find(|n| !table.contains_key(n)).expect("fd space");
        table.insert(n, fd);
        n as i64
    }

    fn close_fd(&mut self, tid: Tid, fd: i32) -> i64 {
        let Some(entry) = self.fd_table(tid).remove(&fd) else {
            return -errno::EBADF;
        };
        match entry {
            Fd::File { handle, .. } => {
                let _ = self.fs.close(handle);
            }
            Fd::Socket(s) => {
                let _ = self.net.close(s);
            }
            _ => {}
        }
        0
    }

    /// Stages arguments in the ISP pool from user mode, then runs the
    /// owning handler in privileged mode.
    pub fn emulate(&mut self, call: &SyscallInvocation) -> Result<SyscallResult, FwError> {
        let entry = self.syscalls.resolve(&call.name)?.clone();
        let tcb = self
            .sched
            .thread(call.tid)
            .ok_or(FwError::UnknownThread(call.tid))?
            .tcb_addr;
        self.pools.access(tcb)?;
        for a in &call.args {
            if let Arg::Ptr(addr) = a {
                if let Err(e) = self.pools.access(*addr) {
                    self.stats.faults += 1;
                    return Err(e);
                }
            }
        }
        let slot = (self
            .syscalls
            .entries()
            .position(|e| e.name == entry.name)
            .unwrap_or(0)
            * 64) as u64;
        self.pools
            .privileged(|p| p.access(slot).and_then(|_| p.access(tcb)))?;

        let before = (self.stats.walk_lookups, self.stats.walk_hits);
        let (ret, data) = match entry.handler {
            Handler::Thread => self.thread_call(call, &entry.name)?,
            Handler::Io => self.io_call(call, &entry.name)?,
            Handler::Network => self.net_call(call, &entry.name)?,
        };
        let walk = WalkStats {
            lookups: (self.stats.walk_lookups - before.0) as u32,
            hits: (self.stats.walk_hits - before.1) as u32,
        };
        let (cost_ns, kernel_ctx_ns) = match self.config.mode {
            ExecMode::Emulated => (entry.cost_ns, 0),
            ExecMode::FullOs => (entry.full_os_ns, self.config.context_switch_ns),
        };
        *self.stats.calls.entry(entry.handler).or_default() += 1;
        self.stats.syscall_ns += cost_ns;
        self.stats.kernel_ctx_ns += kernel_ctx_ns;
        Ok(SyscallResult {
            ret,
            data,
            handler: entry.handler,
            executed: entry.name,
            cost_ns,
            kernel_ctx_ns,
            walk,
        })
    }

    fn thread_call(
        &mut self,
        call: &SyscallInvocation,
        name: &str,
    ) -> Result<(i64, Option<Vec<u8>>), FwError> {
        let tid = call.tid;
        let int = |i: usize| match call.args.get(i) {
            Some(Arg::Int(v)) => Ok(*v),
            _ => Err(FwError::BadArguments(name.to_string())),
        };
        let ret = match name {
            "fork" | "clone" => {
                let parent = self.sched.thread(tid).expect("checked").clone();
                match self.spawn(&parent.owner, &parent.entry, Some(tid)) {
                    Ok(child) => child.tid as i64,
                    Err(FwError::OutOfMemory) => -errno::ENOMEM,
                    Err(e) => return Err(e),
                }
            }
            "exit" => {
                self.exit_thread(tid)?;
                int(0).unwrap_or(0)
            }
            "brk" => {
                let want = int(0)?;
                let t = self.sched.thread_mut(tid).expect("checked");
                if want > 0 {
                    t.brk = want as u64;
                }
                t.brk as i64
            }
            "mmap" => {
                let len = int(0)?.max(1) as usize;
                let pages = len.div_ceil(crate::nvme::PAGE_SIZE);
                match self.pools.alloc_isp(pages) {
                    Ok(addr) => {
                        self.mappings.insert(addr, pages);
                        addr as i64
                    }
                    Err(_) => -errno::ENOMEM,
                }
            }
            "munmap" => {
                let addr = int(0)? as u64;
                match self.mappings.remove(&addr) {
                    Some(pages) => {
                        self.pools.free_isp(addr, pages);
                        0
                    }
                    None => -errno::EINVAL,
                }
            }
            "pipe" => {
                let id = self.next_pipe;
                self.next_pipe += 1;
                self.pipes.insert(id, VecDeque::new());
                let r = self.install(tid, Fd::PipeRead(id));
                let w = self.install(tid, Fd::PipeWrite(id));
                return Ok((
                    0,
                    Some(
                        [r as i32, w as i32]
                            .iter()
                            .flat_map(|v| v.to_le_bytes())
                            .collect(),
                    ),
                ));
            }
            "mq_open" => {
                let Some(Arg::Str(qname)) = call.args.first() else {
                    return Err(FwError::BadArguments(name.into()));
                };
                self.queues.entry(qname.clone()).or_default();
                self.install(tid, Fd::Mq(qname.clone()))
            }
            "futex" => {
                let op = int(0)?;
                match op {
                    0 => {
                        self.sched.block(tid);
                        0
                    }
                    _ => {
                        let target = int(1)? as Tid;
                        self.sched.wake(target);
                        1
                    }
                }
            }
            "kill" => {
                let target = int(0)? as Tid;
                if self.sched.thread(target).is_none() {
                    -errno::ESRCH
                } else {
                    self.exit_thread(target)?;
                    0
                }
            }
            _ => return Err(FwError::UnimplementedSyscall(name.to_string())),
        };
        Ok((ret, None))
    }

    fn walk_parent(&mut self, path: &str) -> Result<(), FsError> {
        let parent = match path.rfind('/') {
            Some(0) | None => "/",
            Some(i) => &path[..i],
        };
        self.path_walk(parent).map(|_| ())
    }

    fn io_call(
        &mut self,
        call: &SyscallInvocation,
        name: &str,
    ) -> Result<(i64, Option<Vec<u8>>), FwError> {
        let tid = call.tid;
        let bad = || FwError::BadArguments(name.to_string());
        let s = |i: usize| match call.args.get(i) {
            Some(Arg::Str(v)) => Ok(v.clone()),
            _ => Err(bad()),
        };
        let int = |i: usize| match call.args.get(i) {
            Some(Arg::Int(v)) => Ok(*v),
            _ => Err(bad()),
        };
        let fw = PcieFunction::Firmware;
        let out: Result<(i64, Option<Vec<u8>>), FsError> = match name {
            "openat" => {
                let path = s(0)?;
                let create = int(1).unwrap_or(0) != 0;
                let walked = match self.path_walk(&path) {
                    Ok(w) => Ok(w),
                    Err(FsError::PathNotFound(_)) if create => self
                        .walk_parent(&path)
                        .and_then(|_| self.fs.image.create(&path, fw))
                        .map(|ino| (ino, WalkStats::default())),
                    Err(e) => Err(e),
                };
                walked.and_then(|(ino, _)| match self.fs.open(Side::Container, &path)? {
                    OpenOutcome::Granted(h) => Ok((
                        self.install(
                            tid,
                            Fd::File {
                                handle: h.id,
                                ino,
                                pos: 0,
                            },
                        ),
                        None,
                    )),
                    OpenOutcome::Blocked(t) => {
                        self.fs.cancel(t)?;
                        Ok((-errno::EAGAIN, None))
                    }
                })
            }
            "close" => return Ok((self.close_fd(tid, int(0)? as i32), None)),
            "mkdir" => {
                let path = s(0)?;
                self.walk_parent(&path)
                    .and_then(|_| self.fs.image.mkdir(&path, fw))
                    .map(|_| (0, None))
            }
            "read" => {
                let fd = int(0)? as i32;
                let len = int(1)?.max(0) as usize;
                return Ok(match self.fd_table(tid).get(&fd).cloned() {
                    Some(Fd::File { ino, pos, handle }) => {
                        let data = self.fs.image.read_at(ino, pos, len)?;
                        self.fd_table(tid).insert(
                            fd,
                            Fd::File {
                                handle,
                                ino,
                                pos: pos + data.len() as u64,
                            },
                        );
                        (data.len() as i64, Some(data))
                    }
                    Some(Fd::PipeRead(p)) => {
                        let q = self.pipes.get_mut(&p).expect("pipe exists");
                        let data: Vec<u8> = q.drain(..len.min(q.len())).collect();
                        (data.len() as i64, Some(data))
                    }
                    Some(Fd::Mq(q)) => match self.queues.get_mut(&q).and_then(|m| m.pop_front()) {
                        Some(m) => (m.len() as i64, Some(m)),
                        None => (-errno::EAGAIN, None),
                    },
                    Some(Fd::Socket(sock)) => match self.net.recv(sock) {
                        Ok(d) => (d.len() as i64, Some(d)),
                        Err(e) => (net_errno(&e), None),
                    },
                    _ => (-errno::EBADF, None),
                });
            }
            "write" => {
                let fd = int(0)? as i32;
                let Some(Arg::Bytes(bytes)) = call.args.get(1) else {
                    return Err(bad());
                };
                return Ok(match self.fd_table(tid).get(&fd).cloned() {
                    Some(Fd::File { ino, pos, handle }) => {
                        match self.fs.image.write_at(ino, pos, bytes) {
                            Ok(()) => {
                                self.fd_table(tid).insert(
                                    fd,
                                    Fd::File {
                                        handle,
                                        ino,
                                        pos: pos + bytes.len() as u64,
                                    },
                                );
                                (bytes.len() as i64, None)
                            }
                            Err(e) => (fs_errno(&e), None),
                        }
                    }
                    Some(Fd::PipeWrite(p)) => {
                        self.pipes
                            .get_mut(&p)
                            .expect("pipe exists")
                            .extend(bytes.iter());
                        (bytes.len() as i64, None)
                    }
                    Some(Fd::Mq(q)) => {
                        self.queues.entry(q).or_default().push_back(bytes.clone());
                        (bytes.len() as i64, None)
                    }
                    Some(Fd::Socket(sock)) => match self.net.send(sock, bytes) {
                        Ok(n) => (n as i64, None),
                        Err(e) => (net_errno(&e), None),
                    },
                    _ => (-errno::EBADF, None),
                });
            }
            "lseek" => {
                let fd = int(0)? as i32;
                let off = int(1)?;
                return Ok(match self.fd_table(tid).get_mut(&fd) {
                    Some(Fd::File { pos, .. }) if off >= 0 => {
                        *pos = off as u64;
                        (off, None)
                    }
                    Some(Fd::File { .. }) => (-errno::EINVAL, None),
                    _ => (-errno::EBADF, None),
                });
            }
            "symlink" => {
                let (target, path) = (s(0)?, s(1)?);
                self.walk_parent(&path)
                    .and_then(|_| self.fs.image.symlink(&path, &target, fw))
                    .map(|_| (0, None))
            }
            "unlink" => {
                let path = s(0)?;
                self.path_walk(&path)
                    .and_then(|_| self.fs.image.unlink(&path, fw))
                    .map(|_| {
                        self.cache.invalidate(&path);
                        (0, None)
                    })
            }
            "chmod" => {
                let (path, mode) = (s(0)?, int(1)?);
                self.path_walk(&path)
                    .and_then(|(ino, _)| self.fs.image.set_mode(ino, mode as u32))
                    .map(|_| (0, None))
            }
            "chown" => {
                let (path, uid, gid) = (s(0)?, int(1)?, int(2)?);
                self.path_walk(&path)
                    .and_then(|(ino, _)| self.fs.image.set_owner(ino, uid as u32, gid as u32))
                    .map(|_| (0, None))
            }
            _ => return Err(FwError::UnimplementedSyscall(name.to_string())),
        };
        Ok(out.unwrap_or_else(|e| (fs_errno(&e), None)))
    }

    fn net_call(
        &mut self,
        call: &SyscallInvocation,
        name: &str,
    ) -> Result<(i64, Option<Vec<u8>>), FwError> {
        let tid = call.tid;
        let bad = || FwError::BadArguments(name.to_string());
        let int = |i: usize| match call.args.get(i) {
            Some(Arg::Int(v)) => Ok(*v),
            _ => Err(bad()),
        };
        let sock = |this: &mut Self, fd: i64| match this.fd_table(tid).get(&(fd as i32)) {
            Some(Fd::Socket(s)) => Some(*s),
            _ => None,
        };
        let r = match name {
            "socket" => {
                let s = self.net.socket();
                Ok(self.install(tid, Fd::Socket(s)))
            }
            "bind" => match sock(self, int(0)?) {
                Some(s) => self.net.bind(s, int(1)? as u16).map(|_| 0),
                None => Ok(-errno::EBADF),
            },
            "listen" => match sock(self, int(0)?) {
                Some(s) => self.net.listen(s).map(|_| 0),
                None => Ok(-errno::EBADF),
            },
            "accept" => match sock(self, int(0)?) {
                Some(s) => match self.net.accept(s) {
                    Ok(Some(conn)) => Ok(self.install(tid, Fd::Socket(conn))),
                    Ok(None) => Ok(-errno::EAGAIN),
                    Err(e) => Err(e),
                },
                None => Ok(-errno::EBADF),
            },
            "connect" => {
                let Some(Arg::Str(ip)) = call.args.get(1) else {
                    return Err(bad());
                };
                let ip: Ipv4Addr = ip.parse().map_err(|_| bad())?;
                match sock(self, int(0)?) {
                    Some(s) => self.net.connect(s, ip, int(2)? as u16).map(|_| 0),
                    None => Ok(-errno::EBADF),
                }
            }
            "sendto" => {
                let Some(Arg::Bytes(b)) = call.args.get(1) else {
                    return Err(bad());
                };
                match sock(self, int(0)?) {
                    Some(s) => self.net.send(s, b).map(|n| n as i64),
                    None => Ok(-errno::EBADF),
                }
            }
            "recvfrom" => {
                return match sock(self, int(0)?) {
                    Some(s) => match self.net.recv(s) {
                        Ok(d) => Ok((d.len() as i64, Some(d))),
                        Err(e) => Ok((net_errno(&e), None)),
                    },
                    None => Ok((-errno::EBADF, None)),
                };
            }
            "epoll_create" => Ok(self.install(tid, Fd::Epoll(BTreeSet::new()))),
            "epoll_ctl" => {
                let (epfd, fd) = (int(0)? as i32, int(1)? as i32);
                let known = self.fd_table(tid).contains_key(&fd);
                match self.fd_table(tid).get_mut(&epfd) {
                    Some(Fd::Epoll(set)) if known => {
                        set.insert(fd);
                        Ok(0)
                    }
                    _ => Ok(-errno::EBADF),
                }
            }
            "epoll_wait" => {
                let epfd = int(0)? as i32;
                let Some(Fd::Epoll(set)) = self.fd_table(tid).get(&epfd).cloned() else {
                    return Ok((-errno::EBADF, None));
                };
                let mut ready = Vec::new();
                for fd in set {
                    let is_ready = match self.fds.get(&tid).and_then(|t| t.get(&fd)) {
                        Some(Fd::Socket(s)) => self.net.readable(*s),
                        Some(Fd::PipeRead(p)) => !self.pipes[p].is_empty(),
                        Some(Fd::Mq(q)) => self.queues.get(q).is_some_and(|m| !m.is_empty()),
                        _ => false,
                    };
                    if is_ready {
                        ready.extend_from_slice(&fd.to_le_bytes());
                    }
                }
                return Ok(((ready.len() / 4) as i64, Some(ready)));
            }
            _ => return Err(FwError::UnimplementedSyscall(name.to_string())),
        };
        Ok((r.unwrap_or_else(|e| net_errno(&e)), None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvme::{NamespaceKind, NamespaceSpec, NamespaceTable};

    struct Always;
    impl RootfsView for Always {
        fn has_entry(&self, _: &str) -> bool {
            true
        }
    }

    struct Never;
    impl RootfsView for Never {
        fn has_entry(&self, _: &str) -> bool {
            false
        }
    }

    fn fw(mode: ExecMode) -> (VirtualFw, Tid) {
        let t = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..1024,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 1024..4096,
            },
        ])
        .unwrap();
        let mut fs = LambdaFs::mkfs(t.all()).unwrap();
        fs.image.mkdir_all("/data", PcieFunction::Host).unwrap();
        let mut v = VirtualFw::new(
            FwConfig {
                mode,
                ..Default::default()
            },
            fs,
            Ipv4Addr::new(10, 0, 0, 2),
        );
        let tid = v
            .spawn_container_thread("c1", "/entry.sh", &Always)
            .unwrap()
            .tid;
        (v, tid)
    }

    fn call(v: &mut VirtualFw, tid: Tid, name: &str, args: Vec<Arg>) -> SyscallResult {
        v.emulate(&SyscallInvocation::new(tid, name, args)).unwrap()
    }

    #[test]
    fn open_via_io_handler_without_kernel_ctx() {
        let (mut v, tid) = fw(ExecMode::Emulated);
        let r = call(
            &mut v,
            tid,
            "open",
            vec![Arg::Str("/data/x".into()), Arg::Int(1)],
        );
        assert!(r.ret >= 3);
        assert_eq!(r.handler, Handler::Io);
        assert_eq!(r.executed, "openat");
        assert_eq!(r.cost_ns, 500);
        assert_eq!(r.kernel_ctx_ns, 0);
        let fd = r.ret;
        assert_eq!(
            call(
                &mut v,
                tid,
                "write",
                vec![Arg::Int(fd), Arg::Bytes(b"abc".to_vec())]
            )
            .ret,
            3
        );
        call(&mut v, tid, "lseek", vec![Arg::Int(fd), Arg::Int(0)]);
        assert_eq!(
            call(&mut v, tid, "read", vec![Arg::Int(fd), Arg::Int(10)])
                .data
                .unwrap(),
            b"abc"
        );
        assert_eq!(call(&mut v, tid, "close", vec![Arg::Int(fd)]).ret, 0);
        assert_eq!(
            call(&mut v, tid, "close", vec![Arg::Int(fd)]).ret,
            -errno::EBADF
        );
    }

    #[test]
    fn full_os_mode_pays_context_switches() {
        let (mut v, tid) = fw(ExecMode::FullOs);
        let r = call(&mut v, tid, "mkdir", vec![Arg::Str("/data/d".into())]);
        assert_eq!((r.cost_ns, r.kernel_ctx_ns), (2500, 5000));
    }

    #[test]
    fn fork_creates_thread() {
        let (mut v, tid) = fw(ExecMode::Emulated);
        let child = call(&mut v, tid, "fork", vec![]).ret as Tid;
        assert_eq!(v.sched.thread(child).unwrap().parent, Some(tid));
        assert_eq!(
            call(&mut v, tid, "kill", vec![Arg::Int(child as i64)]).ret,
            0
        );
        assert_eq!(v.sched.thread(child).unwrap().state, ThreadState::Exited);
    }

    #[test]
    fn unknown_and_unimplemented() {
        let (mut v, tid) = fw(ExecMode::Emulated);
        for name in ["frobnicate", "execve"] {
            assert_eq!(
                v.emulate(&SyscallInvocation::new(tid, name, vec![])),
                Err(FwError::UnimplementedSyscall(name.into()))
            );
        }
    }

    #[test]
    fn pointer_into_fw_pool_faults() {
        let (mut v, tid) = fw(ExecMode::Emulated);
        let r = v.emulate(&SyscallInvocation::new(
            tid,
            "brk",
            vec![Arg::Int(0), Arg::Ptr(64)],
        ));
        assert_eq!(r, Err(FwError::Fault { addr: 64 }));
        assert_eq!(v.pools.granted(Pool::Fw, CpuMode::User), 0);
        assert!(v.pools.granted(Pool::Fw, CpuMode::Privileged) == 0);
        call(&mut v, tid, "brk", vec![Arg::Int(0)]);
        assert_eq!(v.pools.granted(Pool::Fw, CpuMode::Privileged), 1);
    }

    #[test]
    fn spawn_needs_entry() {
        let (mut v, _) = fw(ExecMode::Emulated);
        assert_eq!(
            v.spawn_container_thread("c2", "/run.sh", &Never),
            Err(FwError::NoEntryScript("/run.sh".into()))
        );
    }

    #[test]
    fn pipes_and_epoll() {
        let (mut v, tid) = fw(ExecMode::Emulated);
        let r = call(&mut v, tid, "pipe2", vec![]);
        let d = r.data.unwrap();
        let (rd, wr) = (
            i32::from_le_bytes(d[0..4].try_into().unwrap()),
            i32::from_le_bytes(d[4..8].try_into().unwrap()),
        );
        let ep = call(&mut v, tid, "epoll_create1", vec![]).ret;
        call(
            &mut v,
            tid,
            "epoll_ctl",
            vec![Arg::Int(ep), Arg::Int(rd as i64)],
        );
        assert_eq!(call(&mut v, tid, "epoll_wait", vec![Arg::Int(ep)]).ret, 0);
        call(
            &mut v,
            tid,
            "write",
            vec![Arg::Int(wr as i64), Arg::Bytes(b"hi".to_vec())],
        );
        assert_eq!(call(&mut v, tid, "epoll_wait", vec![Arg::Int(ep)]).ret, 1);
        assert_eq!(
            call(&mut v, tid, "read", vec![Arg::Int(rd as i64), Arg::Int(8)])
                .data
                .unwrap(),
            b"hi"
        );
    }

    #[test]
    fn socket_calls() {
        let (mut v, tid) = fw(ExecMode::Emulated);
        let s = call(&mut v, tid, "socket", vec![]).ret;
        assert_eq!(
            call(&mut v, tid, "bind", vec![Arg::Int(s), Arg::Int(8080)]).ret,
            0
        );
        assert_eq!(call(&mut v, tid, "listen", vec![Arg::Int(s)]).ret, 0);
        assert_eq!(
            call(&mut v, tid, "accept4", vec![Arg::Int(s)]).ret,
            -errno::EAGAIN
        );
        let s2 = call(&mut v, tid, "socket", vec![]).ret;
        assert_eq!(
            call(&mut v, tid, "bind", vec![Arg::Int(s2), Arg::Int(8080)]).ret,
            -errno::EADDRINUSE
        );
        assert_eq!(
            call(
                &mut v,
                tid,
                "sendto",
                vec![Arg::Int(s2), Arg::Bytes(vec![1])]
            )
            .ret,
            -errno::EBADF
        );
    }

    #[test]
    fn warm_walks_hit_the_cache() {
        let (mut v, tid) = fw(ExecMode::Emulated);
        v.fs.image
            .create_all("/data/a/b", PcieFunction::Host)
            .unwrap();
        let cold = call(
            &mut v,
            tid,
            "chmod",
            vec![Arg::Str("/data/a/b".into()), Arg::Int(0o600)],
        );
        let warm = call(
            &mut v,
            tid,
            "chmod",
            vec![Arg::Str("/data/a/b".into()), Arg::Int(0o644)],
        );
        assert_eq!(
            cold.walk,
            WalkStats {
                lookups: 3,
                hits: 0
            }
        );
        assert_eq!(
            warm.walk,
            WalkStats {
                lookups: 0,
                hits: 1
            }
        );
    }
}
