//! λFS: the in-storage filesystem.
//!
//! One directory tree spans both namespaces. Every inode is tagged with the
//! namespace holding its blocks; the host function can only reach inodes on
//! the sharable namespace, while firmware and containers see everything.
//! Files shared between the host and containers are guarded by a per-inode
//! reference count kept separately for each side.

pub mod check;
mod fs;
mod lock;
mod sync;
mod trace;
mod vfs;

pub use fs::{
    DirEntry, FsImage, Ino, Inode, InodeKind, BLOCK_SIZE, CONTAINERS_DIR, IMAGES_BLOBS_DIR,
    IMAGES_DIR, IMAGES_MANIFEST_DIR, ROOT_INO,
};
pub use lock::{Grant, Handle, HandleId, InodeLock, LockManager, OpenOutcome, Side, WaitTicket};
pub use sync::{SyncKind, SyncMessage};
pub use trace::{parse_trace, run_trace, TraceEvent, TraceOp, TraceOutcome, TraceStep};
pub use vfs::VfsCacheModel;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::nvme::{Namespace, NamespaceKind, PcieFunction};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FsError {
    #[error("{0:?} namespace is missing")]
    NamespaceMissing(NamespaceKind),
    #[error("path not found: {0}")]
    PathNotFound(String),
    #[error("{path} is not visible to the {function:?} function")]
    NamespaceNotVisible {
        path: String,
        function: PcieFunction,
    },
    #[error("{0} is on the private namespace and cannot be bound")]
    PrivatePathBind(String),
    #[error("handle {0} is not live")]
    DoubleClose(HandleId),
    #[error("wait ticket {0} is not pending")]
    UnknownTicket(WaitTicket),
    #[error("path already exists: {0}")]
    AlreadyExists(String),
    #[error("not a directory: {0}")]
    NotADirectory(String),
    #[error("is a directory: {0}")]
    IsADirectory(String),
    #[error("directory not empty: {0}")]
    DirectoryNotEmpty(String),
    #[error("invalid path: {0:?}")]
    InvalidPath(String),
    #[error("{0:?} namespace is out of blocks")]
    StorageFull(NamespaceKind),
    #[error("inode {0} does not exist")]
    StaleInode(Ino),
    #[error("handle {0} was opened by the other side")]
    WrongSide(HandleId),
    #[error("sync message {0} is not awaiting acknowledgment")]
    UnknownSync(u64),
    #[error("trace line {line}: {reason}")]
    Trace { line: usize, reason: String },
}

/// Filesystem plus lock protocol plus the host's cached view.
#[derive(Debug, Clone)]
pub struct LambdaFs {
    pub image: FsImage,
    pub locks: LockManager,
    pub vfs: VfsCacheModel,
    bindings: BTreeMap<Ino, String>,
    unacked: BTreeMap<u64, Ino>,
    outbox: Vec<SyncMessage>,
    next_sync: u64,
}

impl LambdaFs {
    pub fn mkfs(namespaces: &[Namespace]) -> Result<Self, FsError> {
        Ok(Self::from_image(FsImage::mkfs(namespaces)?))
    }

    pub fn from_image(image: FsImage) -> Self {
        Self {
            image,
            locks: LockManager::default(),
            vfs: VfsCacheModel::default(),
            bindings: BTreeMap::new(),
            unacked: BTreeMap::new(),
            outbox: Vec::new(),
            next_sync: 1,
        }
    }

    /// Registers a sharable path for host/container exchange and queues a
    /// sync message for the host. Container opens of a binding stay blocked
    /// until the host acknowledges that message.
    pub fn bind(&mut self, path: &str) -> Result<InodeLock, FsError> {
        let ino = self.image.lookup(path, PcieFunction::Firmware)?;
        if self.image.inode(ino)?.ns == NamespaceKind::Private {
            return Err(FsError::PrivatePathBind(path.to_string()));
        }
        if let std::collections::btree_map::Entry::Vacant(e) = self.bindings.entry(ino) {
            e.insert(fs::normalize(path)?);
            let seq = self.next_sync;
            self.next_sync += 1;
            self.unacked.insert(seq, ino);
            self.locks.fence(ino);
            self.outbox.push(SyncMessage {
                seq,
                kind: SyncKind::Bind,
                path: fs::normalize(path)?,
                ino,
            });
        }
        Ok(self.locks.lock_state(ino))
    }

    pub fn is_bound(&self, path: &str) -> bool {
        self.image
            .lookup(path, PcieFunction::Firmware)
            .is_ok_and(|ino| self.bindings.contains_key(&ino))
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&Ino, &String)> {
        self.bindings.iter()
    }

    /// Sync messages not yet put on the wire.
    pub fn take_outbox(&mut self) -> Vec<SyncMessage> {
        std::mem::take(&mut self.outbox)
    }

    /// Records the host's acknowledgment and admits any waiters it unblocks.
    pub fn acknowledge(&mut self, seq: u64) -> Result<Vec<Grant>, FsError> {
        let ino = self.unacked.remove(&seq).ok_or(FsError::UnknownSync(seq))?;
        self.locks.unfence(ino);
        let grants = self.locks.reevaluate();
        Ok(self.after_grants(grants))
    }

    /// Acknowledges everything outstanding, as a synchronous round trip would.
    pub fn acknowledge_all(&mut self) -> Vec<Grant> {
        let seqs: Vec<u64> = self.unacked.keys().copied().collect();
        seqs.into_iter()
            .flat_map(|s| self.acknowledge(s).unwrap_or_default())
            .collect()
    }

    pub fn open(&mut self, side: Side, path: &str) -> Result<OpenOutcome, FsError> {
        let ino = self.image.lookup(path, side.function())?;
        let parent = self.image.inode(ino)?.parent;
        let outcome = self.locks.open(side, ino, parent);
        if let OpenOutcome::Granted(h) = outcome {
            self.after_grants(vec![Grant {
                ticket: None,
                handle: h,
            }]);
        }
        Ok(outcome)
    }

    pub fn close(&mut self, handle: HandleId) -> Result<Vec<Grant>, FsError> {
        let grants = self.locks.close(handle)?;
        Ok(self.after_grants(grants))
    }

    pub fn cancel(&mut self, ticket: WaitTicket) -> Result<(), FsError> {
        self.locks.cancel(ticket)
    }

    fn after_grants(&mut self, grants: Vec<Grant>) -> Vec<Grant> {
        for g in &grants {
            if g.handle.side == Side::Container {
                self.vfs.invalidate(g.handle.ino);
                self.vfs.invalidate(g.handle.parent);
            }
        }
        grants
    }

    /// Reads through the handle. Host reads are served from the VFS cache
    /// when it holds a valid entry.
    pub fn read(&mut self, handle: HandleId) -> Result<Vec<u8>, FsError> {
        let h = self.locks.handle(handle)?;
        if h.side == Side::Host {
            if let Some(data) = self.vfs.get(h.ino) {
                return Ok(data.to_vec());
            }
            let data = self.image.read_all(h.ino)?;
            self.vfs.fill(h.ino, data.clone());
            return Ok(data);
        }
        self.image.read_all(h.ino)
    }

    pub fn write(&mut self, handle: HandleId, data: &[u8]) -> Result<(), FsError> {
        let h = self.locks.handle(handle)?;
        self.image.write_all(h.ino, data)?;
        if h.side == Side::Host {
            self.vfs.fill(h.ino, data.to_vec());
        }
        Ok(())
    }

    /// Drops all lock state and the host cache. Data and bindings survive.
    pub fn crash_recover(&mut self) {
        self.locks = LockManager::default();
        self.vfs = VfsCacheModel::default();
        self.unacked.clear();
        self.outbox.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvme::{NamespaceSpec, NamespaceTable};

    fn fs() -> LambdaFs {
        let t = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..1000,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 1000..10000,
            },
        ])
        .unwrap();
        let mut fs = LambdaFs::mkfs(t.all()).unwrap();
        fs.image
            .mkdir_all("/data/tpch", PcieFunction::Host)
            .unwrap();
        fs.image
            .create("/data/tpch/lineitem", PcieFunction::Host)
            .unwrap();
        fs
    }

    #[test]
    fn bind_emits_one_sync_message_and_is_idempotent() {
        let mut fs = fs();
        let a = fs.bind("/data/tpch").unwrap();
        let b = fs.bind("/data/tpch").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.refcount(Side::Host) + a.refcount(Side::Container), 0);
        let out = fs.take_outbox();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].path, "/data/tpch");
    }

    #[test]
    fn bind_private_refused() {
        let mut fs = fs();
        assert_eq!(
            fs.bind("/images/blobs"),
            Err(FsError::PrivatePathBind("/images/blobs".into()))
        );
        assert!(matches!(fs.bind("/nope"), Err(FsError::PathNotFound(_))));
    }

    #[test]
    fn container_open_waits_for_sync_ack() {
        let mut fs = fs();
        fs.bind("/data/tpch/lineitem").unwrap();
        let OpenOutcome::Blocked(t) = fs.open(Side::Container, "/data/tpch/lineitem").unwrap()
        else {
            panic!("expected block before ack")
        };
        let seq = fs.take_outbox()[0].seq;
        let grants = fs.acknowledge(seq).unwrap();
        assert_eq!(grants.len(), 1);
        assert_eq!(grants[0].ticket, Some(t));
    }

    #[test]
    fn container_grant_invalidates_host_cache() {
        let mut fs = fs();
        let OpenOutcome::Granted(h) = fs.open(Side::Host, "/data/tpch/lineitem").unwrap() else {
            panic!()
        };
        fs.write(h.id, b"v1").unwrap();
        assert_eq!(fs.read(h.id).unwrap(), b"v1");
        fs.close(h.id).unwrap();
        let OpenOutcome::Granted(c) = fs.open(Side::Container, "/data/tpch/lineitem").unwrap()
        else {
            panic!()
        };
        assert!(fs.vfs.get(h.ino).is_none());
        fs.write(c.id, b"v2").unwrap();
        fs.close(c.id).unwrap();
        let OpenOutcome::Granted(h2) = fs.open(Side::Host, "/data/tpch/lineitem").unwrap() else {
            panic!()
        };
        assert_eq!(fs.read(h2.id).unwrap(), b"v2");
    }

    #[test]
    fn crash_clears_locks_keeps_data() {
        let mut fs = fs();
        let mut last = None;
        for _ in 0..3 {
            let OpenOutcome::Granted(h) = fs.open(Side::Host, "/data/tpch/lineitem").unwrap()
            else {
                panic!()
            };
            last = Some(h);
        }
        let h = last.unwrap();
        fs.write(h.id, b"persist").unwrap();
        assert_eq!(fs.locks.lock_state(h.ino).refcount(Side::Host), 3);
        fs.crash_recover();
        assert_eq!(fs.locks.lock_state(h.ino).refcount(Side::Host), 0);
        assert_eq!(fs.close(h.id), Err(FsError::DoubleClose(h.id)));
        assert!(matches!(
            fs.open(Side::Container, "/data/tpch/lineitem").unwrap(),
            OpenOutcome::Granted(_)
        ));
        assert_eq!(fs.image.read_all(h.ino).unwrap(), b"persist");
    }
}
