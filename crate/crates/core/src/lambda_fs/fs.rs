use std::collections::BTreeMap;

use super::FsError;
use crate::nvme::{Namespace, NamespaceKind, PcieFunction};

pub type Ino = u64;

pub const BLOCK_SIZE: usize = 4096;
pub const ROOT_INO: Ino = 1;

pub const IMAGES_DIR: &str = "/images";
pub const IMAGES_BLOBS_DIR: &str = "/images/blobs";
pub const IMAGES_MANIFEST_DIR: &str = "/images/manifest";
pub const CONTAINERS_DIR: &str = "/containers";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InodeKind {
    File,
    Dir { children: BTreeMap<String, Ino> },
    Symlink { target: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inode {
    pub ino: Ino,
    pub kind: InodeKind,
    pub ns: NamespaceKind,
    pub size: u64,
    /// Physical blocks in file order.
    pub blocks: Vec<u64>,
    pub parent: Ino,
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
}

impl Inode {
    pub fn is_dir(&self) -> bool {
        matches!(self.kind, InodeKind::Dir { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    pub name: String,
    pub ino: Ino,
    pub is_dir: bool,
}

/// Per-namespace block allocator with a first-fit cursor.
#[derive(Debug, Clone)]
struct Allocator {
    first: u64,
    used: Vec<bool>,
    cursor: usize,
    free: usize,
}

impl Allocator {
    fn new(ns: &Namespace) -> Self {
        let n = ns.len() as usize;
        Self {
            first: ns.blocks.start,
            used: vec![false; n],
            cursor: 0,
            free: n,
        }
    }

    fn alloc(&mut self) -> Option<u64> {
        if self.free == 0 {
            return None;
        }
        let n = self.used.len();
        for step in 0..n {
            let i = (self.cursor + step) % n;
            if !self.used[i] {
                self.used[i] = true;
                self.cursor = (i + 1) % n;
                self.free -= 1;
                return Some(self.first + i as u64);
            }
        }
        None
    }

    fn release(&mut self, block: u64) {
        let i = (block - self.first) as usize;
        if std::mem::replace(&mut self.used[i], false) {
            self.free += 1;
        }
    }
}

pub(crate) fn normalize(path: &str) -> Result<String, FsError> {
    Ok(format!("/{}", components(path)?.join("/")))
}

fn components(path: &str) -> Result<Vec<&str>, FsError> {
    if !path.starts_with('/') {
        return Err(FsError::InvalidPath(path.to_string()));
    }
    let parts: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
    if parts.iter().any(|c| *c == "." || *c == "..") {
        return Err(FsError::InvalidPath(path.to_string()));
    }
    Ok(parts)
}

/// Splits into (parent path, final component).
fn split_last(path: &str) -> Result<(String, String), FsError> {
    let mut parts = components(path)?;
    let name = parts
        .pop()
        .ok_or_else(|| FsError::InvalidPath(path.to_string()))?;
    Ok((format!("/{}", parts.join("/")), name.to_string()))
}

/// Inode table and block store for both namespaces.
#[derive(Debug, Clone)]
pub struct FsImage {
    inodes: BTreeMap<Ino, Inode>,
    next_ino: Ino,
    alloc: BTreeMap<NamespaceKind, Allocator>,
    data: BTreeMap<u64, Box<[u8; BLOCK_SIZE]>>,
}

impl FsImage {
    /// Creates the root on the sharable namespace and the image/container
    /// directories on the private one.
    pub fn mkfs(namespaces: &[Namespace]) -> Result<Self, FsError> {
        let mut alloc = BTreeMap::new();
        for kind in [NamespaceKind::Private, NamespaceKind::Sharable] {
            let ns = namespaces
                .iter()
                .find(|n| n.kind == kind)
                .ok_or(FsError::NamespaceMissing(kind))?;
            alloc.insert(kind, Allocator::new(ns));
        }
        let root = Inode {
            ino: ROOT_INO,
            kind: InodeKind::Dir {
                children: BTreeMap::new(),
            },
            ns: NamespaceKind::Sharable,
            size: 0,
            blocks: Vec::new(),
            parent: ROOT_INO,
            mode: 0o755,
            uid: 0,
            gid: 0,
        };
        let mut fs = Self {
            inodes: BTreeMap::from([(ROOT_INO, root)]),
            next_ino: ROOT_INO + 1,
            alloc,
            data: BTreeMap::new(),
        };
        for dir in [
            IMAGES_DIR,
            IMAGES_BLOBS_DIR,
            IMAGES_MANIFEST_DIR,
            CONTAINERS_DIR,
        ] {
            let (parent, name) = split_last(dir)?;
            let p = fs.lookup(&parent, PcieFunction::Firmware)?;
            fs.insert_child(
                p,
                &name,
                InodeKind::Dir {
                    children: BTreeMap::new(),
                },
                Some(NamespaceKind::Private),
            )?;
        }
        Ok(fs)
    }

    pub fn inode(&self, ino: Ino) -> Result<&Inode, FsError> {
        self.inodes.get(&ino).ok_or(FsError::StaleInode(ino))
    }

    fn inode_mut(&mut self, ino: Ino) -> Result<&mut Inode, FsError> {
        self.inodes.get_mut(&ino).ok_or(FsError::StaleInode(ino))
    }

    pub fn is_live(&self, ino: Ino) -> bool {
        self.inodes.contains_key(&ino)
    }

    pub fn inode_count(&self) -> usize {
        self.inodes.len()
    }

    /// One directory lookup step.
    pub fn lookup_child(&self, dir: Ino, name: &str) -> Result<Option<Ino>, FsError> {
        match &self.inode(dir)?.kind {
            InodeKind::Dir { children } => Ok(children.get(name).copied()),
            _ => Err(FsError::NotADirectory(name.to_string())),
        }
    }

    /// Resolves an absolute path without following symlinks.
    pub fn lookup(&self, path: &str, function: PcieFunction) -> Result<Ino, FsError> {
        let mut ino = ROOT_INO;
        for c in components(path)? {
            ino = self
                .lookup_child(ino, c)?
                .ok_or_else(|| FsError::PathNotFound(path.to_string()))?;
            if !function.sees(self.inode(ino)?.ns) {
                return Err(FsError::NamespaceNotVisible {
                    path: path.to_string(),
                    function,
                });
            }
        }
        Ok(ino)
    }

    pub fn exists(&self, path: &str, function: PcieFunction) -> bool {
        self.lookup(path, function).is_ok()
    }

    pub fn path_of(&self, mut ino: Ino) -> Result<String, FsError> {
        let mut parts = Vec::new();
        while ino != ROOT_INO {
            let node = self.inode(ino)?;
            let parent = self.inode(node.parent)?;
            let InodeKind::Dir { children } = &parent.kind else {
                return Err(FsError::StaleInode(ino));
            };
            let name = children
                .iter()
                .find(|(_, &c)| c == ino)
                .map(|(n, _)| n.clone())
                .ok_or(FsError::StaleInode(ino))?;
            parts.push(name);
            ino = node.parent;
        }
        parts.reverse();
        Ok(format!("/{}", parts.join("/")))
    }

    fn insert_child(
        &mut self,
        dir: Ino,
        name: &str,
        kind: InodeKind,
        ns: Option<NamespaceKind>,
    ) -> Result<Ino, FsError> {
        if self.lookup_child(dir, name)?.is_some() {
            return Err(FsError::AlreadyExists(name.to_string()));
        }
        let ns = ns.unwrap_or(self.inode(dir)?.ns);
        let ino = self.next_ino;
        self.next_ino += 1;
        let mode = if matches!(kind, InodeKind::Dir { .. }) {
            0o755
        } else {
            0o644
        };
        let size = match &kind {
            InodeKind::Symlink { target } => target.len() as u64,
            _ => 0,
        };
        self.inodes.insert(
            ino,
            Inode {
                ino,
                kind,
                ns,
                size,
                blocks: Vec::new(),
                parent: dir,
                mode,
                uid: 0,
                gid: 0,
            },
        );
        if let InodeKind::Dir { children } = &mut self.inode_mut(dir)?.kind {
            children.insert(name.to_string(), ino);
        }
        Ok(ino)
    }

    fn parent_dir(&self, path: &str, function: PcieFunction) -> Result<(Ino, String), FsError> {
        let (parent, name) = split_last(path)?;
        let p = self.lookup(&parent, function)?;
        if !self.inode(p)?.is_dir() {
            return Err(FsError::NotADirectory(parent));
        }
        Ok((p, name))
    }

    pub fn mkdir(&mut self, path: &str, function: PcieFunction) -> Result<Ino, FsError> {
        let (p, name) = self.parent_dir(path, function)?;
        self.insert_child(
            p,
            &name,
            InodeKind::Dir {
                children: BTreeMap::new(),
            },
            None,
        )
    }

    /// Creates every missing directory along `path`.
    pub fn mkdir_all(&mut self, path: &str, function: PcieFunction) -> Result<Ino, FsError> {
        let mut ino = ROOT_INO;
        for c in components(path)? {
            ino = match self.lookup_child(ino, c)? {
                Some(next) => {
                    if !function.sees(self.inode(next)?.ns) {
                        return Err(FsError::NamespaceNotVisible {
                            path: path.to_string(),
                            function,
                        });
                    }
                    next
                }
                None => self.insert_child(
                    ino,
                    c,
                    InodeKind::Dir {
                        children: BTreeMap::new(),
                    },
                    None,
                )?,
            };
        }
        Ok(ino)
    }

    pub fn create(&mut self, path: &str, function: PcieFunction) -> Result<Ino, FsError> {
        let (p, name) = self.parent_dir(path, function)?;
        self.insert_child(p, &name, InodeKind::File, None)
    }

    /// Returns the existing file or creates it (parents included).
    pub fn create_all(&mut self, path: &str, function: PcieFunction) -> Result<Ino, FsError> {
        if let Ok(ino) = self.lookup(path, function) {
            if self.inode(ino)?.is_dir() {
                return Err(FsError::IsADirectory(path.to_string()));
            }
            return Ok(ino);
        }
        let (parent, _) = split_last(path)?;
        self.mkdir_all(&parent, function)?;
        self.create(path, function)
    }

    pub fn symlink(
        &mut self,
        path: &str,
        target: &str,
        function: PcieFunction,
    ) -> Result<Ino, FsError> {
        let (p, name) = self.parent_dir(path, function)?;
        self.insert_child(
            p,
            &name,
            InodeKind::Symlink {
                target: target.to_string(),
            },
            None,
        )
    }

    pub fn readlink(&self, ino: Ino) -> Result<String, FsError> {
        match &self.inode(ino)?.kind {
            InodeKind::Symlink { target } => Ok(target.clone()),
            _ => Err(FsError::InvalidPath(format!(
                "inode {ino} is not a symlink"
            ))),
        }
    }

    /// Removes a file, symlink or empty directory.
    pub fn unlink(&mut self, path: &str, function: PcieFunction) -> Result<(), FsError> {
        let ino = self.lookup(path, function)?;
        if ino == ROOT_INO {
            return Err(FsError::InvalidPath(path.to_string()));
        }
        if let InodeKind::Dir { children } = &self.inode(ino)?.kind {
            if !children.is_empty() {
                return Err(FsError::DirectoryNotEmpty(path.to_string()));
            }
        }
        self.truncate(ino, 0)?;
        let node = self.inodes.remove(&ino).expect("looked up");
        if let InodeKind::Dir { children } = &mut self.inode_mut(node.parent)?.kind {
            children.retain(|_, c| *c != ino);
        }
        Ok(())
    }

    /// Removes a subtree.
    pub fn remove_all(&mut self, path: &str, function: PcieFunction) -> Result<(), FsError> {
        let ino = self.lookup(path, function)?;
        let entries = if self.inode(ino)?.is_dir() {
            self.list(ino)?
        } else {
            Vec::new()
        };
        let base = normalize(path)?;
        for e in entries {
            self.remove_all(
                &format!("{}/{}", base.trim_end_matches('/'), e.name),
                function,
            )?;
        }
        self.unlink(&base, function)
    }

    pub fn list(&self, dir: Ino) -> Result<Vec<DirEntry>, FsError> {
        match &self.inode(dir)?.kind {
            InodeKind::Dir { children } => Ok(children
                .iter()
                .map(|(name, &ino)| DirEntry {
                    name: name.clone(),
                    ino,
                    is_dir: self.inodes[&ino].is_dir(),
                })
                .collect()),
            _ => Err(FsError::NotADirectory(format!("inode {dir}"))),
        }
    }

    /// Entries of `path` that `function` may see.
    pub fn list_path(&self, path: &str, function: PcieFunction) -> Result<Vec<DirEntry>, FsError> {
        let ino = self.lookup(path, function)?;
        Ok(self
            .list(ino)?
            .into_iter()
            .filter(|e| function.sees(self.inodes[&e.ino].ns))
            .collect())
    }

    pub fn set_mode(&mut self, ino: Ino, mode: u32) -> Result<(), FsError> {
        self.inode_mut(ino)?.mode = mode;
        Ok(())
    }

    pub fn set_owner(&mut self, ino: Ino, uid: u32, gid: u32) -> Result<(), FsError> {
        let n = self.inode_mut(ino)?;
        n.uid = uid;
        n.gid = gid;
        Ok(())
    }

    fn file_mut(&mut self, ino: Ino) -> Result<&mut Inode, FsError> {
        let n = self.inode_mut(ino)?;
        match n.kind {
            InodeKind::File => Ok(n),
            InodeKind::Dir { .. } => Err(FsError::IsADirectory(format!("inode {ino}"))),
            InodeKind::Symlink { .. } => {
                Err(FsError::InvalidPath(format!("inode {ino} is a symlink")))
            }
        }
    }

    pub fn read_at(&self, ino: Ino, offset: u64, len: usize) -> Result<Vec<u8>, FsError> {
        let n = self.inode(ino)?;
        if n.is_dir() {
            return Err(FsError::IsADirectory(format!("inode {ino}")));
        }
        let end = (offset + len as u64).min(n.size);
        let mut out = Vec::with_capacity(end.saturating_sub(offset) as usize);
        let mut pos = offset;
        while pos < end {
            let bi = (pos / BLOCK_SIZE as u64) as usize;
            let within = (pos % BLOCK_SIZE as u64) as usize;
            let take = ((BLOCK_SIZE - within) as u64).min(end - pos) as usize;
            match self.data.get(&n.blocks[bi]) {
                Some(b) => out.extend_from_slice(&b[within..within + take]),
                None => out.resize(out.len() + take, 0),
            }
            pos += take as u64;
        }
        Ok(out)
    }

    pub fn read_all(&self, ino: Ino) -> Result<Vec<u8>, FsError> {
        let size = self.inode(ino)?.size as usize;
        self.read_at(ino, 0, size)
    }

    pub fn write_at(&mut self, ino: Ino, offset: u64, bytes: &[u8]) -> Result<(), FsError> {
        let end = offset + bytes.len() as u64;
        let need = end.div_ceil(BLOCK_SIZE as u64) as usize;
        let ns = self.file_mut(ino)?.ns;
        let have = self.inode(ino)?.blocks.len();
        if need > have {
            let alloc = self.alloc.get_mut(&ns).expect("both namespaces exist");
            let mut fresh = Vec::with_capacity(need - have);
            for _ in have..need {
                match alloc.alloc() {
                    Some(b) => fresh.push(b),
                    None => {
                        for b in fresh {
                            alloc.release(b);
                        }
                        return Err(FsError::StorageFull(ns));
                    }
                }
            }
            for &b in &fresh {
                self.data.remove(&b);
            }
            self.file_mut(ino)?.blocks.extend(fresh);
        }
        let blocks = self.inode(ino)?.blocks.clone();
        let mut pos = offset;
        let mut src = bytes;
        while !src.is_empty() {
            let bi = (pos / BLOCK_SIZE as u64) as usize;
            let within = (pos % BLOCK_SIZE as u64) as usize;
            let take = (BLOCK_SIZE - within).min(src.len());
            let block = self
                .data
                .entry(blocks[bi])
                .or_insert_with(|| Box::new([0u8; BLOCK_SIZE]));
            block[within..within + take].copy_from_slice(&src[..take]);
            src = &src[take..];
            pos += take as u64;
        }
        let n = self.file_mut(ino)?;
        n.size = n.size.max(end);
        Ok(())
    }

    pub fn append(&mut self, ino: Ino, bytes: &[u8]) -> Result<(), FsError> {
        let size = self.inode(ino)?.size;
        self.write_at(ino, size, bytes)
    }

    pub fn truncate(&mut self, ino: Ino, len: u64) -> Result<(), FsError> {
        let n = self.inode_mut(ino)?;
        if n.is_dir() {
            return Ok(());
        }
        let keep = len.div_ceil(BLOCK_SIZE as u64) as usize;
        let ns = n.ns;
        let dropped: Vec<u64> = if n.blocks.len() > keep {
            n.blocks.split_off(keep)
        } else {
            Vec::new()
        };
        n.size = n.size.min(len);
        let tail_block = (!len.is_multiple_of(BLOCK_SIZE as u64))
            .then(|| n.blocks.last().copied())
            .flatten();
        let alloc = self.alloc.get_mut(&ns).expect("both namespaces exist");
        for b in dropped {
            alloc.release(b);
            self.data.remove(&b);
        }
        if let Some(b) = tail_block {
            if let Some(d) = self.data.get_mut(&b) {
                d[(len % BLOCK_SIZE as u64) as usize..].fill(0);
            }
        }
        Ok(())
    }

    pub fn write_all(&mut self, ino: Ino, bytes: &[u8]) -> Result<(), FsError> {
        self.truncate(ino, 0)?;
        self.write_at(ino, 0, bytes)
    }

    pub fn free_blocks(&self, kind: NamespaceKind) -> usize {
        self.alloc[&kind].free
    }

    /// Checks structural invariants: disjoint block lists, sizes covered by
    /// blocks, blocks inside their own namespace, parent links consistent.
    pub fn check(&self) -> Result<(), String> {
        let mut owner: BTreeMap<u64, Ino> = BTreeMap::new();
        for n in self.inodes.values() {
            if n.size > (n.blocks.len() * BLOCK_SIZE) as u64 && matches!(n.kind, InodeKind::File) {
                return Err(format!(
                    "inode {} size {} exceeds {} blocks",
                    n.ino,
                    n.size,
                    n.blocks.len()
                ));
            }
            let a = &self.alloc[&n.ns];
            for &b in &n.blocks {
                if b < a.first || b >= a.first + a.used.len() as u64 {
                    return Err(format!("inode {} block {b} outside its namespace", n.ino));
                }
                if let Some(other) = owner.insert(b, n.ino) {
                    return Err(format!("block {b} shared by inodes {other} and {}", n.ino));
                }
            }
            if n.ino != ROOT_INO {
                let InodeKind::Dir { children } =
                    &self.inode(n.parent).map_err(|e| e.to_string())?.kind
                else {
                    return Err(format!("parent of {} is not a directory", n.ino));
                };
                if !children.values().any(|&c| c == n.ino) {
                    return Err(format!("inode {} missing from its parent", n.ino));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvme::{NamespaceSpec, NamespaceTable};

    fn image() -> FsImage {
        let t = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..16,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 16..64,
            },
        ])
        .unwrap();
        FsImage::mkfs(t.all()).unwrap()
    }

    #[test]
    fn layout_after_mkfs() {
        let fs = image();
        for p in [IMAGES_BLOBS_DIR, IMAGES_MANIFEST_DIR, CONTAINERS_DIR] {
            assert!(fs.exists(p, PcieFunction::Firmware));
            assert!(matches!(
                fs.lookup(p, PcieFunction::Host),
                Err(FsError::NamespaceNotVisible { .. })
            ));
        }
        assert_eq!(fs.lookup("/", PcieFunction::Host), Ok(ROOT_INO));
        assert!(fs.list_path("/", PcieFunction::Host).unwrap().is_empty());
    }

    #[test]
    fn mkfs_needs_both_namespaces() {
        let t = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..16,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 16..64,
            },
        ])
        .unwrap();
        let sharable_only = vec![t.by_kind(NamespaceKind::Sharable).clone()];
        assert_eq!(
            FsImage::mkfs(&sharable_only).unwrap_err(),
            FsError::NamespaceMissing(NamespaceKind::Private)
        );
    }

    #[test]
    fn file_io_spans_blocks() {
        let mut fs = image();
        let ino = fs.create_all("/data/x", PcieFunction::Host).unwrap();
        let payload: Vec<u8> = (0..10000u32).map(|i| i as u8).collect();
        fs.write_all(ino, &payload).unwrap();
        assert_eq!(fs.inode(ino).unwrap().blocks.len(), 3);
        assert_eq!(fs.read_all(ino).unwrap(), payload);
        assert_eq!(fs.read_at(ino, 4090, 10).unwrap(), payload[4090..4100]);
        fs.truncate(ino, 5000).unwrap();
        assert_eq!(fs.inode(ino).unwrap().blocks.len(), 2);
        fs.append(ino, b"xyz").unwrap();
        assert_eq!(&fs.read_all(ino).unwrap()[5000..], b"xyz");
        fs.check().unwrap();
    }

    #[test]
    fn private_children_inherit_namespace() {
        let mut fs = image();
        let ino = fs
            .create_all("/containers/abc/rootfs/log", PcieFunction::Firmware)
            .unwrap();
        assert_eq!(fs.inode(ino).unwrap().ns, NamespaceKind::Private);
        fs.write_all(ino, b"hello").unwrap();
        assert!(fs.inode(ino).unwrap().blocks[0] < 16);
        assert!(fs
            .create_all("/containers/def", PcieFunction::Host)
            .is_err());
    }

    #[test]
    fn storage_full_is_reported_and_rolled_back() {
        let mut fs = image();
        let ino = fs
            .create_all("/containers/big", PcieFunction::Firmware)
            .unwrap();
        assert_eq!(
            fs.write_all(ino, &vec![1; 17 * BLOCK_SIZE]),
            Err(FsError::StorageFull(NamespaceKind::Private))
        );
        assert_eq!(fs.free_blocks(NamespaceKind::Private), 16);
    }

    #[test]
    fn unlink_and_remove_all() {
        let mut fs = image();
        fs.create_all("/a/b/c", PcieFunction::Host).unwrap();
        assert!(matches!(
            fs.unlink("/a/b", PcieFunction::Host),
            Err(FsError::DirectoryNotEmpty(_))
        ));
        let c = fs.lookup("/a/b/c", PcieFunction::Host).unwrap();
        fs.write_all(c, b"data").unwrap();
        fs.remove_all("/a", PcieFunction::Host).unwrap();
        assert!(!fs.exists("/a", PcieFunction::Host));
        assert_eq!(fs.free_blocks(NamespaceKind::Sharable), 48);
        fs.check().unwrap();
    }

    #[test]
    fn path_of_round_trip() {
        let mut fs = image();
        let ino = fs.create_all("/x/y/z", PcieFunction::Host).unwrap();
        assert_eq!(fs.path_of(ino).unwrap(), "/x/y/z");
        assert!(matches!(
            fs.lookup("relative", PcieFunction::Host),
            Err(FsError::InvalidPath(_))
        ));
    }
}
