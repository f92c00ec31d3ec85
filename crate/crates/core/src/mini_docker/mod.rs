//! mini-docker: the container engine that runs inside the device.
//!
//! Images arrive as tar archives over HTTP, are stored content-addressed in
//! λFS and unpacked once into shared read-only layer directories. Each
//! container gets a writable upper directory at `/containers/<id>/rootfs`
//! merged over those layers.

mod http;
mod image;
mod overlay;
mod script;

pub use http::{cli_request, Command, HttpRequest, HttpResponse};
pub use image::{
    digest_hex, digest_of, layer_tar, manifest_file_name, split_reference, untar, ImageArchive,
    ImageBuilder, ImageConfig, ImageManifest,
};
pub use overlay::{Overlay, OPAQUE_MARKER, WHITEOUT_PREFIX};
pub use script::{parse_script, ScriptOp};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lambda_fs::{
    FsError, CONTAINERS_DIR, IMAGES_BLOBS_DIR, IMAGES_DIR, IMAGES_MANIFEST_DIR,
};
use crate::nvme::PcieFunction;
use crate::virtual_fw::net::SocketId;
use crate::virtual_fw::{Arg, FwError, RootfsView, SyscallInvocation, Tid, VirtualFw};

const FW: PcieFunction = PcieFunction::Firmware;
pub const IMAGES_LAYERS_DIR: &str = "/images/layers";
pub const LOG_FILE: &str = "/log";
pub const DOCKER_PORT: u16 = 2375;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DockerError {
    #[error("unsupported command: {0}")]
    UnsupportedCommand(String),
    #[error("malformed request: {0}")]
    MalformedRequest(String),
    #[error("image {0} not found")]
    ImageNotFound(String),
    #[error("container {0} not found")]
    ContainerNotFound(String),
    #[error("cannot {command} container {id} in state {state:?}")]
    IllegalState {
        id: String,
        state: ContainerState,
        command: String,
    },
    #[error("image {0} is used by a container")]
    ImageInUse(String),
    #[error("digest mismatch: expected {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("blob {0} missing from archive")]
    MissingBlob(String),
    #[error("storage full")]
    StorageFull,
    #[error("entry script {0} not found")]
    NoEntryScript(String),
    #[error(transparent)]
    Fs(FsError),
    #[error(transparent)]
    Fw(FwError),
}

impl From<FsError> for DockerError {
    fn from(e: FsError) -> Self {
        match e {
            FsError::StorageFull(_) => DockerError::StorageFull,
            other => DockerError::Fs(other),
        }
    }
}

impl From<FwError> for DockerError {
    fn from(e: FwError) -> Self {
        match e {
            FwError::NoEntryScript(p) => DockerError::NoEntryScript(p),
            FwError::Fs(fs) => fs.into(),
            other => DockerError::Fw(other),
        }
    }
}

impl DockerError {
    pub fn status(&self) -> u16 {
        match self {
            DockerError::UnsupportedCommand(_) => 501,
            DockerError::MalformedRequest(_) | DockerError::MissingBlob(_) => 400,
            DockerError::ImageNotFound(_)
            | DockerError::ContainerNotFound(_)
            | DockerError::NoEntryScript(_) => 404,
            DockerError::IllegalState { .. } | DockerError::ImageInUse(_) => 409,
            DockerError::DigestMismatch { .. } => 422,
            DockerError::StorageFull => 507,
            DockerError::Fs(_) | DockerError::Fw(_) => 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerState {
    Created,
    Running,
    Stopped,
    Removed,
}

impl ContainerState {
    pub const ALL: [ContainerState; 4] = [
        ContainerState::Created,
        ContainerState::Running,
        ContainerState::Stopped,
        ContainerState::Removed,
    ];
}

/// Lifecycle edges; `None` is the state before create.
pub const LIFECYCLE_EDGES: [(Option<ContainerState>, ContainerState); 7] = [
    (None, ContainerState::Created),
    (Some(ContainerState::Created), ContainerState::Running),
    (Some(ContainerState::Stopped), ContainerState::Running),
    (Some(ContainerState::Running), ContainerState::Stopped),
    (Some(ContainerState::Running), ContainerState::Running),
    (Some(ContainerState::Created), ContainerState::Removed),
    (Some(ContainerState::Stopped), ContainerState::Removed),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Transition {
    pub id: String,
    pub command: String,
    pub from: Option<ContainerState>,
    pub to: ContainerState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DockerConfig {
    /// Discard the upper directory on restart instead of keeping it.
    pub restart_resets_upper: bool,
    pub port: u16,
}

impl Default for DockerConfig {
    fn default() -> Self {
        Self {
            restart_resets_upper: false,
            port: DOCKER_PORT,
        }
    }
}

/// A manifest together with its verified runtime configuration; the
/// content of a file under `/images/manifest`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredImage {
    #[serde(flatten)]
    pub manifest: ImageManifest,
    pub runtime: ImageConfig,
}

/// Written to `/containers/<id>/config.json` at create.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub id: String,
    pub image: String,
    pub entry: String,
    pub env: Vec<String>,
    pub lowers: Vec<String>,
    pub upper: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContainerRecord {
    pub id: String,
    pub image: String,
    pub state: ContainerState,
    #[serde(skip)]
    pub overlay: Overlay,
    #[serde(skip)]
    pub entry: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSummary {
    pub id: String,
    pub image: String,
    pub state: ContainerState,
}

struct OverlayView<'a> {
    fw: &'a VirtualFw,
    overlay: &'a Overlay,
}

impl RootfsView for OverlayView<'_> {
    fn has_entry(&self, entry: &str) -> bool {
        self.overlay
            .resolve(&self.fw.fs.image, entry)
            .is_some_and(|p| {
                self.fw
                    .fs
                    .image
                    .lookup(&p, FW)
                    .is_ok_and(|ino| self.fw.fs.image.inode(ino).is_ok_and(|i| !i.is_dir()))
            })
    }
}

#[derive(Debug, Clone, Default)]
struct Daemon {
    listener: Option<SocketId>,
    conns: BTreeMap<SocketId, Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct MiniDocker {
    pub fw: VirtualFw,
    pub config: DockerConfig,
    images: BTreeMap<String, StoredImage>,
    containers: BTreeMap<String, ContainerRecord>,
    transitions: Vec<Transition>,
    created: u64,
    pending_sends: Vec<(SocketId, Vec<u8>)>,
    daemon: Daemon,
}

fn container_dir(id: &str) -> String {
    format!("{CONTAINERS_DIR}/{id}")
}

fn layer_dir(digest: &str) -> String {
    format!("{IMAGES_LAYERS_DIR}/{}", digest_hex(digest))
}

impl MiniDocker {
    pub fn new(mut fw: VirtualFw, config: DockerConfig) -> Result<Self, DockerError> {
        for d in [
            IMAGES_DIR,
            IMAGES_BLOBS_DIR,
            IMAGES_MANIFEST_DIR,
            IMAGES_LAYERS_DIR,
            CONTAINERS_DIR,
        ] {
            fw.fs.image.mkdir_all(d, FW)?;
        }
        Ok(Self {
            fw,
            config,
            images: BTreeMap::new(),
            containers: BTreeMap::new(),
            transitions: Vec::new(),
            created: 0,
            pending_sends: Vec::new(),
            daemon: Daemon::default(),
        })
    }

    pub fn images(&self) -> impl Iterator<Item = &StoredImage> {
        self.images.values()
    }

    pub fn container(&self, id: &str) -> Option<&ContainerRecord> {
        self.containers.get(id)
    }

    pub fn containers(&self) -> impl Iterator<Item = &ContainerRecord> {
        self.containers.values()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Parses one raw request and answers it.
    pub fn handle_http(&mut self, raw: &[u8]) -> HttpResponse {
        match HttpRequest::parse_complete(raw) {
            Ok(req) => self.handle_request(&req),
            Err(e) => error_response(&e),
        }
    }

    pub fn handle_request(&mut self, req: &HttpRequest) -> HttpResponse {
        match Command::from_request(req).and_then(|c| self.execute(c)) {
            Ok(r) => r,
            Err(e) => error_response(&e),
        }
    }

    pub fn execute(&mut self, cmd: Command) -> Result<HttpResponse, DockerError> {
        let id_body = |id: &str| HttpResponse::json(201, &serde_json::json!({ "Id": id }));
        Ok(match cmd {
            Command::Pull { image, archive } => {
                HttpResponse::json(200, &self.pull(&image, &archive)?)
            }
            Command::Rmi { image } => {
                self.rmi(&image)?;
                HttpResponse::new(204, Vec::new())
            }
            Command::Create { image } => id_body(&self.create(&image)?),
            Command::Run { image } => id_body(&self.run(&image)?),
            Command::Start { id } => no_content(self.start(&id)?),
            Command::Stop { id } => no_content(self.stop(&id)?),
            Command::Restart { id } => no_content(self.restart(&id)?),
            Command::Kill { id } => no_content(self.kill(&id)?),
            Command::Rm { id } => no_content(self.rm(&id)?),
            Command::Logs { id } => HttpResponse::new(200, self.logs(&id)?),
            Command::Ps => HttpResponse::json(200, &self.ps()),
        })
    }

    /// Stores an image. All digests are checked before anything is
    /// written; a failed write rolls the filesystem back.
    pub fn pull(&mut self, reference: &str, archive: &[u8]) -> Result<ImageManifest, DockerError> {
        let archive = ImageArchive::from_bytes(archive)?;
        let (name, tag) = split_reference(reference);
        if (
            archive.manifest.name.as_str(),
            archive.manifest.tag.as_str(),
        ) != (name, tag)
        {
            return Err(DockerError::MalformedRequest(format!(
                "archive holds {}, requested {reference}",
                archive.manifest.reference()
            )));
        }
        archive.verify()?;
        let runtime: ImageConfig = serde_json::from_slice(&archive.blobs[&archive.manifest.config])
            .map_err(|e| DockerError::MalformedRequest(format!("image config: {e}")))?;
        for d in &archive.manifest.layers {
            untar(&archive.blobs[d])?;
        }
        let stored = StoredImage {
            manifest: archive.manifest.clone(),
            runtime,
        };
        if self.images.get(&stored.manifest.reference()) == Some(&stored) {
            return Ok(stored.manifest);
        }
        let snapshot = self.fw.fs.image.clone();
        let r = self.store(&archive, &stored);
        if r.is_err() {
            self.fw.fs.image = snapshot;
            self.fw.cache.clear();
        }
        r?;
        self.images.insert(stored.manifest.reference(), stored);
        Ok(archive.manifest)
    }

    fn store(&mut self, archive: &ImageArchive, stored: &StoredImage) -> Result<(), DockerError> {
        let fs = &mut self.fw.fs.image;
        for d in &archive.manifest.layers {
            let path = format!("{IMAGES_BLOBS_DIR}/{}", digest_hex(d));
            if !fs.exists(&path, FW) {
                let ino = fs.create(&path, FW)?;
                fs.write_all(ino, &archive.blobs[d])?;
            }
        }
        let path = format!("{IMAGES_MANIFEST_DIR}/{}", stored.manifest.file_name());
        let ino = fs.create_all(&path, FW)?;
        fs.write_all(
            ino,
            &serde_json::to_vec_pretty(stored).expect("manifest serializes"),
        )?;
        Ok(())
    }

    fn image(&self, reference: &str) -> Result<&StoredImage, DockerError> {
        let (n, t) = split_reference(reference);
        self.images
            .get(&format!("{n}:{t}"))
            .ok_or_else(|| DockerError::ImageNotFound(reference.to_string()))
    }

    /// Removes an image and every layer no other image uses.
    pub fn rmi(&mut self, reference: &str) -> Result<(), DockerError> {
        let img = self.image(reference)?.clone();
        let key = img.manifest.reference();
        if self
            .containers
            .values()
            .any(|c| c.image == key && c.state != ContainerState::Removed)
        {
            return Err(DockerError::ImageInUse(key));
        }
        self.images.remove(&key);
        let fs = &mut self.fw.fs.image;
        fs.unlink(
            &format!("{IMAGES_MANIFEST_DIR}/{}", img.manifest.file_name()),
            FW,
        )?;
        for d in &img.manifest.layers {
            if self.images.values().any(|o| o.manifest.layers.contains(d)) {
                continue;
            }
            for p in [
                format!("{IMAGES_BLOBS_DIR}/{}", digest_hex(d)),
                layer_dir(d),
            ] {
                if fs.exists(&p, FW) {
                    fs.remove_all(&p, FW)?;
                    self.fw.cache.invalidate(&p);
                }
            }
        }
        Ok(())
    }

    fn unpack_layer(&mut self, digest: &str) -> Result<String, DockerError> {
        let dir = layer_dir(digest);
        let fs = &mut self.fw.fs.image;
        if fs.exists(&dir, FW) {
            return Ok(dir);
        }
        let blob =
            fs.read_all(fs.lookup(&format!("{IMAGES_BLOBS_DIR}/{}", digest_hex(digest)), FW)?)?;
        fs.mkdir_all(&dir, FW)?;
        for (path, data) in untar(&blob)? {
            let ino = fs.create_all(&format!("{dir}{path}"), FW)?;
            fs.write_all(ino, &data)?;
        }
        Ok(dir)
    }

    pub fn create(&mut self, reference: &str) -> Result<String, DockerError> {
        let img = self.image(reference)?.clone();
        let mut lowers = Vec::new();
        for d in &img.manifest.layers {
            lowers.push(self.unpack_layer(d)?);
        }
        self.created += 1;
        let seed = format!("{}#{}", img.manifest.reference(), self.created);
        let id = digest_hex(&digest_of(seed.as_bytes()))[..12].to_string();
        let dir = container_dir(&id);
        let upper = format!("{dir}/rootfs");
        let runtime = RuntimeConfig {
            id: id.clone(),
            image: img.manifest.reference(),
            entry: img.manifest.entry.clone(),
            env: img.runtime.env.clone(),
            lowers: lowers.clone(),
            upper: upper.clone(),
        };
        let fs = &mut self.fw.fs.image;
        fs.mkdir_all(&upper, FW)?;
        let ino = fs.create(&format!("{dir}/config.json"), FW)?;
        fs.write_all(
            ino,
            &serde_json::to_vec_pretty(&runtime).expect("config serializes"),
        )?;
        self.containers.insert(
            id.clone(),
            ContainerRecord {
                id: id.clone(),
                image: runtime.image,
                state: ContainerState::Created,
                overlay: Overlay::new(lowers, &upper),
                entry: runtime.entry,
            },
        );
        self.transitions.push(Transition {
            id: id.clone(),
            command: "create".into(),
            from: None,
            to: ContainerState::Created,
        });
        Ok(id)
    }

    fn record(&self, id: &str) -> Result<&ContainerRecord, DockerError> {
        self.containers
            .get(id)
            .filter(|c| c.state != ContainerState::Removed)
            .ok_or_else(|| DockerError::ContainerNotFound(id.to_string()))
    }

    fn require(
        &self,
        id: &str,
        command: &str,
        allowed: &[ContainerState],
    ) -> Result<ContainerState, DockerError> {
        let state = self.record(id)?.state;
        if allowed.contains(&state) {
            Ok(state)
        } else {
            Err(DockerError::IllegalState {
                id: id.to_string(),
                state,
                command: command.to_string(),
            })
        }
    }

    fn transition(&mut self, id: &str, command: &str, from: ContainerState, to: ContainerState) {
        self.containers.get_mut(id).expect("checked").state = to;
        self.transitions.push(Transition {
            id: id.to_string(),
            command: command.to_string(),
            from: Some(from),
            to,
        });
    }

    fn launch(&mut self, id: &str) -> Result<(), DockerError> {
        let rec = self.record(id)?.clone();
        let view = OverlayView {
            fw: &self.fw,
            overlay: &rec.overlay,
        };
        let resolved = ResolvedEntry(view.has_entry(&rec.entry));
        let tid = self
            .fw
            .spawn_container_thread(&rec.id, &rec.entry, &resolved)?
            .tid;
        let script = rec.overlay.read(&self.fw.fs.image, &rec.entry)?;
        for op in parse_script(&String::from_utf8_lossy(&script)) {
            if let Err(e) = self.exec_op(tid, &rec.overlay, &op) {
                let line = format!("error: {}: {e}\n", op.name());
                let _ = self.append(tid, &rec.overlay, LOG_FILE, line.as_bytes());
            }
        }
        Ok(())
    }

    pub fn start(&mut self, id: &str) -> Result<(), DockerError> {
        let from = self.require(
            id,
            "start",
            &[ContainerState::Created, ContainerState::Stopped],
        )?;
        self.launch(id)?;
        self.transition(id, "start", from, ContainerState::Running);
        Ok(())
    }

    pub fn run(&mut self, reference: &str) -> Result<String, DockerError> {
        let id = self.create(reference)?;
        self.start(&id)?;
        Ok(id)
    }

    /// Delivers a termination signal, lets one quantum elapse, then reaps.
    pub fn stop(&mut self, id: &str) -> Result<(), DockerError> {
        let from = self.require(id, "stop", &[ContainerState::Running])?;
        let q = self.fw.sched.quantum_ns();
        self.fw.sched.run_for(q);
        self.fw.exit_owner(id);
        self.transition(id, "stop", from, ContainerState::Stopped);
        Ok(())
    }

    pub fn kill(&mut self, id: &str) -> Result<(), DockerError> {
        let from = self.require(id, "kill", &[ContainerState::Running])?;
        self.fw.exit_owner(id);
        self.transition(id, "kill", from, ContainerState::Stopped);
        Ok(())
    }

    pub fn restart(&mut self, id: &str) -> Result<(), DockerError> {
        let from = self.require(
            id,
            "restart",
            &[ContainerState::Running, ContainerState::Stopped],
        )?;
        if from == ContainerState::Running {
            let q = self.fw.sched.quantum_ns();
            self.fw.sched.run_for(q);
            self.fw.exit_owner(id);
        }
        if self.config.restart_resets_upper {
            let upper = self.record(id)?.overlay.upper.clone();
            self.fw.fs.image.remove_all(&upper, FW)?;
            self.fw.fs.image.mkdir_all(&upper, FW)?;
            self.fw.cache.invalidate(&upper);
        }
        if let Err(e) = self.launch(id) {
            if from == ContainerState::Running {
                self.transition(id, "restart", from, ContainerState::Stopped);
            }
            return Err(e);
        }
        self.transition(id, "restart", from, ContainerState::Running);
        Ok(())
    }

    pub fn rm(&mut self, id: &str) -> Result<(), DockerError> {
        let from = self.require(
            id,
            "rm",
            &[ContainerState::Created, ContainerState::Stopped],
        )?;
        let dir = container_dir(id);
        self.fw.fs.image.remove_all(&dir, FW)?;
        self.fw.cache.invalidate(&dir);
        self.transition(id, "rm", from, ContainerState::Removed);
        Ok(())
    }

    pub fn logs(&self, id: &str) -> Result<Vec<u8>, DockerError> {
        let rec = self.record(id)?;
        match rec.overlay.read(&self.fw.fs.image, LOG_FILE) {
            Ok(bytes) => Ok(bytes),
            Err(FsError::PathNotFound(_)) => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn ps(&self) -> Vec<ContainerSummary> {
        self.containers
            .values()
            .filter(|c| c.state != ContainerState::Removed)
            .map(|c| ContainerSummary {
                id: c.id.clone(),
                image: c.image.clone(),
                state: c.state,
            })
            .collect()
    }

    /// SHA-256 of every stored layer blob and of its unpacked tree.
    pub fn layer_fingerprints(&self) -> Result<BTreeMap<String, (String, String)>, DockerError> {
        let fs = &self.fw.fs.image;
        let mut out = BTreeMap::new();
        for e in fs.list_path(IMAGES_BLOBS_DIR, FW)? {
            let blob = fs.read_all(e.ino)?;
            let digest = format!("sha256:{}", e.name);
            let dir = layer_dir(&digest);
            let mut tree = Vec::new();
            if fs.exists(&dir, FW) {
                let mut stack = vec![dir.clone()];
                while let Some(d) = stack.pop() {
                    for c in fs.list_path(&d, FW)? {
                        let p = format!("{d}/{}", c.name);
                        if c.is_dir {
                            stack.push(p);
                        } else {
                            tree.extend_from_slice(p.as_bytes());
                            tree.push(0);
                            tree.extend_from_slice(&fs.read_all(c.ino)?);
                        }
                    }
                }
            }
            out.insert(digest, (digest_of(&blob), digest_of(&tree)));
        }
        Ok(out)
    }

    fn syscall(
        &mut self,
        tid: Tid,
        name: &str,
        args: Vec<Arg>,
    ) -> Result<(i64, Option<Vec<u8>>), DockerError> {
        let r = self.fw.emulate(&SyscallInvocation::new(tid, name, args))?;
        if r.ret < 0 {
            return Err(DockerError::Fw(FwError::BadArguments(format!(
                "{name} returned {}",
                r.ret
            ))));
        }
        Ok((r.ret, r.data))
    }

    fn write_through(
        &mut self,
        tid: Tid,
        path: &str,
        offset: u64,
        bytes: &[u8],
    ) -> Result<(), DockerError> {
        let (fd, _) = self.syscall(tid, "openat", vec![Arg::Str(path.to_string()), Arg::Int(1)])?;
        let r = self
            .syscall(tid, "lseek", vec![Arg::Int(fd), Arg::Int(offset as i64)])
            .and_then(|_| {
                self.syscall(tid, "write", vec![Arg::Int(fd), Arg::Bytes(bytes.to_vec())])
            });
        self.syscall(tid, "close", vec![Arg::Int(fd)])?;
        r.map(|_| ())
    }

    fn append(
        &mut self,
        tid: Tid,
        overlay: &Overlay,
        rel: &str,
        bytes: &[u8],
    ) -> Result<(), DockerError> {
        let up = overlay.prepare_write(&mut self.fw.fs.image, rel, true)?;
        let size = self
            .fw
            .fs
            .image
            .inode(self.fw.fs.image.lookup(&up, FW)?)?
            .size;
        self.write_through(tid, &up, size, bytes)
    }

    fn exec_op(&mut self, tid: Tid, overlay: &Overlay, op: &ScriptOp) -> Result<(), DockerError> {
        match op {
            ScriptOp::Echo(text) => {
                self.append(tid, overlay, LOG_FILE, format!("{text}\n").as_bytes())
            }
            ScriptOp::Write { path, data } => {
                let up = overlay.prepare_write(&mut self.fw.fs.image, path, false)?;
                let ino = self.fw.fs.image.lookup(&up, FW)?;
                self.fw.fs.image.truncate(ino, 0)?;
                self.write_through(tid, &up, 0, data.as_bytes())
            }
            ScriptOp::Append { path, data } => self.append(tid, overlay, path, data.as_bytes()),
            ScriptOp::Cat(path) => {
                let concrete = overlay
                    .resolve(&self.fw.fs.image, path)
                    .ok_or_else(|| DockerError::Fs(FsError::PathNotFound(path.clone())))?;
                let size = self
                    .fw
                    .fs
                    .image
                    .inode(self.fw.fs.image.lookup(&concrete, FW)?)?
                    .size;
                let (fd, _) = self.syscall(tid, "openat", vec![Arg::Str(concrete), Arg::Int(0)])?;
                let r = self.syscall(tid, "read", vec![Arg::Int(fd), Arg::Int(size as i64)]);
                self.syscall(tid, "close", vec![Arg::Int(fd)])?;
                let data = r?.1.unwrap_or_default();
                self.append(tid, overlay, LOG_FILE, &data)
            }
            ScriptOp::Rm(path) => {
                overlay.remove(&mut self.fw.fs.image, path)?;
                self.fw
                    .cache
                    .invalidate(&format!("{}{}", overlay.upper, path));
                Ok(())
            }
            ScriptOp::Send { ip, port, data } => {
                let (fd, _) = self.syscall(tid, "socket", vec![])?;
                self.syscall(
                    tid,
                    "connect",
                    vec![
                        Arg::Int(fd),
                        Arg::Str(ip.to_string()),
                        Arg::Int(*port as i64),
                    ],
                )?;
                let sock = self
                    .fw
                    .socket_of(tid, fd as i32)
                    .expect("socket fd just created");
                self.pending_sends.push((sock, data.as_bytes().to_vec()));
                Ok(())
            }
            ScriptOp::Invalid(line) => Err(DockerError::MalformedRequest(format!(
                "script line {line:?}"
            ))),
        }
    }

    /// Sends queued script payloads whose connections have opened.
    pub fn flush_sends(&mut self) -> usize {
        let mut sent = 0;
        let pending = std::mem::take(&mut self.pending_sends);
        for (sock, data) in pending {
            match self.fw.net.send(sock, &data) {
                Ok(_) => sent += 1,
                Err(FwError::NotConnected(_)) if self.fw.net.state(sock).is_some() => {
                    self.pending_sends.push((sock, data))
                }
                Err(_) => {}
            }
        }
        sent
    }

    /// Opens the daemon's listening socket.
    pub fn listen(&mut self) -> Result<(), DockerError> {
        if self.daemon.listener.is_none() {
            let s = self.fw.net.socket();
            self.fw.net.bind(s, self.config.port)?;
            self.fw.net.listen(s)?;
            self.daemon.listener = Some(s);
        }
        Ok(())
    }

    /// Accepts connections, answers every complete request and closes the
    /// connection after the reply. Returns the number of requests served.
    pub fn serve(&mut self) -> Result<usize, DockerError> {
        let Some(listener) = self.daemon.listener else {
            return Ok(0);
        };
        while let Some(c) = self.fw.net.accept(listener)? {
            self.daemon.conns.insert(c, Vec::new());
        }
        let mut served = 0;
        let conns: Vec<SocketId> = self.daemon.conns.keys().copied().collect();
        for c in conns {
            let data = self.fw.net.recv(c).unwrap_or_default();
            let buf = self.daemon.conns.get_mut(&c).expect("tracked");
            buf.extend_from_slice(&data);
            let parsed = HttpRequest::parse(buf);
            let reply = match parsed {
                Ok(Some((req, _))) => Some(self.handle_request(&req)),
                Ok(None) if self.fw.net.peer_closed(c) => Some(error_response(
                    &DockerError::MalformedRequest("truncated request".into()),
                )),
                Ok(None) => None,
                Err(e) => Some(error_response(&e)),
            };
            if let Some(resp) = reply {
                self.fw.net.send(c, &resp.to_bytes())?;
                self.fw.net.close(c)?;
                self.daemon.conns.remove(&c);
                served += 1;
            }
        }
        Ok(served)
    }
}

/// The outcome of an entry lookup made before the firmware is borrowed
/// mutably.
struct ResolvedEntry(bool);

impl RootfsView for ResolvedEntry {
    fn has_entry(&self, _: &str) -> bool {
        self.0
    }
}

fn no_content(_: ()) -> HttpResponse {
    HttpResponse::new(204, Vec::new())
}

fn error_response(e: &DockerError) -> HttpResponse {
    HttpResponse::json(e.status(), &serde_json::json!({ "message": e.to_string() }))
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use super::*;
    use crate::lambda_fs::LambdaFs;
    use crate::nvme::{NamespaceKind, NamespaceSpec, NamespaceTable};
    use crate::virtual_fw::FwConfig;

    fn engine() -> MiniDocker {
        let t = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..4096,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: 4096..8192,
            },
        ])
        .unwrap();
        let fw = VirtualFw::new(
            FwConfig::default(),
            LambdaFs::mkfs(t.all()).unwrap(),
            Ipv4Addr::new(10, 0, 0, 2),
        );
        MiniDocker::new(fw, DockerConfig::default()).unwrap()
    }

    fn image() -> ImageArchive {
        ImageBuilder::new("hello:v1")
            .entry("/app/run.sh")
            .layer([
                ("/etc/motd", "base\n"),
                ("/app/run.sh", "echo start\ncat /etc/motd\n"),
            ])
            .layer([("/etc/motd", "patched\n")])
            .build()
    }

    #[test]
    fn pull_stores_blobs_and_manifest() {
        let mut d = engine();
        d.pull("hello:v1", &image().to_bytes()).unwrap();
        let fs = &d.fw.fs.image;
        assert_eq!(fs.list_path(IMAGES_BLOBS_DIR, FW).unwrap().len(), 2);
        assert_eq!(fs.list_path(IMAGES_MANIFEST_DIR, FW).unwrap().len(), 1);
        assert!(!fs.exists(IMAGES_DIR, PcieFunction::Host));
        let before =
            d.fw.fs
                .image
                .free_blocks(crate::nvme::NamespaceKind::Private);
        d.pull("hello:v1", &image().to_bytes()).unwrap();
        assert_eq!(
            d.fw.fs
                .image
                .free_blocks(crate::nvme::NamespaceKind::Private),
            before
        );
    }

    #[test]
    fn corrupted_pull_persists_nothing() {
        let mut d = engine();
        let mut img = image();
        let digest = img.manifest.layers[1].clone();
        img.blobs.get_mut(&digest).unwrap()[520] ^= 0x40;
        assert!(matches!(
            d.pull("hello:v1", &img.to_bytes()),
            Err(DockerError::DigestMismatch { .. })
        ));
        assert!(d
            .fw
            .fs
            .image
            .list_path(IMAGES_BLOBS_DIR, FW)
            .unwrap()
            .is_empty());
        assert_eq!(d.images().count(), 0);
    }

    #[test]
    fn run_then_logs() {
        let mut d = engine();
        d.pull("hello:v1", &image().to_bytes()).unwrap();
        let id = d.run("hello:v1").unwrap();
        assert_eq!(d.logs(&id).unwrap(), b"start\npatched\n");
        let log =
            d.fw.fs
                .image
                .lookup(&format!("/containers/{id}/rootfs/log"), FW)
                .unwrap();
        assert_eq!(d.fw.fs.image.read_all(log).unwrap(), b"start\npatched\n");
        assert!(d.fw.stats().calls.values().sum::<u64>() > 0);
    }

    #[test]
    fn lifecycle_trace() {
        let mut d = engine();
        d.pull("hello:v1", &image().to_bytes()).unwrap();
        let id = d.create("hello:v1").unwrap();
        d.start(&id).unwrap();
        assert!(matches!(d.rm(&id), Err(DockerError::IllegalState { .. })));
        assert!(matches!(
            d.start(&id),
            Err(DockerError::IllegalState { .. })
        ));
        d.stop(&id).unwrap();
        d.restart(&id).unwrap();
        d.stop(&id).unwrap();
        d.rm(&id).unwrap();
        assert!(d.ps().is_empty());
        assert!(!d.fw.fs.image.exists(&format!("/containers/{id}"), FW));
        for t in d.transitions() {
            assert!(LIFECYCLE_EDGES.contains(&(t.from, t.to)), "{t:?}");
        }
        assert_eq!(d.logs(&id), Err(DockerError::ContainerNotFound(id)));
    }

    #[test]
    fn restart_keeps_upper_by_default() {
        let mut d = engine();
        d.pull("hello:v1", &image().to_bytes()).unwrap();
        let id = d.run("hello:v1").unwrap();
        d.restart(&id).unwrap();
        assert_eq!(d.logs(&id).unwrap(), b"start\npatched\nstart\npatched\n");
        d.config.restart_resets_upper = true;
        d.restart(&id).unwrap();
        assert_eq!(d.logs(&id).unwrap(), b"start\npatched\n");
    }

    #[test]
    fn rmi_rules() {
        let mut d = engine();
        assert!(matches!(
            d.rmi("hello:v1"),
            Err(DockerError::ImageNotFound(_))
        ));
        d.pull("hello:v1", &image().to_bytes()).unwrap();
        let id = d.create("hello:v1").unwrap();
        assert!(matches!(d.rmi("hello:v1"), Err(DockerError::ImageInUse(_))));
        d.rm(&id).unwrap();
        d.rmi("hello:v1").unwrap();
        assert!(d
            .fw
            .fs
            .image
            .list_path(IMAGES_BLOBS_DIR, FW)
            .unwrap()
            .is_empty());
        assert!(d
            .fw
            .fs
            .image
            .list_path(IMAGES_LAYERS_DIR, FW)
            .unwrap()
            .is_empty());
        assert!(matches!(
            d.create("hello:v1"),
            Err(DockerError::ImageNotFound(_))
        ));
    }

    #[test]
    fn missing_entry_script() {
        let mut d = engine();
        let img = ImageBuilder::new("noentry")
            .entry("/run.sh")
            .layer([("/x", "1")])
            .build();
        d.pull("noentry", &img.to_bytes()).unwrap();
        let id = d.create("noentry").unwrap();
        assert_eq!(
            d.start(&id),
            Err(DockerError::NoEntryScript("/run.sh".into()))
        );
        assert_eq!(d.container(&id).unwrap().state, ContainerState::Created);
    }

    #[test]
    fn http_surface() {
        let mut d = engine();
        let pull = Command::Pull {
            image: "hello:v1".into(),
            archive: image().to_bytes(),
        }
        .to_request();
        assert_eq!(d.handle_http(&pull.to_bytes()).status, 200);
        let mut truncated = pull.to_bytes();
        truncated.truncate(truncated.len() - 100);
        assert_eq!(d.handle_http(&truncated).status, 400);
        let r = d.handle_request(
            &Command::Run {
                image: "hello:v1".into(),
            }
            .to_request(),
        );
        assert_eq!(r.status, 201);
        let ps: Vec<ContainerSummary> =
            serde_json::from_slice(&d.handle_request(&cli_request("ps", "")).body).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].state, ContainerState::Running);
        assert_eq!(d.handle_request(&cli_request("build", ".")).status, 501);
        assert_eq!(
            d.handle_request(&cli_request("logs", &ps[0].id)).body,
            b"start\npatched\n"
        );
    }

    #[test]
    fn script_writes_stay_out_of_lowers() {
        let mut d = engine();
        let img = ImageBuilder::new("w")
            .entry("/run.sh")
            .layer([
                ("/data/a", "lower"),
                (
                    "/run.sh",
                    "write /data/a upper\nrm /data/b\nappend /data/c x\ncat /data/a\n",
                ),
            ])
            .layer([("/data/b", "gone")])
            .build();
        d.pull("w", &img.to_bytes()).unwrap();
        let id = d.create("w").unwrap();
        let before = d.layer_fingerprints().unwrap();
        d.start(&id).unwrap();
        let after = d.layer_fingerprints().unwrap();
        assert_eq!(before, after);
        for (digest, (blob, _)) in &after {
            assert_eq!(digest, blob);
        }
        let o = d.container(&id).unwrap().overlay.clone();
        assert_eq!(o.read(&d.fw.fs.image, "/data/a").unwrap(), b"upper");
        assert!(!o.exists(&d.fw.fs.image, "/data/b"));
        assert_eq!(o.list(&d.fw.fs.image, "/data").unwrap(), vec!["a", "c"]);
        assert_eq!(d.logs(&id).unwrap(), b"upper");
    }
}
