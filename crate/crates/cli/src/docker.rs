//! `docker-sim`: command surface, random lifecycle sequences checked against
//! a reference state machine, layer immutability and an end-to-end
//! pull/run/logs over the Ether-oN link.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use dockerssd::device::{DeviceConfig, Testbed};
use dockerssd::lambda_fs::LambdaFs;
use dockerssd::mini_docker::{
    cli_request, Command, ContainerState, DockerConfig, ImageBuilder, MiniDocker, LIFECYCLE_EDGES,
    LOG_FILE,
};
use dockerssd::nvme::{NamespaceKind, NamespaceSpec, NamespaceTable, PcieFunction};
use dockerssd::virtual_fw::{FwConfig, VirtualFw};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::scenario::DockerParams;
use crate::{module, Artifacts, CliError};

pub const IMAGE: &str = "app:1";

/// docker-cli commands and management commands offered to the engine.
pub const DOCKER_COMMANDS: [&str; 59] = [
    "attach",
    "build",
    "commit",
    "cp",
    "create",
    "diff",
    "events",
    "exec",
    "export",
    "history",
    "images",
    "import",
    "info",
    "inspect",
    "kill",
    "load",
    "login",
    "logout",
    "logs",
    "pause",
    "port",
    "ps",
    "pull",
    "push",
    "rename",
    "restart",
    "rm",
    "rmi",
    "run",
    "save",
    "search",
    "start",
    "stats",
    "stop",
    "tag",
    "top",
    "unpause",
    "update",
    "version",
    "wait",
    "builder",
    "checkpoint",
    "config",
    "container",
    "context",
    "image",
    "manifest",
    "network",
    "node",
    "plugin",
    "secret",
    "service",
    "stack",
    "swarm",
    "system",
    "trust",
    "volume",
    "compose",
    "buildx",
];

/// The container script writes over and appends to files that live in the
/// image layers, so every start exercises copy-up.
pub fn image_archive() -> Vec<u8> {
    ImageBuilder::new(IMAGE)
        .entry("/bin/app.sh")
        .layer([("/etc/motd", "base\n"), ("/state", "s")])
        .layer([(
            "/bin/app.sh",
            "echo up\nwrite /etc/motd changed\nappend /state x\ncat /etc/motd\n",
        )])
        .build()
        .to_bytes()
}

/// Log bytes one start of the image produces.
pub const LOG_PER_START: &[u8] = b"up\nchanged";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceRow {
    pub command: String,
    pub status: u16,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceReport {
    pub sequences: usize,
    pub commands: usize,
    pub succeeded: usize,
    pub transitions: usize,
    /// Transitions outside the lifecycle graph or disagreeing with the
    /// reference machine.
    pub illegal_transitions: usize,
    /// Commands whose success or failure disagreed with the reference.
    pub verdict_mismatches: usize,
    pub counts: BTreeMap<String, usize>,
    pub layer_digests_checked: usize,
    pub layer_digests_changed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndToEndReport {
    pub id: String,
    pub log_path: String,
    pub expected: String,
    pub logs_response: String,
    pub log_file: String,
    pub host_frames: u64,
    pub device_frames: u64,
    pub host_private_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DockerReport {
    pub seed: u64,
    pub surface: Vec<SurfaceRow>,
    pub accepted: Vec<String>,
    pub sequences: SequenceReport,
    pub end_to_end: EndToEndReport,
}

impl DockerReport {
    pub fn artifacts(&self) -> Artifacts {
        let mut a = Artifacts::default();
        a.json("docker_report.json", self);
        let mut csv = String::from("command,status,accepted\n");
        for r in &self.surface {
            csv.push_str(&format!("{},{},{}\n", r.command, r.status, r.accepted));
        }
        a.text("command_surface.csv", csv);
        let mut csv = String::from("from,command,to,count\n");
        for (k, n) in &self.sequences.counts {
            csv.push_str(&format!("{k},{n}\n"));
        }
        a.text("transitions.csv", csv);
        a
    }
}

pub fn engine() -> Result<MiniDocker, CliError> {
    let t = NamespaceTable::define(&[
        NamespaceSpec {
            kind: NamespaceKind::Private,
            blocks: 0..65_536,
        },
        NamespaceSpec {
            kind: NamespaceKind::Sharable,
            blocks: 65_536..66_560,
        },
    ])
    .map_err(module("namespaces"))?;
    let fs = LambdaFs::mkfs(t.all()).map_err(module("mkfs"))?;
    let fw = VirtualFw::new(FwConfig::default(), fs, Ipv4Addr::new(10, 0, 0, 2));
    let mut d = MiniDocker::new(fw, DockerConfig::default()).map_err(module("engine"))?;
    d.pull(IMAGE, &image_archive()).map_err(module("pull"))?;
    Ok(d)
}

pub fn run(p: &DockerParams, seed: u64) -> Result<DockerReport, CliError> {
    if p.sequences_per_engine == 0 {
        return Err(CliError::InvalidScenario(
            "sequences_per_engine must be positive".into(),
        ));
    }
    let surface = surface()?;
    let accepted = surface
        .iter()
        .filter(|r| r.accepted)
        .map(|r| r.command.clone())
        .collect();
    let sequences = sequences(p, seed)?;
    let end_to_end = end_to_end()?;
    Ok(DockerReport {
        seed,
        surface,
        accepted,
        sequences,
        end_to_end,
    })
}

fn surface() -> Result<Vec<SurfaceRow>, CliError> {
    let mut d = engine()?;
    Ok(DOCKER_COMMANDS
        .iter()
        .map(|name| {
            let status = d.handle_request(&cli_request(name, "nothing")).status;
            SurfaceRow {
                command: name.to_string(),
                status,
                accepted: status != 501,
            }
        })
        .collect())
}

/// Where a lifecycle command leads from `state`, if it is allowed there.
pub fn reference_step(command: &str, state: Option<ContainerState>) -> Option<ContainerState> {
    use ContainerState::*;
    match (command, state) {
        ("create", None) => Some(Created),
        ("start", Some(Created | Stopped)) => Some(Running),
        ("stop" | "kill", Some(Running)) => Some(Stopped),
        ("restart", Some(Running | Stopped)) => Some(Running),
        ("rm", Some(Created | Stopped)) => Some(Removed),
        _ => None,
    }
}

fn state_name(s: Option<ContainerState>) -> &'static str {
    match s {
        None => "none",
        Some(ContainerState::Created) => "created",
        Some(ContainerState::Running) => "running",
        Some(ContainerState::Stopped) => "stopped",
        Some(ContainerState::Removed) => "removed",
    }
}

fn random_command(rng: &mut ChaCha8Rng, ids: &[String]) -> Command {
    let id = if ids.is_empty() || rng.gen_ratio(1, 10) {
        "0123456789ab".to_string()
    } else {
        ids[rng.gen_range(0..ids.len())].clone()
    };
    match rng.gen_range(0..20) {
        0..=2 => Command::Create {
            image: IMAGE.into(),
        },
        3 => Command::Run {
            image: IMAGE.into(),
        },
        4..=5 => Command::Start { id },
        6..=7 => Command::Stop { id },
        8 => Command::Kill { id },
        9..=10 => Command::Restart { id },
        11..=13 => Command::Rm { id },
        14..=15 => Command::Logs { id },
        16 => Command::Ps,
        17 => Command::Rmi {
            image: IMAGE.into(),
        },
        _ => Command::Pull {
            image: IMAGE.into(),
            archive: image_archive(),
        },
    }
}

fn sequences(p: &DockerParams, seed: u64) -> Result<SequenceReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SequenceReport {
        sequences: p.sequences,
        commands: 0,
        succeeded: 0,
        transitions: 0,
        illegal_transitions: 0,
        verdict_mismatches: 0,
        counts: BTreeMap::new(),
        layer_digests_checked: 0,
        layer_digests_changed: 0,
    };
    let mut baseline: BTreeMap<String, (String, String)> = BTreeMap::new();
    let mut d = engine()?;
    let mut model: BTreeMap<String, ContainerState> = BTreeMap::new();
    for n in 0..p.sequences {
        if n > 0 && n % p.sequences_per_engine == 0 {
            check_layers(&d, &mut baseline, &mut r)?;
            d = engine()?;
            model.clear();
        }
        let mut ids: Vec<String> = Vec::new();
        let len = rng.gen_range(1..=p.max_len.max(1));
        for _ in 0..len {
            let cmd = random_command(&mut rng, &ids);
            let seen = d.transitions().len();
            let resp = d.handle_request(&cmd.to_request());
            r.commands += 1;
            if resp.is_success() {
                r.succeeded += 1;
            }
            if let Some(id) = serde_json::from_slice::<serde_json::Value>(&resp.body)
                .ok()
                .and_then(|v| v.get("Id").and_then(|i| i.as_str()).map(String::from))
            {
                ids.push(id);
            }
            let new = &d.transitions()[seen..];
            for t in new {
                r.transitions += 1;
                let from = model.get(&t.id).copied();
                let legal = t.from == from
                    && LIFECYCLE_EDGES.contains(&(t.from, t.to))
                    && reference_step(&t.command, t.from) == Some(t.to);
                if !legal {
                    r.illegal_transitions += 1;
                }
                model.insert(t.id.clone(), t.to);
                let key = format!(
                    "{},{},{}",
                    state_name(t.from),
                    t.command,
                    state_name(Some(t.to))
                );
                *r.counts.entry(key).or_default() += 1;
            }
            let expected_ok = match &cmd {
                Command::Start { id }
                | Command::Stop { id }
                | Command::Kill { id }
                | Command::Restart { id }
                | Command::Rm { id } => {
                    let live = model
                        .get(id)
                        .copied()
                        .filter(|s| *s != ContainerState::Removed);
                    let before = if new.is_empty() { live } else { new[0].from };
                    Some(reference_step(cmd.name(), before).is_some())
                }
                _ => None,
            };
            if expected_ok.is_some_and(|ok| ok != resp.is_success()) {
                r.verdict_mismatches += 1;
            }
            for (id, s) in &model {
                let engine_state = d
                    .container(id)
                    .map(|c| c.state)
                    .unwrap_or(ContainerState::Removed);
                if engine_state != *s {
                    r.verdict_mismatches += 1;
                }
            }
        }
    }
    check_layers(&d, &mut baseline, &mut r)?;
    Ok(r)
}

/// Compares every stored layer against the first fingerprint seen for its
/// digest, and the blob hash against the digest itself.
fn check_layers(
    d: &MiniDocker,
    baseline: &mut BTreeMap<String, (String, String)>,
    r: &mut SequenceReport,
) -> Result<(), CliError> {
    for (digest, fp) in d.layer_fingerprints().map_err(module("fingerprint"))? {
        r.layer_digests_checked += 1;
        let first = baseline.entry(digest.clone()).or_insert_with(|| fp.clone());
        if *first != fp || fp.0 != digest {
            r.layer_digests_changed += 1;
        }
    }
    Ok(())
}

fn end_to_end() -> Result<EndToEndReport, CliError> {
    let mut tb = Testbed::new(&DeviceConfig::default()).map_err(module("testbed"))?;
    let r = tb
        .docker_cli(&Command::Pull {
            image: IMAGE.into(),
            archive: image_archive(),
        })
        .map_err(module("pull"))?;
    if !r.is_success() {
        return Err(CliError::CheckFailed(format!("pull returned {}", r.status)));
    }
    let r = tb
        .docker_cli(&Command::Run {
            image: IMAGE.into(),
        })
        .map_err(module("run"))?;
    let id = serde_json::from_slice::<serde_json::Value>(&r.body)
        .ok()
        .and_then(|v| v["Id"].as_str().map(String::from))
        .ok_or_else(|| CliError::CheckFailed(format!("run returned {}", r.status)))?;
    let logs = tb
        .docker_cli(&Command::Logs { id: id.clone() })
        .map_err(module("logs"))?;
    let log_path = format!("/containers/{id}/rootfs{LOG_FILE}");
    let fs = &tb.docker.fw.fs.image;
    let log_file = fs
        .lookup(&log_path, PcieFunction::Firmware)
        .and_then(|ino| fs.read_all(ino))
        .map_err(module("read log"))?;
    let stats = tb.stats();
    Ok(EndToEndReport {
        id,
        log_path,
        expected: String::from_utf8_lossy(&expected_log(1)).into_owned(),
        logs_response: String::from_utf8_lossy(&logs.body).into_owned(),
        log_file: String::from_utf8_lossy(&log_file).into_owned(),
        host_frames: stats.host_frames,
        device_frames: stats.device_frames,
        host_private_violations: tb.ctrl.host_private_violations(),
    })
}

/// Log after `starts` runs of the image's script.
pub fn expected_log(starts: usize) -> Vec<u8> {
    LOG_PER_START.repeat(starts)
}
