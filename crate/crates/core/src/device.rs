//! One host and one DockerSSD joined by Ether-oN.
//!
//! Host IPv4 packets ride in transmit commands; device packets and λFS
//! sync messages come back as upcalls. The device answers docker-cli HTTP
//! requests on port 2375.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ether_on::{
    assign_ips, DeviceNic, Endpoint, EtherOnConfig, EtherOnDriver, EtherOnError, EthernetFrame,
    Subnet, ETHERTYPE_IPV4, ETHERTYPE_SYNC,
};
use crate::lambda_fs::{FsError, LambdaFs, SyncKind, SyncMessage};
use crate::mini_docker::{Command, DockerConfig, DockerError, HttpResponse, MiniDocker};
use crate::nvme::{
    Controller, NamespaceKind, NamespaceSpec, NamespaceTable, NvmeError, NvmeTiming,
};
use crate::virtual_fw::net::NetStack;
use crate::virtual_fw::{FwConfig, FwError, TcpState, VirtualFw};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Nvme(#[from] NvmeError),
    #[error(transparent)]
    EtherOn(#[from] EtherOnError),
    #[error(transparent)]
    Fs(#[from] FsError),
    #[error(transparent)]
    Fw(#[from] FwError),
    #[error(transparent)]
    Docker(#[from] DockerError),
    #[error("invalid device configuration: {0}")]
    Config(String),
    #[error("no progress after {0} steps")]
    Stalled(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub private_blocks: u64,
    pub sharable_blocks: u64,
    pub subnet: String,
    pub ether_on: EtherOnConfig,
    pub firmware: FwConfig,
    pub docker: DockerConfig,
    /// Upper bound on loop iterations per host request.
    pub max_steps: usize,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            private_blocks: 65_536,
            sharable_blocks: 65_536,
            subnet: "10.0.0.0/24".into(),
            ether_on: EtherOnConfig::default(),
            firmware: FwConfig::default(),
            docker: DockerConfig::default(),
            max_steps: 100_000,
        }
    }
}

/// Counters for one testbed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub host_frames: u64,
    pub device_frames: u64,
    pub sync_messages: u64,
    pub steps: u64,
}

#[derive(Debug)]
pub struct Testbed {
    pub ctrl: Controller,
    pub driver: EtherOnDriver,
    pub nic: DeviceNic,
    pub host_net: NetStack,
    pub docker: MiniDocker,
    pub host: Endpoint,
    pub device: Endpoint,
    host_tx: VecDeque<EthernetFrame>,
    max_steps: usize,
    stats: LinkStats,
}

impl Testbed {
    pub fn new(config: &DeviceConfig) -> Result<Self, DeviceError> {
        if config.private_blocks == 0 || config.sharable_blocks == 0 {
            return Err(DeviceError::Config(
                "both namespaces need at least one block".into(),
            ));
        }
        let table = NamespaceTable::define(&[
            NamespaceSpec {
                kind: NamespaceKind::Private,
                blocks: 0..config.private_blocks,
            },
            NamespaceSpec {
                kind: NamespaceKind::Sharable,
                blocks: config.private_blocks..config.private_blocks + config.sharable_blocks,
            },
        ])?;
        let subnet: Subnet = config.subnet.parse()?;
        let eps = assign_ips(1, subnet)?;
        let fs = LambdaFs::mkfs(table.all())?;
        let mut ctrl = Controller::new(table, NvmeTiming::default());
        let mut driver = EtherOnDriver::attach(&mut ctrl, config.ether_on, None);
        driver.arm_upcalls(&mut ctrl, config.ether_on.upcall_slots)?;
        let nic = DeviceNic::new(driver.queue(), &config.ether_on);
        let fw = VirtualFw::new(config.firmware.clone(), fs, eps[1].ip);
        let mut docker = MiniDocker::new(fw, config.docker.clone())?;
        docker.listen()?;
        Ok(Self {
            ctrl,
            driver,
            nic,
            host_net: NetStack::new(eps[0].ip),
            docker,
            host: eps[0],
            device: eps[1],
            host_tx: VecDeque::new(),
            max_steps: config.max_steps,
            stats: LinkStats::default(),
        })
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    /// One pass over both directions. Returns whether anything moved.
    pub fn step(&mut self) -> Result<bool, DeviceError> {
        self.stats.steps += 1;
        let mut progress = false;
        for (_, packet) in self.host_net.take_outbox() {
            self.host_tx.push_back(EthernetFrame::new(
                self.device.mac,
                self.host.mac,
                ETHERTYPE_IPV4,
                packet,
            ));
        }
        while let Some(f) = self.host_tx.front() {
            match self.driver.transmit(&mut self.ctrl, f) {
                Ok(_) => {
                    self.host_tx.pop_front();
                    self.stats.host_frames += 1;
                    progress = true;
                }
                Err(EtherOnError::Nvme(NvmeError::QueueFull(_))) => break,
                Err(e) => return Err(e.into()),
            }
        }

        for f in self.nic.poll(&mut self.ctrl)? {
            progress = true;
            match f.ethertype {
                ETHERTYPE_IPV4 => {
                    self.docker.fw.net.ingest(&f.payload)?;
                }
                ETHERTYPE_SYNC => {
                    if let Some(m) = SyncMessage::from_frame(&f).filter(|m| m.kind == SyncKind::Ack)
                    {
                        self.docker.fw.fs.acknowledge(m.seq)?;
                    }
                }
                _ => {}
            }
        }

        if self.docker.serve()? > 0 {
            progress = true;
        }
        self.docker.flush_sends();
        let mut out: Vec<EthernetFrame> = self
            .docker
            .fw
            .net
            .take_outbox()
            .into_iter()
            .map(|(_, p)| EthernetFrame::new(self.host.mac, self.device.mac, ETHERTYPE_IPV4, p))
            .collect();
        for m in self.docker.fw.fs.take_outbox() {
            self.stats.sync_messages += 1;
            out.push(m.to_frame(self.host.mac, self.device.mac));
        }
        for f in out {
            self.nic.deliver_upcall(&mut self.ctrl, f)?;
            self.stats.device_frames += 1;
            progress = true;
        }

        let serviced = self.driver.service(&mut self.ctrl)?;
        for f in serviced.frames {
            progress = true;
            match f.ethertype {
                ETHERTYPE_IPV4 => {
                    self.host_net.ingest(&f.payload)?;
                }
                ETHERTYPE_SYNC => {
                    if let Some(m) =
                        SyncMessage::from_frame(&f).filter(|m| m.kind == SyncKind::Bind)
                    {
                        self.host_tx
                            .push_back(m.ack().to_frame(self.device.mac, self.host.mac));
                    }
                }
                _ => {}
            }
        }
        Ok(progress || !self.host_tx.is_empty() || self.nic.pending() > 0)
    }

    /// Steps until nothing moves.
    pub fn run_until_idle(&mut self) -> Result<usize, DeviceError> {
        for n in 0..self.max_steps {
            if !self.step()? {
                return Ok(n);
            }
        }
        Err(DeviceError::Stalled(self.max_steps))
    }

    fn run_until(&mut self, mut done: impl FnMut(&mut Self) -> bool) -> Result<(), DeviceError> {
        for _ in 0..self.max_steps {
            if done(self) {
                return Ok(());
            }
            self.step()?;
        }
        if done(self) {
            Ok(())
        } else {
            Err(DeviceError::Stalled(self.max_steps))
        }
    }

    /// Sends raw request bytes to the daemon over a fresh connection and
    /// waits for the full response.
    pub fn http(&mut self, request: &[u8]) -> Result<HttpResponse, DeviceError> {
        let s = self.host_net.socket();
        self.host_net
            .connect(s, self.device.ip, self.docker.config.port)?;
        self.run_until(|tb| tb.host_net.state(s) != Some(TcpState::SynSent))?;
        if self.host_net.state(s) != Some(TcpState::Established) {
            return Err(FwError::NotConnected(s).into());
        }
        self.host_net.send(s, request)?;
        let mut buf = Vec::new();
        let mut response = None;
        self.run_until(|tb| {
            buf.extend(tb.host_net.recv(s).unwrap_or_default());
            if response.is_none() {
                response = HttpResponse::parse(&buf).ok().flatten().map(|(r, _)| r);
            }
            response.is_some() || tb.host_net.peer_closed(s)
        })?;
        self.host_net.close(s)?;
        self.run_until_idle()?;
        response.ok_or_else(|| {
            DockerError::MalformedRequest("connection closed without a response".into()).into()
        })
    }

    /// docker-cli: one command, one connection.
    pub fn docker_cli(&mut self, cmd: &Command) -> Result<HttpResponse, DeviceError> {
        self.http(&cmd.to_request().to_bytes())
    }

    /// Shares a sharable path with containers and completes the sync
    /// round trip with the host.
    pub fn bind(&mut self, path: &str) -> Result<(), DeviceError> {
        self.docker.fw.fs.bind(path)?;
        self.run_until_idle()?;
        Ok(())
    }

    pub fn device_ip(&self) -> Ipv4Addr {
        self.device.ip
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lambda_fs::Side;
    use crate::mini_docker::{ContainerSummary, ImageBuilder};
    use crate::nvme::PcieFunction;

    fn image() -> Vec<u8> {
        ImageBuilder::new("web:1")
            .entry("/srv/start.sh")
            .layer([("/srv/start.sh", "echo listening\nwrite /srv/pid 1\n")])
            .build()
            .to_bytes()
    }

    #[test]
    fn pull_run_logs_over_ether_on() {
        let mut tb = Testbed::new(&DeviceConfig::default()).unwrap();
        let r = tb
            .docker_cli(&Command::Pull {
                image: "web:1".into(),
                archive: image(),
            })
            .unwrap();
        assert_eq!(r.status, 200, "{}", String::from_utf8_lossy(&r.body));
        let r = tb
            .docker_cli(&Command::Run {
                image: "web:1".into(),
            })
            .unwrap();
        assert_eq!(r.status, 201);
        let id = serde_json::from_slice::<serde_json::Value>(&r.body).unwrap()["Id"]
            .as_str()
            .unwrap()
            .to_string();
        let logs = tb.docker_cli(&Command::Logs { id: id.clone() }).unwrap();
        assert_eq!(logs.body, b"listening\n");
        let ps: Vec<ContainerSummary> =
            serde_json::from_slice(&tb.docker_cli(&Command::Ps).unwrap().body).unwrap();
        assert_eq!(ps.len(), 1);
        assert!(tb.stats().host_frames > 20);
        assert_eq!(tb.ctrl.host_private_violations(), 0);
        assert_eq!(tb.driver.armed(&tb.ctrl), 4);
    }

    #[test]
    fn malformed_request_gets_400() {
        let mut tb = Testbed::new(&DeviceConfig::default()).unwrap();
        let r = tb
            .http(b"GET\x01 /containers/json HTTP/1.1\r\n\r\n")
            .unwrap();
        assert_eq!(r.status, 400);
        let r = tb
            .http(b"GET /containers/json/top HTTP/1.1\r\nContent-Length: 0\r\n\r\n")
            .unwrap();
        assert_eq!(r.status, 501);
    }

    #[test]
    fn bind_round_trip_unfences_container() {
        let mut tb = Testbed::new(&DeviceConfig::default()).unwrap();
        tb.docker
            .fw
            .fs
            .image
            .create_all("/shared/data.csv", PcieFunction::Host)
            .unwrap();
        tb.bind("/shared/data.csv").unwrap();
        assert_eq!(tb.stats().sync_messages, 1);
        let out = tb
            .docker
            .fw
            .fs
            .open(Side::Container, "/shared/data.csv")
            .unwrap();
        assert!(matches!(out, crate::lambda_fs::OpenOutcome::Granted(_)));
    }
}
