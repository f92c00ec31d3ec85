//! DockerSSD simulator.
//!
//! A deterministic model of a computing-enabled SSD that runs containers in
//! firmware. The crate is layered bottom-up:
//!
//! - [`nvme`]: queue pairs, doorbells, PRP pages, MSI events, namespaces and
//!   the two PCIe-function visibility split.
//! - [`ether_on`]: Ethernet frames carried in vendor-specific NVMe commands,
//!   including the pre-armed upcall pool used for device-to-host traffic.
//! - [`lambda_fs`]: the in-storage filesystem over the private and sharable
//!   namespaces, with the host/container inode-lock protocol.
//! - [`virtual_fw`]: firmware handlers (thread, I/O, network), memory pools,
//!   syscall emulation, path walking with an I/O node cache and a TCP FSM.
//! - [`mini_docker`]: the 11-command container engine.
//! - [`device`]: a host plus one device wired together end to end.
//! - [`latency`]: the calibrated six-component latency breakdown model.
//! - [`llm_pool`]: the analytical distributed LLM inference model.

pub mod defaults;
pub mod device;
pub mod ether_on;
pub mod lambda_fs;
pub mod latency;
pub mod llm_pool;
pub mod mini_docker;
pub mod nvme;
pub mod sim;
pub mod virtual_fw;
