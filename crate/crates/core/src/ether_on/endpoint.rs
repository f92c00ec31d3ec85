use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::Serialize;

use super::{EtherOnError, MacAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointRole {
    Host,
    Dockerssd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Endpoint {
    pub node: u32,
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    pub role: EndpointRole,
}

/// IPv4 network in CIDR form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subnet {
    pub network: Ipv4Addr,
    pub prefix: u8,
}

impl Subnet {
    pub fn new(network: Ipv4Addr, prefix: u8) -> Result<Self, EtherOnError> {
        if !(1..=30).contains(&prefix) {
            return Err(EtherOnError::InvalidSubnet(format!(
                "prefix /{prefix} leaves no usable hosts"
            )));
        }
        let mask = u32::MAX << (32 - prefix);
        if u32::from(network) & !mask != 0 {
            return Err(EtherOnError::InvalidSubnet(format!(
                "{network}/{prefix} has host bits set"
            )));
        }
        Ok(Self { network, prefix })
    }

    /// Addresses excluding the network and broadcast addresses.
    pub fn usable(&self) -> usize {
        (1usize << (32 - self.prefix as usize)) - 2
    }

    fn host(&self, index: u32) -> Ipv4Addr {
        Ipv4Addr::from(u32::from(self.network) + index)
    }
}

impl FromStr for Subnet {
    type Err = EtherOnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EtherOnError::InvalidSubnet(s.to_string());
        let (net, prefix) = s.split_once('/').ok_or_else(bad)?;
        Subnet::new(
            net.parse().map_err(|_| bad())?,
            prefix.parse().map_err(|_| bad())?,
        )
    }
}

/// Host takes the first usable address; device `i` (1-based) takes the
/// next ones in order.
pub fn assign_ips(nodes: usize, subnet: Subnet) -> Result<Vec<Endpoint>, EtherOnError> {
    if nodes == 0 {
        return Err(EtherOnError::InvalidSubnet(
            "pool needs at least one node".into(),
        ));
    }
    let usable = subnet.usable();
    if nodes + 1 > usable {
        return Err(EtherOnError::SubnetExhausted {
            requested: nodes + 1,
            usable,
        });
    }
    Ok((0..=nodes as u32)
        .map(|node| Endpoint {
            node,
            ip: subnet.host(node + 1),
            mac: MacAddr::from_node(node),
            role: if node == 0 {
                EndpointRole::Host
            } else {
                EndpointRole::Dockerssd
            },
        })
        .collect())
}

/// Static IP-to-MAC resolution built once at pool construction.
#[derive(Debug, Clone, Default)]
pub struct ArpTable(BTreeMap<Ipv4Addr, MacAddr>);

impl ArpTable {
    pub fn from_endpoints(endpoints: &[Endpoint]) -> Self {
        ArpTable(endpoints.iter().map(|e| (e.ip, e.mac)).collect())
    }

    pub fn resolve(&self, ip: Ipv4Addr) -> Option<MacAddr> {
        self.0.get(&ip).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn slash24() -> Subnet {
        "10.0.0.0/24".parse().unwrap()
    }

    #[test]
    fn two_nodes() {
        let eps = assign_ips(2, slash24()).unwrap();
        let ips: Vec<String> = eps.iter().map(|e| e.ip.to_string()).collect();
        assert_eq!(ips, ["10.0.0.1", "10.0.0.2", "10.0.0.3"]);
        assert_eq!(eps[0].role, EndpointRole::Host);
    }

    #[test]
    fn many_nodes_unique() {
        let eps = assign_ips(128, slash24()).unwrap();
        let ips: HashSet<_> = eps.iter().map(|e| e.ip).collect();
        let macs: HashSet<_> = eps.iter().map(|e| e.mac).collect();
        assert_eq!(ips.len(), 129);
        assert_eq!(macs.len(), 129);
        assert_eq!(
            ArpTable::from_endpoints(&eps).resolve(eps[77].ip),
            Some(eps[77].mac)
        );
    }

    #[test]
    fn exhaustion() {
        assert_eq!(slash24().usable(), 254);
        assert!(assign_ips(253, slash24()).is_ok());
        assert_eq!(
            assign_ips(300, slash24()),
            Err(EtherOnError::SubnetExhausted {
                requested: 301,
                usable: 254
            })
        );
        assert!(matches!(
            assign_ips(254, slash24()),
            Err(EtherOnError::SubnetExhausted { .. })
        ));
    }

    #[test]
    fn subnet_parsing() {
        assert!("10.0.0.1/24".parse::<Subnet>().is_err());
        assert!("10.0.0.0/31".parse::<Subnet>().is_err());
        assert!("garbage".parse::<Subnet>().is_err());
    }
}
