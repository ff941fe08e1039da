//! Experiment configuration and topology checks.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::host::HostConfig;
use crate::net::pktgen::PktgenConfig;
use crate::net::switch::SwitchConfig;
use crate::nic::NicConfig;
use crate::proto::ChannelParams;

pub const DEFAULT_WATCHDOG_MS: u64 = 30_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub duration_ns: u64,
    /// Write SYNC records to trace files.
    #[serde(default)]
    pub trace_sync: bool,
    /// Append payload hex dumps to trace records.
    #[serde(default)]
    pub trace_payload: bool,
    /// Wall-clock window without progress before a run is declared stuck.
    #[serde(default = "default_watchdog")]
    pub watchdog_ms: u64,
    #[serde(rename = "component", default)]
    pub components: Vec<ComponentSpec>,
    #[serde(rename = "channel", default)]
    pub channels: Vec<ChannelSpec>,
}

fn default_watchdog() -> u64 {
    DEFAULT_WATCHDOG_MS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub id: String,
    /// Executable to launch instead of this program.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<PathBuf>,
    #[serde(flatten)]
    pub kind: ComponentKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ComponentKind {
    Host(HostConfig),
    Nic(NicConfig),
    Switch(SwitchConfig),
    Pktgen(PktgenConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Iface {
    PcieHost,
    PcieDevice,
    Eth,
}

impl ComponentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ComponentKind::Host(_) => "host",
            ComponentKind::Nic(_) => "nic",
            ComponentKind::Switch(_) => "switch",
            ComponentKind::Pktgen(_) => "pktgen",
        }
    }

    /// Port names and interface kinds, in port-id order.
    pub fn ports(&self) -> Vec<(String, Iface)> {
        match self {
            ComponentKind::Host(_) => vec![("pci".into(), Iface::PcieHost)],
            ComponentKind::Nic(_) => vec![("pci".into(), Iface::PcieDevice), ("eth".into(), Iface::Eth)],
            ComponentKind::Switch(c) => (0..c.ports).map(|i| (format!("p{i}"), Iface::Eth)).collect(),
            ComponentKind::Pktgen(_) => vec![("eth".into(), Iface::Eth)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    /// `component.port`; this side listens.
    pub a: String,
    /// `component.port`; this side connects.
    pub b: String,
    #[serde(default)]
    pub params: ChannelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via_proxy: Option<ProxySpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySpec {
    /// TCP address the `a`-side proxy listens on. A free loopback port is
    /// picked when absent.
    #[serde(default)]
    pub addr: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("duration_ns must be positive")]
    ZeroDuration,
    #[error("invalid component id {0:?}")]
    BadId(String),
    #[error("component id {0} declared twice")]
    DuplicateId(String),
    #[error("component {id}: {reason}")]
    Component { id: String, reason: String },
    #[error("endpoint {0:?} is not of the form component.port")]
    BadEndpoint(String),
    #[error("channel endpoint {0} names an unknown component")]
    UnknownComponent(String),
    #[error("component {component} has no port {port}")]
    UnknownPort { component: String, port: String },
    #[error("port {0} is used by more than one channel")]
    PortReused(String),
    #[error("port {0} is not connected")]
    Unconnected(String),
    #[error("channel {a} <-> {b} joins incompatible interfaces")]
    InterfaceKindMismatch { a: String, b: String },
    #[error("channel {a} <-> {b} closes an Ethernet loop")]
    LoopDetected { a: String, b: String },
    #[error("channel {a} <-> {b}: {reason}")]
    BadParams { a: String, b: String, reason: String },
}

/// All problems found in a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ConfigErrors {
    pub fn contains(&self, pred: impl Fn(&ConfigError) -> bool) -> bool {
        self.0.iter().any(pred)
    }
}

/// A channel end resolved to `(component index, port index)`.
pub type End = (usize, usize);

/// Port wiring derived from a valid configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub channels: Vec<[End; 2]>,
    /// Per component, per port: `(channel index, side)`.
    pub ports: Vec<Vec<(usize, usize)>>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.into(), reason: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn component_index(&self, id: &str) -> Option<usize> {
        self.components.iter().position(|c| c.id == id)
    }

    /// Checks the configuration and resolves its wiring.
    pub fn validate(&self) -> Result<Topology, ConfigErrors> {
        let mut errs = Vec::new();
        if self.duration_ns == 0 {
            errs.push(ConfigError::ZeroDuration);
        }
        let mut index = HashMap::new();
        for (i, c) in self.components.iter().enumerate() {
            let ok_id = !c.id.is_empty()
                && c.id.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-');
            if !ok_id {
                errs.push(ConfigError::BadId(c.id.clone()));
            }
            if index.insert(c.id.as_str(), i).is_some() {
                errs.push(ConfigError::DuplicateId(c.id.clone()));
            }
            if let Some(reason) = check_component(&c.kind) {
                errs.push(ConfigError::Component { id: c.id.clone(), reason });
            }
        }

        let port_lists: Vec<_> = self.components.iter().map(|c| c.kind.ports()).collect();
        let mut ports: Vec<Vec<Option<(usize, usize)>>> = port_lists.iter().map(|p| vec![None; p.len()]).collect();
        let mut channels = Vec::new();
        let mut eth = UnionFind::new(self.components.len());
        for (ci, ch) in self.channels.iter().enumerate() {
            let mut ends = Vec::new();
            for (side, ep) in [&ch.a, &ch.b].into_iter().enumerate() {
                let Some((comp, port)) = ep.split_once('.') else {
                    errs.push(ConfigError::BadEndpoint(ep.clone()));
                    continue;
                };
                let Some(&c) = index.get(comp) else {
                    errs.push(ConfigError::UnknownComponent(ep.clone()));
                    continue;
                };
                let Some(p) = port_lists[c].iter().position(|(n, _)| n == port) else {
                    errs.push(ConfigError::UnknownPort { component: comp.into(), port: port.into() });
                    continue;
                };
                if ports[c][p].is_some() {
                    errs.push(ConfigError::PortReused(ep.clone()));
                    continue;
                }
                ports[c][p] = Some((ci, side));
                ends.push((c, p));
            }
            if let Err(e) = ch.params.validate() {
                errs.push(ConfigError::BadParams { a: ch.a.clone(), b: ch.b.clone(), reason: e.to_string() });
            }
            let [a, b] = ends[..] else { continue };
            let (ka, kb) = (port_lists[a.0][a.1].1, port_lists[b.0][b.1].1);
            let compatible = matches!(
                (ka, kb),
                (Iface::PcieHost, Iface::PcieDevice) | (Iface::PcieDevice, Iface::PcieHost) | (Iface::Eth, Iface::Eth)
            );
            if !compatible {
                errs.push(ConfigError::InterfaceKindMismatch { a: ch.a.clone(), b: ch.b.clone() });
            } else if ka == Iface::Eth && !eth.union(a.0, b.0) {
                errs.push(ConfigError::LoopDetected { a: ch.a.clone(), b: ch.b.clone() });
            }
            channels.push([a, b]);
        }
        for (c, list) in ports.iter().enumerate() {
            for (p, used) in list.iter().enumerate() {
                if used.is_none() {
                    errs.push(ConfigError::Unconnected(format!("{}.{}", self.components[c].id, port_lists[c][p].0)));
                }
            }
        }
        if !errs.is_empty() {
            return Err(ConfigErrors(errs));
        }
        Ok(Topology {
            channels,
            ports: ports.into_iter().map(|l| l.into_iter().map(Option::unwrap).collect()).collect(),
        })
    }
}

fn check_component(kind: &ComponentKind) -> Option<String> {
    match kind {
        ComponentKind::Host(c) => c.validate().err().map(|e| e.to_string()),
        ComponentKind::Nic(_) => None,
        ComponentKind::Switch(c) if c.ports == 0 => Some("a switch needs at least one port".into()),
        ComponentKind::Switch(c) if c.queue_capacity == 0 => Some("queue_capacity must be positive".into()),
        ComponentKind::Switch(_) => None,
        ComponentKind::Pktgen(c) => c.validate().err().map(|e| e.to_string()),
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    /// False if `a` and `b` were already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
        ra != rb
    }
}
