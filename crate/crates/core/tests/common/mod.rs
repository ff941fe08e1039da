#![allow(dead_code)]

use std::path::Path;

use sbrk_core::host::{HostConfig, Workload};
use sbrk_core::net::{MacAddr, SwitchConfig};
use sbrk_core::nic::NicConfig;
use sbrk_core::orchestrate::{ChannelSpec, ComponentKind, ComponentSpec, ExperimentConfig, RunDir};
use sbrk_core::proto::ChannelParams;

pub const MAC0: MacAddr = MacAddr([2, 0, 0, 0, 0, 1]);
pub const MAC1: MacAddr = MacAddr([2, 0, 0, 0, 0, 2]);

/// Every delay on the host - NIC - switch - NIC - host path.
#[derive(Clone, Copy, Debug)]
pub struct Delays {
    pub pcie: u64,
    pub eth: u64,
    pub mmio_issue: u64,
    pub nic_mmio: u64,
    pub tx_pipe: u64,
    pub rx_pipe: u64,
    pub switch: u64,
    pub irq_entry: u64,
    pub per_packet: u64,
}

impl Default for Delays {
    fn default() -> Self {
        Delays {
            pcie: 500,
            eth: 500,
            mmio_issue: 0,
            nic_mmio: 0,
            tx_pipe: 200,
            rx_pipe: 200,
            switch: 0,
            irq_entry: 0,
            per_packet: 0,
        }
    }
}

/// Closed-form round trip of one ping on an otherwise idle path.
pub fn rtt_oracle(d: &Delays) -> u64 {
    let one_way = d.mmio_issue + d.nic_mmio + d.tx_pipe + d.rx_pipe + d.switch + d.irq_entry + 8 * d.pcie + 2 * d.eth;
    2 * one_way + d.per_packet
}

pub fn link(latency: u64) -> ChannelParams {
    ChannelParams { link_latency_ns: latency, sync_interval_ns: latency, ..Default::default() }
}

fn comp(id: &str, kind: ComponentKind) -> ComponentSpec {
    ComponentSpec { id: id.into(), binary: None, kind }
}

fn chan(a: &str, b: &str, params: ChannelParams) -> ChannelSpec {
    ChannelSpec { a: a.into(), b: b.into(), params, via_proxy: None }
}

/// h0 - n0 - sw - n1 - h1 with the given workloads.
pub fn two_hosts(name: &str, duration_ns: u64, d: &Delays, w0: Workload, w1: Workload) -> ExperimentConfig {
    let host = |workload| {
        ComponentKind::Host(HostConfig {
            mmio_issue_delay_ns: d.mmio_issue,
            interrupt_entry_delay_ns: d.irq_entry,
            per_packet_processing_ns: d.per_packet,
            workload,
            ..Default::default()
        })
    };
    let nic = |mac| {
        ComponentKind::Nic(NicConfig { mac, tx_pipeline_ns: d.tx_pipe, rx_pipeline_ns: d.rx_pipe, mmio_delay_ns: d.nic_mmio })
    };
    ExperimentConfig {
        name: name.into(),
        duration_ns,
        trace_sync: false,
        trace_payload: false,
        watchdog_ms: 30_000,
        components: vec![
            comp("h0", host(w0)),
            comp("n0", nic(MAC0)),
            comp("sw", ComponentKind::Switch(SwitchConfig { forward_delay_ns: d.switch, ..Default::default() })),
            comp("n1", nic(MAC1)),
            comp("h1", host(w1)),
        ],
        channels: vec![
            chan("h0.pci", "n0.pci", link(d.pcie)),
            chan("n0.eth", "sw.p0", link(d.eth)),
            chan("sw.p1", "n1.eth", link(d.eth)),
            chan("h1.pci", "n1.pci", link(d.pcie)),
        ],
    }
}

/// Values of every `key=value` token in a component's result file.
pub fn values(dir: &Path, id: &str, key: &str) -> Vec<u64> {
    let prefix = format!("{key}=");
    RunDir::new(dir)
        .read_result(id)
        .unwrap()
        .iter()
        .flat_map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter_map(|t| t.strip_prefix(&prefix).map(|v| v.parse().unwrap()))
        .collect()
}

pub fn value(dir: &Path, id: &str, key: &str) -> u64 {
    match values(dir, id, key)[..] {
        [v] => v,
        ref vs => panic!("{id}: expected one {key}, found {vs:?}"),
    }
}
