//! Regenerates the checked-in seed corpora: `cargo run --example make_seeds`.

use std::fs;
use std::path::Path;

use sbrk_core::net::{build_frame, MacAddr};
use sbrk_core::nic::{Descriptor, DESC_DONE, DESC_ERR};
use sbrk_core::proto::*;
use sbrk_core::proxy;
use sbrk_core::shmq::{HandshakeRecord, Hello, PROTOCOL_VERSION};
use sbrk_core::trace::{Direction, TraceOptions, Tracer};

fn seed(target: &str, name: &str, bytes: &[u8]) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus").join(target);
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(format!("seed-{name}")), bytes).unwrap();
}

fn messages() -> Vec<(&'static str, Message)> {
    let a = MacAddr([2, 0, 0, 0, 0, 1]);
    let b = MacAddr([2, 0, 0, 0, 0, 2]);
    let intro = DeviceIntro {
        pci_vendor_id: 0x5342,
        pci_device_id: 1,
        pci_class: 2,
        pci_subclass: 0,
        pci_revision: 0,
        bars: vec![Bar { size: 4096, kind: BarKind::Mmio }],
        num_msi_vectors: 2,
        num_msix_vectors: 0,
        msix_table: BarOffset { bar: 0, offset: 0 },
        msix_pba: BarOffset { bar: 0, offset: 0 },
    };
    vec![
        ("sync", Message::Sync),
        ("init_dev", Message::Device(DeviceMsg::InitDev(intro))),
        ("dma_read", Message::Device(DeviceMsg::DmaRead { req_id: 1, addr: 0x1000, len: 16 })),
        ("dma_write", Message::Device(DeviceMsg::DmaWrite { req_id: 2, addr: 0x2000, data: vec![7; 64] })),
        ("mmio_compl", Message::Device(DeviceMsg::MmioCompl { req_id: 3, data: Some(vec![1, 0, 0, 0, 0, 0, 0, 0]) })),
        ("interrupt", Message::Device(DeviceMsg::Interrupt { kind: InterruptKind::Msi, vector: 1 })),
        ("dma_compl", Message::Host(HostMsg::DmaCompl { req_id: 1, data: Some(vec![0; 16]) })),
        ("mmio_read", Message::Host(HostMsg::MmioRead { req_id: 4, bar: 0, offset: 0x38, len: 8 })),
        ("mmio_write", Message::Host(HostMsg::MmioWrite { req_id: 5, bar: 0, offset: 0x18, data: vec![1, 0, 0, 0, 0, 0, 0, 0] })),
        ("int_status", Message::Host(HostMsg::IntStatus { legacy: false, msi: true, msix: false })),
        ("packet", Message::Eth(EthMsg::Packet(build_frame(b, a, 0x88b6, &[0, 1], 64)))),
    ]
}

fn main() {
    let params = ChannelParams::default();
    let mut trace = Tracer::memory("n0", TraceOptions { include_sync: true, dump_payload: true });
    for (i, (name, body)) in messages().into_iter().enumerate() {
        let msg = WireMessage::new(SimTime(500 * i as u64), body);
        let slot = encode(&msg, 256).unwrap();
        seed("slot_decode", name, &slot);
        let ty = msg.body.msg_type();
        let plen = u32::from_le_bytes(slot[8..12].try_into().unwrap()) as usize;
        let mut entry = slot[..HEADER_LEN + plen].to_vec();
        entry.push(ty.code());
        let mut frame = Vec::new();
        proxy::encode_frame([entry.as_slice(), entry.as_slice()], &mut frame);
        seed("proxy_frame", name, &frame);
        let dir = if i % 2 == 0 { Direction::Tx } else { Direction::Rx };
        trace.record(msg.timestamp, "pci", dir, ty.name(), &slot[HEADER_LEN..HEADER_LEN + plen]).unwrap();
    }
    seed("proxy_frame", "params", &proxy::encode_params(&params));
    seed("proxy_frame", "end", &[0; proxy::FRAME_HEADER_LEN]);
    seed("trace_line", "trace", trace.text().as_bytes());

    seed("handshake", "hello", &Hello { version: PROTOCOL_VERSION }.encode());
    let rec = HandshakeRecord::new(params, "/dev/shm/sbrk-n0-eth".into());
    seed("handshake", "record", &rec.encode().unwrap());

    for (name, d) in [
        ("posted", Descriptor { addr: 0x10000, len: 2048, flags: 0 }),
        ("done", Descriptor { addr: 0x10800, len: 64, flags: DESC_DONE }),
        ("err", Descriptor { addr: 0x11000, len: 2048, flags: DESC_DONE | DESC_ERR }),
    ] {
        seed("descriptor", name, &d.encode());
    }

    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../configs");
    for entry in fs::read_dir(configs).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        seed("config_parse", &name, &fs::read(&path).unwrap());
    }
}
