use proptest::prelude::*;
use sbrk_core::proto::*;

fn bytes(max: usize) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(any::<u8>(), 0..max)
}

fn mmio_data() -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![Just(1usize), Just(2), Just(4), Just(8)].prop_flat_map(|n| proptest::collection::vec(any::<u8>(), n))
}

fn intro() -> impl Strategy<Value = DeviceIntro> {
    let bar = (0u32..40, any::<bool>()).prop_map(|(shift, dummy)| Bar {
        size: if shift == 0 { 0 } else { 1u64 << (shift - 1) },
        kind: if dummy { BarKind::Dummy } else { BarKind::Mmio },
    });
    let off = (any::<u8>(), any::<u64>()).prop_map(|(bar, offset)| BarOffset { bar, offset });
    (
        (any::<u16>(), any::<u16>(), any::<u8>(), any::<u8>(), any::<u8>()),
        proptest::collection::vec(bar, 0..=MAX_BARS),
        (any::<u16>(), any::<u16>(), off.clone(), off),
    )
        .prop_map(|((v, d, c, s, r), bars, (msi, msix, table, pba))| DeviceIntro {
            pci_vendor_id: v,
            pci_device_id: d,
            pci_class: c,
            pci_subclass: s,
            pci_revision: r,
            bars,
            num_msi_vectors: msi,
            num_msix_vectors: msix,
            msix_table: table,
            msix_pba: pba,
        })
}

fn interrupt_kind() -> impl Strategy<Value = InterruptKind> {
    prop_oneof![Just(InterruptKind::Legacy), Just(InterruptKind::Msi), Just(InterruptKind::Msix)]
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        Just(Message::Sync),
        intro().prop_map(|i| Message::Device(DeviceMsg::InitDev(i))),
        (any::<u64>(), any::<u64>(), any::<u32>())
            .prop_map(|(req_id, addr, len)| Message::Device(DeviceMsg::DmaRead { req_id, addr, len })),
        (any::<u64>(), any::<u64>(), bytes(3000))
            .prop_map(|(req_id, addr, data)| Message::Device(DeviceMsg::DmaWrite { req_id, addr, data })),
        (any::<u64>(), proptest::option::of(mmio_data()))
            .prop_map(|(req_id, data)| Message::Device(DeviceMsg::MmioCompl { req_id, data })),
        (interrupt_kind(), any::<u32>()).prop_map(|(kind, vector)| Message::Device(DeviceMsg::Interrupt { kind, vector })),
        (any::<u64>(), proptest::option::of(bytes(3000)))
            .prop_map(|(req_id, data)| Message::Host(HostMsg::DmaCompl { req_id, data })),
        (any::<u64>(), any::<u8>(), any::<u64>(), prop_oneof![Just(1u32), Just(2), Just(4), Just(8)])
            .prop_map(|(req_id, bar, offset, len)| Message::Host(HostMsg::MmioRead { req_id, bar, offset, len })),
        (any::<u64>(), any::<u8>(), any::<u64>(), mmio_data())
            .prop_map(|(req_id, bar, offset, data)| Message::Host(HostMsg::MmioWrite { req_id, bar, offset, data })),
        (any::<bool>(), any::<bool>(), any::<bool>())
            .prop_map(|(legacy, msi, msix)| Message::Host(HostMsg::IntStatus { legacy, msi, msix })),
        proptest::collection::vec(any::<u8>(), MIN_FRAME_LEN..3000).prop_map(|f| Message::Eth(EthMsg::Packet(f))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn slot_round_trip(ts in any::<u64>(), body in message()) {
        let msg = WireMessage::new(SimTime(ts), body);
        let slot = encode(&msg, 4096).unwrap();
        prop_assert_eq!(slot.len(), 4096);
        prop_assert_eq!(&slot[..8], &ts.to_le_bytes());
        prop_assert_eq!(slot[4095] & TYPE_MASK, msg.body.msg_type().code());
        prop_assert_eq!(decode(&slot).unwrap(), msg.clone());
        let mut owned = slot.clone();
        owned[4095] |= OWNER_BIT;
        prop_assert_eq!(decode(&owned).unwrap(), msg);
    }

    #[test]
    fn payload_fits_declared_length(body in message()) {
        let mut payload = Vec::new();
        encode_payload(&body, &mut payload).unwrap();
        let slot = encode(&WireMessage::new(SimTime(1), body), 4096).unwrap();
        let declared = u32::from_le_bytes(slot[8..12].try_into().unwrap()) as usize;
        prop_assert_eq!(declared, payload.len());
        prop_assert_eq!(&slot[HEADER_LEN..HEADER_LEN + declared], &payload[..]);
    }

    #[test]
    fn messages_too_big_for_the_slot_are_refused(slot_size in 16usize..256, body in message()) {
        let mut payload = Vec::new();
        encode_payload(&body, &mut payload).unwrap();
        let r = encode(&WireMessage::new(SimTime(0), body), slot_size);
        if HEADER_LEN + payload.len() < slot_size {
            prop_assert!(r.is_ok());
        } else {
            let is_oversized = matches!(r, Err(CodecError::OversizedMessage { .. }));
            prop_assert!(is_oversized);
        }
    }

    #[test]
    fn decoding_arbitrary_blocks_never_panics(block in bytes(600)) {
        let _ = decode(&block);
    }
}
