use minos_core::protocol::{
    self, decode, encode, encode_message, fragment, packet_cost, reassemble, Frame, MessageHeader, Opcode,
    ProtocolError, ReassemblyError, HEADER_LEN, MAX_DATAGRAM,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn opcode() -> impl Strategy<Value = Opcode> {
    prop_oneof![
        Just(Opcode::Get),
        Just(Opcode::Put),
        Just(Opcode::GetReply),
        Just(Opcode::PutReply),
        Just(Opcode::Error)
    ]
}

prop_compose! {
    fn header()(
        opcode in opcode(),
        request_id in any::<u64>(),
        client_timestamp in any::<u64>(),
        keyhash in any::<u64>(),
        value_len_total in any::<u32>(),
        (frag_count, frag_index) in (1u16..=u16::MAX).prop_flat_map(|c| (Just(c), 0..c)),
    ) -> MessageHeader {
        MessageHeader { opcode, request_id, client_timestamp, keyhash, key_len: 0, value_len_total, frag_index, frag_count }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]

    #[test]
    fn single_frame_round_trip(h in header(), key in prop::collection::vec(any::<u8>(), 0..64), extra in 0usize..256) {
        let payload = vec![0xA5u8; extra];
        let bytes = encode(&h, &key, &payload).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + key.len() + payload.len());
        let f = decode(&bytes).unwrap();
        prop_assert_eq!(f.header, MessageHeader { key_len: key.len() as u16, ..h });
        prop_assert_eq!(f.key, key);
        prop_assert_eq!(f.payload, payload);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn truncated_datagrams_are_rejected(h in header(), cut in 0usize..HEADER_LEN) {
        let bytes = encode(&h, b"k", b"").unwrap();
        prop_assert!(decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn fragment_count_is_ceiling(size in 1usize..2_000_000, mtu in 64usize..9000) {
        let value = vec![0u8; size];
        let parts = fragment(&value, mtu);
        prop_assert_eq!(parts.len(), size.div_ceil(mtu));
        prop_assert_eq!(parts.len() as u64, packet_cost(Opcode::Get, size, mtu));
        prop_assert!(parts.iter().all(|p| p.len() <= mtu));
        prop_assert_eq!(parts.concat(), value);
    }

    #[test]
    fn shuffled_duplicated_fragments_reassemble(size in 0usize..200_000, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let value: Vec<u8> = (0..size).map(|_| rng.random()).collect();
        let h = MessageHeader::request(Opcode::GetReply, 9, 1, 2);
        let datagrams = encode_message(&h, b"some-key", &value, MAX_DATAGRAM).unwrap();
        prop_assert!(datagrams.iter().all(|d| d.len() <= MAX_DATAGRAM));
        let mut frames: Vec<Frame> = datagrams.iter().map(|d| decode(d).unwrap()).collect();
        let dups: Vec<Frame> = frames.iter().filter(|_| rng.random_bool(0.3)).cloned().collect();
        frames.extend(dups);
        frames.shuffle(&mut rng);
        prop_assert_eq!(reassemble(frames).unwrap(), value);
    }
}

#[test]
fn large_value_fragment_count() {
    assert_eq!(fragment(&vec![7u8; 512_000], 1472).len(), 348);
    assert_eq!(packet_cost(Opcode::Get, 512_000, 1472), 348);
    assert_eq!(packet_cost(Opcode::Get, 1, 1472), 1);
    assert_eq!(packet_cost(Opcode::Put, 1472, 1472), 1);
    assert_eq!(packet_cost(Opcode::Put, 1473, 1472), 2);
}

#[test]
fn one_megabyte_round_trip() {
    let value: Vec<u8> = (0..1u32 << 20).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
    let h = MessageHeader::request(Opcode::Put, 1, 2, 3);
    let d = encode_message(&h, b"k", &value, MAX_DATAGRAM).unwrap();
    let mut frames: Vec<Frame> = d.iter().map(|x| decode(x).unwrap()).collect();
    frames.reverse();
    assert_eq!(reassemble(frames).unwrap(), value);
}

#[test]
fn missing_or_inconsistent_fragments() {
    let h = MessageHeader::request(Opcode::GetReply, 1, 0, 0);
    let d = encode_message(&h, b"k", &[1u8; 5000], MAX_DATAGRAM).unwrap();
    let frames: Vec<Frame> = d.iter().map(|x| decode(x).unwrap()).collect();
    assert!(matches!(reassemble(frames[1..].to_vec()), Err(ReassemblyError::Incomplete { .. })));
    let mut bad = frames.clone();
    bad[1].header.value_len_total += 1;
    assert_eq!(reassemble(bad), Err(ReassemblyError::Inconsistent));
}

#[test]
fn header_validation() {
    let h = MessageHeader::request(Opcode::Get, 1, 0, 0);
    let mut b = encode(&h, b"key", b"").unwrap();
    b[0] ^= 1;
    assert!(matches!(decode(&b), Err(ProtocolError::BadMagic(_))));
    let mut b = encode(&h, b"key", b"").unwrap();
    b[3] = 99;
    assert_eq!(decode(&b), Err(ProtocolError::BadOpcode(99)));
    let bad_frag = MessageHeader { frag_index: 2, frag_count: 2, ..h };
    let b = encode(&bad_frag, b"key", b"").unwrap();
    assert!(matches!(decode(&b), Err(ProtocolError::BadFragment { .. })));
    assert!(matches!(encode(&h, b"k", &[0; MAX_DATAGRAM]), Err(ProtocolError::Oversize { .. })));
}

#[test]
fn ports_map_to_queues() {
    for q in 0..16 {
        assert_eq!(protocol::rx_queue_of_port(9100, protocol::rx_port(9100, q)), Some(q));
    }
    assert_eq!(protocol::rx_queue_of_port(9100, 9000), None);
}
