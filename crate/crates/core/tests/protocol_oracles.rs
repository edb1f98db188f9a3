mod common;

use proptest::prelude::*;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use splitprune_core::protocol::{pack, read_trace, unpack_zero_fill, Frame, HEADER_LEN, MAX_ROUND};
use splitprune_core::{
    ByteLedger, Direction, Envelope, MessageKind, SimulatedLink, Tensor, WireMessage,
};

fn random_message(rng: &mut ChaCha8Rng) -> (Tensor<f32>, Vec<usize>, WireMessage) {
    let (b, n, h, w) = (
        rng.random_range(1..=4),
        rng.random_range(1..=20),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    );
    let t = Tensor::from_fn(&[b, n, h, w], |_| rng.random_range(-1e3f32..1e3));
    let k = rng.random_range(1..=n);
    let mut kept = index::sample(rng, n, k).into_vec();
    kept.sort_unstable();
    let kind = if rng.random_bool(0.5) {
        MessageKind::Smashed
    } else {
        MessageKind::Gradient
    };
    let env = Envelope {
        round: rng.random_range(0..=MAX_ROUND),
        client_id: rng.random(),
        iteration: rng.random(),
    };
    let msg = pack(&t, &kept, kind, env).unwrap();
    (t, kept, msg)
}

#[test]
fn layout_arithmetic() {
    let t = Tensor::from_fn(&[1, 4, 2, 2], |i| i as f32);
    let msg = pack(&t, &[2], MessageKind::Smashed, Envelope::default()).unwrap();
    assert_eq!(msg.payload_len(), 16);
    assert_eq!(msg.to_bytes().len(), 38);

    let full = pack(&t, &[0, 1, 2, 3], MessageKind::Smashed, Envelope::default()).unwrap();
    assert_eq!(full.to_bytes().len(), HEADER_LEN + 2 * 4 + 4 * 16);
    assert_eq!(unpack_zero_fill(&full).unwrap(), t);

    let one = pack(
        &Tensor::from_fn(&[1, 1, 1, 1], |_| 7.0),
        &[0],
        MessageKind::Gradient,
        Envelope::default(),
    )
    .unwrap();
    assert_eq!(one.to_bytes().len(), 26);

    let z = unpack_zero_fill(&msg).unwrap();
    for c in [0, 1, 3] {
        assert!(z.data()[c * 4..c * 4 + 4].iter().all(|&v| v == 0.0));
    }
    assert_eq!(&z.data()[8..12], &t.data()[8..12]);
}

#[test]
fn pack_rejects_bad_indices() {
    let t = Tensor::<f32>::zeros(&[1, 4, 2, 2]);
    assert!(pack(&t, &[4], MessageKind::Smashed, Envelope::default()).is_err());
    assert!(pack(&t, &[], MessageKind::Smashed, Envelope::default()).is_err());
    assert!(pack(&t, &[2, 1], MessageKind::Smashed, Envelope::default()).is_err());
}

#[test]
fn thousand_random_round_trips() {
    let mut rng = common::rng(8);
    for _ in 0..1000 {
        let (t, kept, msg) = random_message(&mut rng);
        let bytes = msg.to_bytes();
        assert_eq!(bytes.len(), msg.encoded_len());
        let [b, _, h, w] = [t.dim(0), t.dim(1), t.dim(2), t.dim(3)];
        assert_eq!(msg.payload_len(), 4 * b * kept.len() * h * w);
        let back = WireMessage::from_bytes(&bytes).unwrap();
        assert_eq!(back, msg);
        assert_eq!(back.to_bytes(), bytes);
        let z = back.reconstruct().unwrap();
        let hw = h * w;
        for s in 0..b {
            for c in 0..t.dim(1) {
                let got = &z.data()[(s * t.dim(1) + c) * hw..][..hw];
                let orig = &t.data()[(s * t.dim(1) + c) * hw..][..hw];
                if kept.contains(&c) {
                    assert!(got
                        .iter()
                        .zip(orig)
                        .all(|(a, b)| a.to_bits() == b.to_bits()));
                } else {
                    assert!(got.iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}

#[test]
fn header_byte_flips_never_go_unnoticed() {
    let mut rng = common::rng(9);
    for _ in 0..50 {
        let (_, _, msg) = random_message(&mut rng);
        let bytes = msg.to_bytes();
        for pos in 0..HEADER_LEN {
            for bit in 0..8 {
                let mut bad = bytes.clone();
                bad[pos] ^= 1 << bit;
                if let Ok(m) = WireMessage::from_bytes(&bad) {
                    assert_ne!(m, msg, "flip at byte {pos} bit {bit} went unnoticed");
                }
            }
        }
    }
}

#[test]
fn truncation_is_rejected() {
    let mut rng = common::rng(10);
    let (_, _, msg) = random_message(&mut rng);
    let bytes = msg.to_bytes();
    for cut in [0, 5, HEADER_LEN, bytes.len() - 1] {
        assert!(WireMessage::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn ledger_totals_equal_summed_lengths() {
    let mut rng = common::rng(11);
    let mut link = SimulatedLink::with_trace();
    let mut manual = ByteLedger::default();
    let (mut up, mut down) = (0u64, 0u64);
    for _ in 0..300 {
        let (_, _, msg) = random_message(&mut rng);
        let dir = msg.kind.direction();
        let received = link.transmit(dir, &msg).unwrap();
        assert_eq!(received, msg);
        manual.record_message(&msg);
        match dir {
            Direction::Uplink => up += msg.to_bytes().len() as u64,
            Direction::Downlink => down += msg.to_bytes().len() as u64,
        }
    }
    assert_eq!(link.ledger().uplink_bytes, up);
    assert_eq!(link.ledger().downlink_bytes, down);
    assert_eq!(*link.ledger(), manual);
    let frames = read_trace(link.trace().unwrap()).unwrap();
    assert_eq!(frames.len(), 300);
    assert_eq!(
        frames.iter().map(|f| f.len() as u64).sum::<u64>(),
        up + down
    );
}

#[test]
fn small_ledger_cases() {
    let t = Tensor::<f32>::zeros(&[1, 4, 2, 2]);
    let msg = pack(&t, &[1], MessageKind::Smashed, Envelope::default()).unwrap();
    let mut l = ByteLedger::default();
    l.record_message(&msg);
    assert_eq!((l.uplink_bytes, l.downlink_bytes), (38, 0));
    l.record_message(&msg);
    assert_eq!(l.uplink_bytes, 76);
}

#[test]
fn three_quarter_pruning_sends_a_quarter_of_the_payload() {
    let t = Tensor::from_fn(&[128, 16, 14, 14], |i| i as f32);
    let full: Vec<usize> = (0..16).collect();
    let standard = pack(&t, &full, MessageKind::Smashed, Envelope::default()).unwrap();
    let pruned = pack(
        &t,
        &[0, 5, 9, 15],
        MessageKind::Smashed,
        Envelope::default(),
    )
    .unwrap();
    assert_eq!(pruned.payload_len() * 4, standard.payload_len());
    // Payload scales exactly linearly in k.
    for k in 1..=16 {
        let m = pack(&t, &full[..k], MessageKind::Smashed, Envelope::default()).unwrap();
        assert_eq!(m.payload_len(), k * 4 * 128 * 14 * 14);
    }
}

proptest! {
    #[test]
    fn round_trip_is_identity(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let (_, _, msg) = random_message(&mut rng);
        prop_assert_eq!(WireMessage::from_bytes(&msg.to_bytes()).unwrap(), msg);
    }
}
