use proptest::prelude::*;
use tipcut_core::consensus::{confirm_quorum, qc_quorum, timeout_quorum, LeaderSchedule};
use tipcut_core::crypto::{Digest, ReplicaId};
use tipcut_core::lane::{poa_quorum, Car};

proptest! {
    #[test]
    fn quorum_arithmetic_for_any_f(f in 1usize..40) {
        let n = 3 * f + 1;
        let q = qc_quorum(n, f);
        prop_assert_eq!(q, 2 * f + 1);
        prop_assert!(2 * q - n > f);
        prop_assert_eq!(timeout_quorum(n, f), q);
        prop_assert_eq!(confirm_quorum(f), q);
        prop_assert!(poa_quorum(f) > f);
    }

    #[test]
    fn leader_frequency_is_stake_share(stakes in proptest::collection::vec(0u64..20, 1..8)) {
        prop_assume!(stakes.iter().any(|s| *s > 0));
        let sched = LeaderSchedule::new(&stakes);
        let period = sched.period() as u64;
        let total: u64 = stakes.iter().sum();
        let mut counts = vec![0u64; stakes.len()];
        for round in 0..period * 3 {
            counts[sched.leader(round).index()] += 1;
        }
        for (c, s) in counts.iter().zip(&stakes) {
            prop_assert_eq!(c * total, 3 * period * s);
        }
    }

    #[test]
    fn car_wire_format_round_trips(
        lane in 0u32..16,
        pos in any::<u64>(),
        parent in any::<[u8; 32]>(),
        batch in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40), 0..6),
    ) {
        let car = Car::new(ReplicaId(lane), pos, Digest(parent), batch);
        let bytes = car.encode();
        prop_assert_eq!(&bytes[..4], &lane.to_be_bytes());
        prop_assert_eq!(&bytes[4..12], &pos.to_be_bytes());
        let back = Car::decode(&bytes).unwrap();
        prop_assert!(back.is_consistent());
        prop_assert_eq!(back, car);
        for cut in 0..bytes.len() {
            prop_assert!(Car::decode(&bytes[..cut]).is_err());
        }
    }
}
