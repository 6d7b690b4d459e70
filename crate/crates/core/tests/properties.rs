use proptest::prelude::*;

use convowaste_core::classifier::StochasticModel;
use convowaste_core::domain::{level_from_distance, BinIndex, ProfileSet, ServoCommand, WasteClass};
use convowaste_core::link::{ChecksumKind, Codec, LinkMessage, StreamDecoder, StreamItem};
use convowaste_core::sim::{replay, EventKind, Scenario, SimEvent, SimOptions, Simulation};
use convowaste_core::{Config, Direction, RoutingTable};

fn class() -> impl Strategy<Value = WasteClass> {
    (0..6usize).prop_map(|i| WasteClass::ALL[i])
}

fn bin() -> impl Strategy<Value = BinIndex> {
    (1..=6u8).prop_map(|b| BinIndex::new(b).unwrap())
}

fn message() -> impl Strategy<Value = LinkMessage> {
    prop_oneof![
        class().prop_map(|class| LinkMessage::Detected { class }),
        any::<u8>().prop_map(|ref_type| LinkMessage::Ack { ref_type }),
        (1..=3u8, any::<bool>()).prop_map(|(s, cw)| LinkMessage::ServoDone {
            command: ServoCommand::new(s, if cw { Direction::Cw } else { Direction::Ccw }).unwrap()
        }),
        (bin(), any::<u16>()).prop_map(|(bin, count)| LinkMessage::BinCount { bin, count }),
        (bin(), any::<u16>()).prop_map(|(bin, distance_mm)| LinkMessage::Level { bin, distance_mm }),
        Just(LinkMessage::StopAll),
        bin().prop_map(|bin| LinkMessage::Dump { bin }),
        any::<bool>().prop_map(|run| LinkMessage::Belt { run }),
    ]
}

fn checksum() -> impl Strategy<Value = ChecksumKind> {
    prop_oneof![Just(ChecksumKind::Xor), Just(ChecksumKind::Crc8)]
}

fn run(scenario: &Scenario, seed: u64) -> Simulation<StochasticModel> {
    let options = SimOptions { seed, record_events: true, record_link: false, keep_alive: false };
    let model = StochasticModel::new(ProfileSet::default(), seed);
    let mut sim = Simulation::new(&Config::default(), scenario, model, options).unwrap();
    sim.run().unwrap();
    sim
}

proptest! {
    #[test]
    fn frames_round_trip(msg in message(), kind in checksum()) {
        let codec = Codec::new(kind);
        let bytes = codec.encode(&msg);
        prop_assert_eq!(codec.decode(&bytes).unwrap(), (msg, bytes.len()));
    }

    #[test]
    fn stream_decoder_survives_split_and_noise(
        msgs in prop::collection::vec(message(), 1..8),
        noise in prop::collection::vec(any::<u8>(), 0..=64),
        split in any::<prop::sample::Index>(),
    ) {
        let codec = Codec::default();
        let mut bytes = noise;
        for m in &msgs {
            bytes.extend(codec.encode(m));
        }
        let cut = split.index(bytes.len() + 1);
        let mut dec = StreamDecoder::new(codec);
        let mut got = dec.push(&bytes[..cut]);
        got.extend(dec.push(&bytes[cut..]));
        let decoded: Vec<LinkMessage> = got
            .into_iter()
            .filter_map(|i| match i { StreamItem::Message(m) => Some(m), _ => None })
            .collect();
        // noise may decode to stray frames first, the real ones come last
        prop_assert!(decoded.ends_with(&msgs), "{:?} does not end with {:?}", decoded, msgs);
    }

    #[test]
    fn level_stays_in_range(distance in -1.0f64..2.0, depth in 0.01f64..3.0) {
        let level = level_from_distance(distance, depth).unwrap();
        prop_assert!((0.0..=100.0).contains(&level));
    }

    #[test]
    fn scenario_json_round_trips(count in 0usize..40, spacing in 0.5f64..60.0, seed in any::<u64>()) {
        let s = Scenario::poisson(count, spacing, seed);
        prop_assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_item_is_accounted_for(count in 1usize..30, spacing in 1.0f64..40.0, seed in any::<u64>()) {
        let scenario = Scenario::poisson(count, spacing, seed);
        let sim = run(&scenario, seed);
        let m = sim.metrics();
        prop_assert_eq!(m.presented, count as u64);
        prop_assert_eq!(m.binned + m.rejected + m.in_flight, m.presented);
        prop_assert_eq!(m.in_flight, 0);

        let table = RoutingTable::default();
        let mut counts = [0u16; 6];
        for e in sim.events() {
            match e.kind {
                EventKind::Classified { item, predicted: Some(p), .. } => {
                    let binned = sim.events().iter().find_map(|x| match x.kind {
                        EventKind::ItemBinned { item: i, bin, .. } if i == item => Some(bin),
                        _ => None,
                    });
                    prop_assert_eq!(binned, Some(table.bin_for(p)));
                }
                EventKind::ItemBinned { bin, count, .. } => {
                    counts[bin.slot()] += 1;
                    prop_assert_eq!(count, counts[bin.slot()]);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn trace_lines_and_replay_round_trip(count in 1usize..20, seed in any::<u64>()) {
        let sim = run(&Scenario::poisson(count, 15.0, seed), seed);
        for e in sim.events() {
            let line = e.to_string();
            prop_assert_eq!(&line.parse::<SimEvent>().unwrap(), e, "{}", line);
        }
        prop_assert_eq!(replay(&sim.trace_text()).unwrap(), sim.metrics());
    }
}
