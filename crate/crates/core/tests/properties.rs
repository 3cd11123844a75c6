use proptest::prelude::*;

use rulenet_core::connection::{
    decode_request, encode_request, generate_rulesets, ConnectionRequest, HopKind, LinkInfo, Mode, Requirements,
};
use rulenet_core::link::{LinkSpec, NodeCapability, NodeType};
use rulenet_core::ruleset::validate_ruleset;
use rulenet_core::ruleset::wire::{decode_ruleset, encode_ruleset};
use rulenet_core::scenario::{ConnectionSpec, Scenario, Settings};
use rulenet_core::sim::Simulation;
use rulenet_core::topology::Topology;
use rulenet_core::{ConnectionId, Fidelity, LinkId, NodeAddr, SimTime};

fn fid(v: f64) -> Fidelity {
    Fidelity::new(v).unwrap()
}

fn request(n: usize, f: f64, t_mem: f64, target: f64) -> ConnectionRequest {
    let hops: Vec<LinkInfo> = (0..n - 1)
        .map(|i| LinkInfo {
            a: NodeAddr(i as u32),
            b: NodeAddr(i as u32 + 1),
            kind: HopKind::Physical(LinkId(i as u32)),
            seconds_per_pair: 0.001 * (i + 1) as f64,
            base_fidelity: fid(f),
            available_qubits: 4,
            latency: SimTime::from_micros(20),
            a_type: if i == 0 { NodeType::Comp } else { NodeType::Rtr },
            b_type: if i + 2 == n { NodeType::Comp } else { NodeType::Rtr },
            a_t_mem_s: t_mem,
            b_t_mem_s: t_mem,
        })
        .collect();
    let mut q = ConnectionRequest::new(
        ConnectionId(3),
        NodeAddr(0),
        NodeAddr(n as u32 - 1),
        Requirements {
            min_fidelity: fid(target),
            mode: Mode::Stream,
        },
    );
    q.path = (0..n as u32).map(NodeAddr).collect();
    q.accumulated = hops;
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_pair_has_one_fate_and_nothing_leaks(
        n in 2usize..6,
        f in 0.93f64..0.995,
        km in 1.0f64..30.0,
        t_mem in prop::sample::select(vec![f64::INFINITY, 0.3, 2.0]),
        target in 0.6f64..0.9,
        stop_ms in 5u64..60,
        seed in any::<u64>(),
    ) {
        let mut t = Topology::new();
        let ids: Vec<NodeAddr> = (0..n)
            .map(|i| {
                let ty = if i == 0 || i + 1 == n { NodeType::Comp } else { NodeType::Rtr };
                t.add_node(&format!("n{i}"), NodeCapability { t_mem_s: t_mem, ..NodeCapability::new(ty) })
            })
            .collect();
        for w in ids.windows(2) {
            let mut l = LinkSpec::new(w[0], w[1], km, fid(f));
            l.attempt_rate_hz = 20_000.0;
            t.add_link(l);
        }
        let mut s = Scenario::new(t, Settings { seed, duration: SimTime::from_secs(0.1), ..Settings::default() });
        let mut c = ConnectionSpec::new(1, ids[0], ids[n - 1], target);
        c.stop = Some(SimTime::from_secs(stop_ms as f64 / 1000.0));
        s.connections.push(c);
        let mut sim = Simulation::new(s);
        let m = sim.run();
        prop_assert!(m.global().unwrap().accounting_balanced);
        prop_assert!(sim.drain(2_000_000));
        prop_assert_eq!(sim.fault_count(), 0, "{:?}", sim.faults());
        prop_assert!(sim.check_pairs().is_ok(), "{:?}", sim.check_pairs());
        for u in &ids {
            prop_assert_eq!(sim.used_qubits(*u), 0);
        }
        prop_assert_eq!(sim.live_pairs(), 0);
        let m = sim.metrics();
        let c = m.connection(1).unwrap();
        prop_assert!(c.pairs.balanced());
        prop_assert_eq!(c.pairs.live, 0);
        if let Some(mean) = c.mean_true_fidelity {
            prop_assert!(mean >= target - 1e-9);
        }
    }

    #[test]
    fn generated_rulesets_validate_and_roundtrip(
        n in 2usize..7,
        f in 0.9f64..0.999,
        t_mem in prop::sample::select(vec![f64::INFINITY, 0.05, 1.0]),
        target in 0.6f64..0.95,
    ) {
        let q = request(n, f, t_mem, target);
        if let Ok(plan) = generate_rulesets(&q, &Default::default()) {
            prop_assert_eq!(plan.rulesets.len(), n);
            for rs in plan.ordered() {
                prop_assert!(validate_ruleset(&rs).is_empty(), "{:?}", validate_ruleset(&rs));
                let bytes = encode_ruleset(&rs);
                prop_assert_eq!(decode_ruleset(&bytes).unwrap(), rs);
            }
        }
    }

    #[test]
    fn requests_roundtrip(n in 2usize..9, f in 0.5f64..1.0, t_mem in 0.01f64..10.0, target in 0.3f64..0.99) {
        let q = request(n, f, t_mem, target);
        let bytes = encode_request(&q);
        prop_assert_eq!(decode_request(&bytes).unwrap(), q);
    }

    #[test]
    fn corrupted_bytes_never_panic(n in 2usize..5, at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let q = request(n, 0.97, 1.0, 0.8);
        let mut bytes = encode_request(&q);
        let i = at.index(bytes.len());
        bytes[i] ^= flip;
        let _ = decode_request(&bytes);
        let plan = generate_rulesets(&q, &Default::default()).unwrap();
        let mut rs = encode_ruleset(&plan.ordered()[0]);
        let j = at.index(rs.len());
        rs[j] ^= flip;
        let _ = decode_ruleset(&rs);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_request(&bytes);
        let _ = decode_ruleset(&bytes);
    }
}
