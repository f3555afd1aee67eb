//! Property suites shared by the unit tests and the acceptance gate.
//! Each runner takes the number of random cases and reports the first
//! minimal counterexample.

use std::sync::atomic::AtomicBool;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use crate::metrics::{
    avg_working_time, complexity_hint, data_size, popularity, replicated_metrics, Complexity,
    ComplexityThresholds, MetricTriple, RunLog, SizeAccount, ValidationPolicy, WorkTotals,
};
use crate::protocol::{decode, encode, AppAnnouncement, AppId, AppStatus, Body, Message, NodeId, Payload};
use crate::workloads::{
    encode_data_part, find_primes, partition_range, run_prime_search, sieve_oracle, RangeSpec,
};

fn node_id() -> impl Strategy<Value = NodeId> {
    any::<[u8; 16]>().prop_map(NodeId::from_bytes)
}

fn app_id() -> impl Strategy<Value = AppId> {
    any::<[u8; 32]>().prop_map(AppId::from_bytes)
}

fn payload() -> impl Strategy<Value = Payload> {
    proptest::collection::vec(any::<u8>(), 0..512).prop_map(Payload)
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![0.0..1e6f64, Just(0.0), any::<f64>().prop_filter("finite", |f| f.is_finite())]
}

fn policy() -> impl Strategy<Value = ValidationPolicy> {
    (1u32..5, 0u32..4).prop_map(|(min, extra)| ValidationPolicy::new(min, min + extra).unwrap())
}

fn totals() -> impl Strategy<Value = WorkTotals> {
    (any::<u32>(), any::<u32>(), any::<u32>(), 0.0..1e7f64).prop_map(|(a, d, r, s)| WorkTotals {
        app_bytes: a as u64,
        data_bytes: d as u64,
        runs: r as u64,
        seconds: s,
    })
}

fn status() -> impl Strategy<Value = AppStatus> {
    (app_id(), any::<u32>(), any::<u32>(), policy(), totals()).prop_map(|(app, a, b, policy, work)| {
        AppStatus { app, part_count: a.max(b), parts_remaining: a.min(b), policy, work }
    })
}

fn announcement() -> impl Strategy<Value = AppAnnouncement> {
    (status(), node_id(), "[a-z0-9.:]{1,21}").prop_map(|(s, host, address)| AppAnnouncement {
        app: s.app,
        host,
        address,
        metrics: replicated_metrics(s.work.triple(), s.policy),
        part_count: s.part_count,
        parts_remaining: s.parts_remaining,
        policy: s.policy,
        work: s.work,
    })
}

fn body() -> impl Strategy<Value = Body> {
    let text = "\\PC{0,24}";
    prop_oneof![
        text.prop_map(|address| Body::Hello { address }),
        (text, proptest::collection::vec(status(), 0..4)).prop_map(|(address, apps)| Body::Offer { address, apps }),
        (any::<u64>(), proptest::collection::vec(announcement(), 0..4))
            .prop_map(|(revision, apps)| Body::ListPush { revision, apps }),
        Just(Body::Ping),
        Just(Body::Pong),
        proptest::collection::vec(status(), 0..4).prop_map(|apps| Body::StatusUpdate { apps }),
        (app_id(), any::<bool>(), proptest::option::of(any::<u32>()))
            .prop_map(|(app, want_app, part)| Body::WorkRequest { app, want_app, part }),
        (app_id(), payload()).prop_map(|(app, payload)| Body::AppPayload { app, payload }),
        (app_id(), any::<u32>(), finite(), payload())
            .prop_map(|(app, part, deadline, payload)| Body::DataPayload { app, part, deadline, payload }),
        (app_id(), any::<u32>(), payload(), any::<u32>(), any::<u32>(), finite()).prop_map(
            |(app, part, payload, d, a, w)| Body::ResultSubmit {
                app,
                part,
                payload,
                reported_d: d as u64 + a as u64,
                app_bytes: a as u64,
                reported_w: w,
            }
        ),
        (app_id(), any::<u32>()).prop_map(|(app, part)| Body::ResultAck { app, part }),
        (app_id(), any::<u32>(), text).prop_map(|(app, part, reason)| Body::ResultReject { app, part, reason }),
        app_id().prop_map(|app| Body::DropNotice { app }),
        (text, text).prop_map(|(code, detail)| Body::Error { code, detail }),
    ]
}

fn message() -> impl Strategy<Value = Message> {
    (node_id(), body()).prop_map(|(sender, body)| Message::new(sender, body))
}

fn payload_len(body: &Body) -> Option<usize> {
    match body {
        Body::AppPayload { payload, .. }
        | Body::DataPayload { payload, .. }
        | Body::ResultSubmit { payload, .. } => Some(payload.len()),
        _ => None,
    }
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// decode(encode(m)) == m, one frame per message, declared payload lengths.
pub fn protocol_round_trip(cases: u32) -> Result<(), String> {
    run(cases, message(), |m| {
        let bytes = encode(&m).unwrap();
        prop_assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
        prop_assert_eq!(encode(&m).unwrap(), bytes.clone());
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(payload_len(&back.body), payload_len(&m.body));
        if let Some(len) = payload_len(&m.body) {
            let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            prop_assert_eq!(v["payload"]["len"].as_u64(), Some(len as u64));
        }
        prop_assert_eq!(back, m);
        Ok(())
    })
}

/// Unknown top-level keys are ignored on decode.
pub fn injected_fields_ignored(cases: u32) -> Result<(), String> {
    run(cases, (message(), "x_[a-z]{1,8}", any::<i32>()), |(m, key, val)| {
        let bytes = encode(&m).unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v.as_object_mut().unwrap().insert(key, serde_json::json!(val));
        let mut line = serde_json::to_vec(&v).unwrap();
        line.push(b'\n');
        prop_assert_eq!(decode(&line).unwrap(), m);
        Ok(())
    })
}

/// Units cover the range contiguously, in order, sizes within one.
pub fn partition_soundness(cases: u32) -> Result<(), String> {
    run(cases, (2u64..1_000_000, 1u64..50_000, any::<u32>()), |(lo, len, parts_seed)| {
        let hi = lo + len - 1;
        let parts = 1 + parts_seed % (len.min(5_000) as u32);
        let units = partition_range(&RangeSpec::new(lo, hi, parts).unwrap()).unwrap();
        prop_assert_eq!(units.len(), parts as usize);
        prop_assert_eq!(units[0].lo, lo);
        prop_assert_eq!(units.last().unwrap().hi, hi);
        let (min, max) = units.iter().fold((u64::MAX, 0), |(a, b), u| (a.min(u.len()), b.max(u.len())));
        prop_assert!(max - min <= 1);
        for (i, w) in units.windows(2).enumerate() {
            prop_assert_eq!(w[0].index as usize, i);
            prop_assert_eq!(w[0].hi + 1, w[1].lo);
            prop_assert!(w[0].len() >= w[1].len());
        }
        Ok(())
    })
}

/// Trial division agrees with the sieve on subranges of [2, 10^5].
pub fn primes_match_sieve(cases: u32) -> Result<(), String> {
    run(cases, (2u64..=100_000, 2u64..=100_000), |(a, b)| {
        let (lo, hi) = (a.min(b), a.max(b));
        let oracle: Vec<u64> = sieve_oracle(hi).into_iter().filter(|&p| p >= lo).collect();
        prop_assert_eq!(find_primes(lo, hi), oracle);
        Ok(())
    })
}

/// Searching an encoded data part equals searching its range.
pub fn encoded_search_matches(cases: u32) -> Result<(), String> {
    run(cases, (2u64..200_000, 1u64..2_000), |(lo, len)| {
        let unit = crate::workloads::WorkUnit { index: 0, lo, hi: lo + len - 1 };
        let payload = run_prime_search(&encode_data_part(&unit), &AtomicBool::new(false)).unwrap();
        prop_assert_eq!(payload, crate::workloads::prime_app_runner(&unit));
        Ok(())
    })
}

/// Metric invariants: d additive and order free, w * p = total time,
/// replication identity at m_min = 1 and linear in m_min, hint rules exclusive.
pub fn metric_invariants(cases: u32) -> Result<(), String> {
    let sizes = || proptest::collection::vec(0u64..1 << 40, 0..20);
    run(cases, (sizes(), sizes(), sizes(), sizes()), |(a, b, c, d)| {
        let x = SizeAccount { app_sizes: a.clone(), data_sizes: b.clone() };
        let y = SizeAccount { app_sizes: c, data_sizes: d };
        prop_assert_eq!(data_size(&x.clone().merge(&y)), data_size(&x) + data_size(&y));
        let mut ra = a;
        ra.reverse();
        let mut rb = b;
        rb.reverse();
        prop_assert_eq!(data_size(&SizeAccount { app_sizes: ra, data_sizes: rb }), data_size(&x));
        Ok(())
    })?;
    run(cases, proptest::collection::vec(0.0..1e4f64, 1..200), |times| {
        let log: RunLog = times.iter().map(|&t| (NodeId::from_bytes([1; 16]), t)).collect();
        let total: f64 = times.iter().sum();
        let back = avg_working_time(&log).unwrap() * popularity(&log) as f64;
        prop_assert!((back - total).abs() <= 1e-9 * total.abs().max(1e-300));
        Ok(())
    })?;
    run(cases, (0u64..1 << 40, 0u64..1 << 20, 0.0..1e5f64, 1u32..50, 1u32..20), |(d, p, w, m, k)| {
        let base = MetricTriple { d, p, w: (p > 0).then_some(w) };
        prop_assert_eq!(replicated_metrics(base, ValidationPolicy::single()), base);
        let one = replicated_metrics(base, ValidationPolicy::new(m, m).unwrap());
        let scaled = replicated_metrics(base, ValidationPolicy::new(m * k, m * k).unwrap());
        prop_assert_eq!(scaled.d, one.d * k as u64);
        prop_assert_eq!(scaled.p, one.p * k as u64);
        prop_assert_eq!(scaled.w.is_none(), scaled.p == 0);
        Ok(())
    })?;
    let shape = (0u64..1 << 30, 0u64..10_000, 0.0..1_000f64);
    let thresholds = (0u64..1 << 29, 1u64..1 << 29, 0.0..500f64, 0.001..500f64, 0u64..1000);
    run(cases, (shape, thresholds), |((d, p, w), (dlo, dgap, wlo, wgap, phi))| {
        let th = ComplexityThresholds { d_lo: dlo, d_hi: dlo + dgap, w_lo: wlo, w_hi: wlo + wgap, p_hi: phi };
        prop_assert!(th.validate().is_ok());
        let m = MetricTriple { d, p, w: Some(w) };
        let low = d >= th.d_hi && w <= th.w_lo;
        let high = p >= th.p_hi && w >= th.w_hi && d <= th.d_lo;
        prop_assert!(!(low && high));
        let expected = if low {
            Complexity::Low
        } else if high {
            Complexity::High
        } else {
            Complexity::Indeterminate
        };
        prop_assert_eq!(complexity_hint(&m, &th), expected);
        Ok(())
    })
}
