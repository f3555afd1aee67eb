//! One work unit through the whole stack: manifest, data encoding, frames
//! over a loopback socket, the prime runner and the metrics it feeds.

use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::AtomicBool;
use std::thread;

use vc_core::protocol::{read_frame, write_frame, Payload};
use vc_core::workloads::{
    check_payload, encode_data_part, parse_manifest, parse_payload, partition_range, prime_app_file, run_prime_search,
    sieve_oracle, write_manifest, RangeSpec,
};
use vc_core::{AppId, Body, Message, NodeId, WorkTotals};

#[test]
fn part_travels_and_computes() {
    let units = partition_range(&RangeSpec::new(3, 20_000, 21).unwrap()).unwrap();
    assert_eq!(parse_manifest(&write_manifest(&units)).unwrap(), units);
    let app_file = prime_app_file("desk");
    let app = AppId::of(&app_file);
    let seeder = NodeId::random();
    let leecher = NodeId::random();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let served = units.clone();
    let server = thread::spawn(move || {
        let mut results = Vec::new();
        for _ in 0..served.len() {
            let (stream, _) = listener.accept().unwrap();
            let mut r = BufReader::new(stream.try_clone().unwrap());
            let mut w = BufWriter::new(stream);
            let Some(Message { body: Body::WorkRequest { part: Some(i), .. }, .. }) = read_frame(&mut r).unwrap() else {
                panic!("expected a work request")
            };
            let unit = &served[i as usize];
            let body = Body::DataPayload { app, part: i, deadline: 0.0, payload: Payload(encode_data_part(unit)) };
            write_frame(&mut w, &Message::new(seeder, body)).unwrap();
            let Some(Message { body: Body::ResultSubmit { payload, part, .. }, .. }) = read_frame(&mut r).unwrap() else {
                panic!("expected a result")
            };
            check_payload(&served[part as usize], &payload.0).unwrap();
            results.push(parse_payload(&payload.0).unwrap());
            write_frame(&mut w, &Message::new(seeder, Body::ResultAck { app, part })).unwrap();
        }
        results
    });

    let cancel = AtomicBool::new(false);
    let mut totals = WorkTotals::default();
    for i in 0..units.len() as u32 {
        let stream = TcpStream::connect(addr).unwrap();
        let mut r = BufReader::new(stream.try_clone().unwrap());
        let mut w = BufWriter::new(stream);
        write_frame(&mut w, &Message::new(leecher, Body::WorkRequest { app, want_app: false, part: Some(i) })).unwrap();
        let Some(Message { sender, body: Body::DataPayload { payload, .. } }) = read_frame(&mut r).unwrap() else {
            panic!("expected data")
        };
        assert_eq!(sender, seeder);
        let d = payload.len() as u64;
        let result = run_prime_search(&payload.0, &cancel).unwrap();
        totals.record(app_file.len() as u64, d, 0.5);
        let submit = Body::ResultSubmit {
            app,
            part: i,
            payload: Payload(result),
            reported_d: d + app_file.len() as u64,
            app_bytes: app_file.len() as u64,
            reported_w: 0.5,
        };
        write_frame(&mut w, &Message::new(leecher, submit)).unwrap();
        assert!(matches!(read_frame(&mut r).unwrap().map(|m| m.body), Some(Body::ResultAck { part, .. }) if part == i));
    }

    let found: Vec<u64> = server.join().unwrap().concat();
    let oracle: Vec<u64> = sieve_oracle(20_000).into_iter().filter(|&p| p >= 3).collect();
    assert_eq!(found, oracle);

    let t = totals.triple();
    let data: u64 = units.iter().map(|u| encode_data_part(u).len() as u64).sum();
    assert_eq!(t.d, data + 21 * app_file.len() as u64);
    assert_eq!((t.p, t.w), (21, Some(0.5)));
}
