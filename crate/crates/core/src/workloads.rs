//! Range-partitioned prime search: the benchmark application, its data-part
//! encoding, its canonical result payload and the sieve used to check it.
//!
//! A data part is the list of candidate integers of one [`WorkUnit`], each a
//! little-endian `u32`. A result payload is the ascending list of primes
//! among the candidates, one decimal per line, each line `\n`-terminated.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("invalid range spec: {0}")]
    InvalidSpec(String),
    #[error("malformed data part: {0}")]
    MalformedData(String),
    #[error("malformed result payload: {0}")]
    MalformedPayload(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("cancelled")]
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeSpec {
    pub lo: u64,
    pub hi: u64,
    pub parts: u32,
}

impl RangeSpec {
    pub fn new(lo: u64, hi: u64, parts: u32) -> Result<Self, WorkloadError> {
        let spec = RangeSpec { lo, hi, parts };
        spec.validate()?;
        Ok(spec)
    }

    pub fn len(&self) -> u64 {
        self.hi - self.lo + 1
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.lo < 2 {
            return Err(WorkloadError::InvalidSpec(format!("lo={} is below 2", self.lo)));
        }
        if self.hi < self.lo {
            return Err(WorkloadError::InvalidSpec(format!("hi={} < lo={}", self.hi, self.lo)));
        }
        if self.hi > u32::MAX as u64 {
            return Err(WorkloadError::InvalidSpec(format!("hi={} does not fit in u32", self.hi)));
        }
        if self.parts == 0 || self.parts as u64 > self.len() {
            return Err(WorkloadError::InvalidSpec(format!(
                "{} parts for a range of {} numbers",
                self.parts,
                self.len()
            )));
        }
        Ok(())
    }
}

/// One contiguous, inclusive slice of a range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkUnit {
    pub index: u32,
    pub lo: u64,
    pub hi: u64,
}

impl WorkUnit {
    pub fn len(&self) -> u64 {
        self.hi - self.lo + 1
    }
}

/// Splits `spec` into `spec.parts` contiguous units whose sizes differ by at
/// most one; the first `len % parts` units carry the extra number.
pub fn partition_range(spec: &RangeSpec) -> Result<Vec<WorkUnit>, WorkloadError> {
    spec.validate()?;
    let parts = spec.parts as u64;
    let base = spec.len() / parts;
    let extra = spec.len() % parts;
    let mut lo = spec.lo;
    let units = (0..parts)
        .map(|i| {
            let size = base + u64::from(i < extra);
            let unit = WorkUnit { index: i as u32, lo, hi: lo + size - 1 };
            lo += size;
            unit
        })
        .collect();
    Ok(units)
}

/// Exhaustive trial division by every integer `2..=sqrt(n)`.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2u64;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

/// All primes in `[lo, hi]`, ascending.
pub fn find_primes(lo: u64, hi: u64) -> Vec<u64> {
    (lo..=hi).filter(|&n| is_prime(n)).collect()
}

/// Sieve of Eratosthenes over `[0, n]`. Only used to check [`find_primes`].
pub fn sieve_oracle(n: u64) -> Vec<u64> {
    let n = n as usize;
    let mut composite = vec![false; n + 1];
    let mut primes = Vec::new();
    for i in 2..=n {
        if composite[i] {
            continue;
        }
        primes.push(i as u64);
        let mut j = i * i;
        while j <= n {
            composite[j] = true;
            j += i;
        }
    }
    primes
}

/// Little-endian `u32` encoding of every candidate in the unit.
pub fn encode_data_part(unit: &WorkUnit) -> Vec<u8> {
    let mut out = Vec::with_capacity(unit.len() as usize * 4);
    for n in unit.lo..=unit.hi {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out
}

pub fn decode_data_part(bytes: &[u8]) -> Result<Vec<u32>, WorkloadError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(WorkloadError::MalformedData(format!(
            "{} bytes is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn canonical_payload(primes: &[u64]) -> Vec<u8> {
    let mut out = String::with_capacity(primes.len() * 8);
    for p in primes {
        let _ = writeln!(out, "{p}");
    }
    out.into_bytes()
}

/// Parses a canonical payload, rejecting anything not strictly ascending.
pub fn parse_payload(bytes: &[u8]) -> Result<Vec<u64>, WorkloadError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| WorkloadError::MalformedPayload("not utf-8".into()))?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text
        .strip_suffix('\n')
        .ok_or_else(|| WorkloadError::MalformedPayload("missing final newline".into()))?;
    let mut out: Vec<u64> = Vec::new();
    for line in body.split('\n') {
        if line.is_empty() || !line.bytes().all(|b| b.is_ascii_digit()) || (line.len() > 1 && line.starts_with('0')) {
            return Err(WorkloadError::MalformedPayload(format!("bad line {line:?}")));
        }
        let n: u64 = line
            .parse()
            .map_err(|_| WorkloadError::MalformedPayload(format!("bad number {line:?}")))?;
        if out.last().is_some_and(|&last| last >= n) {
            return Err(WorkloadError::MalformedPayload("not strictly ascending".into()));
        }
        out.push(n);
    }
    Ok(out)
}

/// Structural check used before a result may vote: well formed and every
/// number inside the unit.
pub fn check_payload(unit: &WorkUnit, bytes: &[u8]) -> Result<(), WorkloadError> {
    let values = parse_payload(bytes)?;
    if let Some(n) = values.iter().find(|&&n| n < unit.lo || n > unit.hi) {
        return Err(WorkloadError::MalformedPayload(format!(
            "{n} outside [{}, {}]",
            unit.lo, unit.hi
        )));
    }
    Ok(())
}

pub fn prime_app_runner(unit: &WorkUnit) -> Vec<u8> {
    canonical_payload(&find_primes(unit.lo, unit.hi))
}

/// Runs the prime search over an encoded data part, checking `cancel`
/// between candidates.
pub fn run_prime_search(data: &[u8], cancel: &AtomicBool) -> Result<Vec<u8>, WorkloadError> {
    let mut candidates = decode_data_part(data)?;
    candidates.sort_unstable();
    candidates.dedup();
    let mut primes = Vec::new();
    for n in candidates {
        if cancel.load(Ordering::Relaxed) {
            return Err(WorkloadError::Cancelled);
        }
        if is_prime(n as u64) {
            primes.push(n as u64);
        }
    }
    Ok(canonical_payload(&primes))
}

/// Marker line that lets agents run the prime search in process.
pub const BUILTIN_PRIME_MARKER: &str = "# vc-runner: builtin:prime-search";
pub const PRIME_APP_FILE_SIZE: usize = 4096;

const PRIME_APP_BODY: &str = r#""""Prime search by exhaustive trial division.

Usage: app DATA_PART
Reads little-endian u32 candidates from DATA_PART and prints every prime
among them, one per line, ascending.
"""
import struct
import sys


def is_prime(n):
    if n < 2:
        return False
    d = 2
    while d * d <= n:
        if n % d == 0:
            return False
        d += 1
    return True


def main(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    count = len(raw) // 4
    values = struct.unpack("<%dI" % count, raw[: count * 4])
    out = sys.stdout
    for n in sorted(set(values)):
        if is_prime(n):
            out.write("%d\n" % n)


if __name__ == "__main__":
    main(sys.argv[-1])
"#;

/// The prime-search application file: a standalone Python script, padded
/// with comment lines to exactly [`PRIME_APP_FILE_SIZE`] bytes. `label` ends
/// up in a header comment so differently labelled apps hash differently.
pub fn prime_app_file(label: &str) -> Vec<u8> {
    let label: String = label.chars().filter(|c| *c != '\n').take(256).collect();
    let mut text = format!(
        "#!/usr/bin/env python3\n{BUILTIN_PRIME_MARKER}\n# app: {label}\n{PRIME_APP_BODY}"
    );
    let filler = "#".repeat(63) + "\n";
    while text.len() + filler.len() <= PRIME_APP_FILE_SIZE {
        text.push_str(&filler);
    }
    let rest = PRIME_APP_FILE_SIZE - text.len();
    if rest > 0 {
        text.push_str(&"#".repeat(rest - 1));
        text.push('\n');
    }
    text.into_bytes()
}

/// Whether an application file asks for the in-process prime search.
pub fn is_builtin_prime_app(app: &[u8]) -> bool {
    app.split(|&b| b == b'\n')
        .take(4)
        .any(|line| line == BUILTIN_PRIME_MARKER.as_bytes())
}

/// Parses a data manifest: one `index lo hi` line per part, indices 0..n in
/// order. Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<WorkUnit>, WorkloadError> {
    let mut units = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| WorkloadError::Manifest { line: i + 1, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", fields.len())));
        }
        let nums: Vec<u64> = fields
            .iter()
            .map(|f| f.parse::<u64>().map_err(|_| err(format!("bad integer {f:?}"))))
            .collect::<Result<_, _>>()?;
        let (index, lo, hi) = (nums[0], nums[1], nums[2]);
        if index != units.len() as u64 {
            return Err(err(format!("expected index {}, got {index}", units.len())));
        }
        if lo > hi || hi > u32::MAX as u64 {
            return Err(err(format!("bad bounds {lo}..{hi}")));
        }
        units.push(WorkUnit { index: index as u32, lo, hi });
    }
    Ok(units)
}

pub fn write_manifest(units: &[WorkUnit]) -> String {
    let mut out = String::new();
    for u in units {
        let _ = writeln!(out, "{} {} {}", u.index, u.lo, u.hi);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scenario_one_partition() {
        let units = partition_range(&RangeSpec::new(3, 2_000_000, 2059).unwrap()).unwrap();
        assert_eq!(units.len(), 2059);
        assert_eq!(units[0].lo, 3);
        assert_eq!(units.last().unwrap().hi, 2_000_000);
        // 1_999_998 = 2059 * 971 + 709
        assert!(units[..709].iter().all(|u| u.len() == 972));
        assert!(units[709..].iter().all(|u| u.len() == 971));
        for w in units.windows(2) {
            assert_eq!(w[0].hi + 1, w[1].lo);
        }
    }

    #[test]
    fn scenario_two_partition() {
        let units = partition_range(&RangeSpec::new(2_000_001, 3_000_000, 1080).unwrap()).unwrap();
        assert_eq!(units.len(), 1080);
        assert_eq!(units.last().unwrap().hi, 3_000_000);
    }

    #[test]
    fn singleton_partition() {
        let units = partition_range(&RangeSpec { lo: 3, hi: 3, parts: 1 }).unwrap();
        assert_eq!(units, vec![WorkUnit { index: 0, lo: 3, hi: 3 }]);
    }

    #[test]
    fn invalid_specs() {
        assert!(RangeSpec::new(3, 5, 4).is_err());
        assert!(RangeSpec::new(1, 5, 1).is_err());
        assert!(RangeSpec::new(6, 5, 1).is_err());
        assert!(RangeSpec::new(3, 5, 0).is_err());
    }

    #[test]
    fn small_prime_cases() {
        assert_eq!(find_primes(3, 10), vec![3, 5, 7]);
        assert_eq!(sieve_oracle(10), vec![2, 3, 5, 7]);
        assert_eq!(sieve_oracle(100).len(), 25);
        assert!(!is_prime(1) && !is_prime(0) && is_prime(2) && !is_prime(4));
    }

    #[test]
    fn full_range_counts_match_sieve() {
        let sieve = sieve_oracle(3_000_000);
        let in_range = |lo: u64, hi: u64| sieve.iter().filter(|&&p| p >= lo && p <= hi).count();
        assert_eq!(in_range(3, 2_000_000), 148_932);
        assert_eq!(in_range(2_000_001, 3_000_000), 67_883);
        assert_eq!(find_primes(2_000_001, 3_000_000).len(), 67_883);
    }

    #[test]
    fn runner_payload() {
        assert_eq!(prime_app_runner(&WorkUnit { index: 0, lo: 3, hi: 10 }), b"3\n5\n7\n");
        let unit = WorkUnit { index: 0, lo: 3, hi: 974 };
        let data = encode_data_part(&unit);
        let flag = AtomicBool::new(false);
        assert_eq!(run_prime_search(&data, &flag).unwrap(), prime_app_runner(&unit));
        assert_eq!(run_prime_search(&data, &flag).unwrap(), run_prime_search(&data, &flag).unwrap());
        let expected: Vec<u64> = sieve_oracle(974).into_iter().filter(|&p| p >= 3).collect();
        assert_eq!(parse_payload(&prime_app_runner(&unit)).unwrap(), expected);
    }

    #[test]
    fn cancelled_run() {
        let data = encode_data_part(&WorkUnit { index: 0, lo: 3, hi: 100 });
        assert_eq!(run_prime_search(&data, &AtomicBool::new(true)), Err(WorkloadError::Cancelled));
    }

    #[test]
    fn data_part_size() {
        let unit = WorkUnit { index: 0, lo: 3, hi: 974 };
        let data = encode_data_part(&unit);
        assert_eq!(data.len(), 972 * 4);
        assert_eq!(decode_data_part(&data).unwrap().len(), 972);
        assert!(decode_data_part(&data[..5]).is_err());
    }

    #[test]
    fn payload_checks() {
        let unit = WorkUnit { index: 0, lo: 3, hi: 10 };
        assert!(check_payload(&unit, b"3\n5\n7\n").is_ok());
        assert!(check_payload(&unit, b"").is_ok());
        assert!(check_payload(&unit, b"3\n5\n11\n").is_err());
        assert!(check_payload(&unit, b"5\n3\n").is_err());
        assert!(check_payload(&unit, b"3\n5").is_err());
        assert!(check_payload(&unit, b"03\n").is_err());
        assert!(check_payload(&unit, b"x\n").is_err());
    }

    #[test]
    fn app_file_shape() {
        let a = prime_app_file("app 1");
        let b = prime_app_file("app 2");
        assert_eq!(a.len(), PRIME_APP_FILE_SIZE);
        assert_eq!(b.len(), PRIME_APP_FILE_SIZE);
        assert_ne!(a, b);
        assert!(is_builtin_prime_app(&a));
        assert!(!is_builtin_prime_app(b"#!/bin/sh\necho hi\n"));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let units = partition_range(&RangeSpec::new(3, 1000, 7).unwrap()).unwrap();
        assert_eq!(parse_manifest(&write_manifest(&units)).unwrap(), units);
        assert!(parse_manifest("1 3 10\n").is_err());
        assert!(parse_manifest("0 3\n").is_err());
        assert!(parse_manifest("0 10 3\n").is_err());
        assert_eq!(parse_manifest("# comment\n\n0 3 10\n").unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn canonical_payload_injective(a in proptest::collection::btree_set(2u64..10_000, 0..40),
                                       b in proptest::collection::btree_set(2u64..10_000, 0..40)) {
            let va: Vec<u64> = a.iter().copied().collect();
            let vb: Vec<u64> = b.iter().copied().collect();
            prop_assert_eq!(va == vb, canonical_payload(&va) == canonical_payload(&vb));
            prop_assert_eq!(parse_payload(&canonical_payload(&va)).unwrap(), va);
        }
    }
}
