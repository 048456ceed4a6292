mod common;

use std::fs;
use std::io::Write;

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRunner};
use speedlab::record::{MeasurementResult, RecordError};
use speedlab::store::Store;

use common::{arb_record, round_trip};

#[test]
fn thousand_random_records_round_trip_byte_identically() {
    let mut runner = TestRunner::new(Config::with_cases(1000));
    runner
        .run(&arb_record(), |r| {
            round_trip(&r).map_err(TestCaseError::fail)?;
            Ok(())
        })
        .unwrap();
}

fn sample_records(n: usize) -> Vec<MeasurementResult> {
    let mut runner = TestRunner::deterministic();
    (0..n)
        .map(|_| arb_record().new_tree(&mut runner).unwrap().current())
        .collect()
}

#[test]
fn stored_reports_recompute_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path().join("results.jsonl"));
    let records = sample_records(50);
    for r in &records {
        store.append(r).unwrap();
    }
    let read = store.read().unwrap();
    assert!(read.skipped.is_empty());
    assert_eq!(read.records, records);
    for r in &read.records {
        r.verify().unwrap();
    }
}

#[test]
fn tampered_report_fails_verification() {
    let mut r = sample_records(1).remove(0);
    r.estimates[0].bps *= 1.000001;
    assert!(matches!(r.verify(), Err(RecordError::NotReproducible(_))));
}

#[test]
fn corrupt_trailing_line_is_skipped_and_appends_continue() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    let store = Store::new(&path);
    let records = sample_records(3);
    store.append(&records[0]).unwrap();
    store.append(&records[1]).unwrap();
    // Simulate a crash mid-write.
    let line = records[2].to_line().unwrap();
    fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(&line.as_bytes()[..line.len() / 2])
        .unwrap();
    let read = store.read().unwrap();
    assert_eq!(read.records, records[..2]);
    assert_eq!(read.skipped.len(), 1);
    assert_eq!(read.skipped[0].line_no, 3);

    store.append(&records[2]).unwrap();
    let read = store.read().unwrap();
    assert_eq!(read.records, records);
    assert_eq!(read.skipped.len(), 1);
}

#[test]
fn missing_store_reads_empty() {
    let dir = tempfile::tempdir().unwrap();
    let read = Store::new(dir.path().join("none.jsonl")).read().unwrap();
    assert!(read.records.is_empty() && read.skipped.is_empty());
}

#[test]
fn unknown_major_version_is_rejected() {
    let r = sample_records(1).remove(0);
    let mut value: serde_json::Value = serde_json::from_str(&r.to_line().unwrap()).unwrap();
    value["schema_version"] = 2.into();
    let line = value.to_string();
    assert!(matches!(MeasurementResult::from_line(&line), Err(RecordError::UnsupportedVersion(2))));
    value.as_object_mut().unwrap().remove("schema_version");
    assert!(matches!(
        MeasurementResult::from_line(&value.to_string()),
        Err(RecordError::MissingVersion)
    ));
}

#[test]
fn unknown_version_in_store_is_skipped_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    let records = sample_records(2);
    let mut future: serde_json::Value = serde_json::from_str(&records[1].to_line().unwrap()).unwrap();
    future["schema_version"] = 7.into();
    fs::write(&path, format!("{}\n{}\n", records[0].to_line().unwrap(), future)).unwrap();
    let read = Store::new(&path).read().unwrap();
    assert_eq!(read.records, records[..1]);
    assert!(matches!(read.skipped[0].error, RecordError::UnsupportedVersion(7)));
}

#[test]
fn concurrent_appends_do_not_interleave() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    let records = sample_records(40);
    std::thread::scope(|s| {
        for chunk in records.chunks(10) {
            let path = path.clone();
            s.spawn(move || {
                let store = Store::new(path);
                for r in chunk {
                    store.append(r).unwrap();
                }
            });
        }
    });
    let read = Store::new(&path).read().unwrap();
    assert!(read.skipped.is_empty());
    assert_eq!(read.records.len(), 40);
    for r in &records {
        assert!(read.records.contains(r));
    }
}
