//! Replays the checked-in fuzz corpus through the fuzz targets' assertions.

use std::path::PathBuf;

use asmem::config::parse_config;
use asmem::inference::InferenceRequest;
use asmem::memory_bank::MemoryBank;
use asmem::tensorstore::{TensorFile, TraceSet};

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus {}", dir.display());
    out
}

#[test]
fn tensor_file_seeds_are_canonical() {
    for (path, data) in corpus("tensor_file") {
        let file = TensorFile::from_bytes(&data).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(file.to_bytes().unwrap(), data, "{}", path.display());
    }
}

#[test]
fn trace_set_seeds_round_trip() {
    for (path, data) in corpus("trace_set") {
        let traces = TraceSet::from_tensor_file(&TensorFile::from_bytes(&data).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let bytes = traces.to_tensor_file().unwrap().to_bytes().unwrap();
        assert_eq!(TraceSet::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap(), traces);
    }
}

#[test]
fn memory_bank_seeds_round_trip() {
    for (path, data) in corpus("memory_bank") {
        let bank = MemoryBank::from_bytes(&data).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(MemoryBank::from_bytes(&bank.to_bytes().unwrap()).unwrap(), bank);
    }
}

#[test]
fn inference_request_seeds_round_trip() {
    for (path, data) in corpus("inference_request") {
        let req = InferenceRequest::from_tensor_file(&TensorFile::from_bytes(&data).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let bytes = req.to_tensor_file().unwrap().to_bytes().unwrap();
        assert_eq!(InferenceRequest::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap(), req);
    }
}

#[test]
fn config_seeds_parse() {
    for (path, data) in corpus("config") {
        let text = std::str::from_utf8(&data).unwrap();
        let entries = parse_config(text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!entries.is_empty());
        assert!(entries.iter().all(|e| !e.key.is_empty() && !e.key.contains('_')));
    }
}

#[test]
fn truncated_seeds_are_rejected_without_panicking() {
    for target in ["tensor_file", "memory_bank"] {
        for (_, data) in corpus(target) {
            for cut in (0..data.len()).step_by(data.len() / 64 + 1) {
                let _ = TensorFile::from_bytes(&data[..cut]);
                assert!(MemoryBank::from_bytes(&data[..cut]).is_err() || cut == data.len());
            }
        }
    }
}
