#![no_main]

use asmem::tensorstore::{TensorFile, TraceSet};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(file) = TensorFile::from_bytes(data) else { return };
    if let Ok(traces) = TraceSet::from_tensor_file(&file) {
        let bytes = traces.to_tensor_file().unwrap().to_bytes().unwrap();
        let back = TraceSet::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, traces);
    }
});
