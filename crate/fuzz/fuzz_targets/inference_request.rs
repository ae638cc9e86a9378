#![no_main]

use asmem::inference::InferenceRequest;
use asmem::tensorstore::TensorFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(file) = TensorFile::from_bytes(data) else { return };
    if let Ok(req) = InferenceRequest::from_tensor_file(&file) {
        let bytes = req.to_tensor_file().unwrap().to_bytes().unwrap();
        let back = InferenceRequest::from_tensor_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, req);
    }
});
