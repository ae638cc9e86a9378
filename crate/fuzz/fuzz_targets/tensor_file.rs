#![no_main]

use asmem::tensorstore::TensorFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = TensorFile::from_bytes(data) {
        // the encoding is canonical: anything accepted re-encodes to the same bytes
        let again = file.to_bytes().expect("accepted file re-encodes");
        assert_eq!(again, data);
    }
});
