#![no_main]

use asmem::memory_bank::MemoryBank;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(bank) = MemoryBank::from_bytes(data) {
        let bytes = bank.to_bytes().expect("loaded bank serializes");
        assert_eq!(MemoryBank::from_bytes(&bytes).unwrap(), bank);
    }
});
