#![no_main]

use dstl_core::data;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    match data::parse_cifar_binary(bytes) {
        Ok(items) => {
            assert_eq!(items.len() * data::CIFAR_RECORD, bytes.len());
            assert_eq!(data::encode_cifar_binary(&items).unwrap(), bytes);
        }
        Err(_) => assert!(
            bytes.len() % data::CIFAR_RECORD != 0
                || bytes.chunks(data::CIFAR_RECORD).any(|r| r[0] as usize >= data::CIFAR_CLASSES)
        ),
    }
});
