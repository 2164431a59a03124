#![no_main]

use dstl_core::evaluation;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = evaluation::parse_pgm(data) {
        assert_eq!(p.pixels.len(), p.width * p.height);
        if p.maxval == 255 {
            let again = evaluation::encode_pgm(p.width, p.height, &p.pixels).unwrap();
            assert_eq!(evaluation::parse_pgm(&again).unwrap(), p);
        }
    }
});
