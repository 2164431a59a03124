#![no_main]

use dstl_core::encoder::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((cfg, params)) = checkpoint::decode(data) {
        let again = checkpoint::encode(&cfg, &params).expect("decoded checkpoints re-encode");
        let (cfg2, params2) = checkpoint::decode(&again).expect("re-encoded checkpoints decode");
        assert_eq!(cfg, cfg2);
        assert_eq!(params.digest(), params2.digest());
    }
});
