#![no_main]

use dstl_core::encoder::ViTConfig;
use dstl_core::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tc) = serde_json::from_slice::<TrainConfig>(data) {
        let _ = tc.validate();
        let _ = tc.epochs_for(1000);
    }
    if let Ok(cfg) = serde_json::from_slice::<ViTConfig>(data) {
        if cfg.validate().is_ok() {
            assert_eq!(cfg.grid() * cfg.grid(), cfg.num_patches());
            assert_eq!(cfg.head_dim() * cfg.heads, cfg.dim);
        }
    }
});
