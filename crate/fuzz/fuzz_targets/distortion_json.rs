#![no_main]

use dstl_core::distortions::{self, DistortionKind, DistortionSpec};
use dstl_core::Image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = serde_json::from_slice::<DistortionSpec>(data) else {
        return;
    };
    if spec.kind == DistortionKind::Blur && spec.kernel_size > 65 {
        return;
    }
    let img = Image::filled(8, 8, 3, 0.5);
    match distortions::apply(&spec, &img, 0) {
        Ok(out) => {
            assert!(spec.validate().is_ok());
            assert!(out.same_shape(&img));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        Err(_) => assert!(spec.validate().is_err()),
    }
});
