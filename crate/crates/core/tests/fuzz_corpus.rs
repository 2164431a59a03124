//! Replays the checked-in fuzz corpus seeds: every seed must decode.

use std::path::PathBuf;

use dstl_core::distortions::DistortionSpec;
use dstl_core::encoder::{checkpoint, ViTConfig};
use dstl_core::trainer::TrainConfig;
use dstl_core::{data, evaluation};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let b = std::fs::read(&p).unwrap();
            (p, b)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds_decode() {
    for (p, b) in seeds("checkpoint_decode") {
        let (cfg, params) = checkpoint::decode(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(checkpoint::encode(&cfg, &params).unwrap(), b);
    }
}

#[test]
fn cifar_seeds_parse() {
    for (p, b) in seeds("cifar_parse") {
        let items = data::parse_cifar_binary(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(items.len() * data::CIFAR_RECORD, b.len());
    }
}

#[test]
fn pgm_seeds_parse() {
    for (p, b) in seeds("pgm_parse") {
        let pgm = evaluation::parse_pgm(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(pgm.pixels.len(), pgm.width * pgm.height);
    }
}

#[test]
fn json_seeds_parse() {
    for (p, b) in seeds("distortion_json") {
        let s: DistortionSpec = serde_json::from_slice(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        s.validate().unwrap();
    }
    let cfg = seeds("config_json");
    let model = cfg.iter().filter_map(|(_, b)| serde_json::from_slice::<ViTConfig>(b).ok()).count();
    let train = cfg.iter().filter_map(|(_, b)| serde_json::from_slice::<TrainConfig>(b).ok()).count();
    assert!(model >= 1 && train >= 1);
}
