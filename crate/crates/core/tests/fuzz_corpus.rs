//! Runs the fuzz target bodies over the checked-in corpus and over random
//! mutations of it, so decoder regressions show up without a nightly toolchain.

use std::path::{Path, PathBuf};

use groundlab::data::{load_dataset, Manifest};
use groundlab::io::{decode_pgm, decode_tensor, encode_pgm, encode_tensor, write_tensor, Tensor};
use groundlab::model::{load_checkpoint, load_lora, sidecar_path};
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut seeds: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| std::fs::read(e.unwrap().path()).unwrap())
        .collect();
    seeds.sort();
    assert!(!seeds.is_empty(), "no seeds in {}", dir.display());
    seeds
}

fn tensor_body(data: &[u8]) -> bool {
    match decode_tensor(data) {
        Ok(t) => {
            assert_eq!(encode_tensor(&t), data);
            true
        }
        Err(_) => false,
    }
}

fn pgm_body(data: &[u8]) -> bool {
    match decode_pgm(data) {
        Ok(img) => {
            assert_eq!(img.data.len(), img.width * img.height);
            assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
            true
        }
        Err(_) => false,
    }
}

fn manifest_body(data: &[u8]) -> bool {
    let Ok(manifest) = serde_json::from_slice::<Manifest>(data) else {
        return false;
    };
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), serde_json::to_vec(&manifest).unwrap()).unwrap();
    let _ = load_dataset(dir.path());
    true
}

fn sidecar_body(dir: &Path, data: &[u8]) -> bool {
    let ckpt = dir.join("ckpt.s4dt");
    std::fs::write(sidecar_path(&ckpt), data).unwrap();
    let full = load_checkpoint::<f64>(&ckpt)
        .inspect(|s| assert!(s.config.validate().is_ok()))
        .is_ok();
    full | load_lora::<f32>(&ckpt).is_ok()
}

fn payload_dir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    let values = (0..4096).map(|i| (i % 17) as f32 * 0.01).collect();
    write_tensor(&Tensor::f32(&[4096], values).unwrap(), &d.path().join("ckpt.s4dt")).unwrap();
    d
}

#[test]
fn corpus_seeds_are_accepted() {
    for seed in corpus("s4dt_decode") {
        assert!(tensor_body(&seed));
    }
    for seed in corpus("pgm_decode") {
        assert!(pgm_body(&seed));
    }
    for seed in corpus("dataset_manifest") {
        assert!(manifest_body(&seed));
    }
    let dir = payload_dir();
    for seed in corpus("checkpoint_sidecar") {
        assert!(sidecar_body(dir.path(), &seed));
    }
}

fn mutated(seeds: Vec<Vec<u8>>) -> impl Strategy<Value = Vec<u8>> {
    (
        0..seeds.len(),
        prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 0..6),
        any::<prop::sample::Index>(),
    )
        .prop_map(move |(i, edits, cut)| {
            let mut s = seeds[i].clone();
            for (at, byte) in edits {
                if !s.is_empty() {
                    let k = at.index(s.len());
                    s[k] = byte;
                }
            }
            let keep = cut.index(s.len() + 1);
            if keep < s.len() && keep % 3 == 0 {
                s.truncate(keep);
            }
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mutated_tensors_never_panic(data in mutated(corpus("s4dt_decode"))) {
        tensor_body(&data);
    }

    #[test]
    fn mutated_pgms_never_panic(data in mutated(corpus("pgm_decode"))) {
        pgm_body(&data);
    }

    #[test]
    fn mutated_manifests_never_panic(data in mutated(corpus("dataset_manifest"))) {
        manifest_body(&data);
    }

    #[test]
    fn mutated_sidecars_never_panic(data in mutated(corpus("checkpoint_sidecar"))) {
        let dir = payload_dir();
        sidecar_body(dir.path(), &data);
    }
}
