// cargo fuzz run dataset_manifest corpus/dataset_manifest

#![no_main]

use groundlab::data::{load_dataset, Manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(manifest) = serde_json::from_slice::<Manifest>(data) else {
        return;
    };
    // sample files are absent, so loading must fail cleanly after validation
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), serde_json::to_vec(&manifest).unwrap()).unwrap();
    let _ = load_dataset(dir.path());
});
