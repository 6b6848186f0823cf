// Input: a checkpoint or LoRA sidecar. The payload tensor is fixed; the
// sidecar decides how it is sliced.

#![no_main]

use std::sync::OnceLock;

use groundlab::io::{write_tensor, Tensor};
use groundlab::model::{load_checkpoint, load_lora, sidecar_path};
use libfuzzer_sys::fuzz_target;
use tempfile::TempDir;

const PAYLOAD_LEN: usize = 4096;

fn dir() -> &'static TempDir {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let values = (0..PAYLOAD_LEN).map(|i| (i % 17) as f32 * 0.01).collect();
        write_tensor(
            &Tensor::f32(&[PAYLOAD_LEN], values).unwrap(),
            &d.path().join("ckpt.s4dt"),
        )
        .unwrap();
        d
    })
}

fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 16 {
        return;
    }
    let ckpt = dir().path().join("ckpt.s4dt");
    std::fs::write(sidecar_path(&ckpt), data).unwrap();
    if let Ok(state) = load_checkpoint::<f64>(&ckpt) {
        assert!(state.config.validate().is_ok());
    }
    let _ = load_lora::<f32>(&ckpt);
});
