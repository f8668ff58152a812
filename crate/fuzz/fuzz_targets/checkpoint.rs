#![no_main]

use cct::model::{decode_checkpoint, ModelConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        // Pinning the expected config keeps a hostile header from sizing a huge model.
        let tiny = ModelConfig {
            d: 8,
            d_ff: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            gate_hidden: 4,
            vocab: 16,
            max_len: 8,
            ..ModelConfig::default()
        };
        let _ = ck.into_model(Some(&tiny));
    }
});
