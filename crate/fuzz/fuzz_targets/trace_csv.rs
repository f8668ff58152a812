#![no_main]

use cct::analysis::{layer_activation_fractions, RecordedCosts};
use cct::trace::{read_trace_csv, Component};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tf) = read_trace_csv(data) {
        let _ = layer_activation_fractions(&tf.trace);
        let costs = RecordedCosts {
            costs: &tf.costs,
            cross_kv_component: Component::Decoder,
        };
        let _ = cct::analysis::compute_spread(&tf.trace, &costs, Component::Encoder, 20);
    }
});
