#![no_main]

use cct::data::{parse_corpus, token_frequencies};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(pairs) = parse_corpus(text) {
            let _ = token_frequencies(pairs.iter().map(|(s, _)| s.as_slice()));
        }
    }
});
