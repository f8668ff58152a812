use std::fs;
use std::path::PathBuf;

use cct::config::ExperimentConfig;
use cct::data::parse_corpus;
use cct::model::{decode_checkpoint, ModelConfig};
use cct::trace::read_trace_csv;

fn seed(target: &str, name: &str) -> Vec<u8> {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "fuzz", "corpus", target, name].iter().collect();
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn text(target: &str, name: &str) -> String {
    String::from_utf8(seed(target, name)).unwrap()
}

#[test]
fn checkpoint_seeds() {
    // Same pinned config as the fuzz target.
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
    let ck = decode_checkpoint(&seed("checkpoint", "tiny.cct")).unwrap();
    ck.into_model(Some(&tiny)).unwrap();
    assert!(decode_checkpoint(&seed("checkpoint", "truncated.cct")).is_err());
}

#[test]
fn trace_seeds() {
    let tf = read_trace_csv(&seed("trace_csv", "decode.csv")[..]).unwrap();
    assert_eq!(tf.trace.seqs.len(), 3);
    assert!(tf.trace.binary && !tf.trace.sites.is_empty());
    read_trace_csv(&seed("trace_csv", "short.csv")[..]).unwrap();
    assert!(read_trace_csv(&seed("trace_csv", "bad_kind.csv")[..]).is_err());
}

#[test]
fn config_seeds() {
    for (ok, symbols) in [("empty.json", 36), ("tiny.json", 4), ("mlm.json", 6)] {
        let cfg = ExperimentConfig::from_json(&text("config_json", ok)).unwrap_or_else(|e| panic!("{ok}: {e}"));
        assert_eq!(cfg.budgets().len(), symbols, "{ok}");
    }
    assert!(ExperimentConfig::from_json(&text("config_json", "bad_lambda.json")).is_err());
}

#[test]
fn corpus_seeds() {
    assert_eq!(parse_corpus(&text("corpus", "pairs.txt")).unwrap().len(), 2);
    assert_eq!(parse_corpus(&text("corpus", "src_only.txt")).unwrap().len(), 2);
    assert!(parse_corpus(&text("corpus", "bad_token.txt")).is_err());
}
