mod common;

use cct::analysis::{
    attention_usage_by_timestep, compute_spread, freq_vs_compute, layer_activation_fractions, spearman,
    spread_masses_ok, RecordedCosts,
};
use cct::budget::CostModel;
use cct::data::token_frequencies;
use cct::trace::{read_trace_csv, write_trace_csv, Component, GateTrace, Stream};
use common::oracles::{
    hand_corpus, hand_freq_rows, hand_layer_rows, hand_spread, hand_timestep_rows, hand_trace, hand_trace_costs,
};
use cct::CctError;
use proptest::prelude::*;

fn costs() -> CostModel {
    hand_trace_costs()
}

fn fabricated() -> GateTrace {
    hand_trace()
}

#[test]
fn compute_spread_matches_hand_histogram() {
    let r = compute_spread(&fabricated(), &costs(), Component::Encoder, 20).unwrap();
    assert_eq!(r.rows, hand_spread());
    assert!(spread_masses_ok(&r, 1e-9));
}

#[test]
fn layer_activation_matches_hand_counts() {
    let r = layer_activation_fractions(&fabricated()).unwrap();
    assert_eq!(r.rows, hand_layer_rows());
}

#[test]
fn attention_usage_matches_hand_means() {
    let r = attention_usage_by_timestep(&fabricated(), true).unwrap();
    assert_eq!(r.rows, hand_timestep_rows());
    let means = attention_usage_by_timestep(&fabricated(), false).unwrap();
    assert_eq!(means.rows.len(), 3);
}

#[test]
fn freq_vs_compute_matches_hand_means() {
    let corpus = hand_corpus();
    let freqs = token_frequencies(corpus.iter().map(Vec::as_slice)).unwrap();
    let r = freq_vs_compute(&fabricated(), &costs(), &freqs, Stream::Source).unwrap();
    let got: Vec<(usize, usize, f64, usize, f64)> =
        r.rows.iter().map(|x| (x.rank, x.token, x.frequency, x.occurrences, x.mean_fraction)).collect();
    assert_eq!(got, hand_freq_rows());
    assert_eq!(r.meta.extra["spearman"], -1.0);

    let partial = token_frequencies([[1usize, 5].as_slice()]).unwrap();
    assert!(matches!(
        freq_vs_compute(&fabricated(), &costs(), &partial, Stream::Source),
        Err(CctError::Contract(_))
    ));
}

fn uniform_trace(value: f64) -> GateTrace {
    let mut t = fabricated();
    for v in t.sites.values_mut() {
        v.iter_mut().for_each(|x| *x = value);
    }
    t
}

#[test]
fn trivial_traces() {
    for (value, bin) in [(1.0, 19), (0.0, 0)] {
        let r = compute_spread(&uniform_trace(value), &costs(), Component::Decoder, 20).unwrap();
        for row in &r.rows {
            assert_eq!(row.mass, if row.bin == bin { 1.0 } else { 0.0 });
        }
        let l = layer_activation_fractions(&uniform_trace(value)).unwrap();
        assert!(l.rows.iter().all(|x| x.fraction == value));
        let a = attention_usage_by_timestep(&uniform_trace(value), false).unwrap();
        assert!(a.rows.iter().all(|x| x.self_q == value && x.cross_q == value));
    }
    let empty = GateTrace::new(true, Vec::new());
    assert!(matches!(compute_spread(&empty, &costs(), Component::Encoder, 20), Err(CctError::Contract(_))));
    assert!(matches!(compute_spread(&fabricated(), &costs(), Component::Encoder, 0), Err(CctError::Contract(_))));

    let single = token_frequencies([[1usize, 5, 2].as_slice()]).unwrap();
    let mut one_token = fabricated();
    for s in &mut one_token.seqs {
        s.src.iter_mut().for_each(|t| *t = 5);
    }
    let r = freq_vs_compute(&one_token, &costs(), &single, Stream::Source).unwrap();
    assert_eq!(r.rows.len(), 1);
}

#[test]
fn trace_file_pipeline_is_byte_deterministic() {
    let trace = fabricated();
    let c = costs();
    let mut csv = Vec::new();
    write_trace_csv(&mut csv, &trace, |e, m| c.token_cost(&e.site, m, e.pos)).unwrap();
    let run = || {
        let tf = read_trace_csv(csv.as_slice()).unwrap();
        let recorded = RecordedCosts {
            costs: &tf.costs,
            cross_kv_component: Component::Decoder,
        };
        let r = compute_spread(&tf.trace, &recorded, Component::Encoder, 20).unwrap();
        (r.to_csv().unwrap(), r.meta_json().unwrap(), r.rows)
    };
    let (csv_a, json_a, rows) = run();
    let (csv_b, json_b, _) = run();
    assert_eq!(csv_a, csv_b);
    assert_eq!(json_a, json_b);
    // Costs read back from the file reproduce the cost-model histogram.
    assert_eq!(rows, compute_spread(&trace, &c, Component::Encoder, 20).unwrap().rows);
    assert!(csv_a.starts_with("symbol,component,bin,lo,hi,tokens,mass\n"));
}

/// Textbook Spearman for samples without ties: `1 − 6 Σ d² / (n (n² − 1))`.
fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

proptest! {
    #[test]
    fn spearman_matches_the_textbook_formula(perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(), n in 3usize..12) {
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 1.5 + 0.25).collect();
        let y: Vec<f64> = perm.iter().take(n).map(|&p| (p as f64).sqrt()).collect();
        let got = spearman(&x, &y).unwrap();
        prop_assert!((got - spearman_no_ties(&x, &y)).abs() < 1e-12);
    }
}
