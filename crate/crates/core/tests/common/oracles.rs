//! Independent reference computations shared by the focused tests and the acceptance run.

use cct::analysis::{LayerRow, SpreadRow, TimestepRow};
use cct::budget::{layer_costs, BudgetSpec, CostDims, CostModel};
use cct::model::CctModel;
use cct::tensor::{Graph, Var};
use cct::trace::{Component, GateSite, GateTrace, SeqMeta, Stack, Stream, SubnetKind};

use super::rel_err;

pub fn dims(d: usize, d_ff: usize, m: usize, enc: usize, dec: usize) -> CostDims {
    CostDims {
        d,
        d_ff,
        heads: 1,
        m,
        enc_layers: enc,
        dec_layers: dec,
        t_avg: 4.0,
        gate_hidden: 4,
        vocab: 16,
        cross_kv_component: Component::Decoder,
    }
}

pub fn seq(symbol: usize, src: usize, tgt: usize) -> SeqMeta {
    SeqMeta {
        symbol,
        src: (0..src).map(|i| 3 + i).collect(),
        tgt: (0..tgt).map(|i| 7 + i).collect(),
    }
}

/// Trace whose value at row r of the site with index k is `f(k, r)`.
pub fn trace_with(seqs: Vec<SeqMeta>, sites: &[GateSite], f: impl Fn(usize, usize) -> f64) -> GateTrace {
    let mut t = GateTrace::new(false, seqs);
    for (k, site) in sites.iter().enumerate() {
        let rows = t.rows(site.stream());
        t.insert(*site, (0..rows).map(|r| f(k, r)).collect()).unwrap();
    }
    t
}

// Costs written out longhand for d=4, d_ff=8, M=2: kv 64, ff slice 64,
// q 64 + 16 per attended key.
pub fn hand_cost(site: &GateSite, s: &SeqMeta, pos: usize) -> f64 {
    match site.kind {
        SubnetKind::SelfKv | SubnetKind::CrossKv | SubnetKind::Ff(_) => 64.0,
        SubnetKind::SelfQ if site.stack == Stack::Decoder => 64.0 + 16.0 * (pos + 1) as f64,
        SubnetKind::SelfQ | SubnetKind::CrossQ => 64.0 + 16.0 * s.src.len() as f64,
    }
}

pub fn hand_component(site: &GateSite) -> Component {
    match site.stack {
        Stack::Encoder => Component::Encoder,
        Stack::Decoder => Component::Decoder,
    }
}

/// Sum over symbols and components of `|p·available − utilized| / (p·available)`, walking
/// every row of a `trace_with` trace with the longhand costs.
pub fn hand_multi_budget(seqs: &[SeqMeta], sites: &[GateSite], value: impl Fn(usize, usize) -> f64, spec: &BudgetSpec) -> f64 {
    let mut total = 0.0;
    for symbol in 0..spec.len() {
        for (j, comp) in [Component::Encoder, Component::Decoder].into_iter().enumerate() {
            let (mut avail, mut util) = (0.0, 0.0);
            for (k, site) in sites.iter().enumerate() {
                if hand_component(site) != comp {
                    continue;
                }
                let mut row = 0;
                for s in seqs {
                    let len = match site.stream() {
                        Stream::Source => s.src.len(),
                        Stream::Target => s.tgt.len(),
                    };
                    for pos in 0..len {
                        if s.symbol == symbol {
                            let c = hand_cost(site, s, pos);
                            avail += c;
                            util += value(k, row) * c;
                        }
                        row += 1;
                    }
                }
            }
            if avail > 0.0 {
                let p = spec.budgets[symbol][j];
                total += (p * avail - util).abs() / (p * avail);
            }
        }
    }
    total
}

/// Central differences of `loss` over every scalar of every parameter, compared per
/// parameter tensor against the tape gradient. Returns the worst tensor and its error.
pub fn check_all_params(model: &CctModel, loss: &dyn Fn(&CctModel, &mut Graph) -> Var) -> (String, f64) {
    let mut g = Graph::new();
    let l = loss(model, &mut g);
    g.backward(l).unwrap();
    let analytic = g.param_grads(&model.store);
    let eval = |m: &CctModel| {
        let mut g = Graph::new();
        let l = loss(m, &mut g);
        g.value(l).item()
    };
    let mut probe = model.clone();
    let h = 1e-5;
    let mut worst = (String::new(), 0.0);
    let ids: Vec<_> = model.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = model.store.get(id).numel();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let x = model.store.get(id).data()[j];
            probe.store.get_mut(id).data_mut()[j] = x + h;
            let plus = eval(&probe);
            probe.store.get_mut(id).data_mut()[j] = x - h;
            let minus = eval(&probe);
            probe.store.get_mut(id).data_mut()[j] = x;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let err = rel_err(analytic[k].data(), &numeric);
        if err > worst.1 {
            worst = (model.store.name(id).to_string(), err);
        }
    }
    worst
}

// Two sequences through a 1-encoder, 2-decoder layer model with M = 2 and d = 4, d_ff = 8:
// every kv and ff branch costs 64 flops per token, a q branch 64 + 16 per attended key.
pub fn hand_trace_costs() -> CostModel {
    layer_costs(&dims(4, 8, 2, 1, 2)).unwrap()
}

pub fn hand_trace() -> GateTrace {
    use Stack::{Decoder as Dec, Encoder as Enc};
    use SubnetKind::{CrossKv, CrossQ, Ff, SelfKv, SelfQ};
    let site = GateSite::new;
    let seqs = vec![
        SeqMeta {
            symbol: 0,
            src: vec![1, 5, 2],
            tgt: vec![1, 6],
        },
        SeqMeta {
            symbol: 1,
            src: vec![1, 5],
            tgt: vec![1, 7, 8],
        },
    ];
    let mut t = GateTrace::new(true, seqs);
    let rows: [(GateSite, [f64; 5]); 16] = [
        (site(Enc, 0, SelfKv), [1., 0., 1., 1., 1.]),
        (site(Enc, 0, SelfQ), [1., 1., 0., 0., 1.]),
        (site(Enc, 0, Ff(0)), [1., 0., 0., 1., 1.]),
        (site(Enc, 0, Ff(1)), [0., 0., 1., 1., 0.]),
        (site(Dec, 0, SelfKv), [1., 1., 1., 0., 1.]),
        (site(Dec, 0, SelfQ), [0., 1., 0., 1., 1.]),
        (site(Dec, 0, CrossKv), [1., 1., 0., 1., 0.]),
        (site(Dec, 0, CrossQ), [1., 1., 1., 0., 1.]),
        (site(Dec, 0, Ff(0)), [1., 0., 1., 1., 0.]),
        (site(Dec, 0, Ff(1)), [0., 0., 1., 0., 0.]),
        (site(Dec, 1, SelfKv), [1., 0., 1., 1., 1.]),
        (site(Dec, 1, SelfQ), [1., 1., 0., 0., 1.]),
        (site(Dec, 1, CrossKv), [0., 1., 1., 1., 1.]),
        (site(Dec, 1, CrossQ), [0., 1., 1., 1., 1.]),
        (site(Dec, 1, Ff(0)), [1., 1., 0., 1., 1.]),
        (site(Dec, 1, Ff(1)), [1., 0., 0., 1., 0.]),
    ];
    for (s, v) in rows {
        t.insert(s, v.to_vec()).unwrap();
    }
    t
}

fn spread(symbol: usize, bins: &[(usize, usize)], total: usize) -> Vec<SpreadRow> {
    (0..20)
        .map(|b| {
            let tokens = bins.iter().find(|(k, _)| *k == b).map_or(0, |x| x.1);
            SpreadRow {
                symbol,
                component: Component::Encoder,
                bin: b,
                lo: b as f64 / 20.0,
                hi: (b + 1) as f64 / 20.0,
                tokens,
                mass: tokens as f64 / total as f64,
            }
        })
        .collect()
}

/// Encoder spread over 20 bins. Encoder flops per source token: sequence 0 has 304
/// available (q attends 3 keys), sequence 1 has 288. Executed: 240, 112, 128 and 192,
/// 224. Fractions 0.789, 0.368, 0.421 and 0.667, 0.778 land in bins 15, 7, 8 and 13, 15.
pub fn hand_spread() -> Vec<SpreadRow> {
    let mut rows = spread(0, &[(7, 1), (8, 1), (15, 1)], 3);
    rows.extend(spread(1, &[(13, 1), (15, 1)], 2));
    rows
}

pub fn hand_layer_rows() -> Vec<LayerRow> {
    use Stack::{Decoder as Dec, Encoder as Enc};
    let row = |stack, layer, subnet: &str, tokens, fraction| LayerRow {
        stack,
        layer,
        subnet: subnet.to_string(),
        tokens,
        fraction,
    };
    vec![
        row(Enc, 0, "self-kv", 5, 0.8),
        row(Enc, 0, "self-q", 5, 0.6),
        row(Enc, 0, "ff", 5, 0.5),
        row(Dec, 0, "self-kv", 5, 0.8),
        row(Dec, 0, "self-q", 5, 0.6),
        row(Dec, 0, "cross-kv", 5, 0.6),
        row(Dec, 0, "cross-q", 5, 0.8),
        row(Dec, 0, "ff", 5, 0.4),
        row(Dec, 1, "self-kv", 5, 0.8),
        row(Dec, 1, "self-q", 5, 0.6),
        row(Dec, 1, "cross-kv", 5, 0.8),
        row(Dec, 1, "cross-q", 5, 0.8),
        row(Dec, 1, "ff", 5, 0.6),
    ]
}

/// Per-step means of the decoder q gates, overall and per layer.
pub fn hand_timestep_rows() -> Vec<TimestepRow> {
    let row = |step, layer, sequences, self_q, cross_q| TimestepRow {
        step,
        layer,
        sequences,
        self_q,
        cross_q,
    };
    vec![
        row(0, None, 2, 0.25, 0.75),
        row(0, Some(0), 2, 0.0, 1.0),
        row(0, Some(1), 2, 0.5, 0.5),
        row(1, None, 2, 0.75, 0.75),
        row(1, Some(0), 2, 1.0, 0.5),
        row(1, Some(1), 2, 0.5, 1.0),
        row(2, None, 1, 1.0, 1.0),
        row(2, Some(0), 1, 1.0, 1.0),
        row(2, Some(1), 1, 1.0, 1.0),
    ]
}

/// Corpus for the frequency analysis: token 1 ×4, 5 ×3, 2 ×2.
pub fn hand_corpus() -> Vec<Vec<usize>> {
    vec![vec![1, 1, 5, 2], vec![1, 5, 2, 1, 5]]
}

/// `(rank, token, frequency, occurrences, mean fraction)` on the source stream. Source
/// tokens also carry both cross-kv gates (64 flops each), so sequence 0 has 432 available
/// per token and sequence 1 has 416.
pub fn hand_freq_rows() -> Vec<(usize, usize, f64, usize, f64)> {
    vec![
        (1, 1, 4.0 / 9.0, 2, (304.0 / 432.0 + 320.0 / 416.0) / 2.0),
        (2, 5, 3.0 / 9.0, 2, (240.0 / 432.0 + 288.0 / 416.0) / 2.0),
        (3, 2, 2.0 / 9.0, 1, 192.0 / 432.0),
    ]
}
