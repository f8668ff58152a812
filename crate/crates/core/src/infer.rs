//! Discrete-mode execution that skips disabled branches.
//!
//! Only rows whose gate is on are gathered and pushed through a branch; everything uses
//! the same row-independent kernels as the tape, so outputs are bit-identical to a dense
//! infer-mode forward that computes every branch and multiplies by the binary gate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};
use crate::gate::{is_active, ControlNetwork, GateForcing, TokenRef};
use crate::layers::{ConditionalAttentionLayer, ConditionalFFLayer, LayerNormParams, StreamLayout};
use crate::model::{CctModel, ModelKind, BOS, EOS};
use crate::tensor::{kernels, AttentionSpec, ParamId, ParamStore, Segment, Tensor};
use crate::trace::{Component, GateSite, GateTrace, SeqMeta, Stream};

/// Per-gate activation count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub active: u64,
    pub total: u64,
}

/// Flops actually executed versus flops available, per component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExecutionCounter {
    pub executed: BTreeMap<Component, f64>,
    pub available: BTreeMap<Component, f64>,
    pub tallies: BTreeMap<GateSite, Tally>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub component: Component,
    pub available: f64,
    pub executed: f64,
    pub fraction: f64,
}

/// JSON export of a counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterReport {
    pub components: Vec<ComponentCount>,
    pub available: f64,
    pub executed: f64,
    pub fraction: f64,
}

impl ExecutionCounter {
    pub fn record(&mut self, site: GateSite, component: Component, cost: f64, active: bool) {
        *self.available.entry(component).or_insert(0.0) += cost;
        let exec = self.executed.entry(component).or_insert(0.0);
        let t = self.tallies.entry(site).or_default();
        t.total += 1;
        if active {
            *exec += cost;
            t.active += 1;
        }
    }

    pub fn executed(&self, c: Component) -> f64 {
        self.executed.get(&c).copied().unwrap_or(0.0)
    }

    pub fn available(&self, c: Component) -> f64 {
        self.available.get(&c).copied().unwrap_or(0.0)
    }

    pub fn total_executed(&self) -> f64 {
        self.executed.values().sum()
    }

    pub fn total_available(&self) -> f64 {
        self.available.values().sum()
    }

    /// Realized compute fraction of a component (0 when nothing was available).
    pub fn fraction(&self, c: Component) -> f64 {
        let a = self.available(c);
        if a > 0.0 {
            self.executed(c) / a
        } else {
            0.0
        }
    }

    pub fn merge(&mut self, other: &ExecutionCounter) {
        for (c, v) in &other.executed {
            *self.executed.entry(*c).or_insert(0.0) += v;
        }
        for (c, v) in &other.available {
            *self.available.entry(*c).or_insert(0.0) += v;
        }
        for (s, t) in &other.tallies {
            let e = self.tallies.entry(*s).or_default();
            e.active += t.active;
            e.total += t.total;
        }
    }

    pub fn report(&self) -> CounterReport {
        let components = self
            .available
            .keys()
            .map(|&c| ComponentCount {
                component: c,
                available: self.available(c),
                executed: self.executed(c),
                fraction: self.fraction(c),
            })
            .collect();
        let (a, e) = (self.total_available(), self.total_executed());
        CounterReport {
            components,
            available: a,
            executed: e,
            fraction: if a > 0.0 { e / a } else { 0.0 },
        }
    }
}

fn gather(x: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

fn linear(store: &ParamStore, w: ParamId, x: &[f64], k: usize) -> Vec<f64> {
    let w = store.get(w);
    let n = w.cols();
    kernels::matmul(x, w.data(), x.len() / k, k, n)
}

fn ln(store: &ParamStore, p: &LayerNormParams, x: &[f64], d: usize) -> Vec<f64> {
    p.apply_values(store, x, d)
}

fn active_rows(flags: &[bool]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
}

/// Binary decisions of output `col` of a control network, with forcing applied.
fn decide(logits: &[f64], arity: usize, col: usize, site: &GateSite, refs: &[TokenRef], forcing: &GateForcing) -> Vec<bool> {
    refs.iter()
        .enumerate()
        .map(|(r, tok)| forcing.decide(site, *tok).unwrap_or_else(|| is_active(logits[r * arity + col])))
        .collect()
}

fn control_logits(net: &ControlNetwork, store: &ParamStore, x: &[f64], d: usize) -> Vec<f64> {
    net.logits_values(store, x, x.len() / d)
}

/// Key and value rows for the active rows of `y`; inactive rows stay zero.
fn kv_branch(layer: &ConditionalAttentionLayer, store: &ParamStore, y: &[f64], active: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let d = layer.d;
    let mut k = vec![0.0; y.len()];
    let mut v = vec![0.0; y.len()];
    let idx = active_rows(active);
    if idx.is_empty() {
        return (k, v);
    }
    let ya = gather(y, d, &idx);
    let ka = ln(store, &layer.ln_k, &linear(store, layer.wk, &ya, d), d);
    let va = ln(store, &layer.ln_v, &linear(store, layer.wv, &ya, d), d);
    for (i, &r) in idx.iter().enumerate() {
        k[r * d..(r + 1) * d].copy_from_slice(&ka[i * d..(i + 1) * d]);
        v[r * d..(r + 1) * d].copy_from_slice(&va[i * d..(i + 1) * d]);
    }
    (k, v)
}

/// Query/output branch for active rows of `x`, added into `x` in place. `keys[r]` is the
/// `(start, len)` key range row `r` may attend to; `key_mask` flags usable key rows.
#[allow(clippy::too_many_arguments)]
fn q_branch(
    layer: &ConditionalAttentionLayer,
    store: &ParamStore,
    x: &mut [f64],
    active: &[bool],
    keys: &[(usize, usize)],
    k: &[f64],
    v: &[f64],
    key_mask: &[bool],
) {
    let d = layer.d;
    let idx = active_rows(active);
    if idx.is_empty() {
        return;
    }
    let xa = gather(x, d, &idx);
    let q = linear(store, layer.wq, &ln(store, &layer.ln_pre, &xa, d), d);
    let spec = AttentionSpec {
        heads: layer.heads,
        segments: idx
            .iter()
            .enumerate()
            .map(|(i, &r)| Segment {
                q_start: i,
                q_len: 1,
                k_start: keys[r].0,
                k_len: keys[r].1,
            })
            .collect(),
        causal: false,
        key_mask: Some(key_mask.to_vec()),
    };
    let (ctx, _) = kernels::attention(&q, k, v, d, &spec);
    let o = linear(store, layer.wo, &ln(store, &layer.ln_post, &ctx, d), d);
    for (i, &r) in idx.iter().enumerate() {
        for (z, oo) in x[r * d..(r + 1) * d].iter_mut().zip(&o[i * d..(i + 1) * d]) {
            *z += oo;
        }
    }
}

/// Feed-forward slices for their active rows, added into `x` in slice order.
fn ff_branch(layer: &ConditionalFFLayer, store: &ParamStore, x: &mut [f64], active: &[Vec<bool>]) {
    let d = layer.d;
    let input = x.to_vec();
    for (split, flags) in layer.splits.iter().zip(active) {
        let idx = active_rows(flags);
        if idx.is_empty() {
            continue;
        }
        let xa = gather(&input, d, &idx);
        let mut h = linear(store, split.w1, &ln(store, &split.ln_in, &xa, d), d);
        let w = layer.split_width();
        let b = store.get(split.b1).data();
        for row in h.chunks_mut(w) {
            for (hv, bv) in row.iter_mut().zip(b) {
                *hv += bv;
            }
        }
        h.iter_mut().for_each(|v| *v = kernels::relu(*v));
        let o = ln(store, &split.ln_out, &linear(store, split.w2, &h, w), d);
        for (i, &r) in idx.iter().enumerate() {
            for (z, oo) in x[r * d..(r + 1) * d].iter_mut().zip(&o[i * d..(i + 1) * d]) {
                *z += oo;
            }
        }
    }
}

/// Shared bookkeeping of one discrete pass: gate decisions go to the counter and, per
/// site, to a packed value list.
struct Recorder<'a> {
    model: &'a CctModel,
    forcing: &'a GateForcing,
    counter: ExecutionCounter,
    sites: BTreeMap<GateSite, Vec<f64>>,
}

impl<'a> Recorder<'a> {
    fn record(&mut self, site: GateSite, flags: &[bool], refs: &[TokenRef], seqs: &[SeqMeta]) -> Result<()> {
        let component = self.model.costs.component(&site)?;
        let values = self.sites.entry(site).or_default();
        for (&a, r) in flags.iter().zip(refs) {
            let cost = self.model.costs.token_cost(&site, &seqs[r.seq], r.pos)?;
            self.counter.record(site, component, cost, a);
            values.push(if a { 1.0 } else { 0.0 });
        }
        Ok(())
    }

    fn ff_decisions(&mut self, layer: &ConditionalFFLayer, x: &[f64], refs: &[TokenRef], seqs: &[SeqMeta]) -> Result<Vec<Vec<bool>>> {
        let logits = control_logits(&layer.gate, &self.model.store, x, layer.d);
        let m = layer.splits.len();
        let mut out = Vec::with_capacity(m);
        for (i, site) in layer.sites.iter().enumerate() {
            let flags = decide(&logits, m, i, site, refs, self.forcing);
            self.record(*site, &flags, refs, seqs)?;
            out.push(flags);
        }
        Ok(out)
    }

    fn gate(&mut self, net: &ControlNetwork, site: GateSite, x: &[f64], refs: &[TokenRef], seqs: &[SeqMeta]) -> Result<Vec<bool>> {
        let logits = control_logits(net, &self.model.store, x, self.model.config.d);
        let flags = decide(&logits, 1, 0, &site, refs, self.forcing);
        self.record(site, &flags, refs, seqs)?;
        Ok(flags)
    }
}

/// Embedding rows `√d·E[token] + P[position] + S[symbol]`.
pub fn embed_values(model: &CctModel, seqs: &[Vec<usize>], symbols: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for (seq, &sym) in seqs.iter().zip(symbols) {
        for (pos, &t) in seq.iter().enumerate() {
            out.extend(embed_row(model, t, pos, sym));
        }
    }
    out
}

fn project_values(model: &CctModel, h: &[f64]) -> Vec<f64> {
    let d = model.config.d;
    let v = model.config.vocab;
    let rows = h.len() / d;
    match model.out_proj {
        Some(w) => kernels::matmul(h, model.store.get(w).data(), rows, d, v),
        None => {
            let mut out = vec![0.0; rows * v];
            kernels::gemm(rows, d, v, h, false, model.store.get(model.tok_emb).data(), true, &mut out, false);
            out
        }
    }
}

fn run_encoder(rec: &mut Recorder, src: &[Vec<usize>], symbols: &[usize], seqs: &[SeqMeta]) -> Result<Vec<f64>> {
    let model = rec.model;
    let store = &model.store;
    let layout = StreamLayout::new(src.iter().map(Vec::len).collect());
    let refs = layout.token_refs();
    let keys: Vec<(usize, usize)> = refs.iter().map(|r| (layout.offset(r.seq), layout.len(r.seq))).collect();
    let mut x = embed_values(model, src, symbols);
    for layer in &model.encoder {
        let a = &layer.attn;
        let kv = rec.gate(&a.kv_gate, a.kv_site, &x, &refs, seqs)?;
        let q = rec.gate(&a.q_gate, a.q_site, &x, &refs, seqs)?;
        let (k, v) = kv_branch(a, store, &x, &kv);
        q_branch(a, store, &mut x, &q, &keys, &k, &v, &kv);
        let ff = rec.ff_decisions(&layer.ff, &x, &refs, seqs)?;
        ff_branch(&layer.ff, store, &mut x, &ff);
    }
    Ok(ln(store, &model.enc_ln, &x, model.config.d))
}

/// Output of [`discrete_forward`].
#[derive(Clone, Debug)]
pub struct DiscreteOut {
    /// Logits over packed decoder inputs (seq2seq) or source rows (encoder-only).
    pub logits: Tensor,
    pub memory: Tensor,
    pub trace: GateTrace,
    pub counter: ExecutionCounter,
}

/// Inference-mode forward that evaluates every gate and runs only active branches.
pub fn discrete_forward(
    model: &CctModel,
    src: &[Vec<usize>],
    dec_in: Option<&[Vec<usize>]>,
    symbols: &[usize],
    forcing: &GateForcing,
) -> Result<DiscreteOut> {
    if symbols.len() != src.len() {
        return Err(CctError::contract(format!("{} source sequences but {} symbols", src.len(), symbols.len())));
    }
    model.check_stream("source", src)?;
    model.check_symbols(symbols)?;
    let tgt: Vec<Vec<usize>> = match (model.config.kind, dec_in) {
        (ModelKind::Seq2seq, Some(t)) => {
            if t.len() != src.len() {
                return Err(CctError::contract("source and target batch sizes differ"));
            }
            model.check_stream("target", t)?;
            t.to_vec()
        }
        (ModelKind::Mlm, None) => vec![Vec::new(); src.len()],
        _ => return Err(CctError::contract("decoder inputs must be given exactly for seq2seq models")),
    };
    let seqs: Vec<SeqMeta> = src
        .iter()
        .zip(&tgt)
        .zip(symbols)
        .map(|((s, t), &symbol)| SeqMeta {
            symbol,
            src: s.clone(),
            tgt: t.clone(),
        })
        .collect();
    let mut rec = Recorder {
        model,
        forcing,
        counter: ExecutionCounter::default(),
        sites: BTreeMap::new(),
    };
    let d = model.config.d;
    let store = &model.store;
    let memory = run_encoder(&mut rec, src, symbols, &seqs)?;
    let hidden = if model.config.kind == ModelKind::Seq2seq {
        let src_layout = StreamLayout::new(src.iter().map(Vec::len).collect());
        let src_refs = src_layout.token_refs();
        let layout = StreamLayout::new(tgt.iter().map(Vec::len).collect());
        let refs = layout.token_refs();
        let self_keys: Vec<(usize, usize)> = refs.iter().map(|r| (layout.offset(r.seq), r.pos + 1)).collect();
        let cross_keys: Vec<(usize, usize)> = refs
            .iter()
            .map(|r| (src_layout.offset(r.seq), src_layout.len(r.seq)))
            .collect();
        let mut x = embed_values(model, &tgt, symbols);
        for layer in &model.decoder {
            let a = &layer.self_attn;
            let kv = rec.gate(&a.kv_gate, a.kv_site, &x, &refs, &seqs)?;
            let q = rec.gate(&a.q_gate, a.q_site, &x, &refs, &seqs)?;
            let (k, v) = kv_branch(a, store, &x, &kv);
            q_branch(a, store, &mut x, &q, &self_keys, &k, &v, &kv);
            let c = &layer.cross_attn;
            let kv = rec.gate(&c.kv_gate, c.kv_site, &memory, &src_refs, &seqs)?;
            let q = rec.gate(&c.q_gate, c.q_site, &x, &refs, &seqs)?;
            let (k, v) = kv_branch(c, store, &memory, &kv);
            q_branch(c, store, &mut x, &q, &cross_keys, &k, &v, &kv);
            let ff = rec.ff_decisions(&layer.ff, &x, &refs, &seqs)?;
            ff_branch(&layer.ff, store, &mut x, &ff);
        }
        let dec_ln = model.dec_ln.as_ref().expect("seq2seq model has a decoder norm");
        ln(store, dec_ln, &x, d)
    } else {
        memory.clone()
    };
    let logits = project_values(model, &hidden);
    let mut trace = GateTrace::new(true, seqs);
    for (site, values) in rec.sites {
        trace.insert(site, values)?;
    }
    let rows = hidden.len() / d;
    Ok(DiscreteOut {
        logits: Tensor::new(vec![rows, model.config.vocab], logits)?,
        memory: Tensor::new(vec![memory.len() / d, d], memory)?,
        trace,
        counter: rec.counter,
    })
}

/// Keys and values cached for one attention layer while decoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub active: Vec<bool>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

/// Gate decisions taken while producing one output token.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Decoder position (0 reads bos).
    pub step: usize,
    pub input: usize,
    pub gates: BTreeMap<GateSite, bool>,
}

/// Incremental decoding state of one hypothesis.
#[derive(Clone)]
pub struct DecodeState<'m> {
    model: &'m CctModel,
    forcing: GateForcing,
    meta: SeqMeta,
    memory: Vec<f64>,
    cross: Vec<KvCache>,
    self_cache: Vec<KvCache>,
    source_sites: BTreeMap<GateSite, Vec<f64>>,
    pub records: Vec<StepRecord>,
    pub counter: ExecutionCounter,
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m CctModel, src: &[usize], symbol: usize) -> Result<Self> {
        Self::with_forcing(model, src, symbol, GateForcing::None)
    }

    /// Encodes `src` and computes the cross-attention caches; forced gates use token
    /// references with `seq = 0`.
    pub fn with_forcing(model: &'m CctModel, src: &[usize], symbol: usize, forcing: GateForcing) -> Result<Self> {
        if model.config.kind != ModelKind::Seq2seq {
            return Err(CctError::contract("decoding needs a seq2seq model"));
        }
        if src.is_empty() {
            return Err(CctError::contract("cannot decode an empty source"));
        }
        let src_v = vec![src.to_vec()];
        model.check_stream("source", &src_v)?;
        model.check_symbols(&[symbol])?;
        let meta = SeqMeta {
            symbol,
            src: src.to_vec(),
            tgt: Vec::new(),
        };
        let seqs = vec![meta.clone()];
        let mut rec = Recorder {
            model,
            forcing: &forcing,
            counter: ExecutionCounter::default(),
            sites: BTreeMap::new(),
        };
        let memory = run_encoder(&mut rec, &src_v, &[symbol], &seqs)?;
        let refs: Vec<TokenRef> = (0..src.len()).map(|pos| TokenRef { seq: 0, pos }).collect();
        let mut cross = Vec::with_capacity(model.decoder.len());
        for layer in &model.decoder {
            let c = &layer.cross_attn;
            let active = rec.gate(&c.kv_gate, c.kv_site, &memory, &refs, &seqs)?;
            let (k, v) = kv_branch(c, &model.store, &memory, &active);
            cross.push(KvCache { k, v, active });
        }
        let Recorder { counter, sites, .. } = rec;
        Ok(DecodeState {
            model,
            meta,
            memory,
            cross,
            self_cache: vec![KvCache::default(); model.decoder.len()],
            source_sites: sites,
            records: Vec::new(),
            counter,
            forcing,
        })
    }

    /// Decoder inputs consumed so far.
    pub fn prefix(&self) -> &[usize] {
        &self.meta.tgt
    }

    pub fn memory(&self) -> &[f64] {
        &self.memory
    }

    pub fn self_cache(&self) -> &[KvCache] {
        &self.self_cache
    }

    /// Feeds one decoder input token and returns the next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let model = self.model;
        let store = &model.store;
        let d = model.config.d;
        let pos = self.meta.tgt.len();
        if pos >= model.config.max_len {
            return Err(CctError::contract(format!("decoder position {pos} exceeds max_len {}", model.config.max_len)));
        }
        if token >= model.config.vocab {
            return Err(CctError::index(format!("token {token} outside vocabulary {}", model.config.vocab)));
        }
        self.meta.tgt.push(token);
        let seqs = [self.meta.clone()];
        let refs = [TokenRef { seq: 0, pos }];
        let mut rec = Recorder {
            model,
            forcing: &self.forcing,
            counter: ExecutionCounter::default(),
            sites: BTreeMap::new(),
        };
        let mut x = embed_row(model, token, pos, self.meta.symbol);
        let src_len = self.meta.src.len();
        for (l, layer) in model.decoder.iter().enumerate() {
            let a = &layer.self_attn;
            let kv = rec.gate(&a.kv_gate, a.kv_site, &x, &refs, &seqs)?;
            let (k, v) = kv_branch(a, store, &x, &kv);
            let cache = &mut self.self_cache[l];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            cache.active.push(kv[0]);
            let q = rec.gate(&a.q_gate, a.q_site, &x, &refs, &seqs)?;
            q_branch(a, store, &mut x, &q, &[(0, pos + 1)], &cache.k, &cache.v, &cache.active);
            let c = &layer.cross_attn;
            let q = rec.gate(&c.q_gate, c.q_site, &x, &refs, &seqs)?;
            let cc = &self.cross[l];
            q_branch(c, store, &mut x, &q, &[(0, src_len)], &cc.k, &cc.v, &cc.active);
            let ff = rec.ff_decisions(&layer.ff, &x, &refs, &seqs)?;
            ff_branch(&layer.ff, store, &mut x, &ff);
        }
        let dec_ln = model.dec_ln.as_ref().expect("seq2seq model has a decoder norm");
        let h = ln(store, dec_ln, &x, d);
        self.counter.merge(&rec.counter);
        self.records.push(StepRecord {
            step: pos,
            input: token,
            gates: rec.sites.iter().map(|(s, v)| (*s, v[0] == 1.0)).collect(),
        });
        Ok(project_values(model, &h))
    }

    /// Binary trace of everything decoded so far, with the decoder inputs as the target
    /// stream.
    pub fn trace(&self) -> Result<GateTrace> {
        let mut trace = GateTrace::new(true, vec![self.meta.clone()]);
        for (site, v) in &self.source_sites {
            trace.insert(*site, v.clone())?;
        }
        let mut target: BTreeMap<GateSite, Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            for (site, &a) in &r.gates {
                target.entry(*site).or_default().push(if a { 1.0 } else { 0.0 });
            }
        }
        for (site, v) in target {
            debug_assert_eq!(site.stream(), Stream::Target);
            trace.insert(site, v)?;
        }
        Ok(trace)
    }
}

fn embed_row(model: &CctModel, token: usize, pos: usize, symbol: usize) -> Vec<f64> {
    let d = model.config.d;
    let scale = (d as f64).sqrt();
    let e = model.store.get(model.tok_emb).row(token);
    let p = model.store.get(model.pos_emb).row(pos);
    let s = model.store.get(model.symbols.embeddings).row(symbol);
    (0..d).map(|j| (e[j] * scale + p[j]) + s[j]).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A finished decoding.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Emitted tokens, ending with eos unless `max_len` was reached first.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of the emitted tokens.
    pub log_prob: f64,
    pub records: Vec<StepRecord>,
    pub counter: ExecutionCounter,
    pub trace: GateTrace,
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(CctError::contract("max_len must be >= 1"));
    }
    Ok(())
}

/// Argmax decoding from bos until eos or `max_len` emitted tokens.
pub fn greedy_decode(model: &CctModel, src: &[usize], symbol: usize, max_len: usize) -> Result<DecodeOutput> {
    check_max_len(max_len)?;
    let max_len = max_len.min(model.config.max_len);
    let mut state = DecodeState::new(model, src, symbol)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut input = BOS;
    while tokens.len() < max_len {
        let lp = log_softmax(&state.step(input)?);
        let next = argmax(&lp);
        log_prob += lp[next];
        tokens.push(next);
        if next == EOS {
            break;
        }
        input = next;
    }
    Ok(DecodeOutput {
        tokens,
        log_prob,
        records: state.records.clone(),
        counter: state.counter.clone(),
        trace: state.trace()?,
    })
}

/// Result of [`beam_decode`].
#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / len^length_penalty`.
    pub score: f64,
}

pub fn normalized_score(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(length_penalty)
}

/// Length-normalized beam search. The greedy hypothesis is always among the candidates,
/// so the returned score is never below greedy's under the same scoring.
pub fn beam_decode(
    model: &CctModel,
    src: &[usize],
    symbol: usize,
    beam_width: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<BeamOutput> {
    if beam_width == 0 {
        return Err(CctError::contract("beam width must be >= 1"));
    }
    check_max_len(max_len)?;
    let max_len = max_len.min(model.config.max_len);
    struct Hyp<'m> {
        state: DecodeState<'m>,
        tokens: Vec<usize>,
        log_prob: f64,
        logits: Vec<f64>,
    }
    let mut state = DecodeState::new(model, src, symbol)?;
    let logits = state.step(BOS)?;
    let mut alive = vec![Hyp {
        state,
        tokens: Vec::new(),
        log_prob: 0.0,
        logits,
    }];
    let mut finished: Vec<BeamOutput> = Vec::new();
    while !alive.is_empty() && finished.len() < beam_width {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            let lp = log_softmax(&hyp.logits);
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &t in order.iter().take(beam_width) {
                cands.push((hyp.log_prob + lp[t], h, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(lp, h, t) in cands.iter().take(beam_width) {
            let mut tokens = alive[h].tokens.clone();
            tokens.push(t);
            if t == EOS || tokens.len() >= max_len {
                finished.push(BeamOutput {
                    score: normalized_score(lp, tokens.len(), length_penalty),
                    tokens,
                    log_prob: lp,
                });
                continue;
            }
            let mut state = alive[h].state.clone();
            let logits = state.step(t)?;
            next.push(Hyp {
                state,
                tokens,
                log_prob: lp,
                logits,
            });
        }
        alive = next;
    }
    let greedy = greedy_decode(model, src, symbol, max_len)?;
    finished.push(BeamOutput {
        score: normalized_score(greedy.log_prob, greedy.tokens.len(), length_penalty),
        tokens: greedy.tokens,
        log_prob: greedy.log_prob,
    });
    let mut best = 0;
    for (i, f) in finished.iter().enumerate() {
        if f.score > finished[best].score {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}
