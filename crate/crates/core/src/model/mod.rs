//! Encoder-decoder and encoder-only CCT models and their training losses.

mod checkpoint;
pub mod reference;

pub use checkpoint::{checkpoint_id, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};

use std::collections::BTreeMap;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::budget::{layer_costs, multi_budget_loss_var, BudgetSpec, BudgetTerm, CostDims, CostModel};
use crate::error::{CctError, Result};
use crate::gate::{CctRng, GateCtx, GateMode};
use crate::layers::{inject_control_symbol, ConditionalAttentionLayer, ConditionalFFLayer, ControlSymbolTable, LayerNormParams, StreamLayout};
use crate::tensor::{randn, Graph, ParamId, ParamStore, Var};
use crate::trace::{Component, GateSite, GateTrace, SeqMeta, Stack, SubnetKind};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
/// First id available to content tokens.
pub const FIRST_CONTENT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Seq2seq,
    Mlm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab: usize,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Feed-forward slices per layer.
    pub m: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub gate_hidden: usize,
    /// Longest sequence (including bos/eos) the position table covers.
    pub max_len: usize,
    pub dropout: f64,
    pub tie_output: bool,
    pub cross_kv_component: Component,
    /// Standard deviation of position and control-symbol embeddings at init.
    pub embed_std: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Seq2seq,
            vocab: 64,
            d: 64,
            d_ff: 256,
            heads: 4,
            m: 2,
            enc_layers: 3,
            dec_layers: 3,
            gate_hidden: 64,
            max_len: 32,
            dropout: 0.1,
            tie_output: true,
            cross_kv_component: Component::Decoder,
            embed_std: 0.5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d", self.d),
            ("model.d_ff", self.d_ff),
            ("model.heads", self.heads),
            ("model.m", self.m),
            ("model.enc_layers", self.enc_layers),
            ("model.gate_hidden", self.gate_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(CctError::config(field, "must be >= 1"));
            }
        }
        if self.vocab <= FIRST_CONTENT {
            return Err(CctError::config("model.vocab", format!("must exceed the {FIRST_CONTENT} reserved ids")));
        }
        if self.d % self.heads != 0 {
            return Err(CctError::config("model.heads", format!("must divide d={}", self.d)));
        }
        if self.d_ff % self.m != 0 {
            return Err(CctError::config("model.m", format!("must divide d_ff={}", self.d_ff)));
        }
        match self.kind {
            ModelKind::Seq2seq if self.dec_layers == 0 => {
                return Err(CctError::config("model.dec_layers", "seq2seq models need >= 1 decoder layer"))
            }
            ModelKind::Mlm if self.dec_layers != 0 => {
                return Err(CctError::config("model.dec_layers", "encoder-only models take 0 decoder layers"))
            }
            _ => {}
        }
        if self.max_len < 2 {
            return Err(CctError::config("model.max_len", "must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CctError::config("model.dropout", "must lie in [0, 1)"));
        }
        if !(self.embed_std >= 0.0 && self.embed_std.is_finite()) {
            return Err(CctError::config("model.embed_std", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn cost_dims(&self) -> CostDims {
        CostDims {
            d: self.d,
            d_ff: self.d_ff,
            heads: self.heads,
            m: self.m,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            t_avg: self.max_len as f64 / 2.0,
            gate_hidden: self.gate_hidden,
            vocab: self.vocab,
            cross_kv_component: self.cross_kv_component,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn: ConditionalAttentionLayer,
    pub ff: ConditionalFFLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: ConditionalAttentionLayer,
    pub cross_attn: ConditionalAttentionLayer,
    pub ff: ConditionalFFLayer,
}

/// A CCT model. Encoder-decoder when `config.kind` is `seq2seq`, encoder-only otherwise.
#[derive(Clone, Debug)]
pub struct CctModel {
    pub config: ModelConfig,
    pub budgets: BudgetSpec,
    pub costs: CostModel,
    pub store: ParamStore,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub symbols: ControlSymbolTable,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub enc_ln: LayerNormParams,
    pub dec_ln: Option<LayerNormParams>,
    /// Untied output projection `[d × vocab]`.
    pub out_proj: Option<ParamId>,
}

/// Encoder-decoder CCT.
pub type Seq2SeqCct = CctModel;
/// Encoder-only CCT for masked language modelling.
pub type MlmCct = CctModel;

fn ff_sites(stack: Stack, layer: usize, m: usize) -> Vec<GateSite> {
    (0..m).map(|i| GateSite::new(stack, layer, SubnetKind::Ff(i))).collect()
}

impl CctModel {
    /// Builds a freshly initialized model; initialization is seeded by `config.init_seed`.
    pub fn new(config: ModelConfig, budgets: BudgetSpec) -> Result<Self> {
        config.validate()?;
        budgets.validate()?;
        let expected = match config.kind {
            ModelKind::Seq2seq => 2,
            ModelKind::Mlm => 1,
        };
        if budgets.arity() != expected {
            return Err(CctError::config(
                "budgets",
                format!("{:?} models take {expected}-entry budget tuples", config.kind),
            ));
        }
        let mut rng = CctRng::seed_from_u64(config.init_seed);
        let rng = &mut rng;
        let d = config.d;
        let mut store = ParamStore::new();
        let tok_emb = store.add("embed.tokens", randn(rng, &[config.vocab, d], (d as f64).powf(-0.5)));
        let pos_emb = store.add("embed.positions", randn(rng, &[config.max_len, d], config.embed_std));
        let symbols = ControlSymbolTable::new(&mut store, "embed.symbols", budgets.len(), d, config.embed_std, rng)?;
        let mut encoder = Vec::with_capacity(config.enc_layers);
        for l in 0..config.enc_layers {
            let site = |k| GateSite::new(Stack::Encoder, l, k);
            encoder.push(EncoderLayer {
                attn: ConditionalAttentionLayer::new(
                    &mut store,
                    &format!("enc.{l}.self"),
                    d,
                    config.heads,
                    config.gate_hidden,
                    site(SubnetKind::SelfKv),
                    site(SubnetKind::SelfQ),
                    rng,
                )?,
                ff: ConditionalFFLayer::new(
                    &mut store,
                    &format!("enc.{l}.ff"),
                    d,
                    config.d_ff,
                    ff_sites(Stack::Encoder, l, config.m),
                    config.gate_hidden,
                    rng,
                )?,
            });
        }
        let mut decoder = Vec::with_capacity(config.dec_layers);
        for l in 0..config.dec_layers {
            let site = |k| GateSite::new(Stack::Decoder, l, k);
            decoder.push(DecoderLayer {
                self_attn: ConditionalAttentionLayer::new(
                    &mut store,
                    &format!("dec.{l}.self"),
                    d,
                    config.heads,
                    config.gate_hidden,
                    site(SubnetKind::SelfKv),
                    site(SubnetKind::SelfQ),
                    rng,
                )?,
                cross_attn: ConditionalAttentionLayer::new(
                    &mut store,
                    &format!("dec.{l}.cross"),
                    d,
                    config.heads,
                    config.gate_hidden,
                    site(SubnetKind::CrossKv),
                    site(SubnetKind::CrossQ),
                    rng,
                )?,
                ff: ConditionalFFLayer::new(
                    &mut store,
                    &format!("dec.{l}.ff"),
                    d,
                    config.d_ff,
                    ff_sites(Stack::Decoder, l, config.m),
                    config.gate_hidden,
                    rng,
                )?,
            });
        }
        let enc_ln = LayerNormParams::new(&mut store, "enc.ln", d);
        let dec_ln = (config.kind == ModelKind::Seq2seq).then(|| LayerNormParams::new(&mut store, "dec.ln", d));
        let out_proj = (!config.tie_output).then(|| {
            store.add("out.proj", randn(rng, &[d, config.vocab], (d as f64).powf(-0.5)))
        });
        let costs = layer_costs(&config.cost_dims())?;
        Ok(CctModel {
            config,
            budgets,
            costs,
            store,
            tok_emb,
            pos_emb,
            symbols,
            encoder,
            decoder,
            enc_ln,
            dec_ln,
            out_proj,
        })
    }

    pub fn sites(&self) -> Vec<GateSite> {
        self.costs.sites.keys().copied().collect()
    }

    /// Checks token ids, lengths and symbols of one stream.
    pub fn check_stream(&self, name: &str, seqs: &[Vec<usize>]) -> Result<()> {
        for (i, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(CctError::contract(format!("{name} sequence {i} is empty")));
            }
            if s.len() > self.config.max_len {
                return Err(CctError::contract(format!(
                    "{name} sequence {i} has {} tokens, max_len is {}",
                    s.len(),
                    self.config.max_len
                )));
            }
            if let Some(t) = s.iter().find(|&&t| t >= self.config.vocab) {
                return Err(CctError::index(format!("{name} sequence {i}: token {t} outside vocabulary {}", self.config.vocab)));
            }
        }
        Ok(())
    }

    pub fn check_symbols(&self, symbols: &[usize]) -> Result<()> {
        if let Some(s) = symbols.iter().find(|&&s| s >= self.budgets.len()) {
            return Err(CctError::index(format!("control symbol {s} outside a spec of {} budgets", self.budgets.len())));
        }
        Ok(())
    }

    /// `√d·E[token] + P[position] + S[symbol]` for every row of the packed stream.
    pub fn embed(&self, g: &mut Graph, seqs: &[Vec<usize>], symbols: &[usize]) -> Result<Var> {
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let sym_rows: Vec<usize> = seqs
            .iter()
            .zip(symbols)
            .flat_map(|(s, &sym)| std::iter::repeat_n(sym, s.len()))
            .collect();
        let e = g.param(&self.store, self.tok_emb);
        let tok = g.gather_rows(e, &flat)?;
        let tok = g.scale(tok, (self.config.d as f64).sqrt());
        let p = g.param(&self.store, self.pos_emb);
        let pos = g.gather_rows(p, &positions)?;
        inject_control_symbol(g, &self.store, tok, pos, &self.symbols, &sym_rows)
    }

    /// Vocabulary logits of final hidden rows (already layer-normed).
    pub fn project(&self, g: &mut Graph, h: Var) -> Result<Var> {
        match self.out_proj {
            Some(w) => {
                let w = g.param(&self.store, w);
                g.matmul(h, w)
            }
            None => {
                let e = g.param(&self.store, self.tok_emb);
                g.matmul_bt(h, e)
            }
        }
    }

    /// Encoder stack over packed `src`; returns the final layer-normed memory.
    pub fn encode(
        &self,
        g: &mut Graph,
        src: &[Vec<usize>],
        symbols: &[usize],
        ctx: &mut GateCtx,
        gates: &mut BTreeMap<GateSite, Var>,
    ) -> Result<Var> {
        let layout = StreamLayout::new(src.iter().map(Vec::len).collect());
        let mut x = self.embed(g, src, symbols)?;
        for layer in &self.encoder {
            let a = layer.attn.forward(g, &self.store, x, x, &layout, &layout, false, ctx)?;
            gates.insert(layer.attn.kv_site, a.kv_gate);
            gates.insert(layer.attn.q_site, a.q_gate);
            let f = layer.ff.forward(g, &self.store, a.z, &layout, ctx)?;
            for (site, v) in layer.ff.sites.iter().zip(&f.gates) {
                gates.insert(*site, *v);
            }
            x = f.z;
        }
        self.enc_ln.apply(g, &self.store, x)
    }

    /// Decoder stack over packed decoder inputs attending to `memory`; returns final
    /// layer-normed hidden rows.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: Var,
        src_layout: &StreamLayout,
        dec_in: &[Vec<usize>],
        symbols: &[usize],
        ctx: &mut GateCtx,
        gates: &mut BTreeMap<GateSite, Var>,
    ) -> Result<Var> {
        let dec_ln = self
            .dec_ln
            .as_ref()
            .ok_or_else(|| CctError::contract("decode called on an encoder-only model"))?;
        let layout = StreamLayout::new(dec_in.iter().map(Vec::len).collect());
        let mut x = self.embed(g, dec_in, symbols)?;
        for layer in &self.decoder {
            let a = layer.self_attn.forward(g, &self.store, x, x, &layout, &layout, true, ctx)?;
            gates.insert(layer.self_attn.kv_site, a.kv_gate);
            gates.insert(layer.self_attn.q_site, a.q_gate);
            let c = layer.cross_attn.forward(g, &self.store, a.z, memory, &layout, src_layout, false, ctx)?;
            gates.insert(layer.cross_attn.kv_site, c.kv_gate);
            gates.insert(layer.cross_attn.q_site, c.q_gate);
            let f = layer.ff.forward(g, &self.store, c.z, &layout, ctx)?;
            for (site, v) in layer.ff.sites.iter().zip(&f.gates) {
                gates.insert(*site, *v);
            }
            x = f.z;
        }
        dec_ln.apply(g, &self.store, x)
    }

    /// Dense forward on the tape. Seq2seq models return logits over the packed decoder
    /// inputs; encoder-only models return logits over every source row.
    pub fn forward(
        &self,
        g: &mut Graph,
        src: &[Vec<usize>],
        dec_in: Option<&[Vec<usize>]>,
        symbols: &[usize],
        ctx: &mut GateCtx,
    ) -> Result<ForwardOut> {
        if symbols.len() != src.len() {
            return Err(CctError::contract(format!("{} source sequences but {} symbols", src.len(), symbols.len())));
        }
        self.check_stream("source", src)?;
        self.check_symbols(symbols)?;
        let mut gates = BTreeMap::new();
        let memory = self.encode(g, src, symbols, ctx, &mut gates)?;
        let src_layout = StreamLayout::new(src.iter().map(Vec::len).collect());
        let (hidden, tgt) = match (self.config.kind, dec_in) {
            (ModelKind::Seq2seq, Some(dec_in)) => {
                if dec_in.len() != src.len() {
                    return Err(CctError::contract(format!(
                        "{} source sequences but {} target sequences",
                        src.len(),
                        dec_in.len()
                    )));
                }
                self.check_stream("target", dec_in)?;
                let h = self.decode(g, memory, &src_layout, dec_in, symbols, ctx, &mut gates)?;
                (h, dec_in.to_vec())
            }
            (ModelKind::Seq2seq, None) => return Err(CctError::contract("seq2seq forward needs decoder inputs")),
            (ModelKind::Mlm, None) => (memory, vec![Vec::new(); src.len()]),
            (ModelKind::Mlm, Some(_)) => return Err(CctError::contract("encoder-only model takes no decoder inputs")),
        };
        let logits = self.project(g, hidden)?;
        let seqs = src
            .iter()
            .zip(tgt)
            .zip(symbols)
            .map(|((s, t), &symbol)| SeqMeta {
                symbol,
                src: s.clone(),
                tgt: t,
            })
            .collect();
        Ok(ForwardOut {
            logits,
            memory,
            gates,
            seqs,
        })
    }

    /// Gate values of a forward pass as a trace.
    pub fn trace_of(&self, g: &Graph, out: &ForwardOut, mode: GateMode) -> Result<GateTrace> {
        let mut trace = GateTrace::new(mode == GateMode::Infer, out.seqs.clone());
        for (site, v) in &out.gates {
            trace.insert(*site, g.value(*v).data().to_vec())?;
        }
        Ok(trace)
    }
}

pub struct ForwardOut {
    pub logits: Var,
    pub memory: Var,
    pub gates: BTreeMap<GateSite, Var>,
    pub seqs: Vec<SeqMeta>,
}

/// Result of a loss evaluation.
pub struct LossOut {
    pub total: Var,
    pub task: Var,
    pub task_loss: f64,
    pub budget_loss: f64,
    pub terms: Vec<BudgetTerm>,
    pub trace: GateTrace,
    pub logits: Var,
    /// Label per logit row.
    pub labels: Vec<usize>,
    /// Weight per logit row (0 where a row does not count).
    pub weights: Vec<f64>,
}

pub const DEFAULT_SEQ2SEQ_LAMBDA: f64 = 1.0;
pub const DEFAULT_MLM_LAMBDA: f64 = 0.3;

fn combine(
    model: &CctModel,
    g: &mut Graph,
    out: ForwardOut,
    task: Var,
    ctx: &GateCtx,
    lambda: f64,
    labels: Vec<usize>,
    weights: Vec<f64>,
) -> Result<LossOut> {
    let (budget, terms) = multi_budget_loss_var(g, &out.gates, &out.seqs, &model.budgets, &model.costs)?;
    let budget_loss = budget.map_or(0.0, |b| g.value(b).item());
    let total = match budget {
        Some(b) if lambda != 0.0 => {
            let scaled = g.scale(b, lambda);
            g.add(task, scaled)?
        }
        _ => task,
    };
    let trace = model.trace_of(g, &out, ctx.mode)?;
    Ok(LossOut {
        total,
        task,
        task_loss: g.value(task).item(),
        budget_loss,
        terms,
        trace,
        logits: out.logits,
        labels,
        weights,
    })
}

/// Teacher-forced translation loss `CE + λ·L_budget`. Targets include bos and eos; the
/// decoder reads `tgt[..n-1]` and predicts `tgt[1..]`.
pub fn seq2seq_loss(
    model: &CctModel,
    g: &mut Graph,
    src: &[Vec<usize>],
    tgt: &[Vec<usize>],
    symbols: &[usize],
    ctx: &mut GateCtx,
    lambda: f64,
) -> Result<LossOut> {
    if model.config.kind != ModelKind::Seq2seq {
        return Err(CctError::contract("seq2seq_loss on an encoder-only model"));
    }
    if tgt.len() != src.len() || symbols.len() != src.len() {
        return Err(CctError::contract(format!(
            "batch sizes differ: {} sources, {} targets, {} symbols",
            src.len(),
            tgt.len(),
            symbols.len()
        )));
    }
    if let Some(i) = tgt.iter().position(|t| t.len() < 2) {
        return Err(CctError::contract(format!("target {i} needs at least 2 tokens")));
    }
    let dec_in: Vec<Vec<usize>> = tgt.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
    let labels: Vec<usize> = tgt.iter().flat_map(|t| t[1..].iter().copied()).collect();
    let out = model.forward(g, src, Some(&dec_in), symbols, ctx)?;
    let weights = vec![1.0; labels.len()];
    let task = g.cross_entropy(out.logits, &labels, &weights)?;
    combine(model, g, out, task, ctx, lambda, labels, weights)
}

/// Masked-LM loss `CE(masked positions) + λ·L_budget`. `tokens` hold the corrupted
/// inputs, `originals` the uncorrupted ids used as labels.
#[allow(clippy::too_many_arguments)]
pub fn mlm_loss(
    model: &CctModel,
    g: &mut Graph,
    tokens: &[Vec<usize>],
    originals: &[Vec<usize>],
    mask_positions: &[Vec<usize>],
    symbols: &[usize],
    ctx: &mut GateCtx,
    lambda: f64,
) -> Result<LossOut> {
    if model.config.kind != ModelKind::Mlm {
        return Err(CctError::contract("mlm_loss on a seq2seq model"));
    }
    if originals.len() != tokens.len() || mask_positions.len() != tokens.len() || symbols.len() != tokens.len() {
        return Err(CctError::contract("batch sizes differ between tokens, labels, masks and symbols"));
    }
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for (i, ((t, o), m)) in tokens.iter().zip(originals).zip(mask_positions).enumerate() {
        if m.is_empty() {
            return Err(CctError::contract(format!("sequence {i} has no masked positions")));
        }
        if o.len() != t.len() {
            return Err(CctError::contract(format!("sequence {i}: labels and tokens differ in length")));
        }
        let mut w = vec![0.0; t.len()];
        for &p in m {
            if p >= t.len() {
                return Err(CctError::index(format!("sequence {i}: mask position {p} past length {}", t.len())));
            }
            w[p] = 1.0;
        }
        labels.extend_from_slice(o);
        weights.extend(w);
    }
    let out = model.forward(g, tokens, None, symbols, ctx)?;
    let task = g.cross_entropy(out.logits, &labels, &weights)?;
    combine(model, g, out, task, ctx, lambda, labels, weights)
}
