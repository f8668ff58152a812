//! Conditional Transformer blocks: gated attention, M-way split gated feed-forward and
//! control-symbol embedding injection.

use crate::error::{CctError, Result};
use crate::gate::{apply_forcing, apply_gate, gate_forward, ControlNetwork, CctRng, GateCtx, GateMode, TokenRef};
use crate::tensor::{kernels, randn, AttentionSpec, Graph, ParamId, ParamStore, Segment, Tensor, Var};
use crate::trace::GateSite;

/// Row layout of a packed, unpadded batch of sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamLayout {
    lens: Vec<usize>,
    offsets: Vec<usize>,
}

impl StreamLayout {
    pub fn new(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for l in &lens {
            acc += l;
            offsets.push(acc);
        }
        StreamLayout { lens, offsets }
    }

    pub fn rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn seqs(&self) -> usize {
        self.lens.len()
    }

    pub fn len(&self, seq: usize) -> usize {
        self.lens[seq]
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn offset(&self, seq: usize) -> usize {
        self.offsets[seq]
    }

    pub fn token_refs(&self) -> Vec<TokenRef> {
        self.lens
            .iter()
            .enumerate()
            .flat_map(|(seq, &l)| (0..l).map(move |pos| TokenRef { seq, pos }))
            .collect()
    }

    /// One attention segment per sequence, pairing this layout's queries with `keys`.
    pub fn segments(&self, keys: &StreamLayout) -> Vec<Segment> {
        (0..self.seqs())
            .map(|s| Segment {
                q_start: self.offset(s),
                q_len: self.len(s),
                k_start: keys.offset(s),
                k_len: keys.len(s),
            })
            .collect()
    }
}

/// Affine parameters of one layer normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn apply_values(&self, store: &ParamStore, x: &[f64], d: usize) -> Vec<f64> {
        kernels::layer_norm(x, d, store.get(self.gain).data(), store.get(self.bias).data()).0
    }
}

pub(crate) fn dense(store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize, rng: &mut CctRng) -> ParamId {
    store.add(name, randn(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()))
}

/// Attention whose key/value projections and query path are each gated per token.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalAttentionLayer {
    pub d: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_pre: LayerNormParams,
    pub ln_post: LayerNormParams,
    pub ln_k: LayerNormParams,
    pub ln_v: LayerNormParams,
    pub kv_gate: ControlNetwork,
    pub q_gate: ControlNetwork,
    pub kv_site: GateSite,
    pub q_site: GateSite,
}

/// Output of [`ConditionalAttentionLayer::forward`]: the new residual stream and the
/// `[rows × 1]` gate columns actually applied.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub z: Var,
    pub kv_gate: Var,
    pub q_gate: Var,
}

impl ConditionalAttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        gate_hidden: usize,
        kv_site: GateSite,
        q_site: GateSite,
        rng: &mut CctRng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(CctError::contract(format!("{prefix}: d={d} is not divisible by {heads} heads")));
        }
        Ok(ConditionalAttentionLayer {
            d,
            heads,
            wq: dense(store, format!("{prefix}.wq"), d, d, rng),
            wk: dense(store, format!("{prefix}.wk"), d, d, rng),
            wv: dense(store, format!("{prefix}.wv"), d, d, rng),
            wo: dense(store, format!("{prefix}.wo"), d, d, rng),
            ln_pre: LayerNormParams::new(store, &format!("{prefix}.ln_pre"), d),
            ln_post: LayerNormParams::new(store, &format!("{prefix}.ln_post"), d),
            ln_k: LayerNormParams::new(store, &format!("{prefix}.ln_k"), d),
            ln_v: LayerNormParams::new(store, &format!("{prefix}.ln_v"), d),
            kv_gate: ControlNetwork::new(store, &format!("{prefix}.kv_gate"), d, gate_hidden, 1, rng)?,
            q_gate: ControlNetwork::new(store, &format!("{prefix}.q_gate"), d, gate_hidden, 1, rng)?,
            kv_site,
            q_site,
        })
    }

    /// Gated attention of queries `x` over `y` (`y == x` for self-attention):
    ///
    /// `K = g_kv(y)·LN(yWk)`, `V = g_kv(y)·LN(yWv)`, `q = LN(x)Wq`,
    /// `z = x + g_q(x)·Dropout(LN(MHA(K, V, q)))Wo`.
    ///
    /// In infer mode keys whose gate is off are removed from every softmax.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        y: Var,
        q_layout: &StreamLayout,
        kv_layout: &StreamLayout,
        causal: bool,
        ctx: &mut GateCtx,
    ) -> Result<AttentionOutput> {
        for (name, v, layout) in [("queries", x, q_layout), ("keys", y, kv_layout)] {
            let t = g.value(v);
            if t.cols() != self.d || t.rows() != layout.rows() || t.shape().len() != 2 {
                return Err(CctError::dim(format!(
                    "attention {name}: got {:?}, expected [{}, {}]",
                    t.shape(),
                    layout.rows(),
                    self.d
                )));
            }
        }
        let kv_g = gate_forward(g, store, &self.kv_gate, y, ctx.alpha, ctx.mode, ctx.noise_rng.as_deref_mut())?;
        let kv_g = apply_forcing(g, kv_g, &self.kv_site, &kv_layout.token_refs(), &ctx.forcing)?;

        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let k = g.matmul(y, wk)?;
        let k = self.ln_k.apply(g, store, k)?;
        let k = g.mul_col(k, kv_g)?;
        let v = g.matmul(y, wv)?;
        let v = self.ln_v.apply(g, store, v)?;
        let v = g.mul_col(v, kv_g)?;

        let wq = g.param(store, self.wq);
        let q = self.ln_pre.apply(g, store, x)?;
        let q = g.matmul(q, wq)?;

        let segments = q_layout.segments(kv_layout);
        // Train mode weights each key's softmax share by its gate; binary gates make this a
        // hard key mask, which is what inference uses directly.
        let a = match ctx.mode {
            GateMode::Infer => {
                let key_mask = Some(g.value(kv_g).data().iter().map(|&v| v != 0.0).collect());
                g.attention(q, k, v, AttentionSpec { heads: self.heads, segments, causal, key_mask })?
            }
            GateMode::Train => {
                let spec = AttentionSpec { heads: self.heads, segments, causal, key_mask: None };
                g.gated_attention(q, k, v, kv_g, spec)?
            }
        };
        let a = self.ln_post.apply(g, store, a)?;
        let a = ctx.dropout(g, a)?;
        let wo = g.param(store, self.wo);
        let o = g.matmul(a, wo)?;

        let q_g = gate_forward(g, store, &self.q_gate, x, ctx.alpha, ctx.mode, ctx.noise_rng.as_deref_mut())?;
        let q_g = apply_forcing(g, q_g, &self.q_site, &q_layout.token_refs(), &ctx.forcing)?;
        let z = apply_gate(g, q_g, o, x)?;
        Ok(AttentionOutput {
            z,
            kv_gate: kv_g,
            q_gate: q_g,
        })
    }
}

/// One independently gated slice of the feed-forward layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FfSplit {
    pub ln_in: LayerNormParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub ln_out: LayerNormParams,
}

/// Feed-forward layer decomposed into `M` gated slices of width `d_ff / M`:
/// `z = x + Σ_i g_i(x)·LN_out_i(relu(LN_in_i(x)·W1_i + b_i)·W2_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalFFLayer {
    pub d: usize,
    pub d_ff: usize,
    pub splits: Vec<FfSplit>,
    pub gate: ControlNetwork,
    pub sites: Vec<GateSite>,
}

/// Output of [`ConditionalFFLayer::forward`]: residual stream and one gate column per slice.
#[derive(Clone, Debug)]
pub struct FfOutput {
    pub z: Var,
    pub gates: Vec<Var>,
}

impl ConditionalFFLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_ff: usize,
        sites: Vec<GateSite>,
        gate_hidden: usize,
        rng: &mut CctRng,
    ) -> Result<Self> {
        let m = sites.len();
        if m == 0 || d_ff % m != 0 {
            return Err(CctError::contract(format!("{prefix}: d_ff={d_ff} is not divisible into {m} slices")));
        }
        let w = d_ff / m;
        let splits = (0..m)
            .map(|i| FfSplit {
                ln_in: LayerNormParams::new(store, &format!("{prefix}.{i}.ln_in"), d),
                w1: dense(store, format!("{prefix}.{i}.w1"), d, w, rng),
                b1: store.add(format!("{prefix}.{i}.b1"), Tensor::zeros(&[w])),
                w2: dense(store, format!("{prefix}.{i}.w2"), w, d, rng),
                ln_out: LayerNormParams::new(store, &format!("{prefix}.{i}.ln_out"), d),
            })
            .collect();
        let gate = ControlNetwork::new(store, &format!("{prefix}.gate"), d, gate_hidden, m, rng)?;
        Ok(ConditionalFFLayer {
            d,
            d_ff,
            splits,
            gate,
            sites,
        })
    }

    pub fn split_width(&self) -> usize {
        self.d_ff / self.splits.len()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layout: &StreamLayout,
        ctx: &mut GateCtx,
    ) -> Result<FfOutput> {
        let t = g.value(x);
        if t.cols() != self.d || t.rows() != layout.rows() || t.shape().len() != 2 {
            return Err(CctError::dim(format!(
                "feed-forward input {:?}, expected [{}, {}]",
                t.shape(),
                layout.rows(),
                self.d
            )));
        }
        let raw = gate_forward(g, store, &self.gate, x, ctx.alpha, ctx.mode, ctx.noise_rng.as_deref_mut())?;
        let refs = layout.token_refs();
        let mut z = x;
        let mut gates = Vec::with_capacity(self.splits.len());
        for (i, split) in self.splits.iter().enumerate() {
            let gi = if self.splits.len() == 1 { raw } else { g.select_col(raw, i)? };
            let gi = apply_forcing(g, gi, &self.sites[i], &refs, &ctx.forcing)?;
            let h = split.ln_in.apply(g, store, x)?;
            let w1 = g.param(store, split.w1);
            let b1 = g.param(store, split.b1);
            let w2 = g.param(store, split.w2);
            let h = g.matmul(h, w1)?;
            let h = g.add_bias(h, b1)?;
            let h = g.relu(h);
            let h = g.matmul(h, w2)?;
            let o = split.ln_out.apply(g, store, h)?;
            z = apply_gate(g, gi, o, z)?;
            gates.push(gi);
        }
        Ok(FfOutput { z, gates })
    }
}

/// Learned embeddings of the control symbols, one row per budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSymbolTable {
    pub embeddings: ParamId,
    pub count: usize,
    pub d: usize,
}

impl ControlSymbolTable {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, d: usize, std: f64, rng: &mut CctRng) -> Result<Self> {
        if count == 0 {
            return Err(CctError::contract("control symbol table needs at least one symbol"));
        }
        Ok(ControlSymbolTable {
            embeddings: store.add(name.to_string(), randn(rng, &[count, d], std)),
            count,
            d,
        })
    }
}

/// `token + position + symbol` embedding per row; `symbols` has one id per row.
pub fn inject_control_symbol(
    g: &mut Graph,
    store: &ParamStore,
    tokens: Var,
    positions: Var,
    table: &ControlSymbolTable,
    symbols: &[usize],
) -> Result<Var> {
    if let Some(bad) = symbols.iter().find(|&&s| s >= table.count) {
        return Err(CctError::index(format!(
            "control symbol {bad} outside a table of {} symbols",
            table.count
        )));
    }
    let emb = g.param(store, table.embeddings);
    let sym = g.gather_rows(emb, symbols)?;
    let x = g.add(tokens, positions)?;
    g.add(x, sym)
}
