//! Ungated pre-LN Transformer reading the same named parameters as [`CctModel`].
//!
//! It shares no layer code with the gated model: every projection is looked up by name
//! and wired directly on the tape. With all gates forced on it computes the same
//! function as the CCT, so it serves as the equivalence reference and as the ungated
//! baseline trajectory.

use crate::error::{CctError, Result};
use crate::gate::CctRng;
use crate::tensor::{AttentionSpec, Graph, ParamStore, Segment, Var};

use super::{ModelConfig, ModelKind};

pub struct PlainTransformer<'a> {
    pub config: &'a ModelConfig,
    pub store: &'a ParamStore,
}

fn segments(q: &[usize], k: &[usize]) -> Vec<Segment> {
    let (mut qs, mut ks) = (0, 0);
    q.iter()
        .zip(k)
        .map(|(&ql, &kl)| {
            let s = Segment {
                q_start: qs,
                q_len: ql,
                k_start: ks,
                k_len: kl,
            };
            qs += ql;
            ks += kl;
            s
        })
        .collect()
}

impl<'a> PlainTransformer<'a> {
    pub fn new(config: &'a ModelConfig, store: &'a ParamStore) -> Self {
        PlainTransformer { config, store }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| CctError::contract(format!("parameter `{name}` missing")))?;
        Ok(g.param(self.store, id))
    }

    fn ln(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let gain = self.p(g, &format!("{name}.gain"))?;
        let bias = self.p(g, &format!("{name}.bias"))?;
        g.layer_norm(x, gain, bias)
    }

    fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = self.p(g, name)?;
        g.matmul(x, w)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        y: Var,
        q_lens: &[usize],
        k_lens: &[usize],
        causal: bool,
        dropout: &mut Option<(f64, &mut CctRng)>,
    ) -> Result<Var> {
        let k = self.linear(g, &format!("{prefix}.wk"), y)?;
        let k = self.ln(g, &format!("{prefix}.ln_k"), k)?;
        let v = self.linear(g, &format!("{prefix}.wv"), y)?;
        let v = self.ln(g, &format!("{prefix}.ln_v"), v)?;
        let q = self.ln(g, &format!("{prefix}.ln_pre"), x)?;
        let q = self.linear(g, &format!("{prefix}.wq"), q)?;
        let spec = AttentionSpec {
            heads: self.config.heads,
            segments: segments(q_lens, k_lens),
            causal,
            key_mask: None,
        };
        let a = g.attention(q, k, v, spec)?;
        let a = self.ln(g, &format!("{prefix}.ln_post"), a)?;
        let a = match dropout {
            Some((rate, rng)) => g.dropout(a, *rate, Some(&mut **rng))?,
            None => a,
        };
        let o = self.linear(g, &format!("{prefix}.wo"), a)?;
        g.add(x, o)
    }

    fn feed_forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let mut z = x;
        for i in 0..self.config.m {
            let h = self.ln(g, &format!("{prefix}.{i}.ln_in"), x)?;
            let h = self.linear(g, &format!("{prefix}.{i}.w1"), h)?;
            let b = self.p(g, &format!("{prefix}.{i}.b1"))?;
            let h = g.add_bias(h, b)?;
            let h = g.relu(h);
            let h = self.linear(g, &format!("{prefix}.{i}.w2"), h)?;
            let o = self.ln(g, &format!("{prefix}.{i}.ln_out"), h)?;
            z = g.add(z, o)?;
        }
        Ok(z)
    }

    fn embed(&self, g: &mut Graph, seqs: &[Vec<usize>], symbols: &[usize]) -> Result<Var> {
        let toks: Vec<usize> = seqs.concat();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let sym: Vec<usize> = seqs.iter().zip(symbols).flat_map(|(s, &y)| vec![y; s.len()]).collect();
        let e = self.p(g, "embed.tokens")?;
        let t = g.gather_rows(e, &toks)?;
        let t = g.scale(t, (self.config.d as f64).sqrt());
        let p = self.p(g, "embed.positions")?;
        let p = g.gather_rows(p, &pos)?;
        let s = self.p(g, "embed.symbols")?;
        let s = g.gather_rows(s, &sym)?;
        let x = g.add(t, p)?;
        g.add(x, s)
    }

    /// Logits over packed decoder inputs (seq2seq) or source rows (encoder-only).
    pub fn logits(
        &self,
        g: &mut Graph,
        src: &[Vec<usize>],
        dec_in: Option<&[Vec<usize>]>,
        symbols: &[usize],
        mut dropout: Option<(f64, &mut CctRng)>,
    ) -> Result<Var> {
        let src_lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let mut x = self.embed(g, src, symbols)?;
        for l in 0..self.config.enc_layers {
            x = self.attention(g, &format!("enc.{l}.self"), x, x, &src_lens, &src_lens, false, &mut dropout)?;
            x = self.feed_forward(g, &format!("enc.{l}.ff"), x)?;
        }
        let memory = self.ln(g, "enc.ln", x)?;
        let h = match (self.config.kind, dec_in) {
            (ModelKind::Seq2seq, Some(dec_in)) => {
                let lens: Vec<usize> = dec_in.iter().map(Vec::len).collect();
                let mut y = self.embed(g, dec_in, symbols)?;
                for l in 0..self.config.dec_layers {
                    y = self.attention(g, &format!("dec.{l}.self"), y, y, &lens, &lens, true, &mut dropout)?;
                    y = self.attention(g, &format!("dec.{l}.cross"), y, memory, &lens, &src_lens, false, &mut dropout)?;
                    y = self.feed_forward(g, &format!("dec.{l}.ff"), y)?;
                }
                self.ln(g, "dec.ln", y)?
            }
            (ModelKind::Mlm, None) => memory,
            _ => return Err(CctError::contract("decoder inputs must be given exactly for seq2seq models")),
        };
        if self.config.tie_output {
            let e = self.p(g, "embed.tokens")?;
            g.matmul_bt(h, e)
        } else {
            self.linear(g, "out.proj", h)
        }
    }

    /// Mean cross-entropy of `tgt[1..]` given `src` and `tgt[..n-1]`.
    pub fn seq2seq_loss(
        &self,
        g: &mut Graph,
        src: &[Vec<usize>],
        tgt: &[Vec<usize>],
        symbols: &[usize],
        dropout: Option<(f64, &mut CctRng)>,
    ) -> Result<Var> {
        let dec_in: Vec<Vec<usize>> = tgt.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
        let labels: Vec<usize> = tgt.iter().flat_map(|t| t[1..].to_vec()).collect();
        let logits = self.logits(g, src, Some(&dec_in), symbols, dropout)?;
        g.cross_entropy(logits, &labels, &vec![1.0; labels.len()])
    }
}
