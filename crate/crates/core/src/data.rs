//! Seeded synthetic tasks: copy, reverse, toy translation and masked LM.
//!
//! Every sequence is `bos, content…, eos`. Content ids start at [`FIRST_CONTENT`] and are
//! drawn by Zipf rank, so low ids are frequent and high ids are rare.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};
use crate::gate::CctRng;
use crate::model::{BOS, EOS, FIRST_CONTENT, MASK, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ToyTranslation,
    Mlm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    /// Content length range, bos/eos excluded.
    pub min_len: usize,
    pub max_len: usize,
    pub zipf: f64,
    /// Fixes the translation bijection; batches draw from the caller's rng.
    pub seed: u64,
    pub mask_rate: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::ToyTranslation,
            vocab: 64,
            min_len: 4,
            max_len: 10,
            zipf: 1.1,
            seed: 7,
            mask_rate: 0.15,
        }
    }
}

/// One training example. For masked LM `src` is the corrupted input, `tgt` the original
/// tokens and `mask_positions` the corrupted positions; otherwise `mask_positions` is empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub mask_positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn src(&self) -> Vec<Vec<usize>> {
        self.examples.iter().map(|e| e.src.clone()).collect()
    }

    pub fn tgt(&self) -> Vec<Vec<usize>> {
        self.examples.iter().map(|e| e.tgt.clone()).collect()
    }

    pub fn mask_positions(&self) -> Vec<Vec<usize>> {
        self.examples.iter().map(|e| e.mask_positions.clone()).collect()
    }
}

/// Rectangular view of ragged sequences: padded ids and a mask that is `true` exactly at
/// positions past each sequence's length.
pub fn pad(seqs: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut ids = s.clone();
            ids.resize(width, PAD);
            let mask = (0..width).map(|i| i >= s.len()).collect();
            (ids, mask)
        })
        .unzip()
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FIRST_CONTENT {
            return Err(CctError::config("task.vocab", format!("must exceed the {FIRST_CONTENT} reserved ids")));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(CctError::config("task.min_len", "need 1 <= min_len <= max_len"));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return Err(CctError::config("task.zipf", "exponent must be finite and >= 0"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(CctError::config("task.mask_rate", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn content_vocab(&self) -> usize {
        self.vocab - FIRST_CONTENT
    }

    /// Longest full sequence (with bos/eos) the task produces.
    pub fn max_seq_len(&self) -> usize {
        self.max_len + 2
    }
}

/// Builds examples for a fixed task. Construction fixes the translation bijection.
#[derive(Clone, Debug)]
pub struct TaskGenerator {
    pub spec: TaskSpec,
    zipf: Zipf<f64>,
    /// Content id → translated content id.
    bijection: Vec<usize>,
}

impl TaskGenerator {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.content_vocab();
        let zipf = Zipf::new(n as f64, spec.zipf).map_err(|e| CctError::config("task.zipf", e.to_string()))?;
        let mut perm: Vec<usize> = (FIRST_CONTENT..spec.vocab).collect();
        perm.shuffle(&mut CctRng::seed_from_u64(spec.seed));
        Ok(TaskGenerator {
            spec,
            zipf,
            bijection: perm,
        })
    }

    /// Content token of Zipf rank `rank` (1-based).
    pub fn token_of_rank(rank: usize) -> usize {
        FIRST_CONTENT + rank - 1
    }

    pub fn sample_token<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        Self::token_of_rank(self.zipf.sample(rng) as usize)
    }

    pub fn translate_token(&self, t: usize) -> usize {
        self.bijection[t - FIRST_CONTENT]
    }

    /// Tokens in the rarer half of the content vocabulary trigger a swap with their right
    /// neighbour.
    pub fn is_rare(&self, t: usize) -> bool {
        t - FIRST_CONTENT >= self.spec.content_vocab() / 2
    }

    /// Deterministic target of a content sequence (without bos/eos).
    pub fn target_content(&self, content: &[usize]) -> Vec<usize> {
        match self.spec.kind {
            TaskKind::Copy | TaskKind::Mlm => content.to_vec(),
            TaskKind::Reverse => content.iter().rev().copied().collect(),
            TaskKind::ToyTranslation => {
                let mut out = Vec::with_capacity(content.len());
                let mut i = 0;
                while i < content.len() {
                    if self.is_rare(content[i]) && i + 1 < content.len() {
                        out.push(self.translate_token(content[i + 1]));
                        out.push(self.translate_token(content[i]));
                        i += 2;
                    } else {
                        out.push(self.translate_token(content[i]));
                        i += 1;
                    }
                }
                out
            }
        }
    }

    pub fn example<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let content: Vec<usize> = (0..len).map(|_| self.sample_token(rng)).collect();
        let wrap = |c: &[usize]| {
            let mut s = Vec::with_capacity(c.len() + 2);
            s.push(BOS);
            s.extend_from_slice(c);
            s.push(EOS);
            s
        };
        let original = wrap(&content);
        if self.spec.kind == TaskKind::Mlm {
            let mut positions: Vec<usize> = (1..=len).filter(|_| rng.random_bool(self.spec.mask_rate)).collect();
            if positions.is_empty() {
                positions.push(rng.random_range(1..=len));
            }
            let mut src = original.clone();
            for &p in &positions {
                src[p] = MASK;
            }
            return Example {
                src,
                tgt: original,
                mask_positions: positions,
            };
        }
        Example {
            tgt: wrap(&self.target_content(&content)),
            src: original,
            mask_positions: Vec::new(),
        }
    }
}

pub fn gen_batch<R: Rng + ?Sized>(task: &TaskGenerator, batch: usize, rng: &mut R) -> Result<Batch> {
    if batch == 0 {
        return Err(CctError::contract("gen_batch: batch size must be >= 1"));
    }
    Ok(Batch {
        examples: (0..batch).map(|_| task.example(rng)).collect(),
    })
}

/// Token counts of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTable {
    pub counts: BTreeMap<usize, u64>,
    pub total: u64,
}

impl FrequencyTable {
    pub fn frequency(&self, token: usize) -> f64 {
        self.counts.get(&token).map_or(0.0, |&c| c as f64 / self.total as f64)
    }

    pub fn count(&self, token: usize) -> u64 {
        self.counts.get(&token).copied().unwrap_or(0)
    }

    /// Tokens by decreasing count; ties by increasing id.
    pub fn ranked(&self) -> Vec<(usize, u64)> {
        let mut v: Vec<(usize, u64)> = self.counts.iter().map(|(&t, &c)| (t, c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// 1-based frequency rank of every token.
    pub fn ranks(&self) -> BTreeMap<usize, usize> {
        self.ranked().iter().enumerate().map(|(i, &(t, _))| (t, i + 1)).collect()
    }
}

pub fn token_frequencies<'a>(sample: impl IntoIterator<Item = &'a [usize]>) -> Result<FrequencyTable> {
    let mut counts = BTreeMap::new();
    let mut total = 0;
    for seq in sample {
        for &t in seq {
            *counts.entry(t).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(CctError::contract("token_frequencies: empty sample"));
    }
    Ok(FrequencyTable { counts, total })
}

/// One line per example: source ids, then a tab and target ids when a target exists.
pub fn write_corpus(examples: &[Example]) -> String {
    let join = |s: &[usize]| s.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    for e in examples {
        out.push_str(&join(&e.src));
        if !e.tgt.is_empty() {
            out.push('\t');
            out.push_str(&join(&e.tgt));
        }
        out.push('\n');
    }
    out
}

/// Parses [`write_corpus`] output into `(source, target)` pairs; blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let ids = |s: &str, line: usize| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|w| {
                w.parse()
                    .map_err(|_| CctError::format(format!("corpus line {line}: `{w}` is not a token id")))
            })
            .collect()
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = match line.split_once('\t') {
            Some((s, t)) => (ids(s, i + 1)?, ids(t, i + 1)?),
            None => (ids(line, i + 1)?, Vec::new()),
        };
        if src.is_empty() {
            return Err(CctError::format(format!("corpus line {}: empty source", i + 1)));
        }
        out.push((src, tgt));
    }
    Ok(out)
}
