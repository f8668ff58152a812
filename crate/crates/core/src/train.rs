//! Optimization loop: Adam, the inverse-square-root schedule, noise annealing, per-batch
//! budget assignment, metric logging and held-out evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::budget::{assign_budgets, BudgetSpec};
use crate::data::{gen_batch, Batch, TaskGenerator, TaskKind, TaskSpec};
use crate::error::{CctError, Result};
use crate::gate::{alpha_at, CctRng, GateCtx, GateForcing, NoiseSchedule};
use crate::infer::{argmax, discrete_forward, log_softmax, ExecutionCounter};
use crate::model::{mlm_loss, seq2seq_loss, CctModel, LossOut, ModelKind};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::trace::Component;

/// The `train` section of an experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per batch.
    pub batch_size: usize,
    pub lr_scale: f64,
    pub warmup_steps: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Steps between held-out evaluations; 0 disables them.
    pub eval_every: usize,
    pub eval_batches: usize,
    pub clip_norm: f64,
    /// Clamp every gate to 1, giving an ungated baseline of the same architecture.
    pub ungated: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_size: 32,
            lr_scale: 1.0,
            warmup_steps: 1000,
            lambda: 1.0,
            seed: 1,
            eval_every: 0,
            eval_batches: 8,
            clip_norm: 1.0,
            ungated: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("train.steps", self.steps),
            ("train.batch_size", self.batch_size),
            ("train.warmup_steps", self.warmup_steps),
        ] {
            if v == 0 {
                return Err(CctError::config(field, "must be >= 1"));
            }
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(CctError::config("train.lr_scale", "must be a finite value > 0"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CctError::config("train.lambda", "must be a finite value >= 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(CctError::config("train.clip_norm", "must be > 0"));
        }
        Ok(())
    }
}

/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(scale: f64, d: usize, warmup: usize, step: usize) -> Result<f64> {
    if step == 0 {
        return Err(CctError::contract("learning-rate steps count from 1"));
    }
    if warmup == 0 {
        return Err(CctError::contract("warmup must be >= 1"));
    }
    let s = step as f64;
    Ok(scale * (d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_betas(store, 0.9, 0.98, 1e-9)
    }

    pub fn with_betas(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// One bias-corrected update of every parameter in `store`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(CctError::contract(format!(
                "optimizer holds {} slots, store {} parameters, {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if p.shape() != grads[k].shape() || p.shape() != self.m[k].shape() {
                return Err(CctError::dim(format!("optimizer slot {k}: shape mismatch")));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max`; returns the norm
/// before clipping.
pub fn clip_grads(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max {
        let s = max / norm;
        grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// One `(symbol, component)` budget term as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetMetric {
    pub symbol: usize,
    pub component: Component,
    pub sequences: usize,
    pub target: f64,
    pub fraction: f64,
    pub loss: f64,
}

/// Task loss over the sequences that drew one control symbol in a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolLoss {
    pub symbol: usize,
    pub tokens: f64,
    pub task_loss: f64,
}

/// Splits the weighted cross-entropy of `out` by the symbol of each row's sequence.
fn symbol_losses(logits: &Tensor, out: &LossOut, rows_per_seq: &[usize], symbols: &[usize]) -> Vec<SymbolLoss> {
    let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut row = 0;
    for (&n, &sym) in rows_per_seq.iter().zip(symbols) {
        for r in row..row + n {
            let w = out.weights[r];
            if w > 0.0 {
                let e = acc.entry(sym).or_default();
                e.0 += w;
                e.1 -= w * log_softmax(logits.row(r))[out.labels[r]];
            }
        }
        row += n;
    }
    acc.into_iter()
        .map(|(symbol, (tokens, nll))| SymbolLoss {
            symbol,
            tokens,
            task_loss: nll / tokens,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Zero-based index of the step.
    pub step: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub budget_loss: f64,
    pub budget_terms: Vec<BudgetMetric>,
    pub symbol_losses: Vec<SymbolLoss>,
    pub grad_norm: f64,
    pub alpha: f64,
    pub lr: f64,
    /// Running estimates of the expected compute fraction per symbol and component.
    pub running_fractions: Vec<BudgetMetric>,
}

/// Independent random streams derived from one seed.
struct Streams {
    data: CctRng,
    budget: CctRng,
    noise: CctRng,
    dropout: CctRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = CctRng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams {
            data: stream(1),
            budget: stream(2),
            noise: stream(3),
            dropout: stream(4),
        }
    }
}

/// Generator of the training batches and budget symbols for a seed, shared with
/// reference loops that need the identical sequence.
pub struct BatchStream {
    task: TaskGenerator,
    streams: Streams,
}

impl BatchStream {
    pub fn new(task: &TaskSpec, seed: u64) -> Result<Self> {
        Ok(BatchStream {
            task: TaskGenerator::new(task.clone())?,
            streams: Streams::new(seed),
        })
    }

    /// Next batch and one uniformly drawn budget symbol per sequence.
    pub fn next(&mut self, batch_size: usize, budgets: &BudgetSpec) -> Result<(Batch, Vec<usize>)> {
        let batch = gen_batch(&self.task, batch_size, &mut self.streams.data)?;
        let symbols = assign_budgets(batch_size, budgets, &mut self.streams.budget)?;
        Ok((batch, symbols))
    }

    pub fn dropout_rng(&mut self) -> &mut CctRng {
        &mut self.streams.dropout
    }

    pub fn noise_rng(&mut self) -> &mut CctRng {
        &mut self.streams.noise
    }
}

const RUNNING_DECAY: f64 = 0.95;

pub struct Trainer {
    pub model: CctModel,
    pub config: TrainConfig,
    pub noise: NoiseSchedule,
    pub task: TaskSpec,
    adam: Adam,
    batches: BatchStream,
    step: usize,
    running: BTreeMap<(usize, Component), (f64, f64)>,
}

impl Trainer {
    pub fn new(model: CctModel, task: TaskSpec, config: TrainConfig, noise: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        noise.validate()?;
        task.validate()?;
        check_task_fits(&model, &task)?;
        let adam = Adam::new(&model.store);
        let batches = BatchStream::new(&task, config.seed)?;
        Ok(Trainer {
            model,
            config,
            noise,
            task,
            adam,
            batches,
            step: 0,
            running: BTreeMap::new(),
        })
    }

    /// Steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    fn forcing(&self) -> GateForcing {
        if self.config.ungated {
            GateForcing::All(true)
        } else {
            GateForcing::None
        }
    }

    /// One Adam update on a fresh batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let alpha = alpha_at(&self.noise, step);
        let lr = lr_at(self.config.lr_scale, self.model.config.d, self.config.warmup_steps, step + 1)?;
        let (batch, symbols) = self.batches.next(self.config.batch_size, &self.model.budgets)?;
        let forcing = self.forcing();
        let rate = self.model.config.dropout;
        let mut g = Graph::new();
        let Streams { noise, dropout, .. } = &mut self.batches.streams;
        let mut ctx = GateCtx::train(alpha, Some(noise)).with_forcing(forcing);
        if rate > 0.0 {
            ctx = ctx.with_dropout(rate, dropout);
        }
        let out = batch_loss(&self.model, &mut g, &batch, &symbols, &mut ctx, self.config.lambda)?;
        let loss = g.value(out.total).item();
        for (term, value) in [("task loss", out.task_loss), ("budget loss", out.budget_loss), ("loss", loss)] {
            if !value.is_finite() {
                return Err(CctError::NonFinite {
                    term: term.into(),
                    step,
                    value,
                });
            }
        }
        let rows: Vec<usize> = match self.model.config.kind {
            ModelKind::Seq2seq => batch.examples.iter().map(|e| e.tgt.len() - 1).collect(),
            ModelKind::Mlm => batch.examples.iter().map(|e| e.src.len()).collect(),
        };
        let symbol_losses = symbol_losses(g.value(out.logits), &out, &rows, &symbols);
        g.backward(out.total)?;
        let mut grads = g.param_grads(&self.model.store);
        let norm = clip_grads(&mut grads, self.config.clip_norm);
        if !norm.is_finite() {
            return Err(CctError::NonFinite {
                term: "gradient norm".into(),
                step,
                value: norm,
            });
        }
        self.adam.update(&mut self.model.store, &grads, lr)?;
        self.step += 1;

        let budget_terms: Vec<BudgetMetric> = out
            .terms
            .iter()
            .map(|t| BudgetMetric {
                symbol: t.symbol,
                component: t.component,
                sequences: t.sequences,
                target: t.budget / t.available,
                fraction: t.fraction(),
                loss: t.loss,
            })
            .collect();
        for t in &budget_terms {
            let e = self.running.entry((t.symbol, t.component)).or_insert((t.target, t.fraction));
            e.0 = t.target;
            e.1 = RUNNING_DECAY * e.1 + (1.0 - RUNNING_DECAY) * t.fraction;
        }
        let running_fractions = self
            .running
            .iter()
            .map(|(&(symbol, component), &(target, fraction))| BudgetMetric {
                symbol,
                component,
                sequences: 0,
                target,
                fraction,
                loss: 0.0,
            })
            .collect();
        Ok(StepMetrics {
            step,
            loss,
            task_loss: out.task_loss,
            budget_loss: out.budget_loss,
            budget_terms,
            symbol_losses,
            grad_norm: norm,
            alpha,
            lr,
            running_fractions,
        })
    }

    /// Runs `steps` updates, appending one JSON line per step to `log` when given.
    pub fn run(&mut self, steps: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                write_metrics_line(w, &m)?;
            }
            out.push(m);
        }
        Ok(out)
    }
}

pub fn write_metrics_line(w: &mut dyn Write, m: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(m).map_err(|e| CctError::format(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| CctError::io("metrics", e))
}

fn check_task_fits(model: &CctModel, task: &TaskSpec) -> Result<()> {
    let mlm = task.kind == TaskKind::Mlm;
    if mlm != (model.config.kind == ModelKind::Mlm) {
        return Err(CctError::config("task.kind", "does not match model.kind"));
    }
    if task.vocab > model.config.vocab {
        return Err(CctError::config("task.vocab", "exceeds model.vocab"));
    }
    if task.max_seq_len() > model.config.max_len {
        return Err(CctError::config("task.max_len", "sequences exceed model.max_len"));
    }
    Ok(())
}

/// Task loss plus `lambda` times the budget loss for a generated batch.
pub fn batch_loss(
    model: &CctModel,
    g: &mut Graph,
    batch: &Batch,
    symbols: &[usize],
    ctx: &mut GateCtx,
    lambda: f64,
) -> Result<LossOut> {
    match model.config.kind {
        ModelKind::Seq2seq => seq2seq_loss(model, g, &batch.src(), &batch.tgt(), symbols, ctx, lambda),
        ModelKind::Mlm => mlm_loss(
            model,
            g,
            &batch.src(),
            &batch.tgt(),
            &batch.mask_positions(),
            symbols,
            ctx,
            lambda,
        ),
    }
}

/// Held-out batches from a stream no training seed uses.
pub fn heldout_batches(task: &TaskSpec, count: usize, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    let generator = TaskGenerator::new(task.clone())?;
    let mut rng = CctRng::seed_from_u64(seed);
    rng.set_stream(1 << 40);
    (0..count).map(|_| gen_batch(&generator, batch_size, &mut rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Continuous,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentFraction {
    pub component: Component,
    pub available: f64,
    pub executed: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub symbol: usize,
    pub mode: EvalMode,
    /// Teacher-forced next-token accuracy over the scored positions.
    pub token_accuracy: f64,
    pub perplexity: f64,
    pub tokens: usize,
    pub fractions: Vec<ComponentFraction>,
}

impl EvalReport {
    pub fn fraction(&self, c: Component) -> Option<f64> {
        self.fractions.iter().find(|f| f.component == c).map(|f| f.fraction)
    }
}

/// Scores every batch with all sequences given control symbol `symbol`.
pub fn evaluate(model: &CctModel, batches: &[Batch], symbol: usize, mode: EvalMode) -> Result<EvalReport> {
    evaluate_forced(model, batches, symbol, mode, &GateForcing::None)
}

/// [`evaluate`] with gate overrides, e.g. `All(true)` for a model trained ungated.
pub fn evaluate_forced(
    model: &CctModel,
    batches: &[Batch],
    symbol: usize,
    mode: EvalMode,
    forcing: &GateForcing,
) -> Result<EvalReport> {
    if symbol >= model.budgets.len() {
        return Err(CctError::index(format!(
            "control symbol {symbol} outside a spec of {} budgets",
            model.budgets.len()
        )));
    }
    if batches.is_empty() {
        return Err(CctError::contract("evaluation needs at least one batch"));
    }
    let (mut correct, mut nll, mut weight) = (0.0, 0.0, 0.0);
    let mut used: BTreeMap<Component, (f64, f64)> = BTreeMap::new();
    let mut score = |logits: &Tensor, labels: &[usize], weights: &[f64]| {
        for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = logits.row(r);
            let lp = log_softmax(row);
            nll -= w * lp[y];
            weight += w;
            if argmax(row) == y {
                correct += w;
            }
        }
    };
    for batch in batches {
        let symbols = vec![symbol; batch.len()];
        match mode {
            EvalMode::Continuous => {
                let mut g = Graph::new();
                let mut ctx = GateCtx::train(0.0, None).with_forcing(forcing.clone());
                let out = batch_loss(model, &mut g, batch, &symbols, &mut ctx, 0.0)?;
                score(g.value(out.logits), &out.labels, &out.weights);
                for t in &out.terms {
                    let e = used.entry(t.component).or_default();
                    e.0 += t.available;
                    e.1 += t.utilized;
                }
            }
            EvalMode::Discrete => {
                let (logits, labels, weights, counter) = discrete_batch(model, batch, &symbols, forcing)?;
                score(&logits, &labels, &weights);
                for c in Component::ALL {
                    if counter.available(c) > 0.0 {
                        let e = used.entry(c).or_default();
                        e.0 += counter.available(c);
                        e.1 += counter.executed(c);
                    }
                }
            }
        }
    }
    let fractions = used
        .into_iter()
        .map(|(component, (available, executed))| ComponentFraction {
            component,
            available,
            executed,
            fraction: if available > 0.0 { executed / available } else { 0.0 },
        })
        .collect();
    Ok(EvalReport {
        symbol,
        mode,
        token_accuracy: correct / weight,
        perplexity: (nll / weight).exp(),
        tokens: weight as usize,
        fractions,
    })
}

type Scored = (Tensor, Vec<usize>, Vec<f64>, ExecutionCounter);

fn discrete_batch(model: &CctModel, batch: &Batch, symbols: &[usize], forcing: &GateForcing) -> Result<Scored> {
    match model.config.kind {
        ModelKind::Seq2seq => {
            let tgt = batch.tgt();
            let dec_in: Vec<Vec<usize>> = tgt.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
            let labels: Vec<usize> = tgt.iter().flat_map(|t| t[1..].iter().copied()).collect();
            let out = discrete_forward(model, &batch.src(), Some(&dec_in), symbols, forcing)?;
            let weights = vec![1.0; labels.len()];
            Ok((out.logits, labels, weights, out.counter))
        }
        ModelKind::Mlm => {
            let out = discrete_forward(model, &batch.src(), None, symbols, forcing)?;
            let labels: Vec<usize> = batch.tgt().concat();
            let mut weights = Vec::with_capacity(labels.len());
            for (ex, masks) in batch.examples.iter().zip(batch.mask_positions()) {
                let mut w = vec![0.0; ex.src.len()];
                masks.iter().for_each(|&p| w[p] = 1.0);
                weights.extend(w);
            }
            Ok((out.logits, labels, weights, out.counter))
        }
    }
}
