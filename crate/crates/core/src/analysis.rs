//! Gate-usage analyses over recorded traces, emitted as CSV rows plus JSON metadata.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::budget::CostModel;
use crate::data::{Batch, FrequencyTable};
use crate::error::{CctError, Result};
use crate::model::CctModel;
use crate::trace::{Component, GateSite, GateTrace, SeqMeta, Stack, Stream, SubnetKind};
use crate::train::{evaluate, EvalMode};

pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    ComputeSpread,
    FreqVsCompute,
    LayerActivation,
    AttnByTimestep,
    TradeoffCurve,
    NoiseAblation,
}

impl ReportKind {
    pub fn name(self) -> &'static str {
        match self {
            ReportKind::ComputeSpread => "compute-spread",
            ReportKind::FreqVsCompute => "freq-vs-compute",
            ReportKind::LayerActivation => "layer-activation",
            ReportKind::AttnByTimestep => "attn-by-timestep",
            ReportKind::TradeoffCurve => "tradeoff-curve",
            ReportKind::NoiseAblation => "noise-ablation",
        }
    }
}

/// Provenance carried next to every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub symbol: Option<usize>,
    pub budget: Option<Vec<f64>>,
    pub dataset_seed: Option<u64>,
    pub checkpoint_id: Option<String>,
    /// Analysis parameters and summary statistics.
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Rows of a report that hold fractions, checked to lie in `[0, 1]`.
pub trait ReportRow: Serialize {
    fn fractions(&self) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report<R> {
    pub kind: ReportKind,
    pub rows: Vec<R>,
    pub meta: ReportMeta,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    kind: ReportKind,
    rows: usize,
    #[serde(flatten)]
    meta: &'a ReportMeta,
}

impl<R: ReportRow> Report<R> {
    fn new(kind: ReportKind, rows: Vec<R>) -> Self {
        Report {
            kind,
            rows,
            meta: ReportMeta::default(),
        }
    }

    pub fn with_meta(mut self, f: impl FnOnce(&mut ReportMeta)) -> Self {
        f(&mut self.meta);
        self
    }

    /// Checks every fraction column lies in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if let Some(f) = r.fractions().into_iter().find(|f| !(0.0..=1.0).contains(f)) {
                return Err(CctError::contract(format!("{} row {i}: fraction {f} outside [0, 1]", self.kind.name())));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| CctError::format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CctError::format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CctError::format(e.to_string()))
    }

    pub fn meta_json(&self) -> Result<String> {
        let side = Sidecar {
            kind: self.kind,
            rows: self.rows.len(),
            meta: &self.meta,
        };
        serde_json::to_string_pretty(&side)
            .map(|s| s + "\n")
            .map_err(|e| CctError::format(e.to_string()))
    }

    /// Writes `path` (CSV) and the metadata sidecar next to it; returns the sidecar path.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let side = path.with_extension("json");
        std::fs::write(path, self.to_csv()?).map_err(|e| CctError::io(path, e))?;
        std::fs::write(&side, self.meta_json()?).map_err(|e| CctError::io(&side, e))?;
        Ok(side)
    }
}

/// Per-token flop costs an analysis charges against gate values.
pub trait TokenCosts {
    fn cost(&self, site: &GateSite, seq: usize, meta: &SeqMeta, pos: usize) -> Result<f64>;
    fn charged_to(&self, site: &GateSite) -> Result<Component>;
}

impl TokenCosts for CostModel {
    fn cost(&self, site: &GateSite, _seq: usize, meta: &SeqMeta, pos: usize) -> Result<f64> {
        self.token_cost(site, meta, pos)
    }

    fn charged_to(&self, site: &GateSite) -> Result<Component> {
        self.component(site)
    }
}

/// Costs read back from the `cost_flops` column of a trace file.
pub struct RecordedCosts<'a> {
    pub costs: &'a BTreeMap<(usize, usize, GateSite), f64>,
    pub cross_kv_component: Component,
}

impl TokenCosts for RecordedCosts<'_> {
    fn cost(&self, site: &GateSite, seq: usize, _meta: &SeqMeta, pos: usize) -> Result<f64> {
        self.costs
            .get(&(seq, pos, *site))
            .copied()
            .ok_or_else(|| CctError::format(format!("no recorded cost for {site} at sequence {seq}, position {pos}")))
    }

    fn charged_to(&self, site: &GateSite) -> Result<Component> {
        Ok(match (site.stack, site.kind) {
            (Stack::Decoder, SubnetKind::CrossKv) => self.cross_kv_component,
            (Stack::Encoder, _) => Component::Encoder,
            (Stack::Decoder, _) => Component::Decoder,
        })
    }
}

fn stream_of(component: Component) -> Stream {
    match component {
        Component::Encoder => Stream::Source,
        Component::Decoder => Stream::Target,
    }
}

/// Executed and available flops of every token of `stream`, counting the sites that read
/// that stream and, when given, are charged to `component`.
fn token_usage(
    trace: &GateTrace,
    costs: &dyn TokenCosts,
    stream: Stream,
    component: Option<Component>,
) -> Result<Vec<(usize, usize, f64, f64)>> {
    let offsets = trace.offsets(stream);
    let mut sites = Vec::new();
    for (site, values) in &trace.sites {
        if site.stream() == stream && component.is_none_or(|c| costs.charged_to(site).is_ok_and(|s| s == c)) {
            sites.push((site, values));
        }
    }
    let mut out = Vec::with_capacity(trace.rows(stream));
    for (seq, meta) in trace.seqs.iter().enumerate() {
        for pos in 0..meta.stream(stream).len() {
            let (mut exec, mut avail) = (0.0, 0.0);
            for (site, values) in &sites {
                let c = costs.cost(site, seq, meta, pos)?;
                exec += values[offsets[seq] + pos] * c;
                avail += c;
            }
            out.push((seq, pos, exec, avail));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub symbol: usize,
    pub component: Component,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub tokens: usize,
    pub mass: f64,
}

impl ReportRow for SpreadRow {
    fn fractions(&self) -> Vec<f64> {
        vec![self.lo, self.hi, self.mass]
    }
}

/// Bin of a fraction in `[0, 1]` split into `bins` equal intervals; 1.0 falls in the last.
pub fn bin_of(fraction: f64, bins: usize) -> usize {
    ((fraction * bins as f64).floor() as usize).min(bins - 1)
}

/// Histogram over tokens of executed / available flops for one component, per symbol.
pub fn compute_spread(trace: &GateTrace, costs: &dyn TokenCosts, component: Component, bins: usize) -> Result<Report<SpreadRow>> {
    if bins == 0 {
        return Err(CctError::contract("compute_spread needs at least one bin"));
    }
    let mut counts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (seq, _, exec, avail) in token_usage(trace, costs, stream_of(component), Some(component))? {
        if avail == 0.0 {
            continue;
        }
        let symbol = trace.seqs[seq].symbol;
        counts.entry(symbol).or_insert_with(|| vec![0; bins])[bin_of(exec / avail, bins)] += 1;
    }
    if counts.is_empty() {
        return Err(CctError::contract("compute_spread over an empty trace"));
    }
    let mut rows = Vec::new();
    for (symbol, c) in counts {
        let total: usize = c.iter().sum();
        for (bin, &tokens) in c.iter().enumerate() {
            rows.push(SpreadRow {
                symbol,
                component,
                bin,
                lo: bin as f64 / bins as f64,
                hi: (bin + 1) as f64 / bins as f64,
                tokens,
                mass: tokens as f64 / total as f64,
            });
        }
    }
    Ok(Report::new(ReportKind::ComputeSpread, rows).with_meta(|m| {
        m.extra.insert("bins".into(), bins.into());
        m.extra.insert("component".into(), component.name().into());
    }))
}

/// Checks that the histogram of every symbol sums to 1 within `tol`.
pub fn spread_masses_ok(report: &Report<SpreadRow>, tol: f64) -> bool {
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    for r in &report.rows {
        *sums.entry(r.symbol).or_default() += r.mass;
    }
    sums.values().all(|s| (s - 1.0).abs() <= tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqRow {
    /// 1 for the most frequent token.
    pub rank: usize,
    pub token: usize,
    pub frequency: f64,
    pub occurrences: usize,
    pub mean_fraction: f64,
}

impl ReportRow for FreqRow {
    fn fractions(&self) -> Vec<f64> {
        vec![self.frequency, self.mean_fraction]
    }
}

/// Mean compute fraction of every token id of `stream` against its frequency rank. The
/// Spearman correlation between rank and fraction goes to the metadata.
pub fn freq_vs_compute(
    trace: &GateTrace,
    costs: &dyn TokenCosts,
    freqs: &FrequencyTable,
    stream: Stream,
) -> Result<Report<FreqRow>> {
    let ranks = freqs.ranks();
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (seq, pos, exec, avail) in token_usage(trace, costs, stream, None)? {
        let token = trace.seqs[seq].stream(stream)[pos];
        if !ranks.contains_key(&token) {
            return Err(CctError::contract(format!("token {token} is missing from the frequency table")));
        }
        if avail > 0.0 {
            let e = acc.entry(token).or_default();
            e.0 += exec / avail;
            e.1 += 1;
        }
    }
    let mut rows: Vec<FreqRow> = acc
        .into_iter()
        .map(|(token, (sum, n))| FreqRow {
            rank: ranks[&token],
            token,
            frequency: freqs.frequency(token),
            occurrences: n,
            mean_fraction: sum / n as f64,
        })
        .collect();
    rows.sort_by_key(|r| r.rank);
    let x: Vec<f64> = rows.iter().map(|r| r.rank as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_fraction).collect();
    let rho = spearman(&x, &y);
    Ok(Report::new(ReportKind::FreqVsCompute, rows).with_meta(|m| {
        m.extra.insert("stream".into(), format!("{stream:?}").to_lowercase().into());
        m.extra.insert("spearman".into(), rho.map_or(serde_json::Value::Null, Into::into));
    }))
}

/// Ranks starting at 1 with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks); `None` when either
/// side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub stack: Stack,
    pub layer: usize,
    /// `self-kv`, `self-q`, `cross-kv`, `cross-q` or `ff` (mean over the M slices).
    pub subnet: String,
    pub tokens: usize,
    pub fraction: f64,
}

impl ReportRow for LayerRow {
    fn fractions(&self) -> Vec<f64> {
        vec![self.fraction]
    }
}

fn subnet_label(kind: SubnetKind) -> &'static str {
    match kind {
        SubnetKind::SelfKv => "self-kv",
        SubnetKind::SelfQ => "self-q",
        SubnetKind::CrossKv => "cross-kv",
        SubnetKind::CrossQ => "cross-q",
        SubnetKind::Ff(_) => "ff",
    }
}

/// Activation count over token count per (layer, sub-network); feed-forward slices pooled.
pub fn layer_activation_fractions(trace: &GateTrace) -> Result<Report<LayerRow>> {
    let mut acc: BTreeMap<(Stack, usize, u8, &'static str), (f64, usize, usize)> = BTreeMap::new();
    for (site, values) in &trace.sites {
        let order = match site.kind {
            SubnetKind::SelfKv => 0,
            SubnetKind::SelfQ => 1,
            SubnetKind::CrossKv => 2,
            SubnetKind::CrossQ => 3,
            SubnetKind::Ff(_) => 4,
        };
        let e = acc.entry((site.stack, site.layer, order, subnet_label(site.kind))).or_default();
        e.0 += values.iter().sum::<f64>();
        e.1 += values.len();
        if !matches!(site.kind, SubnetKind::Ff(i) if i > 0) {
            e.2 += values.len();
        }
    }
    let rows = acc
        .into_iter()
        .map(|((stack, layer, _, subnet), (active, slots, tokens))| LayerRow {
            stack,
            layer,
            subnet: subnet.to_string(),
            tokens,
            fraction: if slots > 0 { active / slots as f64 } else { 0.0 },
        })
        .collect();
    Ok(Report::new(ReportKind::LayerActivation, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepRow {
    pub step: usize,
    /// Decoder layer, or `None` for the mean over layers.
    pub layer: Option<usize>,
    pub sequences: usize,
    pub self_q: f64,
    pub cross_q: f64,
}

impl ReportRow for TimestepRow {
    fn fractions(&self) -> Vec<f64> {
        vec![self.self_q, self.cross_q]
    }
}

/// Mean decoder self- and cross-attention query gate per decoder position, averaged over
/// layers (rows with an empty layer) and, with `per_layer`, for each layer as well.
pub fn attention_usage_by_timestep(trace: &GateTrace, per_layer: bool) -> Result<Report<TimestepRow>> {
    // (step, layer) -> (self sum, self n, cross sum, cross n)
    let mut acc: BTreeMap<(usize, usize), [f64; 4]> = BTreeMap::new();
    let mut seqs: BTreeMap<usize, usize> = BTreeMap::new();
    let offsets = trace.offsets(Stream::Target);
    for meta in &trace.seqs {
        for step in 0..meta.tgt.len() {
            *seqs.entry(step).or_default() += 1;
        }
    }
    for (site, values) in &trace.sites {
        let slot = match (site.stack, site.kind) {
            (Stack::Decoder, SubnetKind::SelfQ) => 0,
            (Stack::Decoder, SubnetKind::CrossQ) => 2,
            _ => continue,
        };
        for (seq, meta) in trace.seqs.iter().enumerate() {
            for step in 0..meta.tgt.len() {
                let e = acc.entry((step, site.layer)).or_default();
                e[slot] += values[offsets[seq] + step];
                e[slot + 1] += 1.0;
            }
        }
    }
    let mean = |s: f64, n: f64| if n > 0.0 { s / n } else { 0.0 };
    let mut rows = Vec::new();
    for (&step, &n) in &seqs {
        let layers: Vec<(&(usize, usize), &[f64; 4])> = acc.range((step, 0)..(step + 1, 0)).collect();
        if layers.is_empty() {
            continue;
        }
        let (mut s, mut c) = (0.0, 0.0);
        for (_, e) in &layers {
            s += mean(e[0], e[1]);
            c += mean(e[2], e[3]);
        }
        rows.push(TimestepRow {
            step,
            layer: None,
            sequences: n,
            self_q: s / layers.len() as f64,
            cross_q: c / layers.len() as f64,
        });
        if per_layer {
            for (&(_, layer), e) in layers {
                rows.push(TimestepRow {
                    step,
                    layer: Some(layer),
                    sequences: n,
                    self_q: mean(e[0], e[1]),
                    cross_q: mean(e[2], e[3]),
                });
            }
        }
    }
    Ok(Report::new(ReportKind::AttnByTimestep, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub symbol: usize,
    /// Budget fractions joined with `/`, one per component.
    pub budget: String,
    pub realized_fraction: f64,
    pub encoder_fraction: f64,
    pub decoder_fraction: f64,
    pub token_accuracy: f64,
    pub perplexity: f64,
}

impl ReportRow for TradeoffRow {
    fn fractions(&self) -> Vec<f64> {
        vec![
            self.realized_fraction,
            self.encoder_fraction,
            self.decoder_fraction,
            self.token_accuracy,
        ]
    }
}

fn budget_label(b: &[f64]) -> String {
    b.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("/")
}

/// Discrete-mode quality and realized compute for every control symbol of the model.
pub fn tradeoff_curve(model: &CctModel, batches: &[Batch]) -> Result<Report<TradeoffRow>> {
    let mut rows = Vec::new();
    for (symbol, budget) in model.budgets.budgets.iter().enumerate() {
        let r = evaluate(model, batches, symbol, EvalMode::Discrete)?;
        let (avail, exec) = r
            .fractions
            .iter()
            .fold((0.0, 0.0), |(a, e), f| (a + f.available, e + f.executed));
        rows.push(TradeoffRow {
            symbol,
            budget: budget_label(budget),
            realized_fraction: if avail > 0.0 { exec / avail } else { 0.0 },
            encoder_fraction: r.fraction(Component::Encoder).unwrap_or(0.0),
            decoder_fraction: r.fraction(Component::Decoder).unwrap_or(0.0),
            token_accuracy: r.token_accuracy,
            perplexity: r.perplexity,
        });
    }
    Ok(Report::new(ReportKind::TradeoffCurve, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub noise_mode: String,
    pub alpha_max: f64,
    pub symbol: usize,
    pub budget: String,
    pub final_task_loss: f64,
    pub realized_fraction: f64,
    pub token_accuracy: f64,
    pub perplexity: f64,
    /// Accuracy of this arm minus the first arm at the same symbol.
    pub accuracy_gap: f64,
}

impl ReportRow for AblationRow {
    fn fractions(&self) -> Vec<f64> {
        vec![self.realized_fraction, self.token_accuracy]
    }
}

/// One arm of a noise-schedule comparison: its schedule, final training loss and the
/// trade-off rows of the trained model.
pub struct AblationArm {
    pub name: String,
    pub schedule: crate::gate::NoiseSchedule,
    pub final_task_loss: f64,
    pub tradeoff: Report<TradeoffRow>,
}

pub fn noise_ablation(arms: &[AblationArm]) -> Result<Report<AblationRow>> {
    let first = arms.first().ok_or_else(|| CctError::contract("noise ablation needs at least one arm"))?;
    let mut rows = Vec::new();
    for arm in arms {
        for t in &arm.tradeoff.rows {
            let base = first
                .tradeoff
                .rows
                .iter()
                .find(|b| b.symbol == t.symbol)
                .ok_or_else(|| CctError::contract("ablation arms use different budget specs"))?;
            rows.push(AblationRow {
                arm: arm.name.clone(),
                noise_mode: serde_json::to_value(arm.schedule.mode)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                alpha_max: arm.schedule.alpha_max,
                symbol: t.symbol,
                budget: t.budget.clone(),
                final_task_loss: arm.final_task_loss,
                realized_fraction: t.realized_fraction,
                token_accuracy: t.token_accuracy,
                perplexity: t.perplexity,
                accuracy_gap: t.token_accuracy - base.token_accuracy,
            });
        }
    }
    Ok(Report::new(ReportKind::NoiseAblation, rows))
}
