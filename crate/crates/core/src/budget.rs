//! Flop cost model, batch budgets, utilized compute and the multi-budget loss.
//!
//! Costs count `2 × multiply-accumulates` of gated matmuls only. Layer norms, softmax,
//! nonlinearities and control networks always run; they are reported as fixed overhead.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};
use crate::tensor::{Graph, Var};
use crate::trace::{Component, GateSite, GateTrace, SeqMeta, Stack, SubnetKind};

/// Smallest budget fraction accepted for training.
pub const MIN_BUDGET_FRACTION: f64 = 0.05;

/// Layer dimensions the cost model is derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostDims {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Number of feed-forward slices.
    pub m: usize,
    pub enc_layers: usize,
    /// 0 for encoder-only models.
    pub dec_layers: usize,
    /// Nominal attended length used in the report's per-token figures.
    pub t_avg: f64,
    pub gate_hidden: usize,
    pub vocab: usize,
    pub cross_kv_component: Component,
}

/// Cost of one gated sub-network per token: `base + per_key · attended_keys`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteCost {
    pub component: Component,
    pub base: f64,
    pub per_key: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub dims: CostDims,
    pub sites: BTreeMap<GateSite, SiteCost>,
}

/// Every gate site of a model with the given layer counts, in a fixed order.
pub fn model_sites(enc_layers: usize, dec_layers: usize, m: usize) -> Vec<GateSite> {
    let mut out = Vec::new();
    for l in 0..enc_layers {
        out.push(GateSite::new(Stack::Encoder, l, SubnetKind::SelfKv));
        out.push(GateSite::new(Stack::Encoder, l, SubnetKind::SelfQ));
        out.extend((0..m).map(|i| GateSite::new(Stack::Encoder, l, SubnetKind::Ff(i))));
    }
    for l in 0..dec_layers {
        out.push(GateSite::new(Stack::Decoder, l, SubnetKind::SelfKv));
        out.push(GateSite::new(Stack::Decoder, l, SubnetKind::SelfQ));
        out.push(GateSite::new(Stack::Decoder, l, SubnetKind::CrossKv));
        out.push(GateSite::new(Stack::Decoder, l, SubnetKind::CrossQ));
        out.extend((0..m).map(|i| GateSite::new(Stack::Decoder, l, SubnetKind::Ff(i))));
    }
    out
}

/// Builds the per-gate cost table.
///
/// kv branch: `2·(2·d·d)` (key and value projections); q branch: `2·d·d + 2·d·d` for
/// query and output projections plus `2·(2·d)` per attended key for scores and context;
/// feed-forward slice: `2·(2·d·d_ff/M)`.
pub fn layer_costs(dims: &CostDims) -> Result<CostModel> {
    let named = [
        ("d", dims.d),
        ("d_ff", dims.d_ff),
        ("heads", dims.heads),
        ("m", dims.m),
        ("enc_layers", dims.enc_layers),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
        return Err(CctError::contract(format!("cost model: dimension {name} is zero")));
    }
    if dims.d_ff % dims.m != 0 {
        return Err(CctError::contract(format!("cost model: d_ff={} not divisible by M={}", dims.d_ff, dims.m)));
    }
    if !(dims.t_avg > 0.0) {
        return Err(CctError::contract("cost model: t_avg must be > 0"));
    }
    let d = dims.d as f64;
    let kv = 2.0 * (2.0 * d * d);
    let q = 2.0 * d * d + 2.0 * d * d;
    let per_key = 2.0 * (2.0 * d);
    let ff = 2.0 * (2.0 * d * (dims.d_ff / dims.m) as f64);
    let mut sites = BTreeMap::new();
    for site in model_sites(dims.enc_layers, dims.dec_layers, dims.m) {
        let component = match (site.stack, site.kind) {
            (Stack::Encoder, _) => Component::Encoder,
            (Stack::Decoder, SubnetKind::CrossKv) => dims.cross_kv_component,
            (Stack::Decoder, _) => Component::Decoder,
        };
        let (base, pk) = match site.kind {
            SubnetKind::SelfKv | SubnetKind::CrossKv => (kv, 0.0),
            SubnetKind::SelfQ | SubnetKind::CrossQ => (q, per_key),
            SubnetKind::Ff(_) => (ff, 0.0),
        };
        sites.insert(
            site,
            SiteCost {
                component,
                base,
                per_key: pk,
            },
        );
    }
    Ok(CostModel { dims: dims.clone(), sites })
}

impl CostModel {
    pub fn site(&self, site: &GateSite) -> Result<&SiteCost> {
        self.sites
            .get(site)
            .ok_or_else(|| CctError::contract(format!("no cost entry for gate {site}")))
    }

    pub fn component(&self, site: &GateSite) -> Result<Component> {
        Ok(self.site(site)?.component)
    }

    /// Components that own at least one gate.
    pub fn components(&self) -> Vec<Component> {
        Component::ALL
            .into_iter()
            .filter(|c| self.sites.values().any(|s| s.component == *c))
            .collect()
    }

    /// Keys attended by the query of token `pos`: the whole source for encoder self- and
    /// cross-attention, the causal prefix for decoder self-attention.
    pub fn attended_keys(site: &GateSite, meta: &SeqMeta, pos: usize) -> usize {
        match (site.stack, site.kind) {
            (Stack::Decoder, SubnetKind::SelfQ) => pos + 1,
            _ => meta.src.len(),
        }
    }

    /// Flops of `site` applied to token `pos` of a sequence.
    pub fn token_cost(&self, site: &GateSite, meta: &SeqMeta, pos: usize) -> Result<f64> {
        let c = self.site(site)?;
        Ok(c.base + c.per_key * Self::attended_keys(site, meta, pos) as f64)
    }

    /// Per-token cost at the nominal length `t_avg`.
    pub fn nominal_cost(&self, site: &GateSite) -> Result<f64> {
        let c = self.site(site)?;
        Ok(c.base + c.per_key * self.dims.t_avg)
    }

    /// Per-row costs of `site` over the packed stream of `seqs`; rows of sequences for
    /// which `include` is false get cost 0.
    pub fn row_costs(&self, site: &GateSite, seqs: &[SeqMeta], include: impl Fn(usize) -> bool) -> Result<Vec<f64>> {
        let c = *self.site(site)?;
        let mut out = Vec::new();
        for (i, meta) in seqs.iter().enumerate() {
            let n = meta.stream(site.stream()).len();
            if include(i) {
                out.extend((0..n).map(|pos| c.base + c.per_key * Self::attended_keys(site, meta, pos) as f64));
            } else {
                out.extend(std::iter::repeat_n(0.0, n));
            }
        }
        Ok(out)
    }

    /// Maximum compute of `component` over the given sequences.
    pub fn available(&self, seqs: &[SeqMeta], component: Component, include: impl Fn(usize) -> bool) -> f64 {
        let mut total = 0.0;
        for (site, c) in &self.sites {
            if c.component != component {
                continue;
            }
            for (i, meta) in seqs.iter().enumerate() {
                if !include(i) {
                    continue;
                }
                for pos in 0..meta.stream(site.stream()).len() {
                    total += c.base + c.per_key * Self::attended_keys(site, meta, pos) as f64;
                }
            }
        }
        total
    }

    /// Always-executed work per token that the budget cannot modulate.
    pub fn fixed_overhead(&self) -> FixedOverhead {
        let d = self.dims.d as f64;
        let h = self.dims.gate_hidden as f64;
        let m = self.dims.m as f64;
        let (el, dl) = (self.dims.enc_layers as f64, self.dims.dec_layers as f64);
        // one kv net, one q net and one M-output ff net per attention/ff block
        let net = |arity: f64| 2.0 * (d * h + h * arity);
        let control_networks = el * (2.0 * net(1.0) + net(m)) + dl * (4.0 * net(1.0) + net(m));
        let stacks = if self.dims.dec_layers > 0 { 2.0 } else { 1.0 };
        // final layer norm per stack plus the layer norms inside each block
        let ln_count = el * (4.0 + 2.0 * m) + dl * (8.0 + 2.0 * m) + stacks;
        FixedOverhead {
            control_networks,
            layer_norms: ln_count * 8.0 * d,
            output_projection: 2.0 * d * self.dims.vocab as f64,
        }
    }

    pub fn report(&self) -> CostReport {
        let gates = self
            .sites
            .iter()
            .map(|(site, c)| GateCostRow {
                site: site.to_string(),
                layer: site.layer,
                subnet_kind: site.kind_label(),
                component: c.component,
                base_flops: c.base,
                per_key_flops: c.per_key,
                nominal_flops: c.base + c.per_key * self.dims.t_avg,
            })
            .collect::<Vec<_>>();
        let mut nominal_per_token = BTreeMap::new();
        for g in &gates {
            *nominal_per_token.entry(g.component.name().to_string()).or_insert(0.0) += g.nominal_flops;
        }
        CostReport {
            dims: self.dims.clone(),
            gates,
            nominal_per_token,
            fixed_overhead: self.fixed_overhead(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedOverhead {
    pub control_networks: f64,
    pub layer_norms: f64,
    pub output_projection: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateCostRow {
    pub site: String,
    pub layer: usize,
    pub subnet_kind: String,
    pub component: Component,
    pub base_flops: f64,
    pub per_key_flops: f64,
    pub nominal_flops: f64,
}

/// JSON cost-model dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub dims: CostDims,
    pub gates: Vec<GateCostRow>,
    pub nominal_per_token: BTreeMap<String, f64>,
    pub fixed_overhead: FixedOverhead,
}

/// The budget list: one tuple of per-component fractions per control symbol. Tuples have
/// one entry for encoder-only models and two (`encoder`, `decoder`) for seq2seq.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BudgetSpec {
    pub budgets: Vec<Vec<f64>>,
}

impl BudgetSpec {
    pub fn new(budgets: Vec<Vec<f64>>) -> Result<Self> {
        let spec = BudgetSpec { budgets };
        spec.validate()?;
        Ok(spec)
    }

    /// Same fraction for every component, one symbol per entry.
    pub fn scalar(values: &[f64], components: usize) -> Result<Self> {
        BudgetSpec::new(values.iter().map(|&p| vec![p; components]).collect())
    }

    /// Every `(encoder, decoder)` pair from the two lists.
    pub fn cross_product(enc: &[f64], dec: &[f64]) -> Result<Self> {
        BudgetSpec::new(enc.iter().flat_map(|&e| dec.iter().map(move |&d| vec![e, d])).collect())
    }

    /// The translation recipe: `{1,1,1,.5,.33,.2}²`, 36 symbols.
    pub fn translation_default() -> Self {
        let p = [1.0, 1.0, 1.0, 0.5, 0.33, 0.2];
        BudgetSpec::cross_product(&p, &p).expect("static spec is valid")
    }

    /// The masked-LM recipe: `[0.8, 0.8, 0.8, 0.5, 0.33, 0.2]`, 6 symbols.
    pub fn mlm_default() -> Self {
        BudgetSpec::scalar(&[0.8, 0.8, 0.8, 0.5, 0.33, 0.2], 1).expect("static spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .budgets
            .first()
            .ok_or_else(|| CctError::config("budgets", "must list at least one budget"))?;
        if first.is_empty() || first.len() > 2 {
            return Err(CctError::config("budgets[0]", "needs one or two fractions"));
        }
        for (i, b) in self.budgets.iter().enumerate() {
            if b.len() != first.len() {
                return Err(CctError::config(
                    format!("budgets[{i}]"),
                    format!("has {} fractions, budgets[0] has {}", b.len(), first.len()),
                ));
            }
            for (j, &p) in b.iter().enumerate() {
                if !(MIN_BUDGET_FRACTION..=1.0).contains(&p) {
                    return Err(CctError::config(
                        format!("budgets[{i}][{j}]"),
                        format!("fraction {p} outside [{MIN_BUDGET_FRACTION}, 1]"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.budgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.budgets.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.budgets.first().map_or(0, Vec::len)
    }

    /// Target fraction of `component` for `symbol`. With one-entry tuples the single value
    /// applies to every component.
    pub fn fraction(&self, symbol: usize, component: Component) -> Result<f64> {
        let b = self.budgets.get(symbol).ok_or_else(|| {
            CctError::index(format!("control symbol {symbol} outside a spec of {} budgets", self.len()))
        })?;
        Ok(match (b.len(), component) {
            (1, _) => b[0],
            (_, Component::Encoder) => b[0],
            (_, Component::Decoder) => b[1],
        })
    }
}

/// I.i.d. uniform symbol per sequence.
pub fn assign_budgets<R: Rng + ?Sized>(batch: usize, spec: &BudgetSpec, rng: &mut R) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(CctError::contract("assign_budgets: batch size must be >= 1"));
    }
    if spec.is_empty() {
        return Err(CctError::contract("assign_budgets: empty budget spec"));
    }
    Ok((0..batch).map(|_| rng.random_range(0..spec.len())).collect())
}

/// `p ·` maximum compute of `component` over the trace's sequences.
pub fn batch_budget(p: f64, trace: &GateTrace, costs: &CostModel, component: Component) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CctError::contract(format!("budget fraction {p} outside [0, 1]")));
    }
    Ok(p * costs.available(&trace.seqs, component, |_| true))
}

/// `Σ g·C` over every token and every gate of `component`.
pub fn utilized_compute(trace: &GateTrace, costs: &CostModel, component: Component) -> Result<f64> {
    utilized_subset(trace, costs, component, |_| true)
}

fn utilized_subset(
    trace: &GateTrace,
    costs: &CostModel,
    component: Component,
    include: impl Fn(usize) -> bool + Copy,
) -> Result<f64> {
    let mut total = 0.0;
    for (site, c) in &costs.sites {
        if c.component != component {
            continue;
        }
        let values = trace
            .sites
            .get(site)
            .ok_or_else(|| CctError::contract(format!("trace has no entry for gate {site}")))?;
        let w = costs.row_costs(site, &trace.seqs, include)?;
        total += values.iter().zip(&w).map(|(g, c)| g * c).sum::<f64>();
    }
    Ok(total)
}

/// `|C_budget − C_util| / C_budget`.
pub fn budget_loss(c_budget: f64, c_util: f64) -> Result<f64> {
    if !(c_budget > 0.0) {
        return Err(CctError::contract(format!("budget loss needs C_budget > 0, got {c_budget}")));
    }
    Ok((c_budget - c_util).abs() / c_budget)
}

/// One `(symbol, component)` term of the multi-budget loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetTerm {
    pub symbol: usize,
    pub component: Component,
    pub sequences: usize,
    pub budget: f64,
    pub available: f64,
    pub utilized: f64,
    pub loss: f64,
}

impl BudgetTerm {
    pub fn fraction(&self) -> f64 {
        self.utilized / self.available
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiBudgetLoss {
    pub total: f64,
    pub terms: Vec<BudgetTerm>,
}

fn symbol_groups(seqs: &[SeqMeta], spec: &BudgetSpec) -> Result<BTreeMap<usize, usize>> {
    let mut groups = BTreeMap::new();
    for s in seqs {
        if s.symbol >= spec.len() {
            return Err(CctError::index(format!(
                "control symbol {} outside a spec of {} budgets",
                s.symbol,
                spec.len()
            )));
        }
        *groups.entry(s.symbol).or_insert(0) += 1;
    }
    Ok(groups)
}

/// `Σ_i Σ_j L(B_i, j)` over the non-empty symbol sub-batches and the components present
/// in the cost model.
pub fn multi_budget_loss(trace: &GateTrace, spec: &BudgetSpec, costs: &CostModel) -> Result<MultiBudgetLoss> {
    let mut terms = Vec::new();
    for (&symbol, &count) in &symbol_groups(&trace.seqs, spec)? {
        let include = |i: usize| trace.seqs[i].symbol == symbol;
        for component in costs.components() {
            let p = spec.fraction(symbol, component)?;
            let available = costs.available(&trace.seqs, component, include);
            let budget = p * available;
            let utilized = utilized_subset(trace, costs, component, include)?;
            terms.push(BudgetTerm {
                symbol,
                component,
                sequences: count,
                budget,
                available,
                utilized,
                loss: budget_loss(budget, utilized)?,
            });
        }
    }
    Ok(MultiBudgetLoss {
        total: terms.iter().map(|t| t.loss).sum(),
        terms,
    })
}

/// Tape form of [`multi_budget_loss`]. `gates` maps every site to its `[rows × 1]` gate
/// column over the packed stream of `seqs`. Returns `None` when the model has no gates.
pub fn multi_budget_loss_var(
    g: &mut Graph,
    gates: &BTreeMap<GateSite, Var>,
    seqs: &[SeqMeta],
    spec: &BudgetSpec,
    costs: &CostModel,
) -> Result<(Option<Var>, Vec<BudgetTerm>)> {
    let mut total: Option<Var> = None;
    let mut terms = Vec::new();
    for (&symbol, &count) in &symbol_groups(seqs, spec)? {
        let include = |i: usize| seqs[i].symbol == symbol;
        for component in costs.components() {
            let p = spec.fraction(symbol, component)?;
            let available = costs.available(seqs, component, include);
            let budget = p * available;
            if !(budget > 0.0) {
                return Err(CctError::contract(format!(
                    "budget loss needs C_budget > 0 (symbol {symbol}, {})",
                    component.name()
                )));
            }
            let mut util: Option<Var> = None;
            for (site, c) in &costs.sites {
                if c.component != component {
                    continue;
                }
                let gate = *gates
                    .get(site)
                    .ok_or_else(|| CctError::contract(format!("no gate values for {site}")))?;
                let w = costs.row_costs(site, seqs, include)?;
                let part = g.weighted_sum(gate, w)?;
                util = Some(match util {
                    Some(u) => g.add(u, part)?,
                    None => part,
                });
            }
            let Some(util) = util else { continue };
            let diff = g.add_scalar(util, -budget);
            let abs = g.abs(diff);
            let loss = g.scale(abs, 1.0 / budget);
            terms.push(BudgetTerm {
                symbol,
                component,
                sequences: count,
                budget,
                available,
                utilized: g.value(util).item(),
                loss: g.value(loss).item(),
            });
            total = Some(match total {
                Some(t) => g.add(t, loss)?,
                None => loss,
            });
        }
    }
    Ok((total, terms))
}
