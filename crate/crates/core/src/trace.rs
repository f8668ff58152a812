//! Gate sites and recorded gate activations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};

/// Which stack a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Budget component a gate's cost is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Encoder,
    Decoder,
}

impl Component {
    pub const ALL: [Component; 2] = [Component::Encoder, Component::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
        }
    }
}

/// Token stream a gate reads: source tokens (encoder side) or decoder input tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Source,
    Target,
}

/// One independently gated sub-network kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubnetKind {
    SelfKv,
    SelfQ,
    CrossKv,
    CrossQ,
    /// Feed-forward slice `i` of the M-way split.
    Ff(usize),
}

impl SubnetKind {
    pub fn is_kv(self) -> bool {
        matches!(self, SubnetKind::SelfKv | SubnetKind::CrossKv)
    }

    pub fn is_q(self) -> bool {
        matches!(self, SubnetKind::SelfQ | SubnetKind::CrossQ)
    }
}

/// A gate location: stack, layer index and sub-network kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GateSite {
    pub stack: Stack,
    pub layer: usize,
    pub kind: SubnetKind,
}

impl GateSite {
    pub fn new(stack: Stack, layer: usize, kind: SubnetKind) -> Self {
        GateSite { stack, layer, kind }
    }

    pub fn stream(&self) -> Stream {
        match (self.stack, self.kind) {
            (Stack::Encoder, _) | (Stack::Decoder, SubnetKind::CrossKv) => Stream::Source,
            (Stack::Decoder, _) => Stream::Target,
        }
    }

    /// Label used in the `subnet_kind` column of trace files, e.g. `enc-self-kv`, `dec-ff-1`.
    pub fn kind_label(&self) -> String {
        let stack = match self.stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        let kind = match self.kind {
            SubnetKind::SelfKv => "self-kv".to_string(),
            SubnetKind::SelfQ => "self-q".to_string(),
            SubnetKind::CrossKv => "cross-kv".to_string(),
            SubnetKind::CrossQ => "cross-q".to_string(),
            SubnetKind::Ff(i) => format!("ff-{i}"),
        };
        format!("{stack}-{kind}")
    }

    /// Inverse of [`GateSite::kind_label`] given the layer column.
    pub fn parse(layer: usize, label: &str) -> Result<Self> {
        let bad = || CctError::format(format!("unknown subnet kind `{label}`"));
        let (stack, rest) = label.split_once('-').ok_or_else(bad)?;
        let stack = match stack {
            "enc" => Stack::Encoder,
            "dec" => Stack::Decoder,
            _ => return Err(bad()),
        };
        let kind = match rest {
            "self-kv" => SubnetKind::SelfKv,
            "self-q" => SubnetKind::SelfQ,
            "cross-kv" if stack == Stack::Decoder => SubnetKind::CrossKv,
            "cross-q" if stack == Stack::Decoder => SubnetKind::CrossQ,
            _ => {
                let i = rest.strip_prefix("ff-").ok_or_else(bad)?;
                SubnetKind::Ff(i.parse().map_err(|_| bad())?)
            }
        };
        Ok(GateSite { stack, layer, kind })
    }
}

impl fmt::Display for GateSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind_label(), self.layer)
    }
}

impl FromStr for GateSite {
    type Err = CctError;

    fn from_str(s: &str) -> Result<Self> {
        let (label, layer) = s
            .rsplit_once('@')
            .ok_or_else(|| CctError::format(format!("gate site `{s}` lacks `@layer`")))?;
        let layer = layer
            .parse()
            .map_err(|_| CctError::format(format!("bad layer in gate site `{s}`")))?;
        GateSite::parse(layer, label)
    }
}

/// Per-sequence data carried by a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqMeta {
    /// Control symbol the sequence was run with.
    pub symbol: usize,
    /// Source tokens (the encoder stream).
    pub src: Vec<usize>,
    /// Decoder input tokens (empty for encoder-only models).
    pub tgt: Vec<usize>,
}

impl SeqMeta {
    pub fn stream(&self, stream: Stream) -> &[usize] {
        match stream {
            Stream::Source => &self.src,
            Stream::Target => &self.tgt,
        }
    }
}

/// Recorded gate activations for a batch. Values for one site are packed over the rows
/// of the site's stream: sequence by sequence, position by position. Padding never
/// appears because streams are stored unpadded.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    /// True for `{0,1}` traces from discrete execution.
    pub binary: bool,
    pub seqs: Vec<SeqMeta>,
    pub sites: BTreeMap<GateSite, Vec<f64>>,
}

/// One flattened trace row.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub seq: usize,
    pub pos: usize,
    pub site: GateSite,
    pub value: f64,
    pub token: usize,
    pub symbol: usize,
}

impl GateTrace {
    pub fn new(binary: bool, seqs: Vec<SeqMeta>) -> Self {
        GateTrace {
            binary,
            seqs,
            sites: BTreeMap::new(),
        }
    }

    /// Starting row of every sequence in `stream`, plus the total row count at the end.
    pub fn offsets(&self, stream: Stream) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.seqs.len() + 1);
        let mut acc = 0;
        off.push(0);
        for s in &self.seqs {
            acc += s.stream(stream).len();
            off.push(acc);
        }
        off
    }

    pub fn rows(&self, stream: Stream) -> usize {
        self.seqs.iter().map(|s| s.stream(stream).len()).sum()
    }

    /// Records the values of one site; `values` must cover every row of the site's stream.
    pub fn insert(&mut self, site: GateSite, values: Vec<f64>) -> Result<()> {
        let rows = self.rows(site.stream());
        if values.len() != rows {
            return Err(CctError::dim(format!(
                "trace for {site}: {} values for {rows} tokens",
                values.len()
            )));
        }
        self.sites.insert(site, values);
        Ok(())
    }

    pub fn get(&self, seq: usize, pos: usize, site: &GateSite) -> Option<f64> {
        let meta = self.seqs.get(seq)?;
        if pos >= meta.stream(site.stream()).len() {
            return None;
        }
        let off = self.offsets(site.stream())[seq];
        self.sites.get(site).map(|v| v[off + pos])
    }

    pub fn entries(&self) -> Vec<TraceEntry> {
        let src_off = self.offsets(Stream::Source);
        let tgt_off = self.offsets(Stream::Target);
        let mut out = Vec::new();
        for (seq, meta) in self.seqs.iter().enumerate() {
            for (site, values) in &self.sites {
                let (off, toks) = match site.stream() {
                    Stream::Source => (src_off[seq], &meta.src),
                    Stream::Target => (tgt_off[seq], &meta.tgt),
                };
                for (pos, &token) in toks.iter().enumerate() {
                    out.push(TraceEntry {
                        seq,
                        pos,
                        site: *site,
                        value: values[off + pos],
                        token,
                        symbol: meta.symbol,
                    });
                }
            }
        }
        out
    }

    /// Rebuilds a trace from flattened rows. Every site present must cover every token
    /// of its stream; otherwise this is a format error.
    pub fn from_entries(binary: bool, entries: &[TraceEntry]) -> Result<Self> {
        let n_seqs = entries.iter().map(|e| e.seq + 1).max().unwrap_or(0);
        let mut src: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n_seqs];
        let mut tgt: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n_seqs];
        let mut symbol: Vec<Option<usize>> = vec![None; n_seqs];
        for e in entries {
            let map = match e.site.stream() {
                Stream::Source => &mut src[e.seq],
                Stream::Target => &mut tgt[e.seq],
            };
            if let Some(prev) = map.insert(e.pos, e.token) {
                if prev != e.token {
                    return Err(CctError::format(format!(
                        "sequence {} position {}: conflicting tokens {prev} and {}",
                        e.seq, e.pos, e.token
                    )));
                }
            }
            match symbol[e.seq] {
                Some(s) if s != e.symbol => {
                    return Err(CctError::format(format!(
                        "sequence {} carries symbols {s} and {}",
                        e.seq, e.symbol
                    )))
                }
                _ => symbol[e.seq] = Some(e.symbol),
            }
        }
        let to_vec = |m: &BTreeMap<usize, usize>, seq: usize| -> Result<Vec<usize>> {
            m.iter()
                .enumerate()
                .map(|(i, (&p, &t))| {
                    if i == p {
                        Ok(t)
                    } else {
                        Err(CctError::format(format!("sequence {seq}: missing position {i}")))
                    }
                })
                .collect()
        };
        let mut seqs = Vec::with_capacity(n_seqs);
        for i in 0..n_seqs {
            seqs.push(SeqMeta {
                symbol: symbol[i].ok_or_else(|| CctError::format(format!("sequence {i} has no entries")))?,
                src: to_vec(&src[i], i)?,
                tgt: to_vec(&tgt[i], i)?,
            });
        }
        let mut trace = GateTrace::new(binary, seqs);
        let src_off = trace.offsets(Stream::Source);
        let tgt_off = trace.offsets(Stream::Target);
        let mut filled: BTreeMap<GateSite, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
        for e in entries {
            let stream = e.site.stream();
            let rows = trace.rows(stream);
            let (vals, seen) = filled
                .entry(e.site)
                .or_insert_with(|| (vec![0.0; rows], vec![false; rows]));
            let off = match stream {
                Stream::Source => src_off[e.seq],
                Stream::Target => tgt_off[e.seq],
            };
            vals[off + e.pos] = e.value;
            seen[off + e.pos] = true;
        }
        for (site, (vals, seen)) in filled {
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(CctError::format(format!("{site}: no entry for token row {missing}")));
            }
            if binary && vals.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(CctError::format(format!("{site}: non-binary value in a binary trace")));
            }
            trace.sites.insert(site, vals);
        }
        Ok(trace)
    }

    /// Keeps only sequences for which `keep(seq_index, meta)` holds.
    pub fn filter_seqs(&self, keep: impl Fn(usize, &SeqMeta) -> bool) -> GateTrace {
        let src_off = self.offsets(Stream::Source);
        let tgt_off = self.offsets(Stream::Target);
        let kept: Vec<usize> = (0..self.seqs.len()).filter(|&i| keep(i, &self.seqs[i])).collect();
        let mut out = GateTrace::new(self.binary, kept.iter().map(|&i| self.seqs[i].clone()).collect());
        for (site, vals) in &self.sites {
            let off = match site.stream() {
                Stream::Source => &src_off,
                Stream::Target => &tgt_off,
            };
            let v = kept.iter().flat_map(|&i| vals[off[i]..off[i + 1]].iter().copied()).collect();
            out.sites.insert(*site, v);
        }
        out
    }

    /// Joins traces over the same gate sites, renumbering sequences in order.
    pub fn concat(traces: &[GateTrace]) -> Result<GateTrace> {
        let Some(first) = traces.first() else {
            return Ok(GateTrace::new(true, Vec::new()));
        };
        let mut out = GateTrace::new(traces.iter().all(|t| t.binary), Vec::new());
        for site in first.sites.keys() {
            out.sites.insert(*site, Vec::new());
        }
        for t in traces {
            if !t.sites.keys().eq(first.sites.keys()) {
                return Err(CctError::contract("cannot join traces recorded at different gate sites"));
            }
            out.seqs.extend(t.seqs.iter().cloned());
            for (site, v) in &t.sites {
                out.sites.get_mut(site).expect("same sites").extend_from_slice(v);
            }
        }
        Ok(out)
    }
}

pub const TRACE_CSV_HEADER: [&str; 8] = [
    "seq_id",
    "position",
    "layer",
    "subnet_kind",
    "gate",
    "cost_flops",
    "token",
    "symbol",
];

/// Writes a trace as CSV. `cost` gives the per-token flop cost of an entry.
pub fn write_trace_csv<W: Write>(
    out: W,
    trace: &GateTrace,
    cost: impl Fn(&TraceEntry, &SeqMeta) -> Result<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| CctError::format(format!("writing trace: {e}"));
    w.write_record(TRACE_CSV_HEADER).map_err(err)?;
    for e in trace.entries() {
        let c = cost(&e, &trace.seqs[e.seq])?;
        w.write_record([
            e.seq.to_string(),
            e.pos.to_string(),
            e.site.layer.to_string(),
            e.site.kind_label(),
            e.value.to_string(),
            c.to_string(),
            e.token.to_string(),
            e.symbol.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CctError::format(format!("writing trace: {e}")))?;
    Ok(())
}

/// A parsed trace file: the trace plus the cost column keyed by entry.
#[derive(Clone, Debug)]
pub struct TraceFile {
    pub trace: GateTrace,
    pub costs: BTreeMap<(usize, usize, GateSite), f64>,
}

/// Parses a trace CSV. The trace is marked binary when every gate value is 0 or 1.
pub fn read_trace_csv<R: Read>(input: R) -> Result<TraceFile> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = r
        .headers()
        .map_err(|e| CctError::format(format!("trace header: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != TRACE_CSV_HEADER {
        return Err(CctError::format(format!(
            "trace header must be `{}`",
            TRACE_CSV_HEADER.join(",")
        )));
    }
    let mut entries = Vec::new();
    let mut costs = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CctError::format(format!("trace row {}: {e}", line + 2)))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let int = |i: usize| -> Result<usize> {
            field(i).parse().map_err(|_| {
                CctError::format(format!(
                    "trace row {}: `{}` is not a valid {}",
                    line + 2,
                    field(i),
                    TRACE_CSV_HEADER[i]
                ))
            })
        };
        let real = |i: usize| -> Result<f64> {
            let v: f64 = field(i).parse().map_err(|_| {
                CctError::format(format!("trace row {}: bad {}", line + 2, TRACE_CSV_HEADER[i]))
            })?;
            if !v.is_finite() {
                return Err(CctError::format(format!("trace row {}: non-finite {}", line + 2, TRACE_CSV_HEADER[i])));
            }
            Ok(v)
        };
        let site = GateSite::parse(int(2)?, field(3))?;
        let value = real(4)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(CctError::format(format!("trace row {}: gate {value} outside [0,1]", line + 2)));
        }
        let e = TraceEntry {
            seq: int(0)?,
            pos: int(1)?,
            site,
            value,
            token: int(6)?,
            symbol: int(7)?,
        };
        let cost = real(5)?;
        if cost < 0.0 {
            return Err(CctError::format(format!("trace row {}: negative cost", line + 2)));
        }
        if costs.insert((e.seq, e.pos, e.site), cost).is_some() {
            return Err(CctError::format(format!("trace row {}: duplicate entry", line + 2)));
        }
        entries.push(e);
    }
    let binary = entries.iter().all(|e| e.value == 0.0 || e.value == 1.0);
    Ok(TraceFile {
        trace: GateTrace::from_entries(binary, &entries)?,
        costs,
    })
}
