use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cct::analysis::{
    attention_usage_by_timestep, compute_spread, freq_vs_compute, layer_activation_fractions, tradeoff_curve,
    RecordedCosts, Report, ReportRow, DEFAULT_BINS,
};
use cct::config::ExperimentConfig;
use cct::data::{parse_corpus, token_frequencies, TaskKind, TaskSpec};
use cct::infer::{beam_decode, greedy_decode};
use cct::model::{checkpoint_id, decode_checkpoint, save_checkpoint, CctModel, ModelKind};
use cct::trace::{read_trace_csv, write_trace_csv, Component, GateTrace, Stream};
use cct::gate::GateForcing;
use cct::train::{evaluate_forced, heldout_batches, write_metrics_line, EvalMode, Trainer};
use cct::CctError;

#[derive(Parser)]
#[command(name = "cct", version, about = "Conditional computation Transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the checkpoint and metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out data at one control symbol.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        symbol: usize,
        #[arg(long, value_enum, default_value = "discrete")]
        mode: Mode,
        /// Force every gate on, for checkpoints trained with `train.ungated`.
        #[arg(long)]
        all_gates_on: bool,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode source sequences and optionally record the gate trace.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        symbol: usize,
        /// Space-separated token ids, bos and eos included.
        #[arg(long, conflicts_with = "input")]
        src: Option<String>,
        /// Corpus file with one `src<TAB>tgt` pair per line.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        #[arg(long, default_value_t = 0.6)]
        length_penalty: f64,
        /// Gate trace CSV of the greedy decodes.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Gate-usage analyses.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Print the per-gate cost table of a config or checkpoint as JSON.
    CostModel {
        #[arg(long, required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment config supplying the task; defaults to the toy task for the model kind.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batches: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 99)]
    seed: u64,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Report CSV; a `.json` metadata sidecar is written next to it. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only sequences run with this control symbol.
    #[arg(long)]
    symbol: Option<usize>,
}

#[derive(Subcommand)]
enum AnalyzeKind {
    /// Histogram of per-token realized compute fractions.
    ComputeSpread {
        #[command(flatten)]
        t: TraceArgs,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, value_enum, default_value = "encoder")]
        component: ComponentArg,
        #[arg(long, value_enum, default_value = "decoder")]
        cross_kv: ComponentArg,
    },
    /// Mean compute fraction per token against its corpus frequency rank.
    FreqVsCompute {
        #[command(flatten)]
        t: TraceArgs,
        /// Corpus the token frequencies are counted on.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "source")]
        stream: StreamArg,
    },
    /// Fraction of tokens activating each layer's sub-networks.
    LayerActivation {
        #[command(flatten)]
        t: TraceArgs,
    },
    /// Decoder self- and cross-attention q-gate usage per decoding step.
    AttnByTimestep {
        #[command(flatten)]
        t: TraceArgs,
        #[arg(long)]
        per_layer: bool,
    },
    /// Discrete-mode accuracy and realized compute for every control symbol.
    TradeoffCurve {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Continuous,
    Discrete,
}

#[derive(Clone, Copy, ValueEnum)]
enum ComponentArg {
    Encoder,
    Decoder,
}

impl From<ComponentArg> for Component {
    fn from(c: ComponentArg) -> Self {
        match c {
            ComponentArg::Encoder => Component::Encoder,
            ComponentArg::Decoder => Component::Decoder,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StreamArg {
    Source,
    Target,
}

type Res<T> = Result<T, CctError>;

fn io_err(path: &Path, e: std::io::Error) -> CctError {
    CctError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_model(path: &Path) -> Res<(CctModel, String, usize)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let id = checkpoint_id(&bytes);
    let ck = decode_checkpoint(&bytes)?;
    let step = ck.header.step;
    Ok((ck.into_model(None)?, id, step))
}

fn task_for(model: &CctModel, config: Option<&Path>) -> Res<TaskSpec> {
    match config {
        Some(p) => Ok(ExperimentConfig::load(p)?.task),
        None => Ok(TaskSpec {
            kind: match model.config.kind {
                ModelKind::Seq2seq => TaskKind::ToyTranslation,
                ModelKind::Mlm => TaskKind::Mlm,
            },
            vocab: model.config.vocab,
            ..TaskSpec::default()
        }),
    }
}

fn to_json(v: &impl serde::Serialize) -> Res<String> {
    serde_json::to_string_pretty(v).map_err(|e| CctError::Format(e.to_string()))
}

fn emit(text: &str, out: Option<&Path>) -> Res<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_report<R: ReportRow>(report: &Report<R>, out: Option<&Path>) -> Res<()> {
    report.validate()?;
    match out {
        Some(p) => report.write(p).map(|_| ()),
        None => emit(&report.to_csv()?, None),
    }
}

fn forcing(all_on: bool) -> GateForcing {
    if all_on {
        GateForcing::All(true)
    } else {
        GateForcing::None
    }
}

fn train(config: &Path, out: &Path) -> Res<()> {
    let cfg = ExperimentConfig::load(config)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    std::fs::write(out.join("config.json"), to_json(&cfg)? + "\n").map_err(|e| io_err(out, e))?;
    let model = CctModel::new(cfg.model.clone(), cfg.budgets())?;
    let mut trainer = Trainer::new(model, cfg.task.clone(), cfg.train.clone(), cfg.noise)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?);
    let heldout = if cfg.train.eval_every > 0 {
        heldout_batches(&cfg.task, cfg.train.eval_batches.max(1), cfg.train.batch_size, cfg.train.seed)?
    } else {
        Vec::new()
    };
    let forced = forcing(cfg.train.ungated);
    for _ in 0..cfg.train.steps {
        let m = trainer.train_step()?;
        write_metrics_line(&mut metrics, &m)?;
        if cfg.train.eval_every > 0 && trainer.step() % cfg.train.eval_every == 0 {
            for symbol in 0..trainer.model.budgets.len() {
                let r = evaluate_forced(&trainer.model, &heldout, symbol, EvalMode::Discrete, &forced)?;
                let line = serde_json::json!({ "step": trainer.step(), "eval": r });
                write_metrics_line(&mut metrics, &line)?;
            }
        }
    }
    metrics.flush().map_err(|e| io_err(&metrics_path, e))?;
    let ck = out.join("checkpoint.cct");
    save_checkpoint(&trainer.model, trainer.step(), &ck)?;
    eprintln!("wrote {} after {} steps", ck.display(), trainer.step());
    Ok(())
}

fn eval(data: &DataArgs, symbol: usize, mode: Mode, all_on: bool, out: Option<&Path>) -> Res<()> {
    let (model, id, step) = load_model(&data.checkpoint)?;
    let task = task_for(&model, data.config.as_deref())?;
    let batches = heldout_batches(&task, data.batches, data.batch_size, data.seed)?;
    let mode = match mode {
        Mode::Continuous => EvalMode::Continuous,
        Mode::Discrete => EvalMode::Discrete,
    };
    let r = evaluate_forced(&model, &batches, symbol, mode, &forcing(all_on))?;
    let (avail, exec) = r.fractions.iter().fold((0.0, 0.0), |(a, e), f| (a + f.available, e + f.executed));
    let doc = serde_json::json!({
        "checkpoint_id": id,
        "checkpoint_step": step,
        "dataset_seed": data.seed,
        "symbol": symbol,
        "budget": model.budgets.budgets[symbol],
        "mode": r.mode,
        "token_accuracy": r.token_accuracy,
        "perplexity": r.perplexity,
        "tokens": r.tokens,
        "components": r.fractions,
        "available": avail,
        "executed": exec,
        "fraction": if avail > 0.0 { exec / avail } else { 0.0 },
    });
    emit(&(to_json(&doc)? + "\n"), out)
}

fn parse_ids(s: &str) -> Res<Vec<usize>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| CctError::Format(format!("`{t}` is not a token id"))))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn decode(
    checkpoint: &Path,
    symbol: usize,
    src: Option<&str>,
    input: Option<&Path>,
    beam: usize,
    max_len: usize,
    length_penalty: f64,
    trace: Option<&Path>,
) -> Res<()> {
    let (model, _, _) = load_model(checkpoint)?;
    let sources = match (src, input) {
        (Some(s), _) => vec![parse_ids(s)?],
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            parse_corpus(&text)?.into_iter().map(|(s, _)| s).collect()
        }
        (None, None) => return Err(CctError::Contract("give --src or --input".into())),
    };
    let mut traces = Vec::new();
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for s in &sources {
        let greedy = greedy_decode(&model, s, symbol, max_len)?;
        let tokens = if beam > 1 {
            beam_decode(&model, s, symbol, beam, max_len, length_penalty)?.tokens
        } else {
            greedy.tokens.clone()
        };
        let line = tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        writeln!(w, "{line}").map_err(|e| io_err(Path::new("stdout"), e))?;
        traces.push(greedy.trace);
    }
    if let Some(p) = trace {
        let joined = GateTrace::concat(&traces)?;
        let f = File::create(p).map_err(|e| io_err(p, e))?;
        write_trace_csv(BufWriter::new(f), &joined, |e, meta| model.costs.token_cost(&e.site, meta, e.pos))?;
    }
    Ok(())
}

fn load_trace(t: &TraceArgs) -> Res<(cct::trace::TraceFile, String)> {
    let bytes = std::fs::read(&t.trace).map_err(|e| io_err(&t.trace, e))?;
    let id = checkpoint_id(&bytes);
    let mut tf = read_trace_csv(bytes.as_slice())?;
    if let Some(s) = t.symbol {
        let keep: Vec<usize> = (0..tf.trace.seqs.len()).filter(|&i| tf.trace.seqs[i].symbol == s).collect();
        tf.trace = tf.trace.filter_seqs(|_, m| m.symbol == s);
        tf.costs = tf
            .costs
            .into_iter()
            .filter_map(|((seq, pos, site), c)| keep.iter().position(|&k| k == seq).map(|i| ((i, pos, site), c)))
            .collect();
    }
    Ok((tf, id))
}

fn trace_meta<R: ReportRow>(report: Report<R>, tf: &(cct::trace::TraceFile, String), t: &TraceArgs) -> Report<R> {
    let symbols: std::collections::BTreeSet<usize> = tf.0.trace.seqs.iter().map(|m| m.symbol).collect();
    report.with_meta(|m| {
        m.symbol = t.symbol.or_else(|| (symbols.len() == 1).then(|| symbols.into_iter().next().unwrap()));
        m.extra.insert("trace".into(), t.trace.display().to_string().into());
        m.extra.insert("trace_digest".into(), tf.1.clone().into());
    })
}

fn analyze(kind: &AnalyzeKind) -> Res<()> {
    match kind {
        AnalyzeKind::ComputeSpread {
            t,
            bins,
            component,
            cross_kv,
        } => {
            let tf = load_trace(t)?;
            let costs = RecordedCosts {
                costs: &tf.0.costs,
                cross_kv_component: (*cross_kv).into(),
            };
            let r = compute_spread(&tf.0.trace, &costs, (*component).into(), *bins)?;
            emit_report(&trace_meta(r, &tf, t), t.out.as_deref())
        }
        AnalyzeKind::FreqVsCompute { t, corpus, stream } => {
            let tf = load_trace(t)?;
            let text = std::fs::read_to_string(corpus).map_err(|e| io_err(corpus, e))?;
            let pairs = parse_corpus(&text)?;
            let stream = match stream {
                StreamArg::Source => Stream::Source,
                StreamArg::Target => Stream::Target,
            };
            let freqs = token_frequencies(pairs.iter().map(|(s, t)| match stream {
                Stream::Source => s.as_slice(),
                Stream::Target => t.as_slice(),
            }))?;
            let costs = RecordedCosts {
                costs: &tf.0.costs,
                cross_kv_component: Component::Decoder,
            };
            let r = freq_vs_compute(&tf.0.trace, &costs, &freqs, stream)?;
            emit_report(&trace_meta(r, &tf, t), t.out.as_deref())
        }
        AnalyzeKind::LayerActivation { t } => {
            let tf = load_trace(t)?;
            emit_report(&trace_meta(layer_activation_fractions(&tf.0.trace)?, &tf, t), t.out.as_deref())
        }
        AnalyzeKind::AttnByTimestep { t, per_layer } => {
            let tf = load_trace(t)?;
            let r = attention_usage_by_timestep(&tf.0.trace, *per_layer)?;
            emit_report(&trace_meta(r, &tf, t), t.out.as_deref())
        }
        AnalyzeKind::TradeoffCurve { data, out } => {
            let (model, id, _) = load_model(&data.checkpoint)?;
            let task = task_for(&model, data.config.as_deref())?;
            let batches = heldout_batches(&task, data.batches, data.batch_size, data.seed)?;
            let r = tradeoff_curve(&model, &batches)?.with_meta(|m| {
                m.checkpoint_id = Some(id);
                m.dataset_seed = Some(data.seed);
            });
            emit_report(&r, out.as_deref())
        }
    }
}

fn cost_model(config: Option<&Path>, checkpoint: Option<&Path>) -> Res<()> {
    let costs = match (checkpoint, config) {
        (Some(ck), _) => load_model(ck)?.0.costs,
        (None, Some(cfg)) => {
            let cfg = ExperimentConfig::load(cfg)?;
            cct::budget::layer_costs(&cfg.model.cost_dims())?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    emit(&(to_json(&costs.report())? + "\n"), None)
}

fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval {
            data,
            symbol,
            mode,
            all_gates_on,
            out,
        } => eval(&data, symbol, mode, all_gates_on, out.as_deref()),
        Command::Decode {
            checkpoint,
            symbol,
            src,
            input,
            beam,
            max_len,
            length_penalty,
            trace,
        } => decode(
            &checkpoint,
            symbol,
            src.as_deref(),
            input.as_deref(),
            beam,
            max_len,
            length_penalty,
            trace.as_deref(),
        ),
        Command::Analyze { kind } => analyze(&kind),
        Command::CostModel { config, checkpoint } => cost_model(config.as_deref(), checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cct: {e}");
            match e {
                CctError::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
