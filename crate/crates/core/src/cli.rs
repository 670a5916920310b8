//! The `smoe` command-line tool.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;

use crate::analytics::{colorize_tokens, distribution_tsv, layer_profile};
use crate::checkpoint;
use crate::config::{human_count, CountMode, ModelConfig, FIELD_NAMES};
use crate::ep_sim::{shuffle_trace, simulate_cache, simulate_ep, CacheConfig, Placement};
use crate::error::{Error, Result};
use crate::eval::{
    passkey_eval, periodic_corpus, perplexity_tsv, perplexity_vs_context, PasskeyGrid, PasskeySpec, PasskeyTask,
};
use crate::model::TransformerModel;
use crate::rng::{self, Stream};
use crate::tensor::{Precision, Scalar};
use crate::tokenizer;
use crate::trace::RoutingTrace;
use crate::train::{train_with, write_loss_curve, ExampleSource, TrainConfig, WindowSampler};

/// Version stamped into every run manifest.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "smoe", version, about = "Sparse mixture-of-experts toolkit")]
pub struct Cli {
    /// Model config file (flat `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Main output file; a `.manifest` file is written next to it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "f32")]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print sparse and active parameter counts of a config.
    ParamCount {
        /// Count only the MoE blocks (router and experts).
        #[arg(long)]
        moe_only: bool,
    },
    /// Train a model and write a checkpoint plus its loss curve.
    Train(TrainArgs),
    /// Greedy continuation of a prompt.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Read the prompt as whitespace-separated token ids.
        #[arg(long)]
        ids: bool,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
    },
    /// Record routing decisions of a checkpoint over documents.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text files; each is split into context-sized documents.
        #[arg(long)]
        input: Vec<PathBuf>,
        /// Add this many documents of uniformly random byte tokens.
        #[arg(long, default_value_t = 0)]
        random_docs: usize,
        /// Length of random documents (defaults to the context length).
        #[arg(long)]
        doc_len: Option<usize>,
    },
    /// Repetition and distribution statistics of a trace.
    RouteAnalyze {
        #[arg(long)]
        trace: PathBuf,
        /// Also write per-expert distributions of every layer here.
        #[arg(long)]
        distributions: Option<PathBuf>,
        /// Text whose bytes were traced, to render coloured by first-choice expert.
        #[arg(long)]
        colorize: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_enum, default_value_t = ColorFormat::Html)]
        format: ColorFormat,
        #[arg(long)]
        color_out: Option<PathBuf>,
    },
    /// Expert-parallel load and LRU expert-cache replay of a trace.
    EpSim {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 8)]
        devices: usize,
        /// Contiguous placement with this many experts per device (round-robin otherwise).
        #[arg(long)]
        experts_per_device: Option<usize>,
        #[arg(long, default_value_t = 2)]
        capacity: usize,
    },
    /// Passkey retrieval accuracy over context lengths and insertion depths.
    PasskeyEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256])]
        contexts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.7, 0.9])]
        positions: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        key_len: usize,
    },
    /// Perplexity as a function of window size.
    Ppl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Read the corpus as whitespace-separated token ids.
        #[arg(long)]
        ids: bool,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = tokenizer::BOS)]
        bos: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ColorFormat {
    Ansi,
    Html,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Byte windows of `--corpus`.
    Text,
    /// Synthetic passkey prompts.
    Passkey,
    /// Repeated random blocks; the last vocabulary id serves as BOS.
    Periodic,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Task::Text)]
    pub task: Task,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long)]
    pub cosine: bool,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub aux_loss_coef: f64,
    /// Training window in tokens (defaults to the context length).
    #[arg(long)]
    pub window: Option<usize>,
    /// Loss curve path (defaults to `<out>.loss.tsv`).
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub period: usize,
    #[arg(long, default_value_t = 4)]
    pub repeats: usize,
    #[arg(long, default_value_t = 64)]
    pub min_context: usize,
    #[arg(long, default_value_t = 5)]
    pub key_len: usize,
}

/// Provenance record written next to every output file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<ModelConfig>,
    pub seed: u64,
    pub precision: Precision,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub args: Vec<(String, String)>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "command\t{}\nversion\t{ARTIFACT_VERSION}\nseed\t{}\nprecision\t{}\n",
            self.command,
            self.seed,
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
        );
        for p in &self.inputs {
            let _ = writeln!(s, "input\t{}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output\t{}", p.display());
        }
        if let Some(c) = &self.config {
            for (name, v) in FIELD_NAMES.iter().zip(c.as_array()) {
                let _ = writeln!(s, "config.{name}\t{v}");
            }
        }
        for (k, v) in &self.args {
            let _ = writeln!(s, "arg.{k}\t{v}");
        }
        s
    }
}

/// Writes through a temporary file in the target directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Exit status for an error: 2 for usage, configuration and missing data, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::NoData(_)
        | Error::Input(_)
        | Error::Domain(_)
        | Error::Format(_)
        | Error::ContextOverflow { .. }
        | Error::InvalidToken { .. } => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    let path = path.ok_or_else(|| Error::Config("--config is required".into()))?;
    std::fs::read_to_string(path)?.parse()
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Input(format!("{} does not exist", path.display()))
        } else {
            Error::Io(e)
        }
    })
}

struct Ctx<'a> {
    cli: &'a Cli,
    command: &'static str,
}

impl Ctx<'_> {
    fn out(&self) -> Result<&Path> {
        self.cli
            .out
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs --out", self.command)))
    }

    /// Writes `body` to `--out` (or stdout when absent) plus the manifest.
    fn emit(&self, body: &[u8], mut manifest: RunManifest) -> Result<()> {
        match &self.cli.out {
            Some(out) => {
                write_atomic(out, body)?;
                manifest.outputs.insert(0, out.clone());
                write_atomic(&manifest_path(out), manifest.to_text().as_bytes())
            }
            None => {
                std::io::stdout().write_all(body)?;
                Ok(())
            }
        }
    }

    fn manifest(&self, config: Option<ModelConfig>, inputs: Vec<PathBuf>, args: Vec<(String, String)>) -> RunManifest {
        RunManifest {
            command: self.command.into(),
            config,
            seed: self.cli.seed,
            precision: self.cli.precision,
            inputs,
            outputs: Vec::new(),
            args,
        }
    }

    fn checkpoint<T: Scalar>(&self, path: &Path) -> Result<TransformerModel<T>> {
        let model = checkpoint::read_checkpoint(read_input(path)?.as_slice())?;
        if let Some(cfg_path) = &self.cli.config {
            if load_config(Some(cfg_path))? != model.config {
                return Err(Error::Config("--config does not match the checkpoint".into()));
            }
        }
        Ok(model)
    }
}

fn kv<V: ToString>(k: &str, v: V) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn param_count(ctx: &Ctx, moe_only: bool) -> Result<()> {
    let cfg = load_config(ctx.cli.config.as_deref())?;
    let count = |mode| {
        let b = cfg.parameter_breakdown(mode);
        if moe_only {
            b.moe_only()
        } else {
            b.total()
        }
    };
    let (sparse, active) = (count(CountMode::Sparse), count(CountMode::Active));
    let body = format!(
        "sparse\t{sparse}\t{}\nactive\t{active}\t{}\n",
        human_count(sparse),
        human_count(active)
    );
    let inputs = ctx.cli.config.iter().cloned().collect();
    ctx.emit(body.as_bytes(), ctx.manifest(Some(cfg), inputs, vec![kv("moe_only", moe_only)]))
}

fn train_cmd<T: Scalar>(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let out = ctx.out()?.to_path_buf();
    let seed = ctx.cli.seed;
    let mut inputs: Vec<PathBuf> = ctx.cli.config.iter().cloned().collect();
    let mut model = match &a.init {
        Some(path) => {
            inputs.push(path.clone());
            ctx.checkpoint::<T>(path)?
        }
        None => {
            let cfg = load_config(ctx.cli.config.as_deref())?;
            TransformerModel::<T>::random(cfg, &mut rng::stream(seed, Stream::Init))?
        }
    };
    let cfg = model.config;
    let window = a.window.unwrap_or(cfg.context_len);
    let mut source: Box<dyn ExampleSource> = match a.task {
        Task::Text => {
            let path = a
                .corpus
                .as_ref()
                .ok_or_else(|| Error::Config("--task text needs --corpus".into()))?;
            inputs.push(path.clone());
            let bytes = read_input(path)?;
            if cfg.vocab_size < 256 {
                return Err(Error::Config("byte-level text needs vocab_size >= 256".into()));
            }
            Box::new(WindowSampler::new(bytes.into_iter().map(u32::from).collect(), window.min(cfg.context_len))?)
        }
        Task::Passkey => {
            if cfg.vocab_size < 256 {
                return Err(Error::Config("passkey prompts need vocab_size >= 256".into()));
            }
            let base = PasskeySpec {
                key_len: a.key_len,
                ..PasskeySpec::default()
            };
            PasskeySpec {
                context_len: a.min_context,
                ..base.clone()
            }
            .validate()?;
            Box::new(PasskeyTask {
                min_context: a.min_context,
                max_context: window.min(cfg.context_len),
                base,
                score_all: false,
            })
        }
        Task::Periodic => {
            if cfg.vocab_size < 2 {
                return Err(Error::Config("periodic task needs vocab_size >= 2".into()));
            }
            let bos = (cfg.vocab_size - 1) as u32;
            let corpus = periodic_corpus(a.period, bos, a.repeats, 200_000, seed);
            Box::new(WindowSampler::new(corpus, window.min(cfg.context_len))?.with_bos(bos))
        }
    };
    let tc = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        steps: a.steps,
        seed,
        aux_loss_coef: a.aux_loss_coef,
        warmup_steps: a.warmup,
        cosine_decay: a.cosine,
        clip_norm: a.clip,
        ..TrainConfig::default()
    };
    let every = (a.steps / 20).max(1);
    let curve = train_with(&mut model, &mut source, &tc, |r| {
        if r.step % every == 0 || r.step + 1 == a.steps {
            eprintln!("step {:>6}  loss {:.4}", r.step, r.loss);
        }
    })?;
    let loss_out = a.loss_out.clone().unwrap_or_else(|| with_suffix(&out, ".loss.tsv"));
    let mut curve_text = Vec::new();
    write_loss_curve(&mut curve_text, &curve)?;
    write_atomic(&loss_out, &curve_text)?;
    let args = vec![
        kv("task", format!("{:?}", a.task).to_lowercase()),
        kv("steps", a.steps),
        kv("batch_size", a.batch_size),
        kv("lr", a.lr),
        kv("warmup", a.warmup),
        kv("cosine", a.cosine),
        kv("clip", a.clip.map_or("none".into(), |c| c.to_string())),
        kv("aux_loss_coef", a.aux_loss_coef),
        kv("window", window),
        kv("min_context", a.min_context),
        kv("key_len", a.key_len),
        kv("period", a.period),
        kv("repeats", a.repeats),
    ];
    let mut manifest = ctx.manifest(Some(cfg), inputs, args);
    manifest.outputs.push(loss_out);
    ctx.emit(&checkpoint::to_bytes(&model), manifest)
}

fn decode_cmd<T: Scalar>(ctx: &Ctx, checkpoint: &Path, prompt: &str, ids: bool, max_new: usize) -> Result<()> {
    let model: TransformerModel<T> = ctx.checkpoint(checkpoint)?;
    let tokens = if ids {
        tokenizer::parse_ids(prompt)?
    } else {
        tokenizer::encode(prompt)
    };
    let out = model.decode_greedy(&tokens, max_new)?;
    let body = if ids {
        let words: Vec<String> = out.iter().map(u32::to_string).collect();
        words.join(" ") + "\n"
    } else {
        tokenizer::decode(&out)
    };
    let manifest = ctx.manifest(
        Some(model.config),
        vec![checkpoint.to_path_buf()],
        vec![kv("prompt", prompt.escape_default()), kv("max_new", max_new)],
    );
    ctx.emit(body.as_bytes(), manifest)
}

fn trace_cmd<T: Scalar>(
    ctx: &Ctx,
    checkpoint: &Path,
    inputs: &[PathBuf],
    random_docs: usize,
    doc_len: Option<usize>,
) -> Result<()> {
    let model: TransformerModel<T> = ctx.checkpoint(checkpoint)?;
    let ctx_len = model.config.context_len;
    let mut trace = RoutingTrace::new(model.trace_header());
    let mut doc_id = 0u64;
    for path in inputs {
        let tokens = tokenizer::encode(&String::from_utf8_lossy(&read_input(path)?));
        let label = path.file_name().map(|n| n.to_string_lossy().into_owned());
        for chunk in tokens.chunks(ctx_len) {
            trace.push(model.route_document(chunk, doc_id, label.clone())?)?;
            doc_id += 1;
        }
    }
    let len = doc_len.unwrap_or(ctx_len);
    let vocab = model.config.vocab_size.min(256) as u32;
    for i in 0..random_docs {
        let mut r = rng::substream(ctx.cli.seed, Stream::Synthetic, i as u64);
        let tokens: Vec<u32> = (0..len).map(|_| r.gen_range(0..vocab)).collect();
        trace.push(model.route_document(&tokens, doc_id, Some("random".into()))?)?;
        doc_id += 1;
    }
    if trace.is_empty() {
        return Err(Error::NoData("no documents to trace (use --input or --random-docs)".into()));
    }
    ctx.out()?;
    let mut all_inputs = vec![checkpoint.to_path_buf()];
    all_inputs.extend(inputs.iter().cloned());
    let manifest = ctx.manifest(
        Some(model.config),
        all_inputs,
        vec![kv("random_docs", random_docs), kv("doc_len", len)],
    );
    ctx.emit(trace.to_text().as_bytes(), manifest)
}

fn load_trace(path: &Path) -> Result<RoutingTrace> {
    RoutingTrace::read_from(read_input(path)?.as_slice())
}

fn route_analyze(
    ctx: &Ctx,
    trace_path: &Path,
    distributions: Option<&Path>,
    colorize: Option<&Path>,
    layer: usize,
    format: ColorFormat,
    color_out: Option<&Path>,
) -> Result<()> {
    let trace = load_trace(trace_path)?;
    let profile = layer_profile(&trace)?;
    let mut manifest = ctx.manifest(None, vec![trace_path.to_path_buf()], vec![kv("layer", layer)]);
    if let Some(path) = distributions {
        let mut s = String::new();
        for l in 0..trace.header.n_layers {
            let table = distribution_tsv(&trace, l)?;
            let mut lines = table.lines();
            if l == 0 {
                let _ = writeln!(s, "layer\t{}", lines.next().unwrap_or_default());
            } else {
                lines.next();
            }
            for line in lines {
                let _ = writeln!(s, "{l}\t{line}");
            }
        }
        write_atomic(path, s.as_bytes())?;
        manifest.outputs.push(path.to_path_buf());
    }
    if let Some(text_path) = colorize {
        let out = color_out.ok_or_else(|| Error::Config("--colorize needs --color-out".into()))?;
        let bytes = read_input(text_path)?;
        let tokens: Vec<String> = tokenizer::encode(&String::from_utf8_lossy(&bytes))
            .into_iter()
            .map(tokenizer::token_text)
            .collect();
        let doc = colorize_tokens(&trace, layer, &tokens)?;
        let rendered = match format {
            ColorFormat::Ansi => doc.to_ansi(),
            ColorFormat::Html => doc.to_html(),
        };
        write_atomic(out, rendered.as_bytes())?;
        manifest.inputs.push(text_path.to_path_buf());
        manifest.outputs.push(out.to_path_buf());
    }
    ctx.emit(profile.to_tsv().as_bytes(), manifest)
}

fn ep_sim_cmd(
    ctx: &Ctx,
    trace_path: &Path,
    devices: usize,
    experts_per_device: Option<usize>,
    capacity: usize,
) -> Result<()> {
    let trace = load_trace(trace_path)?;
    let n = trace.header.num_experts;
    let placement = match experts_per_device {
        Some(e) => Placement::contiguous(n, e)?,
        None => Placement::round_robin(n, devices)?,
    };
    if capacity > n {
        return Err(Error::Config(format!("cache capacity {capacity} exceeds {n} experts")));
    }
    let shuffled = shuffle_trace(&trace, ctx.cli.seed);
    let mut s = String::from(
        "layer\tdevices\tassignments\timbalance\tcross_device_fraction\tdevice_counts\tcapacity\thit_rate\tshuffled_hit_rate\n",
    );
    for layer in 0..trace.header.n_layers {
        let r = simulate_ep(&trace, &placement, layer)?;
        let hit = simulate_cache(&trace, layer, CacheConfig::lru(capacity))?.hit_rate();
        let shuf = simulate_cache(&shuffled, layer, CacheConfig::lru(capacity))?.hit_rate();
        let counts: Vec<String> = r.device_counts.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "{layer}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{capacity}\t{hit:.6}\t{shuf:.6}",
            placement.num_devices(),
            r.total(),
            r.imbalance,
            r.cross_device_fraction,
            counts.join(",")
        );
    }
    let manifest = ctx.manifest(
        None,
        vec![trace_path.to_path_buf()],
        vec![
            kv("devices", placement.num_devices()),
            kv("experts_per_device", experts_per_device.map_or("round-robin".into(), |e| e.to_string())),
            kv("capacity", capacity),
        ],
    );
    ctx.emit(s.as_bytes(), manifest)
}

fn passkey_cmd<T: Scalar>(
    ctx: &Ctx,
    checkpoint: &Path,
    trials: usize,
    contexts: &[usize],
    positions: &[f64],
    key_len: usize,
) -> Result<()> {
    let model: TransformerModel<T> = ctx.checkpoint(checkpoint)?;
    if let Some(&c) = contexts.iter().find(|&&c| c > model.config.context_len) {
        return Err(Error::Config(format!(
            "context {c} exceeds the model context {}",
            model.config.context_len
        )));
    }
    let grid = PasskeyGrid {
        contexts: contexts.to_vec(),
        positions: positions.to_vec(),
        trials,
        base: PasskeySpec {
            key_len,
            ..PasskeySpec::default()
        },
    };
    let result = passkey_eval(&model, &grid, ctx.cli.seed)?;
    let manifest = ctx.manifest(
        Some(model.config),
        vec![checkpoint.to_path_buf()],
        vec![kv("trials", trials), kv("key_len", key_len)],
    );
    ctx.emit(result.to_tsv().as_bytes(), manifest)
}

fn ppl_cmd<T: Scalar>(ctx: &Ctx, checkpoint: &Path, corpus: &Path, ids: bool, sizes: &[usize], bos: u32) -> Result<()> {
    let model: TransformerModel<T> = ctx.checkpoint(checkpoint)?;
    let raw = read_input(corpus)?;
    let tokens = if ids {
        tokenizer::parse_ids(&String::from_utf8_lossy(&raw))?
    } else {
        raw.into_iter().map(u32::from).collect()
    };
    let rows = perplexity_vs_context(&model, &tokens, sizes, bos)?;
    let manifest = ctx.manifest(
        Some(model.config),
        vec![checkpoint.to_path_buf(), corpus.to_path_buf()],
        vec![kv("bos", bos)],
    );
    ctx.emit(perplexity_tsv(&rows).as_bytes(), manifest)
}

fn run_typed<T: Scalar>(cli: &Cli) -> Result<()> {
    let name = match &cli.command {
        Command::ParamCount { .. } => "param-count",
        Command::Train(_) => "train",
        Command::Decode { .. } => "decode",
        Command::Trace { .. } => "trace",
        Command::RouteAnalyze { .. } => "route-analyze",
        Command::EpSim { .. } => "ep-sim",
        Command::PasskeyEval { .. } => "passkey-eval",
        Command::Ppl { .. } => "ppl",
    };
    let ctx = Ctx { cli, command: name };
    match &cli.command {
        Command::ParamCount { moe_only } => param_count(&ctx, *moe_only),
        Command::Train(a) => train_cmd::<T>(&ctx, a),
        Command::Decode {
            checkpoint,
            prompt,
            ids,
            max_new,
        } => decode_cmd::<T>(&ctx, checkpoint, prompt, *ids, *max_new),
        Command::Trace {
            checkpoint,
            input,
            random_docs,
            doc_len,
        } => trace_cmd::<T>(&ctx, checkpoint, input, *random_docs, *doc_len),
        Command::RouteAnalyze {
            trace,
            distributions,
            colorize,
            layer,
            format,
            color_out,
        } => route_analyze(
            &ctx,
            trace,
            distributions.as_deref(),
            colorize.as_deref(),
            *layer,
            *format,
            color_out.as_deref(),
        ),
        Command::EpSim {
            trace,
            devices,
            experts_per_device,
            capacity,
        } => ep_sim_cmd(&ctx, trace, *devices, *experts_per_device, *capacity),
        Command::PasskeyEval {
            checkpoint,
            trials,
            contexts,
            positions,
            key_len,
        } => passkey_cmd::<T>(&ctx, checkpoint, *trials, contexts, positions, *key_len),
        Command::Ppl {
            checkpoint,
            corpus,
            ids,
            sizes,
            bos,
        } => ppl_cmd::<T>(&ctx, checkpoint, corpus, *ids, sizes, *bos),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match cli.precision {
        Precision::F32 => run_typed::<f32>(cli),
        Precision::F64 => run_typed::<f64>(cli),
    }
}

/// Parses the process arguments, runs the command and returns the exit status.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::NoData("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Diverged { step: 1, loss: f64::NAN }), 1);
        assert_eq!(exit_code(&Error::NonFinite { op: "x" }), 1);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let c = Cli::try_parse_from(["smoe", "--seed", "3", "ep-sim", "--trace", "t.txt", "--capacity", "4"]).unwrap();
        assert_eq!(c.seed, 3);
        assert!(matches!(c.command, Command::EpSim { capacity: 4, .. }));
        assert!(Cli::try_parse_from(["smoe", "--precision", "f16", "param-count"]).is_err());
    }

    #[test]
    fn manifest_is_stable_text() {
        let m = RunManifest {
            command: "decode".into(),
            config: None,
            seed: 7,
            precision: Precision::F64,
            inputs: vec!["a".into()],
            outputs: vec!["b".into()],
            args: vec![kv("max_new", 3)],
        };
        assert_eq!(
            m.to_text(),
            "command\tdecode\nversion\t1\nseed\t7\nprecision\tf64\ninput\ta\noutput\tb\narg.max_new\t3\n"
        );
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
