use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fgovd_core::composer::{transfer_triplet, TripletFile, WeightTriplet};
use fgovd_core::evaluator::dataset::{generate_records, load_jsonl, realize, write_jsonl, EvalInstance, WordPools};
use fgovd_core::evaluator::{evaluate, markdown_table, reports_from_csv, reports_to_csv, Mode, Subset};
use fgovd_core::extractor::ExtractError;
use fgovd_core::fitter::fit;
use fgovd_core::tokenizer::Flavor;
use serde_json::{json, Value};

use crate::config::{Backend, RunConfig};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NETWORK: u8 = 3;

/// A well-formed command line that asks for something impossible.
#[derive(Debug)]
pub struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn is_transport(e: &ExtractError) -> bool {
    matches!(e, ExtractError::Transport { .. })
}

/// 3 for network failures anywhere in the chain, 1 for usage errors, else 2.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<ExtractError>().is_some_and(is_transport) {
            return EXIT_NETWORK;
        }
        if let Some(fgovd_core::Error::Extract(e)) = cause.downcast_ref::<fgovd_core::Error>() {
            if is_transport(e) {
                return EXIT_NETWORK;
            }
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(name = "fgovd", version, about = "Attribute-highlighted text embeddings for fine-grained detection")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (overrides `seed` in the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the attribute words of each caption.
    Extract(ExtractArgs),
    /// Generate a synthetic benchmark file (JSON Lines).
    Gen(GenArgs),
    /// Draw encoder weights and write a checkpoint.
    InitEncoder(InitEncoderArgs),
    /// Fit the weight triplet on a dataset.
    Fit(FitArgs),
    /// Evaluate one or more modes and emit per-subset mAP.
    Eval(EvalArgs),
    /// Copy a triplet with its bias set to zero.
    Transfer(TransferArgs),
    /// Merge report CSVs into one markdown table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ExtractorArgs {
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    /// Lexicon file (`word<TAB>type`) replacing the bundled one.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Chat-completion URL for the llm backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub retries: Option<u32>,
    /// Fall back to the lexicon when the endpoint is unreachable.
    #[arg(long)]
    pub fallback: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(required = true)]
    pub captions: Vec<String>,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
}

/// `all` or a comma-separated list of subset names.
#[derive(Debug, Clone)]
pub struct SubsetList(Vec<Subset>);

fn parse_subsets(s: &str) -> Result<SubsetList, String> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(SubsetList(Subset::ALL.to_vec()));
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let subset: Subset = part.parse().map_err(|e: fgovd_core::Error| e.to_string())?;
        if !out.contains(&subset) {
            out.push(subset);
        }
    }
    Ok(SubsetList(out))
}

/// `all` or a comma-separated list of modes.
#[derive(Debug, Clone)]
pub struct ModeList(Vec<Mode>);

fn parse_modes(s: &str) -> Result<ModeList, String> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(ModeList(Mode::ALL.to_vec()));
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let mode: Mode = part.parse()?;
        if !out.contains(&mode) {
            out.push(mode);
        }
    }
    Ok(ModeList(out))
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Subset name, comma-separated list, or `all`.
    #[arg(long, default_value = "all", value_parser = parse_subsets)]
    pub subset: SubsetList,
    /// Instances per subset.
    #[arg(short = 'n', long = "n", default_value_t = 100)]
    pub n: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncoderArgs {
    #[arg(long)]
    pub flavor: Option<Flavor>,
    /// Encoder checkpoint to load instead of drawing weights.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Region-feature noise relative to the clean embedding norm.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InitEncoderArgs {
    #[arg(long)]
    pub flavor: Option<Flavor>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Triplet JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Starting triplet `w_global,w_attri,bias`.
    #[arg(long)]
    pub init: Option<WeightTriplet>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Mode name, comma-separated list, or `all`.
    #[arg(long, default_value = "baseline", value_parser = parse_modes)]
    pub mode: ModeList,
    /// Triplet JSON for the composing modes; identity when absent.
    #[arg(long)]
    pub triplet: Option<PathBuf>,
    /// Report CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Markdown table to write (it is always printed).
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Extract(args) => cmd_extract(cfg, args),
        Command::Gen(args) => cmd_gen(cfg, args),
        Command::InitEncoder(args) => cmd_init_encoder(cfg, args),
        Command::Fit(args) => cmd_fit(cfg, args),
        Command::Eval(args) => cmd_eval(cfg, args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn provenance(command: &str, cfg: &RunConfig, args: Value) -> Value {
    json!({
        "tool": "fgovd",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "args": args,
        "config": cfg,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_file(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn apply_extractor(cfg: &mut RunConfig, args: &ExtractorArgs) {
    if let Some(b) = args.backend {
        cfg.extractor.backend = b;
    }
    if let Some(p) = &args.lexicon {
        cfg.extractor.lexicon = Some(p.clone());
    }
    if let Some(url) = &args.endpoint {
        cfg.llm.endpoint_url = url.clone();
    }
    if let Some(m) = &args.model {
        cfg.llm.model_name = m.clone();
    }
    if let Some(r) = args.retries {
        cfg.llm.max_retries = r;
    }
    if args.fallback {
        cfg.extractor.fallback = true;
    }
}

fn apply_encoder(cfg: &mut RunConfig, args: &EncoderArgs) -> Result<()> {
    if let Some(f) = args.flavor {
        cfg.encoder.flavor = f;
    }
    if let Some(p) = &args.encoder {
        cfg.encoder.checkpoint = Some(p.clone());
    }
    if let Some(s) = args.sigma {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(UsageError(format!("--sigma must be a non-negative number, got {s}")).into());
        }
        cfg.noise.sigma = Some(s);
    }
    Ok(())
}

fn cmd_extract(mut cfg: RunConfig, args: ExtractArgs) -> Result<()> {
    apply_extractor(&mut cfg, &args.extractor);
    let extractor = cfg.build_extractor()?;
    let mut lines = String::new();
    for caption in &args.captions {
        let attrs = extractor.extract(caption)?;
        lines.push_str(&format!("{attrs}\n"));
    }
    emit(None, lines.as_bytes())
}

fn cmd_gen(cfg: RunConfig, args: GenArgs) -> Result<()> {
    if args.n == 0 {
        return Err(UsageError("-n must be at least 1".into()).into());
    }
    let pools = WordPools::default();
    let mut records = Vec::new();
    for &subset in &args.subset.0 {
        records.extend(generate_records(subset, args.n, cfg.seed, &pools, &cfg.dataset)?);
    }
    let subsets: Vec<&str> = args.subset.0.iter().map(|s| s.name()).collect();
    let prov = provenance("gen", &cfg, json!({ "subsets": subsets, "n": args.n }));
    let mut bytes = Vec::new();
    write_jsonl(&mut bytes, &records, Some(&prov))?;
    emit(args.out.as_deref(), &bytes)?;
    log::info!("wrote {} instances", records.len());
    Ok(())
}

fn cmd_init_encoder(mut cfg: RunConfig, args: InitEncoderArgs) -> Result<()> {
    if let Some(f) = args.flavor {
        cfg.encoder.flavor = f;
    }
    cfg.encoder.checkpoint = None;
    let enc = cfg.build_encoder()?;
    enc.save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} {}", enc.flavor(), enc.checksum());
    Ok(())
}

/// Loads a dataset file and recomputes its region features.
fn load_instances(cfg: &RunConfig, path: &Path, enc: &fgovd_core::encoder::Encoder) -> Result<(Vec<EvalInstance>, Value)> {
    let file = load_jsonl(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if file.records.is_empty() {
        anyhow::bail!("dataset {} has no instances", path.display());
    }
    let seed = file.seed().unwrap_or(cfg.seed);
    let instances = realize(&file.records, enc, &cfg.noise, seed)?;
    let info = json!({
        "path": path.display().to_string(),
        "seed": seed,
        "instances": instances.len(),
        "provenance": file.provenance,
    });
    Ok((instances, info))
}

fn default_trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace.csv")
}

fn cmd_fit(mut cfg: RunConfig, args: FitArgs) -> Result<()> {
    apply_encoder(&mut cfg, &args.encoder)?;
    apply_extractor(&mut cfg, &args.extractor);
    if let Some(t) = args.init {
        cfg.fit.init = t;
    }
    if let Some(e) = args.epochs {
        cfg.fit.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.fit.learning_rate = lr;
    }
    if let Some(l2) = args.l2 {
        cfg.fit.l2 = l2;
    }
    if let Some(a) = args.logit_scale {
        cfg.fit.logit_scale = a;
    }
    let fit_cfg = cfg.fit_config();
    fit_cfg.validate().map_err(|e| UsageError(e.to_string()))?;

    let enc = cfg.build_encoder()?;
    let extractor = cfg.build_extractor()?;
    let (instances, dataset) = load_instances(&cfg, &args.dataset, &enc)?;
    let trace = fit(&instances, &enc, extractor.as_ref(), &fit_cfg)?;

    let trace_path = args.trace.clone().unwrap_or_else(|| default_trace_path(&args.out));
    let prov = provenance(
        "fit",
        &cfg,
        json!({
            "dataset": dataset,
            "encoder": { "flavor": enc.flavor(), "checksum": enc.checksum() },
            "sigma": cfg.noise.sigma_for(enc.flavor()),
            "extractor": extractor.name(),
            "logit_shift": trace.logit_shift,
            "initial_loss": trace.initial_loss,
            "final_loss": trace.final_loss(),
        }),
    );
    let mut file = TripletFile::new(trace.final_triplet);
    file.source_model = Some(format!("{}-{}", enc.flavor(), &enc.checksum()[..12]));
    file.provenance = Some(prov.clone());
    write_file(&args.out, file.to_json().as_bytes())?;
    write_file(&trace_path, trace.to_csv(Some(&prov)).as_bytes())?;

    let t = trace.final_triplet;
    println!(
        "w_global={:.6} w_attri={:.6} bias={:.6} loss {:.6} -> {:.6}",
        t.w_global,
        t.w_attri,
        t.bias,
        trace.initial_loss,
        trace.final_loss()
    );
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, args: EvalArgs) -> Result<()> {
    apply_encoder(&mut cfg, &args.encoder)?;
    apply_extractor(&mut cfg, &args.extractor);
    let (triplet, triplet_info) = match &args.triplet {
        Some(path) => {
            let file = TripletFile::load(path).with_context(|| format!("reading triplet {}", path.display()))?;
            let info = json!({ "path": path.display().to_string(), "triplet": file.triplet() });
            (file.triplet(), info)
        }
        None => {
            if args.mode.0.iter().any(|m| *m != Mode::Baseline) {
                log::warn!("no --triplet given; composing with the identity triplet");
            }
            (WeightTriplet::IDENTITY, json!({ "triplet": WeightTriplet::IDENTITY }))
        }
    };

    let enc = cfg.build_encoder()?;
    let extractor = cfg.build_extractor()?;
    let (instances, dataset) = load_instances(&cfg, &args.dataset, &enc)?;
    let reports = args
        .mode
        .0
        .iter()
        .map(|&mode| evaluate(&instances, &enc, extractor.as_ref(), &cfg.eval_config(mode, triplet)))
        .collect::<Result<Vec<_>, _>>()?;

    let modes: Vec<&str> = args.mode.0.iter().map(|m| m.name()).collect();
    let prov = provenance(
        "eval",
        &cfg,
        json!({
            "dataset": dataset,
            "modes": modes,
            "triplet": triplet_info,
            "encoder": { "flavor": enc.flavor(), "checksum": enc.checksum() },
            "sigma": cfg.noise.sigma_for(enc.flavor()),
            "extractor": extractor.name(),
        }),
    );
    let table = markdown_table(&reports);
    if let Some(path) = &args.out {
        write_file(path, reports_to_csv(&reports, Some(&prov)).as_bytes())?;
    }
    if let Some(path) = &args.markdown {
        write_file(path, format!("<!-- provenance: {prov} -->\n{table}").as_bytes())?;
    }
    emit(None, table.as_bytes())
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let source = TripletFile::load(&args.input).with_context(|| format!("reading triplet {}", args.input.display()))?;
    let mut out = TripletFile::new(transfer_triplet(&source.triplet()));
    out.source_model = source.source_model.clone();
    out.provenance = Some(json!({
        "tool": "fgovd",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "transfer",
        "args": { "in": args.input.display().to_string() },
        "source": source.provenance,
    }));
    write_file(&args.out, out.to_json().as_bytes())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for path in &args.inputs {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = reports_from_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        reports.extend(parsed);
    }
    let inputs: Vec<String> = args.inputs.iter().map(|p| p.display().to_string()).collect();
    let prov = json!({
        "tool": "fgovd",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "report",
        "args": { "inputs": inputs },
    });
    let table = markdown_table(&reports);
    match &args.out {
        Some(path) => write_file(path, format!("<!-- provenance: {prov} -->\n{table}").as_bytes()),
        None => emit(None, table.as_bytes()),
    }
}
