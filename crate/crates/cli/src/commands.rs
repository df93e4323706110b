use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use causnet::ckb::CausalKnowledgeBase;
use causnet::cpn::{Checkpoint, ModelState};
use causnet::data::{generate_synthetic, load_speed_csv, LedgerEntry, SpeedSeries, SyntheticSpec};
use causnet::dataset::{ForecastData, Part};
use causnet::eval::{ablation_compare, export_attention as attention_maps, format_triple, map_to_csv, map_to_svg, predict_windows, sign_agreement, AblationReport};
use causnet::events::{extract_all, load_records, read_jsonl, write_jsonl, EventRecord, Extractor, LlmConfig, LlmExtractor, PromptTemplates, RawEventText, Rubric, RuleBasedExtractor, SegmentLookup};
use causnet::features::{segment_features, write_feature_csv};
use causnet::graph::{load_graph, RoadGraph};
use causnet::pipeline::{build_training_ckb, Benchmark, PipelineConfig, PipelineError};
use causnet::training::progressive_train;

pub struct Failure {
    pub category: &'static str,
    pub message: String,
}

impl<E: Into<PipelineError>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        let category = e.category();
        let text = e.to_string();
        // the display form repeats the stage name as a prefix
        let message = text.split_once(": ").map_or(text.clone(), |(_, rest)| rest.to_string());
        Failure { category, message }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        category: "io",
        message: format!("{}: {e}", path.display()),
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        category: "config",
        message: message.into(),
    }
}

pub struct Context {
    pub config: PipelineConfig,
    pub seed: Option<u64>,
    pub threads: usize,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_failure(path, e))
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, fallback: impl FnOnce() -> Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| configured.clone())
        .or_else(fallback)
        .ok_or_else(|| usage(format!("no {what} given")))
}

/// Series, events and graph of one data directory.
struct Inputs {
    series: Vec<SpeedSeries>,
    events: Vec<EventRecord>,
    graph: RoadGraph,
    ledger: Option<Vec<LedgerEntry>>,
}

#[derive(Args)]
pub struct DataArgs {
    /// Directory with speeds.csv, events.jsonl and edges.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Speed CSV; overrides the data directory.
    #[arg(long)]
    speeds: Option<PathBuf>,
    /// Event records (JSONL); overrides the data directory.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Weighted edge list (CSV); overrides the data directory.
    #[arg(long)]
    graph: Option<PathBuf>,
}

impl DataArgs {
    fn in_dir(&self, name: &str) -> Option<PathBuf> {
        self.data.as_ref().map(|d| d.join(name))
    }

    fn load(&self, ctx: &Context) -> Result<Inputs, Failure> {
        let paths = &ctx.config.paths;
        let speeds = pick(self.speeds.clone(), &paths.speeds, || self.in_dir("speeds.csv"), "speed file (--speeds or --data)")?;
        let events = pick(self.events.clone(), &paths.events, || self.in_dir("events.jsonl"), "event file (--events or --data)")?;
        let graph = pick(self.graph.clone(), &paths.graph, || self.in_dir("edges.csv"), "edge list (--graph or --data)")?;
        let loaded = load_speed_csv(&speeds)?;
        for g in &loaded.gaps {
            let how = if g.interpolated { "interpolated" } else { "excluded" };
            info!("{}: gap of {} steps at index {} {how}", g.segment_id, g.length, g.start_index);
        }
        let series = loaded.series;
        let events = load_records(&events)?;
        let ids: Vec<String> = series.iter().map(|s| s.segment_id.clone()).collect();
        let graph = load_graph(&graph, &ids)?;
        let ledger = match self.in_dir("ledger.json").filter(|p| p.exists()) {
            Some(p) => {
                let text = fs::read_to_string(&p).map_err(|e| io_failure(&p, e))?;
                Some(serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        Ok(Inputs {
            series,
            events,
            graph,
            ledger,
        })
    }
}

#[derive(Args)]
pub struct ExtractArgs {
    /// Raw reports, one JSON object per line.
    #[arg(long = "in")]
    input: PathBuf,
    /// Structured records (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Scoring rubric (JSON); the built-in rubric otherwise.
    #[arg(long)]
    rubric: Option<PathBuf>,
    /// Place-name to segment-id table (JSON object).
    #[arg(long)]
    segments: Option<PathBuf>,
    /// Chat-completions endpoint. Without it only the rule-based extractor
    /// runs. The API key is read from CAUSNET_LLM_API_KEY.
    #[arg(long)]
    llm_endpoint: Option<String>,
    /// Directory holding stage1.txt and stage2.txt prompt templates.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

/// Tries the language model first and falls back to keyword rules.
struct WithFallback {
    llm: LlmExtractor,
    rules: RuleBasedExtractor,
}

impl Extractor for WithFallback {
    fn extract(&self, raw: &RawEventText) -> Result<EventRecord, causnet::events::EventError> {
        self.llm.extract(raw).or_else(|e| {
            warn!("{e}; using rule-based extraction");
            self.rules.extract(raw)
        })
    }
}

pub fn extract_events(ctx: &Context, a: ExtractArgs) -> Result<(), Failure> {
    let file = fs::File::open(&a.input).map_err(|e| io_failure(&a.input, e))?;
    let raws: Vec<RawEventText> = read_jsonl(file)?;
    let rubric = match &a.rubric {
        Some(p) => Rubric::load(p)?,
        None => Rubric::builtin(),
    };
    let lookup = match &a.segments {
        Some(p) => SegmentLookup::load(p)?,
        None => SegmentLookup::default(),
    };
    let rules = RuleBasedExtractor::new(rubric, lookup);
    let results = match a.llm_endpoint {
        Some(endpoint) => {
            let prompts = match &a.prompts {
                Some(dir) => PromptTemplates::load(dir)?,
                None => PromptTemplates::default(),
            };
            let config = LlmConfig {
                endpoint,
                ..LlmConfig::default()
            }
            .with_env_key();
            let in_flight = config.max_in_flight;
            let ex = WithFallback {
                llm: LlmExtractor::http(config, prompts),
                rules,
            };
            extract_all(&ex, &raws, in_flight)
        }
        None => extract_all(&rules, &raws, ctx.threads),
    };
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => warn!("skipped: {e}"),
        }
    }
    info!("extracted {} of {} reports", records.len(), raws.len());
    let mut w = create(&a.out)?;
    write_jsonl(&mut w, &records).map_err(|e| io_failure(&a.out, e))?;
    Ok(())
}

#[derive(Args)]
pub struct BuildCkbArgs {
    /// Event records (JSONL).
    #[arg(long)]
    events: PathBuf,
    /// Speed CSV.
    #[arg(long)]
    speeds: PathBuf,
    /// Knowledge base output (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Caliper as a multiple of the propensity-logit standard deviation.
    #[arg(long)]
    caliper: Option<f64>,
    /// Smallest number of matched pairs for a group to be kept.
    #[arg(long)]
    min_matches: Option<usize>,
    /// Use the whole series instead of the training range.
    #[arg(long)]
    all_steps: bool,
}

pub fn build_ckb(ctx: &Context, a: BuildCkbArgs) -> Result<(), Failure> {
    let mut config = ctx.config.clone();
    if let Some(c) = a.caliper {
        config.ckb.caliper = c;
    }
    if let Some(m) = a.min_matches {
        config.ckb.min_matches = m;
    }
    let series = load_speed_csv(&a.speeds)?.series;
    let events = load_records(&a.events)?;
    let (ckb, report) = if a.all_steps {
        causnet::ckb::build_ckb(&events, &series, &config.ckb)?
    } else {
        build_training_ckb(&series, &events, &config)?
    };
    info!("{}", report.summary());
    ckb.save(&a.out)?;
    print!("{}", ckb.report());
    Ok(())
}

#[derive(Args)]
pub struct GenArgs {
    /// Generator spec (JSON); the bundled 50-segment benchmark otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn gen_synthetic(ctx: &Context, a: GenArgs) -> Result<(), Failure> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => Benchmark::bundled().synthetic,
    };
    if let Some(seed) = ctx.seed {
        spec.random_seed = seed;
    }
    let ds = generate_synthetic(&spec)?;
    ds.write_to_dir(&a.out)?;
    info!(
        "{} segments, {} steps, {} events written to {}",
        ds.series.len(),
        ds.series.first().map_or(0, SpeedSeries::len),
        ds.events.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Knowledge base (JSON).
    #[arg(long)]
    ckb: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Weight of the causal sign-consistency loss.
    #[arg(long)]
    beta_loss: Option<f64>,
    /// Weight of the attention entropy loss.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<(), Failure> {
    let mut config = ctx.config.clone();
    if let Some(v) = a.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = a.beta_loss {
        config.train.loss.beta_loss = v;
    }
    if let Some(v) = a.gamma {
        config.train.loss.gamma = v;
    }
    if let Some(v) = a.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        config.train.batch_size = v;
    }
    if ctx.threads > 1 {
        info!("training runs on one thread so that runs are reproducible");
    }
    let out = pick(a.out, &config.paths.checkpoints, || None, "checkpoint directory (--out)")?;
    let ckb_path = pick(a.ckb, &config.paths.ckb, || a.data.in_dir("ckb.json"), "knowledge base (--ckb)")?;
    let ckb = CausalKnowledgeBase::load(&ckb_path)?;
    let inputs = a.data.load(ctx)?;
    let data = ForecastData::build(&inputs.series, &inputs.events, &ckb, &inputs.graph, &config.dataset)?;
    let state = ModelState::init(&config.model_config(), config.seed)?;
    info!(
        "{} parameters, {} training windows",
        state.parameter_count(),
        data.windows(Part::Train, config.train.window_stride.max(1)).len()
    );

    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    let log_path = out.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let mut log_error = None;
    let outcome = progressive_train(state, &data, &config.train, |e| {
        let line = serde_json::to_string(e).expect("log entry serializes");
        if let Err(err) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_error.get_or_insert(err);
        }
    })?;
    if let Some(e) = log_error {
        return Err(io_failure(&log_path, e));
    }
    let ckpt = Checkpoint {
        state: outcome.state,
        dataset: config.dataset.clone(),
        normalizer: data.normalizer,
        split: data.split.clone(),
        phase: outcome.phase,
    };
    ckpt.save(&out.join("model.ckpt"))?;
    ckb.save(&out.join("ckb.json"))?;
    let effective = serde_json::to_string_pretty(&config).expect("config serializes") + "\n";
    write_text(&out.join("config.json"), &effective)?;
    info!(
        "best validation MSE {:.4} at epoch {} (phase {}){}",
        outcome.best_val_mse,
        outcome.best_epoch,
        outcome.phase,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PartArg {
    Train,
    Validation,
    Test,
}

impl From<PartArg> for Part {
    fn from(p: PartArg) -> Self {
        match p {
            PartArg::Train => Part::Train,
            PartArg::Validation => Part::Validation,
            PartArg::Test => Part::Test,
        }
    }
}

#[derive(Args)]
pub struct ApplyArgs {
    /// Checkpoint directory, or the model.ckpt file itself.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Knowledge base; defaults to the copy stored with the checkpoint.
    #[arg(long)]
    ckb: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    part: PartArg,
    /// Take every n-th window.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

struct Applied {
    ckpt: Checkpoint,
    data: ForecastData,
    ledger: Option<Vec<LedgerEntry>>,
}

fn apply(ctx: &Context, ckpt: &Path, data: &DataArgs, ckb: Option<&Path>) -> Result<Applied, Failure> {
    let (file, dir) = if ckpt.is_dir() {
        (ckpt.join("model.ckpt"), ckpt.to_path_buf())
    } else {
        (ckpt.to_path_buf(), ckpt.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let checkpoint = Checkpoint::load(&file)?;
    let ckb = CausalKnowledgeBase::load(&ckb.map(Path::to_path_buf).unwrap_or_else(|| dir.join("ckb.json")))?;
    let inputs = data.load(ctx)?;
    let fd = ForecastData::build_with(
        &inputs.series,
        &inputs.events,
        &ckb,
        &inputs.graph,
        &checkpoint.dataset,
        checkpoint.split.clone(),
        checkpoint.normalizer,
    )?;
    Ok(Applied {
        ckpt: checkpoint,
        data: fd,
        ledger: inputs.ledger,
    })
}

fn batch_size(ctx: &Context) -> usize {
    ctx.config.train.batch_size.clamp(1, 256)
}

pub fn predict(ctx: &Context, a: ApplyArgs) -> Result<(), Failure> {
    let ap = apply(ctx, &a.ckpt, &a.data, a.ckb.as_deref())?;
    let windows = ap.data.windows(a.part.into(), a.stride.max(1));
    let rows = predict_windows(&ap.ckpt.state, &ap.data, &windows, false, batch_size(ctx))?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    let csv_err = |e: csv::Error| usage(format!("{}: {e}", a.out.display()));
    w.write_record(["segment_id", "timestamp", "step", "y_hat", "y_base", "a_causal", "y"])
        .map_err(csv_err)?;
    for r in &rows {
        let seg = &ap.data.segment_ids[r.window.segment];
        for h in 0..r.y.len() {
            let t = ap.data.timestamp(r.window.start + ap.data.lookback() + h);
            w.write_record([
                seg.clone(),
                causnet::data::timefmt::format_instant(t),
                (h + 1).to_string(),
                format!("{:.4}", r.y_hat[h]),
                format!("{:.4}", r.y_base[h]),
                format!("{:.4}", r.a_causal[h]),
                format!("{:.4}", r.y[h]),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| io_failure(&a.out, e))?;
    info!("{} windows written to {}", rows.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    apply: ApplyArgs,
}

#[derive(Serialize)]
struct SignReport {
    agreeing: usize,
    counted: usize,
    share: f64,
}

#[derive(Serialize)]
struct EvalReport {
    part: &'static str,
    windows: usize,
    event_windows: usize,
    ablation: AblationReport,
    /// `MAE / MSE / RMSE` with and without the causal features.
    table: [String; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    sign_agreement: Option<SignReport>,
}

pub fn evaluate(ctx: &Context, a: EvaluateArgs) -> Result<(), Failure> {
    let a = a.apply;
    let ap = apply(ctx, &a.ckpt, &a.data, a.ckb.as_deref())?;
    let windows = ap.data.windows(a.part.into(), a.stride.max(1));
    let (ablation, rows) = ablation_compare(&ap.ckpt.state, &ap.data, &windows, batch_size(ctx))?;
    let sign = ap.ledger.as_ref().map(|l| {
        let (agreeing, counted) = sign_agreement(&rows, &ap.data, l);
        SignReport {
            agreeing,
            counted,
            share: if counted == 0 { 0.0 } else { agreeing as f64 / counted as f64 },
        }
    });
    let report = EvalReport {
        part: match a.part {
            PartArg::Train => "train",
            PartArg::Validation => "validation",
            PartArg::Test => "test",
        },
        windows: rows.len(),
        event_windows: rows.iter().filter(|r| r.event_window).count(),
        table: [format_triple(&ablation.causal), format_triple(&ablation.neutral)],
        ablation,
        sign_agreement: sign,
    };
    println!("with causal features    {}", report.table[0]);
    println!("neutral causal features {}", report.table[1]);
    println!("MAE reduction           {:.2}%", report.ablation.mae_reduction_pct);
    if let Some(s) = &report.sign_agreement {
        println!("sign agreement          {}/{} ({:.3})", s.agreeing, s.counted, s.share);
    }
    write_text(&a.out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))
}

#[derive(Args)]
pub struct AttentionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    ckb: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of test windows averaged over.
    #[arg(long, default_value_t = 256)]
    windows: usize,
    /// Only windows with an event in their lookback.
    #[arg(long)]
    events_only: bool,
}

pub fn export_attention(ctx: &Context, a: AttentionArgs) -> Result<(), Failure> {
    let ap = apply(ctx, &a.ckpt, &a.data, a.ckb.as_deref())?;
    let mut windows = ap.data.windows(Part::Test, 1);
    if a.events_only {
        windows.retain(|w| ap.data.is_event_window(*w));
    }
    if windows.len() > a.windows {
        let n = windows.len();
        windows = (0..a.windows).map(|i| windows[i * n / a.windows]).collect();
    }
    let batch = ap.data.batch(&windows);
    let maps = attention_maps(&ap.ckpt.state, &batch)?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    write_text(&a.out.join("attention_mean.csv"), &map_to_csv(maps.size, &maps.mean))?;
    write_text(&a.out.join("attention_variance.csv"), &map_to_csv(maps.size, &maps.variance))?;
    write_text(&a.out.join("attention_mean.svg"), &map_to_svg(maps.size, &maps.mean, "mean attention"))?;
    write_text(
        &a.out.join("attention_variance.svg"),
        &map_to_svg(maps.size, &maps.variance, "attention variance"),
    )?;
    info!("maps over {} windows written to {}", windows.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct FeaturesArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    ckb: PathBuf,
    /// Feature CSV.
    #[arg(long)]
    out: PathBuf,
}

pub fn export_features(ctx: &Context, a: FeaturesArgs) -> Result<(), Failure> {
    let paths = &ctx.config.paths;
    let speeds = pick(a.data.speeds.clone(), &paths.speeds, || a.data.in_dir("speeds.csv"), "speed file (--speeds or --data)")?;
    let events = pick(a.data.events.clone(), &paths.events, || a.data.in_dir("events.jsonl"), "event file (--events or --data)")?;
    let series = load_speed_csv(&speeds)?.series;
    let events = load_records(&events)?;
    let ckb = CausalKnowledgeBase::load(&a.ckb)?;
    let fc = &ctx.config.dataset.features;
    let rows = series.iter().flat_map(|s| {
        let fv = segment_features(s, &events, &ckb, fc);
        s.timestamps()
            .zip(fv)
            .map(|(t, v)| (s.segment_id.clone(), t, v))
            .collect::<Vec<_>>()
    });
    let mut w = create(&a.out)?;
    write_feature_csv(&mut w, rows).map_err(|e| io_failure(&a.out, e))
}

#[derive(Args)]
pub struct ReportArgs {
    /// Knowledge base (JSON).
    #[arg(long = "in")]
    input: PathBuf,
}

pub fn ckb_report(a: ReportArgs) -> Result<(), Failure> {
    let ckb = CausalKnowledgeBase::load(&a.input)?;
    print!("{}", ckb.report());
    Ok(())
}
