use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vader_core::caes::{caes, slope_series};
use vader_core::encoder::{encode, train};
use vader_core::eval::{ablation_grid, embedding_separation, sampler_compare, Strategy};
use vader_core::ingest::{load_bundle, write_bundle};
use vader_core::pipeline::{
    analyze_corpus, bundle_scores, corpus_prototype, load_corpus, load_tracks, read_jsonl, render_jsonl, run_pipeline,
    KeyframesDoc, ModelDoc, PipelineConfig, Split, StageError, TokenRecord,
};
use vader_core::scoring::compute_prototype;
use vader_core::synth::{corpus_specs, load_truth, write_scenario, CorpusSpec, GroundTruth, ScenarioSpec, TRUTH_FILE};
use vader_core::tracking::{frame_ids_from_map, track_video};
use vader_core::volatility::{mine_samples, volatility_curve, Label, RelationChangePair, SampleSource, TopkScope, VideoCurve};
use vader_core::VaderError;

#[derive(Parser)]
#[command(name = "vader", version, about = "Video anomaly analytics: sampling, tracking, volatility mining and relation encoding")]
struct Cli {
    /// JSON pipeline config; every field optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bundle (or a whole corpus) with ground truth.
    Synth(SynthArgs),
    /// Fuse class evidence into a bundle's scores.
    Score(ScoreArgs),
    /// Select keyframes for one bundle.
    Sample(SampleArgs),
    /// Track objects over a bundle's keyframes.
    Track(TrackArgs),
    /// Relational volatility curve of one tracked bundle.
    Volatility(VolatilityArgs),
    /// Mine labeled relation-change pairs from a corpus.
    Mine(MineArgs),
    /// Train the relation encoder.
    Train(TrainArgs),
    /// Encode samples into relation tokens.
    Encode(EncodeArgs),
    /// Embedding separation of tokens and keyframe coverage of a corpus.
    Eval(EvalArgs),
    /// Sigma by top-k grid of held-out separation.
    Ablate(AblateArgs),
    /// Run the full chain.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario spec, or a corpus spec with `--corpus`.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Generate a mixed corpus, one bundle directory per video.
    #[arg(long)]
    corpus: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Normal bundles whose frame features define the prototype. Defaults to
    /// the bundle itself when it is normal.
    #[arg(long, num_args = 1..)]
    normal: Vec<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct CaesFlags {
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    slope_window: Option<usize>,
    #[arg(long)]
    rise: Option<f64>,
    #[arg(long)]
    calm: Option<f64>,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long)]
    pre: Option<usize>,
    #[arg(long)]
    on: Option<usize>,
    #[arg(long)]
    post: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    caes: CaesFlags,
    /// Also write a per-frame CSV of scores and slopes.
    #[arg(long)]
    emit_curve: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    keyframes: PathBuf,
}

#[derive(Args)]
struct VolatilityArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long, num_args = 1.., required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    topk: Option<f64>,
    #[arg(long, value_enum)]
    topk_scope: Option<ScopeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Video,
    Global,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    samples: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    samples: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Holdout,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Ground truth files; tokens are relabeled positive exactly when their
    /// transition spans an injected relation event.
    #[arg(long, num_args = 1..)]
    truth: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "holdout")]
    split: SplitArg,
    /// Synthetic bundle directories (with truth.json) for keyframe coverage.
    #[arg(long, num_args = 1..)]
    corpus: Vec<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, num_args = 1.., required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    topks: Vec<f64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Generate the default synthetic corpus when no corpus is given.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    train: TrainFlags,
}

struct Ctx {
    config: PipelineConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn out(&self, what: &str) -> anyhow::Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| VaderError::InvalidConfig(format!("--out is required for {what}")).into())
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.config.seed)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_train(cfg: &mut PipelineConfig, f: &TrainFlags) {
    let t = &mut cfg.train;
    set(&mut t.epochs, f.epochs);
    set(&mut t.learning_rate, f.lr);
    set(&mut t.batch_size, f.batch_size);
    set(&mut t.hidden, f.hidden);
    set(&mut t.token_dim, f.token_dim);
    set(&mut t.margin, f.margin);
    set(&mut t.pool_size, f.pool_size);
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| VaderError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, contents).map_err(|e| {
        VaderError::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| VaderError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        VaderError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
        .into()
    })
}

fn cmd_synth(ctx: &Ctx, args: &SynthArgs) -> anyhow::Result<()> {
    let out = ctx.out("synth")?;
    if args.corpus {
        let mut spec: CorpusSpec = match &args.spec {
            Some(p) => read_json(p)?,
            None => ctx.config.synthetic.clone().unwrap_or_default(),
        };
        set(&mut spec.seed, ctx.seed);
        for s in corpus_specs(&spec) {
            write_scenario(&s, out.join(&s.video_id))?;
            ctx.log(format!("wrote {}", out.join(&s.video_id).display()));
        }
    } else {
        let mut spec: ScenarioSpec = match &args.spec {
            Some(p) => read_json(p)?,
            None => ScenarioSpec::default(),
        };
        set(&mut spec.seed, ctx.seed);
        write_scenario(&spec, out)?;
        ctx.log(format!("wrote {}", out.display()));
    }
    Ok(())
}

fn cmd_score(ctx: &Ctx, args: &ScoreArgs) -> anyhow::Result<()> {
    let mut bundle = load_bundle(&args.bundle)?;
    if !bundle.has_class_evidence() {
        bail!(VaderError::MissingComponent(args.bundle.join("class_dirs.json + frame_feats.csv")));
    }
    let proto = if args.normal.is_empty() {
        if !bundle.manifest.is_normal {
            bail!(VaderError::InvalidConfig(
                "an abnormal bundle needs --normal bundles to build the prototype".into()
            ));
        }
        compute_prototype(bundle.frame_feats.as_ref().expect("checked above"))?
    } else {
        let normals = args.normal.iter().map(load_bundle).collect::<Result<Vec<_>, _>>()?;
        corpus_prototype(&normals)?
            .ok_or_else(|| VaderError::InvalidConfig("no --normal bundle is normal and has frame features".into()))?
    };
    let temperature = args.temperature.unwrap_or(ctx.config.temperature);
    // Fusion starts from the stored anomaly probabilities.
    let probs = vader_core::scoring::ScoreSeries::from_probabilities(bundle.scores()?.p_anomaly.clone())?;
    bundle.scores = Some(probs);
    let fused = bundle_scores(&bundle, Some(&proto), temperature)?;
    bundle.scores = Some(fused);
    let out = ctx.out.clone().unwrap_or_else(|| args.bundle.clone());
    write_bundle(&bundle, &out)?;
    ctx.log(format!("wrote fused scores to {}", out.display()));
    Ok(())
}

fn cmd_sample(ctx: &Ctx, args: &SampleArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.config.caes.clone();
    let f = &args.caes;
    set(&mut cfg.threshold_percentile, f.percentile);
    set(&mut cfg.slope_window, f.slope_window);
    set(&mut cfg.rise_percentile, f.rise);
    set(&mut cfg.calm_percentile, f.calm);
    set(&mut cfg.max_context, f.max_context);
    set(&mut cfg.n_pre, f.pre);
    set(&mut cfg.n_on, f.on);
    set(&mut cfg.n_post, f.post);
    set(&mut cfg.budget, f.budget);
    let bundle = load_bundle(&args.bundle)?;
    let scores = bundle.scores()?;
    let outcome = caes(scores, &cfg)?;
    let doc = KeyframesDoc::new(bundle.video_id(), scores.len(), &outcome);
    write(ctx.out("sample")?, &pretty(&doc))?;
    if let Some(path) = &args.emit_curve {
        let slopes = slope_series(&scores.fused, cfg.slope_window);
        let mut csv = String::from("t,p_anomaly,fused,slope\n");
        for t in 0..scores.len() {
            csv.push_str(&format!("{t},{},{},{}\n", scores.p_anomaly[t], scores.fused[t], slopes[t]));
        }
        write(path, &csv)?;
    }
    ctx.log(format!(
        "{}: threshold {} with {} intervals and {} keyframes",
        bundle.video_id(),
        outcome.threshold,
        outcome.intervals.len(),
        outcome.keyframes.len()
    ));
    Ok(())
}

fn cmd_track(ctx: &Ctx, args: &TrackArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let keys = KeyframesDoc::load(&args.keyframes)?;
    let result = track_video(&bundle.frames, &keys.indices(), &ctx.config.assoc)?;
    write(ctx.out("track")?, &pretty(&result.to_map()))?;
    ctx.log(format!("{}: {} tracks", bundle.video_id(), result.tracks.len()));
    Ok(())
}

fn cmd_volatility(ctx: &Ctx, args: &VolatilityArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let map = load_tracks(&args.tracks)?;
    let ids = frame_ids_from_map(&map, &bundle.frames)?;
    let sigma = args.sigma.unwrap_or(ctx.config.mining.sigma);
    let curve = volatility_curve(&bundle.frames, &ids, sigma)?;
    write(ctx.out("volatility")?, &curve.to_csv())?;
    ctx.log(format!("{}: {} transitions", bundle.video_id(), curve.len()));
    Ok(())
}

fn cmd_mine(ctx: &Ctx, args: &MineArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.config.clone();
    set(&mut cfg.mining.sigma, args.sigma);
    set(&mut cfg.mining.top_k_percent, args.topk);
    if let Some(scope) = args.topk_scope {
        cfg.mining.topk_scope = match scope {
            ScopeArg::Video => TopkScope::Video,
            ScopeArg::Global => TopkScope::Global,
        };
    }
    cfg.mining.validate()?;
    let bundles = load_corpus(&args.corpus)?;
    let analyses = analyze_corpus(&bundles, &cfg)?;
    let curves: Vec<VideoCurve<'_>> = analyses.iter().map(|a| a.as_curve()).collect();
    let samples = mine_samples(&curves, &cfg.mining, ctx.seed())?;
    write(ctx.out("mine")?, &render_jsonl(&samples))?;
    let pos = samples.iter().filter(|s| s.label == Label::Positive).count();
    ctx.log(format!("{pos} positives, {} negatives", samples.len() - pos));
    Ok(())
}

fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.config.clone();
    apply_train(&mut cfg, &args.train);
    cfg.train.seed = ctx.seed();
    let samples: Vec<RelationChangePair> = read_jsonl(&args.samples)?;
    let outcome = train(&samples, &cfg.train)?;
    let doc = ModelDoc {
        config: cfg.train,
        params: outcome.params,
        history: outcome.history,
    };
    write(ctx.out("train")?, &pretty(&doc))?;
    ctx.log(format!("final loss {:?}", doc.history.last()));
    Ok(())
}

fn cmd_encode(ctx: &Ctx, args: &EncodeArgs) -> anyhow::Result<()> {
    let model = ModelDoc::load(&args.model)?;
    let samples: Vec<RelationChangePair> = read_jsonl(&args.samples)?;
    let records = samples
        .iter()
        .map(|s| {
            encode(&model.params, &s.vec).map(|t| TokenRecord {
                source: s.source.clone(),
                label: s.label,
                split: None,
                token: t.vec,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    write(ctx.out("encode")?, &render_jsonl(&records))?;
    ctx.log(format!("{} tokens", records.len()));
    Ok(())
}

/// Positive when the transition `(frame_before, frame_after]` covers an
/// injected relation event of the same video.
fn truth_label(source: &SampleSource, truths: &[GroundTruth]) -> Option<Label> {
    let truth = truths.iter().find(|t| t.video_id == source.video_id)?;
    let hit = truth
        .positive_transitions
        .iter()
        .any(|e| source.frame_before < e.transition && e.transition <= source.frame_after);
    Some(if hit { Label::Positive } else { Label::Negative })
}

fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> anyhow::Result<()> {
    if args.tokens.is_none() && args.corpus.is_empty() {
        bail!(VaderError::InvalidConfig("eval needs --tokens or --corpus".into()));
    }
    let mut report = serde_json::Map::new();
    if let Some(path) = &args.tokens {
        let mut records: Vec<TokenRecord> = read_jsonl(path)?;
        let wanted = match args.split {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Holdout => Some(Split::Holdout),
            SplitArg::All => None,
        };
        if wanted.is_some() && records.iter().all(|r| r.split.is_none()) {
            ctx.log("tokens carry no split; evaluating all of them");
        } else if let Some(w) = wanted {
            records.retain(|r| r.split == Some(w));
        }
        if !args.truth.is_empty() {
            let truths = args.truth.iter().map(load_truth).collect::<Result<Vec<_>, _>>()?;
            for r in &mut records {
                r.label = truth_label(&r.source, &truths)
                    .ok_or_else(|| anyhow!(VaderError::SchemaViolation(format!("no truth for video {}", r.source.video_id))))?;
            }
        }
        let tokens: Vec<(Vec<f64>, Label)> = records.iter().map(|r| (r.token.clone(), r.label)).collect();
        report.insert("tokens".into(), records.len().into());
        report.insert("separation".into(), embedding_separation(&tokens)?.into());
    }
    if !args.corpus.is_empty() {
        let mut videos = Vec::new();
        for dir in &args.corpus {
            let bundle = load_bundle(dir)?;
            let truth = load_truth(dir.join(TRUTH_FILE))?;
            videos.push((bundle.scores()?.clone(), truth));
        }
        let cov = sampler_compare(&videos, &Strategy::ALL, &ctx.config.caes)?;
        report.insert("coverage".into(), serde_json::to_value(cov)?);
    }
    let text = pretty(&report);
    match &ctx.out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, args: &AblateArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.config.clone();
    apply_train(&mut cfg, &args.train);
    cfg.train.validate()?;
    let bundles = load_corpus(&args.corpus)?;
    let analyses = analyze_corpus(&bundles, &cfg)?;
    let grid = ablation_grid(
        &analyses,
        &args.sigmas,
        &args.topks,
        &cfg.mining,
        &cfg.train,
        cfg.holdout_fraction,
        ctx.seed(),
    )?;
    write(ctx.out("ablate")?, &grid.to_csv())?;
    ctx.log(grid.to_csv());
    Ok(())
}

fn cmd_pipeline(ctx: &Ctx, args: &PipelineArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.config.clone();
    if !args.corpus.is_empty() {
        cfg.corpus = args.corpus.clone();
    }
    if args.synthetic && cfg.synthetic.is_none() {
        cfg.synthetic = Some(CorpusSpec::default());
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
        if let Some(spec) = cfg.synthetic.as_mut() {
            spec.seed = s;
        }
    }
    if let Some(o) = &ctx.out {
        cfg.output = o.clone();
    }
    apply_train(&mut cfg, &args.train);
    let report = run_pipeline(&cfg)?;
    ctx.log(format!(
        "{} videos, separation {:?}, artifacts in {}",
        report.videos.len(),
        report.separation,
        cfg.output.display()
    ));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(stage) = err.downcast_ref::<StageError>() {
        return if stage.stage == vader_core::pipeline::Stage::Config && stage.source.is_validation() {
            2
        } else {
            3
        };
    }
    match err.downcast_ref::<VaderError>() {
        Some(e) if e.is_validation() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> anyhow::Result<()> {
        let config = match &cli.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        let ctx = Ctx {
            config,
            seed: cli.seed,
            out: cli.out.clone(),
            verbose: cli.verbose,
        };
        match &cli.command {
            Command::Synth(a) => cmd_synth(&ctx, a),
            Command::Score(a) => cmd_score(&ctx, a),
            Command::Sample(a) => cmd_sample(&ctx, a),
            Command::Track(a) => cmd_track(&ctx, a),
            Command::Volatility(a) => cmd_volatility(&ctx, a),
            Command::Mine(a) => cmd_mine(&ctx, a),
            Command::Train(a) => cmd_train(&ctx, a),
            Command::Encode(a) => cmd_encode(&ctx, a),
            Command::Eval(a) => cmd_eval(&ctx, a),
            Command::Ablate(a) => cmd_ablate(&ctx, a),
            Command::Pipeline(a) => cmd_pipeline(&ctx, a),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
