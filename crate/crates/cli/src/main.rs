use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use coprop_core::anchor::{generate_control_points, AnchorMode, AnchorResult, AudioPayload, Provenance};
use coprop_core::annotate::{build_retrieval_store, filter_moc, RetrievalStore};
use coprop_core::dataset::{audio_path, list_videos, load_audio, write_atomic};
use coprop_core::error::Error;
use coprop_core::metrics::{evaluate, MaskMode};
use coprop_core::pipeline::{cosine_control_points, run_inference, run_train, BackendKind, Config, ControlSource, TrainStage};
use coprop_core::synth::{generate_corpus, ChangeKind, CorpusConfig};

#[derive(Parser)]
#[command(name = "coprop", version, about = "Audio-guided video object segmentation over sub-clips")]
struct Cli {
    /// JSON configuration document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every trainer.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Videos processed concurrently during inference.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    GenSynth(GenSynth),
    /// Build the retrieval store from ground-truth masks and annotations.
    Annotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the ids of videos whose sounding set changes (JSON array).
    FilterMoc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate control points for every video.
    Anchor(AnchorArgs),
    /// Train the keyframe model on every annotated frame.
    TrainKeyframe(TrainArgs),
    /// Fine-tune a keyframe checkpoint on keyframes only.
    FinetuneKeyframe {
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint from train-keyframe.
        #[arg(long)]
        init: PathBuf,
    },
    /// Train the propagator on ground-truth sub-clips.
    TrainPropagator {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_parser = ["1", "4"])]
        insert_layers: Option<String>,
    },
    /// Run the full pipeline and write predicted masks.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Exactly this many scenes contain a sounding-set change.
    #[arg(long)]
    change_scenes: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    transition_prob: f64,
    /// Allowed change kinds (comma separated).
    #[arg(long, value_delimiter = ',', value_enum)]
    kinds: Vec<Kind>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Handoff,
    Join,
    Leave,
    Return,
}

#[derive(Args)]
struct AnchorArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Reply script for the mock backend.
    #[arg(long)]
    mock_replies: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Http,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    /// Prediction root; run_manifest.json is written here too.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
    #[arg(long)]
    keyframe: Option<PathBuf>,
    #[arg(long)]
    propagator: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    mock_replies: Option<PathBuf>,
    /// Use ground-truth masks at keyframes.
    #[arg(long)]
    oracle_keyframes: bool,
    /// Take keyframe masks from another model's prediction root.
    #[arg(long)]
    keyframe_import: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// JSON array of video ids, as written by filter-moc.
    #[arg(long)]
    subset: Option<PathBuf>,
    #[arg(long)]
    beta_sq: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    semantic: bool,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    let mut text = text.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(w) = cli.workers {
        config.pipeline.workers = w;
    }
    Ok(config)
}

fn gen_synth(a: &GenSynth, seed: u64) -> anyhow::Result<()> {
    let mut cfg = CorpusConfig {
        frames: a.frames,
        size: a.size,
        noise_sigma: a.noise,
        transition_prob: a.transition_prob,
        change_scenes: a.change_scenes,
        ..Default::default()
    };
    if !a.kinds.is_empty() {
        cfg.change_kinds = a
            .kinds
            .iter()
            .map(|k| match k {
                Kind::Handoff => ChangeKind::Handoff,
                Kind::Join => ChangeKind::Join,
                Kind::Leave => ChangeKind::Leave,
                Kind::Return => ChangeKind::Return,
            })
            .collect();
    }
    let ids = generate_corpus(&a.out, a.n, &cfg, seed, a.overwrite)?;
    log::info!("wrote {} scenes to {}", ids.len(), a.out.display());
    Ok(())
}

fn anchor(a: &AnchorArgs, config: &Config) -> anyhow::Result<()> {
    let mut pc = config.pipeline.clone();
    if let Some(b) = a.backend {
        pc.llm.backend = match b {
            Backend::Mock => BackendKind::Mock,
            Backend::Http => BackendKind::Http,
        };
    }
    if let Some(p) = &a.mock_replies {
        pc.llm.mock_replies = Some(p.clone());
    }
    if let Some(e) = &a.endpoint {
        pc.llm.endpoint = e.clone();
    }
    if let Some(t) = a.timeout {
        pc.llm.timeout_secs = t;
    }
    if let Some(r) = a.retries {
        pc.llm.retries = r;
    }
    let mut anchor = pc.anchor.clone();
    if let Some(t) = a.theta {
        anchor.theta = t;
    }
    anchor.mode = match &a.mode {
        Some(m) => m.parse::<AnchorMode>().map_err(|_| Error::Usage(format!("unknown anchor mode {m:?}")))?,
        None => anchor.mode,
    };
    let store = match a.store.as_ref().or(pc.store.as_ref()) {
        Some(p) => RetrievalStore::load(p)?,
        None => RetrievalStore::new(),
    };
    let client = pc.llm.client()?;
    let mut results: BTreeMap<String, AnchorResult> = BTreeMap::new();
    for id in list_videos(&a.data)? {
        let audio = load_audio::<f64>(&a.data, &id)?;
        let result = if anchor.mode == AnchorMode::Cosine {
            AnchorResult::from_flags(cosine_control_points(&audio, anchor.theta)?, Provenance::Cosine)
        } else {
            let payload = AudioPayload::from_file(&audio_path(&a.data, &id))?;
            generate_control_points(client.as_ref(), &payload, &audio, &store, &anchor)?
        };
        results.insert(id, result);
    }
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&results)?)
}

fn infer(a: &InferArgs, config: &Config) -> anyhow::Result<bool> {
    let mut pc = config.pipeline.clone();
    if let Some(m) = &a.mode {
        pc.mode = m.parse::<ControlSource>()?;
    }
    if let Some(t) = a.theta {
        pc.anchor.theta = t;
    }
    if let Some(o) = &a.out {
        pc.output = o.clone();
    }
    if a.keyframe.is_some() {
        pc.keyframe_checkpoint = a.keyframe.clone();
    }
    if a.propagator.is_some() {
        pc.propagator_checkpoint = a.propagator.clone();
    }
    if a.store.is_some() {
        pc.store = a.store.clone();
    }
    if a.mock_replies.is_some() {
        pc.llm.mock_replies = a.mock_replies.clone();
    }
    pc.oracle_keyframes |= a.oracle_keyframes;
    if a.keyframe_import.is_some() {
        pc.keyframe_import = a.keyframe_import.clone();
    }
    let manifest = run_inference::<f64>(&a.data, &pc)?;
    for v in &manifest.videos {
        if let Some(e) = &v.error {
            eprintln!("{}: failed: {e}", v.video_id);
        }
    }
    log::info!(
        "{} videos, {} failed; predictions in {}",
        manifest.videos.len(),
        manifest.failures,
        pc.output.display()
    );
    Ok(manifest.failures == 0)
}

fn eval(a: &EvalArgs, config: &Config) -> anyhow::Result<()> {
    let mut ec = config.eval.clone();
    if let Some(b) = a.beta_sq {
        ec.beta_sq = b;
    }
    if let Some(t) = a.tau {
        ec.tau = t;
    }
    if a.semantic {
        ec.mode = MaskMode::Semantic;
    }
    let subset: Option<Vec<String>> = match &a.subset {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ec.subset = p.file_stem().map(|s| s.to_string_lossy().into_owned());
            Some(serde_json::from_str(&text).with_context(|| format!("{} is not a JSON array of ids", p.display()))?)
        }
        None => None,
    };
    let report = evaluate(&a.data, &a.pred, subset.as_deref(), &ec)?;
    for e in &report.errors {
        eprintln!("{e}");
    }
    emit(a.out.as_deref(), &report.to_json()?)?;
    if !report.is_clean() {
        bail!("{} videos could not be scored", report.errors.len());
    }
    Ok(())
}

fn train(stage: TrainStage, a: &TrainArgs, config: &Config, init: Option<&Path>) -> anyhow::Result<()> {
    let m = run_train::<f64>(&a.data, stage, config, init, &a.out)?;
    log::info!(
        "{:?} checkpoint {} ({:.1}s, final loss {:?})",
        stage,
        a.out.display(),
        m.seconds,
        m.loss_tail.last()
    );
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let mut config = load_config(cli)?;
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a, cli.seed.unwrap_or(config.seed))?,
        Command::Annotate { data, out } => {
            let store = build_retrieval_store(data)?;
            store.save(out)?;
            log::info!("{} categories written to {}", store.len(), out.display());
        }
        Command::FilterMoc { data, out } => emit(out.as_deref(), &serde_json::to_string_pretty(&filter_moc(data)?)?)?,
        Command::Anchor(a) => anchor(a, &config)?,
        Command::TrainKeyframe(a) => train(TrainStage::Keyframe, a, &config, None)?,
        Command::FinetuneKeyframe { train: a, init } => train(TrainStage::Finetune, a, &config, Some(init))?,
        Command::TrainPropagator { train: a, insert_layers } => {
            let model = &mut config.propagator.model;
            match insert_layers.as_deref() {
                Some("1") => model.insert_levels = vec![model.channels.len() - 1],
                Some(_) => model.insert_levels = (0..model.channels.len()).collect(),
                None => {}
            }
            train(TrainStage::Propagator, a, &config, None)?
        }
        Command::Infer(a) => return infer(a, &config),
        Command::Eval(a) => eval(a, &config)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<Error>(), Some(Error::Usage(_))) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
