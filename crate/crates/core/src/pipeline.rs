//! End-to-end orchestration: control points, sub-clips, keyframe masks,
//! propagation, and the manifests that record each run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchor::{
    detect_boundaries_cosine, generate_control_points, AnchorConfig, AnchorMode, AnchorResult, AudioPayload,
    HttpBackend, LlmClient, MockBackend, Provenance,
};
use crate::annotate::{build_keyframe_subset, RetrievalStore};
use crate::checkpoint::Checkpoint;
use crate::dataset::{audio_path, list_videos, load_annotation, load_mask_frame, load_sample, save_mask_sequence};
use crate::error::{Error, Result};
use crate::keyframe::{finetune_keyframe, train_keyframe, KeyframeConfig, KeyframeNet};
use crate::metrics::EvalConfig;
use crate::propagator::{propagate_subclip, train_propagator, PropagatorConfig, PropagatorNet};
use crate::scalar::Scalar;
use crate::types::{ControlPointList, LabelMap, MaskSequence, SubClip};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Where control points come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlSource {
    #[default]
    #[serde(rename = "rcpg")]
    Rcpg,
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "1step")]
    OneStep,
    #[serde(rename = "3step")]
    ThreeStep,
    /// The dataset's `control_points.json`.
    #[serde(rename = "gt")]
    GroundTruth,
}

impl std::str::FromStr for ControlSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(ControlSource::GroundTruth),
            other => match other.parse::<AnchorMode>() {
                Ok(AnchorMode::Rcpg) => Ok(ControlSource::Rcpg),
                Ok(AnchorMode::Cosine) => Ok(ControlSource::Cosine),
                Ok(AnchorMode::OneStep) => Ok(ControlSource::OneStep),
                Ok(AnchorMode::ThreeStep) => Ok(ControlSource::ThreeStep),
                Err(_) => Err(Error::Usage(format!("unknown mode {other:?} (expected rcpg, cosine, 1step, 3step or gt)"))),
            },
        }
    }
}

impl ControlSource {
    fn anchor_mode(self) -> Option<AnchorMode> {
        match self {
            ControlSource::Rcpg => Some(AnchorMode::Rcpg),
            ControlSource::Cosine => Some(AnchorMode::Cosine),
            ControlSource::OneStep => Some(AnchorMode::OneStep),
            ControlSource::ThreeStep => Some(AnchorMode::ThreeStep),
            ControlSource::GroundTruth => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub backend: BackendKind,
    /// Reply script for the mock backend; without one every request fails and the cosine fallback engages.
    pub mock_replies: Option<PathBuf>,
    pub endpoint: String,
    pub timeout_secs: f64,
    pub retries: u32,
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            backend: BackendKind::Mock,
            mock_replies: None,
            endpoint: "http://127.0.0.1:8080/complete".into(),
            timeout_secs: 60.0,
            retries: 2,
        }
    }
}

impl LlmSettings {
    pub fn client(&self) -> Result<Box<dyn LlmClient>> {
        Ok(match self.backend {
            BackendKind::Mock => match &self.mock_replies {
                Some(p) => Box::new(MockBackend::load(p)?),
                None => Box::new(MockBackend::default()),
            },
            BackendKind::Http => {
                if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
                    return Err(Error::Config(format!("timeout_secs must be positive, got {}", self.timeout_secs)));
                }
                Box::new(HttpBackend::new(
                    self.endpoint.clone(),
                    Duration::from_secs_f64(self.timeout_secs),
                    self.retries,
                ))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: ControlSource,
    /// Threshold, retrieval and prompt settings; its `mode` field is ignored in favour of `mode` above.
    pub anchor: AnchorConfig,
    pub llm: LlmSettings,
    /// Retrieval store built by `annotate`; an empty store is used when unset.
    pub store: Option<PathBuf>,
    pub keyframe_checkpoint: Option<PathBuf>,
    pub propagator_checkpoint: Option<PathBuf>,
    /// Use ground-truth masks at keyframes instead of the keyframe model.
    pub oracle_keyframes: bool,
    /// Read keyframe masks from an external prediction root instead of the keyframe model.
    pub keyframe_import: Option<PathBuf>,
    pub output: PathBuf,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: ControlSource::Rcpg,
            anchor: AnchorConfig::default(),
            llm: LlmSettings::default(),
            store: None,
            keyframe_checkpoint: None,
            propagator_checkpoint: None,
            oracle_keyframes: false,
            keyframe_import: None,
            output: PathBuf::from("predictions"),
            workers: 1,
        }
    }
}

/// The single JSON document accepted by `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub keyframe: KeyframeConfig,
    pub propagator: PropagatorConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Applies a global seed to every trainer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.keyframe.train.seed = seed;
        self.propagator.train.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyframeSource {
    Model,
    Oracle,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub status: VideoStatus,
    pub error: Option<String>,
    pub anchor: Option<AnchorResult>,
    pub subclips: Vec<SubClip>,
    pub keyframe_source: KeyframeSource,
    /// Wall-clock seconds per stage.
    pub seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    /// sha256 of each checkpoint file used, keyed by role.
    pub checkpoints: BTreeMap<String, String>,
    pub videos: Vec<VideoRecord>,
    pub seconds: BTreeMap<String, f64>,
    pub failures: usize,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("run manifest", e))
    }

    pub fn failed_videos(&self) -> Vec<&str> {
        self.videos
            .iter()
            .filter(|v| v.status == VideoStatus::Failed)
            .map(|v| v.video_id.as_str())
            .collect()
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Control points from the cosine detector, with thresholds outside its
/// domain mapped to the degenerate splits: `theta <= -1` never fires,
/// `theta > 1` fires on every frame.
pub fn cosine_control_points<S: Scalar>(audio: &crate::types::AudioFeatures<S>, theta: f64) -> Result<ControlPointList> {
    if theta.is_nan() {
        return Err(Error::InvalidInput("theta is NaN".into()));
    }
    if theta <= -1.0 {
        return Ok(ControlPointList::single(audio.frames()));
    }
    if theta > 1.0 {
        return Ok(ControlPointList::every_frame(audio.frames()));
    }
    detect_boundaries_cosine(audio, theta)
}

struct Models<S> {
    keyframe: Option<KeyframeNet<S>>,
    propagator: PropagatorNet<S>,
    client: Option<Box<dyn LlmClient>>,
    store: RetrievalStore,
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::Checkpoint(format!("no {what} checkpoint configured")))?;
    if !p.is_file() {
        return Err(Error::Checkpoint(format!("{what} checkpoint {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_models<S: Scalar>(config: &PipelineConfig, digests: &mut BTreeMap<String, String>) -> Result<Models<S>> {
    let keyframe = if config.oracle_keyframes || config.keyframe_import.is_some() {
        None
    } else {
        let p = required(&config.keyframe_checkpoint, "keyframe")?;
        digests.insert("keyframe".into(), file_digest(p)?);
        Some(KeyframeNet::from_checkpoint(&Checkpoint::load(p)?)?)
    };
    if let Some(dir) = &config.keyframe_import {
        if !dir.is_dir() {
            return Err(Error::Config(format!("keyframe import root {} does not exist", dir.display())));
        }
    }
    let p = required(&config.propagator_checkpoint, "propagator")?;
    digests.insert("propagator".into(), file_digest(p)?);
    let propagator = PropagatorNet::from_checkpoint(&Checkpoint::load(p)?)?;
    let uses_llm = matches!(config.mode, ControlSource::Rcpg | ControlSource::OneStep | ControlSource::ThreeStep);
    let client = if uses_llm { Some(config.llm.client()?) } else { None };
    let store = match &config.store {
        Some(p) => RetrievalStore::load(p)?,
        None => RetrievalStore::new(),
    };
    Ok(Models {
        keyframe,
        propagator,
        client,
        store,
    })
}

struct Stopwatch(BTreeMap<String, f64>);

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.0.entry(stage.into()).or_default() += start.elapsed().as_secs_f64();
        out
    }
}

/// Keyframe masks from an external prediction root; every missing index is reported at once.
fn import_keyframes(dir: &Path, id: &str, keyframes: &[usize], height: usize, width: usize) -> Result<Vec<LabelMap>> {
    let loaded = keyframes
        .iter()
        .map(|&k| load_mask_frame(dir, id, k))
        .collect::<Result<Vec<_>>>()?;
    let missing: Vec<usize> = keyframes.iter().zip(&loaded).filter(|(_, m)| m.is_none()).map(|(&k, _)| k).collect();
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!("imported keyframe masks missing for frames {missing:?}")));
    }
    loaded
        .into_iter()
        .zip(keyframes)
        .map(|(m, &k)| {
            let m = m.expect("checked above");
            if m.height != height || m.width != width {
                return Err(Error::InvalidInput(format!(
                    "imported keyframe mask {k} is {}x{}, frames are {height}x{width}",
                    m.height, m.width
                )));
            }
            Ok(m)
        })
        .collect()
}

fn run_video<S: Scalar>(
    root: &Path,
    config: &PipelineConfig,
    models: &Models<S>,
    id: &str,
    record: &mut VideoRecord,
) -> Result<()> {
    let mut watch = Stopwatch(BTreeMap::new());
    let result = (|| {
        let sample = watch.time("load", || load_sample::<S>(root, id))?;
        let anchor = watch.time("anchor", || -> Result<AnchorResult> {
            match config.mode {
                ControlSource::GroundTruth => {
                    let ann = load_annotation(root, id)?
                        .ok_or_else(|| Error::InvalidInput("mode gt needs control_points.json".into()))?;
                    Ok(AnchorResult::from_flags(ann.control_points, Provenance::GroundTruth))
                }
                ControlSource::Cosine => Ok(AnchorResult::from_flags(
                    cosine_control_points(&sample.audio, config.anchor.theta)?,
                    Provenance::Cosine,
                )),
                mode => {
                    let anchor = AnchorConfig {
                        mode: mode.anchor_mode().expect("llm mode"),
                        ..config.anchor.clone()
                    };
                    let payload = AudioPayload::from_file(&audio_path(root, id))?;
                    let client = models.client.as_deref().expect("client built for llm modes");
                    generate_control_points(client, &payload, &sample.audio, &models.store, &anchor)
                }
            }
        })?;
        if anchor.control_points.len() != sample.clip.len() {
            return Err(Error::Consistency(format!(
                "{} control flags for {} frames",
                anchor.control_points.len(),
                sample.clip.len()
            )));
        }
        let subclips = anchor.control_points.subclips();
        record.subclips = subclips.clone();
        record.anchor = Some(anchor);

        let starts: Vec<usize> = subclips.iter().map(|sc| sc.start).collect();
        let keyframes: Vec<LabelMap> = watch.time("keyframe", || -> Result<Vec<LabelMap>> {
            if config.oracle_keyframes {
                let gt = sample
                    .masks
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("oracle keyframes need ground-truth masks".into()))?;
                return Ok(starts.iter().map(|&k| gt.labels()[k].clone()).collect());
            }
            if let Some(dir) = &config.keyframe_import {
                return import_keyframes(dir, id, &starts, sample.clip.height(), sample.clip.width());
            }
            let net = models.keyframe.as_ref().expect("keyframe model loaded");
            starts
                .iter()
                .map(|&k| Ok(net.predict(&sample.clip.frames()[k], sample.audio.row(k))?.mask))
                .collect()
        })?;

        let labels = watch.time("propagate", || -> Result<Vec<LabelMap>> {
            let mut labels = Vec::with_capacity(sample.clip.len());
            for (sc, kf) in subclips.iter().zip(&keyframes) {
                let frames = &sample.clip.frames()[sc.frames()];
                labels.extend(propagate_subclip(&models.propagator, kf, frames, &sample.audio.slice(sc.start, sc.end))?);
            }
            Ok(labels)
        })?;
        let masks = MaskSequence::new(labels, None)?;
        watch.time("write", || save_mask_sequence(&masks, &config.output, id))
    })();
    record.seconds = watch.0;
    result
}

/// Runs the full pipeline over every video under `root`, writing masks and
/// `run_manifest.json` under `config.output`. A failing video is recorded in
/// the manifest and does not stop the others.
pub fn run_inference<S: Scalar>(root: &Path, config: &PipelineConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let mut checkpoints = BTreeMap::new();
    let models = load_models::<S>(config, &mut checkpoints)?;
    let ids = list_videos(root)?;
    std::fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let source = if config.oracle_keyframes {
        KeyframeSource::Oracle
    } else if config.keyframe_import.is_some() {
        KeyframeSource::Imported
    } else {
        KeyframeSource::Model
    };
    let process = |id: &String| {
        let mut record = VideoRecord {
            video_id: id.clone(),
            status: VideoStatus::Ok,
            error: None,
            anchor: None,
            subclips: Vec::new(),
            keyframe_source: source,
            seconds: BTreeMap::new(),
        };
        if let Err(e) = run_video(root, config, &models, id, &mut record) {
            log::warn!("{id}: {e}");
            record.status = VideoStatus::Failed;
            record.error = Some(e.to_string());
        }
        record
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut videos: Vec<VideoRecord> = pool.install(|| ids.par_iter().map(process).collect());
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));

    let mut seconds: BTreeMap<String, f64> = BTreeMap::new();
    for v in &videos {
        for (k, s) in &v.seconds {
            *seconds.entry(k.clone()).or_default() += s;
        }
    }
    seconds.insert("total".into(), start.elapsed().as_secs_f64());
    let manifest = RunManifest {
        config: config.clone(),
        checkpoints,
        failures: videos.iter().filter(|v| v.status == VideoStatus::Failed).count(),
        videos,
        seconds,
    };
    let path = config.output.join(MANIFEST_FILE);
    let mut json = manifest.to_json()?;
    json.push('\n');
    crate::dataset::write_atomic(&path, json.as_bytes())?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Keyframe,
    Finetune,
    Propagator,
}

impl std::str::FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyframe" => Ok(TrainStage::Keyframe),
            "finetune" => Ok(TrainStage::Finetune),
            "propagator" => Ok(TrainStage::Propagator),
            other => Err(Error::Usage(format!("unknown stage {other:?} (expected keyframe, finetune or propagator)"))),
        }
    }
}

/// Written next to each trained checkpoint as `<checkpoint>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub stage: TrainStage,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub digest: String,
    pub parent: Option<String>,
    pub seconds: f64,
    pub loss_tail: Vec<f64>,
    pub config: serde_json::Value,
}

pub fn train_manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    checkpoint.with_file_name(name)
}

/// Trains one stage and writes its checkpoint to `out`. Fine-tuning starts
/// from the keyframe checkpoint at `init`.
pub fn run_train<S: Scalar>(
    root: &Path,
    stage: TrainStage,
    config: &Config,
    init: Option<&Path>,
    out: &Path,
) -> Result<TrainManifest> {
    let start = Instant::now();
    let mut parent = None;
    let (ckpt, report, echo) = match stage {
        TrainStage::Keyframe => {
            let (c, r) = train_keyframe::<S>(root, &config.keyframe)?;
            (c, r, serde_json::to_value(&config.keyframe))
        }
        TrainStage::Finetune => {
            let init = init
                .filter(|p| p.is_file())
                .ok_or_else(|| Error::Checkpoint("fine-tuning needs a trained keyframe checkpoint; run train-keyframe first".into()))?;
            parent = Some(file_digest(init)?);
            let base = Checkpoint::<S>::load(init)?;
            let subset = build_keyframe_subset::<S>(root)?;
            let (c, r) = finetune_keyframe(&base, &subset, &config.keyframe)?;
            (c, r, serde_json::to_value(&config.keyframe))
        }
        TrainStage::Propagator => {
            let (c, r) = train_propagator::<S>(root, &config.propagator)?;
            (c, r, serde_json::to_value(&config.propagator))
        }
    };
    ckpt.save(out)?;
    let manifest = TrainManifest {
        stage,
        data: root.to_path_buf(),
        checkpoint: out.to_path_buf(),
        digest: file_digest(out)?,
        parent,
        seconds: start.elapsed().as_secs_f64(),
        loss_tail: report.tail(),
        config: echo.map_err(|e| Error::json("train config", e))?,
    };
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("train manifest", e))?;
    json.push('\n');
    crate::dataset::write_atomic(&train_manifest_path(out), json.as_bytes())?;
    Ok(manifest)
}
