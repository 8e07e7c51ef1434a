//! Deterministic synthetic audio-visual scenes with known ground truth.
//!
//! Every object is rendered in every frame, but only objects that are sounding
//! at frame `t` appear in mask `t`, and audio row `t` is the sum of the
//! signatures of the sounding objects plus Gaussian noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{save_sample, Annotation};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{AudioFeatures, ControlPointList, Frame, LabelMap, MaskSequence, ObjectId, VideoClip};

const BACKGROUND: [u8; 3] = [40, 40, 48];
const SIGNATURE_SEED: u64 = 0x5151_0a0d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
}

/// A sound-producing category: fixed id, colour and audio signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub id: ObjectId,
    pub name: String,
    pub color: [u8; 3],
    pub signature: Vec<f64>,
}

/// The fixed category set shared by every generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub categories: Vec<Category>,
}

impl Vocabulary {
    /// Six categories with pairwise orthonormal signatures of length `dim`.
    pub fn standard(dim: usize) -> Result<Self> {
        const ENTRIES: [(&str, [u8; 3]); 6] = [
            ("cello", [214, 126, 44]),
            ("piano", [235, 235, 235]),
            ("guitar", [210, 40, 50]),
            ("dog", [150, 90, 230]),
            ("girl", [60, 200, 90]),
            ("car", [50, 140, 235]),
        ];
        if dim < ENTRIES.len() {
            return Err(Error::Spec(format!(
                "audio dimension {dim} cannot hold {} orthogonal signatures",
                ENTRIES.len()
            )));
        }
        let signatures = orthonormal_set(ENTRIES.len(), dim, SIGNATURE_SEED);
        let categories = ENTRIES
            .iter()
            .zip(signatures)
            .enumerate()
            .map(|(i, ((name, color), signature))| Category {
                id: (i + 1) as ObjectId,
                name: name.to_string(),
                color: *color,
                signature,
            })
            .collect();
        Ok(Vocabulary { categories })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn by_id(&self, id: ObjectId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }
}

/// Gram-Schmidt over seeded Gaussian vectors.
fn orthonormal_set(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: ObjectId,
    pub category: String,
    /// Unit-norm audio signature.
    pub signature: Vec<f64>,
    pub color: [u8; 3],
    pub shape: Shape,
    /// Centre `(y, x)` at frame 0, in pixels.
    pub start: (f64, f64),
    /// Centre displacement per frame.
    pub velocity: (f64, f64),
    pub radius: f64,
    /// Half-open sounding intervals `[on, off)`.
    pub schedule: Vec<(usize, usize)>,
}

impl SceneObject {
    pub fn center(&self, t: usize) -> (f64, f64) {
        (
            self.start.0 + self.velocity.0 * t as f64,
            self.start.1 + self.velocity.1 * t as f64,
        )
    }

    pub fn sounding(&self, t: usize) -> bool {
        self.schedule.iter().any(|&(on, off)| on <= t && t < off)
    }

    fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let (cy, cx) = self.center(t);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        match self.shape {
            Shape::Disc => dy * dy + dx * dx <= self.radius * self.radius,
            Shape::Square => dy.abs() <= self.radius && dx.abs() <= self.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub video_id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub objects: Vec<SceneObject>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Spec("scene needs at least one frame".into()));
        }
        if self.height < crate::types::MIN_SIDE || self.width < crate::types::MIN_SIDE {
            return Err(Error::Spec(format!("frame size {}x{} too small", self.height, self.width)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec(format!("noise sigma {} invalid", self.noise_sigma)));
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if o.id == 0 {
                return Err(Error::Spec(format!("object {} uses reserved id 0", o.category)));
            }
            if !ids.insert(o.id) {
                return Err(Error::Spec(format!("two objects share id {}", o.id)));
            }
            if o.signature.len() != self.dim {
                return Err(Error::Spec(format!(
                    "object {} signature has length {}, expected {}",
                    o.id,
                    o.signature.len(),
                    self.dim
                )));
            }
            let norm = o.signature.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Spec(format!("object {} signature is not unit norm", o.id)));
            }
            for &(on, off) in &o.schedule {
                if on >= off || off > self.frames {
                    return Err(Error::Spec(format!(
                        "object {} interval [{on}, {off}) outside [0, {})",
                        o.id, self.frames
                    )));
                }
            }
            for t in 0..self.frames {
                let (cy, cx) = o.center(t);
                let r = o.radius;
                if cy - r < 0.0 || cx - r < 0.0 || cy + r > (self.height - 1) as f64 || cx + r > (self.width - 1) as f64 {
                    return Err(Error::Spec(format!("object {} leaves the frame at t={t}", o.id)));
                }
            }
        }
        Ok(())
    }

    /// Ids sounding at frame `t`.
    pub fn sounding_set(&self, t: usize) -> BTreeSet<ObjectId> {
        self.objects.iter().filter(|o| o.sounding(t)).map(|o| o.id).collect()
    }
}

/// Output of [`generate_scene`].
#[derive(Debug, Clone)]
pub struct GeneratedScene<S> {
    pub clip: VideoClip,
    pub audio: AudioFeatures<S>,
    pub masks: MaskSequence,
    pub control: ControlPointList,
    /// Categories that sound at some point, ordered by first onset.
    pub categories: Vec<String>,
}

impl<S> GeneratedScene<S> {
    pub fn annotation(&self) -> Annotation {
        Annotation {
            video_id: self.clip.video_id.clone(),
            control_points: self.control.clone(),
            categories: self.categories.clone(),
        }
    }
}

pub fn generate_scene<S: Scalar>(spec: &SceneSpec) -> Result<GeneratedScene<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);

    let mut frames = Vec::with_capacity(spec.frames);
    let mut labels = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = Frame::filled(h, w, BACKGROUND);
        for px in frame.data.iter_mut() {
            *px = px.saturating_add(rng.gen_range(0..8));
        }
        let mut mask = LabelMap::background(h, w);
        for y in 0..h {
            for x in 0..w {
                // later objects are drawn on top
                if let Some(o) = spec.objects.iter().rev().find(|o| o.covers(t, y, x)) {
                    frame.set_pixel(y, x, o.color);
                    if o.sounding(t) {
                        mask.data[y * w + x] = o.id;
                    }
                }
            }
        }
        frames.push(frame);
        labels.push(mask);
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
    let mut audio = Vec::with_capacity(spec.frames * spec.dim);
    for t in 0..spec.frames {
        let mut row = vec![0.0f64; spec.dim];
        for o in spec.objects.iter().filter(|o| o.sounding(t)) {
            for (r, s) in row.iter_mut().zip(&o.signature) {
                *r += s;
            }
        }
        if spec.noise_sigma > 0.0 {
            for r in row.iter_mut() {
                *r += noise.sample(&mut rng);
            }
        }
        audio.extend(row.into_iter().map(S::from_f64_lossy));
    }

    let mut flags = vec![0u8; spec.frames];
    flags[0] = 1;
    for t in 1..spec.frames {
        if spec.sounding_set(t) != spec.sounding_set(t - 1) {
            flags[t] = 1;
        }
    }

    let mut onsets: Vec<(usize, &str)> = spec
        .objects
        .iter()
        .filter_map(|o| o.schedule.iter().map(|s| s.0).min().map(|on| (on, o.category.as_str())))
        .collect();
    onsets.sort();
    let mut categories: Vec<String> = Vec::new();
    for (_, c) in onsets {
        if !categories.iter().any(|x| x == c) {
            categories.push(c.to_string());
        }
    }
    let palette: BTreeMap<ObjectId, String> =
        spec.objects.iter().map(|o| (o.id, o.category.clone())).collect();

    Ok(GeneratedScene {
        clip: VideoClip::new(spec.video_id.clone(), frames, crate::dataset::DEFAULT_FRAME_RATE)?,
        audio: AudioFeatures::new(spec.frames, spec.dim, audio)?,
        masks: MaskSequence::new(labels, Some(palette))?,
        control: ControlPointList::new(flags)?,
        categories,
    })
}

/// Kind of sounding-set change a scene may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    /// A sounds, then B takes over.
    Handoff,
    /// A sounds throughout, B joins.
    Join,
    /// A and B sound, B stops.
    Leave,
    /// A, then B, then A again.
    Return,
}

/// Sampler settings for [`generate_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub frames: usize,
    pub size: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Probability that a scene contains a sounding-set change.
    pub transition_prob: f64,
    /// When set, exactly this many scenes contain a change (overrides `transition_prob`).
    pub change_scenes: Option<usize>,
    pub change_kinds: Vec<ChangeKind>,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            frames: 10,
            size: 32,
            dim: 16,
            noise_sigma: 0.0,
            transition_prob: 0.5,
            change_scenes: None,
            change_kinds: vec![ChangeKind::Handoff, ChangeKind::Join, ChangeKind::Leave, ChangeKind::Return],
            min_objects: 2,
            max_objects: 3,
        }
    }
}

impl CorpusConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidInput("corpus size must be at least 1".into()));
        }
        if self.frames < 4 {
            return Err(Error::InvalidInput("corpus scenes need at least 4 frames".into()));
        }
        if self.size < 16 {
            return Err(Error::InvalidInput("corpus frame size must be at least 16".into()));
        }
        if !(0.0..=1.0).contains(&self.transition_prob) {
            return Err(Error::InvalidInput("transition probability must lie in [0, 1]".into()));
        }
        if self.change_scenes.is_some_and(|c| c > n) {
            return Err(Error::InvalidInput("more change scenes requested than scenes".into()));
        }
        if self.change_kinds.is_empty() {
            return Err(Error::InvalidInput("no change kinds configured".into()));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects || self.max_objects > 3 {
            return Err(Error::InvalidInput("objects per scene must satisfy 2 <= min <= max <= 3".into()));
        }
        Ok(())
    }
}

/// Samples one scene. `change` selects whether the sounding set changes over time.
pub fn sample_scene_spec(
    video_id: &str,
    config: &CorpusConfig,
    vocab: &Vocabulary,
    change: bool,
    rng: &mut ChaCha8Rng,
) -> SceneSpec {
    let t = config.frames;
    let mut objects = place_objects(config, vocab, rng);
    while objects.len() < config.min_objects {
        objects = place_objects(config, vocab, rng);
    }

    // schedules: every frame has at least one sounding object
    let a = 0;
    let b = 1;
    if change {
        let kind = *config.change_kinds.choose(rng).expect("validated non-empty");
        let c = rng.gen_range(2..=t - 2);
        match kind {
            ChangeKind::Handoff => {
                objects[a].schedule = vec![(0, c)];
                objects[b].schedule = vec![(c, t)];
            }
            ChangeKind::Join => {
                objects[a].schedule = vec![(0, t)];
                objects[b].schedule = vec![(c, t)];
            }
            ChangeKind::Leave => {
                objects[a].schedule = vec![(0, t)];
                objects[b].schedule = vec![(0, c)];
            }
            ChangeKind::Return => {
                let (c1, c2) = if t >= 6 {
                    let c1 = rng.gen_range(2..=t - 4);
                    (c1, rng.gen_range(c1 + 2..=t - 2))
                } else {
                    (c, c)
                };
                if c1 == c2 {
                    objects[a].schedule = vec![(0, c1)];
                    objects[b].schedule = vec![(c1, t)];
                } else {
                    objects[a].schedule = vec![(0, c1), (c2, t)];
                    objects[b].schedule = vec![(c1, c2)];
                }
            }
        }
    } else {
        objects[a].schedule = vec![(0, t)];
        if rng.gen_bool(0.3) {
            objects[b].schedule = vec![(0, t)];
        }
    }

    SceneSpec {
        video_id: video_id.to_string(),
        frames: t,
        height: config.size,
        width: config.size,
        dim: config.dim,
        objects,
        noise_sigma: config.noise_sigma,
        seed: rng.gen(),
    }
}

/// Picks distinct categories and non-touching linear trajectories.
fn place_objects(config: &CorpusConfig, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let t = config.frames;
    let size = config.size as f64;
    let n_obj = rng.gen_range(config.min_objects..=config.max_objects);
    let mut cats: Vec<&Category> = vocab.categories.iter().collect();
    cats.shuffle(rng);
    cats.truncate(n_obj);

    let r_lo = (size / 10.0).max(2.0);
    let r_hi = (size / 6.0).max(r_lo + 0.5);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_obj);
    for cat in cats {
        // rejection-sample a trajectory that never touches earlier objects
        let mut placed = None;
        for attempt in 0..200 {
            let radius = if attempt < 100 {
                rng.gen_range(r_lo..r_hi)
            } else {
                r_lo
            };
            let lo = radius;
            let hi = size - 1.0 - radius;
            let start = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            let end = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            let steps = (t - 1) as f64;
            let velocity = ((end.0 - start.0) / steps * 0.5, (end.1 - start.1) / steps * 0.5);
            let cand = SceneObject {
                id: cat.id,
                category: cat.name.clone(),
                signature: cat.signature.clone(),
                color: cat.color,
                shape: if rng.gen_bool(0.5) { Shape::Disc } else { Shape::Square },
                start,
                velocity,
                radius,
                schedule: Vec::new(),
            };
            let clear = objects.iter().all(|o| {
                (0..t).all(|f| {
                    let (a, b) = (o.center(f), cand.center(f));
                    let reach = o.radius + cand.radius + 1.0;
                    (a.0 - b.0).abs() > reach || (a.1 - b.1).abs() > reach
                })
            });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        if let Some(o) = placed {
            objects.push(o);
        }
    }

    objects
}

/// Scene specs of a corpus, in id order. Deterministic in `(n, config, seed)`.
pub fn corpus_specs(n: usize, config: &CorpusConfig, seed: u64) -> Result<Vec<SceneSpec>> {
    config.validate(n)?;
    let vocab = Vocabulary::standard(config.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let changes: Vec<bool> = match config.change_scenes {
        Some(k) => {
            let mut v: Vec<bool> = (0..n).map(|i| i < k).collect();
            v.shuffle(&mut rng);
            v
        }
        None => (0..n).map(|_| rng.gen_bool(config.transition_prob)).collect(),
    };
    Ok(changes
        .iter()
        .enumerate()
        .map(|(i, &change)| sample_scene_spec(&format!("scene_{i:04}"), config, &vocab, change, &mut rng))
        .collect())
}

/// Writes `n` scenes into `out` in the dataset layout, including annotations.
/// Returns the video ids.
pub fn generate_corpus(out: &Path, n: usize, config: &CorpusConfig, seed: u64, overwrite: bool) -> Result<Vec<String>> {
    let specs = corpus_specs(n, config, seed)?;
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::InvalidInput(format!(
                    "{} exists and is not empty (pass overwrite to replace it)",
                    out.display()
                )));
            }
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ids = Vec::with_capacity(n);
    for spec in &specs {
        let scene: GeneratedScene<f64> = generate_scene(spec)?;
        save_sample(out, &scene.clip, &scene.audio, Some(&scene.masks), Some(&scene.annotation()))?;
        ids.push(spec.video_id.clone());
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::cosine;

    fn object(id: ObjectId, vocab: &Vocabulary, start: (f64, f64), schedule: Vec<(usize, usize)>) -> SceneObject {
        let c = vocab.by_id(id).unwrap();
        SceneObject {
            id,
            category: c.name.clone(),
            signature: c.signature.clone(),
            color: c.color,
            shape: Shape::Disc,
            start,
            velocity: (0.0, 0.5),
            radius: 4.0,
            schedule,
        }
    }

    fn spec(objects: Vec<SceneObject>, frames: usize) -> SceneSpec {
        SceneSpec {
            video_id: "s".into(),
            frames,
            height: 32,
            width: 32,
            dim: 16,
            objects,
            noise_sigma: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn signatures_are_orthonormal() {
        let v = Vocabulary::standard(16).unwrap();
        for a in &v.categories {
            for b in &v.categories {
                let d: f64 = a.signature.iter().zip(&b.signature).map(|(x, y)| x * y).sum();
                let want = if a.id == b.id { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
        assert!(Vocabulary::standard(4).is_err());
    }

    #[test]
    fn single_sounding_object() {
        let v = Vocabulary::standard(16).unwrap();
        let s = spec(vec![object(1, &v, (10.0, 6.0), vec![(0, 10)])], 10);
        let g: GeneratedScene<f64> = generate_scene(&s).unwrap();
        assert_eq!(g.control.flags(), &[1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        for t in 1..10 {
            assert_eq!(g.audio.row(t), g.audio.row(0));
        }
    }

    #[test]
    fn handoff_flags() {
        let v = Vocabulary::standard(16).unwrap();
        let s = spec(
            vec![object(1, &v, (8.0, 6.0), vec![(0, 5)]), object(2, &v, (22.0, 6.0), vec![(5, 10)])],
            10,
        );
        let g: GeneratedScene<f64> = generate_scene(&s).unwrap();
        assert_eq!(g.control.flags(), &[1, 0, 0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(g.categories, vec!["cello", "piano"]);
        // silent objects are drawn but not labelled
        assert!(g.masks.labels()[0].object_ids().contains(&1));
        assert!(!g.masks.labels()[0].object_ids().contains(&2));
        let (cy, cx) = s.objects[1].center(0);
        assert_eq!(g.clip.frames()[0].pixel(cy as usize, cx as usize), v.by_id(2).unwrap().color);
    }

    #[test]
    fn join_matches_brute_force_set_comparison() {
        let v = Vocabulary::standard(16).unwrap();
        let s = spec(
            vec![object(1, &v, (8.0, 6.0), vec![(0, 8)]), object(3, &v, (22.0, 6.0), vec![(3, 8)])],
            8,
        );
        let g: GeneratedScene<f64> = generate_scene(&s).unwrap();
        for t in 0..8 {
            let ids = g.masks.labels()[t].object_ids();
            if t >= 3 {
                assert_eq!(ids, [1, 3].into());
            } else {
                assert_eq!(ids, [1].into());
            }
            let changed = t == 0 || g.masks.labels()[t].object_ids() != g.masks.labels()[t - 1].object_ids();
            assert_eq!(g.control.flags()[t] == 1, changed, "frame {t}");
        }
        assert_eq!(g.control.flags()[3], 1);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let v = Vocabulary::standard(16).unwrap();
        let s = spec(
            vec![object(1, &v, (8.0, 6.0), vec![(0, 4)]), object(1, &v, (8.0, 8.0), vec![(0, 4)])],
            4,
        );
        assert!(matches!(generate_scene::<f64>(&s), Err(Error::Spec(_))));
    }

    #[test]
    fn out_of_frame_rejected() {
        let v = Vocabulary::standard(16).unwrap();
        let s = spec(vec![object(1, &v, (8.0, 6.0), vec![(0, 60)])], 60);
        assert!(matches!(generate_scene::<f64>(&s), Err(Error::Spec(_))));
    }

    #[test]
    fn clean_cosine_is_exact_within_intervals() {
        let specs = corpus_specs(30, &CorpusConfig::default(), 11).unwrap();
        for s in &specs {
            let g: GeneratedScene<f64> = generate_scene(s).unwrap();
            for t in 1..s.frames {
                let c = cosine(g.audio.row(t), g.audio.row(t - 1));
                if g.control.flags()[t] == 0 {
                    assert!((c - 1.0).abs() < 1e-12, "{} t={t} cos={c}", s.video_id);
                } else {
                    assert!(c < 1.0 - 1e-6);
                }
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let cfg = CorpusConfig::default();
        generate_corpus(&a, 3, &cfg, 7, false).unwrap();
        generate_corpus(&b, 3, &cfg, 7, false).unwrap();
        for entry in walk(&a) {
            let rel = entry.strip_prefix(&a).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel:?}");
        }
        assert_eq!(walk(&a).len(), walk(&b).len());
        assert!(generate_corpus(&a, 3, &cfg, 7, false).is_err());
        assert!(generate_corpus(&a, 2, &cfg, 8, true).is_ok());
        assert!(generate_corpus(&dir.path().join("c"), 0, &cfg, 7, false).is_err());
    }

    fn walk(p: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn transition_fraction_tracks_probability() {
        let cfg = CorpusConfig {
            transition_prob: 0.4,
            ..CorpusConfig::default()
        };
        let specs = corpus_specs(200, &cfg, 5).unwrap();
        let changed = specs
            .iter()
            .filter(|s| generate_scene::<f64>(s).unwrap().control.count() >= 2)
            .count();
        let frac = changed as f64 / 200.0;
        assert!((frac - 0.4).abs() <= 0.1, "fraction {frac}");
    }

    #[test]
    fn exact_change_count() {
        let cfg = CorpusConfig {
            change_scenes: Some(17),
            ..CorpusConfig::default()
        };
        let specs = corpus_specs(64, &cfg, 9).unwrap();
        let changed = specs
            .iter()
            .filter(|s| generate_scene::<f64>(s).unwrap().control.count() >= 2)
            .count();
        assert_eq!(changed, 17);
    }
}
