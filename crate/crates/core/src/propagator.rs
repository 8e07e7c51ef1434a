//! Mask propagation through a sub-clip with per-frame audio insertion.
//!
//! Each frame is encoded by a conv tower; after every configured level an
//! [`AudioInsertBlock`] cross-attends from the visual tokens to sub-tokens of
//! the frame's audio row and adds the result back through a zero-initialised
//! projection. The pyramid is merged into a token grid that runs through
//! propagator blocks (self-attention, long-term memory attention, windowed
//! short-term attention, feed-forward) and is decoded into per-pixel
//! probabilities over identity slots.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::annotated_control_points;
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::dataset::{list_videos, load_sample};
use crate::error::{Error, Result};
use crate::keyframe::{argmax_rows, image_tensor};
use crate::nn::{
    Adam, ConvTower, FMap, FeedForward, Graph, Init, LayerNorm, Linear, MultiHeadAttention, ParamGrads, ParamId, ParamSet,
    Tensor, Var,
};
use crate::scalar::Scalar;
use crate::training::{check_step, BatchSampler, TrainReport};
use crate::types::{AudioFeatures, Frame, LabelMap, MaskSequence, ObjectId};

pub const CHECKPOINT_KIND: &str = "propagator";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagatorModelConfig {
    pub channels: Vec<usize>,
    /// Tower levels followed by an audio-insert block (0 = finest).
    pub insert_levels: Vec<usize>,
    pub audio_dim: usize,
    /// Number of sub-tokens the audio row is split into.
    pub audio_tokens: usize,
    pub insert_head_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Identity slots including background.
    pub identities: usize,
    /// Short-term attention window radius on the token grid.
    pub window: usize,
    pub memory_stride: usize,
    pub memory_capacity: usize,
    /// Add the projected audio row to object identities.
    pub audio_identity: bool,
}

impl Default for PropagatorModelConfig {
    fn default() -> Self {
        PropagatorModelConfig {
            channels: vec![24, 32, 96, 256],
            insert_levels: vec![0, 1, 2, 3],
            audio_dim: 16,
            audio_tokens: 4,
            insert_head_dim: 16,
            dim: 64,
            heads: 1,
            blocks: 2,
            identities: 8,
            window: 2,
            memory_stride: 2,
            memory_capacity: 8,
            audio_identity: true,
        }
    }
}

impl PropagatorModelConfig {
    /// Insertion at the coarsest level only.
    pub fn single_insert(mut self) -> Self {
        self.insert_levels = vec![self.channels.len() - 1];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("propagator model: {m}")));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be non-empty and positive".into());
        }
        if let Some(l) = self.insert_levels.iter().find(|&&l| l >= self.channels.len()) {
            return bad(format!("insert level {l} does not exist"));
        }
        if self.audio_tokens == 0 || !self.audio_dim.is_multiple_of(self.audio_tokens) {
            return bad(format!("audio_dim {} not divisible by {} sub-tokens", self.audio_dim, self.audio_tokens));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be a positive multiple of heads".into());
        }
        if self.identities < 2 {
            return bad("need at least two identity slots".into());
        }
        if self.memory_stride == 0 || self.memory_capacity == 0 {
            return bad("memory stride and capacity must be positive".into());
        }
        if self.insert_head_dim == 0 || self.blocks == 0 {
            return bad("insert_head_dim and blocks must be positive".into());
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    /// Tower level whose resolution the token grid uses.
    pub fn token_level(&self) -> usize {
        self.channels.len().saturating_sub(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagatorTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Sub-clips per step.
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PropagatorTrainConfig {
    fn default() -> Self {
        PropagatorTrainConfig {
            steps: 800,
            lr: 1e-4,
            batch_size: 1,
            seed: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagatorConfig {
    pub model: PropagatorModelConfig,
    pub train: PropagatorTrainConfig,
}

/// Cross-attention from visual tokens to audio sub-tokens, added residually.
#[derive(Debug, Clone)]
pub struct AudioInsertBlock {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub channels: usize,
    pub audio_tokens: usize,
    pub head_dim: usize,
}

impl AudioInsertBlock {
    pub fn new<S: Scalar, R: rand::Rng>(
        ps: &mut ParamSet<S>,
        name: &str,
        channels: usize,
        audio_dim: usize,
        audio_tokens: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Self {
        let sub = audio_dim / audio_tokens;
        AudioInsertBlock {
            query: ps.add(&format!("{name}.wq"), &[channels, head_dim], Init::Normal((1.0 / channels as f64).sqrt()), rng),
            key: ps.add(&format!("{name}.wk"), &[sub, head_dim], Init::Normal((1.0 / sub as f64).sqrt()), rng),
            value: ps.add(&format!("{name}.wv"), &[sub, channels], Init::Normal((1.0 / sub as f64).sqrt()), rng),
            output: ps.add(&format!("{name}.proj"), &[channels, channels], Init::Zeros, rng),
            channels,
            audio_tokens,
            head_dim,
        }
    }

    /// `F + softmax(F Wq (A Wk)^T / sqrt(d)) A Wv Wo` for `F: [h*w, C]`, `A: [N_a, D/N_a]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, features: Var, audio_tokens: Var) -> Var {
        let wq = g.param(ps, self.query);
        let wk = g.param(ps, self.key);
        let wv = g.param(ps, self.value);
        let wo = g.param(ps, self.output);
        let q = g.matmul(features, wq);
        let k = g.matmul(audio_tokens, wk);
        let v = g.matmul(audio_tokens, wv);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, S::one() / S::from_usize(self.head_dim).unwrap().sqrt());
        let attn = g.softmax(scores, None);
        g.record_attention(attn);
        let mixed = g.matmul(attn, v);
        let proj = g.matmul(mixed, wo);
        g.add(features, proj)
    }
}

/// Splits an audio row into `n` consecutive sub-tokens.
pub fn audio_sub_tokens<S: Scalar>(audio_row: &[S], n: usize) -> Result<Tensor<S>> {
    if n == 0 || !audio_row.len().is_multiple_of(n) {
        return Err(Error::InvalidInput(format!(
            "audio row of {} values cannot be split into {n} sub-tokens",
            audio_row.len()
        )));
    }
    Ok(Tensor::from_vec(&[n, audio_row.len() / n], audio_row.to_vec()))
}

/// Applies one insertion block to a `[h*w, C]` feature map outside any training graph.
pub fn audio_insert<S: Scalar>(
    features: &Tensor<S>,
    audio_row: &[S],
    block: &AudioInsertBlock,
    params: &ParamSet<S>,
) -> Result<Tensor<S>> {
    if features.shape().len() != 2 || features.cols() != block.channels {
        return Err(Error::InvalidInput(format!(
            "features of shape {:?} do not have {} channels",
            features.shape(),
            block.channels
        )));
    }
    let expected = params.tensor(block.key).rows() * block.audio_tokens;
    if audio_row.len() != expected {
        return Err(Error::InvalidInput(format!("audio row has {} values, block expects {expected}", audio_row.len())));
    }
    let mut g = Graph::new();
    let f = g.input(features.clone());
    let a = g.input(audio_sub_tokens(audio_row, block.audio_tokens)?);
    let out = block.forward(&mut g, params, f, a);
    Ok(g.value(out).clone())
}

/// Assignment of object ids to identity slots, fixed at the keyframe.
/// Slot 0 is background; objects take slots 1.. in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotMap {
    ids: Vec<ObjectId>,
    slots: usize,
}

impl SlotMap {
    pub fn from_mask(mask: &LabelMap, slots: usize) -> Result<Self> {
        let ids: Vec<ObjectId> = mask.object_ids().into_iter().collect();
        if ids.len() + 1 > slots {
            return Err(Error::Capacity(format!(
                "{} objects in the keyframe but only {} identity slots",
                ids.len(),
                slots - 1
            )));
        }
        Ok(SlotMap { ids, slots })
    }

    pub fn objects(&self) -> &[ObjectId] {
        &self.ids
    }

    pub fn slot_of(&self, id: ObjectId) -> Option<usize> {
        if id == 0 {
            return Some(0);
        }
        self.ids.binary_search(&id).ok().map(|i| i + 1)
    }

    pub fn id_of(&self, slot: usize) -> ObjectId {
        if slot == 0 {
            0
        } else {
            self.ids[slot - 1]
        }
    }

    /// Slots that may be predicted: background plus the keyframe objects.
    pub fn active(&self) -> Vec<bool> {
        (0..self.slots).map(|s| s <= self.ids.len()).collect()
    }

    /// Slot index per pixel; ids unknown at the keyframe map to background.
    pub fn encode(&self, mask: &LabelMap) -> Vec<usize> {
        mask.data.iter().map(|&v| self.slot_of(v).unwrap_or(0)).collect()
    }

    pub fn one_hot<S: Scalar>(&self, mask: &LabelMap) -> Tensor<S> {
        let mut data = vec![S::zero(); mask.data.len() * self.slots];
        for (i, s) in self.encode(mask).into_iter().enumerate() {
            data[i * self.slots + s] = S::one();
        }
        Tensor::from_vec(&[mask.data.len(), self.slots], data)
    }
}

#[derive(Debug, Clone)]
struct PropBlock {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_long: LayerNorm,
    long_attn: MultiHeadAttention,
    norm_short: LayerNorm,
    short_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl PropBlock {
    fn new<S: Scalar, R: rand::Rng>(ps: &mut ParamSet<S>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        PropBlock {
            norm_self: LayerNorm::new(ps, &format!("{name}.norm_self"), dim, rng),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self"), dim, heads, rng),
            norm_long: LayerNorm::new(ps, &format!("{name}.norm_long"), dim, rng),
            long_attn: MultiHeadAttention::new(ps, &format!("{name}.long"), dim, heads, rng),
            norm_short: LayerNorm::new(ps, &format!("{name}.norm_short"), dim, rng),
            short_attn: MultiHeadAttention::new(ps, &format!("{name}.short"), dim, heads, rng),
            norm_ffn: LayerNorm::new(ps, &format!("{name}.norm_ffn"), dim, rng),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, 2 * dim, rng),
        }
    }
}

/// Keys and values a stored frame contributes to attention.
#[derive(Debug, Clone, Copy)]
pub struct MemoryEntry {
    pub frame: usize,
    pub key: Var,
    pub value: Var,
}

/// Long-term memory with a pinned keyframe entry, plus the previous frame.
///
/// When a frame is superseded as short-term entry it joins long-term memory if
/// its index is a multiple of the stride; the oldest non-keyframe entry is
/// evicted once `capacity` (keyframe included) is exceeded.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    keyframe: MemoryEntry,
    long: VecDeque<MemoryEntry>,
    short: MemoryEntry,
    stride: usize,
    capacity: usize,
}

impl MemoryBank {
    pub fn new(keyframe: MemoryEntry, stride: usize, capacity: usize) -> Self {
        MemoryBank {
            keyframe,
            long: VecDeque::new(),
            short: keyframe,
            stride: stride.max(1),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, entry: MemoryEntry) {
        let old = std::mem::replace(&mut self.short, entry);
        if old.frame > 0 && old.frame.is_multiple_of(self.stride) {
            self.long.push_back(old);
            while 1 + self.long.len() > self.capacity {
                self.long.pop_front();
            }
        }
    }

    /// Frame indices in long-term memory, keyframe first.
    pub fn long_term_frames(&self) -> Vec<usize> {
        std::iter::once(self.keyframe.frame).chain(self.long.iter().map(|e| e.frame)).collect()
    }

    pub fn short_term_frame(&self) -> usize {
        self.short.frame
    }

    fn long_entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        std::iter::once(&self.keyframe).chain(self.long.iter())
    }
}

/// Visual tokens and pyramid of one frame.
#[derive(Debug, Clone)]
struct Encoded {
    levels: Vec<FMap>,
    tokens: Var,
    grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct PropagatorNet<S> {
    pub config: PropagatorModelConfig,
    pub params: ParamSet<S>,
    /// When false the network ignores audio entirely (no insertion, no audio identity term).
    pub audio_enabled: bool,
    tower: ConvTower,
    inserts: Vec<Option<AudioInsertBlock>>,
    level_proj: Vec<Linear>,
    mem_norm: LayerNorm,
    blocks: Vec<PropBlock>,
    skips: Vec<Linear>,
    head: Linear,
    id_vectors: ParamId,
    id_audio: Linear,
}

/// Result of one propagation step.
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    pub mask: LabelMap,
    /// `[H*W, identities]` slot probabilities.
    pub probs: Vec<S>,
    /// Token-grid output of the last propagator block.
    pub embedding: Vec<S>,
}

impl<S: Scalar> PropagatorNet<S> {
    pub fn new(config: PropagatorModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.dim;
        let tower = ConvTower::new(&mut ps, "tower", 3, &config.channels, &mut rng);
        let inserts = config
            .channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                config.insert_levels.contains(&l).then(|| {
                    AudioInsertBlock::new(
                        &mut ps,
                        &format!("insert{l}"),
                        c,
                        config.audio_dim,
                        config.audio_tokens,
                        config.insert_head_dim,
                        &mut rng,
                    )
                })
            })
            .collect();
        let tl = config.token_level();
        let level_proj = (tl..config.channels.len())
            .map(|l| {
                let c = config.channels[l];
                Linear::new(&mut ps, &format!("level_proj{l}"), c, d, true, Init::Normal((1.0 / c as f64).sqrt()), &mut rng)
            })
            .collect();
        let mem_norm = LayerNorm::new(&mut ps, "mem_norm", d, &mut rng);
        let blocks = (0..config.blocks)
            .map(|i| PropBlock::new(&mut ps, &format!("block{i}"), d, config.heads, &mut rng))
            .collect();
        let skips = (0..tl)
            .map(|l| Linear::new(&mut ps, &format!("skip{l}"), config.channels[l], d, true, Init::He(config.channels[l]), &mut rng))
            .collect();
        let head = Linear::new(&mut ps, "head", d, config.identities, true, Init::Normal((1.0 / d as f64).sqrt()), &mut rng);
        let id_vectors = ps.add("identity.vectors", &[config.identities, d], Init::Normal(1.0), &mut rng);
        let id_audio = Linear::new(&mut ps, "identity.audio", config.audio_dim, d, true, Init::Zeros, &mut rng);
        Ok(PropagatorNet {
            config,
            params: ps,
            audio_enabled: true,
            tower,
            inserts,
            level_proj,
            mem_norm,
            blocks,
            skips,
            head,
            id_vectors,
            id_audio,
        })
    }

    pub fn num_weights(&self) -> usize {
        self.params.num_weights()
    }

    /// Insertion block at tower level `l`, if configured.
    pub fn insert_block(&self, l: usize) -> Option<&AudioInsertBlock> {
        self.inserts.get(l).and_then(Option::as_ref)
    }

    pub fn identity_audio(&self) -> &Linear {
        &self.id_audio
    }

    pub fn identity_vectors(&self) -> ParamId {
        self.id_vectors
    }

    fn check_frame(&self, frame: &Frame, audio_row: &[S]) -> Result<()> {
        let s = self.config.stride();
        if !frame.height.is_multiple_of(s) || !frame.width.is_multiple_of(s) {
            return Err(Error::InvalidInput(format!(
                "frame {}x{} is not divisible by stride {s}",
                frame.height, frame.width
            )));
        }
        if audio_row.len() != self.config.audio_dim {
            return Err(Error::InvalidInput(format!(
                "audio row has {} values, model expects {}",
                audio_row.len(),
                self.config.audio_dim
            )));
        }
        Ok(())
    }

    fn encode(&self, g: &mut Graph<S>, frame: &Frame, audio_row: &[S]) -> Encoded {
        let ps = &self.params;
        let x = FMap {
            var: g.input(image_tensor(frame)),
            h: frame.height,
            w: frame.width,
            c: 3,
        };
        let audio = self
            .audio_enabled
            .then(|| g.input(audio_sub_tokens(audio_row, self.config.audio_tokens).expect("checked audio length")));
        let levels = self.tower.forward_with(g, ps, x, |g, l, m| match (&self.inserts[l], audio) {
            (Some(block), Some(a)) => FMap {
                var: block.forward(g, ps, m.var, a),
                ..m
            },
            _ => m,
        });
        let tl = self.config.token_level();
        let last = levels.len() - 1;
        let mut t = self.level_proj[last - tl].forward(g, ps, levels[last].var);
        let (mut h, mut w) = (levels[last].h, levels[last].w);
        for l in (tl..last).rev() {
            t = g.upsample2(t, h, w);
            h *= 2;
            w *= 2;
            let p = self.level_proj[l - tl].forward(g, ps, levels[l].var);
            t = g.add(t, p);
        }
        Encoded {
            levels,
            tokens: t,
            grid: (h, w),
        }
    }

    /// Full-resolution identity coding of slot probabilities `[H*W, M]`:
    /// `probs @ id_vectors + (1 - p_background) * audio_proj(audio)`.
    fn identity_grid(&self, g: &mut Graph<S>, probs: Var, audio_row: &[S]) -> Var {
        let ids = g.param(&self.params, self.id_vectors);
        let base = g.matmul(probs, ids);
        if !(self.audio_enabled && self.config.audio_identity) {
            return base;
        }
        let a = g.input(Tensor::from_vec(&[1, audio_row.len()], audio_row.to_vec()));
        let a = self.id_audio.forward(g, &self.params, a);
        let m = self.config.identities;
        let bg = g.slice_cols(probs, 0, 1);
        let neg = g.scale(bg, -S::one());
        let ones = g.input(Tensor::full(&[g.value(probs).rows(), 1], S::one()));
        let fg = g.add(ones, neg);
        debug_assert_eq!(g.value(probs).cols(), m);
        let term = g.matmul(fg, a);
        g.add(base, term)
    }

    fn memory_entry(&self, g: &mut Graph<S>, frame: usize, enc: &Encoded, probs: Var, audio_row: &[S], size: (usize, usize)) -> MemoryEntry {
        let full = self.identity_grid(g, probs, audio_row);
        let f = size.0 / enc.grid.0;
        let pooled = if f == 1 { full } else { g.avg_pool(full, size.0, size.1, f) };
        let key = self.mem_norm.forward(g, &self.params, enc.tokens);
        let value = g.add(enc.tokens, pooled);
        MemoryEntry { frame, key, value }
    }

    fn window_mask(&self, grid: (usize, usize)) -> Arc<[bool]> {
        let (h, w) = grid;
        let n = h * w;
        let r = self.config.window as isize;
        let mut mask = vec![false; n * n];
        for i in 0..n {
            let (yi, xi) = ((i / w) as isize, (i % w) as isize);
            for j in 0..n {
                let (yj, xj) = ((j / w) as isize, (j % w) as isize);
                mask[i * n + j] = (yi - yj).abs() <= r && (xi - xj).abs() <= r;
            }
        }
        mask.into()
    }

    /// One propagator pass over the current tokens; returns E^t and `[H*W, M]` logits.
    fn propagate(&self, g: &mut Graph<S>, enc: &Encoded, bank: &MemoryBank, window: &Arc<[bool]>) -> (Var, Var) {
        let ps = &self.params;
        let long_keys: Vec<Var> = bank.long_entries().map(|e| e.key).collect();
        let long_values: Vec<Var> = bank.long_entries().map(|e| e.value).collect();
        let (lk, lv) = if long_keys.len() == 1 {
            (long_keys[0], long_values[0])
        } else {
            (g.concat_rows(&long_keys), g.concat_rows(&long_values))
        };
        let mut x = enc.tokens;
        for b in &self.blocks {
            let n = b.norm_self.forward(g, ps, x);
            let a = b.self_attn.forward(g, ps, n, n, n, None);
            x = g.add(x, a);
            let n = b.norm_long.forward(g, ps, x);
            let a = b.long_attn.forward(g, ps, n, lk, lv, None);
            x = g.add(x, a);
            let n = b.norm_short.forward(g, ps, x);
            let a = b.short_attn.forward(g, ps, n, bank.short.key, bank.short.value, Some(window.clone()));
            x = g.add(x, a);
            let n = b.norm_ffn.forward(g, ps, x);
            let f = b.ffn.forward(g, ps, n);
            x = g.add(x, f);
        }
        let mut d = x;
        let (mut h, mut w) = enc.grid;
        for l in (0..self.config.token_level()).rev() {
            d = g.upsample2(d, h, w);
            h *= 2;
            w *= 2;
            let s = self.skips[l].forward(g, ps, enc.levels[l].var);
            d = g.add(d, s);
            d = g.relu(d);
        }
        (x, self.head.forward(g, ps, d))
    }

    fn logit_mask(&self, slots: &SlotMap, pixels: usize) -> Arc<[bool]> {
        let active = slots.active();
        (0..pixels).flat_map(|_| active.iter().copied()).collect()
    }

    /// Teacher-forced propagation loss: mean per-pixel cross-entropy over the
    /// normal frames of a sub-clip, with soft probabilities written to memory.
    fn subclip_loss(&self, g: &mut Graph<S>, frames: &[Frame], audio: &AudioFeatures<S>, masks: &[LabelMap]) -> Result<Option<Var>> {
        if frames.len() < 2 {
            return Ok(None);
        }
        let slots = SlotMap::from_mask(&masks[0], self.config.identities)?;
        let size = (frames[0].height, frames[0].width);
        let enc0 = self.encode(g, &frames[0], audio.row(0));
        let kf_probs = g.input(slots.one_hot(&masks[0]));
        let entry = self.memory_entry(g, 0, &enc0, kf_probs, audio.row(0), size);
        let mut bank = MemoryBank::new(entry, self.config.memory_stride, self.config.memory_capacity);
        let window = self.window_mask(enc0.grid);
        let active = slots.active();
        let logit_mask = self.logit_mask(&slots, size.0 * size.1);
        let mut losses = Vec::with_capacity(frames.len() - 1);
        for t in 1..frames.len() {
            let enc = self.encode(g, &frames[t], audio.row(t));
            let (_, logits) = self.propagate(g, &enc, &bank, &window);
            let targets: Arc<[usize]> = slots.encode(&masks[t]).into();
            losses.push(g.cross_entropy(logits, targets, Some(&active)));
            if t + 1 < frames.len() {
                let probs = g.softmax(logits, Some(logit_mask.clone()));
                let entry = self.memory_entry(g, t, &enc, probs, audio.row(t), size);
                bank.push(entry);
            }
        }
        let cat = g.concat_rows(&losses);
        let total = g.sum_all(cat);
        Ok(Some(g.scale(total, S::one() / S::from_usize(losses.len()).unwrap())))
    }

    pub fn subclip_loss_and_grads(&self, frames: &[Frame], audio: &AudioFeatures<S>, masks: &[LabelMap]) -> Result<Option<(f64, ParamGrads<S>)>> {
        let mut g = Graph::new();
        let Some(loss) = self.subclip_loss(&mut g, frames, audio, masks)? else {
            return Ok(None);
        };
        let value = g.value(loss).data()[0].to_f64_lossy();
        let grads = g.backward(loss);
        let mut pg = ParamGrads::zeros_like(&self.params);
        pg.accumulate(&g, &grads);
        Ok(Some((value, pg)))
    }

    pub fn subclip_loss_value(&self, frames: &[Frame], audio: &AudioFeatures<S>, masks: &[LabelMap]) -> Result<Option<f64>> {
        let mut g = Graph::new();
        Ok(self
            .subclip_loss(&mut g, frames, audio, masks)?
            .map(|l| g.value(l).data()[0].to_f64_lossy()))
    }

    /// Starts propagation from a keyframe.
    pub fn session(&self, keyframe: &Frame, audio_row: &[S], mask: &LabelMap) -> Result<PropagationSession<'_, S>> {
        self.check_frame(keyframe, audio_row)?;
        if mask.height != keyframe.height || mask.width != keyframe.width {
            return Err(Error::InvalidInput("keyframe mask size differs from the frame".into()));
        }
        let slots = SlotMap::from_mask(mask, self.config.identities)?;
        let mut g = Graph::new();
        let enc = self.encode(&mut g, keyframe, audio_row);
        let probs = g.input(slots.one_hot(mask));
        let size = (keyframe.height, keyframe.width);
        let entry = self.memory_entry(&mut g, 0, &enc, probs, audio_row, size);
        let window = self.window_mask(enc.grid);
        Ok(PropagationSession {
            net: self,
            graph: g,
            bank: MemoryBank::new(entry, self.config.memory_stride, self.config.memory_capacity),
            slots,
            window,
            size,
            next: 1,
        })
    }

    pub fn to_checkpoint(&self, train: &PropagatorTrainConfig, meta: TrainingMeta) -> Result<Checkpoint<S>> {
        let config = serde_json::to_value(PropagatorConfig {
            model: self.config.clone(),
            train: train.clone(),
        })
        .map_err(|e| Error::json("propagator config", e))?;
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config,
            meta,
            weights: self.params.to_map(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config: PropagatorConfig =
            serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::json("propagator checkpoint config", e))?;
        let mut net = PropagatorNet::new(config.model, 0)?;
        net.params.load_map(&ckpt.weights).map_err(Error::Checkpoint)?;
        Ok(net)
    }
}

/// Sequential propagation state for one sub-clip. Memory holds hard masks.
pub struct PropagationSession<'a, S: Scalar> {
    net: &'a PropagatorNet<S>,
    graph: Graph<S>,
    bank: MemoryBank,
    slots: SlotMap,
    window: Arc<[bool]>,
    size: (usize, usize),
    next: usize,
}

impl<S: Scalar> PropagationSession<'_, S> {
    pub fn memory(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn slots(&self) -> &SlotMap {
        &self.slots
    }

    /// Attention matrices computed so far, for inspection.
    pub fn attention_maps(&self) -> impl Iterator<Item = &Tensor<S>> + '_ {
        self.graph.attention_maps()
    }

    /// Predicts the next frame and stores it in memory.
    pub fn step(&mut self, frame: &Frame, audio_row: &[S]) -> Result<StepOutput<S>> {
        let net = self.net;
        net.check_frame(frame, audio_row)?;
        if (frame.height, frame.width) != self.size {
            return Err(Error::InvalidInput("frame size changed within a sub-clip".into()));
        }
        let g = &mut self.graph;
        let enc = net.encode(g, frame, audio_row);
        let (e, logits) = net.propagate(g, &enc, &self.bank, &self.window);
        let mask = net.logit_mask(&self.slots, self.size.0 * self.size.1);
        let probs = g.softmax(logits, Some(mask));
        let prob_values = g.value(probs).data().to_vec();
        let slot_idx = argmax_rows(&prob_values, net.config.identities);
        let labels: Vec<ObjectId> = slot_idx.iter().map(|&s| self.slots.id_of(s as usize)).collect();
        let mask = LabelMap::new(self.size.0, self.size.1, labels)?;
        let hard = g.input(self.slots.one_hot(&mask));
        let entry = net.memory_entry(g, self.next, &enc, hard, audio_row, self.size);
        self.bank.push(entry);
        self.next += 1;
        Ok(StepOutput {
            mask,
            probs: prob_values,
            embedding: g.value(e).data().to_vec(),
        })
    }
}

/// Propagates a keyframe mask through a sub-clip; frame 0 is the keyframe and
/// is returned verbatim.
pub fn propagate_subclip<S: Scalar>(
    net: &PropagatorNet<S>,
    keyframe_mask: &LabelMap,
    frames: &[Frame],
    audio: &AudioFeatures<S>,
) -> Result<Vec<LabelMap>> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("empty sub-clip".into()));
    }
    if audio.frames() != frames.len() {
        return Err(Error::InvalidInput(format!(
            "{} audio rows for {} frames",
            audio.frames(),
            frames.len()
        )));
    }
    let mut out = vec![keyframe_mask.clone()];
    if frames.len() == 1 {
        return Ok(out);
    }
    let mut session = net.session(&frames[0], audio.row(0), keyframe_mask)?;
    for t in 1..frames.len() {
        out.push(session.step(&frames[t], audio.row(t))?.mask);
    }
    Ok(out)
}

/// A teacher-forced training unit: one ground-truth sub-clip.
#[derive(Debug, Clone)]
pub struct SubClipItem<S> {
    pub video_id: String,
    pub start: usize,
    pub frames: Vec<Frame>,
    pub audio: AudioFeatures<S>,
    pub masks: Vec<LabelMap>,
}

/// Sub-clips of length >= 2 of every video under `root`, split at the annotated control points.
pub fn training_subclips<S: Scalar>(root: &Path) -> Result<Vec<SubClipItem<S>>> {
    let mut items = Vec::new();
    for id in list_videos(root)? {
        let sample = load_sample::<S>(root, &id)?;
        let masks = sample
            .masks
            .ok_or_else(|| Error::InvalidInput(format!("{id}: training needs ground-truth masks")))?;
        let control = annotated_control_points(root, &id)?;
        if control.len() != sample.clip.len() {
            return Err(Error::Consistency(format!(
                "{id}: {} control flags for {} frames",
                control.len(),
                sample.clip.len()
            )));
        }
        for sc in control.subclips() {
            if sc.len() < 2 {
                continue;
            }
            items.push(SubClipItem {
                video_id: id.clone(),
                start: sc.start,
                frames: sample.clip.frames()[sc.frames()].to_vec(),
                audio: sample.audio.slice(sc.start, sc.end),
                masks: masks.labels()[sc.frames()].to_vec(),
            });
        }
    }
    Ok(items)
}

impl<S: Scalar> PropagatorNet<S> {
    pub fn fit(&mut self, items: &[SubClipItem<S>], train: &PropagatorTrainConfig) -> Result<TrainReport> {
        if items.is_empty() {
            return Err(Error::InvalidInput("no sub-clips with normal frames to train on".into()));
        }
        for it in items {
            for (f, t) in it.frames.iter().zip(0..) {
                self.check_frame(f, it.audio.row(t))?;
            }
            SlotMap::from_mask(&it.masks[0], self.config.identities)?;
        }
        let mut opt = Adam::new(&self.params, train.lr);
        let mut sampler = BatchSampler::new(items.len(), train.seed);
        let mut report = TrainReport::default();
        for step in 0..train.steps {
            let batch = sampler.next_batch(train.batch_size.max(1));
            let mut total = ParamGrads::zeros_like(&self.params);
            let mut loss = 0.0;
            for &i in &batch {
                let it = &items[i];
                if let Some((l, pg)) = self.subclip_loss_and_grads(&it.frames, &it.audio, &it.masks)? {
                    loss += l;
                    total.merge(&pg);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            total.scale(S::from_f64_lossy(inv));
            loss *= inv;
            let ids = || batch.iter().map(|&i| format!("{}@{}", items[i].video_id, items[i].start)).collect::<Vec<_>>();
            check_step(step, train.lr, &ids(), loss, &total, None)?;
            opt.update(&mut self.params, &total);
            check_step(step, train.lr, &ids(), loss, &total, Some(&self.params))?;
            if train.log_every > 0 && step % train.log_every == 0 {
                log::info!("propagator step {step}: loss {loss:.5}");
            }
            report.losses.push(loss);
        }
        Ok(report)
    }
}

pub fn train_propagator<S: Scalar>(root: &Path, config: &PropagatorConfig) -> Result<(Checkpoint<S>, TrainReport)> {
    let items = training_subclips::<S>(root)?;
    let mut net = PropagatorNet::new(config.model.clone(), config.train.seed)?;
    let report = net.fit(&items, &config.train)?;
    let meta = TrainingMeta {
        seed: config.train.seed,
        steps: config.train.steps as u64,
        lr: config.train.lr,
        loss_tail: report.tail(),
        lineage: vec![format!("train-propagator {}", root.display())],
    };
    Ok((net.to_checkpoint(&config.train, meta)?, report))
}

/// Identity-coded embedding grid `[H*W, dim]` for a keyframe mask: a pixel of
/// object `k` gets its slot vector plus the projected audio row, background
/// pixels get slot 0's vector alone.
pub fn assign_identities<S: Scalar>(
    net: &PropagatorNet<S>,
    mask: &LabelMap,
    audio_row: &[S],
) -> Result<(SlotMap, Tensor<S>)> {
    if audio_row.len() != net.config.audio_dim {
        return Err(Error::InvalidInput(format!(
            "audio row has {} values, model expects {}",
            audio_row.len(),
            net.config.audio_dim
        )));
    }
    let slots = SlotMap::from_mask(mask, net.config.identities)?;
    let mut g = Graph::new();
    let probs = g.input(slots.one_hot(mask));
    let grid = net.identity_grid(&mut g, probs, audio_row);
    Ok((slots, g.value(grid).clone()))
}

/// Whole-sequence helper used by tests and the pipeline: propagate every
/// sub-clip of `control` from the given keyframe masks.
pub fn propagate_sequence<S: Scalar>(
    net: &PropagatorNet<S>,
    frames: &[Frame],
    audio: &AudioFeatures<S>,
    subclips: &[crate::types::SubClip],
    keyframe_masks: &[LabelMap],
) -> Result<MaskSequence> {
    let mut labels = Vec::with_capacity(frames.len());
    for (sc, kf) in subclips.iter().zip(keyframe_masks) {
        let part = propagate_subclip(net, kf, &frames[sc.frames()], &audio.slice(sc.start, sc.end))?;
        labels.extend(part);
    }
    MaskSequence::new(labels, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PropagatorModelConfig {
        PropagatorModelConfig {
            channels: vec![4],
            insert_levels: vec![0],
            audio_dim: 8,
            audio_tokens: 2,
            insert_head_dim: 4,
            dim: 8,
            heads: 1,
            blocks: 1,
            identities: 4,
            window: 1,
            memory_stride: 1,
            memory_capacity: 3,
            audio_identity: true,
        }
    }

    #[test]
    fn slot_map_orders_ids() {
        let m = LabelMap::new(1, 5, vec![0, 7, 3, 3, 0]).unwrap();
        let s = SlotMap::from_mask(&m, 4).unwrap();
        assert_eq!(s.objects(), &[3, 7]);
        assert_eq!(s.encode(&m), vec![0, 2, 1, 1, 0]);
        assert_eq!(s.active(), vec![true, true, true, false]);
        assert_eq!(s.id_of(2), 7);
        assert!(matches!(SlotMap::from_mask(&m, 2), Err(Error::Capacity(_))));
    }

    #[test]
    fn sub_tokens_split_rows() {
        let t = audio_sub_tokens(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.row(1), &[3.0, 4.0]);
        assert!(audio_sub_tokens(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PropagatorModelConfig { audio_tokens: 3, ..tiny() }.validate().is_err());
        assert!(PropagatorModelConfig { insert_levels: vec![1], ..tiny() }.validate().is_err());
        assert_eq!(PropagatorModelConfig::default().single_insert().insert_levels, vec![3]);
        assert_eq!(PropagatorModelConfig::default().token_level(), 2);
    }

    #[test]
    fn single_frame_subclip_returns_keyframe() {
        let net = PropagatorNet::<f64>::new(tiny(), 0).unwrap();
        let f = Frame::filled(8, 8, [10, 20, 30]);
        let m = LabelMap::new(8, 8, (0..64).map(|i| (i % 3) as u16).collect()).unwrap();
        let a = AudioFeatures::new(1, 8, vec![0.5; 8]).unwrap();
        assert_eq!(propagate_subclip(&net, &m, std::slice::from_ref(&f), &a).unwrap(), vec![m.clone()]);
        let two = AudioFeatures::new(2, 8, vec![0.5; 16]).unwrap();
        assert!(propagate_subclip(&net, &m, &[f], &two).is_err());
    }
}
