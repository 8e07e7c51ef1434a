//! Audio-conditioned single-frame segmentation.
//!
//! A conv tower encodes the frame, its coarsest grid is flattened into tokens,
//! one audio token is appended, and a pre-norm transformer encoder mixes them.
//! The grid tokens are then upsampled back to full resolution with 1x1 skip
//! projections from the finer tower levels.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{KeyframeItem, KeyframeSubset};
use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::dataset::{list_videos, load_sample};
use crate::error::{Error, Result};
use crate::nn::{Adam, ConvTower, EncoderBlock, FMap, Graph, Init, Linear, ParamGrads, ParamSet, Tensor, Var};
use crate::scalar::Scalar;
use crate::training::{check_step, BatchSampler, TrainReport};
use crate::types::{Frame, LabelMap};

pub const CHECKPOINT_KIND: &str = "keyframe";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeModelConfig {
    /// Tower channels from fine to coarse; each stage after the first halves the size.
    pub channels: Vec<usize>,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of output classes including background.
    pub classes: usize,
    pub audio_dim: usize,
}

impl Default for KeyframeModelConfig {
    fn default() -> Self {
        KeyframeModelConfig {
            channels: vec![24, 32, 96, 256],
            dim: 64,
            layers: 2,
            heads: 4,
            classes: 7,
            audio_dim: 16,
        }
    }
}

impl KeyframeModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("keyframe model: {m}")));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be non-empty and positive");
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be a positive multiple of heads");
        }
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.audio_dim == 0 {
            return bad("audio_dim must be positive");
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for KeyframeTrainConfig {
    fn default() -> Self {
        KeyframeTrainConfig {
            steps: 1500,
            batch_size: 4,
            lr: 1e-4,
            finetune_steps: 300,
            finetune_lr: 1e-5,
            ce_weight: 1.0,
            dice_weight: 1.0,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeConfig {
    pub model: KeyframeModelConfig,
    pub train: KeyframeTrainConfig,
}

/// Frame pixels as a `[H*W, 3]` tensor scaled to [-1, 1].
pub fn image_tensor<S: Scalar>(frame: &Frame) -> Tensor<S> {
    let data = frame
        .data
        .iter()
        .map(|&v| S::from_f64_lossy(v as f64 / 127.5 - 1.0))
        .collect();
    Tensor::from_vec(&[frame.height * frame.width, 3], data)
}

/// Per-row argmax; ties go to the lowest index.
pub fn argmax_rows<S: Scalar>(probs: &[S], classes: usize) -> Vec<u16> {
    probs
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = k;
                }
            }
            best as u16
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct KeyframePrediction<S> {
    pub mask: LabelMap,
    /// Row-major `[H*W, classes]` probabilities.
    pub probs: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct KeyframeNet<S> {
    pub config: KeyframeModelConfig,
    pub params: ParamSet<S>,
    tower: ConvTower,
    token_proj: Linear,
    audio_proj: Linear,
    blocks: Vec<EncoderBlock>,
    skips: Vec<Linear>,
    head: Linear,
}

impl<S: Scalar> KeyframeNet<S> {
    pub fn new(config: KeyframeModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = config.dim;
        let top = *config.channels.last().unwrap();
        let tower = ConvTower::new(&mut ps, "tower", 3, &config.channels, &mut rng);
        let token_proj = Linear::new(&mut ps, "token_proj", top, c, true, Init::Normal((1.0 / top as f64).sqrt()), &mut rng);
        let audio_proj = Linear::new(
            &mut ps,
            "audio_proj",
            config.audio_dim,
            c,
            true,
            Init::Normal((1.0 / config.audio_dim as f64).sqrt()),
            &mut rng,
        );
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(&mut ps, &format!("encoder{i}"), c, config.heads, &mut rng))
            .collect();
        let skips = config.channels[..config.channels.len() - 1]
            .iter()
            .enumerate()
            .map(|(i, &ch)| Linear::new(&mut ps, &format!("skip{i}"), ch, c, true, Init::He(ch), &mut rng))
            .collect();
        let head = Linear::new(&mut ps, "head", c, config.classes, true, Init::Normal((1.0 / c as f64).sqrt()), &mut rng);
        Ok(KeyframeNet {
            config,
            params: ps,
            tower,
            token_proj,
            audio_proj,
            blocks,
            skips,
            head,
        })
    }

    pub fn num_weights(&self) -> usize {
        self.params.num_weights()
    }

    fn check_input(&self, height: usize, width: usize, audio_len: usize) -> Result<()> {
        let s = self.config.stride();
        if !height.is_multiple_of(s) || !width.is_multiple_of(s) || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!("frame {height}x{width} is not divisible by stride {s}")));
        }
        if audio_len != self.config.audio_dim {
            return Err(Error::InvalidInput(format!(
                "audio row has {audio_len} values, model expects {}",
                self.config.audio_dim
            )));
        }
        Ok(())
    }

    /// Builds the forward pass and returns `[H*W, classes]` logits.
    pub fn forward(&self, g: &mut Graph<S>, image: Tensor<S>, height: usize, width: usize, audio: &[S]) -> Var {
        let ps = &self.params;
        let x = FMap {
            var: g.input(image),
            h: height,
            w: width,
            c: 3,
        };
        let levels = self.tower.forward(g, ps, x);
        let top = *levels.last().unwrap();
        let tokens = self.token_proj.forward(g, ps, top.var);
        let a = g.input(Tensor::from_vec(&[1, audio.len()], audio.to_vec()));
        let a = self.audio_proj.forward(g, ps, a);
        let mut seq = g.concat_rows(&[tokens, a]);
        for block in &self.blocks {
            seq = block.forward(g, ps, seq);
        }
        let n = top.h * top.w;
        let mut d = g.slice_rows(seq, 0, n);
        let (mut h, mut w) = (top.h, top.w);
        for lvl in (0..levels.len() - 1).rev() {
            d = g.upsample2(d, h, w);
            h *= 2;
            w *= 2;
            let s = self.skips[lvl].forward(g, ps, levels[lvl].var);
            d = g.add(d, s);
            d = g.relu(d);
        }
        self.head.forward(g, ps, d)
    }

    pub fn predict(&self, frame: &Frame, audio_row: &[S]) -> Result<KeyframePrediction<S>> {
        self.check_input(frame.height, frame.width, audio_row.len())?;
        let mut g = Graph::new();
        let logits = self.forward(&mut g, image_tensor(frame), frame.height, frame.width, audio_row);
        let probs = g.softmax(logits, None);
        let probs = g.value(probs).data().to_vec();
        let labels = argmax_rows(&probs, self.config.classes);
        Ok(KeyframePrediction {
            mask: LabelMap::new(frame.height, frame.width, labels)?,
            probs,
        })
    }

    fn check_item(&self, item: &KeyframeItem<S>) -> Result<()> {
        self.check_input(item.frame.height, item.frame.width, item.audio_row.len())?;
        if !item.mask.same_shape(&LabelMap::background(item.frame.height, item.frame.width)) {
            return Err(Error::InvalidInput(format!("{}: mask size differs from frame", item.video_id)));
        }
        let max = item.mask.max_id() as usize;
        if max >= self.config.classes {
            return Err(Error::InvalidInput(format!(
                "{} frame {}: id {max} exceeds the {} model classes",
                item.video_id, item.frame_index, self.config.classes
            )));
        }
        Ok(())
    }

    /// Loss of one item and the parameter gradients.
    pub fn loss_and_grads(&self, item: &KeyframeItem<S>, train: &KeyframeTrainConfig) -> (f64, ParamGrads<S>) {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, item, train);
        let value = g.value(loss).data()[0].to_f64_lossy();
        let grads = g.backward(loss);
        let mut pg = ParamGrads::zeros_like(&self.params);
        pg.accumulate(&g, &grads);
        (value, pg)
    }

    pub fn loss(&self, item: &KeyframeItem<S>, train: &KeyframeTrainConfig) -> f64 {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, item, train);
        g.value(loss).data()[0].to_f64_lossy()
    }

    fn loss_graph(&self, g: &mut Graph<S>, item: &KeyframeItem<S>, train: &KeyframeTrainConfig) -> Var {
        let logits = self.forward(g, image_tensor(&item.frame), item.frame.height, item.frame.width, &item.audio_row);
        let targets: Arc<[usize]> = item.mask.data.iter().map(|&v| v as usize).collect();
        let ce = g.cross_entropy(logits, targets.clone(), None);
        let probs = g.softmax(logits, None);
        let all: Arc<[bool]> = vec![true; self.config.classes].into();
        let dice = g.dice_loss(probs, targets, all, S::one());
        let ce = g.scale(ce, S::from_f64_lossy(train.ce_weight));
        let dice = g.scale(dice, S::from_f64_lossy(train.dice_weight));
        g.add(ce, dice)
    }

    /// Mean loss over items.
    pub fn mean_loss(&self, items: &[KeyframeItem<S>], train: &KeyframeTrainConfig) -> f64 {
        items.iter().map(|i| self.loss(i, train)).sum::<f64>() / items.len().max(1) as f64
    }

    /// Moves head column `c` to `perm[c]`, matching a relabelling of the classes.
    pub fn permute_classes(&mut self, perm: &[usize]) -> Result<()> {
        let k = self.config.classes;
        let mut seen = vec![false; k];
        if perm.len() != k || perm.iter().any(|&p| p >= k || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidInput("class permutation is not a bijection".into()));
        }
        let w = self.params.tensor_mut(self.head.weight);
        let rows = w.rows();
        let old = w.data().to_vec();
        for r in 0..rows {
            for c in 0..k {
                w.data_mut()[r * k + perm[c]] = old[r * k + c];
            }
        }
        if let Some(b) = self.head.bias {
            let bias = self.params.tensor_mut(b);
            let old = bias.data().to_vec();
            for c in 0..k {
                bias.data_mut()[perm[c]] = old[c];
            }
        }
        Ok(())
    }

    /// Runs `steps` Adam steps over `items`.
    pub fn fit(&mut self, items: &[KeyframeItem<S>], steps: usize, lr: f64, train: &KeyframeTrainConfig) -> Result<TrainReport> {
        if items.is_empty() {
            return Err(Error::InvalidInput("no training items".into()));
        }
        for item in items {
            self.check_item(item)?;
        }
        let mut opt = Adam::new(&self.params, lr);
        let mut sampler = BatchSampler::new(items.len(), train.seed);
        let mut report = TrainReport::default();
        for step in 0..steps {
            let batch = sampler.next_batch(train.batch_size.max(1));
            let mut total = ParamGrads::zeros_like(&self.params);
            let mut loss = 0.0;
            for &i in &batch {
                let (l, pg) = self.loss_and_grads(&items[i], train);
                loss += l;
                total.merge(&pg);
            }
            let inv = 1.0 / batch.len() as f64;
            total.scale(S::from_f64_lossy(inv));
            loss *= inv;
            let ids = || batch.iter().map(|&i| format!("{}#{}", items[i].video_id, items[i].frame_index)).collect::<Vec<_>>();
            check_step(step, lr, &ids(), loss, &total, None)?;
            opt.update(&mut self.params, &total);
            check_step(step, lr, &ids(), loss, &total, Some(&self.params))?;
            if train.log_every > 0 && step % train.log_every == 0 {
                log::info!("keyframe step {step}: loss {loss:.5}");
            }
            report.losses.push(loss);
        }
        Ok(report)
    }

    pub fn to_checkpoint(&self, train: &KeyframeTrainConfig, meta: TrainingMeta) -> Result<Checkpoint<S>> {
        let config = serde_json::to_value(KeyframeConfig {
            model: self.config.clone(),
            train: train.clone(),
        })
        .map_err(|e| Error::json("keyframe config", e))?;
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config,
            meta,
            weights: self.params.to_map(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config = checkpoint_config(ckpt)?;
        let mut net = KeyframeNet::new(config.model, 0)?;
        net.params.load_map(&ckpt.weights).map_err(Error::Checkpoint)?;
        Ok(net)
    }
}

pub fn checkpoint_config<S: Scalar>(ckpt: &Checkpoint<S>) -> Result<KeyframeConfig> {
    serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::json("keyframe checkpoint config", e))
}

/// Every annotated frame of every video under `root`.
pub fn all_frame_items<S: Scalar>(root: &Path) -> Result<Vec<KeyframeItem<S>>> {
    let mut items = Vec::new();
    for id in list_videos(root)? {
        let sample = load_sample::<S>(root, &id)?;
        let masks = sample
            .masks
            .ok_or_else(|| Error::InvalidInput(format!("{id}: training needs ground-truth masks")))?;
        for (t, (frame, mask)) in sample.clip.frames().iter().zip(masks.labels()).enumerate() {
            items.push(KeyframeItem {
                video_id: id.clone(),
                frame_index: t,
                frame: frame.clone(),
                audio_row: sample.audio.row(t).to_vec(),
                mask: mask.clone(),
            });
        }
    }
    Ok(items)
}

/// Trains from scratch on every frame under `root`.
pub fn train_keyframe<S: Scalar>(root: &Path, config: &KeyframeConfig) -> Result<(Checkpoint<S>, TrainReport)> {
    let items = all_frame_items::<S>(root)?;
    let mut net = KeyframeNet::new(config.model.clone(), config.train.seed)?;
    let report = net.fit(&items, config.train.steps, config.train.lr, &config.train)?;
    let meta = TrainingMeta {
        seed: config.train.seed,
        steps: config.train.steps as u64,
        lr: config.train.lr,
        loss_tail: report.tail(),
        lineage: vec![format!("train-keyframe {}", root.display())],
    };
    Ok((net.to_checkpoint(&config.train, meta)?, report))
}

/// Continues training a keyframe checkpoint on the keyframe subset with the fine-tuning lr.
pub fn finetune_keyframe<S: Scalar>(
    ckpt: &Checkpoint<S>,
    subset: &KeyframeSubset<S>,
    config: &KeyframeConfig,
) -> Result<(Checkpoint<S>, TrainReport)> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("keyframe subset is empty".into()));
    }
    let stored = checkpoint_config(ckpt)?;
    if stored.model != config.model {
        return Err(Error::Config(format!(
            "model config does not match the checkpoint (checkpoint {:?}, requested {:?})",
            stored.model, config.model
        )));
    }
    let mut net = KeyframeNet::from_checkpoint(ckpt)?;
    let report = net.fit(&subset.items, config.train.finetune_steps, config.train.finetune_lr, &config.train)?;
    let mut lineage = ckpt.meta.lineage.clone();
    lineage.push(format!(
        "finetune-keyframe on {} keyframes (parent seed {}, {} steps)",
        subset.len(),
        ckpt.meta.seed,
        ckpt.meta.steps
    ));
    let meta = TrainingMeta {
        seed: config.train.seed,
        steps: config.train.finetune_steps as u64,
        lr: config.train.finetune_lr,
        loss_tail: report.tail(),
        lineage,
    };
    Ok((net.to_checkpoint(&config.train, meta)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> KeyframeModelConfig {
        KeyframeModelConfig {
            channels: vec![4, 4, 6, 8],
            dim: 8,
            layers: 1,
            heads: 2,
            classes: 3,
            audio_dim: 4,
        }
    }

    fn frame(seed: u8) -> Frame {
        let data = (0..8 * 8 * 3).map(|i| ((i * 37 + seed as usize * 11) % 256) as u8).collect();
        Frame::new(8, 8, data).unwrap()
    }

    #[test]
    fn prediction_is_a_simplex_and_deterministic() {
        let net = KeyframeNet::<f64>::new(tiny(), 1).unwrap();
        let a = [0.5, -0.2, 0.1, 0.9];
        let p = net.predict(&frame(0), &a).unwrap();
        for row in p.probs.chunks(3) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let q = net.predict(&frame(0), &a).unwrap();
        assert_eq!(p.probs, q.probs);
        assert_eq!(p.mask, q.mask);
        assert!(net.predict(&Frame::new(12, 8, vec![0; 12 * 8 * 3]).unwrap(), &a).is_err());
        assert!(net.predict(&frame(0), &a[..3]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[0.4, 0.4, 0.2, 0.1, 0.45, 0.45], 3), vec![0, 1]);
    }

    #[test]
    fn permute_classes_moves_head_columns() {
        let mut net = KeyframeNet::<f64>::new(tiny(), 2).unwrap();
        let a = [0.1, 0.2, 0.3, 0.4];
        let before = net.predict(&frame(1), &a).unwrap();
        net.permute_classes(&[2, 0, 1]).unwrap();
        let after = net.predict(&frame(1), &a).unwrap();
        for (b, a) in before.probs.chunks(3).zip(after.probs.chunks(3)) {
            assert!((b[0] - a[2]).abs() < 1e-15 && (b[1] - a[0]).abs() < 1e-15 && (b[2] - a[1]).abs() < 1e-15);
        }
        assert!(net.permute_classes(&[0, 0, 1]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_outputs() {
        let net = KeyframeNet::<f64>::new(tiny(), 5).unwrap();
        let ck = net.to_checkpoint(&KeyframeTrainConfig::default(), TrainingMeta::default()).unwrap();
        let back = KeyframeNet::from_checkpoint(&Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        let a = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(net.predict(&frame(3), &a).unwrap().probs, back.predict(&frame(3), &a).unwrap().probs);
    }
}
