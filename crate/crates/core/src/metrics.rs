//! Jaccard index, F-measure and alignment rate, plus dataset-level evaluation reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{list_videos, load_masks};
use crate::error::{Error, Result};
use crate::types::{LabelMap, MaskSequence, ObjectId};

pub const DEFAULT_BETA_SQ: f64 = 0.3;
pub const DEFAULT_TAU: f64 = 0.002;

/// Whether ids are compared as foreground/background or per class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Any nonzero id is foreground.
    #[default]
    Binary,
    /// Mean over classes present in the ground truth.
    Semantic,
}

fn check_shapes(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::InvalidInput(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// (|pred & gt|, |pred|, |gt|) over pixels selected by `sel`.
fn overlap(pred: &LabelMap, gt: &LabelMap, sel: impl Fn(ObjectId) -> bool) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (sa, sb) = (sel(a), sel(b));
        p += sa as usize;
        g += sb as usize;
        inter += (sa && sb) as usize;
    }
    (inter, p, g)
}

fn iou(inter: usize, p: usize, g: usize) -> f64 {
    let union = p + g - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn f_beta(inter: usize, p: usize, g: usize, beta_sq: f64) -> f64 {
    if p == 0 && g == 0 {
        return 1.0;
    }
    if p == 0 || g == 0 || inter == 0 {
        return 0.0;
    }
    let precision = inter as f64 / p as f64;
    let recall = inter as f64 / g as f64;
    (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
}

fn gt_classes(gt: &LabelMap) -> BTreeSet<ObjectId> {
    gt.object_ids()
}

pub fn jaccard(pred: &LabelMap, gt: &LabelMap, mode: MaskMode) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(match mode {
        MaskMode::Binary => {
            let (i, p, g) = overlap(pred, gt, |v| v != 0);
            iou(i, p, g)
        }
        MaskMode::Semantic => {
            let classes = gt_classes(gt);
            if classes.is_empty() {
                let (i, p, g) = overlap(pred, gt, |v| v != 0);
                return Ok(iou(i, p, g));
            }
            let total: f64 = classes
                .iter()
                .map(|&c| {
                    let (i, p, g) = overlap(pred, gt, |v| v == c);
                    iou(i, p, g)
                })
                .sum();
            total / classes.len() as f64
        }
    })
}

pub fn fscore(pred: &LabelMap, gt: &LabelMap, beta_sq: f64, mode: MaskMode) -> Result<f64> {
    check_shapes(pred, gt)?;
    if !(beta_sq > 0.0 && beta_sq.is_finite()) {
        return Err(Error::InvalidInput(format!("beta^2 must be positive, got {beta_sq}")));
    }
    Ok(match mode {
        MaskMode::Binary => {
            let (i, p, g) = overlap(pred, gt, |v| v != 0);
            f_beta(i, p, g, beta_sq)
        }
        MaskMode::Semantic => {
            let classes = gt_classes(gt);
            if classes.is_empty() {
                let (i, p, g) = overlap(pred, gt, |v| v != 0);
                return Ok(f_beta(i, p, g, beta_sq));
            }
            let total: f64 = classes
                .iter()
                .map(|&c| {
                    let (i, p, g) = overlap(pred, gt, |v| v == c);
                    f_beta(i, p, g, beta_sq)
                })
                .sum();
            total / classes.len() as f64
        }
    })
}

/// Ids covering at least `tau * H * W` pixels.
pub fn present_ids(mask: &LabelMap, tau: f64) -> BTreeSet<ObjectId> {
    let floor = tau * (mask.height * mask.width) as f64;
    mask.histogram()
        .into_iter()
        .filter(|&(id, n)| id != 0 && n as f64 >= floor)
        .map(|(id, _)| id)
        .collect()
}

/// Whether the present-id sets of one frame agree.
pub fn frame_aligned(pred: &LabelMap, gt: &LabelMap, tau: f64) -> Result<bool> {
    check_shapes(pred, gt)?;
    Ok(present_ids(pred, tau) == present_ids(gt, tau))
}

pub fn alignment_rate(pred: &MaskSequence, gt: &MaskSequence, tau: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut aligned = 0usize;
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        aligned += frame_aligned(p, g, tau)? as usize;
    }
    Ok(aligned as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub m_j: f64,
    pub m_f: f64,
    pub alignment_rate: f64,
    pub frames: usize,
}

/// Scores one video: frame-mean J and F, and the alignment rate.
pub fn score_video(pred: &MaskSequence, gt: &MaskSequence, config: &EvalConfig) -> Result<VideoScores> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut j = 0.0;
    let mut f = 0.0;
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        j += jaccard(p, g, config.mode)?;
        f += fscore(p, g, config.beta_sq, config.mode)?;
    }
    let n = gt.len() as f64;
    Ok(VideoScores {
        m_j: j / n,
        m_f: f / n,
        alignment_rate: alignment_rate(pred, gt, config.tau)?,
        frames: gt.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beta_sq: f64,
    pub tau: f64,
    pub mode: MaskMode,
    pub subset: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beta_sq: DEFAULT_BETA_SQ,
            tau: DEFAULT_TAU,
            mode: MaskMode::Binary,
            subset: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub m_j: f64,
    pub m_f: f64,
    pub alignment_rate: f64,
    pub videos: usize,
}

/// Evaluation report; serialised as the `eval` command's JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub per_video: BTreeMap<String, VideoScores>,
    pub aggregate: Aggregate,
    pub errors: Vec<String>,
}

impl EvalReport {
    pub fn from_scores(config: EvalConfig, per_video: BTreeMap<String, VideoScores>, errors: Vec<String>) -> Self {
        let n = per_video.len();
        let mean = |f: fn(&VideoScores) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_video.values().map(f).sum::<f64>() / n as f64
            }
        };
        let aggregate = Aggregate {
            m_j: mean(|s| s.m_j),
            m_f: mean(|s| s.m_f),
            alignment_rate: mean(|s| s.alignment_rate),
            videos: n,
        };
        EvalReport {
            config,
            per_video,
            aggregate,
            errors,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("eval report", e))
    }
}

/// Evaluates predictions under `pred_root` against ground truth under `data_root`.
///
/// Videos lacking a prediction (or ground truth) are listed in `errors` and
/// excluded from the aggregate.
pub fn evaluate(data_root: &Path, pred_root: &Path, subset: Option<&[String]>, config: &EvalConfig) -> Result<EvalReport> {
    let ids: Vec<String> = match subset {
        Some(s) => {
            let mut v = s.to_vec();
            v.sort();
            v.dedup();
            v
        }
        None => list_videos(data_root)?,
    };
    let mut per_video = BTreeMap::new();
    let mut errors = Vec::new();
    for id in ids {
        let gt = match load_masks(data_root, &id) {
            Ok(Some(m)) => m,
            Ok(None) => {
                errors.push(format!("{id}: missing ground-truth masks"));
                continue;
            }
            Err(e) => {
                errors.push(format!("{id}: {e}"));
                continue;
            }
        };
        let pred = match load_masks(pred_root, &id) {
            Ok(Some(m)) => m,
            Ok(None) => {
                errors.push(format!("{id}: missing prediction"));
                continue;
            }
            Err(e) => {
                errors.push(format!("{id}: {e}"));
                continue;
            }
        };
        match score_video(&pred, &gt, config) {
            Ok(s) => {
                per_video.insert(id, s);
            }
            Err(e) => errors.push(format!("{id}: {e}")),
        }
    }
    Ok(EvalReport::from_scores(config.clone(), per_video, errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(w: usize, data: Vec<u16>) -> LabelMap {
        LabelMap::new(data.len() / w, w, data).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        let a = lm(4, vec![1, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(jaccard(&a, &a, MaskMode::Binary).unwrap(), 1.0);
        let b = lm(4, vec![0, 0, 1, 1, 0, 0, 1, 1]);
        assert_eq!(jaccard(&a, &b, MaskMode::Binary).unwrap(), 0.0);
        let half = lm(4, vec![1, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(jaccard(&half, &a, MaskMode::Binary).unwrap(), 0.5);
        let empty = lm(4, vec![0; 8]);
        assert_eq!(jaccard(&empty, &empty, MaskMode::Binary).unwrap(), 1.0);
        assert!(jaccard(&a, &lm(2, vec![0; 8]), MaskMode::Binary).is_err());
    }

    #[test]
    fn semantic_jaccard_averages_gt_classes() {
        let gt = lm(4, vec![1, 1, 2, 2]);
        let pred = lm(4, vec![1, 1, 1, 2]);
        // class 1: 2/3, class 2: 1/2
        let j = jaccard(&pred, &gt, MaskMode::Semantic).unwrap();
        assert!((j - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn fscore_examples() {
        let gt = lm(4, vec![1, 1, 1, 1]);
        assert_eq!(fscore(&gt, &gt, 0.3, MaskMode::Binary).unwrap(), 1.0);
        let empty = lm(4, vec![0; 4]);
        assert_eq!(fscore(&empty, &gt, 0.3, MaskMode::Binary).unwrap(), 0.0);
        assert_eq!(fscore(&empty, &empty, 0.3, MaskMode::Binary).unwrap(), 1.0);
        let half = lm(4, vec![1, 1, 0, 0]);
        // P = 1, R = 0.5: 1.3 * 0.5 / (0.3 + 0.5)
        let f = fscore(&half, &gt, 0.3, MaskMode::Binary).unwrap();
        assert!((f - 0.8125).abs() < 1e-15);
        assert!(fscore(&half, &gt, 0.0, MaskMode::Binary).is_err());
    }

    fn handoff(t_a_off: usize) -> MaskSequence {
        // A (id 1) sounds until t_a_off, B (id 2) afterwards
        let labels = (0..10)
            .map(|t| {
                let mut d = vec![0u16; 100];
                if t < t_a_off {
                    d[..20].fill(1);
                }
                if t >= 5 {
                    d[50..70].fill(2);
                }
                lm(10, d)
            })
            .collect();
        MaskSequence::new(labels, None).unwrap()
    }

    #[test]
    fn alignment_examples() {
        let gt = handoff(5);
        assert_eq!(alignment_rate(&gt, &gt, DEFAULT_TAU).unwrap(), 1.0);
        // prediction keeps A alive for three extra frames
        let late = handoff(8);
        assert!((alignment_rate(&late, &gt, DEFAULT_TAU).unwrap() - 0.7).abs() < 1e-15);
        let bg = MaskSequence::new(vec![lm(10, vec![0; 100]); 3], None).unwrap();
        assert_eq!(alignment_rate(&bg, &bg, DEFAULT_TAU).unwrap(), 1.0);
    }

    #[test]
    fn tau_suppresses_specks() {
        let gt = lm(10, vec![0; 100]);
        let mut d = vec![0u16; 100];
        d[3] = 4;
        assert!(frame_aligned(&lm(10, d), &gt, 0.02).unwrap());
        let mut d = vec![0u16; 100];
        d[3..6].fill(4);
        assert!(!frame_aligned(&lm(10, d), &gt, 0.02).unwrap());
    }

    #[test]
    fn report_means() {
        let mut pv = BTreeMap::new();
        pv.insert("a".to_string(), VideoScores { m_j: 1.0, m_f: 0.5, alignment_rate: 0.0, frames: 3 });
        pv.insert("b".to_string(), VideoScores { m_j: 0.0, m_f: 0.5, alignment_rate: 1.0, frames: 3 });
        let r = EvalReport::from_scores(EvalConfig::default(), pv, vec![]);
        assert_eq!(r.aggregate.m_j, 0.5);
        assert_eq!(r.aggregate.m_f, 0.5);
        assert_eq!(r.aggregate.alignment_rate, 0.5);
    }

    fn arb_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
        (proptest::collection::vec(0u16..4, 36), proptest::collection::vec(0u16..4, 36))
            .prop_map(|(a, b)| (lm(6, a), lm(6, b)))
    }

    proptest! {
        #[test]
        fn scores_bounded_and_permutation_invariant((p, g) in arb_pair(), perm in Just([1u16, 2, 3]).prop_shuffle()) {
            for mode in [MaskMode::Binary, MaskMode::Semantic] {
                let j = jaccard(&p, &g, mode).unwrap();
                let f = fscore(&p, &g, 0.3, mode).unwrap();
                prop_assert!((0.0..=1.0).contains(&j));
                prop_assert!((0.0..=1.0).contains(&f));
                prop_assert_eq!(jaccard(&p, &p, mode).unwrap(), 1.0);
                let map = |m: &LabelMap| LabelMap::new(m.height, m.width,
                    m.data.iter().map(|&v| if v == 0 { 0 } else { perm[(v - 1) as usize] }).collect()).unwrap();
                let (pp, gp) = (map(&p), map(&g));
                prop_assert!((jaccard(&pp, &gp, mode).unwrap() - j).abs() < 1e-12);
                prop_assert!((fscore(&pp, &gp, 0.3, mode).unwrap() - f).abs() < 1e-12);
                prop_assert_eq!(frame_aligned(&pp, &gp, 0.05).unwrap(), frame_aligned(&p, &g, 0.05).unwrap());
            }
        }

        #[test]
        fn fixing_one_frame_adds_one_over_t(raw in proptest::collection::vec(proptest::collection::vec(0u16..3, 16), 2..8)) {
            let gt = MaskSequence::new(raw.iter().map(|d| lm(4, d.clone())).collect(), None).unwrap();
            // prediction: all background
            let pred_labels: Vec<LabelMap> = raw.iter().map(|_| lm(4, vec![0; 16])).collect();
            let pred = MaskSequence::new(pred_labels.clone(), None).unwrap();
            let before = alignment_rate(&pred, &gt, 0.0).unwrap();
            if let Some(t) = (0..raw.len()).find(|&t| !frame_aligned(&pred_labels[t], &gt.labels()[t], 0.0).unwrap()) {
                let mut fixed = pred_labels.clone();
                fixed[t] = gt.labels()[t].clone();
                let after = alignment_rate(&MaskSequence::new(fixed, None).unwrap(), &gt, 0.0).unwrap();
                prop_assert!((after - before - 1.0 / raw.len() as f64).abs() < 1e-12);
            }
        }
    }
}
