//! Core domain types shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Minimum frame side length.
pub const MIN_SIDE: usize = 8;

/// One RGB frame, 8 bits per channel, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidInput(format!(
                "frame buffer of {} bytes does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Frame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, height * width).flatten().collect();
        Frame { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// The visual stream of a video: `T >= 1` frames of identical size.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    pub frame_rate: f64,
    pub video_id: String,
}

impl VideoClip {
    pub fn new(video_id: impl Into<String>, frames: Vec<Frame>, frame_rate: f64) -> Result<Self> {
        let video_id = video_id.into();
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput(format!("video {video_id} has no frames")))?;
        let (h, w) = (first.height, first.width);
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "video {video_id}: frame size {h}x{w} below {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if let Some(t) = frames.iter().position(|f| f.height != h || f.width != w) {
            return Err(Error::InvalidInput(format!(
                "video {video_id}: frame {t} is {}x{}, expected {h}x{w}",
                frames[t].height, frames[t].width
            )));
        }
        Ok(VideoClip {
            frames,
            frame_rate,
            video_id,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }
}

/// Per-frame audio feature vectors, a dense `T x D` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures<S> {
    data: Vec<S>,
    frames: usize,
    dim: usize,
}

impl<S: Scalar> AudioFeatures<S> {
    pub fn new(frames: usize, dim: usize, data: Vec<S>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("audio feature dimension must be >= 1".into()));
        }
        if data.len() != frames * dim {
            return Err(Error::InvalidInput(format!(
                "audio buffer of {} values does not match {frames}x{dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite audio feature at row {} column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(AudioFeatures { data, frames, dim })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if let Some(t) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::InvalidInput(format!("audio row {t} has a different width")));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[S] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Rows `start..=end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        AudioFeatures {
            data: self.data[start * self.dim..(end + 1) * self.dim].to_vec(),
            frames: end + 1 - start,
            dim: self.dim,
        }
    }

    pub fn map_rows(&self, mut f: impl FnMut(usize, &[S]) -> Vec<S>) -> Result<Self> {
        let rows: Vec<Vec<S>> = (0..self.frames).map(|t| f(t, self.row(t))).collect();
        Self::from_rows(&rows)
    }
}

/// Object id of a mask pixel; 0 is background.
pub type ObjectId = u16;

/// One integer label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<ObjectId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<ObjectId>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "label buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn background(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> ObjectId {
        self.data[y * self.width + x]
    }

    /// Sorted set of nonzero ids present.
    pub fn object_ids(&self) -> BTreeSet<ObjectId> {
        self.data.iter().copied().filter(|&v| v != 0).collect()
    }

    pub fn max_id(&self) -> ObjectId {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per id, including background.
    pub fn histogram(&self) -> BTreeMap<ObjectId, usize> {
        let mut h = BTreeMap::new();
        for &v in &self.data {
            *h.entry(v).or_insert(0) += 1;
        }
        h
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-frame label maps of a video, ground truth or predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSequence {
    labels: Vec<LabelMap>,
    palette: Option<BTreeMap<ObjectId, String>>,
}

impl MaskSequence {
    pub fn new(labels: Vec<LabelMap>, palette: Option<BTreeMap<ObjectId, String>>) -> Result<Self> {
        let first = labels
            .first()
            .ok_or_else(|| Error::InvalidInput("mask sequence has no frames".into()))?;
        if let Some(t) = labels.iter().position(|m| !m.same_shape(first)) {
            return Err(Error::InvalidInput(format!("mask {t} differs in shape from mask 0")));
        }
        if let Some(p) = &palette {
            for m in &labels {
                if let Some(id) = m.object_ids().into_iter().find(|id| !p.contains_key(id)) {
                    return Err(Error::InvalidInput(format!("palette has no entry for id {id}")));
                }
            }
        }
        Ok(MaskSequence { labels, palette })
    }

    pub fn labels(&self) -> &[LabelMap] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<LabelMap> {
        self.labels
    }

    pub fn palette(&self) -> Option<&BTreeMap<ObjectId, String>> {
        self.palette.as_ref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.labels[0].height
    }

    pub fn width(&self) -> usize {
        self.labels[0].width
    }

    /// Applies `f` to every id (including background) in every frame.
    pub fn relabel(&self, f: impl Fn(ObjectId) -> ObjectId) -> MaskSequence {
        MaskSequence {
            labels: self
                .labels
                .iter()
                .map(|m| LabelMap {
                    height: m.height,
                    width: m.width,
                    data: m.data.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
            palette: None,
        }
    }
}

/// Control-point flags: `flags[t] == 1` marks frame `t` as the start of a sub-clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ControlPointList {
    flags: Vec<u8>,
}

impl TryFrom<Vec<u8>> for ControlPointList {
    type Error = Error;

    fn try_from(flags: Vec<u8>) -> Result<Self> {
        ControlPointList::new(flags)
    }
}

impl From<ControlPointList> for Vec<u8> {
    fn from(c: ControlPointList) -> Self {
        c.flags
    }
}

impl ControlPointList {
    pub fn new(flags: Vec<u8>) -> Result<Self> {
        if flags.is_empty() {
            return Err(Error::InvalidInput("control point list is empty".into()));
        }
        if let Some(t) = flags.iter().position(|&f| f > 1) {
            return Err(Error::InvalidInput(format!(
                "control flag {} at frame {t} is not 0 or 1",
                flags[t]
            )));
        }
        if flags[0] != 1 {
            return Err(Error::InvalidInput("first control flag must be 1".into()));
        }
        Ok(ControlPointList { flags })
    }

    /// A single sub-clip covering all `len` frames.
    pub fn single(len: usize) -> Self {
        assert!(len >= 1);
        let mut flags = vec![0; len];
        flags[0] = 1;
        ControlPointList { flags }
    }

    /// Every frame opens its own sub-clip.
    pub fn every_frame(len: usize) -> Self {
        assert!(len >= 1);
        ControlPointList { flags: vec![1; len] }
    }

    pub fn flags(&self) -> &[u8] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 1).count()
    }

    pub fn keyframes(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().enumerate().filter(|(_, &f)| f == 1).map(|(t, _)| t)
    }

    pub fn subclips(&self) -> Vec<SubClip> {
        let starts: Vec<usize> = self.keyframes().collect();
        starts
            .iter()
            .enumerate()
            .map(|(i, &start)| {
                let end = starts.get(i + 1).map_or(self.flags.len() - 1, |&n| n - 1);
                SubClip {
                    start,
                    end,
                    keyframe_index: start,
                }
            })
            .collect()
    }
}

/// A maximal run of frames sharing one keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubClip {
    pub start: usize,
    pub end: usize,
    pub keyframe_index: usize,
}

impl SubClip {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Validates raw flags and partitions `0..T` into sub-clips.
pub fn split_into_subclips(flags: &[u8]) -> Result<Vec<SubClip>> {
    Ok(ControlPointList::new(flags.to_vec())?.subclips())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sc(start: usize, end: usize) -> SubClip {
        SubClip {
            start,
            end,
            keyframe_index: start,
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_into_subclips(&[1, 0, 0, 1, 0]).unwrap(), vec![sc(0, 2), sc(3, 4)]);
        assert_eq!(
            split_into_subclips(&[1, 1, 1]).unwrap(),
            vec![sc(0, 0), sc(1, 1), sc(2, 2)]
        );
        assert_eq!(split_into_subclips(&[1, 0, 0, 0]).unwrap(), vec![sc(0, 3)]);
    }

    #[test]
    fn split_rejects_invalid() {
        assert!(split_into_subclips(&[0, 1, 0]).is_err());
        assert!(split_into_subclips(&[]).is_err());
        assert!(split_into_subclips(&[1, 2]).is_err());
    }

    #[test]
    fn control_list_json_is_plain_array() {
        let c = ControlPointList::new(vec![1, 0, 1]).unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), "[1,0,1]");
        assert!(serde_json::from_str::<ControlPointList>("[0,1]").is_err());
    }

    #[test]
    fn clip_invariants() {
        assert!(VideoClip::new("v", vec![], 25.0).is_err());
        assert!(VideoClip::new("v", vec![Frame::filled(4, 8, [0; 3])], 25.0).is_err());
        let frames = vec![Frame::filled(8, 8, [0; 3]), Frame::filled(8, 9, [0; 3])];
        assert!(VideoClip::new("v", frames, 25.0).is_err());
        assert!(AudioFeatures::<f64>::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(AudioFeatures::<f64>::new(1, 0, vec![]).is_err());
    }

    #[test]
    fn palette_must_cover_ids() {
        let m = LabelMap::new(1, 2, vec![0, 3]).unwrap();
        let palette: BTreeMap<_, _> = [(1, "dog".to_string())].into();
        assert!(MaskSequence::new(vec![m.clone()], Some(palette)).is_err());
        assert!(MaskSequence::new(vec![m], None).is_ok());
    }

    proptest! {
        #[test]
        fn subclips_partition_frames(mut flags in proptest::collection::vec(0u8..2, 1..40)) {
            flags[0] = 1;
            let subs = split_into_subclips(&flags).unwrap();
            prop_assert_eq!(subs.len(), flags.iter().filter(|&&f| f == 1).count());
            let covered: Vec<usize> = subs.iter().flat_map(|s| s.frames()).collect();
            prop_assert_eq!(covered, (0..flags.len()).collect::<Vec<_>>());
            for s in &subs {
                prop_assert_eq!(flags[s.start], 1);
                prop_assert_eq!(s.keyframe_index, s.start);
            }
        }
    }
}
