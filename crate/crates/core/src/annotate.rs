//! Ground-truth preprocessing: control points from masks, the retrieval store,
//! the keyframe fine-tuning subset and the multi-source change (MOC) subset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{list_videos, load_annotation, load_masks, load_sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{ControlPointList, Frame, LabelMap, MaskSequence};

/// Flags frame `t` whenever its set of nonzero ids differs from frame `t - 1`.
pub fn annotate_control_points(gt: &MaskSequence) -> ControlPointList {
    let sets: Vec<_> = gt.labels().iter().map(LabelMap::object_ids).collect();
    let mut flags = vec![0u8; sets.len()];
    flags[0] = 1;
    for t in 1..sets.len() {
        if sets[t] != sets[t - 1] {
            flags[t] = 1;
        }
    }
    ControlPointList::new(flags).expect("first flag is set")
}

/// Lower-cases and trims a category name.
pub fn normalize_category(raw: &str) -> String {
    raw.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub video_id: String,
    pub control_points: ControlPointList,
}

/// Category -> annotated control-point lists of training videos.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RetrievalStore {
    entries: BTreeMap<String, Vec<StoreEntry>>,
}

impl RetrievalStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry under the normalised key, keeping entries sorted by video id.
    pub fn insert(&mut self, category: &str, entry: StoreEntry) {
        let list = self.entries.entry(normalize_category(category)).or_default();
        if list.iter().any(|e| e.video_id == entry.video_id) {
            return;
        }
        let pos = list.partition_point(|e| e.video_id < entry.video_id);
        list.insert(pos, entry);
    }

    pub fn get(&self, category: &str) -> &[StoreEntry] {
        self.entries
            .get(&normalize_category(category))
            .map_or(&[], Vec::as_slice)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("retrieval store", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<StoreEntry>> =
            serde_json::from_str(text).map_err(|e| Error::json("retrieval store", e))?;
        let mut store = RetrievalStore::new();
        for (cat, list) in raw {
            for e in list {
                store.insert(&cat, e);
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        crate::dataset::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Builds the store from every annotated video under `root`.
///
/// Control points are always re-derived from the ground-truth masks; categories
/// come from `control_points.json`. Videos without masks or categories are skipped.
pub fn build_retrieval_store(root: &Path) -> Result<RetrievalStore> {
    let mut store = RetrievalStore::new();
    for id in list_videos(root)? {
        let Some(masks) = load_masks(root, &id)? else {
            log::warn!("{id}: no ground-truth masks, skipped");
            continue;
        };
        let categories = load_annotation(root, &id)?.map(|a| a.categories).unwrap_or_default();
        if categories.is_empty() {
            log::warn!("{id}: no categories annotated, skipped");
            continue;
        }
        let control_points = annotate_control_points(&masks);
        for cat in &categories {
            store.insert(
                cat,
                StoreEntry {
                    video_id: id.clone(),
                    control_points: control_points.clone(),
                },
            );
        }
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct KeyframeItem<S> {
    pub video_id: String,
    pub frame_index: usize,
    pub frame: Frame,
    pub audio_row: Vec<S>,
    pub mask: LabelMap,
}

/// Training items restricted to control-point frames.
#[derive(Debug, Clone)]
pub struct KeyframeSubset<S> {
    pub items: Vec<KeyframeItem<S>>,
}

impl<S> KeyframeSubset<S> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn build_keyframe_subset<S: Scalar>(root: &Path) -> Result<KeyframeSubset<S>> {
    let mut items = Vec::new();
    for id in list_videos(root)? {
        let sample = load_sample::<S>(root, &id)?;
        let masks = sample
            .masks
            .ok_or_else(|| Error::InvalidInput(format!("{id}: keyframe subset needs ground-truth masks")))?;
        let control = annotate_control_points(&masks);
        for t in control.keyframes() {
            items.push(KeyframeItem {
                video_id: id.clone(),
                frame_index: t,
                frame: sample.clip.frames()[t].clone(),
                audio_row: sample.audio.row(t).to_vec(),
                mask: masks.labels()[t].clone(),
            });
        }
    }
    Ok(KeyframeSubset { items })
}

/// Control points for a video: its annotation file, else derived from its masks.
pub fn annotated_control_points(root: &Path, video_id: &str) -> Result<ControlPointList> {
    if let Some(a) = load_annotation(root, video_id)? {
        return Ok(a.control_points);
    }
    let masks = load_masks(root, video_id)?
        .ok_or_else(|| Error::InvalidInput(format!("{video_id}: no annotation and no masks")))?;
    Ok(annotate_control_points(&masks))
}

/// Ids of videos whose sounding-object set changes at least once.
pub fn filter_moc(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for id in list_videos(root)? {
        if annotated_control_points(root, &id)?.count() >= 2 {
            out.push(id);
        }
    }
    Ok(out)
}
