//! On-disk dataset layout.
//!
//! ```text
//! root/<video_id>/frames/00000.ppm      binary PPM (P6), 8-bit RGB
//! root/<video_id>/masks/00000.pgm       plain PGM (P2), maxval = largest object id (at least 1)
//! root/<video_id>/audio.csv             T rows of D comma-separated decimals, no header
//! root/<video_id>/control_points.json   {"video_id", "control_points", "categories"} (optional)
//! ```
//!
//! Prediction roots use the same layout but carry only `masks/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{AudioFeatures, ControlPointList, Frame, LabelMap, MaskSequence, ObjectId, VideoClip};

pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
pub const AUDIO_FILE: &str = "audio.csv";
pub const ANNOTATION_FILE: &str = "control_points.json";

/// Nominal frame rate attached to loaded clips.
pub const DEFAULT_FRAME_RATE: f64 = 1.0;

/// Contents of `control_points.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub video_id: String,
    pub control_points: ControlPointList,
    pub categories: Vec<String>,
}

/// Everything stored for one video.
#[derive(Debug, Clone)]
pub struct Sample<S> {
    pub clip: VideoClip,
    pub audio: AudioFeatures<S>,
    pub masks: Option<MaskSequence>,
}

pub fn video_dir(root: &Path, video_id: &str) -> PathBuf {
    root.join(video_id)
}

fn indexed_name(t: usize, ext: &str) -> String {
    format!("{t:05}.{ext}")
}

/// Video ids under `root` (subdirectories), sorted.
pub fn list_videos(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            ids.push(name);
        }
    }
    ids.sort();
    Ok(ids)
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// netpbm

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> HeaderReader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of file"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| {
            Error::Parse {
                file: self.file.to_path_buf(),
                offset: start,
                message: "non-ASCII token".into(),
            }
        })
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        let tok = self.token()?;
        tok.parse::<usize>().map_err(|_| Error::Parse {
            file: self.file.to_path_buf(),
            offset: start,
            message: format!("expected {what}, found {tok:?}"),
        })
    }
}

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.data);
    out
}

pub fn decode_ppm(bytes: &[u8], file: &Path) -> Result<Frame> {
    let mut r = HeaderReader { bytes, pos: 0, file };
    let magic = r.token()?;
    if magic != "P6" {
        return Err(Error::Parse {
            file: file.to_path_buf(),
            offset: 0,
            message: format!("expected magic P6, found {magic:?}"),
        });
    }
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            file: file.to_path_buf(),
            offset: maxval_at,
            message: format!("only 8-bit PPM is supported, maxval {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(r.err("missing whitespace before raster"));
    }
    let start = r.pos + 1;
    let need = width * height * 3;
    if bytes.len() < start + need {
        return Err(Error::Parse {
            file: file.to_path_buf(),
            offset: bytes.len(),
            message: format!("raster truncated: need {need} bytes after offset {start}"),
        });
    }
    Frame::new(height, width, bytes[start..start + need].to_vec())
}

pub fn encode_pgm(mask: &LabelMap) -> Vec<u8> {
    let maxval = mask.max_id().max(1);
    let mut out = format!("P2\n{} {}\n{}\n", mask.width, mask.height, maxval);
    for row in mask.data.chunks(mask.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn decode_pgm(bytes: &[u8], file: &Path) -> Result<LabelMap> {
    let mut r = HeaderReader { bytes, pos: 0, file };
    let magic = r.token()?;
    if magic != "P2" {
        return Err(Error::Parse {
            file: file.to_path_buf(),
            offset: 0,
            message: format!("expected magic P2, found {magic:?}"),
        });
    }
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    let mut data = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let at = {
            r.skip_space_and_comments();
            r.pos
        };
        let v = r.number("pixel value")?;
        if v > maxval || v > ObjectId::MAX as usize {
            return Err(Error::Parse {
                file: file.to_path_buf(),
                offset: at,
                message: format!("pixel value {v} exceeds maxval {maxval}"),
            });
        }
        data.push(v as ObjectId);
    }
    LabelMap::new(height, width, data)
}

// ---------------------------------------------------------------------------
// audio.csv

pub fn encode_audio_csv<S: Scalar>(audio: &AudioFeatures<S>) -> Vec<u8> {
    let mut out = String::new();
    for t in 0..audio.frames() {
        let row: Vec<String> = audio.row(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn decode_audio_csv<S: Scalar>(bytes: &[u8], file: &Path) -> Result<AudioFeatures<S>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        file: file.to_path_buf(),
        offset: e.valid_up_to(),
        message: "audio.csv is not valid UTF-8".into(),
    })?;
    let mut rows: Vec<Vec<S>> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if content.trim().is_empty() {
            offset += line.len();
            continue;
        }
        let mut row = Vec::new();
        let mut field_at = offset;
        for field in content.split(',') {
            let v: S = field.trim().parse().map_err(|_| Error::Parse {
                file: file.to_path_buf(),
                offset: field_at,
                message: format!("invalid number {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    file: file.to_path_buf(),
                    offset: field_at,
                    message: format!("non-finite value {field:?}"),
                });
            }
            row.push(v);
            field_at += field.len() + 1;
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    file: file.to_path_buf(),
                    offset,
                    message: format!("row has {} columns, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
        offset += line.len();
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            file: file.to_path_buf(),
            offset: 0,
            message: "no rows".into(),
        });
    }
    AudioFeatures::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// sample directories

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Files `00000.<ext>, 00001.<ext>, ...` in `dir`; gaps are a consistency error.
fn indexed_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(&format!(".{ext}")) && !name.starts_with('.') {
            names.push(name);
        }
    }
    names.sort();
    for (t, name) in names.iter().enumerate() {
        if *name != indexed_name(t, ext) {
            return Err(Error::Consistency(format!(
                "{}: expected {} but found {name}",
                dir.display(),
                indexed_name(t, ext)
            )));
        }
    }
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

pub fn load_annotation(root: &Path, video_id: &str) -> Result<Option<Annotation>> {
    let path = video_dir(root, video_id).join(ANNOTATION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = read_file(&path)?;
    let ann: Annotation =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    Ok(Some(ann))
}

pub fn save_annotation(root: &Path, ann: &Annotation) -> Result<()> {
    let path = video_dir(root, &ann.video_id).join(ANNOTATION_FILE);
    let mut bytes = serde_json::to_vec_pretty(ann).map_err(|e| Error::json("annotation", e))?;
    bytes.push(b'\n');
    write_atomic(&path, &bytes)
}

/// Masks of one video, or `None` when the `masks/` directory is absent.
pub fn load_masks(root: &Path, video_id: &str) -> Result<Option<MaskSequence>> {
    let dir = video_dir(root, video_id).join(MASKS_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let files = indexed_files(&dir, "pgm")?;
    let labels = files
        .iter()
        .map(|p| decode_pgm(&read_file(p)?, p))
        .collect::<Result<Vec<_>>>()?;
    if labels.is_empty() {
        return Err(Error::Consistency(format!("{}: no masks", dir.display())));
    }
    MaskSequence::new(labels, None).map(Some)
}

/// Mask of frame `t`, or `None` when that file does not exist.
pub fn load_mask_frame(root: &Path, video_id: &str, t: usize) -> Result<Option<LabelMap>> {
    let path = video_dir(root, video_id).join(MASKS_DIR).join(indexed_name(t, "pgm"));
    if !path.is_file() {
        return Ok(None);
    }
    decode_pgm(&read_file(&path)?, &path).map(Some)
}

pub fn audio_path(root: &Path, video_id: &str) -> PathBuf {
    video_dir(root, video_id).join(AUDIO_FILE)
}

pub fn load_audio<S: Scalar>(root: &Path, video_id: &str) -> Result<AudioFeatures<S>> {
    let path = video_dir(root, video_id).join(AUDIO_FILE);
    decode_audio_csv(&read_file(&path)?, &path)
}

pub fn load_sample<S: Scalar>(root: &Path, video_id: &str) -> Result<Sample<S>> {
    let dir = video_dir(root, video_id);
    let frame_files = indexed_files(&dir.join(FRAMES_DIR), "ppm")?;
    let frames = frame_files
        .iter()
        .map(|p| decode_ppm(&read_file(p)?, p))
        .collect::<Result<Vec<_>>>()?;
    let clip = VideoClip::new(video_id, frames, DEFAULT_FRAME_RATE)?;
    let audio = load_audio::<S>(root, video_id)?;
    if audio.frames() != clip.len() {
        return Err(Error::Consistency(format!(
            "{video_id}: audio.csv has {} rows but there are {} frames",
            audio.frames(),
            clip.len()
        )));
    }
    let masks = load_masks(root, video_id)?;
    if let Some(m) = &masks {
        if m.len() != clip.len() {
            return Err(Error::Consistency(format!(
                "{video_id}: {} masks for {} frames",
                m.len(),
                clip.len()
            )));
        }
        if m.height() != clip.height() || m.width() != clip.width() {
            return Err(Error::Consistency(format!(
                "{video_id}: masks are {}x{} but frames are {}x{}",
                m.height(),
                m.width(),
                clip.height(),
                clip.width()
            )));
        }
    }
    Ok(Sample { clip, audio, masks })
}

/// Replaces `root/<video_id>/masks/` with `masks`.
///
/// The new directory is written in full under a temporary name and swapped in
/// with renames, so readers never observe a partially written mask set.
pub fn save_mask_sequence(masks: &MaskSequence, root: &Path, video_id: &str) -> Result<()> {
    if masks.is_empty() {
        return Err(Error::InvalidInput("cannot save an empty mask sequence".into()));
    }
    let dir = video_dir(root, video_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let pid = std::process::id();
    let staging = dir.join(format!(".{MASKS_DIR}.staging{pid}"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    for (t, m) in masks.labels().iter().enumerate() {
        let path = staging.join(indexed_name(t, "pgm"));
        fs::write(&path, encode_pgm(m)).map_err(|e| Error::io(&path, e))?;
    }
    let target = dir.join(MASKS_DIR);
    let retired = dir.join(format!(".{MASKS_DIR}.old{pid}"));
    if target.exists() {
        fs::rename(&target, &retired).map_err(|e| Error::io(&target, e))?;
    }
    fs::rename(&staging, &target).map_err(|e| Error::io(&target, e))?;
    if retired.exists() {
        fs::remove_dir_all(&retired).map_err(|e| Error::io(&retired, e))?;
    }
    Ok(())
}

/// Writes a complete sample (frames, audio, optional masks and annotation).
pub fn save_sample<S: Scalar>(
    root: &Path,
    clip: &VideoClip,
    audio: &AudioFeatures<S>,
    masks: Option<&MaskSequence>,
    annotation: Option<&Annotation>,
) -> Result<()> {
    if audio.frames() != clip.len() {
        return Err(Error::Consistency(format!(
            "{}: {} audio rows for {} frames",
            clip.video_id,
            audio.frames(),
            clip.len()
        )));
    }
    let dir = video_dir(root, &clip.video_id);
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (t, f) in clip.frames().iter().enumerate() {
        write_atomic(&frames_dir.join(indexed_name(t, "ppm")), &encode_ppm(f))?;
    }
    write_atomic(&dir.join(AUDIO_FILE), &encode_audio_csv(audio))?;
    if let Some(m) = masks {
        save_mask_sequence(m, root, &clip.video_id)?;
    }
    if let Some(a) = annotation {
        save_annotation(root, a)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_clip(t: usize) -> (VideoClip, AudioFeatures<f64>, MaskSequence) {
        let frames: Vec<Frame> = (0..t)
            .map(|i| {
                let mut f = Frame::filled(8, 10, [i as u8, 2, 3]);
                f.set_pixel(1, 2, [255, 0, 10]);
                f
            })
            .collect();
        let clip = VideoClip::new("vid", frames, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..t).map(|i| vec![i as f64 * 0.1, -1.5e-7, 3.0]).collect();
        let audio = AudioFeatures::from_rows(&rows).unwrap();
        let masks = MaskSequence::new(
            (0..t)
                .map(|i| {
                    let mut data = vec![0; 80];
                    data[i] = 2;
                    data[40] = 1;
                    LabelMap::new(8, 10, data).unwrap()
                })
                .collect(),
            None,
        )
        .unwrap();
        (clip, audio, masks)
    }

    #[test]
    fn sample_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (clip, audio, masks) = sample_clip(5);
        save_sample(dir.path(), &clip, &audio, Some(&masks), None).unwrap();
        let s: Sample<f64> = load_sample(dir.path(), "vid").unwrap();
        assert_eq!(s.clip, clip);
        assert_eq!(s.audio, audio);
        assert_eq!(s.masks.unwrap(), masks);
    }

    #[test]
    fn missing_masks_are_absent() {
        let dir = tempfile::tempdir().unwrap();
        let (clip, audio, _) = sample_clip(3);
        save_sample(dir.path(), &clip, &audio, None, None).unwrap();
        let s: Sample<f64> = load_sample(dir.path(), "vid").unwrap();
        assert!(s.masks.is_none());
    }

    #[test]
    fn audio_row_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (clip, audio, masks) = sample_clip(5);
        save_sample(dir.path(), &clip, &audio, Some(&masks), None).unwrap();
        let short = audio.slice(0, 3);
        write_atomic(&dir.path().join("vid").join(AUDIO_FILE), &encode_audio_csv(&short)).unwrap();
        let err = load_sample::<f64>(dir.path(), "vid").unwrap_err();
        assert!(matches!(err, Error::Consistency(_)), "{err}");
    }

    #[test]
    fn malformed_header_names_file_and_offset() {
        let path = Path::new("x/00000.ppm");
        let err = decode_ppm(b"P6\n10 abc\n255\n", path).unwrap_err();
        match err {
            Error::Parse { file, offset, .. } => {
                assert_eq!(file, path);
                assert_eq!(offset, 6);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(decode_pgm(b"P5\n1 1\n1\n0\n", path), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(
            decode_audio_csv::<f64>(b"1.0,2.0\n1.0,x\n", path),
            Err(Error::Parse { offset: 12, .. })
        ));
    }

    #[test]
    fn pgm_header_uses_max_id() {
        let m = LabelMap::new(1, 3, vec![0, 7, 2]).unwrap();
        let bytes = encode_pgm(&m);
        assert!(bytes.starts_with(b"P2\n3 1\n7\n0 7 2\n"));
        let empty = LabelMap::background(1, 2);
        assert!(encode_pgm(&empty).starts_with(b"P2\n2 1\n1\n"));
    }

    #[test]
    fn save_replaces_existing_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let (_, _, masks) = sample_clip(5);
        save_mask_sequence(&masks, dir.path(), "p").unwrap();
        let (_, _, shorter) = sample_clip(2);
        save_mask_sequence(&shorter, dir.path(), "p").unwrap();
        assert_eq!(load_masks(dir.path(), "p").unwrap().unwrap(), shorter);
        let leftovers: Vec<_> = fs::read_dir(dir.path().join("p"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(leftovers, vec!["masks".to_string()]);
    }

    #[test]
    fn empty_mask_sequence_rejected() {
        assert!(MaskSequence::new(vec![], None).is_err());
    }

    #[test]
    fn list_videos_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["b", "a", ".hidden"] {
            fs::create_dir_all(dir.path().join(id)).unwrap();
        }
        fs::write(dir.path().join("file.txt"), b"x").unwrap();
        assert_eq!(list_videos(dir.path()).unwrap(), vec!["a", "b"]);
    }
}
