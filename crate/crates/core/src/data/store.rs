//! On-disk clip layout: `frame_%03d.png`, `label_%03d.png`, `flow_%03d.flo`
//! (`M_{t→t+1}`), `bflow_%03d.flo` (`M_{t+1→t}`) and `manifest.toml`.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, VideoClip};
use crate::error::{Error, Result};
use crate::flowwarp::{read_flo, write_flo};
use crate::io::{read_to_string, write_atomic};
use crate::metrics::{LabelMap, IGNORE};
use crate::tensor::Image;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub id: String,
    #[serde(with = "crate::io::u64_string")]
    pub seed: u64,
    pub classes: usize,
    pub length: usize,
    pub width: usize,
    pub height: usize,
    pub labeled: Vec<usize>,
}

/// A labelled frame read without touching the rest of the clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub index: usize,
    pub frame: Image,
    pub label: LabelMap,
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:03}.png"))
}

fn label_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("label_{t:03}.png"))
}

fn flow_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("flow_{t:03}.flo"))
}

fn bflow_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("bflow_{t:03}.flo"))
}

fn encode_png(img: image::DynamicImage, path: &Path) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &buf.into_inner())
}

fn write_frame(path: &Path, frame: &Image) -> Result<()> {
    if frame.channels() != 3 {
        return Err(Error::contract("frames must have three channels"));
    }
    let (h, w) = (frame.height(), frame.width());
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (frame.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    encode_png(img.into(), path)
}

fn decode_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_frame(path: &Path, height: usize, width: usize) -> Result<Image> {
    let img = decode_png(path)?.into_rgb8();
    if img.width() as usize != width || img.height() as usize != height {
        return Err(Error::format(
            path,
            "frame size disagrees with the manifest",
        ));
    }
    Ok(Image::from_fn(3, height, width, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(
        label.width() as u32,
        label.height() as u32,
        label.ids().to_vec(),
    )
    .expect("buffer matches dimensions");
    encode_png(img.into(), path)
}

fn read_label(path: &Path, height: usize, width: usize, classes: usize) -> Result<LabelMap> {
    let img = decode_png(path)?.into_luma8();
    if img.width() as usize != width || img.height() as usize != height {
        return Err(Error::format(
            path,
            "label size disagrees with the manifest",
        ));
    }
    let ids = img.into_raw();
    if let Some(bad) = ids.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
        return Err(Error::validation(format!(
            "{}: label id {bad} exceeds the manifest class count {classes}",
            path.display()
        )));
    }
    LabelMap::new(height, width, ids)
}

pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    clip.validate()?;
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (t, frame) in clip.frames.iter().enumerate() {
        write_frame(&frame_path(dir, t), frame)?;
    }
    for (t, label) in &clip.labels {
        write_label(&label_path(dir, *t), label)?;
    }
    for (t, flow) in clip.flows.iter().enumerate() {
        write_flo(&flow_path(dir, t), flow)?;
    }
    for (t, flow) in clip.backward_flows.iter().enumerate() {
        write_flo(&bflow_path(dir, t), flow)?;
    }
    let manifest = ClipManifest {
        id: clip.id.clone(),
        seed: clip.seed,
        classes: clip.classes,
        length: clip.len(),
        width: clip.width(),
        height: clip.height(),
        labeled: clip.labeled_indices(),
    };
    let text = toml::to_string(&manifest).expect("manifest serialises");
    write_atomic(&dir.join(MANIFEST), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<ClipManifest> {
    let path = dir.join(MANIFEST);
    let text = read_to_string(&path)?;
    let m: ClipManifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.message()))?;
    if m.length < 1 || m.labeled.iter().any(|&i| i >= m.length) {
        return Err(Error::validation(format!(
            "{}: labelled indices outside the clip",
            path.display()
        )));
    }
    if m.classes < 2 || m.classes > 255 {
        return Err(Error::validation(format!(
            "{}: bad class count",
            path.display()
        )));
    }
    Ok(m)
}

pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let m = read_manifest(dir)?;
    let (h, w) = (m.height, m.width);
    let frames = (0..m.length)
        .map(|t| read_frame(&frame_path(dir, t), h, w))
        .collect::<Result<Vec<_>>>()?;
    let labels = m
        .labeled
        .iter()
        .map(|&t| Ok((t, read_label(&label_path(dir, t), h, w, m.classes)?)))
        .collect::<Result<Vec<_>>>()?;
    let read_flows = |path: fn(&Path, usize) -> PathBuf| {
        (0..m.length - 1)
            .map(|t| {
                let p = path(dir, t);
                let f = read_flo(&p)?;
                if f.height() != h || f.width() != w {
                    return Err(Error::format(&p, "flow size disagrees with the manifest"));
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()
    };
    let clip = VideoClip {
        id: m.id.clone(),
        seed: m.seed,
        classes: m.classes,
        frames,
        labels,
        flows: read_flows(flow_path)?,
        backward_flows: read_flows(bflow_path)?,
    };
    clip.validate()?;
    Ok(clip)
}

/// Reads only the labelled frames of a clip directory.
pub fn load_labeled_frames(dir: &Path) -> Result<(ClipManifest, Vec<LabeledFrame>)> {
    let m = read_manifest(dir)?;
    let frames = m
        .labeled
        .iter()
        .map(|&t| {
            Ok(LabeledFrame {
                index: t,
                frame: read_frame(&frame_path(dir, t), m.height, m.width)?,
                label: read_label(&label_path(dir, t), m.height, m.width, m.classes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, frames))
}

/// Clip directories of a split, sorted by name.
pub fn clip_dirs(root: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let dir = root.join(split);
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(Error::io(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<VideoClip>> {
    clip_dirs(root, split)?
        .iter()
        .map(|d| load_clip(d))
        .collect()
}

pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for (split, clips) in [("train", &ds.train), ("val", &ds.val)] {
        for clip in clips {
            save_clip(clip, &root.join(split).join(&clip.id))?;
        }
    }
    Ok(())
}

/// SHA-256 over every file below `root`, visited in sorted path order.
pub fn dataset_digest(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
            let path = entry.map_err(Error::io(dir))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(std::fs::read(&f).map_err(Error::io(&f))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DataConfig};

    fn small() -> Dataset {
        let cfg = DataConfig {
            width: 16,
            height: 12,
            min_size: 3,
            max_size: 6,
            train_clips: 2,
            val_clips: 1,
            clip_length: 5,
            ..DataConfig::default()
        };
        generate_dataset(&cfg, 4).unwrap()
    }

    #[test]
    fn clip_round_trip_is_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_clip(&ds.train[0], dir.path()).unwrap();
        let back = load_clip(dir.path()).unwrap();
        assert_eq!(back, ds.train[0]);
    }

    #[test]
    fn truncated_flow_names_the_file() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_clip(&ds.train[0], dir.path()).unwrap();
        let p = flow_path(dir.path(), 1);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_clip(dir.path()).unwrap_err();
        assert!(err.to_string().contains("flow_001.flo"), "{err}");
    }

    #[test]
    fn class_count_mismatch_is_a_validation_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_clip(&ds.train[0], dir.path()).unwrap();
        let clip = &ds.train[0];
        let (t, label) = &clip.labels[0];
        let mut corrupt = label.clone();
        corrupt.ids_mut()[0] = 9;
        write_label(&label_path(dir.path(), *t), &corrupt).unwrap();
        assert!(matches!(load_clip(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn dataset_round_trip_and_digest() {
        let ds = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&ds, a.path()).unwrap();
        save_dataset(&ds, b.path()).unwrap();
        assert_eq!(
            dataset_digest(a.path()).unwrap(),
            dataset_digest(b.path()).unwrap()
        );
        assert_eq!(load_split(a.path(), "train").unwrap(), ds.train);
        assert_eq!(load_split(a.path(), "val").unwrap(), ds.val);
        let (m, frames) = load_labeled_frames(&a.path().join("val").join("val_0000")).unwrap();
        assert_eq!(m.labeled, vec![2]);
        assert_eq!(frames[0].frame, ds.val[0].frames[2]);
    }
}
