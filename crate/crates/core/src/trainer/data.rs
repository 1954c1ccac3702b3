//! Labelled clip collections and their on-disk form: a directory of
//! `.t3sr` clip tensors, a `manifest.csv` with one record per clip (or per
//! box for detection), and `meta.json` with the class names.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{BBox, BoxAnnotation, Detection};
use crate::error::{Error, Result};
use crate::sampler::VideoClip;
use crate::tensor::io;

pub const MANIFEST_CSV: &str = "manifest.csv";
pub const META_JSON: &str = "meta.json";

#[derive(Clone, Debug)]
pub struct Sample {
    pub clip: VideoClip,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Label each class takes when the clip is mirrored horizontally; `None`
    /// disables flip augmentation.
    pub flip_map: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    num_classes: usize,
    class_names: Vec<String>,
    #[serde(default)]
    flip_map: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipRecord {
    path: String,
    fps: u32,
    label: usize,
}

fn write_meta(dir: &Path, meta: &Meta) -> Result<()> {
    fs::write(dir.join(META_JSON), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

fn read_meta(dir: &Path) -> Result<Meta> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join(META_JSON))?)?;
    if meta.num_classes < 2 || meta.class_names.len() != meta.num_classes {
        return Err(Error::Format(format!(
            "{} classes with {} names",
            meta.num_classes,
            meta.class_names.len()
        )));
    }
    if let Some(m) = &meta.flip_map {
        let mut seen = m.clone();
        seen.sort_unstable();
        if seen != (0..meta.num_classes).collect::<Vec<_>>() {
            return Err(Error::Format(format!("flip map {m:?} is not a permutation")));
        }
    }
    Ok(meta)
}

/// Resolves a manifest path relative to the dataset directory, refusing
/// anything that would escape it.
fn clip_path(dir: &Path, rel: &str) -> Result<std::path::PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Format(format!("clip path {rel:?} must stay inside the dataset")));
    }
    Ok(dir.join(p))
}

fn load_clip(dir: &Path, rel: &str, fps: u32) -> Result<VideoClip> {
    VideoClip::new(io::load(clip_path(dir, rel)?)?, fps)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("clips"))?;
        let mut w = csv::Writer::from_path(dir.join(MANIFEST_CSV))?;
        for (i, s) in self.samples.iter().enumerate() {
            let path = format!("clips/{i:06}.t3sr");
            io::save(dir.join(&path), s.clip.frames())?;
            w.serialize(ClipRecord {
                path,
                fps: s.clip.fps(),
                label: s.label,
            })?;
        }
        w.flush()?;
        write_meta(
            dir,
            &Meta {
                num_classes: self.num_classes,
                class_names: self.class_names.clone(),
                flip_map: self.flip_map.clone(),
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = read_meta(dir)?;
        let mut samples = vec![];
        for rec in csv::Reader::from_path(dir.join(MANIFEST_CSV))?.deserialize() {
            let rec: ClipRecord = rec?;
            if rec.label >= meta.num_classes {
                return Err(Error::Format(format!(
                    "{}: label {} with {} classes",
                    rec.path, rec.label, meta.num_classes
                )));
            }
            samples.push(Sample {
                clip: load_clip(dir, &rec.path, rec.fps)?,
                label: rec.label,
            });
        }
        Ok(Self {
            samples,
            num_classes: meta.num_classes,
            class_names: meta.class_names,
            flip_map: meta.flip_map,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DetectionSample {
    pub video_id: String,
    pub clip: VideoClip,
    pub boxes: Vec<BoxAnnotation>,
}

#[derive(Clone, Debug)]
pub struct DetectionDataset {
    pub samples: Vec<DetectionSample>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

/// One record per (clip, box). `class_ids` is `;`-separated.
#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord {
    video_id: String,
    path: String,
    fps: u32,
    keyframe_time: f64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    class_ids: String,
}

/// One record per scored box. `scores` is `;`-separated, one per class.
#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    video_id: String,
    keyframe_time: f64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    scores: String,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn split<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(';')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

impl DetectionDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn annotations(&self) -> Vec<BoxAnnotation> {
        self.samples.iter().flat_map(|s| s.boxes.iter().cloned()).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("clips"))?;
        let mut w = csv::Writer::from_path(dir.join(MANIFEST_CSV))?;
        for s in &self.samples {
            let path = format!("clips/{}.t3sr", s.video_id);
            io::save(dir.join(&path), s.clip.frames())?;
            for b in &s.boxes {
                w.serialize(BoxRecord {
                    video_id: s.video_id.clone(),
                    path: path.clone(),
                    fps: s.clip.fps(),
                    keyframe_time: b.keyframe_time,
                    x1: b.bbox.x1,
                    y1: b.bbox.y1,
                    x2: b.bbox.x2,
                    y2: b.bbox.y2,
                    class_ids: join(&b.class_ids),
                })?;
            }
        }
        w.flush()?;
        write_meta(
            dir,
            &Meta {
                num_classes: self.num_classes,
                class_names: self.class_names.clone(),
                flip_map: None,
            },
        )
    }

    /// Clips appear in first-mention order of the manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = read_meta(dir)?;
        let mut samples: Vec<DetectionSample> = vec![];
        for rec in csv::Reader::from_path(dir.join(MANIFEST_CSV))?.deserialize() {
            let rec: BoxRecord = rec?;
            let class_ids: Vec<usize> = split(&rec.class_ids, "class id")?;
            if let Some(&bad) = class_ids.iter().find(|&&c| c >= meta.num_classes) {
                return Err(Error::Format(format!(
                    "{}: class {bad} of {}",
                    rec.video_id, meta.num_classes
                )));
            }
            let ann = BoxAnnotation {
                video_id: rec.video_id.clone(),
                bbox: BBox::new(rec.x1, rec.y1, rec.x2, rec.y2)?,
                class_ids,
                keyframe_time: rec.keyframe_time,
            };
            match samples.iter_mut().find(|s| s.video_id == rec.video_id) {
                Some(s) => s.boxes.push(ann),
                None => samples.push(DetectionSample {
                    video_id: rec.video_id.clone(),
                    clip: load_clip(dir, &rec.path, rec.fps)?,
                    boxes: vec![ann],
                }),
            }
        }
        Ok(Self {
            samples,
            num_classes: meta.num_classes,
            class_names: meta.class_names,
        })
    }
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for d in dets {
        w.serialize(DetectionRecord {
            video_id: d.video_id.clone(),
            keyframe_time: d.keyframe_time,
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            x2: d.bbox.x2,
            y2: d.bbox.y2,
            scores: join(&d.scores),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|rec| {
            let rec: DetectionRecord = rec?;
            Ok(Detection {
                video_id: rec.video_id,
                bbox: BBox::new(rec.x1, rec.y1, rec.x2, rec.y2)?,
                scores: split(&rec.scores, "score")?,
                keyframe_time: rec.keyframe_time,
            })
        })
        .collect()
}

/// Proposals in the ground-truth record layout (class ids may be empty).
pub fn read_proposals(path: impl AsRef<Path>) -> Result<Vec<BoxAnnotation>> {
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|rec| {
            let rec: BoxRecord = rec?;
            Ok(BoxAnnotation {
                video_id: rec.video_id,
                bbox: BBox::new(rec.x1, rec.y1, rec.x2, rec.y2)?,
                class_ids: split(&rec.class_ids, "class id")?,
                keyframe_time: rec.keyframe_time,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::synthetic::{gen_synthetic, gen_synthetic_detection, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn classification_round_trip() {
        let d = gen_synthetic(&SyntheticSpec::default(), 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.labels(), d.labels());
        assert_eq!(back.flip_map, d.flip_map);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert_eq!(a.clip.frames(), b.clip.frames());
        }
    }

    #[test]
    fn out_of_range_label_and_escaping_path_are_rejected() {
        let d = gen_synthetic(&SyntheticSpec::default(), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let manifest = dir.path().join(MANIFEST_CSV);
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace(",30,1", ",30,9")).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format(_))));
        fs::write(&manifest, "path,fps,label\n../x.t3sr,30,0\n").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn detection_round_trip() {
        let spec = SyntheticSpec {
            size: 64,
            object_size: 8,
            speed: 2.0,
            ..SyntheticSpec::default()
        };
        let d = gen_synthetic_detection(&spec, 3, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = DetectionDataset::load(dir.path()).unwrap();
        assert_eq!(back.annotations(), d.annotations());
        assert_eq!(back.samples.len(), 3);

        let dets: Vec<Detection> = d
            .annotations()
            .into_iter()
            .map(|a| Detection {
                video_id: a.video_id,
                bbox: a.bbox,
                scores: vec![0.25, 0.5, 0.125, 1.0],
                keyframe_time: a.keyframe_time,
            })
            .collect();
        let p = dir.path().join("dets.csv");
        write_detections(&p, &dets).unwrap();
        assert_eq!(read_detections(&p).unwrap(), dets);
        let props = read_proposals(dir.path().join(MANIFEST_CSV)).unwrap();
        assert_eq!(props, d.annotations());
    }
}
