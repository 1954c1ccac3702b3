//! Synthetic moving-square videos. The class is the direction of motion and
//! the starting position is drawn from the same distribution for every
//! class, so any single frame carries no label information.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{Dataset, DetectionDataset, DetectionSample, Sample};
use crate::detector::{BBox, BoxAnnotation};
use crate::error::{Error, Result};
use crate::sampler::VideoClip;
use crate::tensor::Tensor;

/// Motion directions in label order.
pub const DIRECTIONS: [(&str, isize, isize); 4] = [("up", -1, 0), ("down", 1, 0), ("left", 0, -1), ("right", 0, 1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// 2 to 4 classes, taken from `DIRECTIONS` in order.
    pub num_classes: usize,
    pub frames: usize,
    /// Frames are `size x size`.
    pub size: usize,
    pub object_size: usize,
    /// Pixels per frame; positions are rounded to whole pixels.
    pub speed: f64,
    pub noise_std: f32,
    pub fps: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            frames: 8,
            size: 32,
            object_size: 6,
            speed: 1.0,
            noise_std: 0.1,
            fps: 30,
        }
    }
}

impl SyntheticSpec {
    /// Whole-pixel offset after `t` frames.
    fn offset(&self, t: usize) -> usize {
        (self.speed * t as f64).round() as usize
    }

    /// Extent the square travels over the clip.
    pub fn travel(&self) -> usize {
        self.offset(self.frames.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "{} motion classes; 2 to 4 supported",
                self.num_classes
            )));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return Err(Error::Config(format!("speed {} must be finite and >= 0", self.speed)));
        }
        if self.frames < 2 || self.travel() == 0 {
            return Err(Error::Config(
                "a static square (speed 0 or a single frame) makes the classes indistinguishable".into(),
            ));
        }
        if self.object_size == 0 || self.fps == 0 {
            return Err(Error::Config("object size and fps must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std {} must be >= 0", self.noise_std)));
        }
        if self.object_size + 2 * self.travel() > self.size {
            return Err(Error::Config(format!(
                "a {}px square moving {}px in any direction leaves a {}px frame",
                self.object_size,
                self.travel(),
                self.size
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        DIRECTIONS[..self.num_classes].iter().map(|d| d.0.to_string()).collect()
    }

    /// Label permutation under a horizontal mirror: left and right swap.
    pub fn flip_map(&self) -> Vec<usize> {
        (0..self.num_classes)
            .map(|c| match c {
                2 if self.num_classes == 4 => 3,
                3 => 2,
                c => c,
            })
            .collect()
    }

    /// Top-left corner range `[m, size - object - m]` on both axes, where
    /// `m` is the travel, so every direction stays inside the frame.
    fn start<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let m = self.travel();
        let hi = self.size - self.object_size - m;
        (rng.gen_range(m..=hi), rng.gen_range(m..=hi))
    }
}

/// Square corner at frame `t` moving in direction `class`.
fn corner(spec: &SyntheticSpec, start: (usize, usize), class: usize, t: usize) -> (usize, usize) {
    let (_, dy, dx) = DIRECTIONS[class];
    let step = spec.offset(t) as isize;
    (
        (start.0 as isize + dy * step) as usize,
        (start.1 as isize + dx * step) as usize,
    )
}

/// Renders squares `(start, class)` plus Gaussian noise as `[T, size, size, 1]`.
fn render<R: Rng + ?Sized>(spec: &SyntheticSpec, objects: &[((usize, usize), usize)], rng: &mut R) -> Result<Tensor> {
    let (t, s) = (spec.frames, spec.size);
    let mut data = vec![0f32; t * s * s];
    for &(start, class) in objects {
        for f in 0..t {
            let (y0, x0) = corner(spec, start, class, f);
            for y in y0..y0 + spec.object_size {
                for x in x0..x0 + spec.object_size {
                    data[(f * s + y) * s + x] = 1.0;
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    Tensor::new([t, s, s, 1], data)
}

/// `n` labelled clips with classes in balanced round-robin order.
pub fn gen_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, n: usize, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.num_classes;
        let start = spec.start(rng);
        let frames = render(spec, &[(start, label)], rng)?;
        samples.push(Sample {
            clip: VideoClip::new(frames, spec.fps)?,
            label,
        });
    }
    Ok(Dataset {
        samples,
        num_classes: spec.num_classes,
        class_names: spec.class_names(),
        flip_map: Some(spec.flip_map()),
    })
}

/// Clips with `objects` independently moving squares each; every square is
/// annotated with the box covering its whole trajectory and its direction.
pub fn gen_synthetic_detection<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    n: usize,
    objects: usize,
    rng: &mut R,
) -> Result<DetectionDataset> {
    spec.validate()?;
    if objects == 0 {
        return Err(Error::Config("need at least one object per clip".into()));
    }
    let size = spec.size as f64;
    let keyframe_time = (spec.frames / 2) as f64 / spec.fps as f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let video_id = format!("clip{i:05}");
        let placed: Vec<((usize, usize), usize)> = (0..objects)
            .map(|_| (spec.start(rng), rng.gen_range(0..spec.num_classes)))
            .collect();
        let frames = render(spec, &placed, rng)?;
        let boxes = placed
            .iter()
            .map(|&(start, class)| {
                let (a, b) = (
                    corner(spec, start, class, 0),
                    corner(spec, start, class, spec.frames - 1),
                );
                let (y1, x1) = (a.0.min(b.0) as f64, a.1.min(b.1) as f64);
                let (y2, x2) = (
                    (a.0.max(b.0) + spec.object_size) as f64,
                    (a.1.max(b.1) + spec.object_size) as f64,
                );
                Ok(BoxAnnotation {
                    video_id: video_id.clone(),
                    bbox: BBox::new(x1 / size, y1 / size, x2 / size, y2 / size)?,
                    class_ids: vec![class],
                    keyframe_time,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(DetectionSample {
            video_id,
            clip: VideoClip::new(frames, spec.fps)?,
            boxes,
        });
    }
    Ok(DetectionDataset {
        samples,
        num_classes: spec.num_classes,
        class_names: spec.class_names(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn static_or_oversized_specs_are_rejected() {
        let still = SyntheticSpec {
            speed: 0.0,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(still.validate(), Err(Error::Config(_))));
        let cramped = SyntheticSpec {
            size: 16,
            ..SyntheticSpec::default()
        };
        assert!(cramped.validate().is_err());
        assert!(SyntheticSpec::default().validate().is_ok());
    }

    #[test]
    fn fractional_speed_fits_long_clips() {
        let spec = SyntheticSpec {
            frames: 48,
            object_size: 4,
            speed: 0.25,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        assert_eq!(spec.travel(), 12);
        let data = gen_synthetic(&spec, 8, &mut rng(4)).unwrap();
        for s in &data.samples {
            let lit = |f: usize| {
                s.clip.frames().data()[f * 1024..(f + 1) * 1024]
                    .iter()
                    .filter(|&&v| v > 0.5)
                    .count()
            };
            assert!((0..48).all(|f| lit(f) == 16));
        }
    }

    #[test]
    fn square_moves_in_its_direction_and_stays_inside() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec, 40, &mut rng(1)).unwrap();
        for s in &data.samples {
            let f = s.clip.frames();
            let centroid = |t: usize| {
                let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
                for y in 0..32 {
                    for x in 0..32 {
                        let v = f.at(&[t, y, x, 0]) as f64;
                        sy += v * y as f64;
                        sx += v * x as f64;
                        n += v;
                    }
                }
                assert_eq!(n, 36.0, "square clipped");
                (sy / n, sx / n)
            };
            let (a, b) = (centroid(0), centroid(7));
            let (_, dy, dx) = DIRECTIONS[s.label];
            assert_eq!(b.0 - a.0, 7.0 * dy as f64);
            assert_eq!(b.1 - a.1, 7.0 * dx as f64);
        }
    }

    #[test]
    fn labels_are_balanced() {
        let data = gen_synthetic(&SyntheticSpec::default(), 100, &mut rng(2)).unwrap();
        for c in 0..4 {
            assert_eq!(data.samples.iter().filter(|s| s.label == c).count(), 25);
        }
        assert_eq!(data.flip_map, Some(vec![0, 1, 3, 2]));
    }

    /// Multinomial logistic regression on frame-0 pixels, trained by full
    /// batch gradient descent, then scored on fresh clips.
    #[test]
    fn first_frame_probe_is_at_chance() {
        let spec = SyntheticSpec::default();
        let (train, test) = (
            gen_synthetic(&spec, 1000, &mut rng(10)).unwrap(),
            gen_synthetic(&spec, 1000, &mut rng(11)).unwrap(),
        );
        let feats = |d: &Dataset| -> Vec<(Vec<f64>, usize)> {
            d.samples
                .iter()
                .map(|s| {
                    (
                        s.clip.frames().data()[..32 * 32].iter().map(|&v| v as f64).collect(),
                        s.label,
                    )
                })
                .collect()
        };
        let (tr, te) = (feats(&train), feats(&test));
        let (c, p) = (4usize, 32 * 32);
        let mut w = vec![0f64; c * (p + 1)];
        for _ in 0..200 {
            let mut grad = vec![0f64; w.len()];
            for (x, y) in &tr {
                let z: Vec<f64> = (0..c)
                    .map(|k| {
                        w[k * (p + 1) + p]
                            + x.iter()
                                .zip(&w[k * (p + 1)..k * (p + 1) + p])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                    })
                    .collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for k in 0..c {
                    let d = e[k] / s - (k == *y) as usize as f64;
                    for (j, xv) in x.iter().enumerate() {
                        grad[k * (p + 1) + j] += d * xv;
                    }
                    grad[k * (p + 1) + p] += d;
                }
            }
            for (wv, g) in w.iter_mut().zip(&grad) {
                *wv -= 0.05 * g / tr.len() as f64;
            }
        }
        let correct = te
            .iter()
            .filter(|(x, y)| {
                let score =
                    |k: usize| w[k * (p + 1) + p] + x.iter().zip(&w[k * (p + 1)..]).map(|(a, b)| a * b).sum::<f64>();
                (0..c).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap() == *y
            })
            .count();
        let acc = correct as f64 / te.len() as f64;
        assert!(acc <= 0.30, "frame-0 probe accuracy {acc}");
    }

    #[test]
    fn detection_boxes_cover_trajectories() {
        let spec = SyntheticSpec {
            size: 64,
            object_size: 8,
            speed: 2.0,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic_detection(&spec, 10, 2, &mut rng(3)).unwrap();
        for s in &data.samples {
            assert_eq!(s.boxes.len(), 2);
            for b in &s.boxes {
                let bb = b.bbox;
                let long = (bb.x2 - bb.x1).max(bb.y2 - bb.y1) * 64.0;
                let short = (bb.x2 - bb.x1).min(bb.y2 - bb.y1) * 64.0;
                assert_eq!((long, short), (8.0 + 14.0, 8.0));
                assert_eq!(b.video_id, s.video_id);
            }
            let f = s.clip.frames();
            for t in 0..8 {
                for y in 0..64 {
                    for x in 0..64 {
                        if f.at(&[t, y, x, 0]) > 0.0 {
                            let (cy, cx) = ((y as f64 + 0.5) / 64.0, (x as f64 + 0.5) / 64.0);
                            assert!(s
                                .boxes
                                .iter()
                                .any(|b| (b.bbox.x1..b.bbox.x2).contains(&cx) && (b.bbox.y1..b.bbox.y2).contains(&cy)));
                        }
                    }
                }
            }
        }
    }
}
