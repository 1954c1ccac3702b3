//! Frame sampling per pathway, training crops and the multi-clip,
//! multi-crop inference protocol.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A dense `[T, H, W, C]` frame volume with its frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    fps: u32,
}

impl VideoClip {
    pub fn new(frames: Tensor, fps: u32) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::Input(format!(
                "clip frames must be [T,H,W,C], got {:?}",
                frames.shape()
            )));
        }
        if !matches!(frames.shape()[3], 1 | 3) {
            return Err(Error::Input(format!(
                "clip must have 1 or 3 channels, got {}",
                frames.shape()[3]
            )));
        }
        if fps == 0 {
            return Err(Error::Input("fps must be positive".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[3]
    }
}

/// Frame indices a pathway with stride `theta` reads: 0, θ, 2θ, ... < t.
pub fn sample_indices(t: usize, theta: usize) -> Vec<usize> {
    (0..t).step_by(theta.max(1)).collect()
}

fn frame_size(frames: &Tensor) -> usize {
    frames.shape()[1..].iter().product()
}

/// Gathers whole frames of a `[T, ...]` tensor.
pub fn gather_frames(frames: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let t = frames.shape()[0];
    let fs = frame_size(frames);
    let mut data = Vec::with_capacity(indices.len() * fs);
    for &i in indices {
        if i >= t {
            return Err(Error::Input(format!("frame index {i} beyond clip of {t} frames")));
        }
        data.extend_from_slice(&frames.data()[i * fs..(i + 1) * fs]);
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data)
}

/// The frames one pathway ingests; `ceil(T/θ)` of them, anchored at frame 0.
pub fn sample_pathway(clip: &VideoClip, theta: usize) -> Result<Tensor> {
    if theta == 0 {
        return Err(Error::Input("temporal stride must be >= 1".into()));
    }
    if clip.is_empty() {
        return Err(Error::Input("empty clip".into()));
    }
    gather_frames(clip.frames(), &sample_indices(clip.len(), theta))
}

/// Spatial window `[y, y+h) x [x, x+w)` of every frame, optionally mirrored.
pub fn crop_frames(frames: &Tensor, y: usize, x: usize, h: usize, w: usize, flip: bool) -> Result<Tensor> {
    let [t, fh, fw, c] = *frames.shape() else {
        return Err(Error::Input(format!("expected [T,H,W,C], got {:?}", frames.shape())));
    };
    if y + h > fh || x + w > fw {
        return Err(Error::Input(format!(
            "crop {h}x{w} at ({y},{x}) exceeds frame {fh}x{fw}"
        )));
    }
    let mut out = Vec::with_capacity(t * h * w * c);
    for ti in 0..t {
        for yi in 0..h {
            for xi in 0..w {
                let sx = if flip { x + w - 1 - xi } else { x + xi };
                let base = ((ti * fh + y + yi) * fw + sx) * c;
                out.extend_from_slice(&frames.data()[base..base + c]);
            }
        }
    }
    Tensor::new([t, h, w, c], out)
}

/// Where a training crop landed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPlacement {
    pub y: usize,
    pub x: usize,
    pub flipped: bool,
}

/// Uniformly placed `crop x crop` window, mirrored with probability
/// `flip_prob`.
pub fn train_crop<R: Rng + ?Sized>(
    frames: &Tensor,
    crop: usize,
    flip_prob: f64,
    rng: &mut R,
) -> Result<(Tensor, CropPlacement)> {
    if frames.rank() != 4 {
        return Err(Error::Input(format!("expected [T,H,W,C], got {:?}", frames.shape())));
    }
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    if crop == 0 || h < crop || w < crop {
        return Err(Error::Input(format!("frame {h}x{w} smaller than crop {crop}")));
    }
    let y = rng.gen_range(0..=h - crop);
    let x = rng.gen_range(0..=w - crop);
    let flipped = rng.gen_bool(flip_prob.clamp(0.0, 1.0));
    let out = crop_frames(frames, y, x, crop, crop, flipped)?;
    Ok((out, CropPlacement { y, x, flipped }))
}

/// Bilinear resize (half-pixel centers, edge clamped) of `[T, H, W, C]`.
pub fn resize_bilinear(frames: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [t, h, w, c] = *frames.shape() else {
        return Err(Error::Input(format!("expected [T,H,W,C], got {:?}", frames.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Input("resize target must be positive".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(frames.clone());
    }
    let src = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let d = frames.data();
    let mut out = Vec::with_capacity(t * out_h * out_w * c);
    for ti in 0..t {
        for oy in 0..out_h {
            let (y0, y1, ly) = src(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, lx) = src(ox, out_w, w);
                for ci in 0..c {
                    let at = |y: usize, x: usize| d[((ti * h + y) * w + x) * c + ci] as f64;
                    let v = (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1))
                        + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1));
                    out.push(v as f32);
                }
            }
        }
    }
    Tensor::new([t, out_h, out_w, c], out)
}

/// Scales so the shorter spatial side equals `target`, keeping aspect ratio.
pub fn resize_shorter_side(frames: &Tensor, target: usize) -> Result<Tensor> {
    if frames.rank() != 4 {
        return Err(Error::Input(format!("expected [T,H,W,C], got {:?}", frames.shape())));
    }
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    let (nh, nw) = if h <= w {
        (
            target,
            ((w as f64 * target as f64 / h as f64).round() as usize).max(target),
        )
    } else {
        (
            ((h as f64 * target as f64 / w as f64).round() as usize).max(target),
            target,
        )
    };
    resize_bilinear(frames, nh, nw)
}

/// Start offsets of `n` windows of `len` frames spread uniformly over `total`
/// frames (each window centered in its segment).
pub fn temporal_starts(total: usize, len: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Input("need at least one clip".into()));
    }
    if total < len || len == 0 {
        return Err(Error::Input(format!(
            "video of {total} frames shorter than window of {len}"
        )));
    }
    let slack = total - len;
    Ok((0..n).map(|i| slack * (2 * i + 1) / (2 * n)).collect())
}

/// Offsets of the three crops along a side of length `long`: both ends and
/// the center.
pub fn crop_offsets(long: usize, crop: usize) -> [usize; 3] {
    let slack = long.saturating_sub(crop);
    [0, slack / 2, slack]
}

/// Temporal windows times spatial crops for fully-covering inference:
/// `n_clips` windows of `clip_len` frames, shorter side scaled to `crop`,
/// then three `crop x crop` views along the longer side. Returns
/// `n_clips * 3` clips, window-major.
pub fn inference_clips(video: &VideoClip, clip_len: usize, n_clips: usize, crop: usize) -> Result<Vec<VideoClip>> {
    if crop == 0 {
        return Err(Error::Input("crop must be positive".into()));
    }
    let starts = temporal_starts(video.len(), clip_len, n_clips)?;
    let mut out = Vec::with_capacity(n_clips * 3);
    for s in starts {
        let idx: Vec<usize> = (s..s + clip_len).collect();
        let window = resize_shorter_side(&gather_frames(video.frames(), &idx)?, crop)?;
        let (h, w) = (window.shape()[1], window.shape()[2]);
        for off in crop_offsets(h.max(w), crop) {
            let (y, x) = if w >= h { (0, off) } else { (off, 0) };
            out.push(VideoClip::new(
                crop_frames(&window, y, x, crop, crop, false)?,
                video.fps(),
            )?);
        }
    }
    Ok(out)
}

/// `[T, H, W, C]` frames to a batch-of-one `[1, C, T, H, W]` network input.
pub fn to_network_input(frames: &Tensor) -> Result<Tensor> {
    let p = frames.permute(&[3, 0, 1, 2])?;
    let mut shape = vec![1];
    shape.extend_from_slice(p.shape());
    p.reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numbered_clip(t: usize, h: usize, w: usize) -> VideoClip {
        VideoClip::new(Tensor::from_fn([t, h, w, 1], |i| (i / (h * w)) as f32), 30).unwrap()
    }

    #[test]
    fn anchored_cases_at_30fps() {
        let clip = numbered_clip(30, 2, 2);
        let single = sample_pathway(&clip, 30).unwrap();
        assert_eq!(single.shape()[0], 1);
        assert_eq!(single.data()[0], 0.0);
        assert_eq!(sample_indices(30, 2), (0..30).step_by(2).collect::<Vec<_>>());
        assert_eq!(sample_pathway(&clip, 2).unwrap().shape()[0], 15);
        assert_eq!(sample_indices(30, 16), vec![0, 16]);
    }

    #[test]
    fn stride_one_is_identity_and_zero_rejected() {
        let clip = numbered_clip(7, 3, 3);
        assert_eq!(&sample_pathway(&clip, 1).unwrap(), clip.frames());
        assert!(sample_pathway(&clip, 0).is_err());
    }

    #[test]
    fn crop_of_exact_size_is_identity_modulo_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::from_fn([2, 4, 4, 1], |i| i as f32);
        for _ in 0..8 {
            let (c, p) = train_crop(&f, 4, 0.5, &mut rng).unwrap();
            let expected = crop_frames(&f, 0, 0, 4, 4, p.flipped).unwrap();
            assert_eq!((p.y, p.x), (0, 0));
            assert_eq!(c, expected);
        }
        assert!(train_crop(&f, 5, 0.5, &mut rng).is_err());
    }

    #[test]
    fn crop_replays_under_seed() {
        let f = Tensor::from_fn([1, 64, 64, 1], |i| i as f32);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            train_crop(&f, 32, 0.5, &mut rng).unwrap()
        };
        let (a, pa) = run(9);
        let (b, pb) = run(9);
        assert_eq!(pa, pb);
        assert_eq!(a, b);
        // replay oracle: the placement is the first three draws of the stream
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = rng.gen_range(0..=32usize);
        let x = rng.gen_range(0..=32usize);
        let flip = rng.gen_bool(0.5);
        assert_eq!(pa, CropPlacement { y, x, flipped: flip });
        assert_eq!(a, crop_frames(&f, y, x, 32, 32, flip).unwrap());
    }

    #[test]
    fn resize_cases() {
        let f = Tensor::from_fn([1, 4, 6, 1], |i| i as f32);
        assert_eq!(resize_shorter_side(&f, 4).unwrap(), f);
        let c = Tensor::full([1, 8, 8, 3], 0.7);
        let r = resize_shorter_side(&c, 4).unwrap();
        assert_eq!(r.shape(), &[1, 4, 4, 3]);
        assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        // checkerboard: every half-pixel sample sits between two cells of
        // opposite colour in both axes, so every output is the 2x2 mean
        let cb = Tensor::from_fn([1, 4, 4, 1], |i| ((i / 4 + i % 4) % 2) as f32);
        let r = resize_bilinear(&cb, 2, 2).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.5).abs() < 1e-6), "{:?}", r.data());
        let ramp = Tensor::from_fn([1, 4, 4, 1], |i| (i % 4) as f32 * 10.0 + (i / 4) as f32);
        let r = resize_bilinear(&ramp, 2, 2).unwrap();
        // block means of a bilinear ramp
        assert_eq!(r.data().len(), 4);
        for (v, e) in r.data().iter().zip([5.5f32, 25.5, 7.5, 27.5]) {
            assert!((v - e).abs() < 1e-5, "{v} vs {e}");
        }
    }

    #[test]
    fn three_crops_on_landscape_video() {
        assert_eq!(crop_offsets(512, 256), [0, 128, 256]);
        let video = VideoClip::new(Tensor::from_fn([4, 4, 8, 1], |i| (i % 8) as f32), 30).unwrap();
        let clips = inference_clips(&video, 4, 1, 4).unwrap();
        assert_eq!(clips.len(), 3);
        // first column of each crop reveals its x offset
        let first_cols: Vec<f32> = clips.iter().map(|c| c.frames().data()[0]).collect();
        assert_eq!(first_cols, vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn crop_sized_square_gives_identical_crops() {
        let clip = numbered_clip(8, 6, 6);
        let clips = inference_clips(&clip, 8, 1, 6).unwrap();
        assert_eq!(clips.len(), 3);
        assert!(clips.iter().all(|c| c == &clip));
        let many = inference_clips(&numbered_clip(40, 6, 6), 8, 10, 6).unwrap();
        assert_eq!(many.len(), 30);
        assert!(inference_clips(&clip, 9, 1, 6).is_err());
    }

    #[test]
    fn temporal_starts_are_uniform() {
        assert_eq!(temporal_starts(8, 8, 1).unwrap(), vec![0]);
        assert_eq!(temporal_starts(28, 8, 2).unwrap(), vec![5, 15]);
        let s = temporal_starts(100, 10, 10).unwrap();
        assert!(s.windows(2).all(|w| w[1] - w[0] == 9));
    }
}
