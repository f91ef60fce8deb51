//! Deterministic synthetic two-character (and single-character) clips with
//! exact ground truth.
//!
//! Each character is a colored disc on a black background. The disc's mouth
//! rectangle brightens with that character's assigned audio envelope, so
//! audio-visual sync is exact by construction and every derived quantity
//! (masks, assignment matrix, mouth boxes) is known. Trajectory kinds give the
//! scene dynamics the routing machinery has to cope with: static discs,
//! parallel motion, and crossing paths where the left/right order swaps
//! mid-clip. All randomness flows from explicit seeds; identical inputs
//! produce byte-identical clips.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Seed of the fixed envelope-to-feature projection shared by every clip.
/// A per-clip projection would make the audio features unlearnable.
pub const FEATURE_PROJECTION_SEED: u64 = 0xB1A5_AD10;

/// Side length of the square reference crops.
pub const REF_SIZE: usize = 16;

const ENVELOPE_SMOOTH_WINDOW: usize = 5;
/// Maximum frame-rate correlation allowed between the two characters'
/// envelopes; higher draws are rejected so the cross-sync gap invariant
/// (> 0.3) holds on every clip.
const MAX_ENVELOPE_CORR: f64 = 0.65;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene motion classes. The prompt id of a clip is the kind's discriminant,
/// so the text condition is a categorical trajectory label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Static,
    Parallel,
    Crossing,
    Single,
}

impl TrajectoryKind {
    pub fn prompt_id(self) -> usize {
        match self {
            TrajectoryKind::Static => 0,
            TrajectoryKind::Parallel => 1,
            TrajectoryKind::Crossing => 2,
            TrajectoryKind::Single => 3,
        }
    }

    pub fn n_chars(self) -> usize {
        if self == TrajectoryKind::Single {
            1
        } else {
            2
        }
    }
}

/// Fully determined scene geometry. Motion is linear in the frame index with
/// a kind-specific fixed speed, so frame 0 plus the kind determine the whole
/// trajectory (what the denoiser can actually infer from its conditions).
#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Per-character disc radius in pixels.
    pub radii: Vec<f64>,
    /// Per-character RGB color in `[0, 1]`.
    pub colors: Vec<[f32; 3]>,
    /// Pixels per frame along the kind's motion pattern.
    pub speed: f64,
    /// Per-character disc center at frame 0 as `(cx, cy)`.
    pub starts: Vec<(f64, f64)>,
}

impl TrajectorySpec {
    /// Disc center of character `i` at frame `t`.
    pub fn center(&self, i: usize, t: usize) -> (f64, f64) {
        let (cx, cy) = self.starts[i];
        let dt = self.speed * t as f64;
        match self.kind {
            TrajectoryKind::Static => (cx, cy),
            TrajectoryKind::Parallel | TrajectoryKind::Single => (cx + dt, cy),
            TrajectoryKind::Crossing => {
                if i == 0 {
                    (cx + dt, cy)
                } else {
                    (cx - dt, cy)
                }
            }
        }
    }
}

/// Clip extents: `t` video frames of `h x w` pixels, `t_a` audio steps of
/// `d_a` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub t_a: usize,
    pub d_a: usize,
}

impl ClipDims {
    pub fn toy() -> Self {
        ClipDims {
            t: 8,
            h: 32,
            w: 32,
            t_a: 32,
            d_a: 8,
        }
    }
}

/// Pixel rectangle `[x0, y0, x1, y1]` with exclusive upper bounds.
pub type MouthBox = [usize; 4];

/// One synthetic training example with exact ground truth.
#[derive(Debug, Clone)]
pub struct ClipRecord {
    /// f32 `[T, 3, H, W]` in `[0, 1]`.
    pub video: Tensor,
    /// u8 `[n, T, H, W]`, channels pixel-disjoint (visibility resolved).
    pub gt_masks: Tensor,
    /// f32 `[n, T_a, d_a]`.
    pub audio_feats: Tensor,
    /// Per audio stream, `[T_a]` in `[0, 1]`.
    pub envelopes: Vec<Vec<f32>>,
    /// Audio-to-character permutation: `a_ac[i][j] = 1` iff audio `i` drives
    /// character `j`.
    pub a_ac: Vec<Vec<u8>>,
    /// f32 `[n, 3, REF_SIZE, REF_SIZE]`, background already removed.
    pub refs: Tensor,
    /// f32 `[3, H, W]`: the scene's first frame.
    pub inpaint: Tensor,
    pub prompt_id: usize,
    /// Per character, per frame mouth rectangle.
    pub mouth_boxes: Vec<Vec<MouthBox>>,
    pub seed: u64,
    pub n_chars: usize,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Smoothed random signal in `[0, 1]`: white noise, moving average,
/// min-max normalized.
fn gen_envelope(rng: &mut ChaCha8Rng, t_a: usize) -> Vec<f32> {
    let noise: Vec<f64> = (0..t_a).map(|_| rng.gen_range(0.0..1.0)).collect();
    let half = ENVELOPE_SMOOTH_WINDOW / 2;
    let mut smooth = vec![0f64; t_a];
    for (i, out) in smooth.iter_mut().enumerate() {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(t_a);
        *out = noise[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
    }
    let min = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-9);
    smooth.iter().map(|v| (((v - min) / span) as f32).clamp(0.0, 1.0)).collect()
}

/// Project an envelope to `T_a x d_a` features: `feats[t] = env[t] * p + b`
/// with seed-derived `p` (unit norm) and `b`.
pub fn envelope_to_features(envelope: &[f32], seed: u64, d_a: usize) -> Result<Tensor> {
    if envelope.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::input("envelope values must lie in [0, 1]".to_string()));
    }
    let (p, b) = feature_projection(seed, d_a);
    let mut out = Vec::with_capacity(envelope.len() * d_a);
    for &e in envelope {
        for k in 0..d_a {
            out.push((f64::from(e) * p[k] + b[k]) as f32);
        }
    }
    Tensor::from_f32(vec![envelope.len(), d_a], out)
}

/// The fixed projection pair used by [`envelope_to_features`].
pub fn feature_projection(seed: u64, d_a: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut p: Vec<f64> = (0..d_a).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    for v in &mut p {
        *v /= norm;
    }
    let b: Vec<f64> = (0..d_a).map(|_| rng.gen_range(-0.5..0.5)).collect();
    (p, b)
}

/// Least-squares recovery of an envelope from its features (exact up to
/// rounding because the projection direction has unit norm).
pub fn reconstruct_envelope(feats: &Tensor, seed: u64) -> Result<Vec<f32>> {
    let shape = feats.shape();
    if shape.len() != 2 {
        return Err(Error::shape("expected T_a x d_a features".to_string()));
    }
    let (t_a, d_a) = (shape[0], shape[1]);
    let (p, b) = feature_projection(seed, d_a);
    let data = feats.as_f32()?;
    let mut env = Vec::with_capacity(t_a);
    for t in 0..t_a {
        let mut dot = 0f64;
        for k in 0..d_a {
            dot += (f64::from(data[t * d_a + k]) - b[k]) * p[k];
        }
        env.push(dot as f32);
    }
    Ok(env)
}

/// Mean of each length-`stride` chunk: audio-rate to frame-rate resampling.
pub fn resample_to_frames(env: &[f32], frames: usize) -> Vec<f64> {
    let stride = env.len() / frames;
    (0..frames)
        .map(|t| {
            env[t * stride..(t + 1) * stride]
                .iter()
                .map(|&v| f64::from(v))
                .sum::<f64>()
                / stride as f64
        })
        .collect()
}

/// Pearson correlation of two equal-length series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = a[i] - ma;
        let db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-12)
}

/// Mean brightness of a per-frame pixel rectangle of an `[T, 3, H, W]` video.
pub fn mouth_brightness_series(video: &Tensor, boxes: &[MouthBox]) -> Result<Vec<f64>> {
    let shape = video.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("expected T x 3 x H x W video".to_string()));
    }
    let (t_len, h, w) = (shape[0], shape[2], shape[3]);
    if boxes.len() != t_len {
        return Err(Error::shape("one mouth box per frame required".to_string()));
    }
    let data = video.as_f32()?;
    let mut series = Vec::with_capacity(t_len);
    for (t, b) in boxes.iter().enumerate() {
        let mut acc = 0f64;
        let mut count = 0f64;
        for c in 0..3 {
            for y in b[1]..b[3] {
                for x in b[0]..b[2] {
                    acc += f64::from(data[((t * 3 + c) * h + y) * w + x]);
                    count += 1.0;
                }
            }
        }
        series.push(acc / count.max(1.0));
    }
    Ok(series)
}

fn mouth_box(cx: f64, cy: f64, r: f64) -> MouthBox {
    let half_w = ((0.45 * r).floor() as usize).max(1);
    let half_h = ((0.25 * r).floor() as usize).max(1);
    let bx = cx.round() as isize;
    let by = (cy + 0.4 * r).round() as isize;
    [
        (bx - half_w as isize) as usize,
        (by - half_h as isize) as usize,
        (bx + half_w as isize + 1) as usize,
        (by + half_h as isize + 1) as usize,
    ]
}

/// Generate one clip. Identical `(spec, dims, seed)` yields byte-identical
/// output.
pub fn gen_clip(spec: &TrajectorySpec, dims: ClipDims, seed: u64) -> Result<ClipRecord> {
    let n = spec.kind.n_chars();
    if spec.radii.len() != n || spec.colors.len() != n || spec.starts.len() != n {
        return Err(Error::Parameter(format!(
            "spec arrays must have {n} entries for kind {:?}",
            spec.kind
        )));
    }
    if dims.t == 0 || dims.t_a % dims.t != 0 {
        return Err(Error::Parameter("T_a must be an integer multiple of T".to_string()));
    }
    // Discs must remain fully inside the frame for every t.
    for i in 0..n {
        for t in 0..dims.t {
            let (cx, cy) = spec.center(i, t);
            let r = spec.radii[i];
            if cx - r < 0.0 || cy - r < 0.0 || cx + r > dims.w as f64 || cy + r > dims.h as f64 {
                return Err(Error::Parameter(format!(
                    "disc {i} leaves the frame at t={t} (center {cx:.1},{cy:.1} radius {r:.1})"
                )));
            }
        }
    }

    // Envelopes: character 2's draw is rejected until the frame-rate
    // correlation with character 1 is low enough for the sync-gap invariant.
    let mut envelopes: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut env_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xE0E0));
    envelopes.push(gen_envelope(&mut env_rng, dims.t_a));
    if n == 2 {
        // Fewer than 4 frames cannot carry a meaningful correlation bound
        // (any 2-point series correlates at +-1), so the rejection only
        // applies to real-length clips.
        let first_frames = resample_to_frames(&envelopes[0], dims.t);
        let mut attempt = 0u64;
        loop {
            let mut rng2 = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xE0E1 ^ (attempt << 16)));
            let cand = gen_envelope(&mut rng2, dims.t_a);
            let corr = pearson(&first_frames, &resample_to_frames(&cand, dims.t));
            if dims.t < 4 || corr.abs() < MAX_ENVELOPE_CORR {
                envelopes.push(cand);
                break;
            }
            attempt += 1;
            if attempt > 256 {
                return Err(Error::Parameter("could not draw a decorrelated envelope".to_string()));
            }
        }
    }

    // Audio-character assignment: identity or swap for n = 2.
    let mut ac_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xAC00));
    let a_ac: Vec<Vec<u8>> = if n == 1 {
        vec![vec![1]]
    } else if ac_rng.gen_bool(0.5) {
        vec![vec![1, 0], vec![0, 1]]
    } else {
        vec![vec![0, 1], vec![1, 0]]
    };
    // env_for_char[j] = envelope of the audio stream driving character j.
    let env_for_char: Vec<&Vec<f32>> = (0..n)
        .map(|j| {
            let i = (0..n).find(|&i| a_ac[i][j] == 1).expect("permutation row");
            &envelopes[i]
        })
        .collect();
    let frame_envs: Vec<Vec<f64>> = env_for_char
        .iter()
        .map(|e| resample_to_frames(e, dims.t))
        .collect();

    // Render video + visibility-resolved masks. Character 0 occludes 1.
    let (h, w, t_len) = (dims.h, dims.w, dims.t);
    let mut video = vec![0f32; t_len * 3 * h * w];
    let mut masks = vec![0u8; n * t_len * h * w];
    let mut mouth_boxes: Vec<Vec<MouthBox>> = vec![Vec::with_capacity(t_len); n];
    for t in 0..t_len {
        for i in 0..n {
            let (cx, cy) = spec.center(i, t);
            mouth_boxes[i].push(mouth_box(cx, cy, spec.radii[i]));
        }
        for y in 0..h {
            for x in 0..w {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                // Lowest index wins occlusion.
                let owner = (0..n).find(|&i| {
                    let (cx, cy) = spec.center(i, t);
                    let (dx, dy) = (px - cx, py - cy);
                    dx * dx + dy * dy <= spec.radii[i] * spec.radii[i]
                });
                if let Some(i) = owner {
                    masks[((i * t_len + t) * h + y) * w + x] = 1;
                    let b = mouth_boxes[i][t];
                    let bright = if x >= b[0] && x < b[2] && y >= b[1] && y < b[3] {
                        0.5 + 0.5 * frame_envs[i][t] as f32
                    } else {
                        1.0
                    };
                    for c in 0..3 {
                        video[((t * 3 + c) * h + y) * w + x] = spec.colors[i][c] * bright;
                    }
                }
            }
        }
    }

    // Reference crops: the plain disc centered on a black square.
    let mut refs = vec![0f32; n * 3 * REF_SIZE * REF_SIZE];
    let ref_r = REF_SIZE as f64 * 0.35;
    let ref_c = REF_SIZE as f64 / 2.0;
    for i in 0..n {
        for y in 0..REF_SIZE {
            for x in 0..REF_SIZE {
                let (dx, dy) = (x as f64 + 0.5 - ref_c, y as f64 + 0.5 - ref_c);
                if dx * dx + dy * dy <= ref_r * ref_r {
                    for c in 0..3 {
                        refs[((i * 3 + c) * REF_SIZE + y) * REF_SIZE + x] = spec.colors[i][c];
                    }
                }
            }
        }
    }

    let inpaint = video[0..3 * h * w].to_vec();
    let mut audio = Vec::with_capacity(n * dims.t_a * dims.d_a);
    for env in &envelopes {
        let feats = envelope_to_features(env, FEATURE_PROJECTION_SEED, dims.d_a)?;
        audio.extend_from_slice(feats.as_f32()?);
    }

    Ok(ClipRecord {
        video: Tensor::from_f32(vec![t_len, 3, h, w], video)?,
        gt_masks: Tensor::from_u8(vec![n, t_len, h, w], masks)?,
        audio_feats: Tensor::from_f32(vec![n, dims.t_a, dims.d_a], audio)?,
        envelopes,
        a_ac,
        refs: Tensor::from_f32(vec![n, 3, REF_SIZE, REF_SIZE], refs)?,
        inpaint: Tensor::from_f32(vec![3, h, w], inpaint)?,
        prompt_id: spec.kind.prompt_id(),
        mouth_boxes,
        seed,
        n_chars: n,
    })
}

/// Draw a valid random spec for the given kind. Kind-fixed speeds keep the
/// whole trajectory inferable from frame 0.
pub fn sample_spec(kind: TrajectoryKind, dims: ClipDims, rng: &mut ChaCha8Rng) -> TrajectorySpec {
    let n = kind.n_chars();
    let (h, w) = (dims.h as f64, dims.w as f64);
    let travel = |frac: f64| frac * w / (dims.t - 1).max(1) as f64;

    let radii: Vec<f64> = (0..n).map(|_| rng.gen_range(5.5..6.5)).collect();
    let hue0 = rng.gen_range(0.0..360.0);
    let mut colors = vec![hsv_to_rgb(hue0, rng.gen_range(0.75..1.0), rng.gen_range(0.8..1.0))];
    if n == 2 {
        let hue1 = hue0 + 120.0 + rng.gen_range(-40.0..40.0);
        colors.push(hsv_to_rgb(hue1, rng.gen_range(0.75..1.0), rng.gen_range(0.8..1.0)));
    }

    // Vertical bands keep two-character discs pixel-disjoint.
    let band = |rng: &mut ChaCha8Rng, r: f64, top: bool| -> f64 {
        if top {
            rng.gen_range(r + 1.0..h / 2.0 - 2.0)
        } else {
            rng.gen_range(h / 2.0 + 2.0..h - r - 1.0)
        }
    };

    match kind {
        TrajectoryKind::Single => {
            let speed = travel(0.3);
            let r = radii[0];
            let reach = speed * (dims.t - 1) as f64;
            let cx = rng.gen_range(r + 1.0..w - r - 1.0 - reach);
            let cy = rng.gen_range(r + 1.0..h - r - 1.0);
            TrajectorySpec {
                kind,
                radii,
                colors,
                speed,
                starts: vec![(cx, cy)],
            }
        }
        TrajectoryKind::Static => {
            // Free placement with a minimum separation so masks stay disjoint.
            let (r0, r1) = (radii[0], radii[1]);
            let min_sep = r0 + r1 + 1.5;
            let mut tries = 0;
            let (p0, p1) = loop {
                let p0 = (
                    rng.gen_range(r0 + 1.0..w - r0 - 1.0),
                    rng.gen_range(r0 + 1.0..h - r0 - 1.0),
                );
                let p1 = (
                    rng.gen_range(r1 + 1.0..w - r1 - 1.0),
                    rng.gen_range(r1 + 1.0..h - r1 - 1.0),
                );
                let d = ((p0.0 - p1.0).powi(2) + (p0.1 - p1.1).powi(2)).sqrt();
                if d >= min_sep {
                    break (p0, p1);
                }
                tries += 1;
                assert!(tries < 10_000, "static placement should always succeed");
            };
            TrajectorySpec {
                kind,
                radii,
                colors,
                speed: 0.0,
                starts: vec![p0, p1],
            }
        }
        TrajectoryKind::Parallel => {
            let speed = travel(0.3);
            let reach = speed * (dims.t - 1) as f64;
            let (r0, r1) = (radii[0], radii[1]);
            let x0 = rng.gen_range(r0 + 1.0..w - r0 - 1.0 - reach);
            let x1 = rng.gen_range(r1 + 1.0..w - r1 - 1.0 - reach);
            let y0 = band(rng, r0, true);
            let y1 = band(rng, r1, false);
            TrajectorySpec {
                kind,
                radii,
                colors,
                speed,
                starts: vec![(x0, y0), (x1, y1)],
            }
        }
        TrajectoryKind::Crossing => {
            // Character 0 starts left and moves right; character 1 mirrors.
            let speed = travel(0.5);
            let reach = speed * (dims.t - 1) as f64;
            let (r0, r1) = (radii[0], radii[1]);
            let x0 = rng.gen_range(r0 + 1.0..w - r0 - 1.0 - reach);
            let x1 = rng.gen_range(r1 + 1.0 + reach..w - r1 - 1.0);
            let y0 = band(rng, r0, true);
            let y1 = band(rng, r1, false);
            TrajectorySpec {
                kind,
                radii,
                colors,
                speed,
                starts: vec![(x0, y0), (x1, y1)],
            }
        }
    }
}

/// Train/test membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-clip sidecar metadata (meta.json).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipMeta {
    pub seed: u64,
    pub kind: TrajectoryKind,
    pub prompt_id: usize,
    pub n_chars: usize,
    pub a_ac: Vec<Vec<u8>>,
    pub mouth_boxes: Vec<Vec<MouthBox>>,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub path: String,
    pub split: Split,
    pub prompt_id: usize,
    pub n_chars: usize,
    pub a_ac: Vec<Vec<u8>>,
    pub seed: u64,
}

/// Top-level dataset manifest (manifest.json).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub dims: ClipDims,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn split_paths(&self, split: Split) -> Vec<&ClipEntry> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }
}

/// Write one clip's tensors and metadata into `dir`.
pub fn save_clip(record: &ClipRecord, meta: &ClipMeta, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_tensor(&record.video, &dir.join("video.byat"))?;
    write_tensor(&record.gt_masks, &dir.join("masks.byat"))?;
    write_tensor(&record.audio_feats, &dir.join("audio.byat"))?;
    write_tensor(&record.refs, &dir.join("refs.byat"))?;
    write_tensor(&record.inpaint, &dir.join("inpaint.byat"))?;
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

/// Load a clip saved by [`save_clip`], reconstructing envelopes from the
/// stored audio features.
pub fn load_clip(dir: &Path) -> Result<(ClipRecord, ClipMeta)> {
    let meta: ClipMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let video = read_tensor(&dir.join("video.byat"))?;
    let gt_masks = read_tensor(&dir.join("masks.byat"))?;
    let audio_feats = read_tensor(&dir.join("audio.byat"))?;
    let refs = read_tensor(&dir.join("refs.byat"))?;
    let inpaint = read_tensor(&dir.join("inpaint.byat"))?;
    let n = meta.n_chars;
    let ashape = audio_feats.shape().to_vec();
    if ashape.len() != 3 || ashape[0] != n {
        return Err(Error::shape("audio tensor must be n x T_a x d_a".to_string()));
    }
    let (t_a, d_a) = (ashape[1], ashape[2]);
    let mut envelopes = Vec::with_capacity(n);
    for i in 0..n {
        let row = audio_feats.as_f32()?[i * t_a * d_a..(i + 1) * t_a * d_a].to_vec();
        let feats = Tensor::from_f32(vec![t_a, d_a], row)?;
        envelopes.push(reconstruct_envelope(&feats, FEATURE_PROJECTION_SEED)?);
    }
    let record = ClipRecord {
        video,
        gt_masks,
        audio_feats,
        envelopes,
        a_ac: meta.a_ac.clone(),
        refs,
        inpaint,
        prompt_id: meta.prompt_id,
        mouth_boxes: meta.mouth_boxes.clone(),
        seed: meta.seed,
        n_chars: n,
    };
    Ok((record, meta))
}

/// Generate `count` clips under `out_dir`, writing one subdirectory per clip
/// plus `manifest.json`. `mix` is the fraction of single-character clips
/// (deterministic round). Test membership goes to the `round(test_frac *
/// count)` clips with the smallest seed hashes.
pub fn gen_dataset(
    count: usize,
    mix: f64,
    out_dir: &Path,
    seed: u64,
    dims: ClipDims,
    test_frac: f64,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::Parameter(format!("mix must lie in [0, 1], got {mix}")));
    }
    if !(0.0..=1.0).contains(&test_frac) {
        return Err(Error::Parameter(format!(
            "test fraction must lie in [0, 1], got {test_frac}"
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let n_single = (mix * count as f64).round() as usize;

    // Deterministic split by hash rank: exactly round(test_frac * count)
    // test clips.
    let clip_seeds: Vec<u64> = (0..count).map(|i| splitmix64(seed.wrapping_add(i as u64))).collect();
    let n_test = (test_frac * count as f64).round() as usize;
    let mut by_hash: Vec<usize> = (0..count).collect();
    by_hash.sort_by_key(|&i| splitmix64(clip_seeds[i] ^ 0x5917));
    let mut splits = vec![Split::Train; count];
    for &i in by_hash.iter().take(n_test) {
        splits[i] = Split::Test;
    }

    let two_char_kinds = [
        TrajectoryKind::Static,
        TrajectoryKind::Parallel,
        TrajectoryKind::Crossing,
    ];
    let mut clips = Vec::with_capacity(count);
    for i in 0..count {
        let kind = if i < n_single {
            TrajectoryKind::Single
        } else {
            two_char_kinds[(i - n_single) % two_char_kinds.len()]
        };
        let clip_seed = clip_seeds[i];
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(clip_seed ^ 0x5bec));
        let spec = sample_spec(kind, dims, &mut rng);
        let record = gen_clip(&spec, dims, clip_seed)?;
        let name = format!("clip_{i:04}");
        let meta = ClipMeta {
            seed: clip_seed,
            kind,
            prompt_id: record.prompt_id,
            n_chars: record.n_chars,
            a_ac: record.a_ac.clone(),
            mouth_boxes: record.mouth_boxes.clone(),
            split: splits[i],
        };
        save_clip(&record, &meta, &out_dir.join(&name))?;
        clips.push(ClipEntry {
            path: name,
            split: splits[i],
            prompt_id: record.prompt_id,
            n_chars: record.n_chars,
            a_ac: record.a_ac.clone(),
            seed: clip_seed,
        });
    }

    let manifest = DatasetManifest {
        version: 1,
        seed,
        dims,
        clips,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    Ok(manifest)
}
