//! Condition-injection encoders and the audio-to-character assignment router.
//!
//! Audio features are projected then temporally downsampled by a strided 2D
//! convolution over the (time x feature) plane; reference crops pass through
//! a small query-attention face encoder; text prompts are an embedding table.
//! All three run on the autodiff tape so the trainer can reach their
//! parameters. Visual-condition preparation (latent pooling, inpainting-frame
//! face noising, reference concatenation) is plain data work, and the audio
//! router scores envelope/mouth correlations per time chunk and votes for a
//! permutation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::dit::DiTConfig;
use crate::error::{Error, Result};
use crate::params::{normal_init, xavier, zeros, ParamGroup, ParamStore, TapeBinding};
use crate::synth::MouthBox;
use crate::tensor::Tensor;

/// Per-character audio embedding handles, one `[T', d]` node per character.
pub struct AudioEmbedding {
    pub per_char: Vec<Var>,
}

/// Per-character face embedding handles, one `[q, d]` node per character.
pub struct FaceEmbedding {
    pub per_char: Vec<Var>,
}

/// Audio-to-character permutation matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioCharacterMatrix {
    pub values: Vec<Vec<u8>>,
}

impl AudioCharacterMatrix {
    pub fn new(values: Vec<Vec<u8>>) -> Result<Self> {
        let n = values.len();
        for row in &values {
            if row.len() != n {
                return Err(Error::shape("audio-character matrix must be square".to_string()));
            }
        }
        for i in 0..n {
            let row_sum: u8 = values[i].iter().sum();
            let col_sum: u8 = values.iter().map(|r| r[i]).sum();
            if row_sum != 1 || col_sum != 1 {
                return Err(Error::input(
                    "audio-character matrix must be a permutation".to_string(),
                ));
            }
        }
        Ok(AudioCharacterMatrix { values })
    }

    pub fn identity(n: usize) -> Self {
        let values = (0..n)
            .map(|i| (0..n).map(|j| u8::from(i == j)).collect())
            .collect();
        AudioCharacterMatrix { values }
    }

    /// Character index driven by audio stream `i`.
    pub fn char_for_audio(&self, i: usize) -> usize {
        self.values[i].iter().position(|&v| v == 1).expect("permutation row")
    }
}

/// Register all conditioning parameters (audio encoder, face encoder, text
/// table, and the learned null embeddings used for condition dropout).
pub fn register_conditioning_params(store: &mut ParamStore, cfg: &DiTConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d;
    store.add(
        "audio.proj_w",
        ParamGroup::AudioEncoder,
        &[cfg.d_audio_in, d],
        xavier(rng, cfg.d_audio_in, d, cfg.d_audio_in * d),
    );
    store.add("audio.proj_b", ParamGroup::AudioEncoder, &[d], zeros(d));
    store.add(
        "audio.conv_k",
        ParamGroup::AudioEncoder,
        &[3, 3],
        xavier(rng, 9, 1, 9),
    );
    store.add("audio.conv_b", ParamGroup::AudioEncoder, &[d], zeros(d));
    store.add(
        "null.audio",
        ParamGroup::AudioEncoder,
        &[d],
        normal_init(rng, 0.02, d),
    );

    let g2 = cfg.face_grid * cfg.face_grid;
    store.add(
        "face.w_global",
        ParamGroup::FaceEncoder,
        &[6, d],
        xavier(rng, 6, d, 6 * d),
    );
    store.add(
        "face.w_local",
        ParamGroup::FaceEncoder,
        &[3, d],
        xavier(rng, 3, d, 3 * d),
    );
    store.add(
        "face.local_pos",
        ParamGroup::FaceEncoder,
        &[g2, d],
        normal_init(rng, 0.02, g2 * d),
    );
    store.add(
        "face.queries",
        ParamGroup::FaceEncoder,
        &[cfg.q_face, d],
        normal_init(rng, 0.5, cfg.q_face * d),
    );
    for name in ["face.attn_wq", "face.attn_wk", "face.attn_wv", "face.attn_wo"] {
        store.add(name, ParamGroup::FaceEncoder, &[d, d], xavier(rng, d, d, d * d));
    }
    store.add(
        "null.face",
        ParamGroup::FaceEncoder,
        &[cfg.q_face, d],
        normal_init(rng, 0.02, cfg.q_face * d),
    );

    store.add(
        "text.table",
        ParamGroup::TextEmbed,
        &[cfg.n_prompts * cfg.text_len, d],
        normal_init(rng, 0.5, cfg.n_prompts * cfg.text_len * d),
    );
    store.add(
        "null.text",
        ParamGroup::TextEmbed,
        &[cfg.text_len, d],
        normal_init(rng, 0.02, cfg.text_len * d),
    );
}

/// Project per-character audio features `[n, T_a, d_a]` to `[n, T', d]`:
/// linear map to width `d`, then a 3x3 convolution over the (time x feature)
/// plane with temporal stride `T_a / T'` and zero padding 1.
pub fn audio_project(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    audio_feats: &[f64],
    n: usize,
    cfg: &DiTConfig,
) -> Result<AudioEmbedding> {
    let (t_a, d_a) = (cfg.t_audio, cfg.d_audio_in);
    if audio_feats.len() != n * t_a * d_a {
        return Err(Error::shape(format!(
            "audio features must be {n} x {t_a} x {d_a}"
        )));
    }
    if t_a % cfg.t_latent != 0 {
        return Err(Error::shape(format!(
            "audio length {t_a} not divisible by latent frames {}",
            cfg.t_latent
        )));
    }
    let stride = t_a / cfg.t_latent;
    let w = binding.var(store.idx("audio.proj_w"));
    let b = binding.var(store.idx("audio.proj_b"));
    let kernel = binding.var(store.idx("audio.conv_k"));
    let conv_b = binding.var(store.idx("audio.conv_b"));
    let mut per_char = Vec::with_capacity(n);
    for i in 0..n {
        let x = g.constant(&[t_a, d_a], &audio_feats[i * t_a * d_a..(i + 1) * t_a * d_a]);
        let proj = g.matmul(x, w);
        let proj = g.add_bias(proj, b);
        let conv = g.conv2d_single(proj, kernel, stride);
        debug_assert_eq!(g.shape(conv), &[cfg.t_latent, cfg.d]);
        per_char.push(g.add_bias(conv, conv_b));
    }
    Ok(AudioEmbedding { per_char })
}

/// Channel statistics (mean and standard deviation per channel) of one crop.
fn crop_stats(data: &[f32], offset: usize, pixels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6);
    let mut means = [0f64; 3];
    for c in 0..3 {
        let slice = &data[offset + c * pixels..offset + (c + 1) * pixels];
        means[c] = slice.iter().map(|&v| f64::from(v)).sum::<f64>() / pixels as f64;
        out.push(means[c]);
    }
    for c in 0..3 {
        let slice = &data[offset + c * pixels..offset + (c + 1) * pixels];
        let var = slice
            .iter()
            .map(|&v| (f64::from(v) - means[c]).powi(2))
            .sum::<f64>()
            / pixels as f64;
        out.push(var.sqrt());
    }
    out
}

/// Encode reference crops `[n, 3, R, R]` to per-character embeddings
/// `[q, d]`: a global channel-statistics descriptor plus grid-pooled local
/// patches, attended by `q` learned queries through one attention layer.
/// Weights are shared across characters, so permuting inputs permutes
/// outputs identically.
pub fn face_encode(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    refs: &Tensor,
    cfg: &DiTConfig,
) -> Result<FaceEmbedding> {
    let shape = refs.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("expected n x 3 x R x R reference crops".to_string()));
    }
    let (n, size_h, size_w) = (shape[0], shape[2], shape[3]);
    let grid = cfg.face_grid;
    if size_h % grid != 0 || size_w % grid != 0 {
        return Err(Error::shape(format!(
            "crop {size_h}x{size_w} not divisible by face grid {grid}"
        )));
    }
    let data = refs.as_f32()?;
    let pixels = size_h * size_w;

    let w_global = binding.var(store.idx("face.w_global"));
    let w_local = binding.var(store.idx("face.w_local"));
    let local_pos = binding.var(store.idx("face.local_pos"));
    let queries = binding.var(store.idx("face.queries"));
    let wq = binding.var(store.idx("face.attn_wq"));
    let wk = binding.var(store.idx("face.attn_wk"));
    let wv = binding.var(store.idx("face.attn_wv"));
    let wo = binding.var(store.idx("face.attn_wo"));

    let (ph, pw) = (size_h / grid, size_w / grid);
    let mut per_char = Vec::with_capacity(n);
    for i in 0..n {
        let offset = i * 3 * pixels;
        let stats = crop_stats(data, offset, pixels);
        let global = g.constant(&[1, 6], &stats);
        let global = g.matmul(global, w_global);

        let mut patch_colors = Vec::with_capacity(grid * grid * 3);
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..3 {
                    let mut acc = 0f64;
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let (y, x) = (gy * ph + dy, gx * pw + dx);
                            acc += f64::from(data[offset + (c * size_h + y) * size_w + x]);
                        }
                    }
                    patch_colors.push(acc / (ph * pw) as f64);
                }
            }
        }
        let locals = g.constant(&[grid * grid, 3], &patch_colors);
        let locals = g.matmul(locals, w_local);
        let locals = g.add(locals, local_pos);

        let feats = g.concat_rows(global, locals);
        let q_proj = g.matmul(queries, wq);
        let k_proj = g.matmul(feats, wk);
        let v_proj = g.matmul(feats, wv);
        let scores = g.matmul_nt(q_proj, k_proj);
        let scores = g.scale(scores, 1.0 / (cfg.d as f64).sqrt());
        let probs = g.softmax_rows(scores);
        let attended = g.matmul(probs, v_proj);
        per_char.push(g.matmul(attended, wo));
    }
    Ok(FaceEmbedding { per_char })
}

/// Learned text embedding rows for one prompt class.
pub fn text_embed(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    prompt_id: usize,
    cfg: &DiTConfig,
) -> Result<Var> {
    if prompt_id >= cfg.n_prompts {
        return Err(Error::config(format!(
            "prompt id {prompt_id} outside table of {} classes",
            cfg.n_prompts
        )));
    }
    let table = binding.var(store.idx("text.table"));
    Ok(g.slice_rows(table, prompt_id * cfg.text_len, cfg.text_len))
}

/// Pooled latent conditions prepared from a clip.
#[derive(Debug, Clone)]
pub struct VisualConditions {
    /// `[T', C', h', w']` pooled video.
    pub video_latent: Vec<f64>,
    /// `[T', C', h', w']`: noised inpainting frame at frame 0, zeros after.
    pub inpaint_latent: Vec<f64>,
    /// `[T', C', h', w']`: pooled reference strip at frame 0, zeros after.
    pub ref_latent: Vec<f64>,
    /// Set when no inpainting frame was provided (latent is all zeros).
    pub inpaint_dropped: bool,
}

/// Average-pool one `[3, H, W]` frame by `factor` per spatial axis.
pub fn pool_rgb_frame(src: &[f32], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0f64; 3 * oh * ow];
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += f64::from(src[(c * h + y * factor + dy) * w + x * factor + dx]);
                    }
                }
                out[(c * oh + y) * ow + x] = acc / (factor * factor) as f64;
            }
        }
    }
    out
}

/// Horizontally concatenate reference crops, nearest-resize to `H x W`, and
/// pool to latent resolution (frame-0 content of the reference latent).
pub fn ref_strip_frame0(refs: &Tensor, h: usize, w: usize, factor: usize) -> Result<Vec<f64>> {
    let rshape = refs.shape();
    if rshape.len() != 4 || rshape[1] != 3 {
        return Err(Error::shape("expected n x 3 x R x R reference crops".to_string()));
    }
    let (n, rh, rw) = (rshape[0], rshape[2], rshape[3]);
    let rdata = refs.as_f32()?;
    let strip_w = n * rw;
    let mut resized = vec![0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            let sy = y * rh / h;
            for x in 0..w {
                let sx = x * strip_w / w;
                let (char_idx, local_x) = (sx / rw, sx % rw);
                resized[(c * h + y) * w + x] = rdata[((char_idx * 3 + c) * rh + sy) * rw + local_x];
            }
        }
    }
    Ok(pool_rgb_frame(&resized, h, w, factor))
}

/// Add Gaussian noise inside the 2-pixel-dilated mouth boxes of an
/// inpainting frame, then pool it (frame-0 content of the inpainting latent).
pub fn noised_inpaint_frame0(
    pixels: &[f32],
    h: usize,
    w: usize,
    boxes: &[MouthBox],
    sigma: f64,
    factor: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut noised = pixels.to_vec();
    if sigma > 0.0 {
        for b in boxes {
            let x0 = b[0].saturating_sub(2);
            let y0 = b[1].saturating_sub(2);
            let x1 = (b[2] + 2).min(w);
            let y1 = (b[3] + 2).min(h);
            for c in 0..3 {
                for y in y0..y1 {
                    for x in x0..x1 {
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        let gauss =
                            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                        noised[(c * h + y) * w + x] += (sigma * gauss) as f32;
                    }
                }
            }
        }
    }
    pool_rgb_frame(&noised, h, w, factor)
}

/// Prepare the three visual-condition latents. The inpainting frame gets
/// Gaussian noise (std `sigma_face`) inside the frame-0 mouth boxes dilated
/// by 2 pixels before pooling; reference crops are concatenated horizontally,
/// nearest-resized to the frame size, and pooled. Non-video latents occupy
/// frame 0 and are zero-padded in time.
pub fn prep_visual_conditions(
    video: &Tensor,
    inpaint: Option<&Tensor>,
    refs: &Tensor,
    mouth_boxes_frame0: &[MouthBox],
    cfg: &DiTConfig,
    rng: &mut ChaCha8Rng,
) -> Result<VisualConditions> {
    let shape = video.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("expected T x 3 x H x W video".to_string()));
    }
    let (t_len, h, w) = (shape[0], shape[2], shape[3]);
    let factor = cfg.spatial_factor;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "frame {h}x{w} not divisible by spatial factor {factor}"
        )));
    }
    let (lh, lw) = (h / factor, w / factor);
    let frame_latent = 3 * lh * lw;
    let vdata = video.as_f32()?;

    let mut video_latent = Vec::with_capacity(t_len * frame_latent);
    for t in 0..t_len {
        let src = &vdata[t * 3 * h * w..(t + 1) * 3 * h * w];
        video_latent.extend(pool_rgb_frame(src, h, w, factor));
    }

    let mut inpaint_latent = vec![0f64; t_len * frame_latent];
    let mut inpaint_dropped = true;
    if let Some(frame) = inpaint {
        inpaint_dropped = false;
        let fshape = frame.shape();
        if fshape != [3, h, w] {
            return Err(Error::shape("inpainting frame must be 3 x H x W".to_string()));
        }
        let pooled = noised_inpaint_frame0(
            frame.as_f32()?,
            h,
            w,
            mouth_boxes_frame0,
            cfg.sigma_face,
            factor,
            rng,
        );
        inpaint_latent[0..frame_latent].copy_from_slice(&pooled);
    }

    let mut ref_latent = vec![0f64; t_len * frame_latent];
    ref_latent[0..frame_latent].copy_from_slice(&ref_strip_frame0(refs, h, w, factor)?);

    Ok(VisualConditions {
        video_latent,
        inpaint_latent,
        ref_latent,
        inpaint_dropped,
    })
}

/// Relevance scores of every audio stream against every character's mouth
/// brightness, over `chunks` equal time windows: `scores[c][i][j]` is the
/// correlation of audio `i`'s envelope with character `j`'s mouth series in
/// window `c`.
pub fn score_audio_character(
    envelopes_at_frames: &[Vec<f64>],
    mouth_series: &[Vec<f64>],
    chunks: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_audio = envelopes_at_frames.len();
    let n_char = mouth_series.len();
    if n_audio == 0 || n_char == 0 {
        return Err(Error::input("empty score inputs".to_string()));
    }
    let frames = envelopes_at_frames[0].len();
    if mouth_series.iter().any(|s| s.len() != frames) || frames % chunks != 0 {
        return Err(Error::shape(format!(
            "series of {frames} frames not divisible into {chunks} chunks"
        )));
    }
    let win = frames / chunks;
    let mut scores = vec![vec![vec![0f64; n_char]; n_audio]; chunks];
    for c in 0..chunks {
        for i in 0..n_audio {
            for j in 0..n_char {
                let a = &envelopes_at_frames[i][c * win..(c + 1) * win];
                let b = &mouth_series[j][c * win..(c + 1) * win];
                let r = crate::synth::pearson(a, b);
                scores[c][i][j] = if r.is_finite() { r } else { 0.0 };
            }
        }
    }
    Ok(scores)
}

/// Vote over chunks: each chunk votes for the best character per audio; the
/// winning permutation maximizes total votes, with ties broken toward the
/// identity and then lexicographically.
pub fn predict_audio_character_matrix(
    scores: &[Vec<Vec<f64>>],
) -> Result<AudioCharacterMatrix> {
    if scores.is_empty() {
        return Err(Error::input("no score chunks".to_string()));
    }
    let n_audio = scores[0].len();
    let n_char = scores[0][0].len();
    if n_audio != n_char {
        return Err(Error::shape(format!(
            "need square scores, got {n_audio} audio x {n_char} characters"
        )));
    }
    let n = n_audio;
    if n > 4 {
        return Err(Error::Unsupported(format!(
            "permutation enumeration supports n <= 4, got {n}"
        )));
    }

    let mut votes = vec![vec![0usize; n]; n];
    for chunk in scores {
        for i in 0..n {
            let mut best = 0usize;
            let mut best_s = chunk[i][0];
            for j in 1..n {
                if chunk[i][j] > best_s {
                    best = j;
                    best_s = chunk[i][j];
                }
            }
            votes[i][best] += 1;
        }
    }

    let mut perms: Vec<Vec<usize>> = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    collect_permutations(&mut idx, 0, &mut perms);
    perms.sort(); // lexicographic; identity is first
    let mut best_perm = perms[0].clone();
    let mut best_votes = 0usize;
    for p in &perms {
        let total: usize = (0..n).map(|i| votes[i][p[i]]).sum();
        if total > best_votes {
            best_votes = total;
            best_perm = p.clone();
        }
    }
    let values = (0..n)
        .map(|i| (0..n).map(|j| u8::from(best_perm[i] == j)).collect())
        .collect();
    AudioCharacterMatrix::new(values)
}

fn collect_permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        collect_permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, rel_err};
    use crate::synth::{gen_clip, sample_spec, ClipDims, TrajectoryKind};

    fn toy_cfg() -> DiTConfig {
        DiTConfig::toy()
    }

    fn store_with_params(cfg: &DiTConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_conditioning_params(&mut store, cfg, &mut rng);
        store
    }

    #[test]
    fn audio_project_shape_and_linearity() {
        let cfg = toy_cfg();
        let store = store_with_params(&cfg, 1);
        let mut g = Graph::new();
        let binding = store.bind(&mut g, &|_| false);
        let feats = vec![0.3f64; 2 * cfg.t_audio * cfg.d_audio_in];
        let emb = audio_project(&mut g, &binding, &store, &feats, 2, &cfg).unwrap();
        assert_eq!(emb.per_char.len(), 2);
        assert_eq!(g.shape(emb.per_char[0]), &[8, 64]);

        // Zero input with zero biases stays zero.
        let mut store2 = store_with_params(&cfg, 2);
        for name in ["audio.proj_b", "audio.conv_b"] {
            let idx = store2.idx(name);
            store2.value_mut(idx).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g2 = Graph::new();
        let b2 = store2.bind(&mut g2, &|_| false);
        let zero = vec![0f64; 2 * cfg.t_audio * cfg.d_audio_in];
        let emb = audio_project(&mut g2, &b2, &store2, &zero, 2, &cfg).unwrap();
        assert!(g2.value(emb.per_char[0]).iter().all(|&v| v == 0.0));
        assert!(g2.value(emb.per_char[1]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn audio_project_gradients_match_finite_differences() {
        let mut cfg = toy_cfg();
        cfg.t_audio = 8;
        cfg.t_latent = 4;
        cfg.d = 6;
        cfg.d_audio_in = 3;
        let store = store_with_params(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<f64> = (0..cfg.t_audio * cfg.d_audio_in)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let loss_of = |store: &ParamStore| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let binding = store.bind(&mut g, &|p| p.name == "audio.proj_w");
            let emb = audio_project(&mut g, &binding, &store, &feats, 1, &cfg).unwrap();
            let sq = g.mul(emb.per_char[0], emb.per_char[0]);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            let gw = grads.get(binding.var(store.idx("audio.proj_w"))).unwrap().to_vec();
            (g.scalar(loss), gw)
        };
        let (_, analytic) = loss_of(&store);

        let base = store.get("audio.proj_w").value.clone();
        let coords: Vec<usize> = (0..base.len()).step_by(5).collect();
        let numeric = finite_diff(
            |p| {
                let mut s = store.clone();
                let idx = s.idx("audio.proj_w");
                s.value_mut(idx).copy_from_slice(p);
                loss_of(&s).0
            },
            &base,
            &coords,
            1e-5,
        );
        for (ci, &coord) in coords.iter().enumerate() {
            let err = rel_err(analytic[coord], numeric[ci]);
            assert!(err < 1e-4, "coord {coord}: {err}");
        }
    }

    #[test]
    fn face_encode_equivariance_and_shape() {
        let cfg = toy_cfg();
        let store = store_with_params(&cfg, 5);
        let dims = ClipDims::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = sample_spec(TrajectoryKind::Static, dims, &mut rng);
        let clip = gen_clip(&spec, dims, 17).unwrap();

        let mut g = Graph::new();
        let binding = store.bind(&mut g, &|_| false);
        let emb = face_encode(&mut g, &binding, &store, &clip.refs, &cfg).unwrap();
        assert_eq!(g.shape(emb.per_char[0]), &[4, 64]);

        // Swap the two reference crops; embeddings swap exactly.
        let rdata = clip.refs.as_f32().unwrap();
        let per = rdata.len() / 2;
        let mut swapped = rdata[per..].to_vec();
        swapped.extend_from_slice(&rdata[..per]);
        let refs2 = Tensor::from_f32(clip.refs.shape().to_vec(), swapped).unwrap();
        let mut g2 = Graph::new();
        let b2 = store.bind(&mut g2, &|_| false);
        let emb2 = face_encode(&mut g2, &b2, &store, &refs2, &cfg).unwrap();
        assert_eq!(g.value(emb.per_char[0]), g2.value(emb2.per_char[1]));
        assert_eq!(g.value(emb.per_char[1]), g2.value(emb2.per_char[0]));

        // Distinct disc colors separate the embeddings.
        let a = g.value(emb.per_char[0]);
        let b = g.value(emb.per_char[1]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dot / (na * nb) < 0.99);
    }

    #[test]
    fn text_embed_lookup() {
        let cfg = toy_cfg();
        let store = store_with_params(&cfg, 7);
        let mut g = Graph::new();
        let binding = store.bind(&mut g, &|_| false);
        let a = text_embed(&mut g, &binding, &store, 1, &cfg).unwrap();
        let b = text_embed(&mut g, &binding, &store, 1, &cfg).unwrap();
        let c = text_embed(&mut g, &binding, &store, 0, &cfg).unwrap();
        assert_eq!(g.shape(a), &[4, 64]);
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        assert!(matches!(
            text_embed(&mut g, &binding, &store, 99, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prep_visual_conditions_contracts() {
        let cfg = toy_cfg();
        let dims = ClipDims::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = sample_spec(TrajectoryKind::Static, dims, &mut rng);
        let clip = gen_clip(&spec, dims, 23).unwrap();
        let boxes: Vec<MouthBox> = clip.mouth_boxes.iter().map(|b| b[0]).collect();

        // sigma 0 and no boxes: frame 0 equals the pooled inpainting frame.
        let mut cfg0 = cfg.clone();
        cfg0.sigma_face = 0.0;
        let mut r0 = ChaCha8Rng::seed_from_u64(1);
        let cond = prep_visual_conditions(&clip.video, Some(&clip.inpaint), &clip.refs, &[], &cfg0, &mut r0)
            .unwrap();
        let frame = 3 * 8 * 8;
        for i in 0..frame {
            assert!((cond.inpaint_latent[i] - cond.video_latent[i]).abs() < 1e-6);
        }

        // Frames 1..T'-1 of non-video latents are zero.
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let cond = prep_visual_conditions(
            &clip.video,
            Some(&clip.inpaint),
            &clip.refs,
            &boxes,
            &cfg,
            &mut r1,
        )
        .unwrap();
        assert!(cond.inpaint_latent[frame..].iter().all(|&v| v == 0.0));
        assert!(cond.ref_latent[frame..].iter().all(|&v| v == 0.0));
        assert!(!cond.inpaint_dropped);

        // Channel concatenation yields 3 * C' = 9 channels.
        assert_eq!(
            cond.video_latent.len() + cond.inpaint_latent.len() + cond.ref_latent.len(),
            8 * 9 * 8 * 8
        );

        // Missing inpainting frame: zeros plus the drop flag.
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let cond =
            prep_visual_conditions(&clip.video, None, &clip.refs, &boxes, &cfg, &mut r2).unwrap();
        assert!(cond.inpaint_dropped);
        assert!(cond.inpaint_latent.iter().all(|&v| v == 0.0));

        // Deterministic under the rng seed.
        let mut ra = ChaCha8Rng::seed_from_u64(9);
        let mut rb = ChaCha8Rng::seed_from_u64(9);
        let ca = prep_visual_conditions(&clip.video, Some(&clip.inpaint), &clip.refs, &boxes, &cfg, &mut ra)
            .unwrap();
        let cb = prep_visual_conditions(&clip.video, Some(&clip.inpaint), &clip.refs, &boxes, &cfg, &mut rb)
            .unwrap();
        assert_eq!(ca.inpaint_latent, cb.inpaint_latent);
    }

    #[test]
    fn voting_examples() {
        let identity = AudioCharacterMatrix::identity(2);
        let chunk = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let scores = vec![chunk.clone(), chunk.clone(), chunk];
        assert_eq!(predict_audio_character_matrix(&scores).unwrap(), identity);

        let chunk = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        let scores = vec![chunk.clone(), chunk];
        let swap = AudioCharacterMatrix::new(vec![vec![0, 1], vec![1, 0]]).unwrap();
        assert_eq!(predict_audio_character_matrix(&scores).unwrap(), swap);

        // Exact tie: identity preferred.
        let scores = vec![
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![0.1, 0.9], vec![0.8, 0.2]],
        ];
        assert_eq!(predict_audio_character_matrix(&scores).unwrap(), identity);
    }

    #[test]
    fn voting_output_is_always_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let chunks = rng.gen_range(1..5usize);
            let scores: Vec<Vec<Vec<f64>>> = (0..chunks)
                .map(|_| {
                    (0..2)
                        .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .collect()
                })
                .collect();
            // Constructor validates the permutation property.
            predict_audio_character_matrix(&scores).unwrap();
        }
    }

    #[test]
    fn scorer_recovers_assignment_on_clean_clips() {
        let dims = ClipDims::toy();
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            let spec = sample_spec(TrajectoryKind::Parallel, dims, &mut rng);
            let clip = gen_clip(&spec, dims, seed + 300).unwrap();
            let envs: Vec<Vec<f64>> = clip
                .envelopes
                .iter()
                .map(|e| crate::synth::resample_to_frames(e, dims.t))
                .collect();
            let mouths: Vec<Vec<f64>> = (0..2)
                .map(|j| {
                    crate::synth::mouth_brightness_series(&clip.video, &clip.mouth_boxes[j])
                        .unwrap()
                })
                .collect();
            let scores = score_audio_character(&envs, &mouths, 2).unwrap();
            let predicted = predict_audio_character_matrix(&scores).unwrap();
            assert_eq!(predicted.values, clip.a_ac, "seed {seed}");
        }
    }
}
