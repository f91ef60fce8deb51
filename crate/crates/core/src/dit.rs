//! Toy multimodal diffusion transformer with dual mask-guided cross-attention,
//! LoRA adapters, and the diffusion forward process.
//!
//! Block order per layer: self-attention, MLP, then face cross-attention
//! gated per token by the character-visual matrix, then audio cross-attention
//! gated by the audio-visual matrix. Both cross-attention residuals are added
//! to the block's visual tokens `v` (the refined-base variant is a config
//! switch). The face cross-attention exports its per-head query/key
//! projections for the router. The prediction head covers only the video
//! latent channels; conditioning channels are inputs, not targets.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_init, ones, xavier, zeros, ParamGroup, ParamStore, TapeBinding};
use crate::tensor::TokenGridDims;

/// Model hyperparameters shared by the denoiser, encoders, and router.
#[derive(Debug, Clone, PartialEq)]
pub struct DiTConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub tau: usize,
    /// Video latent channels C' (the full input latent carries 3C').
    pub c_latent: usize,
    pub t_latent: usize,
    pub h_latent: usize,
    pub w_latent: usize,
    /// Text token count k.
    pub text_len: usize,
    pub n_chars: usize,
    /// Face-encoder query count q.
    pub q_face: usize,
    /// Face-encoder local pooling grid g (g x g patches).
    pub face_grid: usize,
    pub d_audio_in: usize,
    pub t_audio: usize,
    pub n_prompts: usize,
    pub mlp_hidden: usize,
    /// Pixel-to-latent pooling factor per spatial axis.
    pub spatial_factor: usize,
    pub router_blocks: usize,
    pub router_width: usize,
    pub router_heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Noise std added to inpainting-frame facial regions.
    pub sigma_face: f64,
    /// Eq. 8 residual-base switch: audio increment added to the refined
    /// tokens v' instead of the raw v.
    pub audio_residual_on_refined: bool,
}

impl DiTConfig {
    pub fn toy() -> Self {
        DiTConfig {
            layers: 4,
            d: 64,
            heads: 4,
            tau: 2,
            c_latent: 3,
            t_latent: 8,
            h_latent: 8,
            w_latent: 8,
            text_len: 4,
            n_chars: 2,
            q_face: 4,
            face_grid: 4,
            d_audio_in: 8,
            t_audio: 32,
            n_prompts: 4,
            mlp_hidden: 128,
            spatial_factor: 4,
            router_blocks: 2,
            router_width: 64,
            router_heads: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            sigma_face: 0.3,
            audio_residual_on_refined: false,
        }
    }

    /// Minimal configuration for gradient checks.
    pub fn tiny() -> Self {
        DiTConfig {
            layers: 2,
            d: 16,
            heads: 2,
            tau: 2,
            c_latent: 3,
            t_latent: 2,
            h_latent: 4,
            w_latent: 4,
            text_len: 2,
            n_chars: 2,
            q_face: 2,
            face_grid: 2,
            d_audio_in: 4,
            t_audio: 8,
            n_prompts: 4,
            mlp_hidden: 16,
            spatial_factor: 4,
            router_blocks: 1,
            router_width: 16,
            router_heads: 2,
            lora_rank: 2,
            lora_alpha: 2.0,
            sigma_face: 0.3,
            audio_residual_on_refined: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.h_latent % self.tau != 0 || self.w_latent % self.tau != 0 {
            return Err(Error::config(format!(
                "latent {}x{} not divisible by patch size {}",
                self.h_latent, self.w_latent, self.tau
            )));
        }
        if self.t_audio % self.t_latent != 0 {
            return Err(Error::config(
                "audio length must be a multiple of latent frames".to_string(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> TokenGridDims {
        TokenGridDims {
            t_len: self.t_latent,
            h_len: self.h_latent / self.tau,
            w_len: self.w_latent / self.tau,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid().token_count()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Input patch vector length: all 3C' channels of a tau x tau patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.c_latent * self.tau * self.tau
    }

    /// Output patch vector length: video channels only.
    pub fn out_patch_dim(&self) -> usize {
        self.c_latent * self.tau * self.tau
    }

    /// Video-channel latent element count.
    pub fn video_latent_len(&self) -> usize {
        self.t_latent * self.c_latent * self.h_latent * self.w_latent
    }
}

/// Diffusion coefficients.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule.
    pub fn linear(t_diff: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_diff == 0 {
            return Err(Error::config("schedule needs at least one step".to_string()));
        }
        let betas: Vec<f64> = (0..t_diff)
            .map(|t| {
                if t_diff == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (t_diff - 1) as f64
                }
            })
            .collect();
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b) || b == 0.0) {
            return Err(Error::config("betas must lie in (0, 1)".to_string()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_diff);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// Forward noising `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(z_0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t >= schedule.len() {
        return Err(Error::bounds(format!(
            "timestep {t} outside schedule of {}",
            schedule.len()
        )));
    }
    if z_0.len() != eps.len() {
        return Err(Error::shape("z_0 and eps must match".to_string()));
    }
    let ab = schedule.alpha_bars[t];
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_0.iter().zip(eps).map(|(z, e)| sa * z + sn * e).collect())
}

/// Register every denoiser parameter (base, cross-attention, LoRA).
pub fn register_dit_params(store: &mut ParamStore, cfg: &DiTConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d;
    store.add(
        "dit.patch_w",
        ParamGroup::DitBase,
        &[cfg.patch_dim(), d],
        xavier(rng, cfg.patch_dim(), d, cfg.patch_dim() * d),
    );
    store.add("dit.patch_b", ParamGroup::DitBase, &[d], zeros(d));

    for l in 0..cfg.layers {
        let p = |suffix: &str| format!("dit.l{l}.{suffix}");
        store.add(&p("ln1.g"), ParamGroup::DitBase, &[d], ones(d));
        store.add(&p("ln1.b"), ParamGroup::DitBase, &[d], zeros(d));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.add(&p(w), ParamGroup::DitBase, &[d, d], xavier(rng, d, d, d * d));
        }
        store.add(&p("ln2.g"), ParamGroup::DitBase, &[d], ones(d));
        store.add(&p("ln2.b"), ParamGroup::DitBase, &[d], zeros(d));
        store.add(
            &p("mlp.w1"),
            ParamGroup::DitBase,
            &[d, cfg.mlp_hidden],
            xavier(rng, d, cfg.mlp_hidden, d * cfg.mlp_hidden),
        );
        store.add(&p("mlp.b1"), ParamGroup::DitBase, &[cfg.mlp_hidden], zeros(cfg.mlp_hidden));
        store.add(
            &p("mlp.w2"),
            ParamGroup::DitBase,
            &[cfg.mlp_hidden, d],
            xavier(rng, cfg.mlp_hidden, d, cfg.mlp_hidden * d),
        );
        store.add(&p("mlp.b2"), ParamGroup::DitBase, &[d], zeros(d));

        store.add(&p("face.ln.g"), ParamGroup::FaceCrossAttn, &[d], ones(d));
        store.add(&p("face.ln.b"), ParamGroup::FaceCrossAttn, &[d], zeros(d));
        for w in ["face.wq", "face.wk", "face.wv", "face.wo"] {
            store.add(&p(w), ParamGroup::FaceCrossAttn, &[d, d], xavier(rng, d, d, d * d));
        }
        store.add(&p("audio.ln.g"), ParamGroup::AudioCrossAttn, &[d], ones(d));
        store.add(&p("audio.ln.b"), ParamGroup::AudioCrossAttn, &[d], zeros(d));
        for w in ["audio.wq", "audio.wk", "audio.wv", "audio.wo"] {
            store.add(&p(w), ParamGroup::AudioCrossAttn, &[d, d], xavier(rng, d, d, d * d));
        }

        if cfg.lora_rank > 0 {
            let r = cfg.lora_rank;
            for (target, d_in, d_out) in [
                ("attn.wq", d, d),
                ("attn.wk", d, d),
                ("attn.wv", d, d),
                ("attn.wo", d, d),
                ("mlp.w1", d, cfg.mlp_hidden),
                ("mlp.w2", cfg.mlp_hidden, d),
            ] {
                store.add(
                    &p(&format!("{target}.lora_a")),
                    ParamGroup::Lora,
                    &[r, d_in],
                    normal_init(rng, 0.02, r * d_in),
                );
                // Zero-init B keeps adapters silent until trained.
                store.add(
                    &p(&format!("{target}.lora_b")),
                    ParamGroup::Lora,
                    &[d_out, r],
                    zeros(d_out * r),
                );
            }
        }
    }

    store.add("dit.final_ln.g", ParamGroup::DitBase, &[d], ones(d));
    store.add("dit.final_ln.b", ParamGroup::DitBase, &[d], zeros(d));
    store.add(
        "dit.head_w",
        ParamGroup::DitBase,
        &[d, cfg.out_patch_dim()],
        xavier(rng, d, cfg.out_patch_dim(), d * cfg.out_patch_dim()),
    );
    store.add("dit.head_b", ParamGroup::DitBase, &[cfg.out_patch_dim()], zeros(cfg.out_patch_dim()));
}

/// Base matmul with an optional LoRA adapter `(W + (alpha/r) B A)` applied on
/// the right of row-major activations.
pub fn lora_matmul(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    x: Var,
    base_name: &str,
    cfg: &DiTConfig,
) -> Var {
    let w = binding.var(store.idx(base_name));
    let base = g.matmul(x, w);
    let lora_a = format!("{base_name}.lora_a");
    if cfg.lora_rank == 0 || !store.contains(&lora_a) {
        return base;
    }
    let a = binding.var(store.idx(&lora_a));
    let b = binding.var(store.idx(&format!("{base_name}.lora_b")));
    let u = g.matmul_nt(x, a);
    let ub = g.matmul_nt(u, b);
    let scaled = g.scale(ub, cfg.lora_alpha / cfg.lora_rank as f64);
    g.add(base, scaled)
}

fn layer_norm(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    x: Var,
    gain: &str,
    bias: &str,
) -> Var {
    let normed = g.normalize_rows(x, 1e-5);
    let scaled = g.mul_row(normed, binding.var(store.idx(gain)));
    g.add_bias(scaled, binding.var(store.idx(bias)))
}

fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    head_dim: usize,
) -> Var {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let probs = g.softmax_rows(scores);
        parts.push(g.matmul(probs, vh));
    }
    g.concat_cols(&parts)
}

/// Per-layer query/key projections exported from the face cross-attention.
pub struct LayerTaps {
    /// Per head `[S, head_dim]`.
    pub q_heads: Vec<Var>,
    /// Per head `[n * q, head_dim]` (all characters' keys stacked).
    pub k_heads: Vec<Var>,
}

/// Projected queries, per-character keys/values, and exported taps of one
/// cross-attention site.
struct CrossAttnProjections {
    q: Var,
    ks: Vec<Var>,
    vs: Vec<Var>,
    taps: Option<LayerTaps>,
}

fn cross_attn_projections(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    queries_src: Var,
    embeds: &[Var],
    prefix: &str,
    cfg: &DiTConfig,
    export_taps: bool,
) -> CrossAttnProjections {
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let wq = binding.var(store.idx(&format!("{prefix}.wq")));
    let wk = binding.var(store.idx(&format!("{prefix}.wk")));
    let wv = binding.var(store.idx(&format!("{prefix}.wv")));
    let q = g.matmul(queries_src, wq);
    let ks: Vec<Var> = embeds.iter().map(|&e| g.matmul(e, wk)).collect();
    let vs: Vec<Var> = embeds.iter().map(|&e| g.matmul(e, wv)).collect();
    let taps = if export_taps {
        let mut all_k = ks[0];
        for &k in &ks[1..] {
            all_k = g.concat_rows(all_k, k);
        }
        let q_heads = (0..heads).map(|h| g.slice_cols(q, h * hd, hd)).collect();
        let k_heads = (0..heads).map(|h| g.slice_cols(all_k, h * hd, hd)).collect();
        Some(LayerTaps { q_heads, k_heads })
    } else {
        None
    };
    CrossAttnProjections { q, ks, vs, taps }
}

fn validate_gates(gates: &[Vec<f64>], n_embeds: usize, tokens: usize) -> Result<()> {
    if gates.len() != n_embeds {
        return Err(Error::shape(format!(
            "{} gates for {n_embeds} characters",
            gates.len()
        )));
    }
    for gate in gates {
        if gate.len() != tokens {
            return Err(Error::shape(format!(
                "gate length {} does not match {tokens} tokens",
                gate.len()
            )));
        }
        if gate.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::input("gate values must lie in [0, 1]".to_string()));
        }
    }
    Ok(())
}

fn combine_gated(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    proj: &CrossAttnProjections,
    gates: &[Vec<f64>],
    prefix: &str,
    cfg: &DiTConfig,
    tokens: usize,
) -> Var {
    let wo = binding.var(store.idx(&format!("{prefix}.wo")));
    let mut combined: Option<Var> = None;
    for (i, (&k, &v)) in proj.ks.iter().zip(&proj.vs).enumerate() {
        let ctx = multi_head_attention(g, proj.q, k, v, cfg.heads, cfg.head_dim());
        let out = g.matmul(ctx, wo);
        let gate = g.constant(&[tokens], &gates[i]);
        let gated = g.mul_col(out, gate);
        combined = Some(match combined {
            None => gated,
            Some(acc) => g.add(acc, gated),
        });
    }
    combined.expect("at least one character")
}

/// Mask-guided cross-attention: per character, standard multi-head
/// cross-attention of `v` against that character's embedding rows; outputs
/// are combined as `sum_i diag(gate_i) attn_i` and returned as the residual
/// increment.
pub fn masked_cross_attention(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    v: Var,
    embeds: &[Var],
    gates: &[Vec<f64>],
    prefix: &str,
    cfg: &DiTConfig,
) -> Result<Var> {
    let tokens = g.shape(v)[0];
    validate_gates(gates, embeds.len(), tokens)?;
    let proj = cross_attn_projections(g, binding, store, v, embeds, prefix, cfg, false);
    Ok(combine_gated(g, binding, store, &proj, gates, prefix, cfg, tokens))
}

/// Sinusoidal encoding of a scalar position into `dim` values.
fn sincos(pos: f64, dim: usize, out: &mut Vec<f64>) {
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
    if dim % 2 == 1 {
        out.push(0.0);
    }
}

/// 3D token positional table `[S, d]`: the first half of the width encodes
/// the frame index, the rest splits between the spatial axes. The frame
/// chunk layout is shared with [`temporal_pos_table`] so audio rows and
/// visual tokens agree on where time lives.
pub fn pos3d_table(cfg: &DiTConfig) -> Vec<f64> {
    let grid = cfg.grid();
    let (dt, dh) = (cfg.d / 2, cfg.d / 4);
    let dw = cfg.d - dt - dh;
    let mut out = Vec::with_capacity(grid.token_count() * cfg.d);
    for t in 0..grid.t_len {
        for h in 0..grid.h_len {
            for w in 0..grid.w_len {
                sincos(t as f64, dt, &mut out);
                sincos(h as f64, dh, &mut out);
                sincos(w as f64, dw, &mut out);
            }
        }
    }
    out
}

/// Per-frame temporal positions `[T', d]` for audio rows: the frame chunk of
/// [`pos3d_table`], zeros elsewhere.
pub fn temporal_pos_table(cfg: &DiTConfig) -> Vec<f64> {
    let dt = cfg.d / 2;
    let mut out = Vec::with_capacity(cfg.t_latent * cfg.d);
    for t in 0..cfg.t_latent {
        sincos(t as f64, dt, &mut out);
        out.extend(std::iter::repeat(0.0).take(cfg.d - dt));
    }
    out
}

/// Sinusoidal embedding of the diffusion timestep.
pub fn time_embedding(t_step: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    sincos(t_step as f64, d, &mut out);
    out
}

/// Rearrange a `[T', C, H', W']` latent into `[S, C * tau * tau]` patch rows
/// in canonical token order.
pub fn patchify_values(latent: &[f64], channels: usize, cfg: &DiTConfig) -> Vec<f64> {
    let (t_len, lh, lw, tau) = (cfg.t_latent, cfg.h_latent, cfg.w_latent, cfg.tau);
    debug_assert_eq!(latent.len(), t_len * channels * lh * lw);
    let grid = cfg.grid();
    let mut out = Vec::with_capacity(grid.token_count() * channels * tau * tau);
    for t in 0..grid.t_len {
        for h in 0..grid.h_len {
            for w in 0..grid.w_len {
                for c in 0..channels {
                    for dy in 0..tau {
                        for dx in 0..tau {
                            let (y, x) = (h * tau + dy, w * tau + dx);
                            out.push(latent[((t * channels + c) * lh + y) * lw + x]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify_values`].
pub fn unpatchify_values(patches: &[f64], channels: usize, cfg: &DiTConfig) -> Vec<f64> {
    let (t_len, lh, lw, tau) = (cfg.t_latent, cfg.h_latent, cfg.w_latent, cfg.tau);
    let grid = cfg.grid();
    debug_assert_eq!(patches.len(), grid.token_count() * channels * tau * tau);
    let mut out = vec![0f64; t_len * channels * lh * lw];
    let patch_len = channels * tau * tau;
    let mut s = 0usize;
    for t in 0..grid.t_len {
        for h in 0..grid.h_len {
            for w in 0..grid.w_len {
                let patch = &patches[s * patch_len..(s + 1) * patch_len];
                let mut i = 0usize;
                for c in 0..channels {
                    for dy in 0..tau {
                        for dx in 0..tau {
                            let (y, x) = (h * tau + dy, w * tau + dx);
                            out[((t * channels + c) * lh + y) * lw + x] = patch[i];
                            i += 1;
                        }
                    }
                }
                s += 1;
            }
        }
    }
    out
}

/// Inputs of one denoiser evaluation.
pub struct DenoiserInputs<'a> {
    /// `[T', 3C', h', w']`: noised video channels plus clean conditioning
    /// channels.
    pub z_t: &'a [f64],
    pub t_step: usize,
    /// `[k, d]` text rows.
    pub text: Var,
    /// Per character `[q, d]`.
    pub face: &'a [Var],
    /// Per character `[T', d]`.
    pub audio: &'a [Var],
    /// Per layer, per character, `[S]` face gates.
    pub gates_face: &'a [Vec<Vec<f64>>],
    /// Per layer, per character, `[S]` audio gates.
    pub gates_audio: &'a [Vec<Vec<f64>>],
}

/// Per-layer gate resolver invoked with the layer index and that layer's
/// face cross-attention taps; returns (face gates, audio gates), each
/// per-character rows of length `S`.
pub type GateFn<'f> =
    &'f mut dyn FnMut(&mut Graph, usize, &LayerTaps) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>;

pub struct DenoiserOutput {
    /// `[S, C' * tau * tau]` predicted noise in patch layout.
    pub eps_tokens: Var,
    /// Face cross-attention taps per layer.
    pub taps: Vec<LayerTaps>,
}

/// Full denoiser forward pass on the tape with fixed per-layer gates.
pub fn denoiser_forward(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    cfg: &DiTConfig,
    inputs: &DenoiserInputs,
) -> Result<DenoiserOutput> {
    if inputs.gates_face.len() != cfg.layers || inputs.gates_audio.len() != cfg.layers {
        return Err(Error::input(format!(
            "gates required for every one of {} layers",
            cfg.layers
        )));
    }
    let face = inputs.gates_face;
    let audio = inputs.gates_audio;
    let mut fixed = move |_: &mut Graph, l: usize, _: &LayerTaps| Ok((face[l].clone(), audio[l].clone()));
    denoiser_forward_with_gates(g, binding, store, cfg, inputs, &mut fixed)
}

/// Denoiser forward pass resolving gates per layer through a callback (the
/// per-step router path at inference).
pub fn denoiser_forward_with_gates(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    cfg: &DiTConfig,
    inputs: &DenoiserInputs,
    gate_fn: GateFn,
) -> Result<DenoiserOutput> {
    cfg.validate()?;
    let tokens = cfg.tokens();
    let full_latent = cfg.t_latent * 3 * cfg.c_latent * cfg.h_latent * cfg.w_latent;
    if inputs.z_t.len() != full_latent {
        return Err(Error::shape(format!(
            "z_t must have {full_latent} values, got {}",
            inputs.z_t.len()
        )));
    }
    if inputs.face.len() != cfg.n_chars || inputs.audio.len() != cfg.n_chars {
        return Err(Error::shape(format!(
            "embeddings required for {} characters",
            cfg.n_chars
        )));
    }

    // Patchify + positions + timestep.
    let patches = patchify_values(inputs.z_t, 3 * cfg.c_latent, cfg);
    let patches = g.constant(&[tokens, cfg.patch_dim()], &patches);
    let embedded = g.matmul(patches, binding.var(store.idx("dit.patch_w")));
    let embedded = g.add_bias(embedded, binding.var(store.idx("dit.patch_b")));
    let pos = pos3d_table(cfg);
    let pos = g.constant(&[tokens, cfg.d], &pos);
    let visual = g.add(embedded, pos);
    let time = time_embedding(inputs.t_step, cfg.d);
    let time = g.constant(&[cfg.d], &time);
    let visual = g.add_bias(visual, time);

    // Audio rows carry the shared temporal encoding so attention can align
    // frames.
    let tpos = temporal_pos_table(cfg);
    let tpos = g.constant(&[cfg.t_latent, cfg.d], &tpos);
    let audio_pos: Vec<Var> = inputs.audio.iter().map(|&a| g.add(a, tpos)).collect();

    let mut x = g.concat_rows(visual, inputs.text);
    let mut taps = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |suffix: &str| format!("dit.l{l}.{suffix}");

        let h1 = layer_norm(g, binding, store, x, &p("ln1.g"), &p("ln1.b"));
        let q = lora_matmul(g, binding, store, h1, &p("attn.wq"), cfg);
        let k = lora_matmul(g, binding, store, h1, &p("attn.wk"), cfg);
        let v = lora_matmul(g, binding, store, h1, &p("attn.wv"), cfg);
        let ctx = multi_head_attention(g, q, k, v, cfg.heads, cfg.head_dim());
        let attn_out = lora_matmul(g, binding, store, ctx, &p("attn.wo"), cfg);
        x = g.add(x, attn_out);

        let h2 = layer_norm(g, binding, store, x, &p("ln2.g"), &p("ln2.b"));
        let m1 = lora_matmul(g, binding, store, h2, &p("mlp.w1"), cfg);
        let m1 = g.add_bias(m1, binding.var(store.idx(&p("mlp.b1"))));
        let m1 = g.gelu(m1);
        let m2 = lora_matmul(g, binding, store, m1, &p("mlp.w2"), cfg);
        let m2 = g.add_bias(m2, binding.var(store.idx(&p("mlp.b2"))));
        x = g.add(x, m2);

        // Visual rows only take part in the masked cross-attention.
        let v_rows = g.slice_rows(x, 0, tokens);
        let text_rows = g.slice_rows(x, tokens, cfg.text_len);

        let face_src = layer_norm(g, binding, store, v_rows, &p("face.ln.g"), &p("face.ln.b"));
        let face_proj =
            cross_attn_projections(g, binding, store, face_src, inputs.face, &p("face"), cfg, true);
        let layer_taps = face_proj.taps.as_ref().expect("taps exported");
        let (face_gates, audio_gates) = gate_fn(g, l, layer_taps)?;
        validate_gates(&face_gates, cfg.n_chars, tokens)?;
        validate_gates(&audio_gates, cfg.n_chars, tokens)?;
        let face_inc =
            combine_gated(g, binding, store, &face_proj, &face_gates, &p("face"), cfg, tokens);
        let v_refined = g.add(v_rows, face_inc);

        let audio_src =
            layer_norm(g, binding, store, v_refined, &p("audio.ln.g"), &p("audio.ln.b"));
        let audio_proj =
            cross_attn_projections(g, binding, store, audio_src, &audio_pos, &p("audio"), cfg, false);
        let audio_inc = combine_gated(
            g,
            binding,
            store,
            &audio_proj,
            &audio_gates,
            &p("audio"),
            cfg,
            tokens,
        );
        let base = if cfg.audio_residual_on_refined {
            v_refined
        } else {
            v_rows
        };
        let v_final = g.add(base, audio_inc);
        taps.push(face_proj.taps.expect("taps exported"));
        x = g.concat_rows(v_final, text_rows);
    }

    let v_out = g.slice_rows(x, 0, tokens);
    let h = layer_norm(g, binding, store, v_out, "dit.final_ln.g", "dit.final_ln.b");
    let eps = g.matmul(h, binding.var(store.idx("dit.head_w")));
    let eps_tokens = g.add_bias(eps, binding.var(store.idx("dit.head_b")));
    Ok(DenoiserOutput { eps_tokens, taps })
}

/// Mask-weighted mean-squared diffusion loss on patch-layout tensors. With
/// `apply_dynamic`, per-element weights are `1 + kappa * union_mask`
/// (broadcast over channels); otherwise uniform.
pub fn diffusion_loss(
    g: &mut Graph,
    eps_hat: Var,
    eps_target: &[f64],
    dynamic_mask: Option<&[f64]>,
    apply_dynamic: bool,
    kappa: f64,
    cfg: &DiTConfig,
) -> Result<Var> {
    let shape = g.shape(eps_hat).to_vec();
    let count: usize = shape.iter().product();
    if eps_target.len() != count {
        return Err(Error::shape(format!(
            "target has {} values, prediction {count}",
            eps_target.len()
        )));
    }
    let target = g.constant(&shape, eps_target);
    let diff = g.sub(eps_hat, target);
    let sq = g.mul(diff, diff);
    let weighted = if apply_dynamic {
        let mask = dynamic_mask.ok_or_else(|| {
            Error::input("dynamic loss requested without a mask".to_string())
        })?;
        // union mask arrives at latent resolution [T', h', w']; broadcast
        // over video channels and patchify into the token layout.
        let per_frame = cfg.h_latent * cfg.w_latent;
        if mask.len() != cfg.t_latent * per_frame {
            return Err(Error::shape(format!(
                "dynamic mask must have {} values",
                cfg.t_latent * per_frame
            )));
        }
        let mut latent_w = vec![0f64; cfg.video_latent_len()];
        for t in 0..cfg.t_latent {
            for c in 0..cfg.c_latent {
                for i in 0..per_frame {
                    latent_w[(t * cfg.c_latent + c) * per_frame + i] =
                        1.0 + kappa * mask[t * per_frame + i];
                }
            }
        }
        let w_patches = patchify_values(&latent_w, cfg.c_latent, cfg);
        let w = g.constant(&shape, &w_patches);
        g.mul(sq, w)
    } else {
        sq
    };
    Ok(g.mean_all(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use crate::conditioning::register_conditioning_params;

    fn full_store(cfg: &DiTConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_dit_params(&mut store, cfg, &mut rng);
        register_conditioning_params(&mut store, cfg, &mut rng);
        store
    }

    fn const_embeds(g: &mut Graph, rows: usize, d: usize, n: usize, seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let vals: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
                g.constant(&[rows, d], &vals)
            })
            .collect()
    }

    fn uniform_gates(cfg: &DiTConfig, value: f64) -> Vec<Vec<Vec<f64>>> {
        vec![vec![vec![value; cfg.tokens()]; cfg.n_chars]; cfg.layers]
    }

    fn run_forward(
        cfg: &DiTConfig,
        store: &ParamStore,
        z_t: &[f64],
        gates_face: &[Vec<Vec<f64>>],
        gates_audio: &[Vec<Vec<f64>>],
        face_seed: u64,
        audio_seed: u64,
    ) -> (Graph, DenoiserOutput) {
        let mut g = Graph::new();
        let binding = store.bind(&mut g, &|_| false);
        let text = {
            let vals = vec![0.1f64; cfg.text_len * cfg.d];
            g.constant(&[cfg.text_len, cfg.d], &vals)
        };
        let face = const_embeds(&mut g, cfg.q_face, cfg.d, cfg.n_chars, face_seed);
        let audio = const_embeds(&mut g, cfg.t_latent, cfg.d, cfg.n_chars, audio_seed);
        let inputs = DenoiserInputs {
            z_t,
            t_step: 17,
            text,
            face: &face,
            audio: &audio,
            gates_face,
            gates_audio,
        };
        let out = denoiser_forward(&mut g, &binding, store, cfg, &inputs).unwrap();
        (g, out)
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn add_noise_contracts() {
        let s = NoiseSchedule::linear(10, 1e-9, 2e-9).unwrap();
        let z0 = vec![1.0, -2.0, 0.5];
        // Near-zero betas: z_t ~ z_0.
        let z = add_noise(&z0, 0, &[0.0; 3], &s).unwrap();
        for (a, b) in z.iter().zip(&z0) {
            assert!((a - b).abs() < 1e-8);
        }

        let s = NoiseSchedule::linear(10, 1e-2, 0.2).unwrap();
        let z = add_noise(&z0, 4, &[0.0; 3], &s).unwrap();
        let sa = s.alpha_bars[4].sqrt();
        for (a, b) in z.iter().zip(&z0) {
            assert!((a - sa * b).abs() < 1e-12);
        }
        assert!(add_noise(&z0, 10, &[0.0; 3], &s).is_err());
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let t = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let count = 100_000;
        // z_0 drawn from a known distribution with Var = 0.25.
        let mut sum = 0f64;
        let mut sum_sq = 0f64;
        for _ in 0..count {
            let z0: f64 = 0.5
                * {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                };
            let eps: f64 = {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            let z = add_noise(&[z0], t, &[eps], &s).unwrap()[0];
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        let expect = s.alpha_bars[t] * 0.25 + (1.0 - s.alpha_bars[t]);
        assert!(
            (var - expect).abs() / expect < 0.02,
            "var {var} vs expected {expect}"
        );
    }

    #[test]
    fn patchify_round_trip_and_locality() {
        let cfg = DiTConfig::tiny();
        let channels = 3 * cfg.c_latent;
        let len = cfg.t_latent * channels * cfg.h_latent * cfg.w_latent;
        let vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.37).collect();
        let patches = patchify_values(&vals, channels, &cfg);
        let back = unpatchify_values(&patches, channels, &cfg);
        assert_eq!(vals, back);

        // Perturbing one latent patch changes exactly one token row.
        let mut vals2 = vals.clone();
        vals2[0] += 5.0; // (t=0, c=0, y=0, x=0) -> token 0
        let patches2 = patchify_values(&vals2, channels, &cfg);
        let patch_len = channels * cfg.tau * cfg.tau;
        let changed: Vec<usize> = (0..patches.len())
            .filter(|&i| patches[i] != patches2[i])
            .map(|i| i / patch_len)
            .collect();
        assert!(changed.iter().all(|&s| s == 0));
    }

    #[test]
    fn toy_token_count_matches_formula() {
        let cfg = DiTConfig::toy();
        assert_eq!(cfg.tokens(), 8 * 4 * 4);
    }

    #[test]
    fn masked_cross_attention_gate_contracts() {
        let cfg = DiTConfig::tiny();
        let store = full_store(&cfg, 3);
        let tokens = cfg.tokens();

        let mut g = Graph::new();
        let binding = store.bind(&mut g, &|_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v_vals: Vec<f64> = (0..tokens * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = g.constant(&[tokens, cfg.d], &v_vals);
        let embeds = const_embeds(&mut g, cfg.q_face, cfg.d, 2, 6);

        // All-zero gates: zero increment.
        let zero_gates = vec![vec![0.0; tokens]; 2];
        let inc = masked_cross_attention(
            &mut g, &binding, &store, v, &embeds, &zero_gates, "dit.l0.face", &cfg,
        )
        .unwrap();
        assert!(g.value(inc).iter().all(|&x| x == 0.0));

        // Gate row 1 ones, row 2 zeros: equals single-character attention.
        let gates = vec![vec![1.0; tokens], vec![0.0; tokens]];
        let inc = masked_cross_attention(
            &mut g, &binding, &store, v, &embeds, &gates, "dit.l0.face", &cfg,
        )
        .unwrap();
        let single = masked_cross_attention(
            &mut g,
            &binding,
            &store,
            v,
            &embeds[0..1],
            &[vec![1.0; tokens]],
            "dit.l0.face",
            &cfg,
        )
        .unwrap();
        for (a, b) in g.value(inc).iter().zip(g.value(single)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Brute-force per-character cross-attention oracle in plain loops.
    fn cross_attention_oracle(
        v: &[f64],
        embeds: &[Vec<f64>],
        gates: &[Vec<f64>],
        wq: &[f64],
        wk: &[f64],
        wv: &[f64],
        wo: &[f64],
        tokens: usize,
        m: usize,
        d: usize,
        heads: usize,
    ) -> Vec<f64> {
        let hd = d / heads;
        let mm = |x: &[f64], w: &[f64], rows: usize| -> Vec<f64> {
            let mut out = vec![0f64; rows * d];
            for r in 0..rows {
                for c in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += x[r * d + k] * w[k * d + c];
                    }
                    out[r * d + c] = acc;
                }
            }
            out
        };
        let q = mm(v, wq, tokens);
        let mut total = vec![0f64; tokens * d];
        for (i, e) in embeds.iter().enumerate() {
            let k = mm(e, wk, m);
            let val = mm(e, wv, m);
            let mut ctx = vec![0f64; tokens * d];
            for h in 0..heads {
                for s in 0..tokens {
                    let mut scores = vec![0f64; m];
                    for r in 0..m {
                        let mut acc = 0.0;
                        for c in 0..hd {
                            acc += q[s * d + h * hd + c] * k[r * d + h * hd + c];
                        }
                        scores[r] = acc / (hd as f64).sqrt();
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for c in 0..hd {
                        let mut acc = 0.0;
                        for r in 0..m {
                            acc += exps[r] / z * val[r * d + h * hd + c];
                        }
                        ctx[s * d + h * hd + c] = acc;
                    }
                }
            }
            let out = mm(&ctx, wo, tokens);
            for s in 0..tokens {
                for c in 0..d {
                    total[s * d + c] += gates[i][s] * out[s * d + c];
                }
            }
        }
        total
    }

    #[test]
    fn masked_cross_attention_matches_oracle() {
        let cfg = DiTConfig::tiny();
        let store = full_store(&cfg, 7);
        let tokens = cfg.tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..10 {
            let v_vals: Vec<f64> =
                (0..tokens * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e_vals: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..cfg.q_face * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let gates: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..tokens).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();

            let mut g = Graph::new();
            let binding = store.bind(&mut g, &|_| false);
            let v = g.constant(&[tokens, cfg.d], &v_vals);
            let embeds: Vec<Var> = e_vals
                .iter()
                .map(|e| g.constant(&[cfg.q_face, cfg.d], e))
                .collect();
            let inc = masked_cross_attention(
                &mut g, &binding, &store, v, &embeds, &gates, "dit.l1.face", &cfg,
            )
            .unwrap();

            let oracle = cross_attention_oracle(
                &v_vals,
                &e_vals,
                &gates,
                &store.get("dit.l1.face.wq").value,
                &store.get("dit.l1.face.wk").value,
                &store.get("dit.l1.face.wv").value,
                &store.get("dit.l1.face.wo").value,
                tokens,
                cfg.q_face,
                cfg.d,
                cfg.heads,
            );
            for (a, b) in g.value(inc).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-5, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_zero_head_and_gate_independence() {
        let cfg = DiTConfig::tiny();
        let mut store = full_store(&cfg, 11);
        let latent_len = cfg.t_latent * 3 * cfg.c_latent * cfg.h_latent * cfg.w_latent;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z_t: Vec<f64> = (0..latent_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Zero output head forces eps = 0.
        for name in ["dit.head_w", "dit.head_b"] {
            let idx = store.idx(name);
            store.value_mut(idx).iter_mut().for_each(|v| *v = 0.0);
        }
        let gates = uniform_gates(&cfg, 1.0);
        let (g, out) = run_forward(&cfg, &store, &z_t, &gates, &gates, 1, 2);
        assert!(g.value(out.eps_tokens).iter().all(|&v| v == 0.0));

        // With all gates zero, perturbing the embeddings changes nothing.
        let store = full_store(&cfg, 11);
        let zero = uniform_gates(&cfg, 0.0);
        let (g1, o1) = run_forward(&cfg, &store, &z_t, &zero, &zero, 1, 2);
        let (g2, o2) = run_forward(&cfg, &store, &z_t, &zero, &zero, 31, 77);
        assert_eq!(g1.value(o1.eps_tokens), g2.value(o2.eps_tokens));

        // Taps have the contracted shapes.
        assert_eq!(o1.taps.len(), cfg.layers);
        assert_eq!(g1.shape(o1.taps[0].q_heads[0]), &[cfg.tokens(), cfg.head_dim()]);
        assert_eq!(
            g1.shape(o1.taps[0].k_heads[0]),
            &[cfg.n_chars * cfg.q_face, cfg.head_dim()]
        );
        assert_eq!(o1.taps[0].q_heads.len(), cfg.heads);
    }

    #[test]
    fn diffusion_loss_contracts() {
        let cfg = DiTConfig::tiny();
        let tokens = cfg.tokens();
        let patch = cfg.out_patch_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pred: Vec<f64> = (0..tokens * patch).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Perfect prediction.
        let mut g = Graph::new();
        let p = g.constant(&[tokens, patch], &pred);
        let loss = diffusion_loss(&mut g, p, &pred, None, false, 1.0, &cfg).unwrap();
        assert!(g.scalar(loss).abs() < 1e-12);

        // Dynamic with all-zero mask equals plain MSE; all-one mask with
        // kappa 1 doubles it.
        let target: Vec<f64> = (0..tokens * patch).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let latent_mask0 = vec![0f64; cfg.t_latent * cfg.h_latent * cfg.w_latent];
        let latent_mask1 = vec![1f64; cfg.t_latent * cfg.h_latent * cfg.w_latent];
        let mut g = Graph::new();
        let p = g.constant(&[tokens, patch], &pred);
        let plain = diffusion_loss(&mut g, p, &target, None, false, 1.0, &cfg).unwrap();
        let zeroed = diffusion_loss(&mut g, p, &target, Some(&latent_mask0), true, 1.0, &cfg).unwrap();
        let doubled = diffusion_loss(&mut g, p, &target, Some(&latent_mask1), true, 1.0, &cfg).unwrap();
        assert!((g.scalar(plain) - g.scalar(zeroed)).abs() < 1e-12);
        assert!((2.0 * g.scalar(plain) - g.scalar(doubled)).abs() < 1e-10);
    }

    #[test]
    fn lora_disabled_and_dense_merge_oracle() {
        let mut cfg = DiTConfig::tiny();
        let store = full_store(&cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x_vals: Vec<f64> = (0..3 * cfg.d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Zero-initialized B: adapter output equals the base.
        let mut g = Graph::new();
        let binding = store.bind(&mut g, &|_| false);
        let x = g.constant(&[3, cfg.d], &x_vals);
        let with = lora_matmul(&mut g, &binding, &store, x, "dit.l0.attn.wq", &cfg);
        let w = binding.var(store.idx("dit.l0.attn.wq"));
        let base = g.matmul(x, w);
        assert_eq!(g.value(with), g.value(base));

        // Rank 0 config ignores adapters entirely.
        cfg.lora_rank = 0;
        let with0 = lora_matmul(&mut g, &binding, &store, x, "dit.l0.attn.wq", &cfg);
        assert_eq!(g.value(with0), g.value(base));
        cfg.lora_rank = 2;

        // Random A, B: equals the explicit dense merge (W + (alpha/r) B A).
        let mut store2 = store.clone();
        let bi = store2.idx("dit.l0.attn.wq.lora_b");
        let b_rand: Vec<f64> = (0..cfg.d * cfg.lora_rank).map(|_| rng.gen_range(-0.3..0.3)).collect();
        store2.value_mut(bi).copy_from_slice(&b_rand);

        let mut g2 = Graph::new();
        let b2 = store2.bind(&mut g2, &|_| false);
        let x2 = g2.constant(&[3, cfg.d], &x_vals);
        let with = lora_matmul(&mut g2, &b2, &store2, x2, "dit.l0.attn.wq", &cfg);

        let w = &store2.get("dit.l0.attn.wq").value;
        let a = &store2.get("dit.l0.attn.wq.lora_a").value;
        let b = &store2.get("dit.l0.attn.wq.lora_b").value;
        let r = cfg.lora_rank;
        let scale = cfg.lora_alpha / r as f64;
        let mut dense = vec![0f64; cfg.d * cfg.d];
        for i in 0..cfg.d {
            for j in 0..cfg.d {
                let mut acc = w[i * cfg.d + j];
                for k in 0..r {
                    acc += scale * b[j * r + k] * a[k * cfg.d + i];
                }
                dense[i * cfg.d + j] = acc;
            }
        }
        let mut expect = vec![0f64; 3 * cfg.d];
        for row in 0..3 {
            for j in 0..cfg.d {
                let mut acc = 0.0;
                for i in 0..cfg.d {
                    acc += x_vals[row * cfg.d + i] * dense[i * cfg.d + j];
                }
                expect[row * cfg.d + j] = acc;
            }
        }
        for (got, want) in g2.value(with).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn audio_residual_base_is_paper_literal() {
        // With the face gate zero, v'' = v + audio increment computed on v
        // directly: flipping the refined-base switch changes nothing.
        let cfg_v = DiTConfig::tiny();
        let mut cfg_vp = DiTConfig::tiny();
        cfg_vp.audio_residual_on_refined = true;
        let store = full_store(&cfg_v, 23);
        let latent_len = cfg_v.t_latent * 3 * cfg_v.c_latent * cfg_v.h_latent * cfg_v.w_latent;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let z_t: Vec<f64> = (0..latent_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zero_face = uniform_gates(&cfg_v, 0.0);
        let audio_gates = uniform_gates(&cfg_v, 1.0);
        let (ga, oa) = run_forward(&cfg_v, &store, &z_t, &zero_face, &audio_gates, 3, 4);
        let (gb, ob) = run_forward(&cfg_vp, &store, &z_t, &zero_face, &audio_gates, 3, 4);
        for (a, b) in ga.value(oa.eps_tokens).iter().zip(gb.value(ob.eps_tokens)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
