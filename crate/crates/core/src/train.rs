//! Three-stage training orchestration: freeze schedules, condition dropout,
//! two-task hybrid batching, and teacher forcing.
//!
//! Stage 1 trains the denoiser base and face encoder without audio, dropping
//! the inpainting frame half the time and applying the dynamic mask loss half
//! the time. Stage 2 adds audio and LoRA adapters with everything else
//! frozen. Stage 3 adds the router, teacher-forced with noised ground-truth
//! gates and detached from the denoising loss. Batches mix single- and
//! multi-character clips; single-character conditions are replicated into
//! both slots with an identity assignment.

use std::collections::HashSet;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::conditioning::{audio_project, face_encode, text_embed, AudioCharacterMatrix};
use crate::dit::{
    add_noise, denoiser_forward, diffusion_loss, patchify_values, DiTConfig, DenoiserInputs,
    NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::mask::{compose_av, hard_mask_from_gt, mask_to_cv_matrix, RoutingMask};
use crate::params::{Param, ParamGroup, ParamStore};
use crate::router::{
    loss_router, mask_targets_token_major, router_forward, RouterLossWeights,
};
use crate::synth::{splitmix64, ClipRecord, DatasetManifest, MouthBox, Split};
use crate::tensor::{downsample_mask, Tensor};

/// Independent per-condition dropout rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub inpaint: f64,
    pub reference: f64,
    pub audio: f64,
    pub text: f64,
}

impl DropoutRates {
    pub fn none() -> Self {
        DropoutRates {
            inpaint: 0.0,
            reference: 0.0,
            audio: 0.0,
            text: 0.0,
        }
    }
}

/// Which conditions one sample keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropDecision {
    pub inpaint: bool,
    pub reference: bool,
    pub audio: bool,
    pub text: bool,
}

/// Draw independent drop decisions for one sample.
pub fn draw_drops(rates: &DropoutRates, rng: &mut ChaCha8Rng) -> DropDecision {
    DropDecision {
        inpaint: rng.gen_bool(rates.inpaint),
        reference: rng.gen_bool(rates.reference),
        audio: rng.gen_bool(rates.audio),
        text: rng.gen_bool(rates.text),
    }
}

/// Teacher-forcing augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcingConfig {
    /// Probability a forced cell is dropped to background.
    pub p_drop: f64,
    /// Gaussian noise added to forced mask values.
    pub sigma_noise: f64,
}

impl Default for TeacherForcingConfig {
    fn default() -> Self {
        TeacherForcingConfig {
            p_drop: 0.1,
            sigma_noise: 0.05,
        }
    }
}

/// One training stage's full recipe.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub stage: u32,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: DropoutRates,
    /// Audio conditioning disabled entirely (stage 1).
    pub audio_off: bool,
    pub teacher_forcing: bool,
    pub teacher_cfg: TeacherForcingConfig,
    /// Probability of applying the dynamic mask loss per sample.
    pub dynamic_mask_rate: f64,
    pub kappa: f64,
    /// Router loss active (stage 3).
    pub router_loss: bool,
    pub router_weights: RouterLossWeights,
    pub router_loss_mean: bool,
    /// Weight of the router loss against the denoising loss.
    pub router_loss_weight: f64,
}

impl StagePlan {
    pub fn stage1(steps: usize, batch_size: usize, lr: f64, inpaint_drop: f64, dml_rate: f64) -> Self {
        StagePlan {
            stage: 1,
            steps,
            batch_size,
            lr,
            dropout: DropoutRates {
                inpaint: inpaint_drop,
                reference: 0.0,
                audio: 0.0,
                text: 0.0,
            },
            audio_off: true,
            teacher_forcing: false,
            teacher_cfg: TeacherForcingConfig::default(),
            dynamic_mask_rate: dml_rate,
            kappa: 1.0,
            router_loss: false,
            router_weights: RouterLossWeights::default(),
            router_loss_mean: false,
            router_loss_weight: 1.0,
        }
    }

    pub fn stage2(steps: usize, batch_size: usize, lr: f64, drop: f64) -> Self {
        StagePlan {
            stage: 2,
            steps,
            batch_size,
            lr,
            dropout: DropoutRates {
                inpaint: drop,
                reference: drop,
                audio: drop,
                text: drop,
            },
            audio_off: false,
            teacher_forcing: false,
            teacher_cfg: TeacherForcingConfig::default(),
            dynamic_mask_rate: 0.0,
            kappa: 1.0,
            router_loss: false,
            router_weights: RouterLossWeights::default(),
            router_loss_mean: false,
            router_loss_weight: 1.0,
        }
    }

    pub fn stage3(
        steps: usize,
        batch_size: usize,
        lr: f64,
        drop: f64,
        teacher_cfg: TeacherForcingConfig,
        router_weights: RouterLossWeights,
        router_loss_mean: bool,
        router_loss_weight: f64,
    ) -> Self {
        StagePlan {
            stage: 3,
            steps,
            batch_size,
            lr,
            dropout: DropoutRates {
                inpaint: drop,
                reference: drop,
                audio: drop,
                text: drop,
            },
            audio_off: false,
            teacher_forcing: true,
            teacher_cfg,
            dynamic_mask_rate: 0.0,
            kappa: 1.0,
            router_loss: true,
            router_weights,
            router_loss_mean,
            router_loss_weight,
        }
    }

    /// Trainable parameter groups per the stage's freeze schedule.
    pub fn trainable_groups(&self) -> HashSet<ParamGroup> {
        let groups: &[ParamGroup] = match self.stage {
            1 => &[
                ParamGroup::DitBase,
                ParamGroup::TextEmbed,
                ParamGroup::FaceEncoder,
                ParamGroup::FaceCrossAttn,
            ],
            2 => &[
                ParamGroup::AudioEncoder,
                ParamGroup::AudioCrossAttn,
                ParamGroup::FaceEncoder,
                ParamGroup::FaceCrossAttn,
                ParamGroup::Lora,
            ],
            _ => &[
                ParamGroup::Router,
                ParamGroup::AudioCrossAttn,
                ParamGroup::FaceCrossAttn,
                ParamGroup::Lora,
            ],
        };
        groups.iter().copied().collect()
    }

    pub fn is_trainable(&self, p: &Param) -> bool {
        self.trainable_groups().contains(&p.group)
    }
}

/// Teacher-forced gates: ground-truth cells dropped to background with
/// probability `p_drop`, Gaussian noise added, values clamped to `[0, 1]`
/// and renormalized to the class simplex.
pub fn teacher_force_mask(
    gt: &RoutingMask,
    cfg: &TeacherForcingConfig,
    rng: &mut ChaCha8Rng,
) -> RoutingMask {
    let classes = gt.classes();
    let plane = gt.grid.token_count();
    let mut probs = gt.probs.clone();
    for l in 0..gt.layers {
        for s in 0..plane {
            let base = |c: usize| (l * classes + c) * plane + s;
            if cfg.p_drop > 0.0 && rng.gen_bool(cfg.p_drop) {
                for c in 0..classes {
                    probs[base(c)] = if c == classes - 1 { 1.0 } else { 0.0 };
                }
            }
            if cfg.sigma_noise > 0.0 {
                for c in 0..classes {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let gauss = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    probs[base(c)] = (probs[base(c)] + cfg.sigma_noise * gauss).clamp(0.0, 1.0);
                }
            }
            let sum: f64 = (0..classes).map(|c| probs[base(c)]).sum();
            if sum <= 1e-12 {
                for c in 0..classes {
                    probs[base(c)] = if c == classes - 1 { 1.0 } else { 0.0 };
                }
            } else {
                for c in 0..classes {
                    probs[base(c)] /= sum;
                }
            }
        }
    }
    RoutingMask::new(gt.layers, gt.n_chars, gt.grid, probs).expect("shape preserved")
}

/// Per-layer face and audio gates from a routing mask: face rows are the
/// character channels, audio rows are the audio-character permutation applied
/// to them. No inflation at training time.
pub fn gates_from_mask(
    mask: &RoutingMask,
    a_ac: &[Vec<u8>],
    audio_on: bool,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    let tokens = mask.grid.token_count();
    let mut face = Vec::with_capacity(mask.layers);
    let mut audio = Vec::with_capacity(mask.layers);
    for l in 0..mask.layers {
        let cv = mask_to_cv_matrix(mask, l)?;
        let face_rows: Vec<Vec<f64>> = (0..cv.n).map(|i| cv.row(i).to_vec()).collect();
        let audio_rows: Vec<Vec<f64>> = if audio_on {
            let av = compose_av(a_ac, &cv)?;
            (0..av.n)
                .map(|i| av.row(i).iter().map(|&v| v.clamp(0.0, 1.0)).collect())
                .collect()
        } else {
            vec![vec![0.0; tokens]; cv.n]
        };
        face.push(face_rows);
        audio.push(audio_rows);
    }
    Ok((face, audio))
}

/// One clip preprocessed for training: pooled latents, ground-truth masks at
/// token and latent resolution, and conditions replicated to the full
/// character-slot count.
#[derive(Debug, Clone)]
pub struct PrepClip {
    pub video_latent: Vec<f64>,
    pub ref_latent_frame: Vec<f64>,
    pub inpaint_pixels: Vec<f32>,
    pub frame_h: usize,
    pub frame_w: usize,
    pub mouth_boxes0: Vec<MouthBox>,
    /// Soft union of character coverages at latent resolution `[T', h', w']`.
    pub gt_latent_union: Vec<f64>,
    /// Hard per-layer routing mask at token resolution.
    pub gt_hard: RoutingMask,
    pub a_ac: Vec<Vec<u8>>,
    /// `[n_slots, T_a, d_a]`.
    pub audio_feats: Vec<f64>,
    pub prompt_id: usize,
    pub refs: Tensor,
    pub n_chars_original: usize,
}

impl PrepClip {
    /// Build from a clip record, replicating single-character conditions into
    /// both slots (identity assignment; the mask occupies slot 0).
    pub fn build(record: &ClipRecord, cfg: &DiTConfig) -> Result<PrepClip> {
        let vshape = record.video.shape();
        let (t_len, h, w) = (vshape[0], vshape[2], vshape[3]);
        let factor = cfg.spatial_factor;
        let (lh, lw) = (h / factor, w / factor);
        let vdata = record.video.as_f32()?;

        let frame_latent = 3 * lh * lw;
        let mut video_latent = vec![0f64; t_len * frame_latent];
        for t in 0..t_len {
            pool_frame(
                &vdata[t * 3 * h * w..(t + 1) * 3 * h * w],
                h,
                w,
                factor,
                &mut video_latent[t * frame_latent..(t + 1) * frame_latent],
            );
        }

        let n_slots = cfg.n_chars;
        let n = record.n_chars;

        // Reference strip resized and pooled once (slot-replicated for
        // single-character clips).
        let refs = if n == n_slots {
            record.refs.clone()
        } else {
            let rdata = record.refs.as_f32()?;
            let mut dup = Vec::with_capacity(rdata.len() * n_slots);
            for _ in 0..n_slots {
                dup.extend_from_slice(rdata);
            }
            let mut shape = record.refs.shape().to_vec();
            shape[0] = n_slots;
            Tensor::from_f32(shape, dup)?
        };
        let rshape = refs.shape();
        let (rh, rw) = (rshape[2], rshape[3]);
        let rdata = refs.as_f32()?;
        let strip_w = n_slots * rw;
        let mut resized = vec![0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                let sy = y * rh / h;
                for x in 0..w {
                    let sx = x * strip_w / w;
                    let (char_idx, local_x) = (sx / rw, sx % rw);
                    resized[(c * h + y) * w + x] =
                        rdata[((char_idx * 3 + c) * rh + sy) * rw + local_x];
                }
            }
        }
        let mut ref_latent_frame = vec![0f64; frame_latent];
        pool_frame(&resized, h, w, factor, &mut ref_latent_frame);

        // Ground truth at latent and token resolutions. Single-character
        // masks occupy slot 0 only.
        let latent_soft = downsample_mask(&record.gt_masks, factor, 1)?;
        let token_soft = downsample_mask(&record.gt_masks, factor, cfg.tau)?;
        let pad_channels = |t: &Tensor, slots: usize| -> Result<Tensor> {
            if t.shape()[0] == slots {
                return Ok(t.clone());
            }
            let per = t.len() / t.shape()[0];
            let mut data = t.as_f32()?.to_vec();
            data.extend(std::iter::repeat(0f32).take(per * (slots - t.shape()[0])));
            let mut shape = t.shape().to_vec();
            shape[0] = slots;
            Tensor::from_f32(shape, data)
        };
        let latent_soft = pad_channels(&latent_soft, n_slots)?;
        let token_soft = pad_channels(&token_soft, n_slots)?;

        let union_len = t_len * lh * lw;
        let latent_data = latent_soft.as_f32()?;
        let mut gt_latent_union = vec![0f64; union_len];
        for c in 0..n_slots {
            for (i, u) in gt_latent_union.iter_mut().enumerate() {
                *u = (*u + f64::from(latent_data[c * union_len + i])).min(1.0);
            }
        }

        let gt_hard = hard_mask_from_gt(&token_soft, cfg.layers)?;

        let a_ac = if n == n_slots {
            record.a_ac.clone()
        } else {
            AudioCharacterMatrix::identity(n_slots).values
        };

        let ashape = record.audio_feats.shape();
        let (t_a, d_a) = (ashape[1], ashape[2]);
        let adata = record.audio_feats.as_f32()?;
        let mut audio_feats = Vec::with_capacity(n_slots * t_a * d_a);
        for slot in 0..n_slots {
            let src = slot.min(n - 1);
            audio_feats.extend(
                adata[src * t_a * d_a..(src + 1) * t_a * d_a]
                    .iter()
                    .map(|&v| f64::from(v)),
            );
        }

        Ok(PrepClip {
            video_latent,
            ref_latent_frame,
            inpaint_pixels: record.inpaint.as_f32()?.to_vec(),
            frame_h: h,
            frame_w: w,
            mouth_boxes0: record.mouth_boxes.iter().map(|b| b[0]).collect(),
            gt_latent_union,
            gt_hard,
            a_ac,
            audio_feats,
            prompt_id: record.prompt_id,
            refs,
            n_chars_original: n,
        })
    }
}

fn pool_frame(src: &[f32], h: usize, w: usize, factor: usize, out: &mut [f64]) {
    let (oh, ow) = (h / factor, w / factor);
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
}

/// Pool the inpainting frame with per-sample face-region noise drawn inside
/// the dilated mouth boxes.
pub fn noised_inpaint_latent(
    prep: &PrepClip,
    cfg: &DiTConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (h, w) = (prep.frame_h, prep.frame_w);
    let mut noised = prep.inpaint_pixels.clone();
    if cfg.sigma_face > 0.0 {
        for b in &prep.mouth_boxes0 {
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
                        noised[(c * h + y) * w + x] += (cfg.sigma_face * gauss) as f32;
                    }
                }
            }
        }
    }
    let factor = cfg.spatial_factor;
    let mut out = vec![0f64; 3 * (h / factor) * (w / factor)];
    pool_frame(&noised, h, w, factor, &mut out);
    out
}

/// Assemble the full `[T', 3C', h', w']` input latent from noised video
/// channels plus the two conditioning latents (frame 0 content, zero-padded
/// in time).
pub fn assemble_z(
    video_channels: &[f64],
    inpaint_frame0: Option<&[f64]>,
    ref_frame0: Option<&[f64]>,
    cfg: &DiTConfig,
) -> Vec<f64> {
    let (t_len, c, lh, lw) = (cfg.t_latent, cfg.c_latent, cfg.h_latent, cfg.w_latent);
    let frame = c * lh * lw;
    let mut z = vec![0f64; t_len * 3 * frame];
    for t in 0..t_len {
        let dst = &mut z[t * 3 * frame..(t + 1) * 3 * frame];
        dst[0..frame].copy_from_slice(&video_channels[t * frame..(t + 1) * frame]);
        if t == 0 {
            if let Some(inp) = inpaint_frame0 {
                dst[frame..2 * frame].copy_from_slice(&inp[0..frame]);
            }
            if let Some(r) = ref_frame0 {
                dst[2 * frame..3 * frame].copy_from_slice(&r[0..frame]);
            }
        }
    }
    z
}

/// Losses measured on one sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleLosses {
    pub l_d: f64,
    pub l_ce: f64,
    pub l_st: f64,
    pub l_layer: f64,
    pub l_router: f64,
}

/// Gradient accumulator aligned with the parameter store.
type GradVec = Vec<Option<Vec<f64>>>;

/// Forward + backward for one sample. Returns losses and per-parameter
/// gradients for the trainable set.
#[allow(clippy::too_many_lines)]
fn sample_step(
    prep: &PrepClip,
    store: &ParamStore,
    cfg: &DiTConfig,
    schedule: &NoiseSchedule,
    plan: &StagePlan,
    sample_seed: u64,
) -> Result<(SampleLosses, GradVec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let drops = draw_drops(&plan.dropout, &mut rng);
    let apply_dml =
        plan.dynamic_mask_rate > 0.0 && rng.gen_bool(plan.dynamic_mask_rate);
    let t_step = rng.gen_range(0..schedule.len());
    let video_len = cfg.video_latent_len();
    let eps: Vec<f64> = (0..video_len)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let noised_video = add_noise(&prep.video_latent, t_step, &eps, schedule)?;

    let inpaint_latent = if drops.inpaint {
        None
    } else {
        Some(noised_inpaint_latent(prep, cfg, &mut rng))
    };
    let ref_latent = if drops.reference {
        None
    } else {
        Some(prep.ref_latent_frame.clone())
    };
    let z_t = assemble_z(
        &noised_video,
        inpaint_latent.as_deref(),
        ref_latent.as_deref(),
        cfg,
    );

    // Gates: ground truth for stages 1-2, teacher-forced in stage 3.
    let gate_mask = if plan.teacher_forcing {
        teacher_force_mask(&prep.gt_hard, &plan.teacher_cfg, &mut rng)
    } else {
        prep.gt_hard.clone()
    };
    let audio_on = !plan.audio_off && !drops.audio;
    let (mut face_gates, audio_gates) = gates_from_mask(&gate_mask, &prep.a_ac, audio_on)?;
    if drops.reference {
        for layer in &mut face_gates {
            for row in layer.iter_mut() {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    let mut g = Graph::new();
    let binding = store.bind(&mut g, &|p| plan.is_trainable(p));

    // Conditions on the tape.
    let text = if drops.text {
        binding.var(store.idx("null.text"))
    } else {
        text_embed(&mut g, &binding, store, prep.prompt_id, cfg)?
    };
    let face_vars: Vec<_> = if drops.reference {
        (0..cfg.n_chars)
            .map(|_| binding.var(store.idx("null.face")))
            .collect()
    } else {
        face_encode(&mut g, &binding, store, &prep.refs, cfg)?.per_char
    };
    let audio_vars: Vec<_> = if audio_on {
        audio_project(&mut g, &binding, store, &prep.audio_feats, cfg.n_chars, cfg)?.per_char
    } else {
        // Null audio broadcast across frames via a ones column.
        let null = binding.var(store.idx("null.audio"));
        let null_row = g.reshape(null, &[1, cfg.d]);
        let ones_col = g.constant(&[cfg.t_latent, 1], &vec![1.0; cfg.t_latent]);
        let stacked = g.matmul(ones_col, null_row);
        (0..cfg.n_chars).map(|_| stacked).collect()
    };

    let inputs = DenoiserInputs {
        z_t: &z_t,
        t_step,
        text,
        face: &face_vars,
        audio: &audio_vars,
        gates_face: &face_gates,
        gates_audio: &audio_gates,
    };
    let out = denoiser_forward(&mut g, &binding, store, cfg, &inputs)?;

    let eps_patches = patchify_values(&eps, cfg.c_latent, cfg);
    let l_d = diffusion_loss(
        &mut g,
        out.eps_tokens,
        &eps_patches,
        Some(&prep.gt_latent_union),
        apply_dml,
        plan.kappa,
        cfg,
    )?;

    let mut losses = SampleLosses {
        l_d: g.scalar(l_d),
        ..SampleLosses::default()
    };

    let total = if plan.router_loss {
        let router_out = router_forward(&mut g, &binding, store, &out.taps, cfg, true)?;
        let targets = mask_targets_token_major(&prep.gt_hard);
        let terms = loss_router(
            &mut g,
            &router_out,
            &targets,
            plan.router_weights,
            plan.router_loss_mean,
        )?;
        losses.l_ce = g.scalar(terms.ce);
        losses.l_st = g.scalar(terms.st);
        losses.l_layer = g.scalar(terms.layer);
        losses.l_router = g.scalar(terms.total);
        let weighted = g.scale(terms.total, plan.router_loss_weight);
        g.add(l_d, weighted)
    } else {
        l_d
    };

    let grads = g.backward(total);
    let grad_vec: GradVec = (0..store.len())
        .map(|idx| grads.get(binding.var(idx)).map(|s| s.to_vec()))
        .collect();
    Ok((losses, grad_vec))
}

/// Adam optimizer over a parameter store.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Apply one update using summed gradients; only parameters with a
    /// gradient entry are touched, so frozen parameters stay bitwise intact.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradVec) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let value = store.value_mut(idx);
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Per-step loss summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: u32,
    pub l_d: f64,
    pub l_ce: f64,
    pub l_st: f64,
    pub l_layer: f64,
    pub l_router: f64,
}

/// Full stage report.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub logs: Vec<StepLog>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for log in &self.logs {
            out.push_str(&serde_json::to_string(log).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Load and preprocess the train split of a dataset.
pub fn load_train_set(
    manifest: &DatasetManifest,
    data_dir: &Path,
    cfg: &DiTConfig,
) -> Result<Vec<PrepClip>> {
    let entries = manifest.split_paths(Split::Train);
    if entries.is_empty() {
        return Err(Error::input("train split is empty".to_string()));
    }
    entries
        .iter()
        .map(|e| {
            let (record, _) = crate::synth::load_clip(&data_dir.join(&e.path))?;
            PrepClip::build(&record, cfg)
        })
        .collect()
}

/// Run one training stage over preprocessed clips. Per-sample work runs in
/// parallel; gradients are summed in sample order, so the loss trajectory is
/// deterministic for a given seed.
pub fn run_stage(
    clips: &[PrepClip],
    plan: &StagePlan,
    store: &mut ParamStore,
    cfg: &DiTConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<TrainReport> {
    if clips.is_empty() {
        return Err(Error::input("no training clips".to_string()));
    }
    let mut adam = Adam::new(store, plan.lr);
    let mut step_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ u64::from(plan.stage)));
    let mut logs = Vec::with_capacity(plan.steps);

    for step in 0..plan.steps {
        // Draw the batch plan sequentially, then fan out.
        let batch: Vec<(usize, u64)> = (0..plan.batch_size)
            .map(|_| {
                let clip = step_rng.gen_range(0..clips.len());
                let sample_seed = step_rng.gen::<u64>();
                (clip, sample_seed)
            })
            .collect();

        let results: Vec<Result<(SampleLosses, GradVec)>> = batch
            .par_iter()
            .map(|&(clip_idx, sample_seed)| {
                sample_step(&clips[clip_idx], store, cfg, schedule, plan, sample_seed)
            })
            .collect();

        let mut total: GradVec = vec![None; store.len()];
        let mut losses = SampleLosses::default();
        for result in results {
            let (l, grads) = result?;
            losses.l_d += l.l_d;
            losses.l_ce += l.l_ce;
            losses.l_st += l.l_st;
            losses.l_layer += l.l_layer;
            losses.l_router += l.l_router;
            for (slot, grad) in total.iter_mut().zip(grads) {
                match (slot.as_mut(), grad) {
                    (Some(acc), Some(g)) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
        }
        let b = plan.batch_size as f64;
        for slot in total.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v /= b;
            }
        }
        adam.step(store, &total);

        logs.push(StepLog {
            step,
            stage: plan.stage,
            l_d: losses.l_d / b,
            l_ce: losses.l_ce / b,
            l_st: losses.l_st / b,
            l_layer: losses.l_layer / b,
            l_router: losses.l_router / b,
        });
    }
    Ok(TrainReport { logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::register_conditioning_params;
    use crate::dit::register_dit_params;
    use crate::router::register_router_params;
    use crate::synth::{gen_clip, ClipDims, TrajectoryKind, TrajectorySpec};
    use crate::tensor::TokenGridDims;

    fn tiny_setup(seed: u64) -> (DiTConfig, ParamStore, Vec<PrepClip>, NoiseSchedule) {
        let cfg = DiTConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_dit_params(&mut store, &cfg, &mut rng);
        register_conditioning_params(&mut store, &cfg, &mut rng);
        register_router_params(&mut store, &cfg, &mut rng);

        // Tiny clips matching the tiny config (T=2 frames, 16x16 px).
        let dims = ClipDims {
            t: 2,
            h: 16,
            w: 16,
            t_a: 8,
            d_a: 4,
        };
        let mut clips = Vec::new();
        for i in 0..4u64 {
            let spec = TrajectorySpec {
                kind: TrajectoryKind::Static,
                radii: vec![3.5, 3.5],
                colors: vec![[0.9, 0.2, 0.1], [0.1, 0.3, 0.9]],
                speed: 0.0,
                starts: vec![(4.5, 4.5), (11.5, 11.5)],
            };
            let record = gen_clip(&spec, dims, seed * 10 + i).unwrap();
            clips.push(PrepClip::build(&record, &cfg).unwrap());
        }
        let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        (cfg, store, clips, schedule)
    }

    #[test]
    fn teacher_forcing_identity_and_simplex() {
        let grid = TokenGridDims::new(2, 2, 2).unwrap();
        let mut probs = vec![0f64; 2 * 3 * 8];
        for l in 0..2 {
            for s in 0..8 {
                probs[(l * 3 + s % 3) * 8 + s] = 1.0;
            }
        }
        let gt = RoutingMask::new(2, 2, grid, probs).unwrap();

        // No augmentation: gates equal ground truth exactly.
        let cfg = TeacherForcingConfig {
            p_drop: 0.0,
            sigma_noise: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let forced = teacher_force_mask(&gt, &cfg, &mut rng);
        assert_eq!(forced, gt);

        // With augmentation the simplex invariant still holds.
        let cfg = TeacherForcingConfig {
            p_drop: 0.3,
            sigma_noise: 0.2,
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let forced = teacher_force_mask(&gt, &cfg, &mut rng);
            assert!(forced.is_simplex(1e-9), "seed {seed}");
        }
    }

    #[test]
    fn drop_decision_frequencies() {
        let rates = DropoutRates {
            inpaint: 0.05,
            reference: 0.05,
            audio: 0.05,
            text: 0.05,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let d = draw_drops(&rates, &mut rng);
            counts[0] += usize::from(d.inpaint);
            counts[1] += usize::from(d.reference);
            counts[2] += usize::from(d.audio);
            counts[3] += usize::from(d.text);
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.05).abs() < 0.01, "frequency {freq}");
        }

        // Degenerate rates.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let none = draw_drops(&DropoutRates::none(), &mut rng);
        assert_eq!(
            none,
            DropDecision {
                inpaint: false,
                reference: false,
                audio: false,
                text: false
            }
        );
        let all = DropoutRates {
            inpaint: 1.0,
            reference: 1.0,
            audio: 1.0,
            text: 1.0,
        };
        let d = draw_drops(&all, &mut rng);
        assert!(d.inpaint && d.reference && d.audio && d.text);
    }

    #[test]
    fn stage_freeze_sets_match_schedule() {
        let s1 = StagePlan::stage1(1, 1, 1e-3, 0.5, 0.5).trainable_groups();
        assert!(s1.contains(&ParamGroup::DitBase));
        assert!(s1.contains(&ParamGroup::FaceEncoder));
        assert!(!s1.contains(&ParamGroup::AudioEncoder));
        assert!(!s1.contains(&ParamGroup::Lora));
        assert!(!s1.contains(&ParamGroup::Router));

        let s2 = StagePlan::stage2(1, 1, 1e-3, 0.05).trainable_groups();
        for g in [
            ParamGroup::AudioEncoder,
            ParamGroup::AudioCrossAttn,
            ParamGroup::FaceEncoder,
            ParamGroup::FaceCrossAttn,
            ParamGroup::Lora,
        ] {
            assert!(s2.contains(&g));
        }
        assert!(!s2.contains(&ParamGroup::DitBase));
        assert!(!s2.contains(&ParamGroup::Router));

        let s3 = StagePlan::stage3(
            1,
            1,
            1e-3,
            0.05,
            TeacherForcingConfig::default(),
            RouterLossWeights::default(),
            false,
            1.0,
        )
        .trainable_groups();
        for g in [
            ParamGroup::Router,
            ParamGroup::AudioCrossAttn,
            ParamGroup::FaceCrossAttn,
            ParamGroup::Lora,
        ] {
            assert!(s3.contains(&g));
        }
        assert!(!s3.contains(&ParamGroup::DitBase));
        assert!(!s3.contains(&ParamGroup::FaceEncoder));
        assert!(!s3.contains(&ParamGroup::AudioEncoder));
    }

    #[test]
    fn frozen_params_bitwise_unchanged_after_steps() {
        let (cfg, mut store, clips, schedule) = tiny_setup(7);
        let plan = StagePlan::stage2(3, 2, 1e-3, 0.05);
        let frozen_before: Vec<(String, Vec<f64>)> = store
            .iter()
            .filter(|p| !plan.is_trainable(p))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        run_stage(&clips, &plan, &mut store, &cfg, &schedule, 11).unwrap();
        for (name, before) in frozen_before {
            let after = &store.get(&name).value;
            assert!(
                before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name} changed while frozen"
            );
        }
        // And at least one trainable parameter moved.
        assert!(store
            .iter()
            .filter(|p| plan.is_trainable(p))
            .any(|p| p.value.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn stage3_router_gradients_reach_only_router_params() {
        let (cfg, store, clips, schedule) = tiny_setup(13);
        let plan = StagePlan::stage3(
            1,
            1,
            1e-3,
            0.0,
            TeacherForcingConfig::default(),
            RouterLossWeights::default(),
            false,
            1.0,
        );
        // One sample with all groups bound trainable to observe raw flow.
        let mut g = Graph::new();
        let binding = store.bind(&mut g, &|_| true);
        let prep = &clips[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps: Vec<f64> = (0..cfg.video_latent_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noised = add_noise(&prep.video_latent, 10, &eps, &schedule).unwrap();
        let inp = noised_inpaint_latent(prep, &cfg, &mut rng);
        let z_t = assemble_z(&noised, Some(&inp), Some(&prep.ref_latent_frame), &cfg);
        let (face_gates, audio_gates) = gates_from_mask(&prep.gt_hard, &prep.a_ac, true).unwrap();
        let text = text_embed(&mut g, &binding, &store, prep.prompt_id, &cfg).unwrap();
        let face = face_encode(&mut g, &binding, &store, &prep.refs, &cfg).unwrap();
        let audio =
            audio_project(&mut g, &binding, &store, &prep.audio_feats, cfg.n_chars, &cfg).unwrap();
        let inputs = DenoiserInputs {
            z_t: &z_t,
            t_step: 10,
            text,
            face: &face.per_char,
            audio: &audio.per_char,
            gates_face: &face_gates,
            gates_audio: &audio_gates,
        };
        let out = denoiser_forward(&mut g, &binding, &store, &cfg, &inputs).unwrap();
        let eps_patches = patchify_values(&eps, cfg.c_latent, &cfg);
        let l_d =
            diffusion_loss(&mut g, out.eps_tokens, &eps_patches, None, false, 1.0, &cfg).unwrap();

        let router_out = router_forward(&mut g, &binding, &store, &out.taps, &cfg, true).unwrap();
        let targets = mask_targets_token_major(&prep.gt_hard);
        let terms = loss_router(
            &mut g,
            &router_out,
            &targets,
            plan.router_weights,
            plan.router_loss_mean,
        )
        .unwrap();

        // dL_d / d(router params) is identically zero (router not in the
        // denoising path).
        let d_grads = g.backward(l_d);
        for idx in store.group_indices(ParamGroup::Router) {
            assert!(
                d_grads.get(binding.var(idx)).is_none(),
                "router param {} received denoising gradient",
                store.by_idx(idx).name
            );
        }

        // dL_router / d(router params) is nonzero, and the detach keeps it
        // out of the denoiser.
        let r_grads = g.backward(terms.total);
        let any_router_grad = store.group_indices(ParamGroup::Router).iter().any(|&idx| {
            r_grads
                .get(binding.var(idx))
                .is_some_and(|v| v.iter().any(|&x| x != 0.0))
        });
        assert!(any_router_grad);
        for name in ["dit.patch_w", "dit.l0.attn.wq", "dit.l0.face.wq"] {
            assert!(r_grads.get(binding.var(store.idx(name))).is_none());
        }
    }

    #[test]
    fn training_is_reproducible() {
        let (cfg, store, clips, schedule) = tiny_setup(21);
        let plan = StagePlan::stage1(4, 2, 1e-3, 0.5, 0.5);
        let mut s1 = store.clone();
        let r1 = run_stage(&clips, &plan, &mut s1, &cfg, &schedule, 99).unwrap();
        let mut s2 = store.clone();
        let r2 = run_stage(&clips, &plan, &mut s2, &cfg, &schedule, 99).unwrap();
        for (a, b) in r1.logs.iter().zip(&r2.logs) {
            assert_eq!(a.l_d.to_bits(), b.l_d.to_bits());
            assert_eq!(a.l_router.to_bits(), b.l_router.to_bits());
        }
        for (pa, pb) in s1.iter().zip(s2.iter()) {
            assert_eq!(pa.value, pb.value, "{} diverged", pa.name);
        }
    }

    #[test]
    fn stage1_loss_decreases_on_smoke_run() {
        let (cfg, mut store, clips, schedule) = tiny_setup(31);
        let plan = StagePlan::stage1(60, 4, 3e-3, 0.5, 0.5);
        let report = run_stage(&clips, &plan, &mut store, &cfg, &schedule, 17).unwrap();
        let k = report.logs.len() / 10;
        let first: f64 = report.logs[..k].iter().map(|l| l.l_d).sum::<f64>() / k as f64;
        let last: f64 =
            report.logs[report.logs.len() - k..].iter().map(|l| l.l_d).sum::<f64>() / k as f64;
        assert!(
            last < first,
            "mean L_d did not decrease: first {first:.4} last {last:.4}"
        );
    }

    #[test]
    fn stage3_logs_carry_router_loss() {
        let (cfg, mut store, clips, schedule) = tiny_setup(41);
        let plan = StagePlan::stage3(
            2,
            2,
            1e-3,
            0.05,
            TeacherForcingConfig::default(),
            RouterLossWeights::default(),
            false,
            1.0,
        );
        let report = run_stage(&clips, &plan, &mut store, &cfg, &schedule, 5).unwrap();
        assert!(report.logs.iter().all(|l| l.l_router > 0.0));
        assert_eq!(report.logs.len(), 2);
    }

    #[test]
    fn single_char_replication_padding() {
        let cfg = DiTConfig::tiny();
        let dims = ClipDims {
            t: 2,
            h: 16,
            w: 16,
            t_a: 8,
            d_a: 4,
        };
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Single,
            radii: vec![3.5],
            colors: vec![[0.2, 0.8, 0.3]],
            speed: 1.0,
            starts: vec![(5.0, 5.0)],
        };
        let record = gen_clip(&spec, dims, 77).unwrap();
        let prep = PrepClip::build(&record, &cfg).unwrap();
        assert_eq!(prep.refs.shape()[0], 2);
        assert_eq!(prep.a_ac, AudioCharacterMatrix::identity(2).values);
        assert_eq!(prep.audio_feats.len(), 2 * 8 * 4);
        // Both audio slots carry the same stream.
        assert_eq!(prep.audio_feats[..8 * 4], prep.audio_feats[8 * 4..]);
        // The mask occupies slot 0 only.
        let labels = prep.gt_hard.argmax_labels(0);
        assert!(labels.iter().any(|&c| c == 0));
        assert!(labels.iter().all(|&c| c != 1));
    }
}
