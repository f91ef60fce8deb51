//! The per-step mask prediction network and its loss suite.
//!
//! The router consumes the denoiser's face cross-attention query/key taps.
//! Per denoiser layer, a layer-specific head-preserving linear transform is
//! applied to both sides, attention weights are computed per head, and the
//! resulting per-token feature rows (heads x characters x queries wide) are
//! rotated by 3D RoPE over token positions, passed through a small shared
//! transformer over all tokens, and projected to `n + 1` class logits.
//!
//! Losses: class cross-entropy against one-hot targets, an L1 penalty on the
//! mask's forward differences along (t, h, w), and the across-layer variance
//! penalty. The default weights are (1, 0.001, 8).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::dit::{DiTConfig, LayerTaps};
use crate::error::{Error, Result};
use crate::mask::RoutingMask;
use crate::params::{ones, xavier, zeros, ParamGroup, ParamStore, TapeBinding};
use crate::tensor::{token_unflatten, TokenGridDims};

/// Router loss weights; the cross-entropy coefficient is explicit so the
/// default triple can be asserted as a unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterLossWeights {
    pub ce: f64,
    pub st: f64,
    pub layer: f64,
}

impl Default for RouterLossWeights {
    fn default() -> Self {
        RouterLossWeights {
            ce: 1.0,
            st: 0.001,
            layer: 8.0,
        }
    }
}

/// Register all router parameters.
pub fn register_router_params(store: &mut ParamStore, cfg: &DiTConfig, rng: &mut ChaCha8Rng) {
    let hd = cfg.head_dim();
    for l in 0..cfg.layers {
        store.add(
            &format!("router.l{l}.wq"),
            ParamGroup::Router,
            &[hd, hd],
            xavier(rng, hd, hd, hd * hd),
        );
        store.add(
            &format!("router.l{l}.wk"),
            ParamGroup::Router,
            &[hd, hd],
            xavier(rng, hd, hd, hd * hd),
        );
    }
    let feat = cfg.heads * cfg.n_chars * cfg.q_face;
    let width = cfg.router_width;
    store.add(
        "router.in_w",
        ParamGroup::Router,
        &[feat, width],
        xavier(rng, feat, width, feat * width),
    );
    store.add("router.in_b", ParamGroup::Router, &[width], zeros(width));
    for b in 0..cfg.router_blocks {
        let p = |suffix: &str| format!("router.b{b}.{suffix}");
        store.add(&p("ln1.g"), ParamGroup::Router, &[width], ones(width));
        store.add(&p("ln1.b"), ParamGroup::Router, &[width], zeros(width));
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.add(&p(w), ParamGroup::Router, &[width, width], xavier(rng, width, width, width * width));
        }
        store.add(&p("ln2.g"), ParamGroup::Router, &[width], ones(width));
        store.add(&p("ln2.b"), ParamGroup::Router, &[width], zeros(width));
        store.add(
            &p("mlp.w1"),
            ParamGroup::Router,
            &[width, 2 * width],
            xavier(rng, width, 2 * width, width * 2 * width),
        );
        store.add(&p("mlp.b1"), ParamGroup::Router, &[2 * width], zeros(2 * width));
        store.add(
            &p("mlp.w2"),
            ParamGroup::Router,
            &[2 * width, width],
            xavier(rng, 2 * width, width, 2 * width * width),
        );
        store.add(&p("mlp.b2"), ParamGroup::Router, &[width], zeros(width));
    }
    store.add("router.out_ln.g", ParamGroup::Router, &[width], ones(width));
    store.add("router.out_ln.b", ParamGroup::Router, &[width], zeros(width));
    let classes = cfg.n_chars + 1;
    store.add(
        "router.out_w",
        ParamGroup::Router,
        &[width, classes],
        xavier(rng, width, classes, width * classes),
    );
    store.add("router.out_b", ParamGroup::Router, &[classes], zeros(classes));
}

/// Split a feature width across the three position axes proportionally to
/// the grid extents, each chunk even, remainder to the time axis.
pub fn rope_split(d_r: usize, grid: TokenGridDims) -> Result<(usize, usize, usize)> {
    if d_r % 2 != 0 {
        return Err(Error::config(format!("rope width {d_r} must be even")));
    }
    let total = (grid.t_len + grid.h_len + grid.w_len) as f64;
    let mut dh = ((d_r as f64 * grid.h_len as f64 / total) as usize) & !1;
    let mut dw = ((d_r as f64 * grid.w_len as f64 / total) as usize) & !1;
    if dh == 0 {
        dh = 2;
    }
    if dw == 0 {
        dw = 2;
    }
    if dh + dw + 2 > d_r {
        return Err(Error::config(format!(
            "rope width {d_r} too small for a 3-axis split"
        )));
    }
    Ok((d_r - dh - dw, dh, dw))
}

/// Axial rotary position encoding: feature pairs within each axis chunk are
/// rotated by angles proportional to that axis coordinate. Norm-preserving;
/// inner products depend only on position differences.
pub fn rope3d_apply(
    g: &mut Graph,
    features: Var,
    positions: &[(usize, usize, usize)],
    split: (usize, usize, usize),
) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("rope input must be [S, d_r]".to_string()));
    }
    let (rows, d_r) = (shape[0], shape[1]);
    let (dt, dh, dw) = split;
    if dt + dh + dw != d_r {
        return Err(Error::config(format!(
            "rope split {dt}+{dh}+{dw} != width {d_r}"
        )));
    }
    if dt % 2 != 0 || dh % 2 != 0 || dw % 2 != 0 {
        return Err(Error::config("rope chunks must be even".to_string()));
    }
    if positions.len() != rows {
        return Err(Error::shape("one position per feature row required".to_string()));
    }

    let mut cos = Vec::with_capacity(rows * d_r / 2);
    let mut sin = Vec::with_capacity(rows * d_r / 2);
    for &(t, h, w) in positions {
        for (chunk, pos) in [(dt, t), (dh, h), (dw, w)] {
            let half = chunk / 2;
            for i in 0..half {
                let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
    }
    Ok(g.rotate_pairs(features, cos, sin))
}

/// Canonical-order token positions of a grid.
pub fn grid_positions(grid: TokenGridDims) -> Vec<(usize, usize, usize)> {
    (0..grid.token_count())
        .map(|s| token_unflatten(s, grid).expect("in range"))
        .collect()
}

/// Per-layer logits and class probabilities on the tape.
pub struct RouterOutput {
    /// Per layer `[S, n+1]`.
    pub logits: Vec<Var>,
    /// Per layer `[S, n+1]`, class softmax of the logits.
    pub probs: Vec<Var>,
    pub n_chars: usize,
    pub grid: TokenGridDims,
}

impl RouterOutput {
    /// Materialize the probabilities as a [`RoutingMask`].
    pub fn routing_mask(&self, g: &Graph) -> RoutingMask {
        let plane = self.grid.token_count();
        let classes = self.n_chars + 1;
        let mut probs = Vec::with_capacity(self.probs.len() * classes * plane);
        for &var in &self.probs {
            let vals = g.value(var);
            for c in 0..classes {
                for s in 0..plane {
                    probs.push(vals[s * classes + c]);
                }
            }
        }
        RoutingMask::new(self.probs.len(), self.n_chars, self.grid, probs)
            .expect("shape by construction")
    }
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

/// Mask prediction for one denoiser layer's taps. With `detach_taps`,
/// gradient flow from the router losses into the denoiser is severed.
/// Returns `(logits, probs)`, each `[S, n+1]`.
pub fn router_forward_layer(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    tap: &LayerTaps,
    layer: usize,
    cfg: &DiTConfig,
    detach_taps: bool,
) -> Result<(Var, Var)> {
    let grid = cfg.grid();
    let tokens = grid.token_count();
    let hd = cfg.head_dim();
    let key_rows = cfg.n_chars * cfg.q_face;
    let feat = cfg.heads * key_rows;
    let positions = grid_positions(grid);
    let split = rope_split(feat, grid)?;
    let scale = 1.0 / (hd as f64).sqrt();

    if tap.q_heads.len() != cfg.heads || tap.k_heads.len() != cfg.heads {
        return Err(Error::shape(format!(
            "layer {layer} taps must carry {} heads",
            cfg.heads
        )));
    }
    let wq = binding.var(store.idx(&format!("router.l{layer}.wq")));
    let wk = binding.var(store.idx(&format!("router.l{layer}.wk")));
    let mut weight_cols = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (mut qh, mut kh) = (tap.q_heads[h], tap.k_heads[h]);
        if g.shape(qh) != [tokens, hd] || g.shape(kh) != [key_rows, hd] {
            return Err(Error::shape(format!(
                "layer {layer} head {h}: tap shapes {:?}/{:?} do not match config",
                g.shape(qh),
                g.shape(kh)
            )));
        }
        if detach_taps {
            qh = g.detach(qh);
            kh = g.detach(kh);
        }
        let qt = g.matmul(qh, wq);
        let kt = g.matmul(kh, wk);
        let weights = g.matmul_nt(qt, kt);
        weight_cols.push(g.scale(weights, scale));
    }
    let feats = g.concat_cols(&weight_cols);
    let feats = rope3d_apply(g, feats, &positions, split)?;
    let x = g.matmul(feats, binding.var(store.idx("router.in_w")));
    let mut x = g.add_bias(x, binding.var(store.idx("router.in_b")));

    for b in 0..cfg.router_blocks {
        let p = |suffix: &str| format!("router.b{b}.{suffix}");
        let h1 = layer_norm(g, binding, store, x, &p("ln1.g"), &p("ln1.b"));
        let q = g.matmul(h1, binding.var(store.idx(&p("attn.wq"))));
        let k = g.matmul(h1, binding.var(store.idx(&p("attn.wk"))));
        let v = g.matmul(h1, binding.var(store.idx(&p("attn.wv"))));
        let rh = cfg.router_width / cfg.router_heads;
        let mut parts = Vec::with_capacity(cfg.router_heads);
        for h in 0..cfg.router_heads {
            let qh = g.slice_cols(q, h * rh, rh);
            let kh = g.slice_cols(k, h * rh, rh);
            let vh = g.slice_cols(v, h * rh, rh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, 1.0 / (rh as f64).sqrt());
            let probs = g.softmax_rows(scores);
            parts.push(g.matmul(probs, vh));
        }
        let ctx = g.concat_cols(&parts);
        let attn = g.matmul(ctx, binding.var(store.idx(&p("attn.wo"))));
        x = g.add(x, attn);

        let h2 = layer_norm(g, binding, store, x, &p("ln2.g"), &p("ln2.b"));
        let m = g.matmul(h2, binding.var(store.idx(&p("mlp.w1"))));
        let m = g.add_bias(m, binding.var(store.idx(&p("mlp.b1"))));
        let m = g.gelu(m);
        let m = g.matmul(m, binding.var(store.idx(&p("mlp.w2"))));
        let m = g.add_bias(m, binding.var(store.idx(&p("mlp.b2"))));
        x = g.add(x, m);
    }

    let h = layer_norm(g, binding, store, x, "router.out_ln.g", "router.out_ln.b");
    let logits = g.matmul(h, binding.var(store.idx("router.out_w")));
    let logits = g.add_bias(logits, binding.var(store.idx("router.out_b")));
    let probs = g.softmax_rows(logits);
    Ok((logits, probs))
}

/// Router forward pass over every denoiser layer's taps.
pub fn router_forward(
    g: &mut Graph,
    binding: &TapeBinding,
    store: &ParamStore,
    taps: &[LayerTaps],
    cfg: &DiTConfig,
    detach_taps: bool,
) -> Result<RouterOutput> {
    if taps.len() != cfg.layers {
        return Err(Error::shape(format!(
            "expected taps for {} layers, got {}",
            cfg.layers,
            taps.len()
        )));
    }
    let mut logits_out = Vec::with_capacity(cfg.layers);
    let mut probs_out = Vec::with_capacity(cfg.layers);
    for (l, tap) in taps.iter().enumerate() {
        let (logits, probs) = router_forward_layer(g, binding, store, tap, l, cfg, detach_taps)?;
        logits_out.push(logits);
        probs_out.push(probs);
    }
    Ok(RouterOutput {
        logits: logits_out,
        probs: probs_out,
        n_chars: cfg.n_chars,
        grid: cfg.grid(),
    })
}

/// One-hot targets in token-major `[S, n+1]` layout per layer, built from a
/// hard routing mask.
pub fn mask_targets_token_major(mask: &RoutingMask) -> Vec<Vec<f64>> {
    let plane = mask.grid.token_count();
    let classes = mask.classes();
    (0..mask.layers)
        .map(|l| {
            let mut out = vec![0f64; plane * classes];
            for s in 0..plane {
                for c in 0..classes {
                    out[s * classes + c] = mask.prob(l, c, s);
                }
            }
            out
        })
        .collect()
}

/// Cross-entropy over all `n + 1` classes, layers, and token positions:
/// `sum -y log(max(p, 1e-12))`. With `mean`, normalized by the position
/// count (layers x tokens).
pub fn loss_ce(g: &mut Graph, probs: &[Var], targets: &[Vec<f64>], mean: bool) -> Result<Var> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::shape("per-layer probs/targets mismatch".to_string()));
    }
    let mut acc: Option<Var> = None;
    let mut positions = 0usize;
    for (&p, t) in probs.iter().zip(targets) {
        let shape = g.shape(p).to_vec();
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape(format!(
                "target length {} vs probs {:?}",
                t.len(),
                shape
            )));
        }
        positions += shape[0];
        let target = g.constant(&shape, t);
        let lp = g.log_clamped(p, 1e-12);
        let prod = g.mul(lp, target);
        let s = g.sum_all(prod);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s),
        });
    }
    let total = g.scale(acc.expect("nonempty"), -1.0);
    Ok(if mean {
        g.scale(total, 1.0 / positions as f64)
    } else {
        total
    })
}

/// Stack the character channels of per-layer token-major probabilities into
/// a `[L * n, S]` node whose row-major layout is `[L, n, t, h, w]`.
pub fn stack_char_channels(g: &mut Graph, probs: &[Var], n_chars: usize) -> Var {
    let mut rows: Option<Var> = None;
    for &p in probs {
        let ch = g.slice_cols(p, 0, n_chars);
        let tr = g.transpose2d(ch);
        rows = Some(match rows {
            None => tr,
            Some(acc) => g.concat_rows(acc, tr),
        });
    }
    rows.expect("at least one layer")
}

/// L1 norm of the mask's forward differences along t, h, w (character
/// channels only), summed over layers and characters.
pub fn loss_st(g: &mut Graph, char_stack: Var, dims: [usize; 5]) -> Var {
    g.forward_diff_l1(char_stack, dims)
}

/// Across-layer population variance at every (character, t, h, w) position,
/// summed. Needs at least two layers.
pub fn loss_layer(g: &mut Graph, char_stack: Var, dims: [usize; 5]) -> Result<Var> {
    if dims[0] < 2 {
        return Err(Error::config(
            "layer-consistency loss needs at least 2 layers".to_string(),
        ));
    }
    Ok(g.layer_var_sum(char_stack, dims))
}

/// All router loss terms and their weighted total.
pub struct RouterLossTerms {
    pub ce: Var,
    pub st: Var,
    pub layer: Var,
    pub total: Var,
}

/// `w.ce * CE + w.st * L_st + w.layer * L_layer` over a router output and
/// one-hot targets. The smoothness terms act on probabilities.
pub fn loss_router(
    g: &mut Graph,
    out: &RouterOutput,
    targets: &[Vec<f64>],
    weights: RouterLossWeights,
    mean: bool,
) -> Result<RouterLossTerms> {
    let ce = loss_ce(g, &out.probs, targets, mean)?;
    let stack = stack_char_channels(g, &out.probs, out.n_chars);
    let dims = [
        out.probs.len(),
        out.n_chars,
        out.grid.t_len,
        out.grid.h_len,
        out.grid.w_len,
    ];
    let st = loss_st(g, stack, dims);
    let layer = loss_layer(g, stack, dims)?;
    let ce_w = g.scale(ce, weights.ce);
    let st_w = g.scale(st, weights.st);
    let layer_w = g.scale(layer, weights.layer);
    let partial = g.add(ce_w, st_w);
    let total = g.add(partial, layer_w);
    Ok(RouterLossTerms { ce, st, layer, total })
}
