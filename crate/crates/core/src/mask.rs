//! Routing-mask and assignment-matrix operations: character-visual matrix
//! extraction, audio-visual composition, confidence-seeded refinement,
//! audio-mask inflation, and the static (inpainting-frame) and
//! coarse-video mask extraction paths.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TokenGridDims};

/// Per-layer class-probability field over `(n+1)` classes on the token grid.
/// Class `n` (the last) is background.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMask {
    /// `[layers, n+1, t, h, w]`, row-major.
    pub probs: Vec<f64>,
    pub layers: usize,
    /// Character count `n` (probs carry `n + 1` classes).
    pub n_chars: usize,
    pub grid: TokenGridDims,
}

impl RoutingMask {
    pub fn new(layers: usize, n_chars: usize, grid: TokenGridDims, probs: Vec<f64>) -> Result<Self> {
        let expect = layers * (n_chars + 1) * grid.token_count();
        if probs.len() != expect {
            return Err(Error::shape(format!(
                "routing mask expects {expect} values, got {}",
                probs.len()
            )));
        }
        Ok(RoutingMask {
            probs,
            layers,
            n_chars,
            grid,
        })
    }

    pub fn classes(&self) -> usize {
        self.n_chars + 1
    }

    fn plane(&self) -> usize {
        self.grid.token_count()
    }

    pub fn prob(&self, layer: usize, class: usize, token: usize) -> f64 {
        self.probs[(layer * self.classes() + class) * self.plane() + token]
    }

    /// True when every token's class distribution sums to 1 within `tol` and
    /// all values lie in `[0, 1]`.
    pub fn is_simplex(&self, tol: f64) -> bool {
        let plane = self.plane();
        for l in 0..self.layers {
            for s in 0..plane {
                let mut sum = 0.0;
                for c in 0..self.classes() {
                    let p = self.prob(l, c, s);
                    if !(0.0..=1.0 + tol).contains(&p) {
                        return false;
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// True when every token is exactly one-hot.
    pub fn is_one_hot(&self) -> bool {
        let plane = self.plane();
        for l in 0..self.layers {
            for s in 0..plane {
                let mut ones = 0;
                for c in 0..self.classes() {
                    let p = self.prob(l, c, s);
                    if p == 1.0 {
                        ones += 1;
                    } else if p != 0.0 {
                        return false;
                    }
                }
                if ones != 1 {
                    return false;
                }
            }
        }
        true
    }

    /// Per-token argmax class for one layer; ties resolve to the lowest class.
    pub fn argmax_labels(&self, layer: usize) -> Vec<usize> {
        let plane = self.plane();
        (0..plane)
            .map(|s| {
                let mut best = 0usize;
                let mut best_p = self.prob(layer, 0, s);
                for c in 1..self.classes() {
                    let p = self.prob(layer, c, s);
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                best
            })
            .collect()
    }

    /// Class probabilities averaged across layers: `[n+1, t, h, w]`.
    pub fn layer_mean(&self) -> Vec<f64> {
        let per_layer = self.classes() * self.plane();
        let mut out = vec![0f64; per_layer];
        for l in 0..self.layers {
            for i in 0..per_layer {
                out[i] += self.probs[l * per_layer + i];
            }
        }
        for v in &mut out {
            *v /= self.layers as f64;
        }
        out
    }

    /// Argmax labels of the layer-mean probabilities.
    pub fn layer_mean_labels(&self) -> Vec<usize> {
        let mean = self.layer_mean();
        let plane = self.plane();
        let classes = self.classes();
        (0..plane)
            .map(|s| {
                let mut best = 0usize;
                let mut best_p = mean[s];
                for c in 1..classes {
                    let p = mean[c * plane + s];
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                best
            })
            .collect()
    }

    fn from_labels(
        labels_per_layer: &[Vec<usize>],
        n_chars: usize,
        grid: TokenGridDims,
    ) -> RoutingMask {
        let layers = labels_per_layer.len();
        let classes = n_chars + 1;
        let plane = grid.token_count();
        let mut probs = vec![0f64; layers * classes * plane];
        for (l, labels) in labels_per_layer.iter().enumerate() {
            for (s, &c) in labels.iter().enumerate() {
                probs[(l * classes + c) * plane + s] = 1.0;
            }
        }
        RoutingMask {
            probs,
            layers,
            n_chars,
            grid,
        }
    }
}

/// Per-character token assignment `[n, S]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterVisualMatrix {
    pub values: Vec<f64>,
    pub n: usize,
    pub tokens: usize,
}

impl CharacterVisualMatrix {
    pub fn new(n: usize, tokens: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * tokens {
            return Err(Error::shape(format!(
                "expected {n} x {tokens} matrix, got {} values",
                values.len()
            )));
        }
        Ok(CharacterVisualMatrix { values, n, tokens })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.tokens..(i + 1) * self.tokens]
    }
}

/// Audio-to-token assignment, structurally identical to the character-visual
/// matrix but indexed by audio stream.
pub type AudioVisualMatrix = CharacterVisualMatrix;

/// Drop the background channel of one layer and flatten the token grid in
/// canonical t-major order.
pub fn mask_to_cv_matrix(mask: &RoutingMask, layer: usize) -> Result<CharacterVisualMatrix> {
    if layer >= mask.layers {
        return Err(Error::bounds(format!(
            "layer {layer} out of range (mask has {})",
            mask.layers
        )));
    }
    let plane = mask.grid.token_count();
    let classes = mask.classes();
    let mut values = Vec::with_capacity(mask.n_chars * plane);
    for c in 0..mask.n_chars {
        let start = (layer * classes + c) * plane;
        values.extend_from_slice(&mask.probs[start..start + plane]);
    }
    CharacterVisualMatrix::new(mask.n_chars, plane, values)
}

/// Audio-visual matrix as the product of the audio-character permutation and
/// the character-visual matrix.
pub fn compose_av(a_ac: &[Vec<u8>], a_cv: &CharacterVisualMatrix) -> Result<AudioVisualMatrix> {
    let n = a_cv.n;
    if a_ac.len() != n || a_ac.iter().any(|r| r.len() != n) {
        return Err(Error::shape(format!(
            "audio-character matrix must be {n} x {n}"
        )));
    }
    let mut values = vec![0f64; n * a_cv.tokens];
    for i in 0..n {
        for j in 0..n {
            let w = f64::from(a_ac[i][j]);
            if w == 0.0 {
                continue;
            }
            let row = a_cv.row(j);
            for s in 0..a_cv.tokens {
                values[i * a_cv.tokens + s] += w * row[s];
            }
        }
    }
    CharacterVisualMatrix::new(n, a_cv.tokens, values)
}

/// Confidence-seeded label propagation. Tokens whose max class probability
/// reaches `theta` become one-hot seeds; the rest take the majority label of
/// their labeled 6-neighbors in synchronized rounds until stable (or
/// `max_iters`); leftovers become background. Output is one-hot per token.
pub fn refine_mask(mask: &RoutingMask, theta: f64, max_iters: usize) -> Result<RoutingMask> {
    let classes = mask.classes();
    if theta <= 1.0 / classes as f64 || theta > 1.0 {
        return Err(Error::config(format!(
            "confidence threshold must lie in (1/{classes}, 1], got {theta}"
        )));
    }
    let grid = mask.grid;
    let plane = grid.token_count();
    let mut labels_per_layer = Vec::with_capacity(mask.layers);
    for l in 0..mask.layers {
        let mut labels: Vec<Option<usize>> = vec![None; plane];
        for (s, slot) in labels.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_p = mask.prob(l, 0, s);
            for c in 1..classes {
                let p = mask.prob(l, c, s);
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            if best_p >= theta {
                *slot = Some(best);
            }
        }
        for _ in 0..max_iters {
            let mut next = labels.clone();
            let mut changed = false;
            for s in 0..plane {
                if labels[s].is_some() {
                    continue;
                }
                let mut votes = vec![0usize; classes];
                let mut any = false;
                for nb in grid_neighbors(s, grid) {
                    if let Some(c) = labels[nb] {
                        votes[c] += 1;
                        any = true;
                    }
                }
                if any {
                    let best = votes
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                        .map(|(c, _)| c)
                        .unwrap();
                    next[s] = Some(best);
                    changed = true;
                }
            }
            labels = next;
            if !changed {
                break;
            }
        }
        let background = classes - 1;
        labels_per_layer.push(
            labels
                .into_iter()
                .map(|l| l.unwrap_or(background))
                .collect::<Vec<usize>>(),
        );
    }
    Ok(RoutingMask::from_labels(
        &labels_per_layer,
        mask.n_chars,
        grid,
    ))
}

/// 6-neighborhood (t, h, w axis steps) of a flat token index.
pub fn grid_neighbors(token: usize, grid: TokenGridDims) -> Vec<usize> {
    let per_frame = grid.h_len * grid.w_len;
    let t = token / per_frame;
    let rest = token % per_frame;
    let h = rest / grid.w_len;
    let w = rest % grid.w_len;
    let mut out = Vec::with_capacity(6);
    if t > 0 {
        out.push(token - per_frame);
    }
    if t + 1 < grid.t_len {
        out.push(token + per_frame);
    }
    if h > 0 {
        out.push(token - grid.w_len);
    }
    if h + 1 < grid.h_len {
        out.push(token + grid.w_len);
    }
    if w > 0 {
        out.push(token - 1);
    }
    if w + 1 < grid.w_len {
        out.push(token + 1);
    }
    out
}

/// Audio-gate inflation for two characters: each audio stream's gate becomes
/// everything except the other character's tokens (`row_i = 1 - row_other`).
/// Applies to the audio cross-attention pathway only.
pub fn inflate_audio_matrix(a_cv_hard: &CharacterVisualMatrix) -> Result<CharacterVisualMatrix> {
    if a_cv_hard.n != 2 {
        return Err(Error::Unsupported(format!(
            "audio-mask inflation is defined for 2 characters, got {}",
            a_cv_hard.n
        )));
    }
    if a_cv_hard.values.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::input("inflation requires binary entries".to_string()));
    }
    let s = a_cv_hard.tokens;
    let mut values = vec![0f64; 2 * s];
    for j in 0..s {
        values[j] = 1.0 - a_cv_hard.values[s + j];
        values[s + j] = 1.0 - a_cv_hard.values[j];
    }
    CharacterVisualMatrix::new(2, s, values)
}

/// Hard one-hot routing mask from soft downsampled ground-truth character
/// coverages `[n, T, h, w]`: background = 1 - sum, argmax per token,
/// replicated across `layers`.
pub fn hard_mask_from_gt(gt_soft: &Tensor, layers: usize) -> Result<RoutingMask> {
    let shape = gt_soft.shape();
    if shape.len() != 4 {
        return Err(Error::shape("expected n x T x h x w soft mask".to_string()));
    }
    let (n, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let grid = TokenGridDims::new(t, h, w)?;
    let plane = grid.token_count();
    let data = gt_soft.as_f32()?;
    let labels: Vec<usize> = (0..plane)
        .map(|s| {
            // Classes ordered [characters.., background]; ties resolve to the
            // lowest class index, matching the argmax convention elsewhere.
            let coverages: Vec<f64> = (0..n)
                .map(|c| f64::from(data[c * plane + s]))
                .collect();
            let bg = 1.0 - coverages.iter().sum::<f64>();
            let mut best = 0usize;
            let mut best_p = coverages[0];
            for (c, &p) in coverages.iter().enumerate().skip(1) {
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            if bg > best_p {
                best = n;
            }
            best
        })
        .collect();
    let per_layer: Vec<Vec<usize>> = (0..layers).map(|_| labels.clone()).collect();
    Ok(RoutingMask::from_labels(&per_layer, n, grid))
}

/// Intersection-over-union of one character's predicted and ground-truth
/// token sets. Both label vectors hold class indices; empty-vs-empty is 1.
pub fn label_iou(pred: &[usize], gt: &[usize], class: usize) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let pin = *p == class;
        let gin = *g == class;
        if pin && gin {
            inter += 1;
        }
        if pin || gin {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    (r + g + b) / 3.0
}

/// Mean color of the nonzero pixels of reference crop `i`.
fn ref_mean_color(refs: &Tensor, i: usize) -> Result<[f64; 3]> {
    let shape = refs.shape();
    let (size_h, size_w) = (shape[2], shape[3]);
    let data = refs.as_f32()?;
    let mut acc = [0f64; 3];
    let mut count = 0f64;
    for y in 0..size_h {
        for x in 0..size_w {
            let px: Vec<f64> = (0..3)
                .map(|c| f64::from(data[((i * 3 + c) * size_h + y) * size_w + x]))
                .collect();
            if luminance(px[0], px[1], px[2]) > 1e-6 {
                for c in 0..3 {
                    acc[c] += px[c];
                }
                count += 1.0;
            }
        }
    }
    if count == 0.0 {
        return Err(Error::Detection(format!("reference {i} is empty")));
    }
    Ok([acc[0] / count, acc[1] / count, acc[2] / count])
}

#[derive(Debug, Clone)]
struct Component {
    pixels: Vec<(usize, usize)>,
    mean_color: [f64; 3],
    centroid: (f64, f64),
    bbox: (usize, usize, usize, usize), // x0, y0, x1, y1 exclusive
}

/// 4-connected components of a thresholded RGB image `[3, H, W]`.
fn connected_components(data: &[f32], h: usize, w: usize, lum_threshold: f64) -> Vec<Component> {
    let fg: Vec<bool> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            let px: Vec<f64> = (0..3).map(|c| f64::from(data[(c * h + y) * w + x])).collect();
            luminance(px[0], px[1], px[2]) > lum_threshold
        })
        .collect();
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            pixels.push((x, y));
            let mut push = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        let mut mean = [0f64; 3];
        let mut cx = 0f64;
        let mut cy = 0f64;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
        for &(x, y) in &pixels {
            for c in 0..3 {
                mean[c] += f64::from(data[(c * h + y) * w + x]);
            }
            cx += x as f64;
            cy += y as f64;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        let count = pixels.len() as f64;
        for c in &mut mean {
            *c /= count;
        }
        comps.push(Component {
            pixels,
            mean_color: mean,
            centroid: (cx / count, cy / count),
            bbox: (x0, y0, x1, y1),
        });
    }
    comps
}

fn color_dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

/// Min-cost assignment of `n` components to `n` references by mean color,
/// enumerating permutations (n <= 4 in practice).
fn assign_components(comps: &[Component], ref_colors: &[[f64; 3]]) -> Vec<usize> {
    let n = ref_colors.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    permute(&mut perm, 0, &mut |p| {
        let cost: f64 = (0..n)
            .map(|i| color_dist2(comps[i].mean_color, ref_colors[p[i]]))
            .sum();
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, p.to_vec()));
        }
    });
    best.unwrap().1
}

fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Static mask from the inpainting frame: per-character bounding boxes from
/// color-thresholded connected components matched to the references, box
/// converted to token cells, overlap resolved to the nearer component
/// centroid, replicated across all frames and layers.
pub fn pre_denoise_mask(
    inpaint: &Tensor,
    refs: &Tensor,
    grid: TokenGridDims,
    layers: usize,
    pixels_per_token: usize,
) -> Result<RoutingMask> {
    let shape = inpaint.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("expected 3 x H x W inpainting frame".to_string()));
    }
    let (h, w) = (shape[1], shape[2]);
    let n = refs.shape()[0];
    let data = inpaint.as_f32()?;
    let mut comps = connected_components(data, h, w, 0.1);
    comps.retain(|c| c.pixels.len() >= 8);
    if comps.len() < n {
        return Err(Error::Detection(format!(
            "found {} components, need {n}",
            comps.len()
        )));
    }
    comps.sort_by(|a, b| b.pixels.len().cmp(&a.pixels.len()));
    comps.truncate(n);
    let ref_colors: Vec<[f64; 3]> = (0..n).map(|i| ref_mean_color(refs, i)).collect::<Result<_>>()?;
    let assignment = assign_components(&comps, &ref_colors);

    // Convert each box to token cells via its inscribed disc: a cell is
    // claimed when more than half of its pixel centers fall inside the disc
    // estimated from the box, mirroring the majority-coverage rule of the
    // ground-truth labels. Dual claims go to the nearer component centroid.
    let plane = grid.token_count();
    let mut owner: Vec<Option<usize>> = vec![None; grid.h_len * grid.w_len];
    let box_disc: Vec<((f64, f64), f64)> = comps
        .iter()
        .map(|c| {
            let (bx0, by0, bx1, by1) = c.bbox;
            let center = ((bx0 + bx1) as f64 / 2.0, (by0 + by1) as f64 / 2.0);
            let radius = ((bx1 - bx0) + (by1 - by0)) as f64 / 4.0;
            (center, radius)
        })
        .collect();
    for th in 0..grid.h_len {
        for tw in 0..grid.w_len {
            let (px0, py0) = (tw * pixels_per_token, th * pixels_per_token);
            let (px1, py1) = (px0 + pixels_per_token, py0 + pixels_per_token);
            let center = (
                (px0 + px1) as f64 / 2.0,
                (py0 + py1) as f64 / 2.0,
            );
            let mut claims: Vec<usize> = Vec::new();
            for (ci, &((cx, cy), radius)) in box_disc.iter().enumerate() {
                let mut inside = 0usize;
                for y in py0..py1 {
                    for x in px0..px1 {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= radius * radius {
                            inside += 1;
                        }
                    }
                }
                if 2 * inside > pixels_per_token * pixels_per_token {
                    claims.push(ci);
                }
            }
            let cell = th * grid.w_len + tw;
            owner[cell] = match claims.len() {
                0 => None,
                1 => Some(assignment[claims[0]]),
                _ => {
                    let nearest = claims
                        .into_iter()
                        .min_by(|&a, &b| {
                            let da = (comps[a].centroid.0 - center.0).powi(2)
                                + (comps[a].centroid.1 - center.1).powi(2);
                            let db = (comps[b].centroid.0 - center.0).powi(2)
                                + (comps[b].centroid.1 - center.1).powi(2);
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    Some(assignment[nearest])
                }
            };
        }
    }

    let frame_labels: Vec<usize> = (0..grid.h_len * grid.w_len)
        .map(|cell| owner[cell].unwrap_or(n))
        .collect();
    let mut labels = Vec::with_capacity(plane);
    for _ in 0..grid.t_len {
        labels.extend_from_slice(&frame_labels);
    }
    let per_layer: Vec<Vec<usize>> = (0..layers).map(|_| labels.clone()).collect();
    Ok(RoutingMask::from_labels(&per_layer, n, grid))
}

/// 3D mask from a coarse generated video latent `[T, C, H', W']`: per-token
/// character coverages estimated by non-negative least squares against the
/// reference colors, argmax labeling (background absorbs the remainder),
/// per-frame components to drop speckle, replicated across layers.
pub fn segment_coarse_video(
    latent: &[f64],
    latent_dims: (usize, usize, usize, usize),
    refs: &Tensor,
    grid: TokenGridDims,
    layers: usize,
    tau: usize,
) -> Result<RoutingMask> {
    let (t_len, channels, lh, lw) = latent_dims;
    if channels != 3 {
        return Err(Error::shape("coarse latent must have 3 channels".to_string()));
    }
    if latent.len() != t_len * channels * lh * lw {
        return Err(Error::shape("latent length mismatch".to_string()));
    }
    if grid.t_len != t_len || grid.h_len * tau != lh || grid.w_len * tau != lw {
        return Err(Error::shape("grid does not match latent extents".to_string()));
    }
    let n = refs.shape()[0];
    let ref_colors: Vec<[f64; 3]> = (0..n).map(|i| ref_mean_color(refs, i)).collect::<Result<_>>()?;

    let plane = grid.h_len * grid.w_len;
    let mut labels = Vec::with_capacity(grid.token_count());
    for t in 0..t_len {
        // Token mean colors from tau x tau latent cells.
        let mut token_colors = vec![[0f64; 3]; plane];
        for th in 0..grid.h_len {
            for tw in 0..grid.w_len {
                let mut acc = [0f64; 3];
                for dy in 0..tau {
                    for dx in 0..tau {
                        let (y, x) = (th * tau + dy, tw * tau + dx);
                        for c in 0..3 {
                            acc[c] += latent[((t * channels + c) * lh + y) * lw + x];
                        }
                    }
                }
                for c in &mut acc {
                    *c /= (tau * tau) as f64;
                }
                token_colors[th * grid.w_len + tw] = acc;
            }
        }

        // Coverage estimates and candidate labels.
        let mut frame_labels: Vec<usize> = vec![n; plane];
        let mut coverages: Vec<Vec<f64>> = vec![vec![0.0; n]; plane];
        for s in 0..plane {
            let cov = estimate_coverages(token_colors[s], &ref_colors);
            let bg = (1.0 - cov.iter().sum::<f64>()).max(0.0);
            let mut best = n;
            let mut best_p = bg;
            for (c, &p) in cov.iter().enumerate() {
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            frame_labels[s] = best;
            coverages[s] = cov;
        }

        // Drop per-frame components whose total estimated coverage is tiny.
        let mut seen = vec![false; plane];
        for start in 0..plane {
            if frame_labels[start] == n || seen[start] {
                continue;
            }
            let class = frame_labels[start];
            let mut stack = vec![start];
            seen[start] = true;
            let mut members = Vec::new();
            while let Some(p) = stack.pop() {
                members.push(p);
                let (y, x) = (p / grid.w_len, p % grid.w_len);
                let mut push = |q: usize| {
                    if !seen[q] && frame_labels[q] == class {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if x > 0 {
                    push(p - 1);
                }
                if x + 1 < grid.w_len {
                    push(p + 1);
                }
                if y > 0 {
                    push(p - grid.w_len);
                }
                if y + 1 < grid.h_len {
                    push(p + grid.w_len);
                }
            }
            let total: f64 = members.iter().map(|&p| coverages[p][class]).sum();
            if total < 0.5 {
                for &p in &members {
                    frame_labels[p] = n;
                }
            }
        }
        labels.extend_from_slice(&frame_labels);
    }
    let per_layer: Vec<Vec<usize>> = (0..layers).map(|_| labels.clone()).collect();
    Ok(RoutingMask::from_labels(&per_layer, n, grid))
}

/// Non-negative least squares of a token color against up to two reference
/// colors (the background is black, so coverage is a direct decomposition).
fn estimate_coverages(color: [f64; 3], ref_colors: &[[f64; 3]]) -> Vec<f64> {
    match ref_colors.len() {
        1 => {
            let denom = color_dist2([0.0; 3], ref_colors[0]).max(1e-9);
            let dot: f64 = (0..3).map(|c| color[c] * ref_colors[0][c]).sum();
            vec![(dot / denom).clamp(0.0, 1.0)]
        }
        2 => {
            let (r0, r1) = (ref_colors[0], ref_colors[1]);
            let a00 = color_dist2([0.0; 3], r0).max(1e-9);
            let a11 = color_dist2([0.0; 3], r1).max(1e-9);
            let a01: f64 = (0..3).map(|c| r0[c] * r1[c]).sum();
            let b0: f64 = (0..3).map(|c| color[c] * r0[c]).sum();
            let b1: f64 = (0..3).map(|c| color[c] * r1[c]).sum();
            let det = a00 * a11 - a01 * a01;
            let (mut x0, mut x1) = if det.abs() > 1e-9 {
                ((a11 * b0 - a01 * b1) / det, (a00 * b1 - a01 * b0) / det)
            } else {
                (b0 / a00, 0.0)
            };
            // Clamp to the non-negative quadrant, re-solving on the axes.
            if x0 < 0.0 {
                x0 = 0.0;
                x1 = b1 / a11;
            }
            if x1 < 0.0 {
                x1 = 0.0;
                x0 = b0 / a00;
            }
            vec![x0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0)]
        }
        _ => {
            // Greedy per-reference projection for n > 2.
            ref_colors
                .iter()
                .map(|r| {
                    let denom = color_dist2([0.0; 3], *r).max(1e-9);
                    let dot: f64 = (0..3).map(|c| color[c] * r[c]).sum();
                    (dot / denom).clamp(0.0, 1.0)
                })
                .collect()
        }
    }
}
