//! Forward-only numerical kernels of the point-object detection
//! transformer: tokenization, self-excited subpixel-scale attention (S2A),
//! encoder/decoder layer forward passes, anchor initialization, and box
//! refinement. Training (backprop, optimizers, denoising branches) is out
//! of scope; weights are externally supplied or seeded for tests.
//!
//! Conventions:
//! - Sampling coordinates put token (x, y) at position (x, y); image pixel
//!   centers at (x+0.5, y+0.5) map to sampling coords by subtracting 0.5.
//! - Bilinear sampling zero-pads outside the grid; in-bounds coefficients
//!   are non-negative and sum to one (the linear-mixing-model constraint).
//! - The self-excited operator samples a conceptual feature space where the
//!   global token fills the nine integer points {-1,0,1}^2; its reference
//!   point is the origin for every query, so the operator depends only on
//!   the query content, not its position.
//! - Attention weights are a softmax over the 2K logits of each head
//!   (pixel and global sampling points together), so they sum to one.
//! - LayerNorm is non-learnable with eps 1e-5; constant tokens normalize
//!   to zero vectors.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{nms, DEFAULT_NMS_IOU};
use crate::error::{Error, Result};
use crate::hsicube::{BBox, Detection, HyperCube};

pub const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Primitive layers
// ---------------------------------------------------------------------------

/// Dense layer `y = W x + b`, weights row-major (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Self::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| rng.gen_range(-s..s)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.in_dim)) {
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }
}

/// Non-learnable layer normalization; a constant vector maps to zeros.
pub fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + LN_EPS).sqrt();
    x.iter().map(|v| (v - mean) / denom).collect()
}

/// MLP with ReLU between layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        Self { layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect() }
    }

    pub fn seeded(dims: &[usize], rng: &mut impl Rng) -> Self {
        Self { layers: dims.windows(2).map(|w| Linear::seeded(w[0], w[1], rng)).collect() }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            v = layer.forward(&v);
            if i + 1 < self.layers.len() {
                for e in &mut v {
                    *e = e.max(0.0);
                }
            }
        }
        v
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse sigmoid; input clamped away from {0, 1} for finiteness.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

// ---------------------------------------------------------------------------
// Feature maps and tokenization
// ---------------------------------------------------------------------------

/// H x W grid of feature vectors, token-major: `(y*w + x)*dim + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::LengthMismatch {
                expected: height * width * dim,
                actual: data.len(),
            });
        }
        Ok(Self { height, width, dim, data })
    }

    pub fn token(&self, x: usize, y: usize) -> &[f64] {
        let off = (y * self.width + x) * self.dim;
        &self.data[off..off + self.dim]
    }
}

/// Pixel tokens plus the single global token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub pixels: FeatureMap,
    pub global: Vec<f64>,
}

impl TokenGrid {
    pub fn dim(&self) -> usize {
        self.pixels.dim
    }
}

/// `P_0 = LN(linear(X / v))` per pixel; global token is the mean of all
/// pixel tokens.
pub fn tokenize(cube: &HyperCube, v: f64, input_linear: &Linear) -> Result<TokenGrid> {
    if !(v > 0.0) {
        return Err(Error::InvalidArgument("normalization constant v must be positive".into()));
    }
    if input_linear.in_dim != cube.bands() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "input linear expects {} bands, cube has {}",
                input_linear.in_dim,
                cube.bands()
            ),
        });
    }
    let (h, w) = (cube.height(), cube.width());
    let c = input_linear.out_dim;
    let mut data = vec![0.0f64; h * w * c];
    let mut global = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let mut s = cube.spectrum(x, y);
            for e in &mut s {
                *e /= v;
            }
            let token = layer_norm(&input_linear.forward(&s));
            for (g, t) in global.iter_mut().zip(&token) {
                *g += t / (h * w) as f64;
            }
            data[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&token);
        }
    }
    Ok(TokenGrid { pixels: FeatureMap { height: h, width: w, dim: c, data }, global })
}

/// Standard 2D sinusoidal position embedding at a continuous position.
/// Half the channels encode x, half encode y.
pub fn sinusoidal_pos(x: f64, y: f64, dim: usize) -> Vec<f64> {
    assert!(dim % 4 == 0, "position embedding dim must be divisible by 4");
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for (pos, _) in [(x, 0), (y, 1)] {
        for i in 0..quarter {
            let freq = 10_000f64.powf(-(i as f64) / quarter as f64);
            out.push((pos * freq).sin());
            out.push((pos * freq).cos());
        }
    }
    out
}

/// Position embeddings for every grid token.
pub fn sinusoidal_pos_grid(height: usize, width: usize, dim: usize) -> FeatureMap {
    let mut data = Vec::with_capacity(height * width * dim);
    for y in 0..height {
        for x in 0..width {
            data.extend(sinusoidal_pos(x as f64, y as f64, dim));
        }
    }
    FeatureMap { height, width, dim, data }
}

// ---------------------------------------------------------------------------
// Bilinear sampling and the self-excited operator
// ---------------------------------------------------------------------------

/// The four (corner, coefficient) pairs of bilinear interpolation at
/// (x, y). Coefficients are non-negative and sum to exactly one; corners
/// may fall outside any particular grid (the sampler zero-pads).
pub fn bilinear_weights(x: f64, y: f64) -> [((i64, i64), f64); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let a = x - x0;
    let b = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    [
        ((x0, y0), (1.0 - a) * (1.0 - b)),
        ((x0 + 1, y0), a * (1.0 - b)),
        ((x0, y0 + 1), (1.0 - a) * b),
        ((x0 + 1, y0 + 1), a * b),
    ]
}

/// Bilinear sample of channels `[c0, c1)`; out-of-grid corners contribute
/// zero vectors.
pub fn bilinear_sample_range(
    map: &FeatureMap,
    x: f64,
    y: f64,
    c0: usize,
    c1: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c1 - c0];
    for ((cx, cy), w) in bilinear_weights(x, y) {
        if w == 0.0 || cx < 0 || cy < 0 || cx >= map.width as i64 || cy >= map.height as i64 {
            continue;
        }
        let t = map.token(cx as usize, cy as usize);
        for (o, v) in out.iter_mut().zip(&t[c0..c1]) {
            *o += w * v;
        }
    }
    out
}

/// Bilinear sample of the full feature vector.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    bilinear_sample_range(map, x, y, 0, map.dim)
}

/// Per-axis weight of the self-excited feature space: the global token
/// fills the integer points {-1,0,1}^2, all other integers are zero, and
/// bilinear interpolation of that arrangement separates into a product of
/// per-axis hat functions.
fn self_excited_axis(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.0
    } else if t < 2.0 {
        2.0 - t
    } else {
        0.0
    }
}

/// Scalar interpolation weight of the self-excited operator at (x, y):
/// 1 inside the unit square around the origin, linearly decaying to 0 at
/// the 4x4 active-region boundary, exactly 0 outside it.
pub fn self_excited_weight(x: f64, y: f64) -> f64 {
    self_excited_axis(x) * self_excited_axis(y)
}

/// Value sampled from the self-excited feature space holding `global`.
pub fn self_excited_value(global: &[f64], x: f64, y: f64) -> Vec<f64> {
    let w = self_excited_weight(x, y);
    global.iter().map(|g| g * w).collect()
}

// ---------------------------------------------------------------------------
// S2A attention
// ---------------------------------------------------------------------------

/// Direction of head `m`'s sampling points: vertices and side midpoints of
/// a square, clockwise from the top-left vertex; heads beyond 8 repeat.
pub const HEAD_DIRECTIONS: [(f64, f64); 8] = [
    (-1.0, -1.0),
    (0.0, -1.0),
    (1.0, -1.0),
    (1.0, 0.0),
    (1.0, 1.0),
    (0.0, 1.0),
    (-1.0, 1.0),
    (-1.0, 0.0),
];

/// Linear maps of one S2A module.
///
/// Layouts: `offset_linear` emits `M*K*2` pixel offsets (x, y per (m, k))
/// followed by `M*K*2` global offsets; `weight_linear` emits `M*K` pixel
/// logits followed by `M*K` global logits. Per head the 2K logits are
/// softmax-normalized together.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub points: usize,
    pub offset_linear: Linear,
    pub weight_linear: Linear,
    pub value_linear: Linear,
    pub output_linear: Linear,
}

impl AttentionParams {
    pub fn seeded(dim: usize, heads: usize, points: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            points,
            offset_linear: Linear::seeded(dim, heads * points * 4, rng),
            weight_linear: Linear::seeded(dim, heads * points * 2, rng),
            value_linear: Linear::seeded(dim, dim, rng),
            output_linear: Linear::seeded(dim, dim, rng),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let mk = self.heads * self.points;
        if self.heads == 0 || self.points == 0 || dim % self.heads != 0 {
            return Err(Error::ShapeMismatch {
                context: format!("heads {} must divide dim {dim}", self.heads),
            });
        }
        for (name, l, out) in [
            ("offset", &self.offset_linear, mk * 4),
            ("weight", &self.weight_linear, mk * 2),
            ("value", &self.value_linear, dim),
            ("output", &self.output_linear, dim),
        ] {
            if l.in_dim != dim || l.out_dim != out {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "{name} linear is {}x{}, expected {dim}x{out}",
                        l.in_dim, l.out_dim
                    ),
                });
            }
        }
        Ok(())
    }

    /// Initial pixel-space offset of head `m`, point `k` for self-S2A:
    /// vertices/midpoints of the 2(k+1) x 2(k+1) square.
    pub fn init_offset(&self, m: usize, k: usize) -> (f64, f64) {
        let (dx, dy) = HEAD_DIRECTIONS[m % 8];
        let r = (k + 1) as f64;
        (dx * r, dy * r)
    }
}

/// Value maps shared by all queries of one attention pass.
pub struct ValueCache {
    pub pixels: FeatureMap,
    pub global: Vec<f64>,
}

/// Apply the value linear to all tokens (Eq. value projection).
pub fn value_cache(tokens: &TokenGrid, params: &AttentionParams) -> ValueCache {
    let (h, w, c) = (tokens.pixels.height, tokens.pixels.width, tokens.pixels.dim);
    let mut data = vec![0.0; h * w * c];
    for i in 0..h * w {
        let v = params.value_linear.forward(&tokens.pixels.data[i * c..(i + 1) * c]);
        data[i * c..(i + 1) * c].copy_from_slice(&v);
    }
    ValueCache {
        pixels: FeatureMap { height: h, width: w, dim: c, data },
        global: params.value_linear.forward(&tokens.global),
    }
}

/// Softmax-normalized attention weights of one query: per head, the 2K
/// logits (K pixel + K global) normalize together. Returned as
/// (pixel[m][k], global[m][k]) flattened m-major.
pub fn attention_weights(logits: &[f64], heads: usize, points: usize) -> (Vec<f64>, Vec<f64>) {
    let mk = heads * points;
    let mut pixel = vec![0.0; mk];
    let mut global = vec![0.0; mk];
    for m in 0..heads {
        let head_logits: Vec<f64> = (0..points)
            .map(|k| logits[m * points + k])
            .chain((0..points).map(|k| logits[mk + m * points + k]))
            .collect();
        let max = head_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = head_logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for k in 0..points {
            pixel[m * points + k] = exps[k] / sum;
            global[m * points + k] = exps[points + k] / sum;
        }
    }
    (pixel, global)
}

/// One S2A query: deformable bilinear sampling of the pixel value map
/// around `ref_pixel` plus the self-excited global component (reference at
/// the origin of the conceptual space), heads concatenated and passed
/// through the output linear with the query added first.
///
/// `pixel_init[m*K+k]` are the initial pixel-space offsets (identity table
/// for self-S2A, box-scaled for cross-S2A).
pub fn s2a_query(
    query: &[f64],
    pos: &[f64],
    ref_pixel: (f64, f64),
    pixel_init: &[(f64, f64)],
    params: &AttentionParams,
    values: &ValueCache,
) -> Vec<f64> {
    let c = query.len();
    let (m_heads, k_points) = (params.heads, params.points);
    let head_dim = c / m_heads;
    let mk = m_heads * k_points;
    let with_pos: Vec<f64> = query.iter().zip(pos).map(|(q, p)| q + p).collect();
    let offsets = params.offset_linear.forward(&with_pos);
    let logits = params.weight_linear.forward(&with_pos);
    let (w_pixel, w_global) = attention_weights(&logits, m_heads, k_points);
    let mut concat = vec![0.0; c];
    for m in 0..m_heads {
        let c0 = m * head_dim;
        for k in 0..k_points {
            let idx = m * k_points + k;
            let (ix, iy) = pixel_init[idx];
            let sx = ref_pixel.0 + offsets[idx * 2] + ix;
            let sy = ref_pixel.1 + offsets[idx * 2 + 1] + iy;
            let sample = bilinear_sample_range(&values.pixels, sx, sy, c0, c0 + head_dim);
            for (o, v) in concat[c0..c0 + head_dim].iter_mut().zip(&sample) {
                *o += w_pixel[idx] * v;
            }
            let (gi_x, gi_y) = params.init_offset(m, k);
            let gx = offsets[(mk + idx) * 2] + gi_x;
            let gy = offsets[(mk + idx) * 2 + 1] + gi_y;
            let se = self_excited_weight(gx, gy);
            for (o, g) in concat[c0..c0 + head_dim]
                .iter_mut()
                .zip(&values.global[c0..c0 + head_dim])
            {
                *o += w_global[idx] * se * g;
            }
        }
    }
    let summed: Vec<f64> = query.iter().zip(&concat).map(|(q, v)| q + v).collect();
    params.output_linear.forward(&summed)
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn seeded(dim: usize, heads: usize, points: usize, ffn_mult: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: AttentionParams::seeded(dim, heads, points, rng),
            ffn: Mlp::seeded(&[dim, dim * ffn_mult, dim], rng),
        }
    }
}

fn residual_block(input: &[f64], attn_out: &[f64], ffn: &Mlp) -> Vec<f64> {
    let t1: Vec<f64> = attn_out.iter().zip(input).map(|(a, b)| a + b).collect();
    let t1 = layer_norm(&t1);
    let f = ffn.forward(&t1);
    let t2: Vec<f64> = f.iter().zip(&t1).map(|(a, b)| a + b).collect();
    layer_norm(&t2)
}

/// One encoder layer: self-S2A with residual + LN, then FFN with residual
/// + LN, applied to every pixel token and the global token. The global
/// query's pixel-sampling reference is the grid center. Rows run in
/// parallel; results are identical to a sequential sweep.
pub fn encode_layer(
    tokens: &TokenGrid,
    layer: &EncoderLayer,
    pos: &FeatureMap,
    global_pos: &[f64],
) -> TokenGrid {
    let (h, w, c) = (tokens.pixels.height, tokens.pixels.width, tokens.pixels.dim);
    let values = value_cache(tokens, &layer.attn);
    let pixel_init: Vec<(f64, f64)> = (0..layer.attn.heads)
        .flat_map(|m| (0..layer.attn.points).map(move |k| (m, k)))
        .map(|(m, k)| layer.attn.init_offset(m, k))
        .collect();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; w * c];
            for x in 0..w {
                let q = tokens.pixels.token(x, y);
                let attn = s2a_query(
                    q,
                    pos.token(x, y),
                    (x as f64, y as f64),
                    &pixel_init,
                    &layer.attn,
                    &values,
                );
                row[x * c..(x + 1) * c].copy_from_slice(&residual_block(q, &attn, &layer.ffn));
            }
            row
        })
        .collect();
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let g_attn = s2a_query(&tokens.global, global_pos, center, &pixel_init, &layer.attn, &values);
    let global = residual_block(&tokens.global, &g_attn, &layer.ffn);
    TokenGrid { pixels: FeatureMap { height: h, width: w, dim: c, data: rows.concat() }, global }
}

// ---------------------------------------------------------------------------
// Anchors and decoder
// ---------------------------------------------------------------------------

/// Regression and classification heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    /// 3-layer MLP emitting 4 box residuals.
    pub breg: Mlp,
    /// Linear emitting one logit per class.
    pub cls: Linear,
}

impl Heads {
    pub fn seeded(dim: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            breg: Mlp::seeded(&[dim, dim, dim, 4], rng),
            cls: Linear::seeded(dim, n_classes, rng),
        }
    }

    pub fn zeros(dim: usize, n_classes: usize) -> Self {
        Self { breg: Mlp::zeros(&[dim, dim, dim, 4]), cls: Linear::zeros(dim, n_classes) }
    }
}

/// Decoder state: normalized boxes in (0,1)^4 (cx, cy, w, h), per-class
/// scores in (0,1), and the object-query vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorState {
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
}

/// Build initial anchors from the final encoder tokens: per pixel,
/// `b_int = [(x+0.5)/W, (y+0.5)/H, s/W, s/H]` refined through the
/// regression head inside the sigmoid/inverse-sigmoid sandwich, scored by
/// the classification head; the top `q_match` anchors by best class score
/// survive, each with an all-ones query vector.
pub fn init_anchors(
    tokens: &TokenGrid,
    heads: &Heads,
    s: f64,
    q_match: usize,
) -> Result<AnchorState> {
    let (h, w, c) = (tokens.pixels.height, tokens.pixels.width, tokens.pixels.dim);
    if q_match == 0 || q_match > h * w {
        return Err(Error::InvalidArgument(format!(
            "q_match {q_match} out of range [1, {}]",
            h * w
        )));
    }
    let mut candidates: Vec<([f64; 4], Vec<f64>)> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let token = tokens.pixels.token(x, y);
            let b_int = [
                (x as f64 + 0.5) / w as f64,
                (y as f64 + 0.5) / h as f64,
                s / w as f64,
                s / h as f64,
            ];
            let res = heads.breg.forward(token);
            let mut b = [0.0; 4];
            for i in 0..4 {
                b[i] = sigmoid(res[i] + inverse_sigmoid(b_int[i]));
            }
            let scores: Vec<f64> = heads.cls.forward(token).iter().map(|&l| sigmoid(l)).collect();
            candidates.push((b, scores));
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = candidates[a].1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sb = candidates[b].1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    order.truncate(q_match);
    order.sort_unstable(); // stable pixel order among survivors
    Ok(AnchorState {
        boxes: order.iter().map(|&i| candidates[i].0).collect(),
        scores: order.iter().map(|&i| candidates[i].1.clone()).collect(),
        queries: vec![vec![1.0; c]; q_match],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub attn: AttentionParams,
    pub mlp: Mlp,
    pub heads: Heads,
}

impl DecoderLayer {
    pub fn seeded(
        dim: usize,
        heads: usize,
        points: usize,
        ffn_mult: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            attn: AttentionParams::seeded(dim, heads, points, rng),
            mlp: Mlp::seeded(&[dim, dim * ffn_mult, dim], rng),
            heads: Heads::seeded(dim, n_classes, rng),
        }
    }
}

/// One decoder layer. Per query: cross-S2A against the encoder tokens with
/// the reference point at the anchor center and initial sampling points
/// scaled into the anchor box (outermost point on the box boundary), then
/// residual LN + MLP (no self-attention among queries), box refinement
/// through the sigmoid sandwich, and classification.
///
/// Look-forward-twice note: the training-time distinction between the
/// detached box (Eq. for the next layer) and the prediction box (computed
/// from the undetached previous box) collapses in a forward-only pass —
/// both evaluate to the same value, so one box per query is returned.
pub fn decode_layer(state: &AnchorState, tokens: &TokenGrid, layer: &DecoderLayer) -> AnchorState {
    let (h, w) = (tokens.pixels.height, tokens.pixels.width);
    let values = value_cache(tokens, &layer.attn);
    let c = tokens.pixels.dim;
    let results: Vec<([f64; 4], Vec<f64>, Vec<f64>)> = state
        .queries
        .par_iter()
        .zip(&state.boxes)
        .map(|(q, b)| {
            // anchor center in sampling coordinates (token (x,y) at (x,y))
            let rx = b[0] * w as f64 - 0.5;
            let ry = b[1] * h as f64 - 0.5;
            let (bw, bh) = (b[2] * w as f64, b[3] * h as f64);
            let k_points = layer.attn.points;
            let pixel_init: Vec<(f64, f64)> = (0..layer.attn.heads)
                .flat_map(|m| (0..k_points).map(move |k| (m, k)))
                .map(|(m, k)| {
                    let (dx, dy) = HEAD_DIRECTIONS[m % 8];
                    let scale = (k + 1) as f64 / k_points as f64;
                    (dx * scale * bw / 2.0, dy * scale * bh / 2.0)
                })
                .collect();
            let pos = sinusoidal_pos(rx, ry, c);
            let attn = s2a_query(q, &pos, (rx, ry), &pixel_init, &layer.attn, &values);
            let q1: Vec<f64> = attn.iter().zip(q).map(|(a, b)| a + b).collect();
            let q1 = layer_norm(&q1);
            let m = layer.mlp.forward(&q1);
            let q2: Vec<f64> = m.iter().zip(&q1).map(|(a, b)| a + b).collect();
            let q2 = layer_norm(&q2);
            let res = layer.heads.breg.forward(&q2);
            let mut nb = [0.0; 4];
            for i in 0..4 {
                nb[i] = sigmoid(res[i] + inverse_sigmoid(b[i]));
            }
            let scores: Vec<f64> =
                layer.heads.cls.forward(&q2).iter().map(|&l| sigmoid(l)).collect();
            (nb, scores, q2)
        })
        .collect();
    let mut out = AnchorState {
        boxes: Vec::with_capacity(results.len()),
        scores: Vec::with_capacity(results.len()),
        queries: Vec::with_capacity(results.len()),
    };
    for (b, s, q) in results {
        out.boxes.push(b);
        out.scores.push(s);
        out.queries.push(q);
    }
    out
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input band count.
    pub bands: usize,
    /// Token dimension C; heads must divide it.
    pub dim: usize,
    /// Attention heads M.
    pub heads: usize,
    /// Sampling points per head K.
    pub points: usize,
    /// Encoder layer count E.
    pub encoder_layers: usize,
    /// Decoder layer count D.
    pub decoder_layers: usize,
    /// FFN hidden width multiplier.
    pub ffn_mult: usize,
    pub n_classes: usize,
    /// Input normalization constant (3000 for the radiance benchmark, 1
    /// for reflectance data).
    pub v: f64,
    /// Initial anchor side length in pixels.
    pub s: f64,
    /// Queries kept after anchor initialization (clamped to H*W at run
    /// time for small images).
    pub q_match: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bands: 16,
            dim: 64,
            heads: 8,
            points: 4,
            encoder_layers: 6,
            decoder_layers: 6,
            ffn_mult: 4,
            n_classes: 1,
            v: 3000.0,
            s: 1.0,
            q_match: 300,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads {} must divide token dim {}",
                self.heads, self.dim
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::InvalidConfig("token dim must be divisible by 4".into()));
        }
        if self.points == 0
            || self.bands == 0
            || self.n_classes == 0
            || self.q_match == 0
            || !(self.v > 0.0)
            || !(self.s > 0.0)
        {
            return Err(Error::InvalidConfig("all model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ModelConfig =
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub input_linear: Linear,
    pub encoders: Vec<EncoderLayer>,
    pub init_heads: Heads,
    pub decoders: Vec<DecoderLayer>,
}

impl ModelWeights {
    /// Deterministic random initialization for tests and benchmarks.
    pub fn seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let c = config.dim;
        Ok(Self {
            config: config.clone(),
            input_linear: Linear::seeded(config.bands, c, &mut rng),
            encoders: (0..config.encoder_layers)
                .map(|_| EncoderLayer::seeded(c, config.heads, config.points, config.ffn_mult, &mut rng))
                .collect(),
            init_heads: Heads::seeded(c, config.n_classes, &mut rng),
            decoders: (0..config.decoder_layers)
                .map(|_| {
                    DecoderLayer::seeded(
                        c,
                        config.heads,
                        config.points,
                        config.ffn_mult,
                        config.n_classes,
                        &mut rng,
                    )
                })
                .collect(),
        })
    }

    fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out: Vec<(String, &Linear)> = vec![("input".into(), &self.input_linear)];
        for (i, e) in self.encoders.iter().enumerate() {
            out.push((format!("enc{i}.offset"), &e.attn.offset_linear));
            out.push((format!("enc{i}.weight"), &e.attn.weight_linear));
            out.push((format!("enc{i}.value"), &e.attn.value_linear));
            out.push((format!("enc{i}.output"), &e.attn.output_linear));
            for (j, l) in e.ffn.layers.iter().enumerate() {
                out.push((format!("enc{i}.ffn{j}"), l));
            }
        }
        for (j, l) in self.init_heads.breg.layers.iter().enumerate() {
            out.push((format!("init.breg{j}"), l));
        }
        out.push(("init.cls".into(), &self.init_heads.cls));
        for (i, d) in self.decoders.iter().enumerate() {
            out.push((format!("dec{i}.offset"), &d.attn.offset_linear));
            out.push((format!("dec{i}.weight"), &d.attn.weight_linear));
            out.push((format!("dec{i}.value"), &d.attn.value_linear));
            out.push((format!("dec{i}.output"), &d.attn.output_linear));
            for (j, l) in d.mlp.layers.iter().enumerate() {
                out.push((format!("dec{i}.mlp{j}"), l));
            }
            for (j, l) in d.heads.breg.layers.iter().enumerate() {
                out.push((format!("dec{i}.breg{j}"), l));
            }
            out.push((format!("dec{i}.cls"), &d.heads.cls));
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = vec![&mut self.input_linear];
        for e in &mut self.encoders {
            out.push(&mut e.attn.offset_linear);
            out.push(&mut e.attn.weight_linear);
            out.push(&mut e.attn.value_linear);
            out.push(&mut e.attn.output_linear);
            out.extend(e.ffn.layers.iter_mut());
        }
        out.extend(self.init_heads.breg.layers.iter_mut());
        out.push(&mut self.init_heads.cls);
        for d in &mut self.decoders {
            out.push(&mut d.attn.offset_linear);
            out.push(&mut d.attn.weight_linear);
            out.push(&mut d.attn.value_linear);
            out.push(&mut d.attn.output_linear);
            out.extend(d.mlp.layers.iter_mut());
            out.extend(d.heads.breg.layers.iter_mut());
            out.push(&mut d.heads.cls);
        }
        out
    }

    /// Write `weights.bin` (flat little-endian float32, weight rows then
    /// bias per tensor in a fixed traversal order) and `weights.json`
    /// (config + shape manifest).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        for (name, l) in self.linears() {
            for v in l.weight.iter().chain(&l.bias) {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            tensors.push(serde_json::json!({
                "name": name,
                "out_dim": l.out_dim,
                "in_dim": l.in_dim,
            }));
        }
        let manifest = serde_json::json!({
            "dtype": "f32",
            "byte_order": "le",
            "config": self.config,
            "tensors": tensors,
        });
        let bin = dir.join("weights.bin");
        fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
        let json = dir.join("weights.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json, e))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let json = dir.join("weights.json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
        let config: ModelConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| Error::json(&json, e))?;
        let mut model = ModelWeights::seeded(&config, 0)?;
        let bin = dir.join("weights.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let floats: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut cursor = 0usize;
        for l in model.linears_mut() {
            let need = l.weight.len() + l.bias.len();
            if cursor + need > floats.len() {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "weights.bin too short: need {} floats past offset {cursor}, have {}",
                        need,
                        floats.len()
                    ),
                });
            }
            let wn = l.weight.len();
            l.weight.copy_from_slice(&floats[cursor..cursor + wn]);
            cursor += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&floats[cursor..cursor + bn]);
            cursor += bn;
        }
        if cursor != floats.len() {
            return Err(Error::ShapeMismatch {
                context: format!("weights.bin has {} trailing floats", floats.len() - cursor),
            });
        }
        Ok(model)
    }
}

/// Full forward pass: tokenize, E encoder layers, anchor initialization,
/// D decoder layers, box denormalization to pixel units, and NMS.
/// Deterministic for fixed weights and input, independent of worker count.
pub fn run_forward(cube: &HyperCube, model: &ModelWeights) -> Result<Vec<Detection>> {
    let config = &model.config;
    config.validate()?;
    if cube.bands() != config.bands {
        return Err(Error::ShapeMismatch {
            context: format!("model expects {} bands, cube has {}", config.bands, cube.bands()),
        });
    }
    let mut tokens = tokenize(cube, config.v, &model.input_linear)?;
    let (h, w) = (cube.height(), cube.width());
    let pos = sinusoidal_pos_grid(h, w, config.dim);
    let global_pos = sinusoidal_pos((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, config.dim);
    for layer in &model.encoders {
        layer.attn.validate(config.dim)?;
        tokens = encode_layer(&tokens, layer, &pos, &global_pos);
    }
    let q_match = config.q_match.min(h * w);
    let mut state = init_anchors(&tokens, &model.init_heads, config.s, q_match)?;
    for layer in &model.decoders {
        layer.attn.validate(config.dim)?;
        state = decode_layer(&state, &tokens, layer);
    }
    let mut dets: Vec<Detection> = state
        .boxes
        .iter()
        .zip(&state.scores)
        .map(|(b, scores)| {
            let (class_id, confidence) = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, &s)| (i, s))
                .expect("n_classes >= 1");
            Detection {
                box_: BBox::new(
                    b[0] * w as f64,
                    b[1] * h as f64,
                    b[2] * w as f64,
                    b[3] * h as f64,
                ),
                class_id,
                confidence,
            }
        })
        .collect();
    dets.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    Ok(nms(&dets, DEFAULT_NMS_IOU))
}
