//! Forward pass of the windowed-attention classifier, recorded on a tape.
//!
//! Token maps are kept channel-last as `[B, H, W, C]` between blocks.
//! All data movement (patch extraction, cyclic shifts, window partitioning,
//! 2x2 merging) is expressed as index gathers so it differentiates for free.

use std::rc::Rc;

use super::config::SwinConfig;
use super::weights::{BlockW, LinearW, MergeW, ModelParams, NormW, SwinWeights};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Additive value for attention logits between tokens that must not attend
/// to each other.
pub const MASK_VALUE: f64 = -1e9;

/// Source offsets turning `[B, C, H, W]` pixels into `[B, (H/p)(W/p), C*p*p]`
/// patch vectors, feature order `(c, ky, kx)`.
pub fn patch_index(b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (hp, wp) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ty in 0..hp {
            for tx in 0..wp {
                for ci in 0..c {
                    for ky in 0..p {
                        for kx in 0..p {
                            idx.push(((bi * c + ci) * h + ty * p + ky) * w + tx * p + kx);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// `out[b, y, x] = in[b, (y + shift) mod h, (x + shift) mod w]` on a
/// `[B, H, W, C]` map; a positive shift moves content up and left.
pub fn cyclic_shift_index(b: usize, h: usize, w: usize, c: usize, shift: isize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            let sy = (y as isize + shift).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize + shift).rem_euclid(w as isize) as usize;
                let base = ((bi * h + sy) * w + sx) * c;
                idx.extend(base..base + c);
            }
        }
    }
    idx
}

/// Source offsets mapping `[B, H, W, C]` to `[B * nW, M*M, C]`, windows in
/// row-major order within each image.
pub fn window_partition_index(b: usize, h: usize, w: usize, c: usize, m: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wy in 0..h / m {
            for wx in 0..w / m {
                for iy in 0..m {
                    for ix in 0..m {
                        let base = ((bi * h + wy * m + iy) * w + wx * m + ix) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`window_partition_index`].
pub fn window_reverse_index(b: usize, h: usize, w: usize, c: usize, m: usize) -> Vec<usize> {
    let fwd = window_partition_index(b, h, w, c, m);
    let mut inv = vec![0; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Source offsets for 2x2 merging of `[B, H, W, C]` into
/// `[B, H/2, W/2, 4C]`; channel blocks are `(0,0), (1,0), (0,1), (1,1)` as
/// `(dy, dx)`.
pub fn merge_index(b: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((bi * h + 2 * y + dy) * w + 2 * x + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

/// Row of the `[(2M-1)^2, heads]` bias table for every query/key pair of a
/// window, flattened `[M*M, M*M]`.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / m, i % m);
        for j in 0..n {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Region label of every position of the shifted `[H, W]` grid. Tokens with
/// different labels were not adjacent before the cyclic shift.
pub fn shift_region_ids(h: usize, w: usize, m: usize, shift: usize) -> Vec<usize> {
    let band = |v: usize, extent: usize| {
        if v < extent - m {
            0
        } else if v < extent - shift {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            ids.push(band(y, h) * 3 + band(x, w));
        }
    }
    ids
}

/// `[nW, M*M, M*M]` additive mask for shifted windows: 0 within a region,
/// [`MASK_VALUE`] across regions.
pub fn attention_mask(h: usize, w: usize, m: usize, shift: usize) -> Vec<f64> {
    let ids = shift_region_ids(h, w, m, shift);
    let win = window_partition_index(1, h, w, 1, m);
    let n = m * m;
    let n_windows = (h / m) * (w / m);
    let mut mask = Vec::with_capacity(n_windows * n * n);
    for wi in 0..n_windows {
        let tok = &win[wi * n..(wi + 1) * n];
        for &a in tok {
            for &b in tok {
                mask.push(if ids[a] == ids[b] { 0.0 } else { MASK_VALUE });
            }
        }
    }
    mask
}

fn dims4<T: Float>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(tape.shape(x)).map_err(|_| Error::dim(op, format!("expected a 4-d tensor, got {:?}", tape.shape(x))))
}

pub fn cyclic_shift<T: Float>(tape: &mut Tape<T>, x: Var, shift: isize) -> Result<Var> {
    let [b, h, w, c] = dims4(tape, x, "cyclic_shift")?;
    let shape = tape.shape(x).to_vec();
    tape.gather(x, cyclic_shift_index(b, h, w, c, shift).into(), &shape)
}

/// `[B, H, W, C]` to `[B * nW, M*M, C]`.
pub fn window_partition<T: Float>(tape: &mut Tape<T>, x: Var, m: usize) -> Result<Var> {
    let [b, h, w, c] = dims4(tape, x, "window_partition")?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::dim("window_partition", format!("{h}x{w} map is not divisible by window {m}")));
    }
    let n_windows = (h / m) * (w / m);
    tape.gather(x, window_partition_index(b, h, w, c, m).into(), &[b * n_windows, m * m, c])
}

/// `[B * nW, M*M, C]` back to `[B, H, W, C]`.
pub fn window_reverse<T: Float>(tape: &mut Tape<T>, windows: Var, b: usize, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(windows).to_vec();
    let bad = || Error::dim("window_reverse", format!("{shape:?} does not tile a {b}x{h}x{w} map"));
    if shape.len() != 3 {
        return Err(bad());
    }
    let m = (shape[1] as f64).sqrt().round() as usize;
    if m * m != shape[1] || h % m != 0 || w % m != 0 || shape[0] != b * (h / m) * (w / m) {
        return Err(bad());
    }
    let c = shape[2];
    tape.gather(windows, window_reverse_index(b, h, w, c, m).into(), &[b, h, w, c])
}

pub fn linear<T: Float>(tape: &mut Tape<T>, x: Var, w: &LinearW<Var>) -> Result<Var> {
    let y = tape.matmul(x, w.weight)?;
    match w.bias {
        Some(b) => tape.add_trailing(y, b),
        None => Ok(y),
    }
}

pub fn layer_norm<T: Float>(tape: &mut Tape<T>, x: Var, n: &NormW<Var>, eps: f64) -> Result<Var> {
    tape.layer_norm(x, n.gain, n.bias, eps)
}

/// Result of [`windowed_attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[W, N, heads * kv]`, heads concatenated.
    pub output: Var,
    /// Post-softmax weights `[W, heads, N, N]`.
    pub weights: Var,
}

/// `softmax(Q K^T / sqrt(kv) + bias + mask) V` per window and head.
///
/// `q`, `k`, `v` are `[W, heads, N, kv]`. `bias` is `[heads, N, N]`; `mask`
/// is `[nW, heads, N, N]` and repeats over the `W / nW` images.
pub fn windowed_attention<T: Float>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<Var>,
) -> Result<AttentionOutput> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 4 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::dim(
            "windowed_attention",
            format!("q {:?}, k {:?}, v {:?}", shape, tape.shape(k), tape.shape(v)),
        ));
    }
    let (nw_total, heads, n, kv) = (shape[0], shape[1], shape[2], shape[3]);
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let raw = tape.matmul(q, kt)?;
    let mut logits = tape.scale(raw, T::one() / T::of(kv as f64).sqrt())?;
    if let Some(b) = bias {
        logits = tape.add_trailing(logits, b)?;
    }
    if let Some(mk) = mask {
        let n_windows = tape.shape(mk)[0];
        if n_windows == 0 || nw_total % n_windows != 0 {
            return Err(Error::dim("windowed_attention", format!("mask for {n_windows} windows vs {nw_total}")));
        }
        let grouped = tape.reshape(logits, &[nw_total / n_windows, n_windows, heads, n, n])?;
        let masked = tape.add_trailing(grouped, mk)?;
        logits = tape.reshape(masked, &[nw_total, heads, n, n])?;
    }
    let weights = tape.softmax(logits, 3)?;
    let mixed = tape.matmul(weights, v)?;
    let by_token = tape.permute(mixed, &[0, 2, 1, 3])?;
    let output = tape.reshape(by_token, &[nw_total, n, heads * kv])?;
    Ok(AttentionOutput { output, weights })
}

/// Geometry of one block invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGeometry {
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

/// Pre-norm transformer block on a `[B, H, W, C]` map: cyclic shift,
/// window attention (masked when shifted), inverse shift, residual, then a
/// residual GELU MLP. Returns the new map and the attention weights.
pub fn swin_block<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    w: &BlockW<Var>,
    geom: BlockGeometry,
    eps: f64,
) -> Result<(Var, Var)> {
    let [b, h, wd, c] = dims4(tape, x, "swin_block")?;
    let BlockGeometry { heads, window: m, shift } = geom;
    if c % heads != 0 {
        return Err(Error::dim("swin_block", format!("{c} channels over {heads} heads")));
    }
    let kv = c / heads;
    let n = m * m;
    let normed = layer_norm(tape, x, &w.norm1, eps)?;
    let shifted = if shift > 0 { cyclic_shift(tape, normed, shift as isize)? } else { normed };
    let windows = window_partition(tape, shifted, m)?;
    let nw_total = tape.shape(windows)[0];
    let qkv = linear(tape, windows, &w.qkv)?;
    let qkv = tape.reshape(qkv, &[nw_total, n, 3, heads, kv])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let slice = tape.narrow(qkv, 0, i, 1)?;
        *part = tape.reshape(slice, &[nw_total, heads, n, kv])?;
    }
    let [q, k, v] = parts;
    let bias = match w.rel_bias {
        Some(table) => {
            let rel = relative_position_index(m);
            let mut idx = Vec::with_capacity(heads * n * n);
            for hd in 0..heads {
                idx.extend(rel.iter().map(|&r| r * heads + hd));
            }
            Some(tape.gather(table, idx.into(), &[heads, n, n])?)
        }
        None => None,
    };
    let mask = if shift > 0 {
        let base = attention_mask(h, wd, m, shift);
        let n_windows = (h / m) * (wd / m);
        let mut expanded = Vec::with_capacity(n_windows * heads * n * n);
        for wi in 0..n_windows {
            for _ in 0..heads {
                expanded.extend(base[wi * n * n..(wi + 1) * n * n].iter().map(|&v| T::of(v)));
            }
        }
        Some(tape.constant(Tensor::new([n_windows, heads, n, n], expanded)?))
    } else {
        None
    };
    let attn = windowed_attention(tape, q, k, v, bias, mask)?;
    let projected = linear(tape, attn.output, &w.proj)?;
    let merged = window_reverse(tape, projected, b, h, wd)?;
    let unshifted = if shift > 0 { cyclic_shift(tape, merged, -(shift as isize))? } else { merged };
    let x = tape.add(x, unshifted)?;
    let normed = layer_norm(tape, x, &w.norm2, eps)?;
    let hidden = linear(tape, normed, &w.fc1)?;
    let hidden = tape.gelu(hidden)?;
    let out = linear(tape, hidden, &w.fc2)?;
    Ok((tape.add(x, out)?, attn.weights))
}

/// `[B, H, W, C]` to `[B, H/2, W/2, 2C]`: concatenate 2x2 neighbours, norm,
/// linear reduction.
pub fn patch_merging<T: Float>(tape: &mut Tape<T>, x: Var, w: &MergeW<Var>, eps: f64) -> Result<Var> {
    let [b, h, wd, c] = dims4(tape, x, "patch_merging")?;
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::dim("patch_merging", format!("{h}x{wd} map has an odd extent")));
    }
    let cat = tape.gather(x, merge_index(b, h, wd, c).into(), &[b, h / 2, wd / 2, 4 * c])?;
    let normed = layer_norm(tape, cat, &w.norm, eps)?;
    linear(tape, normed, &w.reduction)
}

/// Per-layer attention weights collected during a forward pass.
#[derive(Debug, Default, Clone)]
pub struct ForwardTrace {
    /// `(stage, block, weights [W, heads, N, N])`.
    pub attention: Vec<(usize, usize, Var)>,
}

/// The classifier for one validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinModel {
    config: SwinConfig,
}

impl SwinModel {
    pub fn new(config: SwinConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SwinConfig {
        &self.config
    }

    pub fn init_params<T: Float>(&self, seed: u64) -> Result<ModelParams<T>> {
        ModelParams::init(&self.config, seed)
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind<T: Float>(&self, tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> SwinWeights<Var> {
        params.map(|_, t| {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            tape.leaf(t)
        })
    }

    /// `[B, 3, H, W]` pixels to `[B, (H/p)(W/p), C]` normalized tokens.
    pub fn patch_embed<T: Float>(&self, tape: &mut Tape<T>, w: &SwinWeights<Var>, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = cfg.input_size;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != s || shape[3] != s {
            return Err(Error::dim(
                "patch_embed",
                format!("expected [B, {}, {s}, {s}], got {shape:?}", cfg.in_channels),
            ));
        }
        let b = shape[0];
        let p = cfg.patch_size;
        let side = s / p;
        let idx: Rc<[usize]> = patch_index(b, cfg.in_channels, s, s, p).into();
        let patches = tape.gather(x, idx, &[b, side * side, cfg.in_channels * p * p])?;
        let tokens = linear(tape, patches, &w.patch)?;
        layer_norm(tape, tokens, &w.patch_norm, cfg.norm_eps)
    }

    /// Pooled pre-head representation `[B, C_final]`.
    pub fn features<T: Float>(
        &self,
        tape: &mut Tape<T>,
        w: &SwinWeights<Var>,
        x: Var,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let b = tape.shape(x)[0];
        let tokens = self.patch_embed(tape, w, x).map_err(|e| e.in_context("patch embedding"))?;
        let side = cfg.stage_resolution(0);
        let mut map = tape.reshape(tokens, &[b, side, side, cfg.embed_dim])?;
        for (s, stage) in w.stages.iter().enumerate() {
            for (bi, block) in stage.blocks.iter().enumerate() {
                let geom = BlockGeometry {
                    heads: cfg.heads[s],
                    window: cfg.stage_window(s),
                    shift: cfg.block_shift(s, bi),
                };
                let (next, attn) = swin_block(tape, map, block, geom, cfg.norm_eps)
                    .map_err(|e| e.in_context(format!("stage {s} block {bi}")))?;
                map = next;
                if let Some(t) = trace.as_deref_mut() {
                    t.attention.push((s, bi, attn));
                }
            }
            if let Some(merge) = &stage.merge {
                map = patch_merging(tape, map, merge, cfg.norm_eps)
                    .map_err(|e| e.in_context(format!("stage {s} merge")))?;
            }
        }
        let normed = layer_norm(tape, map, &w.norm, cfg.norm_eps)?;
        let side = cfg.stage_resolution(cfg.num_stages() - 1);
        let flat = tape.reshape(normed, &[b, side * side, cfg.final_dim()])?;
        tape.mean_axis(flat, 1)
    }

    /// Linear classifier over pooled features, raw logits `[B, 2]`.
    pub fn head<T: Float>(&self, tape: &mut Tape<T>, w: &SwinWeights<Var>, features: Var) -> Result<Var> {
        linear(tape, features, &w.head).map_err(|e| e.in_context("head"))
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        w: &SwinWeights<Var>,
        x: Var,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let feats = self.features(tape, w, x, trace)?;
        self.head(tape, w, feats)
    }

    /// Gradient-free logits for a batch.
    pub fn logits<T: Float>(&self, params: &ModelParams<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, params, false);
        let x = tape.constant(inputs.clone());
        let y = self.forward(&mut tape, &w, x, None)?;
        Ok(tape.value(y).clone())
    }

    /// Gradient-free pooled features for a batch.
    pub fn extract_features<T: Float>(&self, params: &ModelParams<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, params, false);
        let x = tape.constant(inputs.clone());
        let y = self.features(&mut tape, &w, x, None)?;
        Ok(tape.value(y).clone())
    }
}

/// Names of leaves in `a` whose shapes differ from `b`, formatted for
/// error messages.
pub(crate) fn shape_diff<T: Float>(expected: &ModelParams<T>, found: &[(String, Vec<usize>)]) -> Vec<String> {
    let mut diffs = Vec::new();
    let exp = expected.named();
    for (name, t) in &exp {
        match found.iter().find(|(n, _)| n == name) {
            None => diffs.push(format!("{name}: missing (expected {:?})", t.shape())),
            Some((_, s)) if s.as_slice() != t.shape() => {
                diffs.push(format!("{name}: expected {:?}, found {s:?}", t.shape()))
            }
            _ => {}
        }
    }
    for (name, s) in found {
        if !exp.iter().any(|(n, _)| n == name) {
            diffs.push(format!("{name}: unexpected tensor {s:?}"));
        }
    }
    diffs
}
