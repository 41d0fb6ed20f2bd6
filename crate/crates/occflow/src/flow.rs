//! Temporal alignment of historical frame features: flow-based warping,
//! forward-backward consistency occlusion masks, confidence gating, and
//! windowed cross-attention fusion into the current frame.

use crate::error::{Error, Result};
use crate::grid::{warp, BoolMask, FeatureMap, FlowField};
use crate::nn::{dot, softmax_inplace, LinearProj};

/// Constants of the forward-backward consistency test: the residual
/// threshold is `alpha * (|fwd| + |bwd|) + beta` per pixel.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyParams {
    pub alpha: f32,
    pub beta: f32,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        ConsistencyParams {
            alpha: 0.01,
            beta: 0.5,
        }
    }
}

impl ConsistencyParams {
    pub fn new(alpha: f32, beta: f32) -> Result<Self> {
        if !(alpha >= 0.0) || !(beta > 0.0) {
            return Err(Error::input(format!(
                "consistency constants need alpha >= 0 and beta > 0, got ({alpha}, {beta})"
            )));
        }
        Ok(ConsistencyParams { alpha, beta })
    }
}

/// Forward-backward consistency check. A pixel is marked true (occluded /
/// inconsistent) when the round-trip flow residual exceeds the threshold:
///
/// ```text
/// mag    = |F_fwd| + |F_bwd|              (per pixel)
/// F^_bwd = warp(F_bwd, F_fwd)
/// F^_fwd = warp(F_fwd, F_bwd)
/// T      = alpha * mag + beta
/// M_fwd  = |F_fwd + F^_bwd| > T
/// M_bwd  = |F_bwd + F^_fwd| > T
/// ```
pub fn forward_backward_check(
    flow_fwd: &FlowField,
    flow_bwd: &FlowField,
    params: &ConsistencyParams,
) -> Result<(BoolMask, BoolMask)> {
    if !flow_fwd.same_shape(flow_bwd) {
        return Err(Error::shape(format!(
            "consistency check: flows {}x{} vs {}x{}",
            flow_fwd.height, flow_fwd.width, flow_bwd.height, flow_bwd.width
        )));
    }
    let (h, w) = (flow_fwd.height, flow_fwd.width);
    let warped_bwd = warp(&flow_bwd.to_features(), flow_fwd)?;
    let warped_fwd = warp(&flow_fwd.to_features(), flow_bwd)?;

    let mut mask_fwd = BoolMask::new_false(h, w);
    let mut mask_bwd = BoolMask::new_false(h, w);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = flow_fwd.at(y, x);
            let (bx, by) = flow_bwd.at(y, x);
            let mag = (fx * fx + fy * fy).sqrt() + (bx * bx + by * by).sqrt();
            let threshold = params.alpha * mag + params.beta;

            let wb = warped_bwd.pixel(y, x);
            let rf = ((fx + wb[0]).powi(2) + (fy + wb[1]).powi(2)).sqrt();
            mask_fwd.set(y, x, rf > threshold);

            let wf = warped_fwd.pixel(y, x);
            let rb = ((bx + wf[0]).powi(2) + (by + wf[1]).powi(2)).sqrt();
            mask_bwd.set(y, x, rb > threshold);
        }
    }
    Ok((mask_fwd, mask_bwd))
}

/// Zero out warped features wherever the occlusion mask is set, keeping
/// only high-confidence regions.
pub fn mask_gate(warped: &FeatureMap, occlusion: &BoolMask) -> Result<FeatureMap> {
    if warped.height != occlusion.height || warped.width != occlusion.width {
        return Err(Error::shape(format!(
            "mask gate: features {}x{} vs mask {}x{}",
            warped.height, warped.width, occlusion.height, occlusion.width
        )));
    }
    let mut out = warped.clone();
    for y in 0..out.height {
        for x in 0..out.width {
            if occlusion.at(y, x) {
                out.pixel_mut(y, x).fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Windowed cross-attention parameters: one head of width `dim`, keys drawn
/// from a `window x window` neighborhood in every history frame.
#[derive(Debug, Clone)]
pub struct NcaParams {
    pub window: usize,
    pub dim: usize,
    pub query: LinearProj,
    pub key: LinearProj,
    pub value: LinearProj,
    pub output: LinearProj,
}

impl NcaParams {
    pub fn new(
        window: usize,
        dim: usize,
        query: LinearProj,
        key: LinearProj,
        value: LinearProj,
        output: LinearProj,
    ) -> Result<Self> {
        if window % 2 == 0 || window == 0 {
            return Err(Error::input(format!(
                "attention window must be odd and >= 1, got {window}"
            )));
        }
        let channels = query.in_dim;
        if key.in_dim != channels
            || value.in_dim != channels
            || query.out_dim != dim
            || key.out_dim != dim
            || value.out_dim != dim
            || output.in_dim != dim
            || output.out_dim != channels
        {
            return Err(Error::shape(
                "attention projections inconsistent with channel/head dims".to_string(),
            ));
        }
        Ok(NcaParams {
            window,
            dim,
            query,
            key,
            value,
            output,
        })
    }

    /// Identity projections; only valid when `dim` equals the channel count.
    pub fn identity(window: usize, dim: usize) -> Result<Self> {
        NcaParams::new(
            window,
            dim,
            LinearProj::identity(dim),
            LinearProj::identity(dim),
            LinearProj::identity(dim),
            LinearProj::identity(dim),
        )
    }
}

/// Fusion result with the per-query attention rows exposed (each row is the
/// softmax over all in-window keys of all history frames, in frame-major
/// then row-major window order).
pub struct NcaOutput {
    pub features: FeatureMap,
    pub attention: Vec<Vec<f32>>,
}

/// Cross-attention fusion of gated history into the current frame.
///
/// Queries come from the current frame, keys/values from the history
/// frames restricted to the spatial window around each query; the attended
/// value is projected back and added residually to the current features.
pub fn nca_fuse(
    current: &FeatureMap,
    history: &[FeatureMap],
    params: &NcaParams,
) -> Result<FeatureMap> {
    Ok(nca_fuse_with_attention(current, history, params, false)?.features)
}

pub fn nca_fuse_with_attention(
    current: &FeatureMap,
    history: &[FeatureMap],
    params: &NcaParams,
    collect_attention: bool,
) -> Result<NcaOutput> {
    if history.is_empty() {
        return Err(Error::input("attention fusion needs at least one history frame".to_string()));
    }
    for h in history {
        if !h.same_shape(current) {
            return Err(Error::shape(format!(
                "history frame {}x{}x{} does not match current {}x{}x{}",
                h.height, h.width, h.channels, current.height, current.width, current.channels
            )));
        }
    }
    if current.channels != params.query.in_dim {
        return Err(Error::shape(format!(
            "attention projections expect {} channels, maps have {}",
            params.query.in_dim, current.channels
        )));
    }

    let (h, w, c) = (current.height, current.width, current.channels);
    let radius = (params.window / 2) as i64;
    let scale = 1.0 / (params.dim as f32).sqrt();

    let mut out = current.clone();
    let mut attention = Vec::new();
    let mut q = vec![0.0f32; params.dim];
    let mut proj = vec![0.0f32; params.dim];
    let mut attended = vec![0.0f32; params.dim];
    let mut out_px = vec![0.0f32; c];

    for y in 0..h as i64 {
        for x in 0..w as i64 {
            params.query.apply_into(current.pixel(y as usize, x as usize), &mut q);

            // Fixed key order: history frame, then window row, then column.
            let mut logits = Vec::with_capacity(history.len() * params.window * params.window);
            let mut keys_src: Vec<(usize, usize, usize)> = Vec::with_capacity(logits.capacity());
            for (fi, frame) in history.iter().enumerate() {
                for dy in -radius..=radius {
                    let sy = y + dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for dx in -radius..=radius {
                        let sx = x + dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        params
                            .key
                            .apply_into(frame.pixel(sy as usize, sx as usize), &mut proj);
                        logits.push(dot(&q, &proj) * scale);
                        keys_src.push((fi, sy as usize, sx as usize));
                    }
                }
            }
            softmax_inplace(&mut logits);

            attended.fill(0.0);
            for (weight, (fi, sy, sx)) in logits.iter().zip(keys_src.iter()) {
                params.value.apply_into(history[*fi].pixel(*sy, *sx), &mut proj);
                for (a, v) in attended.iter_mut().zip(proj.iter()) {
                    *a += weight * v;
                }
            }
            params.output.apply_into(&attended, &mut out_px);
            let dst = out.pixel_mut(y as usize, x as usize);
            for (d, v) in dst.iter_mut().zip(out_px.iter()) {
                *d += v;
            }
            if collect_attention {
                attention.push(logits);
            }
        }
    }
    Ok(NcaOutput {
        features: out,
        attention,
    })
}

/// Channel-concatenate `[current, warped_1, ..., warped_n]` and project
/// back to the current channel count with a per-pixel linear map.
pub fn build_raw(
    current: &FeatureMap,
    warped_unfiltered: &[FeatureMap],
    fusion: &LinearProj,
) -> Result<FeatureMap> {
    for m in warped_unfiltered {
        if !m.same_shape(current) {
            return Err(Error::shape("raw fusion inputs must share shape".to_string()));
        }
    }
    let c = current.channels;
    let stacked = (warped_unfiltered.len() + 1) * c;
    if fusion.in_dim != stacked || fusion.out_dim != c {
        return Err(Error::shape(format!(
            "raw fusion projection must be {}->{}, got {}->{}",
            stacked, c, fusion.in_dim, fusion.out_dim
        )));
    }
    let mut out = FeatureMap::zeros(current.height, current.width, c);
    let mut concat = vec![0.0f32; stacked];
    for y in 0..current.height {
        for x in 0..current.width {
            concat[..c].copy_from_slice(current.pixel(y, x));
            for (i, m) in warped_unfiltered.iter().enumerate() {
                concat[(i + 1) * c..(i + 2) * c].copy_from_slice(m.pixel(y, x));
            }
            let base = (y * current.width + x) * c;
            fusion.apply_into(&concat, &mut out.data[base..base + c]);
        }
    }
    Ok(out)
}
