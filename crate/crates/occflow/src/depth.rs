//! Curriculum-scheduled depth fusion: dense completion of sparse depth,
//! convex blending against stereo depth under a decaying schedule,
//! soft-binned depth volumes, symmetric confidence-gated cross-attention
//! between the two volumes, and the final volume fusion network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, VoxelGrid};
use crate::nn::{relu_inplace, sigmoid, softmax_inplace, Conv2d, Conv3d, LinearProj};

/// Per-pixel metric depth; values <= 0 mark missing measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "depth map expects {}x{} = {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(DepthMap {
            height,
            width,
            data,
        })
    }

    pub fn invalid(height: usize, width: usize) -> Self {
        DepthMap {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(v: f32) -> bool {
        v > 0.0 && v.is_finite()
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| Self::is_valid(v)).count()
    }

    pub fn fully_valid(&self) -> bool {
        self.data.iter().all(|&v| Self::is_valid(v))
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaShape {
    Linear,
    Cosine,
}

/// Decaying blend weight over training steps: 1 through the warmup span,
/// then decays to exactly 0 at `total_steps`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub shape: LambdaShape,
}

impl CurriculumSchedule {
    pub fn new(total_steps: usize, warmup_fraction: f64, shape: LambdaShape) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::input("schedule needs total_steps >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&warmup_fraction) {
            return Err(Error::input(format!(
                "warmup fraction must lie in [0, 1], got {warmup_fraction}"
            )));
        }
        Ok(CurriculumSchedule {
            total_steps,
            warmup_fraction,
            shape,
        })
    }

    pub fn lambda_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::input(format!(
                "step {} beyond schedule end {}",
                step, self.total_steps
            )));
        }
        if step == self.total_steps {
            return Ok(0.0);
        }
        let warmup_end = self.warmup_fraction * self.total_steps as f64;
        let t = step as f64;
        if t < warmup_end || self.total_steps as f64 <= warmup_end {
            return Ok(1.0);
        }
        let progress = (t - warmup_end) / (self.total_steps as f64 - warmup_end);
        Ok(match self.shape {
            LambdaShape::Linear => 1.0 - progress,
            LambdaShape::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        })
    }
}

/// Number of nearest valid pixels blended when filling a missing pixel.
pub const COMPLETION_NEIGHBORS: usize = 8;

/// Fill every missing pixel by inverse-squared-distance interpolation from
/// the nearest valid pixels; valid pixels are preserved exactly.
pub fn complete_depth(sparse: &DepthMap) -> Result<DepthMap> {
    let valid: Vec<(usize, usize, f32)> = (0..sparse.height)
        .flat_map(|y| (0..sparse.width).map(move |x| (y, x)))
        .filter_map(|(y, x)| {
            let v = sparse.at(y, x);
            DepthMap::is_valid(v).then_some((y, x, v))
        })
        .collect();
    if valid.is_empty() {
        return Err(Error::input("depth completion needs at least one valid pixel".to_string()));
    }

    let mut out = sparse.clone();
    // (squared distance, insertion order, value); ties broken by row-major
    // order of the valid pixels so the fill is deterministic.
    let mut nearest: Vec<(u64, usize, f32)> = Vec::with_capacity(COMPLETION_NEIGHBORS + 1);
    for y in 0..sparse.height {
        for x in 0..sparse.width {
            if DepthMap::is_valid(sparse.at(y, x)) {
                continue;
            }
            nearest.clear();
            for (i, &(vy, vx, v)) in valid.iter().enumerate() {
                let dy = vy as i64 - y as i64;
                let dx = vx as i64 - x as i64;
                let d2 = (dy * dy + dx * dx) as u64;
                let entry = (d2, i, v);
                let pos = nearest.partition_point(|e| (e.0, e.1) <= (d2, i));
                if pos < COMPLETION_NEIGHBORS {
                    nearest.insert(pos, entry);
                    nearest.truncate(COMPLETION_NEIGHBORS);
                }
            }
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for &(d2, _, v) in &nearest {
                let w = 1.0 / d2 as f64;
                num += w * v as f64;
                den += w;
            }
            out.set(y, x, (num / den) as f32);
        }
    }
    Ok(out)
}

/// Convex per-pixel blend `lam * dense + (1 - lam) * stereo`; the endpoints
/// return the corresponding input bit-for-bit.
pub fn fuse_depth(dense: &DepthMap, stereo: &DepthMap, lam: f64) -> Result<DepthMap> {
    if !dense.same_shape(stereo) {
        return Err(Error::shape(format!(
            "depth fusion: {}x{} vs {}x{}",
            dense.height, dense.width, stereo.height, stereo.width
        )));
    }
    if !(0.0..=1.0).contains(&lam) || !lam.is_finite() {
        return Err(Error::input(format!("blend weight must lie in [0, 1], got {lam}")));
    }
    if !dense.fully_valid() || !stereo.fully_valid() {
        return Err(Error::input("depth fusion expects dense inputs".to_string()));
    }
    if lam == 1.0 {
        return Ok(dense.clone());
    }
    if lam == 0.0 {
        return Ok(stereo.clone());
    }
    let lam = lam as f32;
    let data = dense
        .data
        .iter()
        .zip(stereo.data.iter())
        .map(|(a, b)| lam * a + (1.0 - lam) * b)
        .collect();
    DepthMap::new(dense.height, dense.width, data)
}

/// Uniform metric depth bins.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepthBins {
    pub count: usize,
    pub min_depth: f32,
    pub max_depth: f32,
}

impl Default for DepthBins {
    fn default() -> Self {
        DepthBins {
            count: 64,
            min_depth: 2.0,
            max_depth: 58.0,
        }
    }
}

impl DepthBins {
    pub fn new(count: usize, min_depth: f32, max_depth: f32) -> Result<Self> {
        if count == 0 || !(max_depth > min_depth) || min_depth <= 0.0 {
            return Err(Error::input(format!(
                "depth bins need count >= 1 and 0 < min < max, got ({count}, {min_depth}, {max_depth})"
            )));
        }
        Ok(DepthBins {
            count,
            min_depth,
            max_depth,
        })
    }

    pub fn width(&self) -> f32 {
        (self.max_depth - self.min_depth) / self.count as f32
    }

    pub fn center(&self, bin: usize) -> f32 {
        self.min_depth + (bin as f32 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f32> {
        (0..self.count).map(|b| self.center(b)).collect()
    }
}

/// Per-pixel distribution (or feature) over depth bins, stored bin-major:
/// `data[(b * height + y) * width + x]`. Carries the metric bin centers.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthVolume {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub bin_centers: Vec<f32>,
    pub data: Vec<f32>,
}

impl DepthVolume {
    pub fn zeros(bins: usize, height: usize, width: usize, bin_centers: Vec<f32>) -> Result<Self> {
        if bin_centers.len() != bins {
            return Err(Error::shape(format!(
                "volume has {} bins but {} centers",
                bins,
                bin_centers.len()
            )));
        }
        Ok(DepthVolume {
            bins,
            height,
            width,
            bin_centers,
            data: vec![0.0; bins * height * width],
        })
    }

    #[inline]
    pub fn idx(&self, bin: usize, y: usize, x: usize) -> usize {
        (bin * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, bin: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(bin, y, x)]
    }

    #[inline]
    pub fn set(&mut self, bin: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(bin, y, x);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &DepthVolume) -> bool {
        self.bins == other.bins && self.height == other.height && self.width == other.width
    }

    /// Check the probability-volume invariant: nonnegative entries summing
    /// to 1 (within `tol`) over bins at every pixel.
    pub fn is_distribution(&self, tol: f32) -> bool {
        for y in 0..self.height {
            for x in 0..self.width {
                let mut sum = 0.0f32;
                for b in 0..self.bins {
                    let v = self.at(b, y, x);
                    if v < 0.0 || !v.is_finite() {
                        return false;
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Weights of the small depth feature network: one convolutional encoder
/// over `[features || depth]` and the per-pixel projection to bin logits.
#[derive(Debug, Clone)]
pub struct DepthNetParams {
    pub encoder: Conv2d,
    pub bin_head: LinearProj,
}

impl DepthNetParams {
    pub fn seeded(
        channels: usize,
        bins: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        DepthNetParams {
            encoder: Conv2d::seeded(channels + 1, channels, 3, rng),
            bin_head: LinearProj::seeded(channels, bins, rng),
        }
    }
}

/// Width of the soft binning kernel as a fraction of the bin width.
pub const BIN_SHARPNESS: f32 = 0.25;

pub struct DepthVolumesOut {
    /// Volume predicted from the encoded features.
    pub d_mo: DepthVolume,
    /// Volume obtained by soft-binning the fused depth map.
    pub d_st: DepthVolume,
    /// Encoded image features feeding the voxel lift.
    pub f_e: FeatureMap,
    /// Pixels whose depth fell outside the bin range and was clamped.
    pub clamped: usize,
}

/// Build the two per-pixel depth distributions and the encoded features.
///
/// `d_st` soft-bins the fused depth with a narrow Gaussian over bin
/// centers; `d_mo` is the softmax of a learned projection of the encoded
/// features. Both are valid distributions per pixel.
pub fn build_depth_volumes(
    fused: &DepthMap,
    features: &FeatureMap,
    bins: &DepthBins,
    net: &DepthNetParams,
) -> Result<DepthVolumesOut> {
    if fused.height != features.height || fused.width != features.width {
        return Err(Error::shape(format!(
            "depth volumes: depth {}x{} vs features {}x{}",
            fused.height, fused.width, features.height, features.width
        )));
    }
    if !fused.fully_valid() {
        return Err(Error::input("depth volume construction expects dense depth".to_string()));
    }
    let (h, w, c) = (features.height, features.width, features.channels);
    if net.encoder.in_ch != c + 1 || net.bin_head.in_dim != net.encoder.out_ch
        || net.bin_head.out_dim != bins.count
    {
        return Err(Error::shape("depth network weights inconsistent with config".to_string()));
    }

    // Encoder input: image features with the fused depth appended as one
    // extra channel, scaled into the bin range for conditioning.
    let mut stacked = FeatureMap::zeros(h, w, c + 1);
    for y in 0..h {
        for x in 0..w {
            let dst = stacked.pixel_mut(y, x);
            dst[..c].copy_from_slice(features.pixel(y, x));
            dst[c] = fused.at(y, x) / bins.max_depth;
        }
    }
    let mut f_e = net.encoder.apply(&stacked)?;
    relu_inplace(&mut f_e.data);

    let centers = bins.centers();
    let mut d_st = DepthVolume::zeros(bins.count, h, w, centers.clone())?;
    let sigma = BIN_SHARPNESS * bins.width();
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let mut clamped = 0usize;
    let mut weights = vec![0.0f32; bins.count];
    for y in 0..h {
        for x in 0..w {
            let mut d = fused.at(y, x);
            if d < bins.min_depth {
                d = bins.min_depth;
                clamped += 1;
            } else if d > bins.max_depth {
                d = bins.max_depth;
                clamped += 1;
            }
            let mut sum = 0.0f32;
            for (b, c_b) in centers.iter().enumerate() {
                let diff = d - c_b;
                let wgt = (-diff * diff * inv_two_sigma2).exp();
                weights[b] = wgt;
                sum += wgt;
            }
            for (b, wgt) in weights.iter().enumerate() {
                d_st.set(b, y, x, wgt / sum);
            }
        }
    }

    let mut d_mo = DepthVolume::zeros(bins.count, h, w, centers)?;
    let mut logits = vec![0.0f32; bins.count];
    for y in 0..h {
        for x in 0..w {
            net.bin_head.apply_into(f_e.pixel(y, x), &mut logits);
            softmax_inplace(&mut logits);
            for (b, v) in logits.iter().enumerate() {
                d_mo.set(b, y, x, *v);
            }
        }
    }

    Ok(DepthVolumesOut {
        d_mo,
        d_st,
        f_e,
        clamped,
    })
}

/// Projections of the confidence-gated cross-attention over depth bins.
/// The volumes carry a scalar per bin, so queries/keys lift the scalar to a
/// `dim`-wide head and values stay scalar.
#[derive(Debug, Clone)]
pub struct CgAttentionParams {
    pub dim: usize,
    pub query: LinearProj,
    pub key: LinearProj,
    pub value: LinearProj,
}

impl CgAttentionParams {
    pub fn new(dim: usize, query: LinearProj, key: LinearProj, value: LinearProj) -> Result<Self> {
        if query.in_dim != 1
            || key.in_dim != 1
            || value.in_dim != 1
            || query.out_dim != dim
            || key.out_dim != dim
            || value.out_dim != 1
        {
            return Err(Error::shape(
                "cross-volume attention projections must be 1->dim (q, k) and 1->1 (v)".to_string(),
            ));
        }
        Ok(CgAttentionParams {
            dim,
            query,
            key,
            value,
        })
    }

    /// Scalar pass-through projections with a 1-wide head.
    pub fn identity() -> Self {
        CgAttentionParams {
            dim: 1,
            query: LinearProj::identity(1),
            key: LinearProj::identity(1),
            value: LinearProj::identity(1),
        }
    }

    pub fn seeded(dim: usize, rng: &mut impl rand::Rng) -> Self {
        CgAttentionParams {
            dim,
            query: LinearProj::seeded(1, dim, rng),
            key: LinearProj::seeded(1, dim, rng),
            value: LinearProj::seeded(1, 1, rng),
        }
    }
}

pub struct CgAttentionOutput {
    pub volume: DepthVolume,
    /// One row per (pixel, query bin): softmax over key bins. Row order is
    /// pixel row-major, then query bin.
    pub attention: Vec<Vec<f32>>,
}

/// One direction of the confidence-gated cross-attention between depth
/// volumes, per spatial location over the bin axis:
///
/// queries from `query_vol`, keys/values from `kv_vol`, then the attended
/// values are reweighted elementwise by the bin-softmax confidence of the
/// opposite stream (the symmetric attention with roles swapped).
pub fn cg_attention_3d(
    query_vol: &DepthVolume,
    kv_vol: &DepthVolume,
    params: &CgAttentionParams,
) -> Result<DepthVolume> {
    Ok(cg_attention_3d_with_attention(query_vol, kv_vol, params, false)?.volume)
}

pub fn cg_attention_3d_with_attention(
    query_vol: &DepthVolume,
    kv_vol: &DepthVolume,
    params: &CgAttentionParams,
    collect_attention: bool,
) -> Result<CgAttentionOutput> {
    if !query_vol.same_shape(kv_vol) {
        return Err(Error::shape(format!(
            "cross-volume attention: {}x{}x{} vs {}x{}x{}",
            query_vol.bins,
            query_vol.height,
            query_vol.width,
            kv_vol.bins,
            kv_vol.height,
            kv_vol.width
        )));
    }
    let attended = attend_bins(query_vol, kv_vol, params, collect_attention);
    // Opposite stream: same projections with the volume roles swapped.
    let opposite = attend_bins(kv_vol, query_vol, params, false);

    let (bins, h, w) = (query_vol.bins, query_vol.height, query_vol.width);
    let mut out = DepthVolume::zeros(bins, h, w, query_vol.bin_centers.clone())?;
    let mut conf = vec![0.0f32; bins];
    for y in 0..h {
        for x in 0..w {
            for b in 0..bins {
                conf[b] = opposite.volume.at(b, y, x);
            }
            softmax_inplace(&mut conf);
            for b in 0..bins {
                out.set(b, y, x, conf[b] * attended.volume.at(b, y, x));
            }
        }
    }
    Ok(CgAttentionOutput {
        volume: out,
        attention: attended.attention,
    })
}

/// Scaled dot-product attention over the bin axis at every pixel.
fn attend_bins(
    query_vol: &DepthVolume,
    kv_vol: &DepthVolume,
    params: &CgAttentionParams,
    collect_attention: bool,
) -> CgAttentionOutput {
    let (bins, h, w) = (query_vol.bins, query_vol.height, query_vol.width);
    let mut out =
        DepthVolume::zeros(bins, h, w, query_vol.bin_centers.clone()).expect("shape checked");
    let mut attention = Vec::new();
    let scale = 1.0 / (params.dim as f32).sqrt();

    let mut queries = vec![0.0f32; bins * params.dim];
    let mut keys = vec![0.0f32; bins * params.dim];
    let mut values = vec![0.0f32; bins];
    for y in 0..h {
        for x in 0..w {
            for b in 0..bins {
                params.query.apply_into(
                    &[query_vol.at(b, y, x)],
                    &mut queries[b * params.dim..(b + 1) * params.dim],
                );
                params.key.apply_into(
                    &[kv_vol.at(b, y, x)],
                    &mut keys[b * params.dim..(b + 1) * params.dim],
                );
                let mut v = [0.0f32];
                params.value.apply_into(&[kv_vol.at(b, y, x)], &mut v);
                values[b] = v[0];
            }
            for qb in 0..bins {
                let q = &queries[qb * params.dim..(qb + 1) * params.dim];
                let mut row: Vec<f32> = (0..bins)
                    .map(|kb| {
                        crate::nn::dot(q, &keys[kb * params.dim..(kb + 1) * params.dim]) * scale
                    })
                    .collect();
                softmax_inplace(&mut row);
                let mut acc = 0.0f32;
                for (a, v) in row.iter().zip(values.iter()) {
                    acc += a * v;
                }
                out.set(qb, y, x, acc);
                if collect_attention {
                    attention.push(row);
                }
            }
        }
    }
    CgAttentionOutput {
        volume: out,
        attention,
    }
}

/// Weights of the volume fusion network: input fusion convolution, a
/// two-level encoder/decoder with a skip connection, channel attention,
/// and the head projecting back to one bin logit.
#[derive(Debug, Clone)]
pub struct VolumeFusionParams {
    pub channels: usize,
    pub fuse_in: Conv3d,
    pub enc0: Conv3d,
    pub enc1: Conv3d,
    pub dec: Conv3d,
    pub ca_reduce: LinearProj,
    pub ca_expand: LinearProj,
    pub head: Conv3d,
}

impl VolumeFusionParams {
    pub fn seeded(channels: usize, rng: &mut impl rand::Rng) -> Self {
        let reduced = (channels / 2).max(1);
        VolumeFusionParams {
            channels,
            fuse_in: Conv3d::seeded(2, channels, 3, rng),
            enc0: Conv3d::seeded(channels, channels, 3, rng),
            enc1: Conv3d::seeded(channels, channels, 3, rng),
            dec: Conv3d::seeded(2 * channels, channels, 3, rng),
            ca_reduce: LinearProj::seeded(channels, reduced, rng),
            ca_expand: LinearProj::seeded(reduced, channels, rng),
            head: Conv3d::seeded(channels, 1, 1, rng),
        }
    }
}

fn volume_pair_to_grid(a: &DepthVolume, b: &DepthVolume) -> VoxelGrid {
    let dims = (a.bins, a.height, a.width);
    let mut grid = VoxelGrid::zeros(dims, 2);
    for i in 0..a.data.len() {
        grid.data[2 * i] = a.data[i];
        grid.data[2 * i + 1] = b.data[i];
    }
    grid
}

fn avg_pool2(grid: &VoxelGrid) -> VoxelGrid {
    let (na, nb, nc) = grid.dims;
    let dims = (na.div_ceil(2), nb.div_ceil(2), nc.div_ceil(2));
    let mut out = VoxelGrid::zeros(dims, grid.channels);
    for a in 0..dims.0 {
        for b in 0..dims.1 {
            for c in 0..dims.2 {
                for ch in 0..grid.channels {
                    let mut acc = 0.0f32;
                    let mut n = 0u32;
                    for da in 0..2 {
                        let sa = 2 * a + da;
                        if sa >= na {
                            continue;
                        }
                        for db in 0..2 {
                            let sb = 2 * b + db;
                            if sb >= nb {
                                continue;
                            }
                            for dc in 0..2 {
                                let sc = 2 * c + dc;
                                if sc >= nc {
                                    continue;
                                }
                                acc += grid.cell(sa, sb, sc)[ch];
                                n += 1;
                            }
                        }
                    }
                    out.cell_mut(a, b, c)[ch] = acc / n as f32;
                }
            }
        }
    }
    out
}

fn upsample_nearest(grid: &VoxelGrid, dims: (usize, usize, usize)) -> VoxelGrid {
    let mut out = VoxelGrid::zeros(dims, grid.channels);
    for a in 0..dims.0 {
        for b in 0..dims.1 {
            for c in 0..dims.2 {
                let src = grid.cell(
                    (a / 2).min(grid.dims.0 - 1),
                    (b / 2).min(grid.dims.1 - 1),
                    (c / 2).min(grid.dims.2 - 1),
                );
                out.cell_mut(a, b, c).copy_from_slice(src);
            }
        }
    }
    out
}

fn concat_channels(a: &VoxelGrid, b: &VoxelGrid) -> VoxelGrid {
    debug_assert_eq!(a.dims, b.dims);
    let mut out = VoxelGrid::zeros(a.dims, a.channels + b.channels);
    let cells = a.num_cells();
    for i in 0..cells {
        let base = i * (a.channels + b.channels);
        out.data[base..base + a.channels]
            .copy_from_slice(&a.data[i * a.channels..(i + 1) * a.channels]);
        out.data[base + a.channels..base + a.channels + b.channels]
            .copy_from_slice(&b.data[i * b.channels..(i + 1) * b.channels]);
    }
    out
}

/// Squeeze-excite channel attention: scale each channel by
/// `sigmoid(expand(relu(reduce(global_average))))`.
fn channel_attention(
    grid: &mut VoxelGrid,
    reduce: &LinearProj,
    expand: &LinearProj,
) {
    let cells = grid.num_cells();
    let mut gap = vec![0.0f32; grid.channels];
    for i in 0..cells {
        for ch in 0..grid.channels {
            gap[ch] += grid.data[i * grid.channels + ch];
        }
    }
    for g in gap.iter_mut() {
        *g /= cells as f32;
    }
    let mut hidden = reduce.apply(&gap);
    relu_inplace(&mut hidden);
    let mut scales = expand.apply(&hidden);
    for s in scales.iter_mut() {
        *s = sigmoid(*s);
    }
    for i in 0..cells {
        for ch in 0..grid.channels {
            grid.data[i * grid.channels + ch] *= scales[ch];
        }
    }
}

/// Fuse the two reweighted volumes into the final per-pixel depth
/// distribution: concatenation, convolutional fusion, a small
/// encoder/decoder with skip, channel attention, head, and a bin softmax.
pub fn fuse_volumes(
    v_mo: &DepthVolume,
    v_st: &DepthVolume,
    params: &VolumeFusionParams,
) -> Result<DepthVolume> {
    if !v_mo.same_shape(v_st) {
        return Err(Error::shape("volume fusion inputs must share shape".to_string()));
    }
    let stacked = volume_pair_to_grid(v_mo, v_st);
    let mut x0 = params.fuse_in.apply(&stacked)?;
    relu_inplace(&mut x0.data);
    let mut e0 = params.enc0.apply(&x0)?;
    relu_inplace(&mut e0.data);
    let pooled = avg_pool2(&e0);
    let mut e1 = params.enc1.apply(&pooled)?;
    relu_inplace(&mut e1.data);
    let up = upsample_nearest(&e1, e0.dims);
    let skip = concat_channels(&e0, &up);
    let mut dec = params.dec.apply(&skip)?;
    relu_inplace(&mut dec.data);
    channel_attention(&mut dec, &params.ca_reduce, &params.ca_expand);
    let logits = params.head.apply(&dec)?;

    let (bins, h, w) = (v_mo.bins, v_mo.height, v_mo.width);
    let mut out = DepthVolume::zeros(bins, h, w, v_mo.bin_centers.clone())?;
    let mut col = vec![0.0f32; bins];
    for y in 0..h {
        for x in 0..w {
            for b in 0..bins {
                col[b] = logits.cell(b, y, x)[0];
            }
            softmax_inplace(&mut col);
            for b in 0..bins {
                out.set(b, y, x, col[b]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints_and_linear_midpoint() {
        let s = CurriculumSchedule::new(100, 0.0, LambdaShape::Linear).unwrap();
        assert_eq!(s.lambda_at(0).unwrap(), 1.0);
        assert_eq!(s.lambda_at(100).unwrap(), 0.0);
        assert!((s.lambda_at(25).unwrap() - 0.75).abs() < 1e-12);
        assert!(s.lambda_at(101).is_err());
    }

    #[test]
    fn schedule_holds_one_through_warmup_and_never_increases() {
        for shape in [LambdaShape::Linear, LambdaShape::Cosine] {
            let s = CurriculumSchedule::new(1000, 0.2, shape).unwrap();
            assert_eq!(s.lambda_at(0).unwrap(), 1.0);
            assert_eq!(s.lambda_at(199).unwrap(), 1.0);
            assert_eq!(s.lambda_at(1000).unwrap(), 0.0);
            let mut prev = f64::INFINITY;
            for t in 0..=1000 {
                let v = s.lambda_at(t).unwrap();
                assert!(v <= prev + 1e-12, "increase at {t}");
                assert!((0.0..=1.0).contains(&v));
                prev = v;
            }
        }
    }

    #[test]
    fn completion_preserves_dense_input() {
        let d = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(complete_depth(&d).unwrap(), d);
    }

    #[test]
    fn completion_from_single_source_is_constant() {
        let mut d = DepthMap::invalid(3, 3);
        d.set(1, 1, 5.0);
        let out = complete_depth(&d).unwrap();
        assert!(out.data.iter().all(|&v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn completion_matches_inverse_distance_oracle() {
        let mut d = DepthMap::invalid(4, 4);
        d.set(0, 0, 2.0);
        d.set(3, 3, 8.0);
        let out = complete_depth(&d).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                if (y, x) == (0, 0) || (y, x) == (3, 3) {
                    assert_eq!(out.at(y, x), d.at(y, x));
                    continue;
                }
                // Brute-force inverse squared distance over all valid pixels.
                let d2a = (y * y + x * x) as f64;
                let d2b = ((3 - y) * (3 - y) + (3 - x) * (3 - x)) as f64;
                let want = (2.0 / d2a + 8.0 / d2b) / (1.0 / d2a + 1.0 / d2b);
                assert!(
                    (out.at(y, x) as f64 - want).abs() < 1e-6,
                    "at ({y},{x}): {} vs {want}",
                    out.at(y, x)
                );
            }
        }
    }

    #[test]
    fn completion_without_valid_pixels_is_an_error() {
        assert!(matches!(
            complete_depth(&DepthMap::invalid(2, 2)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn fusion_endpoints_are_exact_and_midpoint_blends() {
        let a = DepthMap::new(1, 2, vec![2.0, 6.0]).unwrap();
        let b = DepthMap::new(1, 2, vec![4.0, 2.0]).unwrap();
        assert_eq!(fuse_depth(&a, &b, 1.0).unwrap(), a);
        assert_eq!(fuse_depth(&a, &b, 0.0).unwrap(), b);
        let mid = fuse_depth(&a, &b, 0.5).unwrap();
        assert_eq!(mid.data, vec![3.0, 4.0]);
        assert!(fuse_depth(&a, &b, 1.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn fused_depth_stays_within_input_bounds(seed in 0u64..200, lam in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DepthMap::new(3, 3, (0..9).map(|_| rng.gen_range(0.5..20.0)).collect()).unwrap();
            let b = DepthMap::new(3, 3, (0..9).map(|_| rng.gen_range(0.5..20.0)).collect()).unwrap();
            let out = fuse_depth(&a, &b, lam).unwrap();
            for i in 0..9 {
                let lo = a.data[i].min(b.data[i]);
                let hi = a.data[i].max(b.data[i]);
                proptest::prop_assert!(out.data[i] >= lo - 1e-5 && out.data[i] <= hi + 1e-5);
            }
        }
    }

    fn tiny_volumes() -> (DepthMap, FeatureMap, DepthBins, DepthNetParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let depth = DepthMap::new(3, 4, (0..12).map(|_| rng.gen_range(3.0..15.0)).collect())
            .unwrap();
        let feats = FeatureMap::new(3, 4, 4, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let bins = DepthBins::new(16, 2.0, 18.0).unwrap();
        let net = DepthNetParams::seeded(4, 16, &mut rng);
        (depth, feats, bins, net)
    }

    #[test]
    fn depth_volumes_are_distributions() {
        let (depth, feats, bins, net) = tiny_volumes();
        let out = build_depth_volumes(&depth, &feats, &bins, &net).unwrap();
        assert!(out.d_st.is_distribution(1e-5));
        assert!(out.d_mo.is_distribution(1e-5));
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn bin_center_depth_concentrates_mass() {
        let bins = DepthBins::new(16, 2.0, 18.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net = DepthNetParams::seeded(2, 16, &mut rng);
        let depth = DepthMap::new(1, 1, vec![bins.center(5)]).unwrap();
        let feats = FeatureMap::zeros(1, 1, 2);
        let out = build_depth_volumes(&depth, &feats, &bins, &net).unwrap();
        assert!(out.d_st.at(5, 0, 0) >= 0.99, "mass {}", out.d_st.at(5, 0, 0));
    }

    #[test]
    fn single_bin_volume_is_degenerate_softmax() {
        let bins = DepthBins::new(1, 2.0, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = DepthNetParams::seeded(2, 1, &mut rng);
        let depth = DepthMap::new(2, 2, vec![3.0; 4]).unwrap();
        let feats = FeatureMap::zeros(2, 2, 2);
        let out = build_depth_volumes(&depth, &feats, &bins, &net).unwrap();
        assert!(out.d_mo.data.iter().all(|&v| v == 1.0));
        assert!(out.d_st.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn out_of_range_depth_is_clamped_and_counted() {
        let bins = DepthBins::new(8, 2.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let net = DepthNetParams::seeded(2, 8, &mut rng);
        let depth = DepthMap::new(1, 2, vec![0.5, 50.0]).unwrap();
        let feats = FeatureMap::zeros(1, 2, 2);
        let out = build_depth_volumes(&depth, &feats, &bins, &net).unwrap();
        assert_eq!(out.clamped, 2);
        // Mass concentrates at the boundary bins.
        assert!(out.d_st.at(0, 0, 0) > 0.9);
        assert!(out.d_st.at(7, 0, 1) > 0.9);
    }

    fn volume_from(data: Vec<f32>, bins: usize, h: usize, w: usize) -> DepthVolume {
        let centers = (0..bins).map(|b| b as f32 + 1.0).collect();
        let mut v = DepthVolume::zeros(bins, h, w, centers).unwrap();
        v.data = data;
        v
    }

    #[test]
    fn single_bin_attention_collapses_to_gated_value() {
        let q = volume_from(vec![0.7, -0.3], 1, 1, 2);
        let kv = volume_from(vec![1.5, 2.5], 1, 1, 2);
        let params = CgAttentionParams::identity();
        let out = cg_attention_3d(&q, &kv, &params).unwrap();
        // One bin: attention row and confidence softmax are both 1.
        assert!((out.at(0, 0, 0) - 1.5).abs() < 1e-6);
        assert!((out.at(0, 0, 1) - 2.5).abs() < 1e-6);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let q = volume_from((0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(), 4, 2, 3);
        let kv = volume_from((0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(), 4, 2, 3);
        let params = CgAttentionParams::seeded(6, &mut rng);
        let out = cg_attention_3d_with_attention(&q, &kv, &params, true).unwrap();
        assert_eq!(out.attention.len(), 2 * 3 * 4);
        for row in &out.attention {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn two_bin_attention_matches_hand_oracle() {
        // D=2, H=W=1, identity projections, explicit numbers.
        let q = volume_from(vec![1.0, 2.0], 2, 1, 1);
        let kv = volume_from(vec![0.5, -1.0], 2, 1, 1);
        let params = CgAttentionParams::identity();
        let out = cg_attention_3d(&q, &kv, &params).unwrap();

        // Forward attention (queries from q, keys/values kv):
        //   row for qb: softmax([qb*0.5, qb*-1.0]); attended = row . [0.5, -1.0]
        let attend = |qv: [f64; 2], kv: [f64; 2]| -> [f64; 2] {
            let mut out = [0.0; 2];
            for (i, qb) in qv.iter().enumerate() {
                let l0 = qb * kv[0];
                let l1 = qb * kv[1];
                let m = l0.max(l1);
                let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                let z = e0 + e1;
                out[i] = (e0 / z) * kv[0] + (e1 / z) * kv[1];
            }
            out
        };
        let vhat = attend([1.0, 2.0], [0.5, -1.0]);
        let opp = attend([0.5, -1.0], [1.0, 2.0]);
        let m = opp[0].max(opp[1]);
        let (e0, e1) = ((opp[0] - m).exp(), (opp[1] - m).exp());
        let z = e0 + e1;
        let want = [vhat[0] * e0 / z, vhat[1] * e1 / z];
        assert!((out.at(0, 0, 0) as f64 - want[0]).abs() < 1e-6);
        assert!((out.at(1, 0, 0) as f64 - want[1]).abs() < 1e-6);
    }

    #[test]
    fn volume_fusion_outputs_distribution_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let a = volume_from((0..60).map(|_| rng.gen_range(0.0..1.0)).collect(), 5, 4, 3);
        let b = volume_from((0..60).map(|_| rng.gen_range(0.0..1.0)).collect(), 5, 4, 3);
        let params = VolumeFusionParams::seeded(4, &mut rng);
        let out1 = fuse_volumes(&a, &b, &params).unwrap();
        let out2 = fuse_volumes(&a, &b, &params).unwrap();
        assert!(out1.is_distribution(1e-5));
        let bits1: Vec<u32> = out1.data.iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u32> = out2.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn zero_channel_attention_weights_scale_by_half() {
        let mut grid = VoxelGrid::zeros((2, 2, 2), 3);
        for (i, v) in grid.data.iter_mut().enumerate() {
            *v = i as f32 - 10.0;
        }
        let orig = grid.clone();
        channel_attention(&mut grid, &LinearProj::zeros(3, 2), &LinearProj::zeros(2, 3));
        for (a, b) in grid.data.iter().zip(orig.data.iter()) {
            assert!((a - 0.5 * b).abs() < 1e-6);
        }
    }
}
