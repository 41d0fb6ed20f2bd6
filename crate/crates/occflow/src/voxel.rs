//! Lifting image features into the 3D voxel grid and refining them there:
//! depth-distribution splatting, sparse proposal selection, deformable
//! cross/self attention, local/global occupancy encoding, and the semantic
//! head.

use serde::{Deserialize, Serialize};

use crate::depth::DepthVolume;
use crate::error::{Error, Result};
use crate::grid::{bilinear_sample, FeatureMap, LabelGrid, VoxelGrid, EMPTY_LABEL};
use crate::nn::{relu_inplace, softmax_inplace, Conv3d, LinearProj};

/// Pinhole camera with a rigid camera-to-world transform. Camera frame is
/// x right, y down, z forward (optical axis).
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub intrinsics: [[f64; 3]; 3],
    pub cam_to_world: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        cam_to_world: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let k = &intrinsics;
        let det = k[0][0] * (k[1][1] * k[2][2] - k[1][2] * k[2][1])
            - k[0][1] * (k[1][0] * k[2][2] - k[1][2] * k[2][0])
            + k[0][2] * (k[1][0] * k[2][1] - k[1][1] * k[2][0]);
        if det.abs() < 1e-12 {
            return Err(Error::input("camera intrinsics are singular".to_string()));
        }
        // Rotation block must be orthonormal with determinant +1.
        let r = &cam_to_world;
        let mut max_err = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                max_err = max_err.max((dot - want).abs());
            }
        }
        let rdet = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if max_err > 1e-6 || (rdet - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!(
                "camera extrinsics are not a rigid transform (orthonormality err {max_err:.2e}, det {rdet:.6})"
            )));
        }
        Ok(CameraModel {
            intrinsics,
            cam_to_world,
            width,
            height,
        })
    }

    pub fn pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        cam_to_world: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        CameraModel::new(
            [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            cam_to_world,
            width,
            height,
        )
    }

    /// World point of pixel `(u, v)` at optical-axis depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        // Closed-form inverse of an upper-triangular pinhole matrix.
        let xc = (u - k[0][2]) / k[0][0] * depth;
        let yc = (v - k[1][2]) / k[1][1] * depth;
        let pc = [xc, yc, depth];
        let m = &self.cam_to_world;
        [
            m[0][0] * pc[0] + m[0][1] * pc[1] + m[0][2] * pc[2] + m[0][3],
            m[1][0] * pc[0] + m[1][1] * pc[1] + m[1][2] * pc[2] + m[1][3],
            m[2][0] * pc[0] + m[2][1] * pc[1] + m[2][2] * pc[2] + m[2][3],
        ]
    }

    /// Project a world point; returns (u, v, depth) or None when the point
    /// lies at or behind the camera plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let m = &self.cam_to_world;
        let d = [p[0] - m[0][3], p[1] - m[1][3], p[2] - m[2][3]];
        // Inverse rigid transform: rotation transpose.
        let pc = [
            m[0][0] * d[0] + m[1][0] * d[1] + m[2][0] * d[2],
            m[0][1] * d[0] + m[1][1] * d[1] + m[2][1] * d[2],
            m[0][2] * d[0] + m[1][2] * d[1] + m[2][2] * d[2],
        ];
        if pc[2] <= 1e-9 {
            return None;
        }
        let k = &self.intrinsics;
        let u = k[0][0] * pc[0] / pc[2] + k[0][2];
        let v = k[1][1] * pc[1] / pc[2] + k[1][2];
        Some((u, v, pc[2]))
    }

    pub fn position(&self) -> [f64; 3] {
        [
            self.cam_to_world[0][3],
            self.cam_to_world[1][3],
            self.cam_to_world[2][3],
        ]
    }
}

/// Axis-aligned voxel lattice: `dims` cells of side `cell_size` starting at
/// `origin` (minimum corner).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub dims: (usize, usize, usize),
    pub origin: [f32; 3],
    pub cell_size: f32,
}

impl VoxelSpec {
    pub fn new(dims: (usize, usize, usize), origin: [f32; 3], cell_size: f32) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 || !(cell_size > 0.0) {
            return Err(Error::input(format!(
                "voxel spec needs positive dims and cell size, got {:?} / {}",
                dims, cell_size
            )));
        }
        Ok(VoxelSpec {
            dims,
            origin,
            cell_size,
        })
    }

    /// Voxel containing a world point, or None when outside the lattice.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        let mut idx = [0usize; 3];
        let dims = [self.dims.0, self.dims.1, self.dims.2];
        for a in 0..3 {
            let rel = (p[a] - self.origin[a] as f64) / self.cell_size as f64;
            if rel < 0.0 {
                return None;
            }
            let i = rel.floor() as usize;
            if i >= dims[a] {
                return None;
            }
            idx[a] = i;
        }
        Some((idx[0], idx[1], idx[2]))
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] as f64 + (x as f64 + 0.5) * self.cell_size as f64,
            self.origin[1] as f64 + (y as f64 + 0.5) * self.cell_size as f64,
            self.origin[2] as f64 + (z as f64 + 0.5) * self.cell_size as f64,
        ]
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LiftStats {
    pub splatted: usize,
    pub dropped: usize,
}

/// Lift image features into the voxel grid: each pixel's feature vector is
/// distributed along its camera ray, weighted by the per-bin depth
/// probability, and each (pixel, bin) sample lands wholly in the voxel
/// containing its 3D point. Contributions are accumulated in sorted voxel
/// order so the result is independent of traversal strategy.
pub fn lift_splat(
    d_v: &DepthVolume,
    feat: &FeatureMap,
    cam: &CameraModel,
    spec: &VoxelSpec,
) -> Result<(VoxelGrid, LiftStats)> {
    if d_v.height != feat.height || d_v.width != feat.width {
        return Err(Error::shape(format!(
            "lift: volume {}x{} vs features {}x{}",
            d_v.height, d_v.width, feat.height, feat.width
        )));
    }
    if d_v.bin_centers.len() != d_v.bins {
        return Err(Error::input("depth volume is missing metric bin centers".to_string()));
    }

    let mut contributions: Vec<(usize, u32, f32)> = Vec::new();
    let mut stats = LiftStats::default();
    for y in 0..feat.height {
        for x in 0..feat.width {
            let pixel = (y * feat.width + x) as u32;
            for b in 0..d_v.bins {
                let w = d_v.at(b, y, x);
                let p = cam.unproject(x as f64, y as f64, d_v.bin_centers[b] as f64);
                match spec.voxel_of(p) {
                    Some((vx, vy, vz)) => {
                        let flat = (vx * spec.dims.1 + vy) * spec.dims.2 + vz;
                        contributions.push((flat, pixel, w));
                        stats.splatted += 1;
                    }
                    None => stats.dropped += 1,
                }
            }
        }
    }
    // Deterministic reduction: sort by voxel, then source pixel/bin order.
    contributions.sort_by_key(|&(flat, pixel, _)| (flat, pixel));

    let mut grid = VoxelGrid::zeros(spec.dims, feat.channels);
    for (flat, pixel, w) in contributions {
        let base = flat * feat.channels;
        let px = &feat.data[pixel as usize * feat.channels..(pixel as usize + 1) * feat.channels];
        for (dst, v) in grid.data[base..base + feat.channels].iter_mut().zip(px) {
            *dst += w * v;
        }
    }
    Ok((grid, stats))
}

/// Sparse query positions chosen from the coarse grid, flat cell indices in
/// ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposalSet {
    pub indices: Vec<usize>,
}

pub const DEFAULT_PROPOSAL_CAP: usize = 1024;

/// Select voxels whose feature norm exceeds `threshold`, keeping at most
/// `cap` by descending norm (ties resolved by cell index).
pub fn propose(grid: &VoxelGrid, threshold: f32, cap: usize) -> ProposalSet {
    let mut scored: Vec<(f32, usize)> = Vec::new();
    for i in 0..grid.num_cells() {
        let cell = &grid.data[i * grid.channels..(i + 1) * grid.channels];
        let norm = cell.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > threshold {
            scored.push((norm, i));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(cap);
    let mut indices: Vec<usize> = scored.into_iter().map(|(_, i)| i).collect();
    indices.sort_unstable();
    ProposalSet { indices }
}

/// Deformable attention weights: per query, `points` sampling offsets and
/// normalized mixture weights are predicted from the query feature, and the
/// gathered samples pass through one value projection.
#[derive(Debug, Clone)]
pub struct DeformAttnParams {
    pub points: usize,
    /// 2 or 3 coordinates per sampling point.
    pub offset_dims: usize,
    pub offsets: LinearProj,
    pub weights: LinearProj,
    pub value: LinearProj,
}

impl DeformAttnParams {
    pub fn new(
        points: usize,
        offset_dims: usize,
        offsets: LinearProj,
        weights: LinearProj,
        value: LinearProj,
    ) -> Result<Self> {
        if points == 0 {
            return Err(Error::input("deformable attention needs >= 1 sampling point".to_string()));
        }
        if !(offset_dims == 2 || offset_dims == 3) {
            return Err(Error::input(format!("offsets must be 2D or 3D, got {offset_dims}")));
        }
        if offsets.out_dim != points * offset_dims || weights.out_dim != points {
            return Err(Error::shape(
                "offset/weight predictors inconsistent with point count".to_string(),
            ));
        }
        Ok(DeformAttnParams {
            points,
            offset_dims,
            offsets,
            weights,
            value,
        })
    }

    /// Offset and weight predictors start at zero, so untrained attention
    /// samples the reference point with uniform weights.
    pub fn seeded(
        points: usize,
        offset_dims: usize,
        query_dim: usize,
        value_in: usize,
        value_out: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        DeformAttnParams {
            points,
            offset_dims,
            offsets: LinearProj::zeros(query_dim, points * offset_dims),
            weights: LinearProj::zeros(query_dim, points),
            value: LinearProj::seeded(value_in, value_out, rng),
        }
    }
}

pub struct DeformAttnOutput {
    pub grid: VoxelGrid,
    pub attention: Vec<Vec<f32>>,
}

/// Deformable cross-attention from proposal voxels into the image plane:
/// each proposal projects its center into the image, samples the feature
/// map at predicted offsets around it, and replaces its feature with the
/// value-projected weighted sum. Non-proposal voxels pass through; voxels
/// projecting behind the camera are skipped.
pub fn deform_cross_attention(
    proposals: &ProposalSet,
    grid: &VoxelGrid,
    feat: &FeatureMap,
    cam: &CameraModel,
    spec: &VoxelSpec,
    params: &DeformAttnParams,
) -> Result<VoxelGrid> {
    Ok(deform_cross_attention_with_attention(proposals, grid, feat, cam, spec, params, false)?.grid)
}

pub fn deform_cross_attention_with_attention(
    proposals: &ProposalSet,
    grid: &VoxelGrid,
    feat: &FeatureMap,
    cam: &CameraModel,
    spec: &VoxelSpec,
    params: &DeformAttnParams,
    collect_attention: bool,
) -> Result<DeformAttnOutput> {
    if spec.dims != grid.dims {
        return Err(Error::shape("proposal spec does not match grid dims".to_string()));
    }
    if params.offset_dims != 2 {
        return Err(Error::input("cross attention offsets must be 2D".to_string()));
    }
    if params.offsets.in_dim != grid.channels
        || params.weights.in_dim != grid.channels
        || params.value.in_dim != feat.channels
        || params.value.out_dim != grid.channels
    {
        return Err(Error::shape("cross attention projections inconsistent".to_string()));
    }
    let (dx, dy, dz) = grid.dims;
    let cells = dx * dy * dz;

    let mut out = grid.clone();
    let mut attention = Vec::new();
    let mut offsets = vec![0.0f32; params.points * 2];
    let mut weights = vec![0.0f32; params.points];
    let mut sample = vec![0.0f32; feat.channels];
    let mut pooled = vec![0.0f32; feat.channels];
    for &flat in &proposals.indices {
        if flat >= cells {
            return Err(Error::input(format!("proposal index {flat} outside grid")));
        }
        let vx = flat / (dy * dz);
        let vy = (flat / dz) % dy;
        let vz = flat % dz;
        let query = grid.cell(vx, vy, vz);
        let center = spec.center(vx, vy, vz);
        let Some((u, v, _depth)) = cam.project(center) else {
            continue; // behind the camera: leave the voxel unchanged
        };
        params.offsets.apply_into(query, &mut offsets);
        params.weights.apply_into(query, &mut weights);
        softmax_inplace(&mut weights);

        pooled.fill(0.0);
        for p in 0..params.points {
            let su = u as f32 + offsets[2 * p];
            let sv = v as f32 + offsets[2 * p + 1];
            bilinear_sample(feat, su, sv, &mut sample);
            for (acc, s) in pooled.iter_mut().zip(sample.iter()) {
                *acc += weights[p] * s;
            }
        }
        params
            .value
            .apply_into(&pooled, out.cell_mut(vx, vy, vz));
        if collect_attention {
            attention.push(weights.clone());
        }
    }
    Ok(DeformAttnOutput {
        grid: out,
        attention,
    })
}

/// Elementwise sum of the refined queries and the flow-aligned raw grid.
pub fn merge_raw(q_s: &VoxelGrid, v_raw: &VoxelGrid) -> Result<VoxelGrid> {
    if !q_s.same_shape(v_raw) {
        return Err(Error::shape("raw merge grids must share shape".to_string()));
    }
    let mut out = q_s.clone();
    for (o, v) in out.data.iter_mut().zip(v_raw.data.iter()) {
        *o += v;
    }
    Ok(out)
}

/// Trilinear interpolation of the 8 cells around a continuous grid-index
/// coordinate; out-of-grid neighbors contribute zero.
pub fn trilinear_sample(grid: &VoxelGrid, p: [f32; 3], out: &mut [f32]) {
    debug_assert_eq!(out.len(), grid.channels);
    out.fill(0.0);
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let base = [base[0] as i64, base[1] as i64, base[2] as i64];
    let dims = [grid.dims.0 as i64, grid.dims.1 as i64, grid.dims.2 as i64];
    for corner in 0..8 {
        let pick = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0f32;
        let mut idx = [0i64; 3];
        for a in 0..3 {
            idx[a] = base[a] + pick[a] as i64;
            w *= if pick[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        if idx.iter().zip(dims.iter()).any(|(i, d)| *i < 0 || i >= d) {
            continue;
        }
        let cell = grid.cell(idx[0] as usize, idx[1] as usize, idx[2] as usize);
        for (o, v) in out.iter_mut().zip(cell.iter()) {
            *o += w * v;
        }
    }
}

/// Deformable self-attention inside the voxel grid: every voxel predicts
/// sampling offsets (in cell units) and weights from its own feature,
/// gathers trilinear samples from the input grid, and adds the
/// value-projected mixture residually.
pub fn deform_self_attention(grid: &VoxelGrid, params: &DeformAttnParams) -> Result<VoxelGrid> {
    Ok(deform_self_attention_with_attention(grid, params, false)?.grid)
}

pub fn deform_self_attention_with_attention(
    grid: &VoxelGrid,
    params: &DeformAttnParams,
    collect_attention: bool,
) -> Result<DeformAttnOutput> {
    if params.offset_dims != 3 {
        return Err(Error::input("self attention offsets must be 3D".to_string()));
    }
    if params.offsets.in_dim != grid.channels
        || params.weights.in_dim != grid.channels
        || params.value.in_dim != grid.channels
        || params.value.out_dim != grid.channels
    {
        return Err(Error::shape("self attention projections inconsistent".to_string()));
    }
    let (nx, ny, nz) = grid.dims;
    let mut out = grid.clone();
    let mut attention = Vec::new();
    let mut offsets = vec![0.0f32; params.points * 3];
    let mut weights = vec![0.0f32; params.points];
    let mut sample = vec![0.0f32; grid.channels];
    let mut pooled = vec![0.0f32; grid.channels];
    let mut projected = vec![0.0f32; grid.channels];
    for vx in 0..nx {
        for vy in 0..ny {
            for vz in 0..nz {
                let query = grid.cell(vx, vy, vz);
                params.offsets.apply_into(query, &mut offsets);
                params.weights.apply_into(query, &mut weights);
                softmax_inplace(&mut weights);

                pooled.fill(0.0);
                for p in 0..params.points {
                    let pos = [
                        vx as f32 + offsets[3 * p],
                        vy as f32 + offsets[3 * p + 1],
                        vz as f32 + offsets[3 * p + 2],
                    ];
                    trilinear_sample(grid, pos, &mut sample);
                    for (acc, s) in pooled.iter_mut().zip(sample.iter()) {
                        *acc += weights[p] * s;
                    }
                }
                params.value.apply_into(&pooled, &mut projected);
                let dst = out.cell_mut(vx, vy, vz);
                for (d, v) in dst.iter_mut().zip(projected.iter()) {
                    *d += v;
                }
                if collect_attention {
                    attention.push(weights.clone());
                }
            }
        }
    }
    Ok(DeformAttnOutput {
        grid: out,
        attention,
    })
}

/// Occupancy encoder weights: a residual local convolution stack plus a
/// global branch that pools the grid onto the three orthogonal planes,
/// projects each, and broadcasts the sum back to 3D.
#[derive(Debug, Clone)]
pub struct OccEncoderParams {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    pub plane_xy: LinearProj,
    pub plane_xz: LinearProj,
    pub plane_yz: LinearProj,
    /// Blend between the local (1.0) and global (0.0) branches.
    pub fusion_weight: f32,
}

impl OccEncoderParams {
    pub fn seeded(channels: usize, fusion_weight: f32, rng: &mut impl rand::Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&fusion_weight) {
            return Err(Error::input(format!(
                "fusion weight must lie in [0, 1], got {fusion_weight}"
            )));
        }
        Ok(OccEncoderParams {
            conv1: Conv3d::seeded(channels, channels, 3, rng),
            conv2: Conv3d::seeded(channels, channels, 3, rng),
            plane_xy: LinearProj::seeded(channels, channels, rng),
            plane_xz: LinearProj::seeded(channels, channels, rng),
            plane_yz: LinearProj::seeded(channels, channels, rng),
            fusion_weight,
        })
    }
}

/// Mean-pool the grid along one axis (0 = x, 1 = y, 2 = z), producing a
/// plane feature map over the two remaining axes in grid order.
pub fn pool_plane(grid: &VoxelGrid, axis: usize) -> FeatureMap {
    let (nx, ny, nz) = grid.dims;
    let (rows, cols, depth) = match axis {
        2 => (nx, ny, nz),
        1 => (nx, nz, ny),
        0 => (ny, nz, nx),
        _ => panic!("axis must be 0..3"),
    };
    let mut plane = FeatureMap::zeros(rows, cols, grid.channels);
    for r in 0..rows {
        for c in 0..cols {
            let dst = plane.pixel_mut(r, c);
            for d in 0..depth {
                let (x, y, z) = match axis {
                    2 => (r, c, d),
                    1 => (r, d, c),
                    _ => (d, r, c),
                };
                for (acc, v) in dst.iter_mut().zip(grid.cell(x, y, z).iter()) {
                    *acc += v;
                }
            }
            for v in dst.iter_mut() {
                *v /= depth as f32;
            }
        }
    }
    plane
}

/// Blend a residual local convolution stack with a three-plane global
/// context term: `w * local + (1 - w) * global`.
pub fn encode_occupancy(grid: &VoxelGrid, params: &OccEncoderParams) -> Result<VoxelGrid> {
    let mut h = params.conv1.apply(grid)?;
    relu_inplace(&mut h.data);
    let h = params.conv2.apply(&h)?;
    // local = identity + conv stack
    let mut local = grid.clone();
    for (l, v) in local.data.iter_mut().zip(h.data.iter()) {
        *l += v;
    }

    let pxy = params.plane_xy.apply_map(&pool_plane(grid, 2))?;
    let pxz = params.plane_xz.apply_map(&pool_plane(grid, 1))?;
    let pyz = params.plane_yz.apply_map(&pool_plane(grid, 0))?;

    let (nx, ny, nz) = grid.dims;
    let w = params.fusion_weight;
    let mut out = VoxelGrid::zeros(grid.dims, grid.channels);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let a = pxy.pixel(x, y);
                let b = pxz.pixel(x, z);
                let c = pyz.pixel(y, z);
                let l = local.cell(x, y, z);
                let dst = out.cell_mut(x, y, z);
                for ch in 0..dst.len() {
                    let global = a[ch] + b[ch] + c[ch];
                    dst[ch] = w * l[ch] + (1.0 - w) * global;
                }
            }
        }
    }
    Ok(out)
}

/// Per-voxel linear head over `num_classes + 1` logits (free space last);
/// the label is the argmax with ties resolved to the lowest index.
pub fn classify(
    grid: &VoxelGrid,
    head: &LinearProj,
    num_classes: usize,
) -> Result<(LabelGrid, VoxelGrid)> {
    if head.in_dim != grid.channels || head.out_dim != num_classes + 1 {
        return Err(Error::shape(format!(
            "semantic head must be {}->{}, got {}->{}",
            grid.channels,
            num_classes + 1,
            head.in_dim,
            head.out_dim
        )));
    }
    let mut logits = VoxelGrid::zeros(grid.dims, num_classes + 1);
    let mut labels = LabelGrid::empty(grid.dims, num_classes);
    let cells = grid.num_cells();
    for i in 0..cells {
        let src = &grid.data[i * grid.channels..(i + 1) * grid.channels];
        let dst = &mut logits.data[i * (num_classes + 1)..(i + 1) * (num_classes + 1)];
        head.apply_into(src, dst);
        let mut best = 0usize;
        for (k, v) in dst.iter().enumerate() {
            if *v > dst[best] {
                best = k;
            }
        }
        labels.labels[i] = if best == num_classes {
            EMPTY_LABEL
        } else {
            best as u16
        };
    }
    Ok((labels, logits))
}
