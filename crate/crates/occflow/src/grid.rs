//! Dense grid containers (image-plane feature maps, flow fields, masks, voxel
//! grids) and the bilinear sampling / warping primitives built on them.
//!
//! All containers are row-major with channels last: a feature map stores
//! `(y, x, c)` as `data[(y * width + x) * channels + c]`, a voxel grid stores
//! `(x, y, z, c)` as `data[((x * Y + y) * Z + z) * channels + c]`.

use crate::error::{Error, Result};

/// Dense 2D feature grid, H x W x C, row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature map expects {}x{}x{} = {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let base = (y * self.width + x) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel 2D displacement field, stored as (dx, dy) in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    /// Interleaved (dx, dy) pairs, row-major.
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::shape(format!(
                "flow field expects {}x{}x2 = {} values, got {}",
                height,
                width,
                height * width * 2,
                data.len()
            )));
        }
        Ok(FlowField {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        let mut f = FlowField::zeros(height, width);
        for i in 0..height * width {
            f.data[2 * i] = dx;
            f.data[2 * i + 1] = dy;
        }
        f
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, dx: f32, dy: f32) {
        let i = 2 * (y * self.width + x);
        self.data[i] = dx;
        self.data[i + 1] = dy;
    }

    /// View the field as a 2-channel feature map (copies).
    pub fn to_features(&self) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: 2,
            data: self.data.clone(),
        }
    }

    pub fn from_features(map: &FeatureMap) -> Result<Self> {
        if map.channels != 2 {
            return Err(Error::shape(format!(
                "flow field needs 2 channels, got {}",
                map.channels
            )));
        }
        FlowField::new(map.height, map.width, map.data.clone())
    }

    pub fn same_shape(&self, other: &FlowField) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BoolMask {
    pub fn new_false(height: usize, width: usize) -> Self {
        BoolMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Reserved label id for free space.
pub const EMPTY_LABEL: u16 = u16::MAX - 1;
/// Reserved label id for cells excluded from losses and metrics.
pub const IGNORE_LABEL: u16 = u16::MAX;

/// Dense 3D feature grid, X x Y x Z x C, row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub dims: (usize, usize, usize),
    pub channels: usize,
    pub data: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(dims: (usize, usize, usize), channels: usize, data: Vec<f32>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2 * channels;
        if data.len() != n {
            return Err(Error::shape(format!(
                "voxel grid expects {}x{}x{}x{} = {} values, got {}",
                dims.0,
                dims.1,
                dims.2,
                channels,
                n,
                data.len()
            )));
        }
        Ok(VoxelGrid {
            dims,
            channels,
            data,
        })
    }

    pub fn zeros(dims: (usize, usize, usize), channels: usize) -> Self {
        VoxelGrid {
            dims,
            channels,
            data: vec![0.0; dims.0 * dims.1 * dims.2 * channels],
        }
    }

    pub fn num_cells(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    #[inline]
    pub fn cell_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims.1 + y) * self.dims.2 + z
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let base = self.cell_index(x, y, z) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, x: usize, y: usize, z: usize) -> &mut [f32] {
        let base = self.cell_index(x, y, z) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    pub fn same_shape(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One class id per cell; `EMPTY_LABEL` marks free space, `IGNORE_LABEL`
/// marks cells excluded from evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub dims: (usize, usize, usize),
    pub num_classes: usize,
    pub labels: Vec<u16>,
}

impl LabelGrid {
    pub fn new(dims: (usize, usize, usize), num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if labels.len() != n {
            return Err(Error::shape(format!(
                "label grid expects {} cells, got {}",
                n,
                labels.len()
            )));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != EMPTY_LABEL && l != IGNORE_LABEL && (l as usize) >= num_classes)
        {
            return Err(Error::input(format!(
                "label id {} out of range for {} classes",
                bad, num_classes
            )));
        }
        Ok(LabelGrid {
            dims,
            num_classes,
            labels,
        })
    }

    pub fn empty(dims: (usize, usize, usize), num_classes: usize) -> Self {
        LabelGrid {
            dims,
            num_classes,
            labels: vec![EMPTY_LABEL; dims.0 * dims.1 * dims.2],
        }
    }

    #[inline]
    pub fn cell_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims.1 + y) * self.dims.2 + z
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.cell_index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u16) {
        let i = self.cell_index(x, y, z);
        self.labels[i] = label;
    }

    pub fn same_shape(&self, other: &LabelGrid) -> bool {
        self.dims == other.dims
    }
}

/// Bilinear interpolation of the four pixels around the continuous
/// coordinate `(x, y)`; origin at the center of pixel (0, 0).
///
/// Out-of-bounds neighbors contribute zero. Exact integer coordinates
/// reproduce the stored pixel bit-for-bit.
pub fn bilinear_sample(src: &FeatureMap, x: f32, y: f32, out: &mut [f32]) {
    debug_assert_eq!(out.len(), src.channels);
    out.fill(0.0);
    if !x.is_finite() || !y.is_finite() {
        return;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as i64;
    let y0 = y0 as i64;

    // Integer coordinates: copy directly so the identity is exact.
    if fx == 0.0 && fy == 0.0 {
        if x0 >= 0 && y0 >= 0 && (x0 as usize) < src.width && (y0 as usize) < src.height {
            out.copy_from_slice(src.pixel(y0 as usize, x0 as usize));
        }
        return;
    }

    let w00 = (1.0 - fx) * (1.0 - fy);
    let w01 = fx * (1.0 - fy);
    let w10 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    let corners = [
        (y0, x0, w00),
        (y0, x0 + 1, w01),
        (y0 + 1, x0, w10),
        (y0 + 1, x0 + 1, w11),
    ];
    for (cy, cx, w) in corners {
        if w == 0.0 || cy < 0 || cx < 0 {
            continue;
        }
        let (cy, cx) = (cy as usize, cx as usize);
        if cy >= src.height || cx >= src.width {
            continue;
        }
        let px = src.pixel(cy, cx);
        for (o, v) in out.iter_mut().zip(px.iter()) {
            *o += w * v;
        }
    }
}

/// Convenience wrapper returning the sampled channel vector.
pub fn bilinear_sample_vec(src: &FeatureMap, x: f32, y: f32) -> Vec<f32> {
    let mut out = vec![0.0; src.channels];
    bilinear_sample(src, x, y, &mut out);
    out
}

/// Backward warp: `output(p) = bilinear_sample(src, p + flow(p))`.
///
/// The flow is the displacement added to the output pixel to find the
/// source location (gather semantics); out-of-view lookups read zeros.
pub fn warp(src: &FeatureMap, flow: &FlowField) -> Result<FeatureMap> {
    if src.height != flow.height || src.width != flow.width {
        return Err(Error::shape(format!(
            "warp: feature map {}x{} vs flow {}x{}",
            src.height, src.width, flow.height, flow.width
        )));
    }
    let mut out = FeatureMap::zeros(src.height, src.width, src.channels);
    for y in 0..src.height {
        for x in 0..src.width {
            let (dx, dy) = flow.at(y, x);
            let sx = x as f32 + dx;
            let sy = y as f32 + dy;
            let base = (y * src.width + x) * src.channels;
            bilinear_sample(src, sx, sy, &mut out.data[base..base + src.channels]);
        }
    }
    Ok(out)
}
