//! Minimal dense building blocks: linear projections, zero-padded 2D/3D
//! convolutions, and the activation helpers used by the attention and
//! fusion stages. Everything runs single-threaded and in a fixed order so
//! results are bit-reproducible.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, VoxelGrid};

/// Dense linear map `out = W x + b`, weights stored row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProj {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LinearProj {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "linear {}->{} expects {} weights and {} biases, got {} and {}",
                in_dim,
                out_dim,
                in_dim * out_dim,
                out_dim,
                weight.len(),
                bias.len()
            )));
        }
        Ok(LinearProj {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearProj {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut p = LinearProj::zeros(dim, dim);
        for i in 0..dim {
            p.weight[i * dim + i] = 1.0;
        }
        p
    }

    /// Uniform init in [-1/sqrt(in), 1/sqrt(in)], biases zero.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (in_dim.max(1) as f32).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        LinearProj {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn apply_into(&self, input: &[f32], out: &mut [f32]) {
        debug_assert_eq!(input.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input.iter()) {
                acc += w * x;
            }
            *slot = acc;
        }
    }

    pub fn apply(&self, input: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.out_dim];
        self.apply_into(input, &mut out);
        out
    }

    /// Apply per pixel across a feature map.
    pub fn apply_map(&self, map: &FeatureMap) -> Result<FeatureMap> {
        if map.channels != self.in_dim {
            return Err(Error::shape(format!(
                "linear expects {} channels, map has {}",
                self.in_dim, map.channels
            )));
        }
        let mut out = FeatureMap::zeros(map.height, map.width, self.out_dim);
        for y in 0..map.height {
            for x in 0..map.width {
                let base = (y * map.width + x) * self.out_dim;
                self.apply_into(map.pixel(y, x), &mut out.data[base..base + self.out_dim]);
            }
        }
        Ok(out)
    }
}

/// Zero-padded stride-1 2D convolution with a square odd kernel.
/// Weights stored as `[out][in][ky][kx]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if ksize % 2 == 0 {
            return Err(Error::input(format!("conv kernel must be odd, got {ksize}")));
        }
        if weight.len() != out_ch * in_ch * ksize * ksize || bias.len() != out_ch {
            return Err(Error::shape("conv2d weight/bias size mismatch".to_string()));
        }
        Ok(Conv2d {
            in_ch,
            out_ch,
            ksize,
            weight,
            bias,
        })
    }

    pub fn seeded(in_ch: usize, out_ch: usize, ksize: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * ksize * ksize).max(1);
        let scale = 1.0 / (fan_in as f32).sqrt();
        let weight = (0..out_ch * in_ch * ksize * ksize)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Conv2d {
            in_ch,
            out_ch,
            ksize,
            weight,
            bias: vec![0.0; out_ch],
        }
    }

    pub fn apply(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels != self.in_ch {
            return Err(Error::shape(format!(
                "conv2d expects {} channels, got {}",
                self.in_ch, input.channels
            )));
        }
        let r = (self.ksize / 2) as i64;
        let mut out = FeatureMap::zeros(input.height, input.width, self.out_ch);
        for y in 0..input.height as i64 {
            for x in 0..input.width as i64 {
                for o in 0..self.out_ch {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_ch {
                        for ky in -r..=r {
                            let sy = y + ky;
                            if sy < 0 || sy >= input.height as i64 {
                                continue;
                            }
                            for kx in -r..=r {
                                let sx = x + kx;
                                if sx < 0 || sx >= input.width as i64 {
                                    continue;
                                }
                                let w = self.weight[((o * self.in_ch + i) * self.ksize
                                    + (ky + r) as usize)
                                    * self.ksize
                                    + (kx + r) as usize];
                                acc += w * input.pixel(sy as usize, sx as usize)[i];
                            }
                        }
                    }
                    out.data[((y as usize * input.width) + x as usize) * self.out_ch + o] = acc;
                }
            }
        }
        Ok(out)
    }
}

/// Zero-padded stride-1 3D convolution with a cubic odd kernel.
/// Weights stored as `[out][in][ka][kb][kc]` over grid axes (a, b, c).
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if ksize % 2 == 0 {
            return Err(Error::input(format!("conv kernel must be odd, got {ksize}")));
        }
        if weight.len() != out_ch * in_ch * ksize * ksize * ksize || bias.len() != out_ch {
            return Err(Error::shape("conv3d weight/bias size mismatch".to_string()));
        }
        Ok(Conv3d {
            in_ch,
            out_ch,
            ksize,
            weight,
            bias,
        })
    }

    pub fn zeros(in_ch: usize, out_ch: usize, ksize: usize) -> Self {
        Conv3d {
            in_ch,
            out_ch,
            ksize,
            weight: vec![0.0; out_ch * in_ch * ksize * ksize * ksize],
            bias: vec![0.0; out_ch],
        }
    }

    /// 1x1x1 kernel that passes channels through unchanged (requires
    /// `in_ch == out_ch`).
    pub fn identity(ch: usize) -> Self {
        let mut c = Conv3d::zeros(ch, ch, 1);
        for i in 0..ch {
            c.weight[i * ch + i] = 1.0;
        }
        c
    }

    pub fn seeded(in_ch: usize, out_ch: usize, ksize: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * ksize * ksize * ksize).max(1);
        let scale = 1.0 / (fan_in as f32).sqrt();
        let weight = (0..out_ch * in_ch * ksize * ksize * ksize)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Conv3d {
            in_ch,
            out_ch,
            ksize,
            weight,
            bias: vec![0.0; out_ch],
        }
    }

    pub fn apply(&self, input: &VoxelGrid) -> Result<VoxelGrid> {
        if input.channels != self.in_ch {
            return Err(Error::shape(format!(
                "conv3d expects {} channels, got {}",
                self.in_ch, input.channels
            )));
        }
        let (na, nb, nc) = input.dims;
        let r = (self.ksize / 2) as i64;
        let mut out = VoxelGrid::zeros(input.dims, self.out_ch);
        for a in 0..na as i64 {
            for b in 0..nb as i64 {
                for c in 0..nc as i64 {
                    let out_base =
                        ((a as usize * nb + b as usize) * nc + c as usize) * self.out_ch;
                    for o in 0..self.out_ch {
                        let mut acc = self.bias[o];
                        for i in 0..self.in_ch {
                            for ka in -r..=r {
                                let sa = a + ka;
                                if sa < 0 || sa >= na as i64 {
                                    continue;
                                }
                                for kb in -r..=r {
                                    let sb = b + kb;
                                    if sb < 0 || sb >= nb as i64 {
                                        continue;
                                    }
                                    for kc in -r..=r {
                                        let sc = c + kc;
                                        if sc < 0 || sc >= nc as i64 {
                                            continue;
                                        }
                                        let w = self.weight[(((o * self.in_ch + i) * self.ksize
                                            + (ka + r) as usize)
                                            * self.ksize
                                            + (kb + r) as usize)
                                            * self.ksize
                                            + (kc + r) as usize];
                                        let idx = ((sa as usize * nb + sb as usize) * nc
                                            + sc as usize)
                                            * self.in_ch
                                            + i;
                                        acc += w * input.data[idx];
                                    }
                                }
                            }
                        }
                        out.data[out_base + o] = acc;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn relu_inplace(xs: &mut [f32]) {
    for x in xs {
        *x = relu(*x);
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax; leaves an empty slice untouched.
pub fn softmax_inplace(xs: &mut [f32]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_zero() {
        let x = [1.0, -2.0, 3.0];
        assert_eq!(LinearProj::identity(3).apply(&x), x.to_vec());
        assert_eq!(LinearProj::zeros(3, 2).apply(&x), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_matches_manual_matmul() {
        let p = LinearProj::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -0.5]).unwrap();
        let out = p.apply(&[10.0, 1.0]);
        assert_eq!(out, vec![10.0 + 2.0 + 0.5, 30.0 + 4.0 - 0.5]);
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let mut weight = vec![0.0; 9];
        weight[4] = 1.0; // center tap
        let conv = Conv2d::new(1, 1, 3, weight, vec![0.0]).unwrap();
        let map = FeatureMap::new(2, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = conv.apply(&map).unwrap();
        assert_eq!(out.data, map.data);
    }

    #[test]
    fn conv2d_box_filter_respects_zero_padding() {
        let conv = Conv2d::new(1, 1, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let map = FeatureMap::new(2, 2, 1, vec![1.0; 4]).unwrap();
        let out = conv.apply(&map).unwrap();
        // Every output is the count of in-bounds neighbors.
        assert_eq!(out.data, vec![4.0; 4]);
    }

    #[test]
    fn conv3d_identity_passes_through() {
        let conv = Conv3d::identity(2);
        let grid = VoxelGrid::new((2, 1, 2), 2, (0..8).map(|v| v as f32).collect()).unwrap();
        let out = conv.apply(&grid).unwrap();
        assert_eq!(out.data, grid.data);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut xs = vec![0.0, 1.0, -3.0, 2.5];
        softmax_inplace(&mut xs);
        let sum: f32 = xs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(xs.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let base = vec![0.3, -1.2, 2.0, 0.0];
        let mut a = base.clone();
        let mut b: Vec<f32> = base.iter().map(|v| v + 7.5).collect();
        softmax_inplace(&mut a);
        softmax_inplace(&mut b);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
