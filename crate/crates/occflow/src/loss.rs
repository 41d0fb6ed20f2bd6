//! Training objectives: multi-scale occupancy/semantic affinity losses,
//! class-weighted voxel cross-entropy, the 2D distillation terms (soft
//! cross-entropy, dice, boundary), the three-plane cross-view loss, and
//! the weighted total. All reductions run in f64 with a fixed order.
//!
//! Ignore-labeled voxels never contribute to any term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, LabelGrid, VoxelGrid, EMPTY_LABEL, IGNORE_LABEL};
use crate::voxel::VoxelSpec;

/// Floor applied inside logarithms so losses stay finite.
const LOG_EPS: f64 = 1e-12;
/// Stabilizer of the dice ratio.
const DICE_EPS: f64 = 1e-6;
/// Probability clamp of the binary cross-entropy on edge maps.
const BCE_EPS: f64 = 1e-7;
/// Gradient-magnitude threshold that turns a probability map into edges.
pub const EDGE_THRESHOLD: f64 = 0.5;

/// Balance factors of the total objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::input(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-class weights plus a linear gain on voxel distance from the sensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassWeightPolicy {
    /// One weight per class plus the free-space class, free space last.
    pub class_weights: Vec<f64>,
    pub distance_gamma: f64,
    pub max_range: f64,
    pub sensor_origin: [f64; 3],
}

impl ClassWeightPolicy {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeightPolicy {
            class_weights: vec![1.0; num_classes + 1],
            distance_gamma: 1.0,
            max_range: 51.2,
            sensor_origin: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::input("class weights must be positive".to_string()));
        }
        if self.distance_gamma < 0.0 || !(self.max_range > 0.0) {
            return Err(Error::input(
                "distance weighting needs gamma >= 0 and max_range > 0".to_string(),
            ));
        }
        Ok(())
    }

    fn distance_weight(&self, dist: f64) -> f64 {
        1.0 + self.distance_gamma * (dist / self.max_range)
    }
}

fn check_logits(pred: &VoxelGrid, gt: &LabelGrid) -> Result<usize> {
    if pred.dims != gt.dims {
        return Err(Error::shape(format!(
            "loss: prediction dims {:?} vs labels {:?}",
            pred.dims, gt.dims
        )));
    }
    if pred.channels != gt.num_classes + 1 {
        return Err(Error::shape(format!(
            "loss: {} logits per voxel but {} classes (+ free space)",
            pred.channels, gt.num_classes
        )));
    }
    Ok(gt.num_classes)
}

/// Per-voxel softmax over classes + free space, in f64.
fn softmax_probs(pred: &VoxelGrid) -> Vec<f64> {
    let k = pred.channels;
    let mut out = vec![0.0f64; pred.data.len()];
    for i in 0..pred.num_cells() {
        let logits = &pred.data[i * k..(i + 1) * k];
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for (j, &l) in logits.iter().enumerate() {
            let e = ((l as f64) - max).exp();
            out[i * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            out[i * k + j] /= sum;
        }
    }
    out
}

fn safe_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

/// One affinity penalty: -(ln P + ln R + ln S), skipping undefined terms.
fn affinity_terms(intersection: f64, pred_sum: f64, gt_sum: f64, inv_both: f64, inv_gt: f64) -> f64 {
    let mut loss = 0.0;
    if pred_sum > 0.0 {
        loss -= safe_ln(intersection / pred_sum); // precision
    }
    if gt_sum > 0.0 {
        loss -= safe_ln(intersection / gt_sum); // recall
    }
    if inv_gt > 0.0 {
        loss -= safe_ln(inv_both / inv_gt); // specificity
    }
    loss
}

/// Downsampled view of a voxel tensor of per-class probabilities and the
/// matching pooled ground truth. At each pooled cell: probabilities are the
/// mean over non-ignore children, a class counts as present when any
/// non-ignore child carries it, and cells whose children are all ignored
/// are excluded.
struct PooledScale {
    /// Mean class probabilities per kept cell, `[cell][class]`.
    probs: Vec<Vec<f64>>,
    /// Per kept cell, per class: any child labeled with that class.
    gt_any: Vec<Vec<bool>>,
}

fn pool_scale(
    probs: &[f64],
    pred: &VoxelGrid,
    gt: &LabelGrid,
    scale: usize,
) -> Result<PooledScale> {
    let (nx, ny, nz) = gt.dims;
    if nx % scale != 0 || ny % scale != 0 || nz % scale != 0 {
        return Err(Error::input(format!(
            "scale {scale} does not divide grid dims {:?}",
            gt.dims
        )));
    }
    let k = pred.channels;
    let mut pooled = PooledScale {
        probs: Vec::new(),
        gt_any: Vec::new(),
    };
    for cx in 0..nx / scale {
        for cy in 0..ny / scale {
            for cz in 0..nz / scale {
                let mut mean = vec![0.0f64; k];
                let mut any = vec![false; k];
                let mut kept = 0usize;
                for dx in 0..scale {
                    for dy in 0..scale {
                        for dz in 0..scale {
                            let (x, y, z) = (cx * scale + dx, cy * scale + dy, cz * scale + dz);
                            let label = gt.at(x, y, z);
                            if label == IGNORE_LABEL {
                                continue;
                            }
                            kept += 1;
                            let cell = gt.cell_index(x, y, z);
                            for j in 0..k {
                                mean[j] += probs[cell * k + j];
                            }
                            let class_idx = if label == EMPTY_LABEL {
                                k - 1
                            } else {
                                label as usize
                            };
                            any[class_idx] = true;
                        }
                    }
                }
                if kept == 0 {
                    continue;
                }
                for m in mean.iter_mut() {
                    *m /= kept as f64;
                }
                pooled.probs.push(mean);
                pooled.gt_any.push(any);
            }
        }
    }
    if pooled.probs.is_empty() {
        return Err(Error::input("loss needs at least one labeled voxel".to_string()));
    }
    Ok(pooled)
}

/// Multi-scale occupancy affinity loss: precision/recall/specificity of the
/// predicted occupancy probability against binary occupancy, averaged over
/// the given downsampling scales.
pub fn scal_geo(pred: &VoxelGrid, gt: &LabelGrid, scales: &[usize]) -> Result<f64> {
    check_logits(pred, gt)?;
    if scales.is_empty() {
        return Err(Error::input("need at least one scale".to_string()));
    }
    let probs = softmax_probs(pred);
    let k = pred.channels;
    let mut total = 0.0;
    for &scale in scales {
        let pooled = pool_scale(&probs, pred, gt, scale)?;
        let mut intersection = 0.0;
        let mut pred_sum = 0.0;
        let mut gt_sum = 0.0;
        let mut inv_both = 0.0;
        let mut inv_gt = 0.0;
        for (p, any) in pooled.probs.iter().zip(pooled.gt_any.iter()) {
            let occ_p = 1.0 - p[k - 1];
            let occ_gt = any[..k - 1].iter().any(|&b| b);
            let y = if occ_gt { 1.0 } else { 0.0 };
            intersection += occ_p * y;
            pred_sum += occ_p;
            gt_sum += y;
            inv_both += (1.0 - occ_p) * (1.0 - y);
            inv_gt += 1.0 - y;
        }
        total += affinity_terms(intersection, pred_sum, gt_sum, inv_both, inv_gt);
    }
    Ok(total / scales.len() as f64)
}

/// Multi-scale per-class affinity loss, averaged over the classes present
/// in the pooled ground truth or in the pooled prediction argmax; classes
/// absent from both are excluded.
pub fn scal_sem(pred: &VoxelGrid, gt: &LabelGrid, scales: &[usize]) -> Result<f64> {
    check_logits(pred, gt)?;
    if scales.is_empty() {
        return Err(Error::input("need at least one scale".to_string()));
    }
    let probs = softmax_probs(pred);
    let k = pred.channels;
    let mut total = 0.0;
    for &scale in scales {
        let pooled = pool_scale(&probs, pred, gt, scale)?;
        let mut class_loss = 0.0;
        let mut counted = 0usize;
        for class in 0..k {
            let in_gt = pooled.gt_any.iter().any(|any| any[class]);
            let in_pred = pooled.probs.iter().any(|p| {
                let mut best = 0usize;
                for (j, v) in p.iter().enumerate() {
                    if *v > p[best] {
                        best = j;
                    }
                }
                best == class
            });
            if !in_gt && !in_pred {
                continue;
            }
            counted += 1;
            let mut intersection = 0.0;
            let mut pred_sum = 0.0;
            let mut gt_sum = 0.0;
            let mut inv_both = 0.0;
            let mut inv_gt = 0.0;
            for (p, any) in pooled.probs.iter().zip(pooled.gt_any.iter()) {
                let y = if any[class] { 1.0 } else { 0.0 };
                intersection += p[class] * y;
                pred_sum += p[class];
                gt_sum += y;
                inv_both += (1.0 - p[class]) * (1.0 - y);
                inv_gt += 1.0 - y;
            }
            class_loss += affinity_terms(intersection, pred_sum, gt_sum, inv_both, inv_gt);
        }
        if counted == 0 {
            return Err(Error::input("no classes present at this scale".to_string()));
        }
        total += class_loss / counted as f64;
    }
    Ok(total / scales.len() as f64)
}

/// Class-weighted cross-entropy over non-ignore voxels, reduced as the
/// weighted mean `sum(w * ce) / sum(w)`.
pub fn voxel_ce(pred: &VoxelGrid, gt: &LabelGrid, policy: &ClassWeightPolicy) -> Result<f64> {
    let num_classes = check_logits(pred, gt)?;
    policy.validate()?;
    if policy.class_weights.len() != num_classes + 1 {
        return Err(Error::shape(format!(
            "policy carries {} weights for {} classes (+ free space)",
            policy.class_weights.len(),
            num_classes
        )));
    }
    let probs = softmax_probs(pred);
    let k = pred.channels;
    let mut num = 0.0;
    let mut den = 0.0;
    for (cell, &label) in gt.labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let class_idx = if label == EMPTY_LABEL {
            k - 1
        } else {
            label as usize
        };
        let w = policy.class_weights[class_idx];
        num += w * -safe_ln(probs[cell * k + class_idx]);
        den += w;
    }
    if den == 0.0 {
        return Err(Error::input("cross-entropy needs at least one labeled voxel".to_string()));
    }
    Ok(num / den)
}

/// Analytic gradient of [`voxel_ce`] with respect to every logit,
/// laid out like `pred.data`.
pub fn voxel_ce_grad(
    pred: &VoxelGrid,
    gt: &LabelGrid,
    policy: &ClassWeightPolicy,
) -> Result<Vec<f64>> {
    check_logits(pred, gt)?;
    let probs = softmax_probs(pred);
    let k = pred.channels;
    let mut den = 0.0;
    for &label in gt.labels.iter() {
        if label == IGNORE_LABEL {
            continue;
        }
        let class_idx = if label == EMPTY_LABEL { k - 1 } else { label as usize };
        den += policy.class_weights[class_idx];
    }
    if den == 0.0 {
        return Err(Error::input("cross-entropy needs at least one labeled voxel".to_string()));
    }
    let mut grad = vec![0.0f64; pred.data.len()];
    for (cell, &label) in gt.labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let class_idx = if label == EMPTY_LABEL { k - 1 } else { label as usize };
        let w = policy.class_weights[class_idx];
        for j in 0..k {
            let indicator = if j == class_idx { 1.0 } else { 0.0 };
            grad[cell * k + j] = w * (probs[cell * k + j] - indicator) / den;
        }
    }
    Ok(grad)
}

fn check_prob_maps(pred: &FeatureMap, target: &FeatureMap) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(Error::shape(format!(
            "probability maps {}x{}x{} vs {}x{}x{}",
            pred.height, pred.width, pred.channels, target.height, target.width, target.channels
        )));
    }
    Ok(())
}

/// Soft-label cross-entropy `-sum(t * ln p)` averaged over pixels.
pub fn soft_ce(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    check_prob_maps(pred, target)?;
    let n = (pred.height * pred.width) as f64;
    let mut total = 0.0;
    for (p, t) in pred.data.iter().zip(target.data.iter()) {
        total -= (*t as f64) * safe_ln(*p as f64);
    }
    Ok(total / n)
}

/// Soft dice loss: `1 - mean_c (2 * sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    check_prob_maps(pred, target)?;
    let k = pred.channels;
    let mut mean = 0.0;
    for c in 0..k {
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut tsum = 0.0f64;
        for i in (c..pred.data.len()).step_by(k) {
            let p = pred.data[i] as f64;
            let t = target.data[i] as f64;
            inter += p * t;
            psum += p;
            tsum += t;
        }
        mean += (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS);
    }
    Ok(1.0 - mean / k as f64)
}

/// Analytic gradient of [`dice_loss`] with respect to every prediction
/// entry, laid out like `pred.data`.
pub fn dice_loss_grad(pred: &FeatureMap, target: &FeatureMap) -> Result<Vec<f64>> {
    check_prob_maps(pred, target)?;
    let k = pred.channels;
    let mut grad = vec![0.0f64; pred.data.len()];
    for c in 0..k {
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut tsum = 0.0f64;
        for i in (c..pred.data.len()).step_by(k) {
            inter += pred.data[i] as f64 * target.data[i] as f64;
            psum += pred.data[i] as f64;
            tsum += target.data[i] as f64;
        }
        let denom = psum + tsum + DICE_EPS;
        let numer = 2.0 * inter + DICE_EPS;
        for i in (c..pred.data.len()).step_by(k) {
            let t = target.data[i] as f64;
            // d dice_c / dp = (2 t denom - numer) / denom^2; loss takes -mean.
            grad[i] = -(2.0 * t * denom - numer) / (denom * denom) / k as f64;
        }
    }
    Ok(grad)
}

/// Binary edge maps per class: forward-difference gradient magnitude of
/// the class probability map, thresholded.
pub fn edge_maps(map: &FeatureMap, threshold: f64) -> FeatureMap {
    let (h, w, k) = (map.height, map.width, map.channels);
    let mut edges = FeatureMap::zeros(h, w, k);
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                let v = map.pixel(y, x)[c] as f64;
                let gx = if x + 1 < w {
                    map.pixel(y, x + 1)[c] as f64 - v
                } else {
                    0.0
                };
                let gy = if y + 1 < h {
                    map.pixel(y + 1, x)[c] as f64 - v
                } else {
                    0.0
                };
                let mag = (gx * gx + gy * gy).sqrt();
                edges.pixel_mut(y, x)[c] = if mag > threshold { 1.0 } else { 0.0 };
            }
        }
    }
    edges
}

fn binary_ce(pred: &FeatureMap, target: &FeatureMap) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.data.iter().zip(target.data.iter()) {
        let p = (*p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
        let t = *t as f64;
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    total / pred.data.len() as f64
}

/// Boundary loss: extract edge maps from prediction and target, then sum
/// the dice loss and the pixel-mean binary cross-entropy of the edges.
/// Two edge-free inputs yield exactly 0.
pub fn boundary_loss(pred: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    check_prob_maps(pred, target)?;
    let pred_edges = edge_maps(pred, EDGE_THRESHOLD);
    let target_edges = edge_maps(target, EDGE_THRESHOLD);
    let no_edges = pred_edges.data.iter().all(|&v| v == 0.0)
        && target_edges.data.iter().all(|&v| v == 0.0);
    if no_edges {
        return Ok(0.0);
    }
    Ok(dice_loss(&pred_edges, &target_edges)? + binary_ce(&pred_edges, &target_edges))
}

/// Most-frequent non-empty label along the collapsed axis; ties go to the
/// lower class id, ignore-labeled voxels are skipped, and columns with no
/// semantic voxel project to the ignore id.
pub fn project_labels_to_planes(gt: &LabelGrid) -> [Vec<u16>; 3] {
    let (nx, ny, nz) = gt.dims;
    let k = gt.num_classes;
    let majority = |counts: &[usize]| -> u16 {
        let mut best: Option<usize> = None;
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            match best {
                Some(b) if counts[b] >= n => {}
                _ => best = Some(c),
            }
        }
        best.map(|c| c as u16).unwrap_or(IGNORE_LABEL)
    };

    let mut xy = vec![IGNORE_LABEL; nx * ny];
    for x in 0..nx {
        for y in 0..ny {
            let mut counts = vec![0usize; k];
            for z in 0..nz {
                let l = gt.at(x, y, z);
                if l != EMPTY_LABEL && l != IGNORE_LABEL {
                    counts[l as usize] += 1;
                }
            }
            xy[x * ny + y] = majority(&counts);
        }
    }
    let mut xz = vec![IGNORE_LABEL; nx * nz];
    for x in 0..nx {
        for z in 0..nz {
            let mut counts = vec![0usize; k];
            for y in 0..ny {
                let l = gt.at(x, y, z);
                if l != EMPTY_LABEL && l != IGNORE_LABEL {
                    counts[l as usize] += 1;
                }
            }
            xz[x * nz + z] = majority(&counts);
        }
    }
    let mut yz = vec![IGNORE_LABEL; ny * nz];
    for y in 0..ny {
        for z in 0..nz {
            let mut counts = vec![0usize; k];
            for x in 0..nx {
                let l = gt.at(x, y, z);
                if l != EMPTY_LABEL && l != IGNORE_LABEL {
                    counts[l as usize] += 1;
                }
            }
            yz[y * nz + z] = majority(&counts);
        }
    }
    [xy, xz, yz]
}

/// Class- and distance-weighted cross-entropy between per-plane logits and
/// the ground truth projected onto the three orthogonal planes. Planes
/// with no labeled cell are skipped; all planes empty is an input error.
///
/// Plane layouts (rows x cols): XY = (X, Y), XZ = (X, Z), YZ = (Y, Z),
/// matching the grid axis order.
pub fn tpv_loss(
    planes: &[FeatureMap; 3],
    gt: &LabelGrid,
    spec: &VoxelSpec,
    policy: &ClassWeightPolicy,
) -> Result<f64> {
    policy.validate()?;
    let (nx, ny, nz) = gt.dims;
    let k = gt.num_classes;
    let expected = [(nx, ny), (nx, nz), (ny, nz)];
    for (plane, (rows, cols)) in planes.iter().zip(expected.iter()) {
        if plane.height != *rows || plane.width != *cols || plane.channels != k {
            return Err(Error::shape(format!(
                "plane logits {}x{}x{} do not match projected grid {}x{}x{}",
                plane.height, plane.width, plane.channels, rows, cols, k
            )));
        }
    }
    let targets = project_labels_to_planes(gt);

    // World coordinate of a cell center along one axis.
    let center = |axis: usize, i: usize| -> f64 {
        spec.origin[axis] as f64 + (i as f64 + 0.5) * spec.cell_size as f64
    };
    // Axes retained by each plane, in (row, col) order.
    let retained: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

    let mut plane_losses = Vec::new();
    for (pi, plane) in planes.iter().enumerate() {
        let target = &targets[pi];
        let (ra, ca) = retained[pi];
        let mut num = 0.0;
        let mut den = 0.0;
        let mut logp = vec![0.0f64; k];
        for r in 0..plane.height {
            for c in 0..plane.width {
                let label = target[r * plane.width + c];
                if label == IGNORE_LABEL {
                    continue;
                }
                let logits = plane.pixel(r, c);
                let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut sum = 0.0;
                for (j, &l) in logits.iter().enumerate() {
                    logp[j] = l as f64 - max;
                    sum += logp[j].exp();
                }
                let lse = sum.ln();
                let da = center(ra, r) - policy.sensor_origin[ra];
                let db = center(ca, c) - policy.sensor_origin[ca];
                let dist = (da * da + db * db).sqrt();
                let w = policy.class_weights[label as usize] * policy.distance_weight(dist);
                num += w * (lse - logp[label as usize]);
                den += w;
            }
        }
        if den > 0.0 {
            plane_losses.push(num / den);
        }
    }
    if plane_losses.is_empty() {
        return Err(Error::input("all plane projections are ignore-only".to_string()));
    }
    Ok(plane_losses.iter().sum::<f64>() / plane_losses.len() as f64)
}

/// The individual terms feeding the total objective.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub scal_geo: f64,
    pub scal_sem: f64,
    pub voxel_ce: f64,
    pub distill_ce: f64,
    pub dice: f64,
    pub boundary: f64,
    pub tpv: f64,
}

/// Weighted total:
/// `l1 * (scal_geo + scal_sem + voxel_ce) + l2 * (distill_ce + dice + boundary) + l3 * tpv`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    let voxel = parts.scal_geo + parts.scal_sem + parts.voxel_ce;
    let distill = parts.distill_ce + parts.dice + parts.boundary;
    weights.lambda1 * voxel + weights.lambda2 * distill + weights.lambda3 * parts.tpv
}

/// Loss breakdown as emitted in reports; `ce` is the full-resolution voxel
/// cross-entropy, `distill_ce` the 2D soft-label term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub scal_geo: f64,
    pub scal_sem: f64,
    pub ce: f64,
    pub distill_ce: f64,
    pub dice: f64,
    pub boundary: f64,
    pub tpv: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_parts(parts: &LossParts, weights: &LossWeights) -> Self {
        LossReport {
            scal_geo: parts.scal_geo,
            scal_sem: parts.scal_sem,
            ce: parts.voxel_ce,
            distill_ce: parts.distill_ce,
            dice: parts.dice,
            boundary: parts.boundary,
            tpv: parts.tpv,
            total: total_loss(parts, weights),
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            self.scal_geo,
            self.scal_sem,
            self.ce,
            self.distill_ce,
            self.dice,
            self.boundary,
            self.tpv,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const BIG: f32 = 50.0; // saturates softmax to ~1 at the hot class

    /// Logits that confidently agree with the labels everywhere.
    fn perfect_logits(gt: &LabelGrid) -> VoxelGrid {
        let k = gt.num_classes + 1;
        let mut pred = VoxelGrid::zeros(gt.dims, k);
        for (i, &label) in gt.labels.iter().enumerate() {
            let hot = match label {
                IGNORE_LABEL => 0, // arbitrary; must not matter
                EMPTY_LABEL => k - 1,
                c => c as usize,
            };
            pred.data[i * k + hot] = BIG;
        }
        pred
    }

    fn toy_gt() -> LabelGrid {
        let mut gt = LabelGrid::empty((2, 2, 2), 3);
        gt.set(0, 0, 0, 0);
        gt.set(0, 1, 0, 1);
        gt.set(1, 0, 1, 2);
        gt.set(1, 1, 1, IGNORE_LABEL);
        gt
    }

    #[test]
    fn scal_geo_is_zero_at_perfect_prediction() {
        let gt = toy_gt();
        let pred = perfect_logits(&gt);
        let loss = scal_geo(&pred, &gt, &[1, 2]).unwrap();
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn scal_geo_inverted_prediction_is_maximal_among_cases() {
        let mut gt = LabelGrid::empty((2, 2, 1), 2);
        gt.set(0, 0, 0, 0);
        gt.set(1, 1, 0, 1);
        let perfect = perfect_logits(&gt);
        // Inverted: occupied where empty and vice versa.
        let k = 3;
        let mut inverted = VoxelGrid::zeros(gt.dims, k);
        for (i, &label) in gt.labels.iter().enumerate() {
            let hot = if label == EMPTY_LABEL { 0 } else { k - 1 };
            inverted.data[i * k + hot] = BIG;
        }
        let l_perfect = scal_geo(&perfect, &gt, &[1]).unwrap();
        let l_inverted = scal_geo(&inverted, &gt, &[1]).unwrap();
        // Hand evaluation on the 2x2x1 grid: every affinity ratio collapses
        // to ~eps, so each of the three terms is about -ln(eps).
        let want = 3.0 * -(1e-12f64).ln();
        assert!(l_inverted > l_perfect);
        assert!((l_inverted - want) / want < 0.2, "{l_inverted} vs {want}");
        // Half-wrong case sits strictly between.
        let mut half = perfect_logits(&gt);
        half.data[..k].fill(0.0);
        half.data[k - 1] = BIG; // first voxel flipped to empty
        let l_half = scal_geo(&half, &gt, &[1]).unwrap();
        assert!(l_half > l_perfect && l_half < l_inverted);
    }

    #[test]
    fn scal_losses_single_scale_equals_multiscale_on_unit_grid() {
        let mut gt = LabelGrid::empty((1, 1, 1), 2);
        gt.set(0, 0, 0, 1);
        let pred = perfect_logits(&gt);
        let a = scal_geo(&pred, &gt, &[1]).unwrap();
        let b = scal_geo(&pred, &gt, &[1, 1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scal_sem_exact_value_on_two_class_toy_case() {
        // 2x1x1 grid, classes {0, 1}, both present; prediction puts
        // probability p on the right class at each voxel.
        let mut gt = LabelGrid::empty((2, 1, 1), 2);
        gt.set(0, 0, 0, 0);
        gt.set(1, 0, 0, 1);
        let mut pred = VoxelGrid::zeros((2, 1, 1), 3);
        // Softmax over (a, 0, 0): p = e^a / (e^a + 2).
        let a = 2.0f32;
        pred.data[0] = a; // voxel 0 favors class 0
        pred.data[3 + 1] = a; // voxel 1 favors class 1
        let p = (a as f64).exp() / ((a as f64).exp() + 2.0);
        let q = 1.0 / ((a as f64).exp() + 2.0);
        // Per class: precision = recall = p/(p+q), specificity = (1-q)/1.
        let term = -((p / (p + q)).ln()) * 2.0 - (1.0 - q).ln();
        let want = term; // identical for both classes, mean over 2 classes
        let got = scal_sem(&pred, &gt, &[1]).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn scal_sem_ignores_classes_absent_from_gt_and_prediction() {
        let mut gt = LabelGrid::empty((2, 1, 1), 3);
        gt.set(0, 0, 0, 0);
        gt.set(1, 0, 0, 0);
        let pred = perfect_logits(&gt);
        // Classes 1 and 2 appear nowhere; the loss is an average over the
        // present classes only (class 0 and free space), both perfect.
        let loss = scal_sem(&pred, &gt, &[1]).unwrap();
        assert!(loss <= 1e-6);
    }

    #[test]
    fn voxel_ce_limits_and_uniform_value() {
        let gt = toy_gt();
        let policy = ClassWeightPolicy::uniform(3);
        let perfect = perfect_logits(&gt);
        assert!(voxel_ce(&perfect, &gt, &policy).unwrap() < 1e-6);

        let uniform = VoxelGrid::zeros(gt.dims, 4);
        let ce = voxel_ce(&uniform, &gt, &policy).unwrap();
        assert!((ce - (4.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn voxel_ce_matches_hand_weighted_mean() {
        let mut gt = LabelGrid::empty((2, 1, 1), 2);
        gt.set(0, 0, 0, 0);
        gt.set(1, 0, 0, 1);
        let mut pred = VoxelGrid::zeros((2, 1, 1), 3);
        pred.data[0] = 1.0; // voxel 0 logits (1, 0, 0)
        pred.data[3 + 2] = 0.5; // voxel 1 logits (0, 0, 0.5)
        let policy = ClassWeightPolicy {
            class_weights: vec![2.0, 0.5, 1.0],
            distance_gamma: 0.0,
            max_range: 10.0,
            sensor_origin: [0.0; 3],
        };
        let e = |x: f64| x.exp();
        let ce0 = -((e(1.0) / (e(1.0) + 2.0)).ln());
        let ce1 = -((1.0 / (2.0 + e(0.5))).ln());
        let want = (2.0 * ce0 + 0.5 * ce1) / 2.5;
        let got = voxel_ce(&pred, &gt, &policy).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn ce_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut gt = LabelGrid::empty((2, 2, 2), 3);
        for (i, l) in gt.labels.iter_mut().enumerate() {
            *l = match i % 5 {
                0 => 0,
                1 => 1,
                2 => 2,
                3 => EMPTY_LABEL,
                _ => IGNORE_LABEL,
            };
        }
        let mut pred = VoxelGrid::zeros((2, 2, 2), 4);
        for v in pred.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let policy = ClassWeightPolicy::uniform(3);
        let grad = voxel_ce_grad(&pred, &gt, &policy).unwrap();
        for _ in 0..40 {
            let i = rng.gen_range(0..pred.data.len());
            let h = 1e-3f32;
            let orig = pred.data[i];
            pred.data[i] = orig + h;
            let up = voxel_ce(&pred, &gt, &policy).unwrap();
            let dp = pred.data[i] as f64 - orig as f64;
            pred.data[i] = orig - h;
            let down = voxel_ce(&pred, &gt, &policy).unwrap();
            let dm = orig as f64 - pred.data[i] as f64;
            pred.data[i] = orig;
            let fd = (up - down) / (dp + dm);
            let denom = grad[i].abs().max(1e-6);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-4 || (fd - grad[i]).abs() < 1e-9,
                "entry {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn dice_loss_agreement_disjoint_and_half_overlap() {
        let a = FeatureMap::new(2, 2, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(dice_loss(&a, &a).unwrap() < 1e-5);

        let b = FeatureMap::new(2, 2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((dice_loss(&a, &b).unwrap() - 1.0).abs() < 1e-5);

        // p covers 2 px, t covers 2 px, overlap 1: 1 - 2/(2+2) = 0.5.
        let p = FeatureMap::new(2, 2, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let t = FeatureMap::new(2, 2, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((dice_loss(&p, &t).unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn dice_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut pred = FeatureMap::zeros(4, 4, 3);
        let mut target = FeatureMap::zeros(4, 4, 3);
        for v in pred.data.iter_mut() {
            *v = rng.gen_range(0.05..0.95);
        }
        for v in target.data.iter_mut() {
            *v = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
        }
        let grad = dice_loss_grad(&pred, &target).unwrap();
        for _ in 0..40 {
            let i = rng.gen_range(0..pred.data.len());
            let h = 1e-4f32;
            let orig = pred.data[i];
            pred.data[i] = orig + h;
            let up = dice_loss(&pred, &target).unwrap();
            let dp = pred.data[i] as f64 - orig as f64;
            pred.data[i] = orig - h;
            let down = dice_loss(&pred, &target).unwrap();
            let dm = orig as f64 - pred.data[i] as f64;
            pred.data[i] = orig;
            let fd = (up - down) / (dp + dm);
            let denom = grad[i].abs().max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-4,
                "entry {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn boundary_loss_cases() {
        let a = FeatureMap::new(
            4,
            4,
            1,
            vec![
                0.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 1.0, 0.0, //
                0.0, 1.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        assert!(boundary_loss(&a, &a).unwrap() < 1e-4);

        // Edge-free constant maps: defined as exactly zero.
        let flat = FeatureMap::new(4, 4, 1, vec![0.7; 16]).unwrap();
        assert_eq!(boundary_loss(&flat, &flat).unwrap(), 0.0);
    }

    #[test]
    fn boundary_loss_matches_manual_edge_formula_on_shifted_squares() {
        // Two 2x2 unit squares on 8x8 canvases, shifted by one pixel.
        let mut p = FeatureMap::zeros(8, 8, 1);
        let mut t = FeatureMap::zeros(8, 8, 1);
        for y in 2..4 {
            for x in 2..4 {
                p.pixel_mut(y, x)[0] = 1.0;
                t.pixel_mut(y, x + 1)[0] = 1.0;
            }
        }
        let got = boundary_loss(&p, &t).unwrap();

        // Manual evaluation with the same conventions (forward differences,
        // threshold 0.5, dice + mean binary cross-entropy).
        let pe = edge_maps(&p, EDGE_THRESHOLD);
        let te = edge_maps(&t, EDGE_THRESHOLD);
        let mut inter = 0.0f64;
        let mut ps = 0.0f64;
        let mut ts = 0.0f64;
        let mut bce = 0.0f64;
        for i in 0..64 {
            let a = pe.data[i] as f64;
            let b = te.data[i] as f64;
            inter += a * b;
            ps += a;
            ts += b;
            let pc = a.clamp(1e-7, 1.0 - 1e-7);
            bce -= b * pc.ln() + (1.0 - b) * (1.0 - pc).ln();
        }
        let dice = 1.0 - (2.0 * inter + 1e-6) / (ps + ts + 1e-6);
        let want = dice + bce / 64.0;
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        assert!(got > 0.0);
    }

    fn plane_logits_for(gt: &LabelGrid, hot: f32) -> [FeatureMap; 3] {
        let targets = project_labels_to_planes(gt);
        let (nx, ny, nz) = gt.dims;
        let k = gt.num_classes;
        let dims = [(nx, ny), (nx, nz), (ny, nz)];
        let mut planes = Vec::new();
        for (pi, (rows, cols)) in dims.iter().enumerate() {
            let mut plane = FeatureMap::zeros(*rows, *cols, k);
            for r in 0..*rows {
                for c in 0..*cols {
                    let label = targets[pi][r * cols + c];
                    if label != IGNORE_LABEL {
                        plane.pixel_mut(r, c)[label as usize] = hot;
                    }
                }
            }
            planes.push(plane);
        }
        [planes.remove(0), planes.remove(0), planes.remove(0)]
    }

    #[test]
    fn plane_projection_of_single_voxel() {
        let mut gt = LabelGrid::empty((3, 3, 3), 2);
        gt.set(1, 2, 0, 1);
        let [xy, xz, yz] = project_labels_to_planes(&gt);
        assert_eq!(xy.iter().filter(|&&l| l != IGNORE_LABEL).count(), 1);
        assert_eq!(xy[1 * 3 + 2], 1);
        assert_eq!(xz[1 * 3 + 0], 1);
        assert_eq!(yz[2 * 3 + 0], 1);
    }

    #[test]
    fn plane_projection_majority_and_tie_break() {
        let mut gt = LabelGrid::empty((1, 1, 4), 3);
        // Column along z: labels 2, 2, 1, empty -> majority 2.
        gt.set(0, 0, 0, 2);
        gt.set(0, 0, 1, 2);
        gt.set(0, 0, 2, 1);
        let [xy, _, _] = project_labels_to_planes(&gt);
        assert_eq!(xy[0], 2);
        // Tie 1 vs 2 -> lower id wins.
        gt.set(0, 0, 1, 1);
        let [xy, _, _] = project_labels_to_planes(&gt);
        assert_eq!(xy[0], 1);
    }

    #[test]
    fn tpv_loss_perfect_planes_tend_to_zero() {
        let mut gt = LabelGrid::empty((2, 2, 2), 2);
        gt.set(0, 0, 0, 0);
        gt.set(1, 1, 1, 1);
        let spec = VoxelSpec::new((2, 2, 2), [0.0; 3], 1.0).unwrap();
        let policy = ClassWeightPolicy::uniform(2);
        // One weight slot per semantic class is enough for the planes, but
        // the shared policy carries the free-space slot too.
        let planes = plane_logits_for(&gt, BIG);
        let loss = tpv_loss(&planes, &gt, &spec, &policy).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn tpv_loss_requires_some_labeled_plane_cell() {
        let gt = LabelGrid::empty((2, 2, 2), 2);
        let spec = VoxelSpec::new((2, 2, 2), [0.0; 3], 1.0).unwrap();
        let policy = ClassWeightPolicy::uniform(2);
        let planes = [
            FeatureMap::zeros(2, 2, 2),
            FeatureMap::zeros(2, 2, 2),
            FeatureMap::zeros(2, 2, 2),
        ];
        assert!(matches!(
            tpv_loss(&planes, &gt, &spec, &policy),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn distance_weighting_prefers_far_cells() {
        // Two labeled columns at different ranges with one wrong.
        let mut gt = LabelGrid::empty((2, 1, 1), 2);
        gt.set(0, 0, 0, 0);
        gt.set(1, 0, 0, 1);
        let spec = VoxelSpec::new((2, 1, 1), [0.0; 3], 10.0).unwrap();
        let mut policy = ClassWeightPolicy::uniform(2);
        let mut planes = plane_logits_for(&gt, BIG);
        // Corrupt the far cell (x=1) of the XY plane.
        planes[0].pixel_mut(1, 0)[0] = BIG;
        planes[0].pixel_mut(1, 0)[1] = 0.0;
        let near_weighting = tpv_loss(&planes, &gt, &spec, &policy).unwrap();
        policy.distance_gamma = 4.0;
        let far_weighting = tpv_loss(&planes, &gt, &spec, &policy).unwrap();
        assert!(far_weighting > near_weighting);
    }

    #[test]
    fn ignore_voxels_never_influence_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut gt = LabelGrid::empty((2, 2, 2), 2);
        gt.set(0, 0, 0, 0);
        gt.set(0, 1, 0, 1);
        gt.set(1, 0, 0, IGNORE_LABEL);
        gt.set(1, 1, 1, IGNORE_LABEL);
        let mut pred = VoxelGrid::zeros((2, 2, 2), 3);
        for v in pred.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let policy = ClassWeightPolicy::uniform(2);
        let scales = [1, 2];
        let base = (
            scal_geo(&pred, &gt, &scales).unwrap(),
            scal_sem(&pred, &gt, &scales).unwrap(),
            voxel_ce(&pred, &gt, &policy).unwrap(),
        );
        // Perturb logits only at ignore voxels.
        let mut perturbed = pred.clone();
        for (i, &l) in gt.labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                for j in 0..3 {
                    perturbed.data[i * 3 + j] = rng.gen_range(-100.0..100.0);
                }
            }
        }
        let after = (
            scal_geo(&perturbed, &gt, &scales).unwrap(),
            scal_sem(&perturbed, &gt, &scales).unwrap(),
            voxel_ce(&perturbed, &gt, &policy).unwrap(),
        );
        assert_eq!(base.0.to_bits(), after.0.to_bits());
        assert_eq!(base.1.to_bits(), after.1.to_bits());
        assert_eq!(base.2.to_bits(), after.2.to_bits());
    }

    #[test]
    fn total_loss_weighting_and_linearity() {
        let parts = LossParts {
            scal_geo: 0.4,
            scal_sem: 0.35,
            voxel_ce: 0.25,
            distill_ce: 1.0,
            dice: 0.5,
            boundary: 0.5,
            tpv: 3.0,
        };
        let only_voxel = LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        assert!((total_loss(&parts, &only_voxel) - 1.0).abs() < 1e-12);

        let zeros = LossParts::default();
        assert_eq!(total_loss(&zeros, &LossWeights::default()), 0.0);

        // Grouped parts (1, 2, 3) with weights (0.5, 0.25, 0.25).
        let grouped = LossParts {
            scal_geo: 1.0,
            scal_sem: 0.0,
            voxel_ce: 0.0,
            distill_ce: 2.0,
            dice: 0.0,
            boundary: 0.0,
            tpv: 3.0,
        };
        let w = LossWeights {
            lambda1: 0.5,
            lambda2: 0.25,
            lambda3: 0.25,
        };
        assert!((total_loss(&grouped, &w) - 1.75).abs() < 1e-12);
    }

    proptest::proptest! {
        // Randomized corruptions never beat the perfect prediction.
        #[test]
        fn losses_nonnegative_and_minimal_at_perfect(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gt = LabelGrid::empty((2, 2, 2), 2);
            for l in gt.labels.iter_mut() {
                *l = match rng.gen_range(0..4) {
                    0 => 0,
                    1 => 1,
                    2 => EMPTY_LABEL,
                    _ => EMPTY_LABEL,
                };
            }
            gt.set(0, 0, 0, 0); // at least one occupied voxel
            let perfect = perfect_logits(&gt);
            let policy = ClassWeightPolicy::uniform(2);
            let lp = scal_geo(&perfect, &gt, &[1]).unwrap()
                + scal_sem(&perfect, &gt, &[1]).unwrap()
                + voxel_ce(&perfect, &gt, &policy).unwrap();
            let mut corrupted = perfect.clone();
            let cell = rng.gen_range(0..8);
            for j in 0..3 {
                corrupted.data[cell * 3 + j] = rng.gen_range(-5.0..5.0);
            }
            let lc = scal_geo(&corrupted, &gt, &[1]).unwrap()
                + scal_sem(&corrupted, &gt, &[1]).unwrap()
                + voxel_ce(&corrupted, &gt, &policy).unwrap();
            proptest::prop_assert!(lp >= 0.0 && lp.is_finite());
            proptest::prop_assert!(lc.is_finite());
            proptest::prop_assert!(lc + 1e-9 >= lp);
        }
    }
}
