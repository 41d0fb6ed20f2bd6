//! Tensor file format used repo-wide: a single JSON header line
//! `{"shape":[...],"dtype":"f32","order":"row-major"}` followed by the raw
//! little-endian 32-bit floats. Boolean masks are stored as 0.0/1.0.
//!
//! Voxel grids get a sidecar JSON (`<stem>.meta.json`) carrying the grid
//! geometry and, for label grids, the class-name list.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoolMask, FeatureMap, LabelGrid, VoxelGrid};
use crate::voxel::VoxelSpec;

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::shape(format!(
            "tensor shape {:?} holds {} values, got {}",
            shape,
            n,
            data.len()
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = TensorHeader {
        shape: shape.to_vec(),
        dtype: "f32".to_string(),
        order: "row-major".to_string(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::input(format!("cannot open tensor file {}: {}", path.display(), e))
    })?);
    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::input(format!(
                "{}: missing header line",
                path.display()
            )));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
    }
    let header: TensorHeader = serde_json::from_slice(&header_line)?;
    if header.dtype != "f32" {
        return Err(Error::input(format!(
            "{}: unsupported dtype {}",
            path.display(),
            header.dtype
        )));
    }
    if header.order != "row-major" {
        return Err(Error::input(format!(
            "{}: unsupported order {}",
            path.display(),
            header.order
        )));
    }
    let n: usize = header.shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(|e| {
        Error::input(format!(
            "{}: truncated payload for shape {:?}: {}",
            path.display(),
            header.shape,
            e
        ))
    })?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header.shape, data))
}

pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    write_tensor(path, &[map.height, map.width, map.channels], &map.data)
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let (shape, data) = read_tensor(path)?;
    match shape.as_slice() {
        [h, w, c] => FeatureMap::new(*h, *w, *c, data),
        [h, w] => FeatureMap::new(*h, *w, 1, data),
        _ => Err(Error::shape(format!(
            "{}: expected rank-2/3 tensor, got shape {:?}",
            path.display(),
            shape
        ))),
    }
}

pub fn write_mask(path: &Path, mask: &BoolMask) -> Result<()> {
    let data: Vec<f32> = mask
        .data
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    write_tensor(path, &[mask.height, mask.width], &data)
}

pub fn write_voxel_grid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let (x, y, z) = grid.dims;
    write_tensor(path, &[x, y, z, grid.channels], &grid.data)
}

pub fn read_voxel_grid(path: &Path) -> Result<VoxelGrid> {
    let (shape, data) = read_tensor(path)?;
    match shape.as_slice() {
        [x, y, z, c] => VoxelGrid::new((*x, *y, *z), *c, data),
        [x, y, z] => VoxelGrid::new((*x, *y, *z), 1, data),
        _ => Err(Error::shape(format!(
            "{}: expected rank-3/4 tensor, got shape {:?}",
            path.display(),
            shape
        ))),
    }
}

/// Sidecar metadata for voxel tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoxelMeta {
    pub dims: [usize; 3],
    pub origin: [f32; 3],
    pub cell_size: f32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

impl VoxelMeta {
    pub fn new(spec: &VoxelSpec, class_names: &[String]) -> Self {
        VoxelMeta {
            dims: [spec.dims.0, spec.dims.1, spec.dims.2],
            origin: spec.origin,
            cell_size: spec.cell_size,
            class_names: class_names.to_vec(),
        }
    }

    pub fn spec(&self) -> Result<VoxelSpec> {
        VoxelSpec::new(
            (self.dims[0], self.dims[1], self.dims[2]),
            self.origin,
            self.cell_size,
        )
    }
}

pub fn meta_path(tensor_path: &Path) -> std::path::PathBuf {
    let stem = tensor_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "tensor".to_string());
    tensor_path.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_label_grid(
    path: &Path,
    grid: &LabelGrid,
    spec: &VoxelSpec,
    class_names: &[String],
) -> Result<()> {
    let (x, y, z) = grid.dims;
    let data: Vec<f32> = grid.labels.iter().map(|&l| l as f32).collect();
    write_tensor(path, &[x, y, z], &data)?;
    let meta = VoxelMeta::new(spec, class_names);
    let f = File::create(meta_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &meta)?;
    Ok(())
}

pub fn read_label_grid(path: &Path, num_classes: usize) -> Result<LabelGrid> {
    let (shape, data) = read_tensor(path)?;
    let dims = match shape.as_slice() {
        [x, y, z] => (*x, *y, *z),
        _ => {
            return Err(Error::shape(format!(
                "{}: label grid expects rank-3 tensor, got {:?}",
                path.display(),
                shape
            )))
        }
    };
    let labels = data
        .iter()
        .map(|&v| {
            if v.is_finite() && v >= 0.0 && v <= u16::MAX as f32 {
                Ok(v as u16)
            } else {
                Err(Error::input(format!(
                    "{}: label value {} is not a valid class id",
                    path.display(),
                    v
                )))
            }
        })
        .collect::<Result<Vec<u16>>>()?;
    LabelGrid::new(dims, num_classes, labels)
}

pub fn read_voxel_meta(path: &Path) -> Result<VoxelMeta> {
    let f = File::open(path)
        .map_err(|e| Error::input(format!("cannot open {}: {}", path.display(), e)))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}
