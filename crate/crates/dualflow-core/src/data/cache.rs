//! Binary dataset cache: header {magic "DFDS", version u32, seed u64, n u32,
//! K u32, H u32, W u32}, then n*H*W raw little-endian f32 values and n u8
//! labels. The CLI regenerates the file when absent.

use std::path::Path;

use super::LabeledData;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DFDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub seed: u64,
    pub n: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

pub fn write_dataset_cache(path: &Path, data: &LabeledData, header: &DatasetHeader) -> Result<()> {
    if header.n != data.len()
        || header.classes != data.classes
        || header.height * header.width != data.dim()
    {
        return Err(CoreError::Shape(format!(
            "header {header:?} does not describe a {}x{} dataset with {} classes",
            data.len(),
            data.dim(),
            data.classes
        )));
    }
    if data.classes > u8::MAX as usize + 1 {
        return Err(CoreError::InvalidArgument("more than 256 classes".into()));
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&header.seed.to_le_bytes());
    bytes.extend_from_slice(&(header.n as u32).to_le_bytes());
    bytes.extend_from_slice(&(header.classes as u32).to_le_bytes());
    bytes.extend_from_slice(&(header.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(header.width as u32).to_le_bytes());
    for &v in data.inputs.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend(data.labels.iter().map(|&l| l as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset_cache(path: &Path) -> Result<(LabeledData, DatasetHeader)> {
    let bytes = std::fs::read(path)?;
    let need = |n: usize, pos: usize, what: &str| -> Result<()> {
        if pos + n > bytes.len() {
            Err(CoreError::Format(format!("truncated dataset cache at {what}")))
        } else {
            Ok(())
        }
    };
    need(4, 0, "magic")?;
    if &bytes[0..4] != MAGIC {
        return Err(CoreError::Format("bad dataset cache magic".into()));
    }
    need(4, 4, "version")?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported dataset cache version {version}")));
    }
    need(8 + 16, 8, "header")?;
    let seed = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rd_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let n = rd_u32(16) as usize;
    let classes = rd_u32(20) as usize;
    let height = rd_u32(24) as usize;
    let width = rd_u32(28) as usize;
    let dim = height * width;
    let data_start = 32;
    let labels_start = data_start + n * dim * 4;
    need(n * dim * 4, data_start, "image data")?;
    need(n, labels_start, "labels")?;
    if bytes.len() != labels_start + n {
        return Err(CoreError::Format("trailing bytes in dataset cache".into()));
    }
    let values: Vec<f32> = bytes[data_start..labels_start]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels: Vec<usize> = bytes[labels_start..].iter().map(|&b| b as usize).collect();
    let data = LabeledData::new(Tensor::new(vec![n, dim], values)?, labels, classes)?;
    Ok((data, DatasetHeader { seed, n, classes, height, width }))
}
