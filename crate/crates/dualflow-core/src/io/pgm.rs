//! Binary PGM (P5, maxval 255) image dumps: zero-dependency, bit-exact,
//! trivially diffable.

use std::path::{Path, PathBuf};

use crate::attack::AdvSample;
use crate::error::{CoreError, Result};
use crate::eval::scale_perturbation_unit;

/// [0,1] value to one byte, rounding half away from zero (0.5 -> 128).
pub fn pixel_to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(CoreError::Shape(format!(
            "{} pixels for {width}x{height}",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| pixel_to_u8(v)));
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path)?;
    // header: "P5" ws width ws height ws maxval single-ws raster
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    if magic != "P5" {
        return Err(CoreError::Format(format!("not a binary PGM (magic '{magic}')")));
    }
    let width: usize =
        token(&bytes)?.parse().map_err(|_| CoreError::Format("bad PGM width".into()))?;
    let height: usize =
        token(&bytes)?.parse().map_err(|_| CoreError::Format("bad PGM height".into()))?;
    let maxval: usize =
        token(&bytes)?.parse().map_err(|_| CoreError::Format("bad PGM maxval".into()))?;
    if maxval != 255 {
        return Err(CoreError::Format(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + width * height {
        return Err(CoreError::Format("truncated PGM raster".into()));
    }
    let pixels = bytes[pos..pos + width * height]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok((width, height, pixels))
}

/// Write the three standard views of one adversarial sample: the unclipped
/// output, the clipped output, and the perturbation rescaled to [0, 1].
/// Returns the three paths (pre, clipped, perturbation).
pub fn emit_visualization(
    sample: &AdvSample,
    side: usize,
    dir: &Path,
    stem: &str,
) -> Result<[PathBuf; 3]> {
    if sample.original.numel() != side * side {
        return Err(CoreError::Shape(format!(
            "sample of {} values is not {side}x{side}",
            sample.original.numel()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let pre_path = dir.join(format!("{stem}_preclip.pgm"));
    let clip_path = dir.join(format!("{stem}_clipped.pgm"));
    let pert_path = dir.join(format!("{stem}_perturbation.pgm"));
    write_pgm(&pre_path, side, side, sample.pre_clip.data())?;
    write_pgm(&clip_path, side, side, sample.clipped.data())?;
    let pert = scale_perturbation_unit(&sample.perturbation())?;
    write_pgm(&pert_path, side, side, pert.data())?;
    Ok([pre_path, clip_path, pert_path])
}
