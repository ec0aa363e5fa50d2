//! Dataset directory layout: `images/NNNN.pgm`, `masks/NNNN.pgm`, and a
//! `manifest` file of `image_path,mask_path` lines relative to the root.

use std::fs;
use std::io::Write;
use std::path::Path;

use abc_core::data::Sample;
use abc_core::pgm;

use crate::CliError;

pub fn write_dataset(dir: &Path, samples: &[Sample], h: usize, w: usize) -> Result<(), CliError> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| CliError::data(format!("{}: {e}", images.display())))?;
    fs::create_dir_all(&masks).map_err(|e| CliError::data(format!("{}: {e}", masks.display())))?;

    let mut manifest = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let image_rel = format!("images/{i:04}.pgm");
        let mask_rel = format!("masks/{i:04}.pgm");
        let image_bytes = pgm::encode(w, h, &pgm::quantize(&s.image));
        let mask_pixels: Vec<u8> = s.mask.iter().map(|&v| if v != 0.0 { 255 } else { 0 }).collect();
        let mask_bytes = pgm::encode(w, h, &mask_pixels);
        fs::write(dir.join(&image_rel), image_bytes)
            .map_err(|e| CliError::data(format!("{image_rel}: {e}")))?;
        fs::write(dir.join(&mask_rel), mask_bytes)
            .map_err(|e| CliError::data(format!("{mask_rel}: {e}")))?;
        writeln!(manifest, "{image_rel},{mask_rel}").unwrap();
    }
    fs::write(dir.join("manifest"), manifest)
        .map_err(|e| CliError::data(format!("manifest: {e}")))?;
    Ok(())
}

fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    pgm::decode(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn load_image(path: &Path) -> Result<(usize, usize, Vec<f32>), CliError> {
    let (w, h, pixels) = load_pgm(path)?;
    Ok((w, h, pgm::dequantize(&pixels)))
}

fn load_mask(path: &Path) -> Result<(usize, usize, Vec<f32>), CliError> {
    let (w, h, pixels) = load_pgm(path)?;
    let mut mask = Vec::with_capacity(pixels.len());
    for &p in &pixels {
        match p {
            0 => mask.push(0.0),
            255 => mask.push(1.0),
            other => {
                return Err(CliError::data(format!(
                    "{}: mask value {other} is neither 0 nor 255",
                    path.display()
                )))
            }
        }
    }
    Ok((w, h, mask))
}

/// Loads every manifest pair, checking that each image and mask matches
/// the expected resolution.
pub fn load_dataset(dir: &Path, h: usize, w: usize) -> Result<Vec<Sample>, CliError> {
    let manifest_path = dir.join("manifest");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::data(format!("{}: {e}", manifest_path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (image_rel, mask_rel) = line.split_once(',').ok_or_else(|| {
            CliError::data(format!(
                "{}: line {}: expected image_path,mask_path",
                manifest_path.display(),
                lineno + 1
            ))
        })?;
        let (iw, ih, image) = load_image(&dir.join(image_rel.trim()))?;
        let (mw, mh, mask) = load_mask(&dir.join(mask_rel.trim()))?;
        if (iw, ih) != (w, h) || (mw, mh) != (w, h) {
            return Err(CliError::data(format!(
                "{image_rel}: got {iw}x{ih} image / {mw}x{mh} mask, expected {w}x{h}"
            )));
        }
        samples.push(Sample { image, mask, seed: lineno as u64 });
    }
    if samples.is_empty() {
        return Err(CliError::data(format!(
            "{}: no samples listed",
            manifest_path.display()
        )));
    }
    Ok(samples)
}
