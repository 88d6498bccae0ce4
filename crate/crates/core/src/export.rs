//! PNG output for maps and label masks.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{shape_err, DisaError, Result};

/// Fixed 16-colour palette; labels wrap around it.
pub const PALETTE: [[u8; 3]; 16] = [
    [128, 64, 128],
    [70, 130, 180],
    [107, 142, 35],
    [220, 20, 60],
    [250, 170, 30],
    [0, 0, 142],
    [152, 251, 152],
    [190, 153, 153],
    [255, 255, 255],
    [70, 70, 70],
    [244, 35, 232],
    [0, 80, 100],
    [119, 11, 32],
    [102, 102, 156],
    [0, 0, 0],
    [220, 220, 0],
];

fn encoder(path: &Path, w: usize, h: usize) -> Result<png::Encoder<'static, BufWriter<File>>> {
    let file = File::create(path).map_err(|e| DisaError::io(path, e))?;
    let w32 = u32::try_from(w).map_err(|_| shape_err("image too wide"))?;
    let h32 = u32::try_from(h).map_err(|_| shape_err("image too tall"))?;
    Ok(png::Encoder::new(BufWriter::new(file), w32, h32))
}

fn finish(path: &Path, mut enc: png::Encoder<'static, BufWriter<File>>, data: &[u8]) -> Result<()> {
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| DisaError::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(data).map_err(io)?;
    writer.finish().map_err(io)
}

/// Min-max scale to 0..=255. A constant map becomes all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 && span.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Nearest-neighbour enlargement of a row-major `h × w` buffer.
pub fn upscale<T: Copy>(data: &[T], h: usize, w: usize, factor: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len() * factor * factor);
    for y in 0..h * factor {
        for x in 0..w * factor {
            out.push(data[(y / factor) * w + x / factor]);
        }
    }
    out
}

/// Row-major `h × w` real map as an 8-bit grayscale image.
pub fn write_gray_png(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(shape_err(format!("{} values for a {h}x{w} image", values.len())));
    }
    let mut enc = encoder(path, w, h)?;
    enc.set_color(png::ColorType::Grayscale);
    finish(path, enc, &to_gray(values))
}

/// Row-major label mask as an indexed-colour image over [`PALETTE`].
pub fn write_label_png(path: &Path, labels: &[usize], h: usize, w: usize) -> Result<()> {
    if labels.len() != h * w {
        return Err(shape_err(format!("{} labels for a {h}x{w} image", labels.len())));
    }
    let mut enc = encoder(path, w, h)?;
    enc.set_color(png::ColorType::Indexed);
    enc.set_palette(PALETTE.iter().flatten().copied().collect::<Vec<u8>>());
    let data: Vec<u8> = labels.iter().map(|&l| (l % PALETTE.len()) as u8).collect();
    finish(path, enc, &data)
}
