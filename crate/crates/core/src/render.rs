//! PNG output: mix-up triptychs and label contour overlays.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Contour colours for labels 1..=4.
pub const CLASS_COLORS: [[u8; 3]; 4] = [[255, 64, 64], [64, 220, 64], [255, 220, 0], [64, 160, 255]];

const GAP: usize = 2;

/// An RGB canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Draws a grayscale image (values clamped to `[0, 1]`) at `col0`.
    fn blit_gray(&mut self, image: ArrayView2<'_, f64>, col0: usize) {
        for ((r, c), &v) in image.indexed_iter() {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            self.put(r, col0 + c, [g, g, g]);
        }
    }

    /// Colours the boundary pixels of every foreground label at `col0`.
    fn draw_contours(&mut self, labels: ArrayView2<'_, u8>, col0: usize) {
        for (r, c) in contour_pixels(labels) {
            let l = labels[[r, c]];
            self.put(r, col0 + c, CLASS_COLORS[(l - 1) as usize]);
        }
    }

    pub fn save(&self, path: &Path, text: &[(&str, String)]) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.clone())?;
        }
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.data)?;
        writer.finish()?;
        Ok(())
    }
}

/// Foreground pixels with at least one 4-neighbour of another label
/// (image borders count as a boundary).
pub fn contour_pixels(labels: ArrayView2<'_, u8>) -> Vec<(usize, usize)> {
    let (h, w) = labels.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let l = labels[[r, c]];
            if l == 0 || l > 4 {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || labels[[r - 1, c]] != l
                || labels[[r + 1, c]] != l
                || labels[[r, c - 1]] != l
                || labels[[r, c + 1]] != l;
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

fn panels(images: &[ArrayView2<'_, f64>]) -> Result<(RgbImage, Vec<usize>)> {
    let (h, w) = images[0].dim();
    if images.iter().any(|i| i.dim() != (h, w)) {
        return Err(Error::Shape("panel images differ in size".into()));
    }
    let n = images.len();
    let mut canvas = RgbImage::new(n * w + (n - 1) * GAP, h);
    let mut offsets = Vec::new();
    for (k, img) in images.iter().enumerate() {
        let col0 = k * (w + GAP);
        canvas.blit_gray(*img, col0);
        offsets.push(col0);
    }
    Ok((canvas, offsets))
}

/// `moving | fixed | mixed`, with λ stored in a `lambda` text chunk.
pub fn write_triptych(
    path: &Path,
    moving: ArrayView2<'_, f64>,
    fixed: ArrayView2<'_, f64>,
    mixed: ArrayView2<'_, f64>,
    lambda: f64,
) -> Result<()> {
    let (canvas, _) = panels(&[moving, fixed, mixed])?;
    canvas.save(
        path,
        &[
            ("lambda", format!("{lambda:.6}")),
            ("panels", "moving|fixed|mixed".to_string()),
        ],
    )
}

/// Ground-truth contours (left) next to predicted contours (right).
pub fn write_overlay(
    path: &Path,
    image: ArrayView2<'_, f64>,
    prediction: ArrayView2<'_, u8>,
    ground_truth: Option<ArrayView2<'_, u8>>,
) -> Result<()> {
    match ground_truth {
        Some(gt) => {
            if gt.dim() != image.dim() || prediction.dim() != image.dim() {
                return Err(Error::Shape("overlay inputs differ in size".into()));
            }
            let (mut canvas, off) = panels(&[image, image])?;
            canvas.draw_contours(gt, off[0]);
            canvas.draw_contours(prediction, off[1]);
            canvas.save(path, &[("panels", "ground_truth|prediction".to_string())])
        }
        None => {
            if prediction.dim() != image.dim() {
                return Err(Error::Shape("overlay inputs differ in size".into()));
            }
            let (mut canvas, off) = panels(&[image])?;
            canvas.draw_contours(prediction, off[0]);
            canvas.save(path, &[("panels", "prediction".to_string())])
        }
    }
}

/// Decoded PNG: RGB pixels (when 8-bit RGB) and all tEXt chunks.
#[derive(Debug, Clone)]
pub struct DecodedPng {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub text: Vec<(String, String)>,
}

pub fn read_png(path: &Path) -> Result<DecodedPng> {
    let file = std::io::BufReader::new(File::open(path)?);
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::DataFormat(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::DataFormat(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        pixels: buf,
        text,
    })
}

/// Grayscale rendering of a label map (for quick inspection).
pub fn label_preview(labels: ArrayView2<'_, u8>) -> Array2<f64> {
    labels.mapv(|l| l as f64 / 4.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn contour_of_square() {
        let mut l = Array2::<u8>::zeros((6, 6));
        l.slice_mut(ndarray::s![1..5, 1..5]).fill(1);
        let c = contour_pixels(l.view());
        assert_eq!(c.len(), 12);
        assert!(!c.contains(&(2, 2)));
    }

    #[test]
    fn triptych_roundtrip_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        let a = Array2::from_elem((8, 8), 0.5);
        write_triptych(&p, a.view(), a.view(), a.view(), 0.25).unwrap();
        let d = read_png(&p).unwrap();
        assert_eq!((d.width, d.height), (3 * 8 + 2 * GAP, 8));
        assert!(d.text.iter().any(|(k, v)| k == "lambda" && v == "0.250000"));
        assert_eq!(&d.pixels[..3], &[128, 128, 128]);
    }
}
