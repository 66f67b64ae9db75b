//! Binary PGM/PPM writers for predicted masks and overlays.

use std::io::{self, Write};
use std::path::Path;

use pgma_core::episode::Mask;
use pgma_core::Tensor;

pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, pixels: &[u8]) -> io::Result<()> {
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)
}

pub fn write_ppm<W: Write>(mut w: W, width: usize, height: usize, rgb: &[u8]) -> io::Result<()> {
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)
}

/// Foreground 255, background 0.
pub fn save_mask(path: impl AsRef<Path>, mask: &Mask) -> io::Result<()> {
    let px: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    write_pgm(std::fs::File::create(path)?, mask.width, mask.height, &px)
}

/// A grey rendering of `backdrop` (values in `[0, 1]`) with the predicted
/// foreground tinted red and ground-truth boundaries, when given, in green.
pub fn overlay(backdrop: &Tensor<f32>, pred: &Mask, gt: Option<&Mask>) -> Vec<u8> {
    let (h, w) = (pred.height, pred.width);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let g = (backdrop.data()[y * w + x].clamp(0.0, 1.0) * 160.0) as u8;
            let edge = gt.is_some_and(|m| {
                m.get(y, x) && [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || !m.get(yy as usize, xx as usize)
                })
            });
            let px = if edge {
                [0, 255, 0]
            } else if pred.get(y, x) {
                [g / 2 + 127, g / 2, g / 2]
            } else {
                [g, g, g]
            };
            rgb.extend_from_slice(&px);
        }
    }
    rgb
}

pub fn save_overlay(path: impl AsRef<Path>, backdrop: &Tensor<f32>, pred: &Mask, gt: Option<&Mask>) -> io::Result<()> {
    write_ppm(std::fs::File::create(path)?, pred.width, pred.height, &overlay(backdrop, pred, gt))
}
