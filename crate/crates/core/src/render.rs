//! Signed heatmaps: normalization, diverging colormap, PPM export, overlay.
//!
//! Scores are scaled by the map's own largest magnitude, so colors compare
//! within one image only. Positive is red, negative blue, zero white.

use std::path::Path;
use std::sync::Once;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Rgb = [u8; 3];

/// `S / max|S|`; an all-zero map stays all-zero.
pub fn normalize(s: &Tensor) -> Tensor {
    let scale = s.max_abs();
    if scale == 0.0 {
        return s.map(|_| 0.0);
    }
    s.map(|v| v / scale)
}

fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

static CLAMP_WARNING: Once = Once::new();

/// Diverging white-centered ramp. Inputs outside `[-1, 1]` are clamped.
pub fn colormap(v: f64) -> Rgb {
    let v = if (-1.0..=1.0).contains(&v) {
        v
    } else {
        CLAMP_WARNING.call_once(|| log::warn!("colormap input {v} outside [-1, 1]; clamping"));
        if v.is_nan() {
            0.0
        } else {
            v.clamp(-1.0, 1.0)
        }
    };
    if v >= 0.0 {
        let c = round_half_up(255.0 * (1.0 - v));
        [255, c, c]
    } else {
        let c = round_half_up(255.0 * (1.0 + v));
        [c, c, 255]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major normalized scores in `[-1, 1]`.
    pub scores: Vec<f64>,
    pub pixels: Vec<Rgb>,
}

/// Interprets a map as `(height, width)`: rank 2 as is, rank 3 with a
/// single leading channel, rank 1 as one row.
fn plane_dims(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        [w] => Ok((1, *w)),
        [h, w] | [1, h, w] => Ok((*h, *w)),
        other => Err(Error::InvalidArgument(format!(
            "heatmap needs a single-channel spatial map, got shape {other:?}"
        ))),
    }
}

impl Heatmap {
    pub fn from_map(map: &Tensor) -> Result<Self> {
        let (height, width) = plane_dims(map)?;
        let scores = normalize(map).into_data();
        let pixels = scores.iter().map(|&v| colormap(v)).collect();
        Ok(Self {
            width,
            height,
            scores,
            pixels,
        })
    }

    /// Nearest-neighbor resize.
    pub fn resized(&self, height: usize, width: usize) -> Heatmap {
        let mut scores = Vec::with_capacity(height * width);
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = r * self.height / height;
            for c in 0..width {
                let sc = c * self.width / width;
                let i = sr * self.width + sc;
                scores.push(self.scores[i]);
                pixels.push(self.pixels[i]);
            }
        }
        Heatmap {
            width,
            height,
            scores,
            pixels,
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        ppm_bytes(self.width, self.height, &self.pixels)
    }
}

/// Binary PPM (P6, maxval 255).
pub fn ppm_bytes(width: usize, height: usize, pixels: &[Rgb]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(pixels.len() * 3);
    for p in pixels {
        out.extend_from_slice(p);
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn render_heatmap(map: &Tensor, out_path: impl AsRef<Path>) -> Result<()> {
    write_file(out_path.as_ref(), &Heatmap::from_map(map)?.to_ppm())
}

/// `[3, H, W]` (or `[1, H, W]` grayscale) image with values in `[0, 1]`.
fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match image.shape() {
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        other => {
            return Err(Error::InvalidArgument(format!(
                "image must be shaped [3, H, W] or [1, H, W], got {other:?}"
            )))
        }
    };
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
    }
    Ok((c, h, w))
}

fn image_pixel(image: &Tensor, channels: usize, plane: usize, i: usize) -> [f64; 3] {
    let d = image.data();
    if channels == 1 {
        [d[i]; 3]
    } else {
        [d[i], d[plane + i], d[2 * plane + i]]
    }
}

/// The image alone, quantized the same way [`overlay_pixels`] does.
pub fn image_pixels(image: &Tensor) -> Result<Vec<Rgb>> {
    let (c, h, w) = image_dims(image)?;
    Ok((0..h * w)
        .map(|i| image_pixel(image, c, h * w, i).map(|v| round_half_up(255.0 * v)))
        .collect())
}

/// Per channel `alpha * image + (1 - alpha) * heatmap`, with the heatmap
/// nearest-neighbor upsampled to the image size.
pub fn overlay_pixels(image: &Tensor, map: &Tensor, alpha: f64) -> Result<(usize, usize, Vec<Rgb>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (c, h, w) = image_dims(image)?;
    let heat = Heatmap::from_map(map)?;
    if heat.height > h || heat.width > w {
        return Err(Error::shape("overlay map", &[h, w], &[heat.height, heat.width]));
    }
    let heat = heat.resized(h, w);
    let pixels = heat
        .pixels
        .iter()
        .enumerate()
        .map(|(i, hp)| {
            let ip = image_pixel(image, c, h * w, i);
            std::array::from_fn(|k| {
                round_half_up(alpha * 255.0 * ip[k] + (1.0 - alpha) * f64::from(hp[k]))
            })
        })
        .collect();
    Ok((w, h, pixels))
}

pub fn overlay(image: &Tensor, map: &Tensor, alpha: f64, out_path: impl AsRef<Path>) -> Result<()> {
    let (w, h, pixels) = overlay_pixels(image, map, alpha)?;
    write_file(out_path.as_ref(), &ppm_bytes(w, h, &pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let n = normalize(&Tensor::from_vec(vec![2.0, -4.0, 0.0]));
        assert_eq!(n.data(), &[0.5, -1.0, 0.0]);
        assert_eq!(normalize(&Tensor::zeros(&[3])).data(), &[0.0; 3]);
        let scaled = normalize(&Tensor::from_vec(vec![6.0, -12.0, 0.0]));
        assert_eq!(scaled, n);
    }

    #[test]
    fn colormap_table() {
        assert_eq!(colormap(0.0), [255, 255, 255]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
        assert_eq!(colormap(-1.0), [0, 0, 255]);
        assert_eq!(colormap(0.5), [255, 128, 128]);
        assert_eq!(colormap(-0.5), [128, 128, 255]);
        assert_eq!(colormap(3.0), [255, 0, 0]);
        assert_eq!(colormap(-7.0), [0, 0, 255]);
    }

    #[test]
    fn colormap_is_monotone() {
        let mut prev = colormap(-1.0);
        for i in 1..=200 {
            let v = -1.0 + i as f64 / 100.0;
            let cur = colormap(v);
            if v <= 0.0 {
                assert_eq!(cur[2], 255);
                assert!(cur[0] >= prev[0] && cur[1] >= prev[1]);
            } else {
                assert_eq!(cur[0], 255);
                assert!(cur[1] <= prev[1] && cur[2] <= prev[2]);
            }
            prev = cur;
        }
    }

    #[test]
    fn nearest_neighbor_upsampling() {
        let heat = Heatmap::from_map(&Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
        let big = heat.resized(2, 4);
        assert_eq!(big.scores, vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn rejects_bad_shapes_and_alpha() {
        assert!(Heatmap::from_map(&Tensor::zeros(&[2, 2, 2])).is_err());
        let img = Tensor::zeros(&[3, 2, 2]);
        let map = Tensor::zeros(&[2, 2]);
        assert!(overlay_pixels(&img, &map, 1.5).is_err());
        assert!(overlay_pixels(&Tensor::zeros(&[2, 2, 2]), &map, 0.5).is_err());
        assert!(overlay_pixels(&img, &Tensor::zeros(&[3, 3]), 0.5).is_err());
        assert!(overlay_pixels(&Tensor::full(&[3, 2, 2], 2.0), &map, 0.5).is_err());
    }
}
