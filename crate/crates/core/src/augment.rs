//! Preprocessing and augmentation: resize, crop, flip, normalize.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageError, ImageRgb8};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub target_size: usize,
    /// Shorter side length after the initial resize.
    pub resize_shorter: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub hflip_probability: f64,
    pub mode: Mode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            resize_shorter: 256,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            hflip_probability: 0.5,
            mode: Mode::Eval,
        }
    }
}

impl AugmentConfig {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            ..Self::default()
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.target_size == 0 {
            return Err("target_size must be positive".into());
        }
        if self.resize_shorter < self.target_size {
            return Err(format!(
                "resize_shorter {} is smaller than target_size {}",
                self.resize_shorter, self.target_size
            ));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err("std components must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err("hflip_probability must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Source coordinate for each destination index under half-pixel centers.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

pub fn resize_bilinear(image: &ImageRgb8, new_width: usize, new_height: usize) -> ImageRgb8 {
    assert!(new_width > 0 && new_height > 0, "resize to an empty image");
    if (new_width, new_height) == (image.width(), image.height()) {
        return image.clone();
    }
    let xs = sample_positions(image.width(), new_width);
    let ys = sample_positions(image.height(), new_height);
    let src = image.pixels();
    let stride = image.width() * 3;
    let mut out = Vec::with_capacity(new_width * new_height * 3);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (&src[y0 * stride..][..stride], &src[y1 * stride..][..stride]);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = r0[x0 * 3 + c] as f32 * (1.0 - fx) + r0[x1 * 3 + c] as f32 * fx;
                let bottom = r1[x0 * 3 + c] as f32 * (1.0 - fx) + r1[x1 * 3 + c] as f32 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRgb8::new(new_width, new_height, out).expect("dimensions are positive")
}

pub fn crop(image: &ImageRgb8, x: usize, y: usize, w: usize, h: usize) -> Result<ImageRgb8, ImageError> {
    if w == 0 || h == 0 || x + w > image.width() || y + h > image.height() {
        return Err(ImageError::Bounds {
            x,
            y,
            w,
            h,
            width: image.width(),
            height: image.height(),
        });
    }
    let stride = image.width() * 3;
    let mut out = Vec::with_capacity(w * h * 3);
    for row in y..y + h {
        out.extend_from_slice(&image.pixels()[row * stride + x * 3..row * stride + (x + w) * 3]);
    }
    ImageRgb8::new(w, h, out)
}

pub fn hflip(image: &ImageRgb8) -> ImageRgb8 {
    let w = image.width();
    let mut out = Vec::with_capacity(image.pixels().len());
    for row in image.pixels().chunks_exact(w * 3) {
        for px in row.chunks_exact(3).rev() {
            out.extend_from_slice(px);
        }
    }
    ImageRgb8::new(w, image.height(), out).expect("same dimensions")
}

/// Mirrors the image with the given probability. One uniform draw is always
/// consumed so that the RNG stream does not depend on the outcome.
pub fn random_hflip<R: Rng + ?Sized>(
    image: &ImageRgb8,
    rng: &mut R,
    probability: f64,
) -> (ImageRgb8, bool) {
    let draw: f64 = rng.random();
    if draw < probability {
        (hflip(image), true)
    } else {
        (image.clone(), false)
    }
}

/// Channel-planar `[3,H,W]` tensor of `(byte/255 − mean_c) / std_c`.
pub fn normalize(image: &ImageRgb8, config: &AugmentConfig) -> Tensor<f32> {
    let (w, h) = (image.width(), image.height());
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in image.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = (px[c] as f32 / 255.0 - config.mean[c]) / config.std[c];
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent shape")
}

/// Where the final square crop sits in the resized image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub resized_width: usize,
    pub resized_height: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub flipped: bool,
}

impl CropWindow {
    /// Maps a normalized `(cx, cy, w, h)` box from crop space to source-image space.
    pub fn crop_to_image(&self, b: [f32; 4]) -> [f32; 4] {
        let (rw, rh, s) = (
            self.resized_width as f32,
            self.resized_height as f32,
            self.size as f32,
        );
        let cx = if self.flipped { 1.0 - b[0] } else { b[0] };
        [
            (cx * s + self.x as f32) / rw,
            (b[1] * s + self.y as f32) / rh,
            b[2] * s / rw,
            b[3] * s / rh,
        ]
    }

    /// Inverse of [`CropWindow::crop_to_image`].
    pub fn image_to_crop(&self, b: [f32; 4]) -> [f32; 4] {
        let (rw, rh, s) = (
            self.resized_width as f32,
            self.resized_height as f32,
            self.size as f32,
        );
        let cx = (b[0] * rw - self.x as f32) / s;
        [
            if self.flipped { 1.0 - cx } else { cx },
            (b[1] * rh - self.y as f32) / s,
            b[2] * rw / s,
            b[3] * rh / s,
        ]
    }
}

/// Dimensions after scaling the shorter side to `shorter`.
pub fn shorter_side_dims(width: usize, height: usize, shorter: usize) -> (usize, usize) {
    if width <= height {
        let h = (height as f64 * shorter as f64 / width as f64).round() as usize;
        (shorter, h.max(shorter))
    } else {
        let w = (width as f64 * shorter as f64 / height as f64).round() as usize;
        (w.max(shorter), shorter)
    }
}

/// Full preprocessing returning the crop placement alongside the tensor.
///
/// Train: shorter side to `resize_shorter`, random square crop, random
/// horizontal flip, normalize. Eval: same resize, center crop, normalize.
pub fn prepare_with_window<R: Rng + ?Sized>(
    image: &ImageRgb8,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<f32>, CropWindow), ImageError> {
    let (rw, rh) = shorter_side_dims(image.width(), image.height(), config.resize_shorter);
    let resized = resize_bilinear(image, rw, rh);
    let size = config.target_size;
    let (x, y) = match config.mode {
        Mode::Train => (rng.random_range(0..=rw - size), rng.random_range(0..=rh - size)),
        Mode::Eval => ((rw - size) / 2, (rh - size) / 2),
    };
    let cropped = crop(&resized, x, y, size, size)?;
    let (cropped, flipped) = match config.mode {
        Mode::Train => random_hflip(&cropped, rng, config.hflip_probability),
        Mode::Eval => (cropped, false),
    };
    let window = CropWindow {
        resized_width: rw,
        resized_height: rh,
        x,
        y,
        size,
        flipped,
    };
    Ok((normalize(&cropped, config), window))
}

pub fn prepare<R: Rng + ?Sized>(
    image: &ImageRgb8,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor<f32>, ImageError> {
    prepare_with_window(image, config, rng).map(|(t, _)| t)
}

/// Eval-mode preprocessing; a pure function of image and config.
pub fn prepare_eval(image: &ImageRgb8, config: &AugmentConfig) -> Result<(Tensor<f32>, CropWindow), ImageError> {
    let eval = config.with_mode(Mode::Eval);
    // Eval mode draws nothing from the generator.
    prepare_with_window(image, &eval, &mut ChaCha8Rng::seed_from_u64(0))
}
