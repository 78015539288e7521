//! Stochastic view generation in pixel space.
//!
//! Pseudo-labels only work if two views of the same image look different but
//! stay recognizable, so every view runs through random resized crop, color
//! distortion, and Gaussian blur. All randomness comes from the caller's RNG
//! stream — two calls with identically seeded generators produce identical
//! views no matter where or when they run.

use rand::seq::SliceRandom;
use rand::Rng;

/// Grayscale projection weights (ITU-R BT.601 luma).
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A 3-channel image in CHW layout with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    /// `3 * h * w` values, channel-major.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; 3 * h * w] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * h * w);
        Self { h, w, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// RGB triple at one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Knobs for the view pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Crop area fraction range `(lo, hi]` of the source image.
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Crop aspect-ratio range; sampled log-uniformly.
    pub aspect_lo: f64,
    pub aspect_hi: f64,
    /// Color distortion strength `s`; jitter factors span `[1 - 0.8s, 1 + 0.8s]`.
    pub color_strength: f64,
    pub grayscale_prob: f64,
    pub blur_sigma_lo: f64,
    pub blur_sigma_hi: f64,
    pub blur_prob: f64,
    /// Views generated per image by [`make_views`] when no count is given.
    pub views: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_lo: 0.2,
            scale_hi: 1.0,
            aspect_lo: 3.0 / 4.0,
            aspect_hi: 4.0 / 3.0,
            color_strength: 0.5,
            grayscale_prob: 0.2,
            blur_sigma_lo: 0.1,
            blur_sigma_hi: 2.0,
            blur_prob: 0.5,
            views: 2,
        }
    }
}

impl AugmentConfig {
    /// A configuration under which the whole pipeline is the identity map.
    pub fn identity() -> Self {
        Self {
            scale_lo: 1.0,
            scale_hi: 1.0,
            aspect_lo: 1.0,
            aspect_hi: 1.0,
            color_strength: 0.0,
            grayscale_prob: 0.0,
            blur_sigma_lo: 0.1,
            blur_sigma_hi: 2.0,
            blur_prob: 0.0,
            views: 1,
        }
    }
}

/// Bilinear sample with half-pixel centers, clamped to the crop window.
fn bilinear(img: &Image, c: usize, y: f64, x: f64, y_min: usize, y_max: usize, x_min: usize, x_max: usize) -> f64 {
    let y = y.clamp(y_min as f64, y_max as f64);
    let x = x.clamp(x_min as f64, x_max as f64);
    let y0 = (y.floor() as usize).min(y_max);
    let x0 = (x.floor() as usize).min(x_max);
    let y1 = (y0 + 1).min(y_max);
    let x1 = (x0 + 1).min(x_max);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Crop a random region and resize it back to the full image size.
///
/// The region's area fraction comes from the scale range and its aspect ratio
/// is log-uniform over the aspect range. After ten draws that do not fit, the
/// fallback is a centered square crop with edge `min(h, w)`.
pub fn random_resized_crop<R: Rng>(img: &Image, rng: &mut R, cfg: &AugmentConfig) -> Image {
    let (h, w) = (img.h, img.w);
    let mut region = None;
    for _ in 0..10 {
        let area = h as f64 * w as f64 * rng.random_range(cfg.scale_lo..=cfg.scale_hi);
        let ratio = rng.random_range(cfg.aspect_lo.ln()..=cfg.aspect_hi.ln()).exp();
        let cw = (area * ratio).sqrt().round() as usize;
        let ch = (area / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            region = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = region.unwrap_or_else(|| {
        let edge = h.min(w);
        ((h - edge) / 2, (w - edge) / 2, edge, edge)
    });

    let mut out = Image::new(h, w);
    let (y_max, x_max) = (top + ch - 1, left + cw - 1);
    for c in 0..3 {
        for y in 0..h {
            let src_y = top as f64 + (y as f64 + 0.5) * ch as f64 / h as f64 - 0.5;
            for x in 0..w {
                let src_x = left as f64 + (x as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
                out.set(c, y, x, bilinear(img, c, src_y, src_x, top, y_max, left, x_max));
            }
        }
    }
    out.clamp01();
    out
}

fn apply_brightness(img: &mut Image, factor: f64) {
    for v in &mut img.data {
        *v *= factor;
    }
    img.clamp01();
}

fn apply_contrast(img: &mut Image, factor: f64) {
    // Blend against the mean luma of the whole image.
    let hw = (img.h * img.w) as f64;
    let mut mean = 0.0;
    for y in 0..img.h {
        for x in 0..img.w {
            let p = img.pixel(y, x);
            mean += LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
        }
    }
    mean /= hw;
    for v in &mut img.data {
        *v = mean + factor * (*v - mean);
    }
    img.clamp01();
}

fn apply_saturation(img: &mut Image, factor: f64) {
    // Blend each pixel against its own luma.
    for y in 0..img.h {
        for x in 0..img.w {
            let p = img.pixel(y, x);
            let luma = LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
            for c in 0..3 {
                img.set(c, y, x, luma + factor * (p[c] - luma));
            }
        }
    }
    img.clamp01();
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Rotate every pixel's hue by `delta` (fraction of the full color circle).
fn apply_hue(img: &mut Image, delta: f64) {
    if delta == 0.0 {
        return;
    }
    for y in 0..img.h {
        for x in 0..img.w {
            let p = img.pixel(y, x);
            let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            let (r, g, b) = hsv_to_rgb(h + delta, s, v);
            img.set(0, y, x, r);
            img.set(1, y, x, g);
            img.set(2, y, x, b);
        }
    }
    img.clamp01();
}

fn apply_grayscale(img: &mut Image) {
    for y in 0..img.h {
        for x in 0..img.w {
            let p = img.pixel(y, x);
            let luma = LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
            for c in 0..3 {
                img.set(c, y, x, luma);
            }
        }
    }
}

/// Brightness, contrast, saturation, and hue jitter in random order, then a
/// chance of dropping to grayscale. Strength `s` scales every jitter range.
pub fn color_distort<R: Rng>(img: &Image, rng: &mut R, cfg: &AugmentConfig) -> Image {
    let s = cfg.color_strength;
    let lo = (1.0 - 0.8 * s).max(0.0);
    let hi = 1.0 + 0.8 * s;
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut out = img.clone();
    for op in order {
        match op {
            0 => apply_brightness(&mut out, rng.random_range(lo..=hi)),
            1 => apply_contrast(&mut out, rng.random_range(lo..=hi)),
            2 => apply_saturation(&mut out, rng.random_range(lo..=hi)),
            _ => apply_hue(&mut out, rng.random_range(-0.2 * s..=0.2 * s)),
        }
    }
    if rng.random::<f64>() < cfg.grayscale_prob {
        apply_grayscale(&mut out);
    }
    out
}

/// Reflect an out-of-range coordinate back into `[0, n)` without repeating
/// the border sample (`-1 -> 1`, `n -> n - 2`).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> =
        (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Blur with a separable Gaussian (radius `ceil(3 sigma)`, reflect padding),
/// with probability `blur_prob`; sigma is uniform over the configured range.
pub fn gaussian_blur<R: Rng>(img: &Image, rng: &mut R, cfg: &AugmentConfig) -> Image {
    if rng.random::<f64>() >= cfg.blur_prob {
        return img.clone();
    }
    let sigma = rng.random_range(cfg.blur_sigma_lo..=cfg.blur_sigma_hi);
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (h, w) = (img.h, img.w);
    // Horizontal pass, then vertical.
    let mut mid = Image::new(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sx = reflect(x as isize + j as isize - radius, w);
                    acc += kv * img.get(c, y, sx);
                }
                mid.set(c, y, x, acc);
            }
        }
    }
    let mut out = Image::new(h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - radius, h);
                    acc += kv * mid.get(c, sy, x);
                }
                out.set(c, y, x, acc);
            }
        }
    }
    out.clamp01();
    out
}

/// One full pass of the pipeline: crop, color, blur.
pub fn make_view<R: Rng>(img: &Image, rng: &mut R, cfg: &AugmentConfig) -> Image {
    let cropped = random_resized_crop(img, rng, cfg);
    let colored = color_distort(&cropped, rng, cfg);
    gaussian_blur(&colored, rng, cfg)
}

/// `v` independent views of `img`, drawn sequentially from one RNG stream.
pub fn make_views<R: Rng>(img: &Image, rng: &mut R, v: usize, cfg: &AugmentConfig) -> Vec<Image> {
    (0..v).map(|_| make_view(img, rng, cfg)).collect()
}
