//! Bundled synthetic dataset: 10 classes of colored geometric shapes on
//! noisy backgrounds, 32x32 RGB. Deterministic per seed, so tests and the
//! acceptance gate need no downloads.

use ndarray::{Array4, ArrayView3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Result, VitqError};

pub const TOY_CLASSES: usize = 10;
pub const TOY_SIDE: usize = 32;

/// Pixel normalization applied after painting in [0, 1]:
/// `(v - NORM_MEAN) / NORM_STD`.
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.25;

pub fn class_name(label: usize) -> &'static str {
    match label {
        0 => "disc",
        1 => "ring",
        2 => "square",
        3 => "frame",
        4 => "triangle",
        5 => "hstripes",
        6 => "vstripes",
        7 => "cross",
        8 => "plus",
        9 => "checker",
        _ => "unknown",
    }
}

/// Labeled image set in the normalized pixel domain.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    /// `[n, 3, TOY_SIDE, TOY_SIDE]`, normalized.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f64> {
        self.images.index_axis(ndarray::Axis(0), i)
    }

    /// Deterministic stratified split; `test_frac` of each class goes to the
    /// second returned set.
    pub fn split(&self, test_frac: f64, seed: u64) -> Result<(ToyDataset, ToyDataset)> {
        if !(0.0..1.0).contains(&test_frac) {
            return Err(VitqError::Config(format!(
                "test fraction must be in [0, 1), got {test_frac}"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_5911);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for class in 0..TOY_CLASSES {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            // Fisher-Yates with the seeded generator
            for i in (1..members.len()).rev() {
                let j = rng.gen_range(0..=i);
                members.swap(i, j);
            }
            let n_test = (members.len() as f64 * test_frac).round() as usize;
            test_idx.extend_from_slice(&members[..n_test]);
            train_idx.extend_from_slice(&members[n_test..]);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        Ok((self.subset(&train_idx), self.subset(&test_idx)))
    }

    fn subset(&self, indices: &[usize]) -> ToyDataset {
        let side = self.images.dim().2;
        let mut images = Array4::<f64>::zeros((indices.len(), 3, side, side));
        let mut labels = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), k)
                .assign(&self.images.index_axis(ndarray::Axis(0), i));
            labels.push(self.labels[i]);
        }
        ToyDataset { images, labels }
    }
}

/// Base paint color per class (distinct hues help the tiny model).
fn class_color(label: usize) -> [f64; 3] {
    match label {
        0 => [0.90, 0.20, 0.20],
        1 => [0.20, 0.90, 0.25],
        2 => [0.20, 0.30, 0.90],
        3 => [0.90, 0.90, 0.20],
        4 => [0.90, 0.20, 0.90],
        5 => [0.20, 0.90, 0.90],
        6 => [0.95, 0.55, 0.15],
        7 => [0.95, 0.95, 0.95],
        8 => [0.55, 0.20, 0.85],
        _ => [0.95, 0.60, 0.70],
    }
}

/// Generate `per_class` samples of each of the 10 classes, interleaved
/// class-major, deterministically from `seed`.
pub fn generate_toy_dataset(per_class: usize, seed: u64) -> ToyDataset {
    let n = per_class * TOY_CLASSES;
    let s = TOY_SIDE;
    let mut images = Array4::<f64>::zeros((n, 3, s, s));
    let mut labels = Vec::with_capacity(n);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx = 0;
    for _ in 0..per_class {
        for class in 0..TOY_CLASSES {
            let mut img = images.index_axis_mut(ndarray::Axis(0), idx);
            paint_sample(&mut img, class, &mut rng);
            labels.push(class);
            idx += 1;
        }
    }
    // Normalize in place.
    images.mapv_inplace(|v| (v - NORM_MEAN) / NORM_STD);
    ToyDataset { images, labels }
}

fn paint_sample(img: &mut ndarray::ArrayViewMut3<f64>, class: usize, rng: &mut ChaCha20Rng) {
    let s = TOY_SIDE as i64;
    // Structured but classless background: a bilinear ramp between four
    // random corner intensities, a color cast, and pixel noise. Coherent
    // low-frequency content keeps patch statistics far from iid noise.
    let corners: [f64; 4] = [
        rng.gen_range(0.05..0.50),
        rng.gen_range(0.05..0.50),
        rng.gen_range(0.05..0.50),
        rng.gen_range(0.05..0.50),
    ];
    let cast: [f64; 3] = [
        rng.gen_range(-0.06..0.06),
        rng.gen_range(-0.06..0.06),
        rng.gen_range(-0.06..0.06),
    ];
    let denom = (s - 1) as f64;
    for y in 0..s {
        for x in 0..s {
            let fy = y as f64 / denom;
            let fx = x as f64 / denom;
            let ramp = corners[0] * (1.0 - fy) * (1.0 - fx)
                + corners[1] * (1.0 - fy) * fx
                + corners[2] * fy * (1.0 - fx)
                + corners[3] * fy * fx;
            for c in 0..3 {
                let noise = rng.gen_range(-0.06..0.06);
                img[[c, y as usize, x as usize]] = (ramp + cast[c] + noise).clamp(0.0, 1.0);
            }
        }
    }

    // Two small classless distractor blobs.
    for _ in 0..2 {
        let bx = rng.gen_range(3..s - 3);
        let by = rng.gen_range(3..s - 3);
        let br = rng.gen_range(2..=3i64);
        let bcol = [
            rng.gen_range(0.10..0.90),
            rng.gen_range(0.10..0.90),
            rng.gen_range(0.10..0.90),
        ];
        let bstr = rng.gen_range(0.30..0.50);
        for y in (by - br)..=(by + br) {
            for x in (bx - br)..=(bx + br) {
                if x < 0 || y < 0 || x >= s || y >= s {
                    continue;
                }
                if (x - bx).pow(2) + (y - by).pow(2) <= br * br {
                    for c in 0..3 {
                        let p = &mut img[[c, y as usize, x as usize]];
                        *p = (*p * (1.0 - bstr) + bcol[c] * bstr).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    // Shape color: the class hue survives only partially; a random blend
    // plus jitter keeps color a weak cue so shape must carry the label.
    let base = class_color(class);
    let mix = rng.gen_range(0.45..0.75);
    let rand_col = [
        rng.gen_range(0.15..0.95),
        rng.gen_range(0.15..0.95),
        rng.gen_range(0.15..0.95),
    ];
    let jitter = rng.gen_range(-0.08..0.08);
    let color: Vec<f64> = (0..3)
        .map(|c| (base[c] * mix + rand_col[c] * (1.0 - mix) + jitter).clamp(0.05, 1.0))
        .collect();
    // Small shape at a random position: the label evidence occupies only a
    // few of the sixteen patches, so attention has to find it.
    let r = rng.gen_range(6..=9i64);
    let cx = rng.gen_range(r + 2..s - r - 2);
    let cy = rng.gen_range(r + 2..s - r - 2);
    let phase = rng.gen_range(0..4);
    let shape_strength = rng.gen_range(0.55..0.95);

    let mut paint = |x: i64, y: i64, strength: f64| {
        let strength = strength * shape_strength;
        if x < 0 || y < 0 || x >= s || y >= s {
            return;
        }
        for c in 0..3 {
            let p = &mut img[[c, y as usize, x as usize]];
            *p = (*p * (1.0 - strength) + color[c] * strength).clamp(0.0, 1.0);
        }
    };

    match class {
        0 => {
            // filled disc
            for y in 0..s {
                for x in 0..s {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                        paint(x, y, 1.0);
                    }
                }
            }
        }
        1 => {
            // ring
            let inner = r - 2;
            for y in 0..s {
                for x in 0..s {
                    let d2 = (x - cx).pow(2) + (y - cy).pow(2);
                    if d2 <= r * r && d2 >= inner * inner {
                        paint(x, y, 1.0);
                    }
                }
            }
        }
        2 => {
            // filled square
            for y in (cy - r)..=(cy + r) {
                for x in (cx - r)..=(cx + r) {
                    paint(x, y, 1.0);
                }
            }
        }
        3 => {
            // hollow frame
            for y in (cy - r)..=(cy + r) {
                for x in (cx - r)..=(cx + r) {
                    let on_edge = (y - cy).abs() >= r - 2 || (x - cx).abs() >= r - 2;
                    if on_edge {
                        paint(x, y, 1.0);
                    }
                }
            }
        }
        4 => {
            // upward triangle
            for dy in 0..=(2 * r) {
                let y = cy - r + dy;
                let half = (dy * r) / (2 * r).max(1);
                for x in (cx - half)..=(cx + half) {
                    paint(x, y, 1.0);
                }
            }
        }
        5 => {
            // horizontally striped block, period 4
            for y in (cy - r)..=(cy + r) {
                if (y + phase) % 4 < 2 {
                    for x in (cx - r)..=(cx + r) {
                        paint(x, y, 1.0);
                    }
                }
            }
        }
        6 => {
            // vertically striped block, period 4
            for x in (cx - r)..=(cx + r) {
                if (x + phase) % 4 < 2 {
                    for y in (cy - r)..=(cy + r) {
                        paint(x, y, 1.0);
                    }
                }
            }
        }
        7 => {
            // X cross of width 3
            for y in 0..s {
                for x in 0..s {
                    let d1 = (x - cx) - (y - cy);
                    let d2 = (x - cx) + (y - cy);
                    if (d1.abs() <= 1 || d2.abs() <= 1)
                        && (x - cx).abs() <= r
                        && (y - cy).abs() <= r
                    {
                        paint(x, y, 1.0);
                    }
                }
            }
        }
        8 => {
            // plus of width 3
            for y in 0..s {
                for x in 0..s {
                    if ((x - cx).abs() <= 1 && (y - cy).abs() <= r)
                        || ((y - cy).abs() <= 1 && (x - cx).abs() <= r)
                    {
                        paint(x, y, 1.0);
                    }
                }
            }
        }
        _ => {
            // checkered block, cell 2
            for y in (cy - r)..=(cy + r) {
                for x in (cx - r)..=(cx + r) {
                    let cell = ((x - cx).div_euclid(2) + (y - cy).div_euclid(2) + phase as i64)
                        .rem_euclid(2);
                    if cell == 0 {
                        paint(x, y, 1.0);
                    }
                }
            }
        }
    }
}
