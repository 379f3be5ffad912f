//! Deterministic procedural image source.
//!
//! Each of the 10 classes is a distinct (shape, hue) pair: shape k mod 5
//! (disk, square, triangle, ring, cross) drawn in hue band (k + 0.5)/10,
//! with seeded jitter in position, scale, and rotation plus additive
//! Gaussian pixel noise. Every image is a pure function of
//! (class_id, index, seed).

use crate::datasrc::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::nnkit::rng::Rng;
use crate::nnkit::tensor::Tensor;

pub const CLASS_NAMES: [&str; 10] = [
    "ruby", "amber", "lemon", "moss", "jade", "teal", "azure", "violet", "orchid", "rose",
];

pub const IMG: usize = 32;
const NOISE_STD: f32 = 0.05;

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub(crate) fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn inside_shape(shape: usize, px: f32, py: f32, radius: f32) -> bool {
    match shape {
        0 => px * px + py * py <= radius * radius,
        1 => px.abs().max(py.abs()) <= 0.8 * radius,
        2 => {
            // equilateral triangle, circumradius `radius`
            let v = [
                (0.0f32, radius),
                (-0.866 * radius, -0.5 * radius),
                (0.866 * radius, -0.5 * radius),
            ];
            let mut sign = 0.0f32;
            for k in 0..3 {
                let (ax, ay) = v[k];
                let (bx, by) = v[(k + 1) % 3];
                let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                if k == 0 {
                    sign = cross;
                } else if cross * sign < 0.0 {
                    return false;
                }
            }
            true
        }
        3 => {
            let d2 = px * px + py * py;
            d2 <= radius * radius && d2 >= (0.55 * radius) * (0.55 * radius)
        }
        _ => {
            (px.abs() <= 0.3 * radius && py.abs() <= radius)
                || (py.abs() <= 0.3 * radius && px.abs() <= radius)
        }
    }
}

/// Render one class-conditional image as a `[3,32,32]` tensor.
fn render(class_id: usize, index: u64, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed)
        .split(0x73796e7468) // "synth"
        .split(class_id as u64)
        .split(index);
    let cx = 16.0 + rng.uniform(-4.0, 4.0);
    let cy = 16.0 + rng.uniform(-4.0, 4.0);
    let radius = 9.0 * rng.uniform(0.75, 1.25);
    let theta = rng.uniform(0.0, std::f32::consts::TAU);
    let background = 0.15 + rng.uniform(-0.05, 0.05);
    let hue = (class_id as f32 + 0.5) / 10.0 + rng.uniform(-0.01, 0.01);
    let color = hsv_to_rgb(hue, 0.9, 0.9);
    let shape = class_id % 5;
    let (sin_t, cos_t) = theta.sin_cos();
    let mut img = Tensor::zeros(&[3, IMG, IMG]);
    {
        let data = img.data_mut();
        for y in 0..IMG {
            for x in 0..IMG {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                let px = dx * cos_t + dy * sin_t;
                let py = -dx * sin_t + dy * cos_t;
                let value = if inside_shape(shape, px, py, radius) {
                    color
                } else {
                    [background; 3]
                };
                for c in 0..3 {
                    data[c * IMG * IMG + y * IMG + x] = value[c];
                }
            }
        }
        for v in data.iter_mut() {
            *v = (*v + rng.normal() * NOISE_STD).clamp(0.0, 1.0);
        }
    }
    img
}

/// Procedural images for one class. `count` must be positive.
pub fn synth_images(class_id: usize, count: usize, seed: u64) -> Result<Dataset> {
    if class_id >= CLASS_NAMES.len() {
        return Err(Error::contract(format!(
            "class id {class_id} outside 0..{}",
            CLASS_NAMES.len()
        )));
    }
    if count == 0 {
        return Err(Error::contract("synthetic image count must be positive"));
    }
    let imgs: Vec<Tensor> = (0..count)
        .map(|i| render(class_id, i as u64, seed))
        .collect();
    Dataset::new(
        Tensor::stack(&imgs)?,
        vec![class_id as u16; count],
        Provenance::Synthetic,
    )
}

/// A balanced synthetic set: `per_class` images for each of the 10 classes,
/// ordered class-major.
pub fn synth_dataset(per_class: usize, seed: u64) -> Result<Dataset> {
    let parts: Vec<Dataset> = (0..CLASS_NAMES.len())
        .map(|c| synth_images(c, per_class, seed))
        .collect::<Result<_>>()?;
    Dataset::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_class_index_seed() {
        let a = synth_images(3, 4, 77).unwrap();
        let b = synth_images(3, 4, 77).unwrap();
        assert_eq!(a.images, b.images);
        let c = synth_images(3, 4, 78).unwrap();
        assert_ne!(a.images, c.images);
        // image i does not depend on how many images were requested
        let wide = synth_images(3, 8, 77).unwrap();
        assert_eq!(
            a.images.slice_batch(2, 1).unwrap(),
            wide.images.slice_batch(2, 1).unwrap()
        );
    }

    #[test]
    fn pixel_range_is_unit_interval() {
        let d = synth_dataset(3, 5).unwrap();
        for &v in d.images.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn zero_count_and_bad_class_are_contract_errors() {
        assert!(matches!(synth_images(0, 0, 1), Err(Error::Contract(_))));
        assert!(matches!(synth_images(10, 4, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn hsv_round_trip() {
        for (h, s, v) in [(0.05f32, 0.9, 0.9), (0.55, 0.5, 0.7), (0.95, 0.9, 0.9)] {
            let [r, g, b] = hsv_to_rgb(h, s, v);
            let (h2, s2, v2) = rgb_to_hsv(r, g, b);
            assert!(
                (h - h2).abs() < 1e-4 || (h - h2).abs() > 0.999,
                "{h} vs {h2}"
            );
            assert!((s - s2).abs() < 1e-4);
            assert!((v - v2).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_probe_separates_classes() {
        // multinomial logistic regression on raw pixels reaches 0.8+
        use crate::nnkit::tape::Tape;
        let per_class = 20;
        let data = synth_dataset(per_class, 9).unwrap();
        let n = data.len();
        let flat = data.images.reshaped(&[n, 3 * IMG * IMG]).unwrap();
        let mut w = Tensor::zeros(&[10, 3 * IMG * IMG]);
        let mut bias = Tensor::zeros(&[10]);
        for epoch in 0..40 {
            let mut tape = Tape::new();
            let x = tape.constant(flat.clone());
            let wv = tape.leaf(w.clone(), true);
            let bv = tape.leaf(bias.clone(), true);
            let logits = tape.matmul(x, wv, true).unwrap();
            let logits = tape.add_bias_row(logits, bv).unwrap();
            let loss = tape.cross_entropy(logits, &data.labels).unwrap();
            tape.backward(loss).unwrap();
            let _ = epoch;
            let gw = tape.grad(wv).unwrap();
            for (p, g) in w.data_mut().iter_mut().zip(gw.data()) {
                *p -= 0.5 * g;
            }
            let gb = tape.grad(bv).unwrap();
            for (p, g) in bias.data_mut().iter_mut().zip(gb.data()) {
                *p -= 0.5 * g;
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(flat);
        let wv = tape.constant(w);
        let bv = tape.constant(bias);
        let logits = tape.matmul(x, wv, true).unwrap();
        let logits = tape.add_bias_row(logits, bv).unwrap();
        let acc =
            crate::nnkit::train::accuracy_from_logits(tape.value(logits), &data.labels).unwrap();
        assert!(acc >= 0.8, "linear probe accuracy {acc}");
    }
}
