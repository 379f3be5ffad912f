//! Controlled out-of-distribution corruption.
//!
//! Applies a seeded hue rotation, box blur, and contrast collapse, all
//! scaled by severity 1..5, plus mild seeded noise. Labels are preserved.
//! Higher severity moves images further from the training distribution, so
//! filters have signal to detect.

use crate::datasrc::synth::{hsv_to_rgb, rgb_to_hsv, IMG};
use crate::datasrc::Dataset;
use crate::error::{Error, Result};
use crate::nnkit::rng::Rng;

fn box_blur_plane(plane: &mut [f32], radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let n = IMG as isize;
    let mut tmp = vec![0.0f32; IMG * IMG];
    // horizontal
    for y in 0..n {
        for x in 0..n {
            let mut sum = 0.0;
            for dx in -r..=r {
                let sx = (x + dx).clamp(0, n - 1);
                sum += plane[(y * n + sx) as usize];
            }
            tmp[(y * n + x) as usize] = sum / (2 * r + 1) as f32;
        }
    }
    // vertical
    for y in 0..n {
        for x in 0..n {
            let mut sum = 0.0;
            for dy in -r..=r {
                let sy = (y + dy).clamp(0, n - 1);
                sum += tmp[(sy * n + x) as usize];
            }
            plane[(y * n + x) as usize] = sum / (2 * r + 1) as f32;
        }
    }
}

/// Corrupt a dataset at the given severity (1..=5), deterministically per
/// seed.
pub fn corrupt(data: &Dataset, severity: u8, seed: u64) -> Result<Dataset> {
    if !(1..=5).contains(&severity) {
        return Err(Error::contract(format!(
            "corruption severity must be 1..=5, got {severity}"
        )));
    }
    let s = severity as f32;
    // class hues sit on a 0.1 grid; keep the shift within half a band so a
    // corrupted class never aliases onto a neighboring class's hue
    let hue_shift = 0.01 * s;
    let blur_radius = severity as usize;
    let contrast = 1.0 - 0.15 * s;
    let noise_std = 0.02 * s;
    let n = data.len();
    let plane = IMG * IMG;
    let mut out = data.images.clone();
    let base_rng = Rng::new(seed).split(0x636f7272); // "corr"
    for i in 0..n {
        let mut rng = base_rng.split(i as u64);
        let img = &mut out.data_mut()[i * 3 * plane..(i + 1) * 3 * plane];
        // hue rotation
        for p in 0..plane {
            let (r, g, b) = (img[p], img[plane + p], img[2 * plane + p]);
            let (h, sat, val) = rgb_to_hsv(r, g, b);
            let [r2, g2, b2] = hsv_to_rgb(h + hue_shift, sat, val);
            img[p] = r2;
            img[plane + p] = g2;
            img[2 * plane + p] = b2;
        }
        // blur
        for c in 0..3 {
            box_blur_plane(&mut img[c * plane..(c + 1) * plane], blur_radius);
        }
        // contrast collapse toward the image mean, then noise
        let mean: f32 = img.iter().sum::<f32>() / img.len() as f32;
        for v in img.iter_mut() {
            *v = mean + (*v - mean) * contrast;
            *v = (*v + rng.normal() * noise_std).clamp(0.0, 1.0);
        }
    }
    Dataset::new(out, data.labels.clone(), data.provenance)
}
