//! Procedural class shapes on striped, speckled backgrounds.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};

/// Shape families, one per class id.
pub const SHAPES: [&str; 8] = [
    "disk", "square", "triangle", "plus", "ring", "diamond", "cross", "bars",
];

pub const MIN_HW: usize = 16;

/// Is the point `(x, y)` (shape-local, unit radius, y down) inside `shape`?
fn inside(shape: usize, x: f64, y: f64) -> bool {
    let r = (x * x + y * y).sqrt();
    let arm =
        |x: f64, y: f64| (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0);
    match shape {
        0 => r <= 1.0,
        1 => x.abs().max(y.abs()) <= 0.8,
        2 => y <= 0.7 && y >= -1.0 + 1.7 * x.abs(),
        3 => arm(x, y),
        4 => (0.55..=1.0).contains(&r),
        5 => x.abs() + y.abs() <= 1.0,
        6 => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            arm(s * (x + y), s * (y - x))
        }
        7 => x.abs() <= 0.9 && ((y - 0.5).abs() <= 0.22 || (y + 0.5).abs() <= 0.22),
        _ => unreachable!("shape id checked by caller"),
    }
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ]
}

/// Render one clean CHW image of `class` (values in `[0, 1]`, 8-bit grid).
/// Position, size, rotation, colors and background texture are drawn
/// from `rng`.
pub fn render<R: Rng + ?Sized>(class: usize, hw: usize, rng: &mut R) -> Result<Vec<f32>> {
    if hw < MIN_HW {
        return Err(Error::Config(format!(
            "image size {hw} too small to render shapes (minimum {MIN_HW})"
        )));
    }
    if class >= SHAPES.len() {
        return Err(Error::Config(format!(
            "class {class} has no shape; at most {} classes",
            SHAPES.len()
        )));
    }
    let size = hw as f64;
    let radius = size * rng.gen_range(0.26..0.36);
    let jitter = size * 0.1;
    let cx = size / 2.0 + rng.gen_range(-jitter..jitter);
    let cy = size / 2.0 + rng.gen_range(-jitter..jitter);
    let angle: f64 = rng.gen_range(-PI / 12.0..PI / 12.0);
    let (sin, cos) = angle.sin_cos();

    let background = random_color(rng);
    let mut fg = random_color(rng);
    while (luminance(&fg) - luminance(&background)).abs() < 0.25 {
        fg = random_color(rng);
    }
    let freq = rng.gen_range(0.3..1.2);
    let theta: f64 = rng.gen_range(0.0..PI);
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let stripe = rng.gen_range(0.03..0.08);

    let plane = hw * hw;
    let mut out = vec![0.0f32; 3 * plane];
    for py in 0..hw {
        for px in 0..hw {
            // 2x2 supersampled coverage
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = (px as f64 + ox - cx) / radius;
                let dy = (py as f64 + oy - cy) / radius;
                let (x, y) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                if inside(class, x, y) {
                    cover += 0.25;
                }
            }
            let t = (px as f64 * theta.cos() + py as f64 * theta.sin()) * freq + phase;
            let speckle = rng.gen_range(-0.02..0.02);
            let tex = stripe * t.sin() + speckle;
            for c in 0..3 {
                let bg = background[c] + tex;
                out[c * plane + py * hw + px] = super::quantize(cover * fg[c] + (1.0 - cover) * bg);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_are_distinct_masks() {
        let grid: Vec<(f64, f64)> = (0..40)
            .flat_map(|i| (0..40).map(move |j| (i as f64 / 20.0 - 1.0, j as f64 / 20.0 - 1.0)))
            .collect();
        let masks: Vec<Vec<bool>> = (0..SHAPES.len())
            .map(|s| grid.iter().map(|&(x, y)| inside(s, x, y)).collect())
            .collect();
        for i in 0..masks.len() {
            let area = masks[i].iter().filter(|v| **v).count();
            assert!(area > 100, "{} area {area}", SHAPES[i]);
            for j in i + 1..masks.len() {
                let diff = masks[i]
                    .iter()
                    .zip(&masks[j])
                    .filter(|(a, b)| a != b)
                    .count();
                assert!(diff > 100, "{} vs {}", SHAPES[i], SHAPES[j]);
            }
        }
    }

    #[test]
    fn render_range_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render(2, 16, &mut rng).unwrap();
        assert_eq!(img.len(), 3 * 256);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(render(0, 15, &mut rng), Err(Error::Config(_))));
        assert!(matches!(render(8, 32, &mut rng), Err(Error::Config(_))));
    }
}
