//! 8x8 glyph images. The shared latent is a shape, its size and position;
//! domains are the glyph itself, its edge map, a rotated and shrunken copy,
//! and a dilated copy. Pixels are in [-1, 1].

use rand::Rng;

use crate::router::DomainId;

pub const SIDE: usize = 8;
pub const PIXELS: usize = SIDE * SIDE;
pub const MAX_DOMAINS: usize = 4;
pub const TEMPLATES: usize = 8;

const ROTATION_DEG: f64 = 20.0;
const SHRINK: f64 = 0.8;

/// Latent record: `[template, size, row offset, column offset]`.
pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, shift: f64) -> Vec<f64> {
    let template = rng.random_range(0..TEMPLATES);
    let size = rng.random_range(4..=6usize);
    let span = SIDE - size;
    // A positive shift biases glyph placement toward the lower right.
    let bias = shift.clamp(0.0, 1.0);
    let offset = |rng: &mut R| {
        let v = rng.random_range(0..=span);
        if rng.random_bool(bias) {
            span
        } else {
            v
        }
    };
    let dy = offset(rng);
    let dx = offset(rng);
    vec![template as f64, size as f64, dy as f64, dx as f64]
}

fn template_pixel(template: usize, size: usize, r: usize, c: usize) -> bool {
    let last = size - 1;
    let mid = size / 2;
    match template {
        0 => true,
        1 => r == 0 || c == 0 || r == last || c == last,
        2 => r == mid || c == mid,
        3 => r == c || r + c == last,
        4 => c == 0 || r == last,
        5 => r == 0 || c == mid,
        6 => r == 0 || r == last || r == mid,
        _ => c <= r,
    }
}

/// Binary occupancy grid for a latent record.
pub fn occupancy(latent: &[f64]) -> [[f64; SIDE]; SIDE] {
    let template = latent[0] as usize;
    let size = latent[1] as usize;
    let dy = latent[2] as usize;
    let dx = latent[3] as usize;
    let mut img = [[0.0; SIDE]; SIDE];
    for r in 0..size {
        for c in 0..size {
            if template_pixel(template, size, r, c) {
                img[dy + r][dx + c] = 1.0;
            }
        }
    }
    img
}

fn at(img: &[[f64; SIDE]; SIDE], r: isize, c: isize) -> f64 {
    if r < 0 || c < 0 || r >= SIDE as isize || c >= SIDE as isize {
        0.0
    } else {
        img[r as usize][c as usize]
    }
}

fn sobel(img: &[[f64; SIDE]; SIDE]) -> [[f64; SIDE]; SIDE] {
    let mut out = [[0.0; SIDE]; SIDE];
    for r in 0..SIDE as isize {
        for c in 0..SIDE as isize {
            let p = |dr: isize, dc: isize| at(img, r + dr, c + dc);
            let gx = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1);
            let gy = p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1);
            out[r as usize][c as usize] = ((gx * gx + gy * gy).sqrt() / 4.0).min(1.0);
        }
    }
    out
}

fn rotate_shrink(img: &[[f64; SIDE]; SIDE]) -> [[f64; SIDE]; SIDE] {
    let centre = (SIDE as f64 - 1.0) / 2.0;
    let (s, c) = ROTATION_DEG.to_radians().sin_cos();
    let mut out = [[0.0; SIDE]; SIDE];
    for r in 0..SIDE {
        for col in 0..SIDE {
            // Inverse map: undo the shrink, then rotate back.
            let y = (r as f64 - centre) / SHRINK;
            let x = (col as f64 - centre) / SHRINK;
            let sy = -s * x + c * y + centre;
            let sx = c * x + s * y + centre;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            out[r][col] = (1.0 - fy) * (1.0 - fx) * at(img, y0, x0)
                + (1.0 - fy) * fx * at(img, y0, x0 + 1)
                + fy * (1.0 - fx) * at(img, y0 + 1, x0)
                + fy * fx * at(img, y0 + 1, x0 + 1);
        }
    }
    out
}

fn dilate(img: &[[f64; SIDE]; SIDE]) -> [[f64; SIDE]; SIDE] {
    let mut out = [[0.0; SIDE]; SIDE];
    for r in 0..SIDE as isize {
        for c in 0..SIDE as isize {
            let mut m: f64 = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    m = m.max(at(img, r + dr, c + dc));
                }
            }
            out[r as usize][c as usize] = m;
        }
    }
    out
}

/// Renders domain `k` in [-1, 1]. Domains: 0 glyph, 1 edges, 2 rotated and
/// shrunk, 3 dilated.
pub fn render(k: DomainId, latent: &[f64]) -> Vec<f64> {
    let base = occupancy(latent);
    let img = match k.0 {
        0 => base,
        1 => sobel(&base),
        2 => rotate_shrink(&base),
        _ => dilate(&base),
    };
    img.iter().flatten().map(|v| 2.0 * v - 1.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filled_square_renders_expected_pixels() {
        let latent = [0.0, 4.0, 2.0, 2.0];
        let img = render(DomainId(0), &latent);
        let on = img.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(on, 16);
        assert_eq!(img[2 * SIDE + 2], 1.0);
        assert_eq!(img[0], -1.0);
    }

    #[test]
    fn edge_map_is_empty_inside_a_filled_block() {
        let latent = [0.0, 6.0, 1.0, 1.0];
        let edges = render(DomainId(1), &latent);
        // Pixel (3, 3) is two cells from every border of the 6x6 block.
        assert_eq!(edges[3 * SIDE + 3], -1.0);
        assert!(edges[SIDE + 1] > -1.0);
    }

    #[test]
    fn rotate_shrink_preserves_range_and_reduces_mass() {
        let latent = [0.0, 6.0, 1.0, 1.0];
        let base: f64 = render(DomainId(0), &latent).iter().map(|v| (v + 1.0) / 2.0).sum();
        let rot = render(DomainId(2), &latent);
        assert!(rot.iter().all(|v| (-1.0..=1.0).contains(v)));
        let mass: f64 = rot.iter().map(|v| (v + 1.0) / 2.0).sum();
        assert!(mass < base);
        assert!(mass > 0.4 * base);
    }
}
