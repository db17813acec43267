use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image::{GrayImage, Mask};
use super::{ATTRIBUTES, CONCEPTS, MODALITIES};
use crate::error::{Error, Result};

/// Integer placement of a shape: center pixel and characteristic radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeGeometry {
    pub cx: i64,
    pub cy: i64,
    pub size: i64,
}

/// Exact pixel region of a concept's shape. Pixel `(x, y)` is inside when
/// its integer offset from the center satisfies the shape's inequality.
pub fn rasterize(concept_id: usize, g: ShapeGeometry, (h, w): (usize, usize)) -> Result<Mask> {
    if concept_id >= CONCEPTS.len() {
        return Err(Error::Contract(format!("concept id {concept_id} out of range")));
    }
    let s = g.size as f64;
    let inside = |dx: f64, dy: f64| -> bool {
        match concept_id {
            // circle
            0 => dx * dx + dy * dy <= s * s,
            // square
            1 => dx.abs() <= 0.8 * s && dy.abs() <= 0.8 * s,
            // triangle, apex up
            2 => dy >= -s && dy <= 0.7 * s && dx.abs() <= (dy + s) / 1.7,
            // ring
            3 => {
                let d2 = dx * dx + dy * dy;
                d2 <= s * s && d2 > (0.55 * s) * (0.55 * s)
            }
            // cross
            _ => {
                let t = (0.3 * s).max(1.0);
                (dx.abs() <= t && dy.abs() <= s) || (dy.abs() <= t && dx.abs() <= s)
            }
        }
    };
    let mut bits = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = (x as i64 - g.cx) as f64;
            let dy = (y as i64 - g.cy) as f64;
            bits[y * w + x] = inside(dx, dy) as u8;
        }
    }
    Mask::new(h, w, bits)
}

fn draw_geometry<R: Rng + ?Sized>(rng: &mut R, (h, w): (usize, usize)) -> ShapeGeometry {
    let m = h.min(w) as f64;
    let lo = ((0.12 * m).round() as i64).max(3);
    let hi = ((0.28 * m).round() as i64).max(lo);
    let size = rng.random_range(lo..=hi);
    let cx = rng.random_range(size + 1..=w as i64 - 2 - size);
    let cy = rng.random_range(size + 1..=h as i64 - 2 - size);
    ShapeGeometry { cx, cy, size }
}

/// Renders one sample: random placement of the concept's shape, then the
/// modality's rendering transform over a background whose brightness band is
/// set by the attribute. Geometry is drawn before any style randomness, so
/// the mask does not depend on the modality.
pub fn render_sample<R: Rng + ?Sized>(
    concept_id: usize,
    modality_id: usize,
    attribute_id: usize,
    rng: &mut R,
    size: (usize, usize),
) -> Result<(GrayImage, Mask)> {
    if size.0 < 16 || size.1 < 16 {
        return Err(Error::Config(format!("render size {}×{} below 16×16", size.0, size.1)));
    }
    loop {
        let g = draw_geometry(rng, size);
        let mask = rasterize(concept_id, g, size)?;
        if mask.count() > 0 {
            let image = render_with_geometry(&mask, modality_id, attribute_id, rng)?;
            return Ok((image, mask));
        }
    }
}

/// Paints the image for a fixed mask.
pub fn render_with_geometry<R: Rng + ?Sized>(
    mask: &Mask,
    modality_id: usize,
    attribute_id: usize,
    rng: &mut R,
) -> Result<GrayImage> {
    if modality_id >= MODALITIES.len() || attribute_id >= ATTRIBUTES.len() {
        return Err(Error::Contract(format!(
            "modality {modality_id} / attribute {attribute_id} out of range"
        )));
    }
    let (h, w) = (mask.height, mask.width);
    let band_lo = [0.08, 0.32, 0.56][attribute_id];
    let background = rng.random_range(band_lo..band_lo + 0.14);
    let contrast = if modality_id == 2 { 0.1 } else { 0.3 };
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let (fx, fy, phase) = (rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.0..6.3));
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let fg = mask.get(x, y);
            let mut v = background + if fg { contrast } else { 0.0 };
            match modality_id {
                1 => v += noise.sample(rng),
                3 if !fg => v += 0.12 * (fx * x as f64 + fy * y as f64 + phase).sin(),
                _ => {}
            }
            values.push(v);
        }
    }
    GrayImage::from_unit(h, w, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Lattice points with x² + y² ≤ r², counted independently of the
    /// rasterizer (Gauss circle problem values).
    fn gauss_circle(r: i64) -> usize {
        let mut n = 0;
        for x in -r..=r {
            let mut y = 0;
            while x * x + (y + 1) * (y + 1) <= r * r {
                y += 1;
            }
            n += 2 * y as usize + 1;
        }
        n
    }

    #[test]
    fn circle_pixel_count_matches_lattice_count() {
        assert_eq!(gauss_circle(5), 81);
        assert_eq!(gauss_circle(10), 317);
        for r in [3, 5, 8, 10, 12] {
            let m = rasterize(0, ShapeGeometry { cx: 30, cy: 31, size: r }, (64, 64)).unwrap();
            assert_eq!(m.count(), gauss_circle(r), "radius {r}");
        }
    }

    #[test]
    fn mask_does_not_depend_on_modality() {
        for seed in 0..10 {
            let masks: Vec<Mask> = (0..4)
                .map(|m| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    render_sample(3, m, 1, &mut rng, (32, 32)).unwrap().1
                })
                .collect();
            assert!(masks.windows(2).all(|p| p[0] == p[1]));
        }
    }

    #[test]
    fn identical_rng_state_gives_identical_pixels() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            render_sample(4, 1, 2, &mut a, (64, 64)).unwrap(),
            render_sample(4, 1, 2, &mut b, (64, 64)).unwrap()
        );
    }

    #[test]
    fn every_concept_fits_at_minimum_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for c in 0..CONCEPTS.len() {
            for _ in 0..50 {
                let (img, mask) = render_sample(c, 3, 0, &mut rng, (16, 16)).unwrap();
                assert!(mask.count() > 0);
                assert_eq!(img.pixels.len(), 256);
            }
        }
    }

    #[test]
    fn foreground_is_brighter_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in 0..MODALITIES.len() {
            let (img, mask) = render_sample(0, m, 0, &mut rng, (64, 64)).unwrap();
            let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for (p, &b) in img.pixels.iter().zip(&mask.bits) {
                if b == 1 {
                    fg += *p as f64;
                    nf += 1.0;
                } else {
                    bg += *p as f64;
                    nb += 1.0;
                }
            }
            assert!(fg / nf > bg / nb, "modality {m}");
        }
    }
}
