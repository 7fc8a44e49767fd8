//! Paired random rotation and scaling about the image centre.

use rand::Rng as _;

use crate::data::Mask;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 25.0;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub angle_deg: f64,
    pub scale: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { angle_deg: 0.0, scale: 1.0 };

    pub fn draw(rng: &mut Rng) -> Self {
        Self {
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        }
    }

    /// Source coordinate of output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        if self.angle_deg == 0.0 && self.scale == 1.0 {
            return (y as f64, x as f64);
        }
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let sy = (-s * dx + c * dy) / self.scale + cy;
        let sx = (c * dx + s * dy) / self.scale + cx;
        (sy, sx)
    }
}

fn sample_bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let at = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            0.0
        } else {
            f64::from(plane[y as usize * w + x as usize])
        }
    };
    let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
    v as f32
}

/// Image `[C, H, W]` bilinear, mask nearest then thresholded at 0.5; pixels
/// mapped from outside the canvas are zero.
pub fn apply(image: &Tensor<f32>, mask: Option<&Mask>, a: Affine) -> (Tensor<f32>, Option<Mask>) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(image.shape());
    let mut m_out = mask.map(|m| Mask::zeros(m.height, m.width));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = a.source(y, x, h, w);
            for ch in 0..c {
                let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
                out.data_mut()[ch * h * w + y * w + x] = sample_bilinear(plane, h, w, sy, sx);
            }
            if let (Some(src), Some(dst)) = (mask, m_out.as_mut()) {
                let (ny, nx) = (sy.round(), sx.round());
                let v = if ny < 0.0 || nx < 0.0 || ny >= h as f64 || nx >= w as f64 {
                    0.0
                } else {
                    f64::from(src.get(ny as usize, nx as usize))
                };
                dst.data[y * w + x] = u8::from(v >= 0.5);
            }
        }
    }
    (out, m_out)
}

/// Draws one transform from `rng` and applies it to the pair.
pub fn augment(image: &Tensor<f32>, mask: &Mask, rng: &mut Rng) -> (Tensor<f32>, Mask) {
    let (i, m) = apply(image, Some(mask), Affine::draw(rng));
    (i, m.expect("mask given"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_tasks, synth_image};
    use crate::rng;

    #[test]
    fn identity_is_exact() {
        let s = synth_image(&default_tasks(2), 3, (32, 32)).unwrap();
        let (i, m) = apply(&s.image, Some(&s.masks[&0]), Affine::IDENTITY);
        assert_eq!(i, s.image);
        assert_eq!(m.unwrap(), s.masks[&0]);
    }

    #[test]
    fn masks_stay_binary_and_draws_are_deterministic() {
        let s = synth_image(&default_tasks(2), 8, (64, 64)).unwrap();
        for seed in 0..20 {
            let (i1, m1) = augment(&s.image, &s.masks[&1], &mut rng::rng_from(seed));
            let (i2, m2) = augment(&s.image, &s.masks[&1], &mut rng::rng_from(seed));
            assert_eq!((&i1, &m1), (&i2, &m2));
            assert!(m1.data.iter().all(|&v| v <= 1));
            assert!(i1.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut r = rng::rng_from(1);
        for _ in 0..1000 {
            let a = Affine::draw(&mut r);
            assert!(a.angle_deg.abs() <= 25.0 && (0.8..=1.25).contains(&a.scale));
        }
    }

    #[test]
    fn quarter_turn_moves_pixels_as_expected() {
        let mut img = Tensor::zeros(&[1, 5, 5]);
        img.data_mut()[2 * 5 + 4] = 1.0; // right-middle
        let (out, _) = apply(&img, None, Affine { angle_deg: 90.0, scale: 1.0 });
        let hot: Vec<usize> = (0..25).filter(|&i| out.data()[i] > 0.5).collect();
        assert_eq!(hot.len(), 1);
        let (y, x) = (hot[0] / 5, hot[0] % 5);
        assert!((y == 0 || y == 4) && x == 2, "{y},{x}");
    }

    #[test]
    fn zoom_out_fills_the_border_with_zeros() {
        let img = Tensor::full(&[1, 16, 16], 1.0f32);
        let (out, _) = apply(&img, None, Affine { angle_deg: 0.0, scale: 0.8 });
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[8 * 16 + 8], 1.0);
    }
}
