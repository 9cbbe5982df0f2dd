//! Procedural images and the hidden attribute functions that label them.
//!
//! Content images are muted scenes: a soft two-colour gradient with a few
//! blurred shapes. Style images are saturated abstract patterns (stripes,
//! blobs or speckle) over a random palette. Attribute labels come from fixed
//! functions of image statistics that the predictors only ever see through
//! their labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

fn muted<R: Rng>(rng: &mut R) -> [f64; 3] {
    let g = rng.random_range(0.35..0.7);
    [0, 1, 2].map(|_| g + rng.random_range(-0.06..0.06))
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_tensor(size: usize, px: impl Fn(usize, usize, usize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                data.push(px(c, y, x).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("non-empty image")
}

/// Muted scene from `seed`.
pub fn content_image(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (muted(&mut rng), muted(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let shapes: Vec<([f64; 3], f64, f64, f64)> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                muted(&mut rng),
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                rng.random_range(0.15..0.35) * size as f64,
            )
        })
        .collect();
    let s = size as f64;
    to_tensor(size, |c, y, x| {
        let (fx, fy) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
        let t = 0.5 + fx * angle.cos() + fy * angle.sin();
        let mut v = a[c] * (1.0 - t) + b[c] * t;
        for (col, cy, cx, r) in &shapes {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let w = 1.0 / (1.0 + ((d - r) / 1.5).exp());
            v = v * (1.0 - w) + col[c] * w;
        }
        v
    })
}

/// Saturated abstract pattern from `seed`.
pub fn style_image(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_hue: f64 = rng.random();
    let value = rng.random_range(0.35..1.0);
    let palette: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            hsv(
                base_hue + rng.random_range(-0.25..0.25),
                rng.random_range(0.45..1.0),
                value * rng.random_range(0.6..1.0),
            )
        })
        .collect();
    let s = size as f64;
    let kind = rng.random_range(0..3);
    let weight: Box<dyn Fn(usize, usize) -> (f64, f64)> = match kind {
        0 => {
            let f = rng.random_range(1.0..5.0);
            let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let f2 = rng.random_range(0.5..2.5);
            Box::new(move |y, x| {
                let u = (x as f64 * th.cos() + y as f64 * th.sin()) / s;
                let w = (std::f64::consts::TAU * f * u + ph).sin();
                let w2 = (std::f64::consts::TAU * f2 * (y as f64 / s) + ph).cos();
                (0.5 + 0.5 * w, 0.5 + 0.5 * w2)
            })
        }
        1 => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(4..10))
                .map(|_| {
                    (
                        rng.random_range(0.0..s),
                        rng.random_range(0.0..s),
                        rng.random_range(1.0..3.5),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            Box::new(move |y, x| {
                let (mut a, mut b) = (0.0, 0.0);
                for &(cy, cx, r, sign) in &blobs {
                    let g = (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * r * r)).exp();
                    if sign > 0.0 {
                        a += g;
                    } else {
                        b += g;
                    }
                }
                (a.min(1.0), b.min(1.0))
            })
        }
        _ => {
            let noise: Vec<(f64, f64)> = (0..size * size).map(|_| (rng.random(), rng.random())).collect();
            let smooth = rng.random_range(0.0..0.6);
            Box::new(move |y, x| {
                let at = |yy: usize, xx: usize| noise[(yy % size) * size + xx % size];
                let (a0, b0) = at(y, x);
                let (a1, b1) = at(y, x + 1);
                let (a2, b2) = at(y + 1, x);
                let k = smooth / 2.0;
                ((1.0 - smooth) * a0 + k * (a1 + a2), (1.0 - smooth) * b0 + k * (b1 + b2))
            })
        }
    };
    to_tensor(size, |c, y, x| {
        let (a, b) = weight(y, x);
        let base = palette[0][c] * (1.0 - a) + palette[1][c] * a;
        base * (1.0 - b) + palette[2][c] * b
    })
}

/// Pixel-space mixture `a * content + (1 - a) * style`.
pub fn blend(content: &Tensor, style: &Tensor, a: f64) -> Tensor {
    let data = content
        .data()
        .iter()
        .zip(style.data())
        .map(|(c, s)| a * c + (1.0 - a) * s)
        .collect();
    Tensor::new(content.shape(), data).expect("same shapes")
}

/// Per-image statistics the hidden attributes are built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageStats {
    /// Mean over pixels of `max(rgb) - min(rgb)`.
    pub saturation: f64,
    /// Mean absolute forward difference, both axes, all channels.
    pub edges: f64,
    pub brightness: f64,
    /// Mean of `max(0, r - (g + b) / 2)`.
    pub redness: f64,
}

pub fn image_stats(img: &Tensor) -> ImageStats {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let at = |c: usize, y: usize, x: usize| d[(c * h + y) * w + x];
    let n = (h * w) as f64;
    let (mut sat, mut bright, mut red) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = [at(0, y, x), at(1, y, x), at(2, y, x)];
            let hi = p.iter().copied().fold(f64::MIN, f64::max);
            let lo = p.iter().copied().fold(f64::MAX, f64::min);
            sat += hi - lo;
            bright += (p[0] + p[1] + p[2]) / 3.0;
            red += (p[0] - 0.5 * (p[1] + p[2])).max(0.0);
        }
    }
    let mut edges = 0.0;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    edges += (at(c, y, x + 1) - at(c, y, x)).abs();
                }
                if y + 1 < h {
                    edges += (at(c, y + 1, x) - at(c, y, x)).abs();
                }
            }
        }
    }
    let pairs = (3 * (h * (w - 1) + (h - 1) * w)) as f64;
    ImageStats {
        saturation: sat / n,
        edges: edges / pairs,
        brightness: bright / n,
        redness: red / n,
    }
}

/// Hidden regression attribute ("memorability"): rises with colourfulness
/// and texture, penalises very dark or very bright images.
pub fn hidden_memorability(img: &Tensor) -> f64 {
    let s = image_stats(img);
    (3.0 * s.saturation + 8.0 * s.edges - 2.5 * (s.brightness - 0.5).abs() - 0.6).tanh()
}

/// Continuous score behind the binary attribute ("scariness").
pub fn hidden_scariness_score(img: &Tensor) -> f64 {
    let s = image_stats(img);
    2.0 * (0.6 - s.brightness) + 4.0 * s.redness + 3.0 * s.edges
}

pub const SCARINESS_THRESHOLD: f64 = 1.5;
/// Scale of the logistic label noise around the threshold.
pub const SCARINESS_NOISE: f64 = 0.25;

/// `P(label = 1)` given the hidden score.
pub fn scariness_probability(img: &Tensor) -> f64 {
    let t = (hidden_scariness_score(img) - SCARINESS_THRESHOLD) / SCARINESS_NOISE;
    1.0 / (1.0 + (-t).exp())
}

/// Uniform draw in (0, 1) keyed on the pixel values, so a label is a pure
/// function of its image.
fn pixel_uniform(img: &Tensor) -> f64 {
    let key = img
        .data()
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3));
    let u: f64 = ChaCha8Rng::seed_from_u64(key).random();
    u.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Binary attribute label in `{0, 1}`: the hidden score plus logistic noise,
/// thresholded. Equivalent to a Bernoulli draw from [`scariness_probability`].
pub fn hidden_scariness(img: &Tensor) -> f64 {
    if pixel_uniform(img) < scariness_probability(img) {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_in_range_and_deterministic() {
        for seed in 0..20 {
            for img in [content_image(seed, 16), style_image(seed, 16)] {
                assert_eq!(img.shape(), &[3, 16, 16]);
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            assert!(content_image(seed, 16).bit_eq(&content_image(seed, 16)));
            assert!(style_image(seed, 16).bit_eq(&style_image(seed, 16)));
        }
    }

    #[test]
    fn hand_stats() {
        // left column red, right column black, 2x2
        let img = Tensor::new(&[3, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let s = image_stats(&img);
        assert_eq!(s.saturation, 0.5);
        assert_eq!(s.brightness, 1.0 / 6.0);
        assert_eq!(s.redness, 0.5);
        // red channel has two unit horizontal steps out of 12 pairs
        assert!((s.edges - 2.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn scariness_labels_follow_their_probability() {
        let imgs: Vec<Tensor> = (0..400)
            .flat_map(|i| [content_image(i, 16), style_image(i, 16)])
            .collect();
        let p: f64 = imgs.iter().map(scariness_probability).sum();
        let y: f64 = imgs.iter().map(hidden_scariness).sum();
        // Bernoulli sum against its mean, well inside 4 standard deviations
        let var: f64 = imgs.iter().map(|i| scariness_probability(i) * (1.0 - scariness_probability(i))).sum();
        assert!((y - p).abs() < 4.0 * var.sqrt(), "labels {y} vs expected {p:.1}");
        assert!(imgs.iter().all(|i| hidden_scariness(i) == hidden_scariness(&i.clone())));
    }

    #[test]
    fn styles_more_memorable_than_contents() {
        let c: f64 = (0..200).map(|i| hidden_memorability(&content_image(i, 16))).sum::<f64>() / 200.0;
        let s: f64 = (0..200).map(|i| hidden_memorability(&style_image(i, 16))).sum::<f64>() / 200.0;
        assert!(s > c + 0.2, "styles {s} vs contents {c}");
    }
}
