//! Procedural glyphs: each class is a fixed set of 2–4 strokes, each
//! instance a jittered rendering of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, ImageCollection};
use crate::seed::derive_seed;
use crate::transform::{Image, MIN_SIDE};

#[derive(Debug, Clone)]
enum Stroke {
    Line([(f64, f64); 2]),
    Arc {
        centre: (f64, f64),
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

impl Stroke {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut pt = || (rng.random_range(0.22..0.78), rng.random_range(0.22..0.78));
        let (a, b) = (pt(), pt());
        if rng.random_bool(0.6) {
            Stroke::Line([a, b])
        } else {
            Stroke::Arc {
                centre: a,
                radius: rng.random_range(0.12..0.28),
                start: rng.random_range(0.0..std::f64::consts::TAU),
                sweep: rng.random_range(1.5..4.5),
            }
        }
    }

    fn jittered(&self, rng: &mut ChaCha8Rng, amount: f64) -> Self {
        let mut j = |p: (f64, f64)| {
            (
                p.0 + rng.random_range(-amount..amount),
                p.1 + rng.random_range(-amount..amount),
            )
        };
        match self {
            Stroke::Line([a, b]) => Stroke::Line([j(*a), j(*b)]),
            Stroke::Arc {
                centre,
                radius,
                start,
                sweep,
            } => Stroke::Arc {
                centre: j(*centre),
                radius: *radius,
                start: start + rng.random_range(-0.2..0.2),
                sweep: *sweep,
            },
        }
    }

    /// Polyline in unit coordinates (x right, y down).
    fn points(&self) -> Vec<(f64, f64)> {
        match self {
            Stroke::Line([a, b]) => vec![*a, *b],
            Stroke::Arc {
                centre,
                radius,
                start,
                sweep,
            } => (0..=12)
                .map(|k| {
                    let t = start + sweep * k as f64 / 12.0;
                    (centre.0 + radius * t.cos(), centre.1 + radius * t.sin())
                })
                .collect(),
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render(strokes: &[Stroke], side: usize) -> Image {
    let h = side as f64;
    let half_width = (0.055 * h).max(0.6);
    let polys: Vec<Vec<(f64, f64)>> = strokes
        .iter()
        .map(|s| s.points().into_iter().map(|(x, y)| (x * h, y * h)).collect())
        .collect();
    Image::from_fn(side, |r, c| {
        let p = (c as f64 + 0.5, r as f64 + 0.5);
        let dist = polys
            .iter()
            .flat_map(|poly| poly.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        half_width + 0.5 - dist
    })
}

/// Generates `class_count` glyph classes with `per_class` instances each.
pub fn gen_glyphs(class_count: usize, per_class: usize, side: usize, seed: u64) -> Result<ImageCollection, DataError> {
    if class_count < 2 || class_count > u16::MAX as usize + 1 {
        return Err(DataError::Invalid(format!("glyph class count {class_count} outside 2..=65536")));
    }
    if side < MIN_SIDE {
        return Err(DataError::Invalid(format!("image side {side} below {MIN_SIDE}")));
    }
    if per_class == 0 {
        return Err(DataError::Invalid("need at least one image per class".into()));
    }
    let mut out = ImageCollection::new();
    for class in 0..class_count {
        let class_seed = derive_seed(seed, class as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed);
        let n = rng.random_range(2..=4);
        let template: Vec<Stroke> = (0..n).map(|_| Stroke::random(&mut rng)).collect();
        for k in 0..per_class {
            let mut irng = ChaCha8Rng::seed_from_u64(derive_seed(class_seed, k as u64 + 1));
            let strokes: Vec<Stroke> = template.iter().map(|s| s.jittered(&mut irng, 0.03)).collect();
            out.push(class as u16, render(&strokes, side));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(gen_glyphs(5, 3, 16, 11).unwrap(), gen_glyphs(5, 3, 16, 11).unwrap());
        assert_ne!(gen_glyphs(5, 3, 16, 11).unwrap(), gen_glyphs(5, 3, 16, 12).unwrap());
    }

    #[test]
    fn distinct_classes_differ() {
        let g = gen_glyphs(2, 1, 16, 0).unwrap();
        let a = &g.class(0).unwrap()[0];
        let b = &g.class(1).unwrap()[0];
        assert!(a.l1_distance(b) > 0.0);
    }

    #[test]
    fn pixels_in_unit_range_and_nonblank() {
        let g = gen_glyphs(6, 4, 12, 5).unwrap();
        assert_eq!(g.image_count(), 24);
        for (_, imgs) in g.iter() {
            for img in imgs {
                assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
                assert!(img.pixels().iter().sum::<f32>() > 1.0);
            }
        }
    }

    #[test]
    fn rejects_bad_preconditions() {
        assert!(gen_glyphs(1, 1, 16, 0).is_err());
        assert!(gen_glyphs(3, 1, 7, 0).is_err());
    }

    #[test]
    fn instances_vary_within_class() {
        let g = gen_glyphs(2, 2, 16, 3).unwrap();
        let imgs = g.class(1).unwrap();
        assert!(imgs[0].l1_distance(&imgs[1]) > 0.0);
    }
}
