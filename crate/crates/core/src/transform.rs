//! Geometric transformations on square grayscale images.
//!
//! Continuous families resample by inverse mapping with bilinear
//! interpolation and zero fill; syntactic families permute or invert pixels
//! exactly. Rotation, shear and scale act about the image centre
//! `((H−1)/2, (H−1)/2)` in a y-up frame.

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_SIDE: usize = 8;

pub const TRANSLATION_GRID: [i32; 7] = [-9, -6, -3, 0, 3, 6, 9];
pub const SHEAR_GRID: [f64; 9] = [-60.0, -45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0, 60.0];
pub const SCALE_GRID: [f64; 4] = [0.5, 0.75, 1.0, 1.25];
pub const HWAVE_AMPLITUDE: (f64, f64) = (1.0, 4.0);
pub const HWAVE_FREQUENCY: (f64, f64) = (0.2, 0.8);
/// Fisheye distortion is sampled as `u / H` with `u` in this range, which
/// bounds the largest displacement near `H/4`.
pub const FISHEYE_STRENGTH: (f64, f64) = (0.05, 0.2);

pub fn rotation_grid() -> impl Iterator<Item = f64> {
    (0..24).map(|k| 15.0 * k as f64)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid {family} spec: {reason}")]
    InvalidSpec { family: Family, reason: String },
    #[error("pixel {index} = {value} outside [0,1] after clamping")]
    PixelOutOfRange { index: usize, value: f32 },
    #[error("no admissible {family} parameters under {constraint:?}")]
    EmptyAdmissibleSet { family: Family, constraint: Option<OodSide> },
    #[error("{0} has no exact inverse on the pixel lattice")]
    NonInvertible(Family),
}

/// Square grayscale image with pixels in `[0,1]`, row-major.
#[derive(Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.side, self.side)
    }
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self, TransformError> {
        if side < MIN_SIDE {
            return Err(TransformError::InvalidImage(format!("side {side} < {MIN_SIDE}")));
        }
        if pixels.len() != side * side {
            return Err(TransformError::InvalidImage(format!(
                "{} pixels for side {}",
                pixels.len(),
                side
            )));
        }
        if let Some((i, v)) = pixels.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(TransformError::InvalidImage(format!("pixel {i} = {v} outside [0,1]")));
        }
        Ok(Self { side, pixels })
    }

    pub fn blank(side: usize) -> Self {
        Self::new(side, vec![0.0; side * side]).expect("side too small")
    }

    /// Builds an image from `f(row, col)`, clamping into `[0,1]`.
    pub fn from_fn(side: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                pixels.push(f(r, c).clamp(0.0, 1.0) as f32);
            }
        }
        Self::new(side, pixels).expect("side too small")
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.side + c]
    }

    pub fn l1_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum()
    }

    /// Bilinear sample at fractional (row, col) with zero outside the grid.
    fn sample(&self, r: f64, c: f64) -> f64 {
        let snap = |v: f64| {
            let rv = v.round();
            if (v - rv).abs() < 1e-9 {
                rv
            } else {
                v
            }
        };
        let (r, c) = (snap(r), snap(c));
        let (r0, c0) = (r.floor(), c.floor());
        let (fr, fc) = (r - r0, c - c0);
        let px = |ri: f64, ci: f64| -> f64 {
            if ri < 0.0 || ci < 0.0 || ri >= self.side as f64 || ci >= self.side as f64 {
                0.0
            } else {
                self.pixels[ri as usize * self.side + ci as usize] as f64
            }
        };
        let mut v = (1.0 - fr) * (1.0 - fc) * px(r0, c0);
        if fc > 0.0 {
            v += (1.0 - fr) * fc * px(r0, c0 + 1.0);
        }
        if fr > 0.0 {
            v += fr * (1.0 - fc) * px(r0 + 1.0, c0);
            if fc > 0.0 {
                v += fr * fc * px(r0 + 1.0, c0 + 1.0);
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Translation,
    Rotation,
    Reflection,
    Shear,
    Scale,
    Fisheye,
    Hwave,
    Blackwhite,
    Swap,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Translation,
        Family::Rotation,
        Family::Reflection,
        Family::Shear,
        Family::Scale,
        Family::Fisheye,
        Family::Hwave,
        Family::Blackwhite,
        Family::Swap,
    ];

    pub const AFFINE: [Family; 5] = [
        Family::Translation,
        Family::Rotation,
        Family::Reflection,
        Family::Shear,
        Family::Scale,
    ];

    /// Stable one-byte id used by the dataset format.
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Translation => "translation",
            Family::Rotation => "rotation",
            Family::Reflection => "reflection",
            Family::Shear => "shear",
            Family::Scale => "scale",
            Family::Fisheye => "fisheye",
            Family::Hwave => "hwave",
            Family::Blackwhite => "blackwhite",
            Family::Swap => "swap",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|f| f.name() == s)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Acts along the horizontal direction: reflection mirrors left/right,
    /// black-white splits at a column.
    Horizontal,
    /// Reflection mirrors top/bottom, black-white splits at a row.
    Vertical,
}

/// One transformation with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TransformSpec {
    /// Shift by `dx` columns (right) and `dy` rows (down).
    Translation { dx: i32, dy: i32 },
    /// Counter-clockwise rotation.
    Rotation { angle_deg: f64 },
    Reflection { axis: Axis },
    /// Horizontal shear by `alpha`, then vertical shear by `beta`.
    Shear { alpha_deg: f64, beta_deg: f64 },
    Scale { s: f64 },
    /// Radial map `T(p) = p + (p − c)·d·‖p − c‖` in pixel coordinates,
    /// `cx` along columns and `cy` along rows.
    Fisheye { cx: f64, cy: f64, d: f64 },
    /// Row map `T(y) = y + a·cos(f·y)`.
    Hwave { a: f64, f: f64 },
    /// Inverts every pixel whose column (horizontal) or row (vertical)
    /// index is `>= split`.
    Blackwhite { axis: Axis, split: usize },
    /// Output quadrant `q` takes input quadrant `perm[q]`; quadrants are
    /// numbered top-left, top-right, bottom-left, bottom-right.
    Swap { perm: [u8; 4] },
}

impl TransformSpec {
    pub fn family(&self) -> Family {
        match self {
            TransformSpec::Translation { .. } => Family::Translation,
            TransformSpec::Rotation { .. } => Family::Rotation,
            TransformSpec::Reflection { .. } => Family::Reflection,
            TransformSpec::Shear { .. } => Family::Shear,
            TransformSpec::Scale { .. } => Family::Scale,
            TransformSpec::Fisheye { .. } => Family::Fisheye,
            TransformSpec::Hwave { .. } => Family::Hwave,
            TransformSpec::Blackwhite { .. } => Family::Blackwhite,
            TransformSpec::Swap { .. } => Family::Swap,
        }
    }

    /// Packs parameters into the six float32 slots of a dataset record.
    pub fn encode_params(&self) -> [f32; 6] {
        let axis = |a: &Axis| match a {
            Axis::Horizontal => 0.0,
            Axis::Vertical => 1.0,
        };
        let mut p = [0f32; 6];
        match self {
            TransformSpec::Translation { dx, dy } => {
                p[0] = *dx as f32;
                p[1] = *dy as f32;
            }
            TransformSpec::Rotation { angle_deg } => p[0] = *angle_deg as f32,
            TransformSpec::Reflection { axis: a } => p[0] = axis(a),
            TransformSpec::Shear { alpha_deg, beta_deg } => {
                p[0] = *alpha_deg as f32;
                p[1] = *beta_deg as f32;
            }
            TransformSpec::Scale { s } => p[0] = *s as f32,
            TransformSpec::Fisheye { cx, cy, d } => {
                p[0] = *cx as f32;
                p[1] = *cy as f32;
                p[2] = *d as f32;
            }
            TransformSpec::Hwave { a, f } => {
                p[0] = *a as f32;
                p[1] = *f as f32;
            }
            TransformSpec::Blackwhite { axis: a, split } => {
                p[0] = axis(a);
                p[1] = *split as f32;
            }
            TransformSpec::Swap { perm } => {
                for (slot, v) in p.iter_mut().zip(perm) {
                    *slot = *v as f32;
                }
            }
        }
        p
    }

    pub fn decode_params(family: Family, p: &[f32; 6]) -> Result<Self, TransformError> {
        let bad = |reason: &str| TransformError::InvalidSpec {
            family,
            reason: reason.to_string(),
        };
        let axis = |v: f32| match v {
            0.0 => Ok(Axis::Horizontal),
            1.0 => Ok(Axis::Vertical),
            _ => Err(bad("axis must be 0 or 1")),
        };
        let spec = match family {
            Family::Translation => TransformSpec::Translation {
                dx: p[0] as i32,
                dy: p[1] as i32,
            },
            Family::Rotation => TransformSpec::Rotation { angle_deg: p[0] as f64 },
            Family::Reflection => TransformSpec::Reflection { axis: axis(p[0])? },
            Family::Shear => TransformSpec::Shear {
                alpha_deg: p[0] as f64,
                beta_deg: p[1] as f64,
            },
            Family::Scale => TransformSpec::Scale { s: p[0] as f64 },
            Family::Fisheye => TransformSpec::Fisheye {
                cx: p[0] as f64,
                cy: p[1] as f64,
                d: p[2] as f64,
            },
            Family::Hwave => TransformSpec::Hwave {
                a: p[0] as f64,
                f: p[1] as f64,
            },
            Family::Blackwhite => {
                if p[1] < 0.0 || p[1].fract() != 0.0 {
                    return Err(bad("split must be a non-negative integer"));
                }
                TransformSpec::Blackwhite {
                    axis: axis(p[0])?,
                    split: p[1] as usize,
                }
            }
            Family::Swap => {
                let mut perm = [0u8; 4];
                for (dst, v) in perm.iter_mut().zip(p) {
                    if !(0.0..4.0).contains(v) || v.fract() != 0.0 {
                        return Err(bad("permutation entries must be 0..3"));
                    }
                    *dst = *v as u8;
                }
                TransformSpec::Swap { perm }
            }
        };
        Ok(spec)
    }

    /// Checks parameters against an image side.
    pub fn validate(&self, side: usize) -> Result<(), TransformError> {
        let family = self.family();
        let bad = |reason: String| Err(TransformError::InvalidSpec { family, reason });
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        match self {
            TransformSpec::Translation { .. } | TransformSpec::Reflection { .. } => Ok(()),
            TransformSpec::Rotation { angle_deg } if !finite(&[*angle_deg]) => bad("non-finite angle".into()),
            TransformSpec::Shear { alpha_deg, beta_deg } => {
                if !finite(&[*alpha_deg, *beta_deg]) || alpha_deg.abs() >= 90.0 || beta_deg.abs() >= 90.0 {
                    bad(format!("angles ({alpha_deg}, {beta_deg}) must lie in (-90, 90)"))
                } else {
                    Ok(())
                }
            }
            TransformSpec::Scale { s } if !(s.is_finite() && *s > 0.0) => bad(format!("scale {s} must be positive")),
            TransformSpec::Fisheye { cx, cy, d } if !finite(&[*cx, *cy, *d]) => {
                bad(format!("non-finite parameters ({cx}, {cy}, {d})"))
            }
            TransformSpec::Hwave { a, f } if !finite(&[*a, *f]) => bad(format!("non-finite parameters ({a}, {f})")),
            TransformSpec::Blackwhite { split, .. } if *split > side => bad(format!("split {split} beyond side {side}")),
            TransformSpec::Swap { perm } => {
                let mut seen = [false; 4];
                for &p in perm {
                    if p > 3 || seen[p as usize] {
                        return bad(format!("{perm:?} is not a permutation of 0..3"));
                    }
                    seen[p as usize] = true;
                }
                if !side.is_multiple_of(2) {
                    return bad(format!("odd side {side} cannot be split into quadrants"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn inverse_map(img: &Image, src: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let h = img.side;
    let mut out = Vec::with_capacity(h * h);
    for r in 0..h {
        for c in 0..h {
            let (sr, sc) = src(r as f64, c as f64);
            out.push(img.sample(sr, sc));
        }
    }
    out
}

/// Inverse-maps through a linear map `m⁻¹` given in the centred y-up frame.
fn centred_linear(img: &Image, inv: [[f64; 2]; 2]) -> Vec<f64> {
    let cc = (img.side as f64 - 1.0) / 2.0;
    inverse_map(img, |r, c| {
        let (x, y) = (c - cc, cc - r);
        let sx = inv[0][0] * x + inv[0][1] * y;
        let sy = inv[1][0] * x + inv[1][1] * y;
        (cc - sy, sx + cc)
    })
}

fn permute(img: &Image, src: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Vec<f64> {
    let h = img.side;
    let mut out = Vec::with_capacity(h * h);
    for r in 0..h {
        for c in 0..h {
            out.push(src(r, c).map_or(0.0, |(sr, sc)| img.get(sr, sc) as f64));
        }
    }
    out
}

/// Applies `spec` to `img`.
pub fn apply_transform(img: &Image, spec: &TransformSpec) -> Result<Image, TransformError> {
    let h = img.side;
    spec.validate(h)?;
    let raw: Vec<f64> = match spec {
        TransformSpec::Translation { dx, dy } => permute(img, |r, c| {
            let sr = r as i64 - *dy as i64;
            let sc = c as i64 - *dx as i64;
            (sr >= 0 && sc >= 0 && sr < h as i64 && sc < h as i64).then_some((sr as usize, sc as usize))
        }),
        TransformSpec::Rotation { angle_deg } => {
            let t = angle_deg.to_radians();
            let (s, c) = (t.sin(), t.cos());
            centred_linear(img, [[c, s], [-s, c]])
        }
        TransformSpec::Reflection { axis } => permute(img, |r, c| {
            Some(match axis {
                Axis::Horizontal => (r, h - 1 - c),
                Axis::Vertical => (h - 1 - r, c),
            })
        }),
        TransformSpec::Shear { alpha_deg, beta_deg } => {
            // forward [[1, ta], [tb, 1 + ta·tb]] has unit determinant
            let ta = alpha_deg.to_radians().tan();
            let tb = beta_deg.to_radians().tan();
            centred_linear(img, [[1.0 + ta * tb, -ta], [-tb, 1.0]])
        }
        TransformSpec::Scale { s } => centred_linear(img, [[1.0 / s, 0.0], [0.0, 1.0 / s]]),
        TransformSpec::Fisheye { cx, cy, d } => inverse_map(img, |r, c| {
            let (x, y) = (c, r);
            let rad = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let tx = x + (x - cx) * d * rad;
            let ty = y + (y - cy) * d * rad;
            (ty, tx)
        }),
        TransformSpec::Hwave { a, f } => inverse_map(img, |r, c| (r + a * (f * r).cos(), c)),
        TransformSpec::Blackwhite { axis, split } => {
            let mut out: Vec<f64> = img.pixels.iter().map(|&v| v as f64).collect();
            for r in 0..h {
                for c in 0..h {
                    let idx = match axis {
                        Axis::Horizontal => c,
                        Axis::Vertical => r,
                    };
                    if idx >= *split {
                        out[r * h + c] = 1.0 - img.get(r, c) as f64;
                    }
                }
            }
            out
        }
        TransformSpec::Swap { perm } => {
            let half = h / 2;
            permute(img, |r, c| {
                let q = (r / half) * 2 + c / half;
                let src = perm[q] as usize;
                let (qr, qc) = (src / 2, src % 2);
                Some((qr * half + r % half, qc * half + c % half))
            })
        }
    };
    let mut pixels = Vec::with_capacity(raw.len());
    for (index, v) in raw.into_iter().enumerate() {
        let p = v.clamp(0.0, 1.0) as f32;
        if !(0.0..=1.0).contains(&p) {
            return Err(TransformError::PixelOutOfRange { index, value: p });
        }
        pixels.push(p);
    }
    Ok(Image { side: h, pixels })
}

/// Which side of an out-of-distribution parameter split to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodSide {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Full parameter grids.
    PaperGrid,
    /// Grid subset selected by an OOD split; only translation, rotation and
    /// shear define one.
    Constrained(OodSide),
}

fn pick<T: Copy, R: Rng + ?Sized>(items: &[T], rng: &mut R, family: Family, mode: SampleMode) -> Result<T, TransformError> {
    let constraint = match mode {
        SampleMode::Constrained(s) => Some(s),
        SampleMode::PaperGrid => None,
    };
    items
        .choose(rng)
        .copied()
        .ok_or(TransformError::EmptyAdmissibleSet { family, constraint })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    // quantised to f32 so the value survives the dataset format unchanged
    (lo + (hi - lo) * rng.random::<f64>()) as f32 as f64
}

/// Draws a spec uniformly from the admissible parameter set of `family`.
pub fn sample_spec<R: Rng + ?Sized>(
    family: Family,
    mode: SampleMode,
    side: usize,
    rng: &mut R,
) -> Result<TransformSpec, TransformError> {
    let constraint = match mode {
        SampleMode::Constrained(s) => Some(s),
        SampleMode::PaperGrid => None,
    };
    let unsupported = || TransformError::EmptyAdmissibleSet { family, constraint };
    let spec = match family {
        Family::Translation => {
            let mut grid = Vec::new();
            for &dx in &TRANSLATION_GRID {
                for &dy in &TRANSLATION_GRID {
                    let inner = dx.abs() <= 3 && dy.abs() <= 3;
                    let keep = match constraint {
                        None => true,
                        Some(OodSide::Train) => inner,
                        Some(OodSide::Test) => !inner,
                    };
                    if keep {
                        grid.push((dx, dy));
                    }
                }
            }
            let (dx, dy) = pick(&grid, rng, family, mode)?;
            TransformSpec::Translation { dx, dy }
        }
        Family::Rotation => {
            let grid: Vec<f64> = rotation_grid()
                .filter(|&a| match constraint {
                    None => true,
                    Some(OodSide::Train) => a <= 180.0,
                    Some(OodSide::Test) => a > 180.0,
                })
                .collect();
            TransformSpec::Rotation {
                angle_deg: pick(&grid, rng, family, mode)?,
            }
        }
        Family::Shear => {
            let mut grid = Vec::new();
            for &a in &SHEAR_GRID {
                for &b in &SHEAR_GRID {
                    let inner = a.abs() <= 30.0 && b.abs() <= 30.0;
                    let keep = match constraint {
                        None => true,
                        Some(OodSide::Train) => inner,
                        Some(OodSide::Test) => !inner,
                    };
                    if keep {
                        grid.push((a, b));
                    }
                }
            }
            let (alpha_deg, beta_deg) = pick(&grid, rng, family, mode)?;
            TransformSpec::Shear { alpha_deg, beta_deg }
        }
        _ if constraint.is_some() => return Err(unsupported()),
        Family::Reflection => TransformSpec::Reflection {
            axis: pick(&[Axis::Horizontal, Axis::Vertical], rng, family, mode)?,
        },
        Family::Scale => TransformSpec::Scale {
            s: pick(&SCALE_GRID, rng, family, mode)?,
        },
        Family::Fisheye => {
            let h = side as f64;
            TransformSpec::Fisheye {
                cx: uniform(rng, (h / 4.0, 3.0 * h / 4.0)),
                cy: uniform(rng, (h / 4.0, 3.0 * h / 4.0)),
                d: (uniform(rng, FISHEYE_STRENGTH) / h) as f32 as f64,
            }
        }
        Family::Hwave => TransformSpec::Hwave {
            a: uniform(rng, HWAVE_AMPLITUDE),
            f: uniform(rng, HWAVE_FREQUENCY),
        },
        Family::Blackwhite => {
            let axis = pick(&[Axis::Horizontal, Axis::Vertical], rng, family, mode)?;
            let split = rng.random_range(side / 4..=3 * side / 4);
            TransformSpec::Blackwhite { axis, split }
        }
        Family::Swap => {
            let mut perm = [0u8, 1, 2, 3];
            while perm == [0, 1, 2, 3] {
                perm.shuffle(rng);
            }
            TransformSpec::Swap { perm }
        }
    };
    spec.validate(side)?;
    Ok(spec)
}

/// The spec that undoes `spec` exactly on the pixel lattice.
pub fn invert_syntactic(spec: &TransformSpec) -> Result<TransformSpec, TransformError> {
    Ok(match spec {
        TransformSpec::Reflection { .. } | TransformSpec::Blackwhite { .. } => spec.clone(),
        TransformSpec::Swap { perm } => {
            let mut inv = [0u8; 4];
            for (q, &p) in perm.iter().enumerate() {
                inv[p as usize] = q as u8;
            }
            TransformSpec::Swap { perm: inv }
        }
        TransformSpec::Translation { dx, dy } => TransformSpec::Translation { dx: -dx, dy: -dy },
        TransformSpec::Rotation { angle_deg } => TransformSpec::Rotation {
            angle_deg: (360.0 - angle_deg).rem_euclid(360.0),
        },
        TransformSpec::Scale { s } if *s == 1.0 => spec.clone(),
        other => return Err(TransformError::NonInvertible(other.family())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(side: usize) -> Image {
        Image::from_fn(side, |r, c| ((r * side + c) as f64) / (side * side) as f64)
    }

    #[test]
    fn unit_scale_is_identity() {
        let img = ramp(12);
        assert_eq!(apply_transform(&img, &TransformSpec::Scale { s: 1.0 }).unwrap(), img);
    }

    #[test]
    fn zero_amplitude_wave_is_identity() {
        let img = ramp(10);
        let out = apply_transform(&img, &TransformSpec::Hwave { a: 0.0, f: 0.5 }).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn blackwhite_whole_image() {
        let img = Image::from_fn(8, |_, _| 0.3);
        let out = apply_transform(
            &img,
            &TransformSpec::Blackwhite {
                axis: Axis::Vertical,
                split: 0,
            },
        )
        .unwrap();
        assert!(out.pixels().iter().all(|&p| p == 0.7f32 || (p - 0.7).abs() < 1e-7));
    }

    #[test]
    fn blackwhite_inverts_only_one_part() {
        let img = Image::from_fn(8, |_, _| 0.25);
        let out = apply_transform(
            &img,
            &TransformSpec::Blackwhite {
                axis: Axis::Horizontal,
                split: 5,
            },
        )
        .unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let want = if c >= 5 { 0.75 } else { 0.25 };
                assert_eq!(out.get(r, c), want);
            }
        }
    }

    #[test]
    fn fisheye_keeps_centre_pixel() {
        let img = ramp(16);
        let out = apply_transform(&img, &TransformSpec::Fisheye { cx: 7.0, cy: 9.0, d: 0.01 }).unwrap();
        assert_eq!(out.get(9, 7), img.get(9, 7));
        assert_ne!(out, img);
    }

    #[test]
    fn translation_moves_pixel() {
        let mut px = vec![0.0; 100];
        px[2 * 10 + 3] = 1.0;
        let img = Image::new(10, px).unwrap();
        let out = apply_transform(&img, &TransformSpec::Translation { dx: 3, dy: -2 }).unwrap();
        assert_eq!(out.get(0, 6), 1.0);
        assert_eq!(out.pixels().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let img = ramp(8);
        assert!(apply_transform(&img, &TransformSpec::Swap { perm: [0, 0, 1, 2] }).is_err());
        assert!(apply_transform(&img, &TransformSpec::Scale { s: 0.0 }).is_err());
        assert!(apply_transform(
            &img,
            &TransformSpec::Blackwhite {
                axis: Axis::Vertical,
                split: 9
            }
        )
        .is_err());
        assert!(apply_transform(&Image::blank(9), &TransformSpec::Swap { perm: [1, 0, 3, 2] }).is_err());
        assert!(Image::new(7, vec![0.0; 49]).is_err());
        assert!(Image::new(8, vec![1.5; 64]).is_err());
    }

    #[test]
    fn inverse_examples() {
        let r = TransformSpec::Reflection { axis: Axis::Horizontal };
        assert_eq!(invert_syntactic(&r).unwrap(), r);
        let s = TransformSpec::Swap { perm: [1, 0, 3, 2] };
        assert_eq!(invert_syntactic(&s).unwrap(), s);
        assert_eq!(
            invert_syntactic(&TransformSpec::Translation { dx: 3, dy: -6 }).unwrap(),
            TransformSpec::Translation { dx: -3, dy: 6 }
        );
        assert_eq!(
            invert_syntactic(&TransformSpec::Swap { perm: [1, 2, 3, 0] }).unwrap(),
            TransformSpec::Swap { perm: [3, 0, 1, 2] }
        );
        assert!(matches!(
            invert_syntactic(&TransformSpec::Hwave { a: 1.0, f: 0.3 }),
            Err(TransformError::NonInvertible(Family::Hwave))
        ));
        assert!(invert_syntactic(&TransformSpec::Scale { s: 0.5 }).is_err());
    }

    #[test]
    fn constrained_sampling_respects_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            match sample_spec(Family::Rotation, SampleMode::Constrained(OodSide::Train), 16, &mut rng).unwrap() {
                TransformSpec::Rotation { angle_deg } => assert!(angle_deg <= 180.0 && angle_deg % 15.0 == 0.0),
                other => panic!("{other:?}"),
            }
            match sample_spec(Family::Translation, SampleMode::Constrained(OodSide::Test), 16, &mut rng).unwrap() {
                TransformSpec::Translation { dx, dy } => assert!(dx.abs() > 3 || dy.abs() > 3),
                other => panic!("{other:?}"),
            }
            match sample_spec(Family::Shear, SampleMode::Constrained(OodSide::Test), 16, &mut rng).unwrap() {
                TransformSpec::Shear { alpha_deg, beta_deg } => {
                    assert!(alpha_deg.abs() > 30.0 || beta_deg.abs() > 30.0)
                }
                other => panic!("{other:?}"),
            }
        }
        assert!(matches!(
            sample_spec(Family::Fisheye, SampleMode::Constrained(OodSide::Train), 16, &mut rng),
            Err(TransformError::EmptyAdmissibleSet { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic() {
        for fam in Family::ALL {
            let a = sample_spec(fam, SampleMode::PaperGrid, 16, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
            let b = sample_spec(fam, SampleMode::PaperGrid, 16, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn params_roundtrip_through_record_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for fam in Family::ALL {
            for _ in 0..20 {
                let s = sample_spec(fam, SampleMode::PaperGrid, 20, &mut rng).unwrap();
                let back = TransformSpec::decode_params(fam, &s.encode_params()).unwrap();
                assert_eq!(back, s);
            }
        }
    }
}
