//! Photometric and geometric augmentation.
//!
//! Geometric ops move image and mask together; masks are resampled
//! nearest-neighbour so they stay binary. Photometric ops never touch masks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor4;

use super::SampleBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    MotionBlur,
    MedianBlur,
    BrightnessContrast,
    Shift,
    Scale,
    Rotate,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 6] = [
        AugmentKind::MotionBlur,
        AugmentKind::MedianBlur,
        AugmentKind::BrightnessContrast,
        AugmentKind::Shift,
        AugmentKind::Scale,
        AugmentKind::Rotate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::MotionBlur => "motion_blur",
            AugmentKind::MedianBlur => "median_blur",
            AugmentKind::BrightnessContrast => "brightness_contrast",
            AugmentKind::Shift => "shift",
            AugmentKind::Scale => "scale",
            AugmentKind::Rotate => "rotate",
        }
    }

    /// Draws concrete parameters for this kind.
    pub fn sample(self, rng: &mut impl Rng) -> AugmentOp {
        match self {
            AugmentKind::MotionBlur => AugmentOp::MotionBlur {
                length: rng.gen_range(3..=7),
                angle: rng.gen_range(0.0..180.0),
            },
            AugmentKind::MedianBlur => AugmentOp::MedianBlur { radius: 1 },
            AugmentKind::BrightnessContrast => AugmentOp::BrightnessContrast {
                brightness: rng.gen_range(-0.15..=0.15),
                contrast: rng.gen_range(0.8..=1.2),
            },
            AugmentKind::Shift => AugmentOp::Shift {
                dy: rng.gen_range(-4..=4),
                dx: rng.gen_range(-4..=4),
            },
            AugmentKind::Scale => AugmentOp::Scale {
                factor: rng.gen_range(0.85..=1.15),
            },
            AugmentKind::Rotate => AugmentOp::Rotate {
                degrees: rng.gen_range(-30.0..=30.0),
            },
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AugmentKind::ALL.iter().map(|k| k.name()).collect();
                Error::config(format!("unknown augmentation `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// An augmentation with concrete parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    /// Average of `length` taps along a line at `angle` degrees.
    MotionBlur { length: usize, angle: f64 },
    /// Median over a `(2r+1)²` window, edges clamped.
    MedianBlur { radius: usize },
    /// `(v − ½)·contrast + ½ + brightness`, clamped to `[0, 1]`.
    BrightnessContrast { brightness: f64, contrast: f64 },
    /// Integer translation; uncovered pixels become 0.
    Shift { dy: i64, dx: i64 },
    /// Zoom about the image centre.
    Scale { factor: f64 },
    /// Counter-clockwise rotation about the image centre.
    Rotate { degrees: f64 },
}

impl AugmentOp {
    pub fn is_geometric(&self) -> bool {
        matches!(self, AugmentOp::Shift { .. } | AugmentOp::Scale { .. } | AugmentOp::Rotate { .. })
    }
}

fn clamp_idx(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

fn motion_blur(plane: &[f64], h: usize, w: usize, length: usize, angle: f64) -> Vec<f64> {
    let (s, c) = angle.to_radians().sin_cos();
    let half = (length as f64 - 1.0) / 2.0;
    let taps: Vec<(i64, i64)> = (0..length)
        .map(|k| {
            let t = k as f64 - half;
            ((t * s).round() as i64, (t * c).round() as i64)
        })
        .collect();
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = taps
                .iter()
                .map(|&(dy, dx)| plane[clamp_idx(y as i64 + dy, h) * w + clamp_idx(x as i64 + dx, w)])
                .sum();
            out[y * w + x] = acc / taps.len() as f64;
        }
    }
    out
}

fn median_blur(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let r = r as i64;
    let mut out = vec![0.0; plane.len()];
    let mut window = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    window.push(plane[clamp_idx(y as i64 + dy, h) * w + clamp_idx(x as i64 + dx, w)]);
                }
            }
            window.sort_by(f64::total_cmp);
            out[y * w + x] = window[window.len() / 2];
        }
    }
    out
}

/// Source coordinate (pixel-centre convention) for every output pixel, or
/// `None` when it falls outside the image.
type InverseMap = dyn Fn(usize, usize) -> Option<(f64, f64)> + Sync;

fn warp(plane: &[f64], h: usize, w: usize, map: &InverseMap, bilinear: bool) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let Some((sy, sx)) = map(y, x) else { continue };
            // Pixel-centre coordinates → index space.
            let (fy, fx) = (sy - 0.5, sx - 0.5);
            if fy < -0.5 || fx < -0.5 || fy > h as f64 - 0.5 || fx > w as f64 - 0.5 {
                continue;
            }
            out[y * w + x] = if bilinear {
                let (y0, x0) = (fy.floor(), fx.floor());
                let (ty, tx) = (fy - y0, fx - x0);
                let at = |yy: f64, xx: f64| {
                    plane[clamp_idx(yy as i64, h) * w + clamp_idx(xx as i64, w)]
                };
                let top = at(y0, x0) * (1.0 - tx) + if tx > 0.0 { at(y0, x0 + 1.0) * tx } else { 0.0 };
                let bot = if ty > 0.0 {
                    at(y0 + 1.0, x0) * (1.0 - tx) + if tx > 0.0 { at(y0 + 1.0, x0 + 1.0) * tx } else { 0.0 }
                } else {
                    0.0
                };
                top * (1.0 - ty) + bot * ty
            } else {
                plane[clamp_idx(fy.round() as i64, h) * w + clamp_idx(fx.round() as i64, w)]
            };
        }
    }
    out
}

/// Exact quarter-turn rotation of a square plane (counter-clockwise `k` times).
fn quarter_turns(plane: &[f64], n: usize, k: i64) -> Vec<f64> {
    let mut out = plane.to_vec();
    for _ in 0..k.rem_euclid(4) {
        let src = out.clone();
        for y in 0..n {
            for x in 0..n {
                // Counter-clockwise (y up): out[y][x] = src[x][n-1-y].
                out[y * n + x] = src[x * n + (n - 1 - y)];
            }
        }
    }
    out
}

/// Applies `op` to one sample's image `(1, 3, H, W)` and mask `(1, 1, H, W)`.
pub fn apply(op: AugmentOp, image: &Tensor4, mask: &Tensor4) -> (Tensor4, Tensor4) {
    let [_, _, h, w] = image.shape();
    let plane = h * w;
    let per_plane = |t: &Tensor4, f: &dyn Fn(&[f64]) -> Vec<f64>| {
        let data: Vec<f64> = t.data().chunks(plane).flat_map(f).collect();
        Tensor4::from_vec(t.shape(), data).expect("same shape")
    };
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    match op {
        AugmentOp::MotionBlur { length, angle } => (
            per_plane(image, &|p| motion_blur(p, h, w, length.max(1), angle)),
            mask.clone(),
        ),
        AugmentOp::MedianBlur { radius } => {
            (per_plane(image, &|p| median_blur(p, h, w, radius)), mask.clone())
        }
        AugmentOp::BrightnessContrast { brightness, contrast } => (
            {
                // Written as an affine map so unit contrast and zero brightness are exact.
                let offset = 0.5 * (1.0 - contrast) + brightness;
                image.map(|v| (v * contrast + offset).clamp(0.0, 1.0))
            },
            mask.clone(),
        ),
        AugmentOp::Shift { dy, dx } => {
            let map = move |y: usize, x: usize| {
                Some((y as f64 + 0.5 - dy as f64, x as f64 + 0.5 - dx as f64))
            };
            (
                per_plane(image, &|p| warp(p, h, w, &map, false)),
                per_plane(mask, &|p| warp(p, h, w, &map, false)),
            )
        }
        AugmentOp::Scale { factor } => {
            let map = move |y: usize, x: usize| {
                Some(((y as f64 + 0.5 - cy) / factor + cy, (x as f64 + 0.5 - cx) / factor + cx))
            };
            (
                per_plane(image, &|p| warp(p, h, w, &map, true)),
                per_plane(mask, &|p| warp(p, h, w, &map, false)),
            )
        }
        AugmentOp::Rotate { degrees } => {
            let turns = degrees / 90.0;
            if h == w && turns == turns.round() {
                let k = turns as i64;
                return (
                    per_plane(image, &|p| quarter_turns(p, h, k)),
                    per_plane(mask, &|p| quarter_turns(p, h, k)),
                );
            }
            // Image rows grow downwards, so counter-clockwise on screen is a
            // negative angle in (y, x) coordinates.
            let (s, co) = degrees.to_radians().sin_cos();
            let map = move |y: usize, x: usize| {
                let (v, u) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                Some((co * v + s * u + cy, -s * v + co * u + cx))
            };
            (
                per_plane(image, &|p| warp(p, h, w, &map, true)),
                per_plane(mask, &|p| warp(p, h, w, &map, false)),
            )
        }
    }
}

/// Applies every listed kind, in order, to every sample with parameters drawn
/// from `(seed, sample index)`.
pub fn augment(batch: &SampleBatch, kinds: &[AugmentKind], seed: u64) -> Result<SampleBatch> {
    if kinds.is_empty() {
        return Err(Error::config("augmentation list is empty"));
    }
    let out: Vec<(Tensor4, Tensor4)> = par::map_range(batch.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (mut img, mut mask) = (batch.image(i), batch.mask(i));
        for k in kinds {
            (img, mask) = apply(k.sample(&mut rng), &img, &mask);
        }
        (img, mask)
    });
    let images: Vec<&Tensor4> = out.iter().map(|p| &p.0).collect();
    let masks: Vec<&Tensor4> = out.iter().map(|p| &p.1).collect();
    SampleBatch::new(Tensor4::stack(&images)?, Tensor4::stack(&masks)?, batch.ids.clone())
}
