//! Synthetic eye phantoms standing in for surgical video frames.
//!
//! Each sample is a sclera background with a (possibly elliptic) cornea/iris
//! region, a pupil disk, a faint lens ellipse and, for the instrument class,
//! a bright bar entering from the border. Rendering adds blunt edges, specular
//! highlights and sensor noise; the mask is rasterized from the geometry, not
//! from the rendered image, so it is exact.

pub mod augment;
pub mod io;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PhantomClass {
    Pupil,
    Iris,
    Lens,
    Instrument,
}

impl PhantomClass {
    pub const ALL: [PhantomClass; 4] = [
        PhantomClass::Pupil,
        PhantomClass::Iris,
        PhantomClass::Lens,
        PhantomClass::Instrument,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhantomClass::Pupil => "pupil",
            PhantomClass::Iris => "iris",
            PhantomClass::Lens => "lens",
            PhantomClass::Instrument => "instrument",
        }
    }
}

impl fmt::Display for PhantomClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhantomClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PhantomClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown class `{s}` (expected pupil, iris, lens, or instrument)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Generator stream tag; splits never share a stream.
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1 << 32,
            Split::Test => 2 << 32,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}` (expected train or test)"))),
        }
    }
}

/// Geometry and appearance ranges. Lengths are fractions of `min(H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub image_size: (usize, usize),
    pub class: PhantomClass,
    /// Maximum offset of the eye centre from the image centre.
    pub center_jitter: f64,
    pub pupil_radius: (f64, f64),
    /// Semi-major axis of the cornea ellipse.
    pub iris_radius: (f64, f64),
    /// Maximum `1 − minor/major` of the cornea ellipse.
    pub max_eccentricity: f64,
    pub bar_width: (f64, f64),
    pub noise_sigma: f64,
    /// Box-blur radius in pixels applied with probability `blur_prob`.
    pub blur_radius: usize,
    pub blur_prob: f64,
    pub highlight_prob: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(class: PhantomClass, image_size: (usize, usize), seed: u64) -> Self {
        PhantomSpec {
            image_size,
            class,
            center_jitter: 0.06,
            pupil_radius: (0.10, 0.16),
            iris_radius: (0.26, 0.34),
            max_eccentricity: 0.15,
            bar_width: (0.05, 0.09),
            noise_sigma: 0.03,
            blur_radius: 1,
            blur_prob: 0.5,
            highlight_prob: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::config(format!("phantom size {h}×{w} is below 8×8")));
        }
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                Err(Error::config(format!("{name} range ({lo}, {hi}) is empty or non-positive")))
            } else {
                Ok(())
            }
        };
        range("pupil_radius", self.pupil_radius)?;
        range("iris_radius", self.iris_radius)?;
        range("bar_width", self.bar_width)?;
        if !(0.0..1.0).contains(&self.max_eccentricity) {
            return Err(Error::config("max_eccentricity must lie in [0, 1)"));
        }
        if self.center_jitter < 0.0 || self.center_jitter + self.iris_radius.1 > 0.5 {
            return Err(Error::config(format!(
                "cornea (radius ≤ {} + jitter {}) does not fit inside the image",
                self.iris_radius.1, self.center_jitter
            )));
        }
        // The pupil must stay inside the cornea's minor axis.
        if self.pupil_radius.1 >= self.iris_radius.0 * (1.0 - self.max_eccentricity) {
            return Err(Error::config(format!(
                "pupil radius up to {} may exceed the cornea minor axis {}",
                self.pupil_radius.1,
                self.iris_radius.0 * (1.0 - self.max_eccentricity)
            )));
        }
        for (name, p) in [("blur_prob", self.blur_prob), ("highlight_prob", self.highlight_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Geometry of one phantom, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub cy: f64,
    pub cx: f64,
    pub pupil_r: f64,
    /// Cornea semi-axes and orientation.
    pub iris_a: f64,
    pub iris_b: f64,
    pub iris_theta: f64,
    pub lens_a: f64,
    pub lens_b: f64,
    /// Instrument bar: tip position, unit direction from the tip out to the border, width.
    pub bar_tip: (f64, f64),
    pub bar_dir: (f64, f64),
    pub bar_width: f64,
}

impl Geometry {
    fn in_ellipse(y: f64, x: f64, cy: f64, cx: f64, a: f64, b: f64, theta: f64) -> bool {
        let (dy, dx) = (y - cy, x - cx);
        let (s, c) = theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }

    /// Pixel-centre membership tests.
    pub fn in_pupil(&self, y: f64, x: f64) -> bool {
        (y - self.cy).powi(2) + (x - self.cx).powi(2) <= self.pupil_r * self.pupil_r
    }

    pub fn in_cornea(&self, y: f64, x: f64) -> bool {
        Self::in_ellipse(y, x, self.cy, self.cx, self.iris_a, self.iris_b, self.iris_theta)
    }

    pub fn in_iris(&self, y: f64, x: f64) -> bool {
        self.in_cornea(y, x) && !self.in_pupil(y, x)
    }

    pub fn in_lens(&self, y: f64, x: f64) -> bool {
        Self::in_ellipse(y, x, self.cy, self.cx, self.lens_a, self.lens_b, self.iris_theta)
    }

    /// Half-infinite strip from the tip outwards.
    pub fn in_bar(&self, y: f64, x: f64) -> bool {
        let (ty, tx) = self.bar_tip;
        let (dy, dx) = self.bar_dir;
        let (ry, rx) = (y - ty, x - tx);
        let along = ry * dy + rx * dx;
        let across = (rx * dy - ry * dx).abs();
        along >= 0.0 && across <= self.bar_width / 2.0
    }

    pub fn in_class(&self, class: PhantomClass, y: f64, x: f64) -> bool {
        match class {
            PhantomClass::Pupil => self.in_pupil(y, x),
            PhantomClass::Iris => self.in_iris(y, x),
            PhantomClass::Lens => self.in_lens(y, x),
            PhantomClass::Instrument => self.in_bar(y, x),
        }
    }

    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = spec.image_size;
        let s = h.min(w) as f64;
        let jit = spec.center_jitter * s;
        let cy = h as f64 / 2.0 + rng.gen_range(-jit..=jit);
        let cx = w as f64 / 2.0 + rng.gen_range(-jit..=jit);
        let between = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| rng.gen_range(lo..=hi) * s;
        let iris_a = between(rng, spec.iris_radius);
        let iris_b = iris_a * (1.0 - rng.gen_range(0.0..=spec.max_eccentricity));
        let iris_theta = rng.gen_range(0.0..std::f64::consts::PI);
        let pupil_r = between(rng, spec.pupil_radius);
        let lens_a = pupil_r + (iris_b - pupil_r) * rng.gen_range(0.3..0.7);
        let lens_b = pupil_r + (lens_a - pupil_r) * rng.gen_range(0.5..1.0);
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let reach = rng.gen_range(0.0..0.6) * iris_a;
        let bar_dir = (ang.sin(), ang.cos());
        let bar_tip = (cy + bar_dir.0 * reach, cx + bar_dir.1 * reach);
        Geometry {
            cy,
            cx,
            pupil_r,
            iris_a,
            iris_b,
            iris_theta,
            lens_a,
            lens_b,
            bar_tip,
            bar_dir,
            bar_width: between(rng, spec.bar_width),
        }
    }
}

/// One rendered phantom: image `(3, H, W)` in `[0, 1]`, mask `(1, H, W)` in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor4,
    pub mask: Tensor4,
    pub geometry: Geometry,
}

fn box_blur(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                s += plane[yy * w + x0..=yy * w + x1].iter().sum::<f64>();
            }
            out[y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

fn render(spec: &PhantomSpec, id: String, rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = spec.image_size;
    let g = Geometry::sample(spec, rng);
    let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3], amt: f64| c.map(|v| v + rng.gen_range(-amt..=amt));
    let sclera = jitter(rng, [0.86, 0.80, 0.78], 0.05);
    let iris = jitter(rng, [0.45, 0.32, 0.22], 0.08);
    let pupil = jitter(rng, [0.08, 0.07, 0.07], 0.03);
    // Transparent lens: a faint brightening only.
    let lens_gain = rng.gen_range(0.04..0.08);
    let tool = jitter(rng, [0.92, 0.92, 0.95], 0.04);

    let mut image = vec![0.0; 3 * h * w];
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut c = if g.in_pupil(py, px) {
                pupil
            } else if g.in_cornea(py, px) {
                iris
            } else {
                sclera
            };
            if g.in_lens(py, px) {
                c = c.map(|v| v + lens_gain);
            }
            if spec.class == PhantomClass::Instrument && g.in_bar(py, px) {
                c = tool;
            }
            for (ch, v) in c.into_iter().enumerate() {
                image[ch * h * w + y * w + x] = v;
            }
            mask[y * w + x] = g.in_class(spec.class, py, px) as u8 as f64;
        }
    }

    if spec.blur_radius > 0 && rng.gen_bool(spec.blur_prob) {
        for ch in 0..3 {
            let p = &mut image[ch * h * w..(ch + 1) * h * w];
            let b = box_blur(p, h, w, spec.blur_radius);
            p.copy_from_slice(&b);
        }
    }
    if rng.gen_bool(spec.highlight_prob) {
        let spots = rng.gen_range(1..=3);
        for _ in 0..spots {
            let hy = g.cy + rng.gen_range(-1.0..1.0) * g.iris_b;
            let hx = g.cx + rng.gen_range(-1.0..1.0) * g.iris_b;
            let rad = rng.gen_range(0.015..0.04) * h.min(w) as f64;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 + 0.5 - hy).powi(2) + (x as f64 + 0.5 - hx).powi(2);
                    let a = (-d2 / (2.0 * rad * rad)).exp();
                    for ch in 0..3 {
                        let v = &mut image[ch * h * w + y * w + x];
                        *v += (1.0 - *v) * a;
                    }
                }
            }
        }
    }
    for v in &mut image {
        *v = (*v + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
    }

    Sample {
        id,
        image: Tensor4::from_vec([1, 3, h, w], image).expect("image shape"),
        mask: Tensor4::from_vec([1, 1, h, w], mask).expect("mask shape"),
        geometry: g,
    }
}

/// Stable identifier of sample `index` of a split.
pub fn sample_id(class: PhantomClass, split: Split, index: usize) -> String {
    format!("{}-{}-{index:05}", class.name(), split.name())
}

/// Renders sample `index` of `split`; depends only on `(spec, split, index)`.
pub fn render_one(spec: &PhantomSpec, split: Split, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream() | index as u64);
    render(spec, sample_id(spec.class, split, index), &mut rng)
}

pub fn generate_samples(spec: &PhantomSpec, split: Split, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    if count as u64 >= 1 << 32 {
        return Err(Error::config("sample count exceeds the per-split stream range"));
    }
    Ok(par::map_range(count, |i| render_one(spec, split, i)))
}

/// `count` training-split samples.
pub fn generate(spec: &PhantomSpec, count: usize) -> Result<SampleBatch> {
    generate_split(spec, Split::Train, count)
}

pub fn generate_split(spec: &PhantomSpec, split: Split, count: usize) -> Result<SampleBatch> {
    SampleBatch::from_samples(&generate_samples(spec, split, count)?)
}

/// Images `(N, 3, H, W)`, binary masks `(N, 1, H, W)`, and their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub images: Tensor4,
    pub masks: Tensor4,
    pub ids: Vec<String>,
}

impl SampleBatch {
    pub fn new(images: Tensor4, masks: Tensor4, ids: Vec<String>) -> Result<Self> {
        let [n, _, h, w] = images.shape();
        if masks.shape() != [n, 1, h, w] || ids.len() != n {
            return Err(Error::config(format!(
                "batch parts disagree: images {:?}, masks {:?}, {} ids",
                images.shape(),
                masks.shape(),
                ids.len()
            )));
        }
        if let Some(i) = masks.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain(format!("mask value {} at flat index {i} is not binary", masks.data()[i])));
        }
        Ok(SampleBatch { images, masks, ids })
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let images: Vec<&Tensor4> = samples.iter().map(|s| &s.image).collect();
        let masks: Vec<&Tensor4> = samples.iter().map(|s| &s.mask).collect();
        SampleBatch::new(
            Tensor4::stack(&images)?,
            Tensor4::stack(&masks)?,
            samples.iter().map(|s| s.id.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor4 {
        self.images.slice_batch(i, 1).expect("index in range")
    }

    pub fn mask(&self, i: usize) -> Tensor4 {
        self.masks.slice_batch(i, 1).expect("index in range")
    }

    /// Images and masks of the listed samples, in the listed order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor4, Tensor4) {
        let images: Vec<Tensor4> = idx.iter().map(|&i| self.image(i)).collect();
        let masks: Vec<Tensor4> = idx.iter().map(|&i| self.mask(i)).collect();
        (
            Tensor4::stack(&images.iter().collect::<Vec<_>>()).expect("uniform shapes"),
            Tensor4::stack(&masks.iter().collect::<Vec<_>>()).expect("uniform shapes"),
        )
    }

    pub fn subset(&self, idx: &[usize]) -> SampleBatch {
        let (images, masks) = self.gather(idx);
        SampleBatch {
            images,
            masks,
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pupil_mask_matches_lattice_disk_count() {
        let spec = PhantomSpec::new(PhantomClass::Pupil, (64, 64), 4);
        for s in generate_samples(&spec, Split::Train, 5).unwrap() {
            let g = s.geometry;
            // Independent recount: lattice points (i + ½, j + ½) within the radius.
            let mut count = 0;
            for i in 0..64 {
                for j in 0..64 {
                    let dy = i as f64 + 0.5 - g.cy;
                    let dx = j as f64 + 0.5 - g.cx;
                    if dy * dy + dx * dx <= g.pupil_r * g.pupil_r {
                        count += 1;
                    }
                }
            }
            assert_eq!(s.mask.sum() as usize, count);
            let area = std::f64::consts::PI * g.pupil_r * g.pupil_r;
            assert!((count as f64 - area).abs() < 2.0 * std::f64::consts::PI * g.pupil_r + 4.0);
        }
    }

    #[test]
    fn same_seed_same_batch_and_splits_differ() {
        let spec = PhantomSpec::new(PhantomClass::Lens, (32, 32), 11);
        let a = generate(&spec, 3).unwrap();
        assert_eq!(a, generate(&spec, 3).unwrap());
        let t = generate_split(&spec, Split::Test, 3).unwrap();
        assert_ne!(a.images, t.images);
        assert!(a.ids.iter().all(|id| !t.ids.contains(id)));
        // A sample does not depend on how many others were generated.
        assert_eq!(generate(&spec, 1).unwrap().images, a.subset(&[0]).images);
    }

    #[test]
    fn iris_and_pupil_are_disjoint() {
        let mut spec = PhantomSpec::new(PhantomClass::Iris, (48, 48), 2);
        let iris = generate_samples(&spec, Split::Train, 4).unwrap();
        spec.class = PhantomClass::Pupil;
        let pupil = generate_samples(&spec, Split::Train, 4).unwrap();
        for (i, p) in iris.iter().zip(&pupil) {
            assert_eq!(i.geometry, p.geometry);
            assert!(i.mask.sum() > 0.0 && p.mask.sum() > 0.0);
            let overlap: f64 = i.mask.data().iter().zip(p.mask.data()).map(|(a, b)| a * b).sum();
            assert_eq!(overlap, 0.0);
        }
    }

    #[test]
    fn every_class_has_foreground_and_valid_ranges() {
        for class in PhantomClass::ALL {
            let b = generate(&PhantomSpec::new(class, (32, 32), 7), 4).unwrap();
            assert!(b.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for i in 0..4 {
                assert!(b.mask(i).sum() > 0.0, "{class} sample {i} is empty");
            }
        }
    }

    #[test]
    fn infeasible_geometry_is_config_error() {
        let mut spec = PhantomSpec::new(PhantomClass::Pupil, (32, 32), 0);
        spec.iris_radius = (0.3, 0.48);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = PhantomSpec::new(PhantomClass::Pupil, (32, 32), 0);
        spec.pupil_radius = (0.2, 0.3);
        assert!(matches!(generate(&spec, 1), Err(Error::Config(_))));
        assert!(generate(&PhantomSpec::new(PhantomClass::Pupil, (32, 32), 0), 0).is_err());
    }
}
