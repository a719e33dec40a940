//! Encoder-decoder segmentation network with optional calibration blocks.
//!
//! The encoder is a VGG16 convolution stack (stages of 2, 2, 3, 3, 3
//! conv3×3+BN+ReLU layers) with 2×2 max pooling between stages. Each of the
//! four decoder stages upsamples bilinearly, concatenates the symmetric
//! encoder output, and applies two conv3×3+BN+ReLU layers. A 1×1 conv and a
//! sigmoid produce the mask probability map.
//!
//! Calibration blocks sit after E5 and after every decoder stage.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::blocks::{ReCal, ScSeBlock, SeBlock};
use crate::error::{Error, Result};
use crate::layers::{apply_bn_updates, BnUpdate, Conv2d, ConvBnRelu, Ctx, LayerInfo};
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor4;

pub const ENCODER_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
pub const ENCODER_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
pub const DECODER_WIDTHS: [usize; 4] = [256, 128, 64, 32];

/// Calibration placement names, in network order.
pub const PLACEMENTS: [&str; 5] = ["e5", "d4", "d3", "d2", "d1"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    ReCal,
    Baseline,
    ScSe,
    Se,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ReCal, Variant::Baseline, Variant::ScSe, Variant::Se];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ReCal => "recal",
            Variant::Baseline => "baseline",
            Variant::ScSe => "scse",
            Variant::Se => "se",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::ReCal => "ReCal-Net",
            Variant::Baseline => "Baseline",
            Variant::ScSe => "scSE-Net",
            Variant::Se => "SE-Net",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant `{s}` (expected recal, baseline, scse, or se)"
                ))
            })
    }
}

/// Named network stages whose outputs can be captured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    E1,
    E2,
    E3,
    E4,
    E5,
    D4,
    D3,
    D2,
    D1,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::E1,
        Stage::E2,
        Stage::E3,
        Stage::E4,
        Stage::E5,
        Stage::D4,
        Stage::D3,
        Stage::D2,
        Stage::D1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::E1 => "E1",
            Stage::E2 => "E2",
            Stage::E3 => "E3",
            Stage::E4 => "E4",
            Stage::E5 => "E5",
            Stage::D4 => "D4",
            Stage::D3 => "D3",
            Stage::D2 => "D2",
            Stage::D1 => "D1",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown stage `{s}` (expected E1..E5 or D1..D4)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Divisor applied to every channel width; 1 is full scale.
    pub width_scale: usize,
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    /// Whether each of [`PLACEMENTS`] gets a calibration block.
    pub placements: [bool; 5],
}

impl ModelConfig {
    pub fn new(variant: Variant, width_scale: usize, input_size: (usize, usize)) -> Self {
        ModelConfig {
            variant,
            width_scale,
            input_size,
            in_channels: 3,
            out_channels: 1,
            placements: [variant != Variant::Baseline; 5],
        }
    }

    /// Full-width network at 512×512 input.
    pub fn paper_scale(variant: Variant) -> Self {
        Self::new(variant, 1, (512, 512))
    }

    fn scaled(&self, w: usize) -> Result<usize> {
        if self.width_scale == 0 || w % self.width_scale != 0 {
            return Err(Error::config(format!(
                "width_scale {} does not divide channel width {w}",
                self.width_scale
            )));
        }
        Ok(w / self.width_scale)
    }

    pub fn encoder_widths(&self) -> Result<[usize; 5]> {
        let mut out = [0; 5];
        for (o, w) in out.iter_mut().zip(ENCODER_WIDTHS) {
            *o = self.scaled(w)?;
        }
        Ok(out)
    }

    pub fn decoder_widths(&self) -> Result<[usize; 4]> {
        let mut out = [0; 4];
        for (o, w) in out.iter_mut().zip(DECODER_WIDTHS) {
            *o = self.scaled(w)?;
        }
        Ok(out)
    }

    /// Channel count at each of [`PLACEMENTS`].
    pub fn placement_widths(&self) -> Result<[usize; 5]> {
        let e = self.encoder_widths()?;
        let d = self.decoder_widths()?;
        Ok([e[4], d[0], d[1], d[2], d[3]])
    }

    /// Whether calibration is active at placement `i`.
    pub fn calibrated(&self, i: usize) -> bool {
        self.variant != Variant::Baseline && self.placements[i]
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_widths()?;
        self.decoder_widths()?;
        check_spatial(self.input_size.0, self.input_size.1)?;
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("in_channels and out_channels must be positive"));
        }
        Ok(())
    }

    /// Canonical `key=value` text; the checkpoint digest is computed over it.
    pub fn to_text(&self) -> String {
        let placements: String = self.placements.iter().map(|&p| if p { '1' } else { '0' }).collect();
        format!(
            "variant={}\nwidth_scale={}\ninput_h={}\ninput_w={}\nin_channels={}\nout_channels={}\nplacements={}\n",
            self.variant,
            self.width_scale,
            self.input_size.0,
            self.input_size.1,
            self.in_channels,
            self.out_channels,
            placements
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::new(Variant::ReCal, 1, (0, 0));
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("model config line without `=`: {line}")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::config(format!("model config `{k}`: bad integer `{v}`")))
            };
            match k {
                "variant" => cfg.variant = v.parse()?,
                "width_scale" => cfg.width_scale = num()?,
                "input_h" => cfg.input_size.0 = num()?,
                "input_w" => cfg.input_size.1 = num()?,
                "in_channels" => cfg.in_channels = num()?,
                "out_channels" => cfg.out_channels = num()?,
                "placements" => {
                    if v.len() != 5 || !v.chars().all(|c| c == '0' || c == '1') {
                        return Err(Error::config(format!("placements must be 5 binary digits, got `{v}`")));
                    }
                    for (p, c) in cfg.placements.iter_mut().zip(v.chars()) {
                        *p = c == '1';
                    }
                }
                _ => return Err(Error::config(format!("unknown model config key `{k}`"))),
            }
            seen += 1;
        }
        if seen != 7 {
            return Err(Error::config("model config is missing keys"));
        }
        Ok(cfg)
    }
}

fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::config(format!(
            "input spatial size {h}x{w} must be positive and divisible by 16"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum Calibration {
    ReCal(ReCal),
    ScSe(ScSeBlock),
    Se(SeBlock),
}

impl Calibration {
    fn build(store: &mut ParamStore, variant: Variant, name: &str, c: usize) -> Result<Option<Self>> {
        Ok(match variant {
            Variant::Baseline => None,
            Variant::ReCal => Some(Calibration::ReCal(ReCal::new(store, name, c)?)),
            Variant::ScSe => Some(Calibration::ScSe(ScSeBlock::new(store, name, c)?)),
            Variant::Se => Some(Calibration::Se(SeBlock::new(store, name, c)?)),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Calibration::ReCal(b) => b.forward(ctx, x),
            Calibration::ScSe(b) => b.forward(ctx, x),
            Calibration::Se(b) => b.forward(ctx, x),
        }
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        match self {
            Calibration::ReCal(b) => b.infos(),
            Calibration::ScSe(b) => b.infos(),
            Calibration::Se(b) => b.infos(),
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    first: ConvBnRelu,
    second: ConvBnRelu,
}

/// Output of [`Model::forward`].
pub struct ForwardPass<'t> {
    /// Mask probabilities, (N, out_channels, H, W).
    pub probs: Var<'t>,
    /// Captured stage outputs, in the order requested.
    pub stages: Vec<(Stage, Var<'t>)>,
    /// Running-statistics updates to commit after a training step.
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: Vec<Vec<ConvBnRelu>>,
    decoder: Vec<DecoderStage>,
    calib: Vec<Option<Calibration>>,
    head: Conv2d,
}

/// Name prefix of the calibration block at placement `i`.
pub fn placement_prefix(i: usize) -> String {
    format!("cal.{}.", PLACEMENTS[i])
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let ew = config.encoder_widths()?;
        let dw = config.decoder_widths()?;
        let pw = config.placement_widths()?;

        let mut encoder = Vec::with_capacity(5);
        let mut cin = config.in_channels;
        for (s, (&w, &depth)) in ew.iter().zip(&ENCODER_DEPTHS).enumerate() {
            let mut layers = Vec::with_capacity(depth);
            for l in 0..depth {
                layers.push(ConvBnRelu::new(&mut store, &format!("enc{}.{}", s + 1, l + 1), cin, w)?);
                cin = w;
            }
            encoder.push(layers);
        }

        let mut decoder = Vec::with_capacity(4);
        for (i, &w) in dw.iter().enumerate() {
            let skip = ew[3 - i];
            let name = format!("dec{}", 4 - i);
            decoder.push(DecoderStage {
                first: ConvBnRelu::new(&mut store, &format!("{name}.1"), cin + skip, w)?,
                second: ConvBnRelu::new(&mut store, &format!("{name}.2"), w, w)?,
            });
            cin = w;
        }

        let mut calib = Vec::with_capacity(5);
        for (i, &c) in pw.iter().enumerate() {
            calib.push(if config.calibrated(i) {
                Calibration::build(&mut store, config.variant, &format!("cal.{}", PLACEMENTS[i]), c)?
            } else {
                None
            });
        }

        let head = Conv2d::new(&mut store, "head", ConvSpec::new(cin, config.out_channels, 1))?;
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
            calib,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn calibration(&self, i: usize) -> Option<&Calibration> {
        self.calib[i].as_ref()
    }

    pub fn check_input(&self, images: &Tensor4) -> Result<()> {
        let [_, c, h, w] = images.shape();
        if c != self.config.in_channels {
            return Err(Error::config(format!(
                "images have {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        check_spatial(h, w)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        images: &Tensor4,
        train: bool,
        capture: &[Stage],
    ) -> Result<ForwardPass<'t>> {
        self.check_input(images)?;
        let ctx = Ctx::new(tape, &self.store, train);
        let mut captured: Vec<(Stage, Var<'t>)> = Vec::new();
        let mut keep = |stage: Stage, v: Var<'t>| {
            if capture.contains(&stage) {
                captured.push((stage, v));
            }
        };

        let mut x = tape.constant(images.clone());
        let mut skips = Vec::with_capacity(4);
        for (s, layers) in self.encoder.iter().enumerate() {
            if s > 0 {
                x = ops::max_pool2(x)?;
            }
            for l in layers {
                x = l.forward(&ctx, x)?;
            }
            if s < 4 {
                skips.push(x);
                keep(Stage::ALL[s], x);
            }
        }
        if let Some(c) = &self.calib[0] {
            x = c.forward(&ctx, x)?;
        }
        keep(Stage::E5, x);

        for (i, d) in self.decoder.iter().enumerate() {
            let up = ops::bilinear_upsample2(x)?;
            let skip = skips[3 - i];
            x = ops::concat(up, skip)?;
            x = d.first.forward(&ctx, x)?;
            x = d.second.forward(&ctx, x)?;
            if let Some(c) = &self.calib[i + 1] {
                x = c.forward(&ctx, x)?;
            }
            keep(Stage::ALL[5 + i], x);
        }

        let probs = ops::sigmoid(self.head.forward(&ctx, x)?);
        captured.sort_by_key(|(s, _)| capture.iter().position(|c| c == s));
        Ok(ForwardPass {
            probs,
            stages: captured,
            bn_updates: ctx.take_bn_updates(),
        })
    }

    /// Eval-mode probabilities as a plain tensor.
    pub fn predict(&self, images: &Tensor4) -> Result<Tensor4> {
        let tape = Tape::new();
        let pass = self.forward(&tape, images, false, &[])?;
        let probs = pass.probs.value();
        Ok((*probs).clone())
    }

    pub fn commit_bn(&mut self, updates: &[BnUpdate]) {
        apply_bn_updates(&mut self.store, updates);
    }

    /// Structural walk: `(prefix, layer)` for every parameterized layer.
    pub fn layer_walk(&self) -> Vec<(String, LayerInfo)> {
        let mut out = Vec::new();
        for (s, layers) in self.encoder.iter().enumerate() {
            for l in layers {
                out.extend(l.infos().into_iter().map(|i| (format!("enc{}.", s + 1), i)));
            }
        }
        for (i, d) in self.decoder.iter().enumerate() {
            for l in [&d.first, &d.second] {
                out.extend(l.infos().into_iter().map(|info| (format!("dec{}.", 4 - i), info)));
            }
        }
        for (i, c) in self.calib.iter().enumerate() {
            if let Some(c) = c {
                out.extend(c.infos().into_iter().map(|info| (placement_prefix(i), info)));
            }
        }
        out.push(("head.".into(), self.head.info()));
        out
    }
}

/// `(C, H, W)` of every stage output for an input of `input_size`, derived
/// from the topology alone.
pub fn stage_shapes(config: &ModelConfig) -> Result<Vec<(Stage, [usize; 3])>> {
    config.validate()?;
    let (h, w) = config.input_size;
    let ew = config.encoder_widths()?;
    let dw = config.decoder_widths()?;
    let mut out = Vec::with_capacity(9);
    for (s, &c) in ew.iter().enumerate() {
        out.push((Stage::ALL[s], [c, h >> s, w >> s]));
    }
    for (i, &c) in dw.iter().enumerate() {
        out.push((Stage::ALL[5 + i], [c, h >> (3 - i), w >> (3 - i)]));
    }
    Ok(out)
}

/// Parameter counts of one placement, by two independent routes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementCensus {
    pub placement: &'static str,
    pub channels: usize,
    /// Convolution weights summed over the registered parameter slots.
    pub store_weights: usize,
    /// Convolution weights recounted from the layer walk's conv geometry.
    pub walk_weights: usize,
    /// All learnable values (biases and norm parameters included).
    pub store_total: usize,
}

#[derive(Clone, Debug)]
pub struct Census {
    pub variant: Variant,
    pub placements: Vec<PlacementCensus>,
    /// Every learnable value of the model.
    pub total: usize,
    /// Same, recounted from the layer walk.
    pub walk_total: usize,
    /// Learnable values outside the calibration placements.
    pub backbone: usize,
}

impl Census {
    pub fn calibration_weights(&self) -> usize {
        self.placements.iter().map(|p| p.store_weights).sum()
    }

    pub fn calibration_total(&self) -> usize {
        self.placements.iter().map(|p| p.store_total).sum()
    }
}

pub fn census(model: &Model) -> Census {
    let store = model.store();
    let walk = model.layer_walk();
    let widths = model.config().placement_widths().expect("validated at build");
    let placements = (0..5)
        .filter(|&i| model.calibration(i).is_some())
        .map(|i| {
            let prefix = placement_prefix(i);
            PlacementCensus {
                placement: PLACEMENTS[i],
                channels: widths[i],
                store_weights: store.weight_census(&prefix),
                walk_weights: walk
                    .iter()
                    .filter(|(p, _)| *p == prefix)
                    .map(|(_, l)| l.weight_count())
                    .sum(),
                store_total: store.total_census(&prefix),
            }
        })
        .collect();
    let total = store.total_census("");
    Census {
        variant: model.config().variant,
        placements,
        total,
        walk_total: walk.iter().map(|(_, l)| l.param_count()).sum(),
        backbone: store.census(|p| !p.name.starts_with("cal.")),
    }
}

/// Per-stage channel-mean maps, min-max scaled to 8-bit grayscale.
pub fn activation_maps(
    model: &Model,
    images: &Tensor4,
    stages: &[Stage],
) -> Result<Vec<(Stage, usize, usize, Vec<u8>)>> {
    let tape = Tape::new();
    let pass = model.forward(&tape, images, false, stages)?;
    let mut out = Vec::with_capacity(stages.len());
    for (stage, v) in pass.stages {
        let t = v.value();
        let [_, c, h, w] = t.shape();
        let mut mean = vec![0.0; h * w];
        for ch in 0..c {
            for (m, &x) in mean.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
                *m += x / c as f64;
            }
        }
        let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels = mean
            .iter()
            .map(|&m| ((m - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        out.push((stage, h, w, pixels));
    }
    Ok(out)
}
