//! Feature-map calibration blocks.
//!
//! [`ReCal`] combines a region-wise squeeze ([`ResBlock`]) and a channel-wise
//! squeeze ([`ChsBlock`]). The input is rescaled by each attention map, each
//! result is layer-normalized, the two calibrated maps are interleaved channel
//! by channel, and a 3×3 convolution with `C` groups fuses every
//! (channel-calibrated, region-calibrated) pair into one output channel.
//!
//! [`SeBlock`] and [`ScSeBlock`] are the squeeze-and-excitation units used as
//! drop-in alternatives at the same positions.
//!
//! Weight accounting: every convolution carries a bias at runtime, but the
//! census used throughout counts convolution weights only, which makes a
//! ReCal module on `C` channels exactly `C² + 22C + 4` weights
//! (`4C + 4` region, `C²` channel, `18C` fusion).

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ctx, LayerInfo, LayerNorm};
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;

/// Bottleneck divisor of the channel squeeze.
pub const REDUCTION: usize = 2;

/// Kernel sides of the stride-1 average-pool pyramid.
pub const POOL_KERNELS: [usize; 3] = [3, 5, 7];

fn pointwise(cin: usize, cout: usize) -> ConvSpec {
    ConvSpec::new(cin, cout, 1)
}

fn check_reduction(c: usize, r: usize) -> Result<()> {
    if r == 0 || c % r != 0 || c / r == 0 {
        return Err(Error::config(format!(
            "reduction {r} must divide channel count {c} and leave at least one channel"
        )));
    }
    Ok(())
}

/// Region-wise squeeze: `(N, C, H, W) → (N, 1, H, W)` attention in `[0, 1]`.
///
/// Three pooled descriptors (3×3, 5×5, 7×7 stride-1 average pools, each
/// through a 1×1 `C→1` conv) and one pixel-wise descriptor (1×1 `C→1` conv on
/// the input) are concatenated and fused by a 1×1 `4→1` conv, then squashed
/// by a sigmoid.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pooled: [Conv2d; 3],
    direct: Conv2d,
    fuse: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let mut pooled = Vec::with_capacity(3);
        for k in POOL_KERNELS {
            pooled.push(Conv2d::new(store, &format!("{name}.pool{k}"), pointwise(c, 1))?);
        }
        Ok(ResBlock {
            pooled: pooled.try_into().expect("three kernels"),
            direct: Conv2d::new(store, &format!("{name}.pixel"), pointwise(c, 1))?,
            fuse: Conv2d::new(store, &format!("{name}.fuse"), pointwise(4, 1))?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let mut desc = None;
        for (conv, k) in self.pooled.iter().zip(POOL_KERNELS) {
            let d = conv.forward(ctx, ops::avg_pool(x, (k, k), 1)?)?;
            desc = Some(match desc {
                None => d,
                Some(acc) => ops::concat(acc, d)?,
            });
        }
        let desc = ops::concat(desc.expect("non-empty"), self.direct.forward(ctx, x)?)?;
        Ok(ops::sigmoid(self.fuse.forward(ctx, desc)?))
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        let mut v: Vec<_> = self.pooled.iter().map(Conv2d::info).collect();
        v.push(self.direct.info());
        v.push(self.fuse.info());
        v
    }
}

/// Channel-wise squeeze: `(N, C, H, W) → (N, C, 1, 1)` non-negative attention.
///
/// Global average pool, 1×1 `C→C/r`, ReLU, 1×1 `C/r→C`, ReLU.
#[derive(Clone, Debug)]
pub struct ChsBlock {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl ChsBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, r: usize) -> Result<Self> {
        check_reduction(c, r)?;
        Ok(ChsBlock {
            squeeze: Conv2d::new(store, &format!("{name}.squeeze"), pointwise(c, c / r))?,
            excite: Conv2d::new(store, &format!("{name}.excite"), pointwise(c / r, c))?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let z = ops::global_avg_pool(x)?;
        let z = ops::relu(self.squeeze.forward(ctx, z)?);
        Ok(ops::relu(self.excite.forward(ctx, z)?))
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        vec![self.squeeze.info(), self.excite.info()]
    }
}

/// Intermediate tensors of one [`ReCal`] forward pass.
pub struct ReCalTrace<'t> {
    pub region: Var<'t>,
    pub channel: Var<'t>,
    pub f_re: Var<'t>,
    pub f_ch: Var<'t>,
    pub concat: Var<'t>,
    pub out: Var<'t>,
}

/// Region-channel calibration module; output shape equals input shape.
#[derive(Clone, Debug)]
pub struct ReCal {
    channels: usize,
    res: ResBlock,
    chs: ChsBlock,
    norm_re: LayerNorm,
    norm_ch: LayerNorm,
    fuse: Conv2d,
}

impl ReCal {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        if c < 2 {
            return Err(Error::config(format!("ReCal needs at least 2 channels, got {c}")));
        }
        Ok(ReCal {
            channels: c,
            res: ResBlock::new(store, &format!("{name}.res"), c)?,
            chs: ChsBlock::new(store, &format!("{name}.chs"), c, REDUCTION)?,
            norm_re: LayerNorm::new(store, &format!("{name}.norm_re"), c)?,
            norm_ch: LayerNorm::new(store, &format!("{name}.norm_ch"), c)?,
            fuse: Conv2d::new(store, &format!("{name}.fuse"), Self::fuse_spec(c))?,
        })
    }

    /// Grouped 3×3 `2C → C` with `C` groups: output `p` sees only concat
    /// channels `2p` and `2p + 1`.
    pub fn fuse_spec(c: usize) -> ConvSpec {
        ConvSpec::new(2 * c, c, 3).groups(c)
    }

    /// `C² + 22C + 4` at reduction 2.
    pub fn formula_weight_count(c: usize) -> usize {
        c * c + 22 * c + 4
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.trace(ctx, x)?.out)
    }

    pub fn trace<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<ReCalTrace<'t>> {
        if x.shape()[1] != self.channels {
            return Err(Error::config(format!(
                "ReCal built for {} channels, input is {:?}",
                self.channels,
                x.shape()
            )));
        }
        let region = self.res.forward(ctx, x)?;
        let channel = self.chs.forward(ctx, x)?;
        let f_re = self.norm_re.forward(ctx, ops::mul(x, region)?)?;
        let f_ch = self.norm_ch.forward(ctx, ops::mul(x, channel)?)?;
        // Concat channel 2p-1 (1-based) is F_Ch(p), channel 2p is F_Re(p).
        let concat = ops::interleave_channels(f_ch, f_re)?;
        let out = self.fuse_only(ctx, concat)?;
        Ok(ReCalTrace {
            region,
            channel,
            f_re,
            f_ch,
            concat,
            out,
        })
    }

    /// Applies just the grouped fusion convolution to an interleaved map.
    pub fn fuse_only<'t>(&self, ctx: &Ctx<'_, 't>, concat: Var<'t>) -> Result<Var<'t>> {
        self.fuse.forward(ctx, concat)
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        let mut v = self.res.infos();
        v.extend(self.chs.infos());
        v.push(self.norm_re.info());
        v.push(self.norm_ch.info());
        v.push(self.fuse.info());
        v
    }
}

/// Squeeze-and-excitation: global pool, `C→C/r`, ReLU, `C/r→C`, sigmoid gate.
#[derive(Clone, Debug)]
pub struct SeBlock {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl SeBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        check_reduction(c, REDUCTION)?;
        Ok(SeBlock {
            squeeze: Conv2d::new(store, &format!("{name}.squeeze"), pointwise(c, c / REDUCTION))?,
            excite: Conv2d::new(store, &format!("{name}.excite"), pointwise(c / REDUCTION, c))?,
        })
    }

    pub fn gate<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let z = ops::global_avg_pool(x)?;
        let z = ops::relu(self.squeeze.forward(ctx, z)?);
        Ok(ops::sigmoid(self.excite.forward(ctx, z)?))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        ops::mul(x, self.gate(ctx, x)?)
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        vec![self.squeeze.info(), self.excite.info()]
    }

    pub fn excite(&self) -> &Conv2d {
        &self.excite
    }
}

/// Concurrent spatial and channel squeeze-and-excitation, merged by an
/// elementwise maximum.
#[derive(Clone, Debug)]
pub struct ScSeBlock {
    se: SeBlock,
    spatial: Conv2d,
}

impl ScSeBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(ScSeBlock {
            se: SeBlock::new(store, &format!("{name}.cse"), c)?,
            spatial: Conv2d::new(store, &format!("{name}.sse"), pointwise(c, 1))?,
        })
    }

    /// `(channel-recalibrated, spatially-recalibrated)` maps before merging.
    pub fn branches<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let cse = self.se.forward(ctx, x)?;
        let gate = ops::sigmoid(self.spatial.forward(ctx, x)?);
        Ok((cse, ops::mul(x, gate)?))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let (c, s) = self.branches(ctx, x)?;
        ops::maximum(c, s)
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        let mut v = self.se.infos();
        v.push(self.spatial.info());
        v
    }
}
