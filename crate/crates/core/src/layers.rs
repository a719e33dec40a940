//! Parameterized layers binding [`ParamStore`] slots to tape operators.

use std::cell::RefCell;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::{self, BatchStats, ConvSpec};
use crate::params::{BufferId, ParamId, ParamStore};

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats,
}

/// Everything a forward pass needs besides the input.
pub struct Ctx<'a, 't> {
    pub tape: &'t Tape,
    pub store: &'a ParamStore,
    pub train: bool,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'a, 't> Ctx<'a, 't> {
    pub fn new(tape: &'t Tape, store: &'a ParamStore, train: bool) -> Self {
        Ctx {
            tape,
            store,
            train,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.store.bind(self.tape, id)
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        self.bn_updates.take()
    }
}

/// One entry of a structural walk over a model, used for independent recounts.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerInfo {
    Conv(ConvSpec),
    BatchNorm(usize),
    LayerNorm(usize),
}

impl LayerInfo {
    /// Convolution weights only (biases and norm parameters excluded).
    pub fn weight_count(&self) -> usize {
        match self {
            LayerInfo::Conv(s) => s.weight_count(),
            _ => 0,
        }
    }

    /// All learnable values.
    pub fn param_count(&self) -> usize {
        match self {
            LayerInfo::Conv(s) => s.weight_count() + if s.bias { s.out_channels } else { 0 },
            LayerInfo::BatchNorm(c) | LayerInfo::LayerNorm(c) => 2 * c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        let (weight, bias) = store.add_conv(name, &spec)?;
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ops::conv2d(x, w, b, self.spec)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn info(&self) -> LayerInfo {
        LayerInfo::Conv(self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    channels: usize,
    scale: ParamId,
    shift: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

/// Weight of the current batch in the running-statistics average.
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let (scale, shift) = store.add_norm(name, channels)?;
        let running_mean = store.add_buffer(format!("{name}.running_mean"), vec![0.0; channels])?;
        let running_var = store.add_buffer(format!("{name}.running_var"), vec![1.0; channels])?;
        Ok(BatchNorm {
            channels,
            scale,
            shift,
            running_mean,
            running_var,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let (g, b) = (ctx.param(self.scale), ctx.param(self.shift));
        if ctx.train {
            let (y, stats) = ops::batch_norm(x, g, b, None)?;
            ctx.bn_updates.borrow_mut().push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats: stats.expect("training mode returns statistics"),
            });
            Ok(y)
        } else {
            let stats = (
                ctx.store.buffer(self.running_mean),
                ctx.store.buffer(self.running_var),
            );
            Ok(ops::batch_norm(x, g, b, Some(stats))?.0)
        }
    }

    pub fn info(&self) -> LayerInfo {
        LayerInfo::BatchNorm(self.channels)
    }
}

/// Folds training-mode batch statistics into the running estimates.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = store.buffer_mut(u.mean);
        for (r, s) in m.iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
        }
        let v = store.buffer_mut(u.var);
        for (r, s) in v.iter_mut().zip(&u.stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    channels: usize,
    scale: ParamId,
    shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let (scale, shift) = store.add_norm(name, channels)?;
        Ok(LayerNorm {
            channels,
            scale,
            shift,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        ops::layer_norm(x, ctx.param(self.scale), ctx.param(self.shift))
    }

    pub fn info(&self) -> LayerInfo {
        LayerInfo::LayerNorm(self.channels)
    }
}

/// 3×3 convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), ConvSpec::new(cin, cout, 3))?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ops::relu(y))
    }

    pub fn infos(&self) -> Vec<LayerInfo> {
        vec![self.conv.info(), self.bn.info()]
    }
}
