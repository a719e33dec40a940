//! Named learnable arrays and non-learnable buffers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in [`ParamStore::params`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug)]
pub struct ParamSlot {
    pub name: String,
    pub shape: [usize; 4],
    pub kind: ParamKind,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    /// Momentum buffer owned by the optimizer.
    pub velocity: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BufferSlot {
    pub name: String,
    pub data: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Every learnable array of a model, registered once under a unique name.
///
/// Initial values depend only on `(seed, name)`, so two models that share a
/// layer name share its initial weights regardless of what else they contain.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<ParamSlot>,
    buffers: Vec<BufferSlot>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_unique(&self, name: &str) -> Result<()> {
        if self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|b| b.name == name)
        {
            return Err(Error::config(format!("parameter `{name}` registered twice")));
        }
        Ok(())
    }

    pub fn add(&mut self, name: String, shape: [usize; 4], kind: ParamKind, data: Vec<f64>) -> Result<ParamId> {
        self.check_unique(&name)?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::config(format!("parameter `{name}`: data does not match {shape:?}")));
        }
        let len = data.len();
        self.params.push(ParamSlot {
            name,
            shape,
            kind,
            data,
            grad: vec![0.0; len],
            velocity: vec![0.0; len],
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Registers `<name>.weight` (Kaiming-normal, fan-in) and, if the spec has
    /// one, a zero `<name>.bias`.
    pub fn add_conv(&mut self, name: &str, spec: &ConvSpec) -> Result<(ParamId, Option<ParamId>)> {
        spec.validate()?;
        let wname = format!("{name}.weight");
        let shape = spec.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(wname.as_bytes()));
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..spec.weight_count()).map(|_| normal.sample(&mut rng)).collect();
        let w = self.add(wname, shape, ParamKind::ConvWeight, data)?;
        let b = if spec.bias {
            let p = spec.out_channels;
            Some(self.add(format!("{name}.bias"), [1, p, 1, 1], ParamKind::ConvBias, vec![0.0; p])?)
        } else {
            None
        };
        Ok((w, b))
    }

    /// Registers `<name>.scale` = 1 and `<name>.shift` = 0 for `c` channels.
    pub fn add_norm(&mut self, name: &str, c: usize) -> Result<(ParamId, ParamId)> {
        let g = self.add(format!("{name}.scale"), [1, c, 1, 1], ParamKind::NormScale, vec![1.0; c])?;
        let b = self.add(format!("{name}.shift"), [1, c, 1, 1], ParamKind::NormShift, vec![0.0; c])?;
        Ok((g, b))
    }

    pub fn add_buffer(&mut self, name: String, data: Vec<f64>) -> Result<BufferId> {
        self.check_unique(&name)?;
        self.buffers.push(BufferSlot { name, data });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &ParamSlot {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut ParamSlot {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0].data
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Vec<f64> {
        &mut self.buffers[id.0].data
    }

    pub fn params(&self) -> &[ParamSlot] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamSlot] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BufferSlot] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [BufferSlot] {
        &mut self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Places a parameter on the tape as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, id: ParamId) -> Var<'t> {
        let slot = &self.params[id.0];
        let value = Tensor4::from_vec(slot.shape, slot.data.clone()).expect("slot shape");
        tape.param_leaf(value, id, true)
    }

    /// Total element count of slots accepted by `filter`.
    pub fn census(&self, filter: impl Fn(&ParamSlot) -> bool) -> usize {
        self.params.iter().filter(|p| filter(p)).map(|p| p.data.len()).sum()
    }

    /// Convolution weights (no biases, no norm parameters) under a name prefix.
    pub fn weight_census(&self, prefix: &str) -> usize {
        self.census(|p| p.kind == ParamKind::ConvWeight && p.name.starts_with(prefix))
    }

    /// Every learnable element under a name prefix.
    pub fn total_census(&self, prefix: &str) -> usize {
        self.census(|p| p.name.starts_with(prefix))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Overwrites stored gradients with those from a backward sweep.
    pub fn set_grads(&mut self, grads: &Gradients) {
        self.zero_grad();
        self.accumulate_grads(grads);
    }

    /// Adds gradients from a backward sweep onto the stored ones.
    pub fn accumulate_grads(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.params[id.0]
                .grad
                .iter_mut()
                .zip(g.iter())
                .for_each(|(a, b)| *a += b);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
