use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

fn pack_bits(bits: impl Iterator<Item = bool>) -> Vec<u64> {
    let mut words = Vec::new();
    let (mut cur, mut k) = (0u64, 0);
    for b in bits {
        cur |= (b as u64) << k;
        k += 1;
        if k == 64 {
            words.push(cur);
            cur = 0;
            k = 0;
        }
    }
    words.push(cur);
    words
}

pub fn relu(x: Var<'_>) -> Var<'_> {
    let v = x.value();
    let tape = x.tape();
    if tape.tracks_kinks() {
        tape.mix_kink(pack_bits(v.data().iter().map(|&a| a > 0.0)));
    }
    tape.op(
        v.map(|a| a.max(0.0)),
        &[x],
        Box::new(|ctx| {
            let dx = ctx
                .grad
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(dx)]
        }),
    )
}

pub fn sigmoid_scalar(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: Var<'_>) -> Var<'_> {
    let out = x.value().map(sigmoid_scalar);
    x.tape().op(
        out,
        &[x],
        Box::new(|ctx| {
            let dx = ctx
                .grad
                .iter()
                .zip(ctx.output.data())
                .map(|(&g, &s)| g * s * (1.0 - s))
                .collect();
            vec![Some(dx)]
        }),
    )
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs is (N, 1, H, W): one spatial map for all channels.
    Spatial,
    /// rhs is (N, C, 1, 1): one scalar per channel.
    Channel,
}

fn broadcast_kind(l: [usize; 4], r: [usize; 4]) -> Result<Broadcast> {
    if l == r {
        return Ok(Broadcast::Same);
    }
    if l[0] == r[0] && r[1] == 1 && l[2..] == r[2..] {
        return Ok(Broadcast::Spatial);
    }
    if l[0] == r[0] && l[1] == r[1] && r[2] == 1 && r[3] == 1 {
        return Ok(Broadcast::Channel);
    }
    Err(Error::config(format!(
        "mul: cannot broadcast {r:?} against {l:?}; rhs must match, be (N,1,H,W), or be (N,C,1,1)"
    )))
}

/// Index into rhs for lhs element `i`.
#[inline]
fn rhs_index(kind: Broadcast, shape: [usize; 4], i: usize) -> usize {
    let plane = shape[2] * shape[3];
    match kind {
        Broadcast::Same => i,
        Broadcast::Spatial => (i / (shape[1] * plane)) * plane + i % plane,
        Broadcast::Channel => i / plane,
    }
}

/// Elementwise product; `rhs` may be a single-channel map or a per-channel
/// vector broadcast over `lhs`.
pub fn mul<'t>(lhs: Var<'t>, rhs: Var<'t>) -> Result<Var<'t>> {
    let (l, r) = (lhs.value(), rhs.value());
    let kind = broadcast_kind(l.shape(), r.shape())?;
    let shape = l.shape();
    let out: Vec<f64> = l
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| a * r.data()[rhs_index(kind, shape, i)])
        .collect();
    let out = Tensor4::from_vec(shape, out)?;
    Ok(lhs.tape().op(
        out,
        &[lhs, rhs],
        Box::new(move |ctx| {
            let (l, r) = (ctx.inputs[0], ctx.inputs[1]);
            let dl = ctx.needs[0].then(|| {
                ctx.grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * r.data()[rhs_index(kind, shape, i)])
                    .collect()
            });
            let dr = ctx.needs[1].then(|| {
                let mut dr = vec![0.0; r.len()];
                for (i, (&g, &a)) in ctx.grad.iter().zip(l.data()).enumerate() {
                    dr[rhs_index(kind, shape, i)] += g * a;
                }
                dr
            });
            vec![dl, dr]
        }),
    ))
}

fn same_shape(op: &str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    same_shape("add", &av, &bv)?;
    let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
    Ok(a.tape().op(
        Tensor4::from_vec(av.shape(), out)?,
        &[a, b],
        Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
    ))
}

/// Elementwise maximum; ties route the gradient to `a`.
pub fn maximum<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    same_shape("maximum", &av, &bv)?;
    let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x >= y).collect();
    let out: Vec<f64> = av
        .data()
        .iter()
        .zip(bv.data())
        .zip(&pick_a)
        .map(|((&x, &y), &p)| if p { x } else { y })
        .collect();
    let tape = a.tape();
    if tape.tracks_kinks() {
        tape.mix_kink(pack_bits(pick_a.iter().copied()));
    }
    let pick_a = Arc::new(pick_a);
    Ok(tape.op(
        Tensor4::from_vec(av.shape(), out)?,
        &[a, b],
        Box::new(move |ctx| {
            let da = ctx.grad.iter().zip(pick_a.iter()).map(|(&g, &p)| if p { g } else { 0.0 });
            let db = ctx.grad.iter().zip(pick_a.iter()).map(|(&g, &p)| if p { 0.0 } else { g });
            vec![Some(da.collect()), Some(db.collect())]
        }),
    ))
}

fn check_nhw(op: &str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.n() != b.n() || a.h() != b.h() || a.w() != b.w() {
        return Err(Error::config(format!(
            "{op}: N, H, W must match, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Channel-wise concatenation `[a, b]`.
pub fn concat<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    check_nhw("concat", &av, &bv)?;
    let (ca, cb, plane) = (av.c(), bv.c(), av.plane());
    let mut out = Vec::with_capacity(av.len() + bv.len());
    for n in 0..av.n() {
        out.extend_from_slice(&av.data()[n * ca * plane..(n + 1) * ca * plane]);
        out.extend_from_slice(&bv.data()[n * cb * plane..(n + 1) * cb * plane]);
    }
    let out = Tensor4::from_vec([av.n(), ca + cb, av.h(), av.w()], out)?;
    Ok(a.tape().op(
        out,
        &[a, b],
        Box::new(move |ctx| {
            let n = ctx.inputs[0].n();
            let mut da = Vec::with_capacity(n * ca * plane);
            let mut db = Vec::with_capacity(n * cb * plane);
            for chunk in ctx.grad.chunks((ca + cb) * plane) {
                da.extend_from_slice(&chunk[..ca * plane]);
                db.extend_from_slice(&chunk[ca * plane..]);
            }
            vec![Some(da), Some(db)]
        }),
    ))
}

/// Interleaves two equally shaped maps channel by channel:
/// output channel `2p` is `first[p]`, channel `2p + 1` is `second[p]`
/// (0-based), giving `[f1, s1, f2, s2, …]`.
pub fn interleave_channels<'t>(first: Var<'t>, second: Var<'t>) -> Result<Var<'t>> {
    let (fv, sv) = (first.value(), second.value());
    same_shape("interleave_channels", &fv, &sv)?;
    let [n, c, h, w] = fv.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(2 * fv.len());
    for b in 0..n {
        for p in 0..c {
            let o = (b * c + p) * plane;
            out.extend_from_slice(&fv.data()[o..o + plane]);
            out.extend_from_slice(&sv.data()[o..o + plane]);
        }
    }
    let out = Tensor4::from_vec([n, 2 * c, h, w], out)?;
    Ok(first.tape().op(
        out,
        &[first, second],
        Box::new(move |ctx| {
            let mut df = Vec::with_capacity(n * c * plane);
            let mut ds = Vec::with_capacity(n * c * plane);
            for pair in ctx.grad.chunks(2 * plane) {
                df.extend_from_slice(&pair[..plane]);
                ds.extend_from_slice(&pair[plane..]);
            }
            vec![Some(df), Some(ds)]
        }),
    ))
}

/// Sum of all elements as a (1,1,1,1) scalar.
pub fn sum(x: Var<'_>) -> Var<'_> {
    let s = x.value().sum();
    x.tape().op(
        Tensor4::scalar(s),
        &[x],
        Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]),
    )
}

/// `Σ x ⊙ weights` as a scalar; `weights` is a constant.
pub fn weighted_sum<'t>(x: Var<'t>, weights: &Tensor4) -> Result<Var<'t>> {
    let v = x.value();
    same_shape("weighted_sum", &v, weights)?;
    let s = v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
    let weights = Arc::new(weights.clone());
    Ok(x.tape().op(
        Tensor4::scalar(s),
        &[x],
        Box::new(move |ctx| {
            let g = ctx.grad[0];
            vec![Some(weights.data().iter().map(|w| w * g).collect())]
        }),
    ))
}
