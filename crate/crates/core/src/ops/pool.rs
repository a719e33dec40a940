use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Zero-padded average pooling with "same" padding `(k-1)/2` on each side.
///
/// The divisor is always the full kernel area, padded cells included, so the
/// op is a uniform-kernel convolution. With stride 1 the output keeps H and W.
pub fn avg_pool_forward(x: &Tensor4, kernel: (usize, usize), stride: usize) -> Result<Tensor4> {
    let (m, n) = kernel;
    if m % 2 == 0 || n % 2 == 0 {
        return Err(Error::config(format!(
            "avg_pool: same-size padding needs odd kernel sides, got {m}x{n}"
        )));
    }
    if stride == 0 {
        return Err(Error::config("avg_pool: stride must be positive"));
    }
    let (ph, pw) = (m / 2, n / 2);
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let inv = 1.0 / (m * n) as f64;
    let mut out = Tensor4::zeros([x.n(), x.c(), oh, ow]);
    let planes_in = x.data().chunks(h * w);
    let planes_out = out.data_mut().chunks_mut(oh * ow);
    for (src, dst) in planes_in.zip(planes_out) {
        for oy in 0..oh {
            let y0 = (oy * stride).saturating_sub(ph);
            let y1 = (oy * stride + ph + 1).min(h);
            for ox in 0..ow {
                let x0 = (ox * stride).saturating_sub(pw);
                let x1 = (ox * stride + pw + 1).min(w);
                let mut acc = 0.0;
                for yy in y0..y1 {
                    acc += src[yy * w + x0..yy * w + x1].iter().sum::<f64>();
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

fn avg_pool_backward(x_shape: [usize; 4], kernel: (usize, usize), stride: usize, g: &[f64]) -> Vec<f64> {
    let [_, _, h, w] = x_shape;
    let (ph, pw) = (kernel.0 / 2, kernel.1 / 2);
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let inv = 1.0 / (kernel.0 * kernel.1) as f64;
    let mut dx = vec![0.0; x_shape.iter().product()];
    for (gp, dp) in g.chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for oy in 0..oh {
            let y0 = (oy * stride).saturating_sub(ph);
            let y1 = (oy * stride + ph + 1).min(h);
            for ox in 0..ow {
                let x0 = (ox * stride).saturating_sub(pw);
                let x1 = (ox * stride + pw + 1).min(w);
                let v = gp[oy * ow + ox] * inv;
                for yy in y0..y1 {
                    dp[yy * w + x0..yy * w + x1].iter_mut().for_each(|d| *d += v);
                }
            }
        }
    }
    dx
}

pub fn avg_pool<'t>(x: Var<'t>, kernel: (usize, usize), stride: usize) -> Result<Var<'t>> {
    let out = avg_pool_forward(&x.value(), kernel, stride)?;
    Ok(x.tape().op(
        out,
        &[x],
        Box::new(move |ctx| {
            vec![Some(avg_pool_backward(
                ctx.inputs[0].shape(),
                kernel,
                stride,
                ctx.grad,
            ))]
        }),
    ))
}

/// Spatial mean per channel: (N, C, H, W) → (N, C, 1, 1).
pub fn global_avg_pool(x: Var<'_>) -> Result<Var<'_>> {
    let v = x.value();
    if v.plane() == 0 {
        return Err(Error::config(format!(
            "global_avg_pool: empty spatial extent in {:?}",
            v.shape()
        )));
    }
    let area = v.plane();
    let means: Vec<f64> = v
        .data()
        .chunks(area)
        .map(|p| p.iter().sum::<f64>() / area as f64)
        .collect();
    let out = Tensor4::from_vec([v.n(), v.c(), 1, 1], means)?;
    Ok(x.tape().op(
        out,
        &[x],
        Box::new(move |ctx| {
            let mut dx = Vec::with_capacity(ctx.grad.len() * area);
            for &g in ctx.grad {
                dx.extend(std::iter::repeat(g / area as f64).take(area));
            }
            vec![Some(dx)]
        }),
    ))
}

/// 2×2 max pooling with stride 2. Ties go to the first element in row-major
/// window order.
pub fn max_pool2_forward(x: &Tensor4) -> Result<(Tensor4, Vec<u32>)> {
    let (h, w) = (x.h(), x.w());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!(
            "max_pool2: spatial dims must be even, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([x.n(), x.c(), oh, ow]);
    let mut argmax = vec![0u32; out.len()];
    for ((src, dst), arg) in x
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(oh * ow))
        .zip(argmax.chunks_mut(oh * ow))
    {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[oy * ow + ox] = src[best];
                arg[oy * ow + ox] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2(x: Var<'_>) -> Result<Var<'_>> {
    let (out, argmax) = max_pool2_forward(&x.value())?;
    let tape = x.tape();
    if tape.tracks_kinks() {
        tape.mix_kink(argmax.iter().map(|&a| a as u64));
    }
    let argmax = Arc::new(argmax);
    Ok(tape.op(
        out,
        &[x],
        Box::new(move |ctx| {
            let xs = ctx.inputs[0];
            let plane_in = xs.plane();
            let plane_out = ctx.output.plane();
            let mut dx = vec![0.0; xs.len()];
            for (i, (&g, &a)) in ctx.grad.iter().zip(argmax.iter()).enumerate() {
                let p = i / plane_out;
                dx[p * plane_in + a as usize] += g;
            }
            vec![Some(dx)]
        }),
    ))
}
