use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const NORM_EPS: f64 = 1e-5;

/// Batch statistics observed in a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, for the running estimate.
    pub var: Vec<f64>,
}

fn check_affine(op: &str, c: usize, gamma: &Tensor4, beta: &Tensor4) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::config(format!(
            "{op}: affine parameters have {} / {} entries for {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Per-channel normalization over (N, H, W).
///
/// With `running = None` the batch statistics are used and returned; with
/// `Some((mean, var))` the layer is an affine map using those statistics.
pub fn batch_norm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running: Option<(&[f64], &[f64])>,
) -> Result<(Var<'t>, Option<BatchStats>)> {
    let xv = x.value();
    let [n, c, h, w] = xv.shape();
    let plane = h * w;
    let count = n * plane;
    let (g, b) = (gamma.value(), beta.value());
    check_affine("batch_norm", c, &g, &b)?;

    let (mean, var, stats) = match running {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(Error::config("batch_norm: running statistics size mismatch"));
            }
            (m.to_vec(), v.to_vec(), None)
        }
        None => {
            if count < 2 {
                return Err(Error::config(format!(
                    "batch_norm: training mode needs N·H·W ≥ 2, got {count} for {:?}",
                    xv.shape()
                )));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let planes = (0..n).map(|i| &xv.data()[(i * c + ch) * plane..][..plane]);
                let s: f64 = planes.clone().map(|p| p.iter().sum::<f64>()).sum();
                let mu = s / count as f64;
                let ss: f64 = planes
                    .map(|p| p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                    .sum();
                mean[ch] = mu;
                var[ch] = ss / count as f64;
            }
            let unbiased = var
                .iter()
                .map(|v| v * count as f64 / (count - 1) as f64)
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();

    let mut out = Tensor4::zeros(xv.shape());
    for (i, (src, dst)) in xv
        .data()
        .chunks(plane)
        .zip(out.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let ch = i % c;
        let (mu, is, ga, be) = (mean[ch], inv_std[ch], g.data()[ch], b.data()[ch]);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mu) * is * ga + be;
        }
    }

    let training = running.is_none();
    let saved = Arc::new((mean, inv_std));
    let y = x.tape().op(
        out,
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let (mean, inv_std) = &*saved;
            let xs = ctx.inputs[0];
            let gam = ctx.inputs[1].data();
            let mut dx = vec![0.0; xs.len()];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for ch in 0..c {
                let (mu, is) = (mean[ch], inv_std[ch]);
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for i in 0..n {
                    let o = (i * c + ch) * plane;
                    for k in o..o + plane {
                        let xhat = (xs.data()[k] - mu) * is;
                        sum_dy += ctx.grad[k];
                        sum_dy_xhat += ctx.grad[k] * xhat;
                    }
                }
                dg[ch] = sum_dy_xhat;
                db[ch] = sum_dy;
                let scale = gam[ch] * is;
                for i in 0..n {
                    let o = (i * c + ch) * plane;
                    for k in o..o + plane {
                        dx[k] = if training {
                            let xhat = (xs.data()[k] - mu) * is;
                            scale
                                * (ctx.grad[k]
                                    - sum_dy / count as f64
                                    - xhat * sum_dy_xhat / count as f64)
                        } else {
                            scale * ctx.grad[k]
                        };
                    }
                }
            }
            vec![Some(dx), Some(dg), Some(db)]
        }),
    );
    Ok((y, stats))
}

/// Per-sample normalization over (C, H, W) with per-channel scale and shift.
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let [n, c, h, w] = xv.shape();
    let plane = h * w;
    let per = c * plane;
    if per == 0 {
        return Err(Error::config("layer_norm: empty sample"));
    }
    let (g, b) = (gamma.value(), beta.value());
    check_affine("layer_norm", c, &g, &b)?;

    let mut stats = Vec::with_capacity(n);
    let mut out = Tensor4::zeros(xv.shape());
    for (src, dst) in xv.data().chunks(per).zip(out.data_mut().chunks_mut(per)) {
        let mu = src.iter().sum::<f64>() / per as f64;
        let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / per as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for (k, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
            let ch = k / plane;
            *d = (s - mu) * is * g.data()[ch] + b.data()[ch];
        }
        stats.push((mu, is));
    }

    let stats = Arc::new(stats);
    Ok(x.tape().op(
        out,
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let xs = ctx.inputs[0];
            let gam = ctx.inputs[1].data();
            let mut dx = vec![0.0; xs.len()];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for (i, &(mu, is)) in stats.iter().enumerate() {
                let src = &xs.data()[i * per..(i + 1) * per];
                let gs = &ctx.grad[i * per..(i + 1) * per];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for k in 0..per {
                    let ch = k / plane;
                    let xhat = (src[k] - mu) * is;
                    let dxhat = gs[k] * gam[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dg[ch] += gs[k] * xhat;
                    db[ch] += gs[k];
                }
                let dst = &mut dx[i * per..(i + 1) * per];
                for k in 0..per {
                    let ch = k / plane;
                    let xhat = (src[k] - mu) * is;
                    let dxhat = gs[k] * gam[ch];
                    dst[k] = is
                        * (dxhat - sum_dxhat / per as f64 - xhat * sum_dxhat_xhat / per as f64);
                }
            }
            vec![Some(dx), Some(dg), Some(db)]
        }),
    ))
}
