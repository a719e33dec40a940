use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Source taps for one output coordinate: `(lo, hi, weight_of_hi)`.
///
/// Half-pixel centers (align-corners off): output `i` samples source
/// coordinate `(i + 0.5) / 2 − 0.5`, clamped to the valid range.
fn taps(src_len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * src_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn bilinear_upsample2_forward(x: &Tensor4) -> Result<Tensor4> {
    let (h, w) = (x.h(), x.w());
    if h == 0 || w == 0 {
        return Err(Error::config(format!(
            "bilinear_upsample2: empty spatial extent in {:?}",
            x.shape()
        )));
    }
    let (ty, tx) = (taps(h), taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor4::zeros([x.n(), x.c(), oh, ow]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

fn bilinear_upsample2_backward(x_shape: [usize; 4], g: &[f64]) -> Vec<f64> {
    let [_, _, h, w] = x_shape;
    let (ty, tx) = (taps(h), taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; x_shape.iter().product()];
    for (gp, dp) in g.chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = gp[oy * ow + ox];
                dp[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dp[y0 * w + x1] += v * (1.0 - fy) * fx;
                dp[y1 * w + x0] += v * fy * (1.0 - fx);
                dp[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Doubles H and W by bilinear interpolation.
pub fn bilinear_upsample2(x: Var<'_>) -> Result<Var<'_>> {
    let out = bilinear_upsample2_forward(&x.value())?;
    Ok(x.tape().op(
        out,
        &[x],
        Box::new(|ctx| {
            vec![Some(bilinear_upsample2_backward(
                ctx.inputs[0].shape(),
                ctx.grad,
            ))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_of_two_half_pixel() {
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let y = bilinear_upsample2_forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 4]);
        for row in y.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.5, 1.5, 2.0]);
        }
    }

    #[test]
    fn constant_field_is_exact() {
        let x = Tensor4::full([2, 3, 3, 5], 0.3);
        let y = bilinear_upsample2_forward(&x).unwrap();
        assert_eq!(y.shape(), [2, 3, 6, 10]);
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-16));
    }

    #[test]
    fn single_pixel_broadcasts() {
        let x = Tensor4::full([1, 1, 1, 1], 4.0);
        let y = bilinear_upsample2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0; 4]);
    }
}
