use std::fmt;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor4;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (rows, cols)
    pub kernel: (usize, usize),
    pub groups: usize,
    pub padding: (usize, usize),
    pub stride: (usize, usize),
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, one group, bias, and padding that keeps H and W for odd kernels.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            groups: 1,
            padding: (kernel / 2, kernel / 2),
            stride: (1, 1),
            bias: true,
        }
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.kernel;
        if m == 0 || n == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::config(format!("{self}: kernel and stride must be positive")));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::config(format!(
                "{self}: in_channels {} and out_channels {} must both be divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// `(m·n·C·P)/g`; biases are not counted.
    pub fn weight_count(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels / self.groups
    }

    /// Shape of the weight tensor: (P, C/g, m, n).
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (m, n) = self.kernel;
        let (ph, pw) = self.padding;
        if h + 2 * ph < m || w + 2 * pw < n {
            return Err(Error::config(format!(
                "{self}: input {h}x{w} is smaller than the kernel after padding"
            )));
        }
        Ok((
            (h + 2 * ph - m) / self.stride.0 + 1,
            (w + 2 * pw - n) / self.stride.1 + 1,
        ))
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "conv{}x{}({}->{}, g={})",
            self.kernel.0, self.kernel.1, self.in_channels, self.out_channels, self.groups
        )
    }
}

fn check_operands(x: &Tensor4, w: &Tensor4, b: Option<&Tensor4>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if x.c() != spec.in_channels {
        return Err(Error::config(format!(
            "{spec}: input has {} channels (dimension 1 of {:?}), expected {}",
            x.c(),
            x.shape(),
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::config(format!(
            "{spec}: weight shape {:?}, expected {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    match (spec.bias, b) {
        (true, Some(b)) if b.len() != spec.out_channels => Err(Error::config(format!(
            "{spec}: bias has {} entries, expected {}",
            b.len(),
            spec.out_channels
        ))),
        (true, None) => Err(Error::config(format!("{spec}: bias missing"))),
        (false, Some(_)) => Err(Error::config(format!("{spec}: unexpected bias"))),
        _ => Ok(()),
    }
}

struct Geometry {
    cg: usize,
    pg: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    /// Rows of the unfolded patch matrix: cg·m·n.
    k: usize,
    /// Columns of the patch matrix: oh·ow.
    l: usize,
}

impl Geometry {
    fn new(x: &Tensor4, spec: &ConvSpec) -> Result<Self> {
        let (oh, ow) = spec.output_hw(x.h(), x.w())?;
        let cg = spec.in_channels / spec.groups;
        Ok(Geometry {
            cg,
            pg: spec.out_channels / spec.groups,
            h: x.h(),
            w: x.w(),
            oh,
            ow,
            k: cg * spec.kernel.0 * spec.kernel.1,
            l: oh * ow,
        })
    }

    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        spec.kernel == (1, 1) && spec.padding == (0, 0) && spec.stride == (1, 1)
    }
}

/// Unfolds `cg` input planes into a (k × l) patch matrix.
fn im2col(planes: &[f64], geo: &Geometry, spec: &ConvSpec, cols: &mut [f64]) {
    let (m, n) = spec.kernel;
    let (ph, pw) = spec.padding;
    let (sh, sw) = spec.stride;
    for ci in 0..geo.cg {
        let plane = &planes[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..m {
            for kx in 0..n {
                let row = &mut cols[((ci * m + ky) * n + kx) * geo.l..][..geo.l];
                for oy in 0..geo.oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let out = &mut row[oy * geo.ow..(oy + 1) * geo.ow];
                    if iy < 0 || iy >= geo.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        *o = if ix >= 0 && ix < geo.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the planes.
fn col2im(cols: &[f64], geo: &Geometry, spec: &ConvSpec, planes: &mut [f64]) {
    let (m, n) = spec.kernel;
    let (ph, pw) = spec.padding;
    let (sh, sw) = spec.stride;
    for ci in 0..geo.cg {
        let plane = &mut planes[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..m {
            for kx in 0..n {
                let row = &cols[((ci * m + ky) * n + kx) * geo.l..][..geo.l];
                for oy in 0..geo.oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for ox in 0..geo.ow {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            dst[ix as usize] += row[oy * geo.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha·a·b + beta·c` over row-major slices, with explicit strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || a.len() > ((m - 1) as isize * rsa + (k - 1) as isize * csa) as usize);
    assert!(k == 0 || b.len() > ((k - 1) as isize * rsb + (n - 1) as isize * csb) as usize);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution on plain tensors.
pub fn conv2d_forward(
    x: &Tensor4,
    w: &Tensor4,
    b: Option<&Tensor4>,
    spec: &ConvSpec,
) -> Result<Tensor4> {
    check_operands(x, w, b, spec)?;
    let geo = Geometry::new(x, spec)?;
    let pointwise = geo.is_pointwise(spec);
    let mut out = Tensor4::zeros([x.n(), spec.out_channels, geo.oh, geo.ow]);
    let in_per = spec.in_channels * geo.h * geo.w;
    let out_per = spec.out_channels * geo.l;
    let wd = w.data();
    par::for_each_chunk(out.data_mut(), out_per, |n, y| {
        let xs = &x.data()[n * in_per..(n + 1) * in_per];
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; geo.k * geo.l] };
        for g in 0..spec.groups {
            let planes = &xs[g * geo.cg * geo.h * geo.w..(g + 1) * geo.cg * geo.h * geo.w];
            let patch: &[f64] = if pointwise {
                planes
            } else {
                im2col(planes, &geo, spec, &mut cols);
                &cols
            };
            let wg = &wd[g * geo.pg * geo.k..(g + 1) * geo.pg * geo.k];
            let yg = &mut y[g * geo.pg * geo.l..(g + 1) * geo.pg * geo.l];
            gemm(
                geo.pg,
                geo.k,
                geo.l,
                wg,
                (geo.k as isize, 1),
                patch,
                (geo.l as isize, 1),
                0.0,
                yg,
            );
        }
        if let Some(b) = b {
            for (p, plane) in y.chunks_mut(geo.l).enumerate() {
                let bp = b.data()[p];
                plane.iter_mut().for_each(|v| *v += bp);
            }
        }
    });
    Ok(out)
}

/// Gradients of a convolution: `(d input, d weight, d bias)`.
pub fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    spec: &ConvSpec,
    grad_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Option<Vec<f64>>) {
    let geo = Geometry::new(x, spec).expect("validated in forward");
    let pointwise = geo.is_pointwise(spec);
    let in_per = spec.in_channels * geo.h * geo.w;
    let out_per = spec.out_channels * geo.l;
    let plane_in = geo.h * geo.w;
    let wd = w.data();

    // Per-sample partial weight gradients, summed afterwards in sample order.
    let per_sample = par::map_range(x.n(), |n| {
        let xs = &x.data()[n * in_per..(n + 1) * in_per];
        let gs = &grad_out[n * out_per..(n + 1) * out_per];
        let mut dw = vec![0.0; w.len()];
        let mut dx = if need_input { vec![0.0; in_per] } else { Vec::new() };
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; geo.k * geo.l] };
        let mut dcols = if need_input && !pointwise {
            vec![0.0; geo.k * geo.l]
        } else {
            Vec::new()
        };
        for g in 0..spec.groups {
            let planes = &xs[g * geo.cg * plane_in..(g + 1) * geo.cg * plane_in];
            let patch: &[f64] = if pointwise {
                planes
            } else {
                im2col(planes, &geo, spec, &mut cols);
                &cols
            };
            let gg = &gs[g * geo.pg * geo.l..(g + 1) * geo.pg * geo.l];
            // dW_g (pg×k) = G_g (pg×l) · patchᵀ (l×k)
            gemm(
                geo.pg,
                geo.l,
                geo.k,
                gg,
                (geo.l as isize, 1),
                patch,
                (1, geo.l as isize),
                0.0,
                &mut dw[g * geo.pg * geo.k..(g + 1) * geo.pg * geo.k],
            );
            if need_input {
                let wg = &wd[g * geo.pg * geo.k..(g + 1) * geo.pg * geo.k];
                let dxg = &mut dx[g * geo.cg * plane_in..(g + 1) * geo.cg * plane_in];
                // dpatch (k×l) = W_gᵀ (k×pg) · G_g (pg×l)
                if pointwise {
                    gemm(
                        geo.k,
                        geo.pg,
                        geo.l,
                        wg,
                        (1, geo.k as isize),
                        gg,
                        (geo.l as isize, 1),
                        0.0,
                        dxg,
                    );
                } else {
                    gemm(
                        geo.k,
                        geo.pg,
                        geo.l,
                        wg,
                        (1, geo.k as isize),
                        gg,
                        (geo.l as isize, 1),
                        0.0,
                        &mut dcols,
                    );
                    col2im(&dcols, &geo, spec, dxg);
                }
            }
        }
        (dx, dw)
    });

    let mut dw = vec![0.0; w.len()];
    let mut dx = need_input.then(|| Vec::with_capacity(x.len()));
    for (dxn, dwn) in per_sample {
        dw.iter_mut().zip(&dwn).for_each(|(a, b)| *a += b);
        if let Some(dx) = &mut dx {
            dx.extend_from_slice(&dxn);
        }
    }
    let db = spec.bias.then(|| {
        let mut db = vec![0.0; spec.out_channels];
        for n in 0..x.n() {
            for (p, d) in db.iter_mut().enumerate() {
                *d += grad_out[n * out_per + p * geo.l..][..geo.l].iter().sum::<f64>();
            }
        }
        db
    });
    (dx, dw, db)
}

/// Differentiable convolution. `bias` must be present iff `spec.bias`.
pub fn conv2d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    spec: ConvSpec,
) -> Result<Var<'t>> {
    let xv = x.value();
    let wv = weight.value();
    let bv = bias.map(|b| b.value());
    let out = conv2d_forward(&xv, &wv, bv.as_deref(), &spec)?;
    let mut parents = vec![x, weight];
    parents.extend(bias);
    Ok(x.tape().op(
        out,
        &parents,
        Box::new(move |ctx| {
            let (dx, dw, db) =
                conv2d_backward(ctx.inputs[0], ctx.inputs[1], &spec, ctx.grad, ctx.needs[0]);
            let mut grads = vec![dx, Some(dw)];
            if spec.bias {
                grads.push(db);
            }
            grads
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as an oracle.
    pub(crate) fn naive_conv(x: &Tensor4, w: &Tensor4, b: Option<&Tensor4>, s: &ConvSpec) -> Tensor4 {
        let (oh, ow) = s.output_hw(x.h(), x.w()).unwrap();
        let cg = s.in_channels / s.groups;
        let pg = s.out_channels / s.groups;
        Tensor4::from_fn([x.n(), s.out_channels, oh, ow], |[n, p, oy, ox]| {
            let g = p / pg;
            let mut acc = b.map_or(0.0, |b| b.data()[p]);
            for ci in 0..cg {
                for ky in 0..s.kernel.0 {
                    for kx in 0..s.kernel.1 {
                        let iy = (oy * s.stride.0 + ky) as isize - s.padding.0 as isize;
                        let ix = (ox * s.stride.1 + kx) as isize - s.padding.1 as isize;
                        if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                            continue;
                        }
                        acc += w.at([p, ci, ky, kx])
                            * x.at([n, g * cg + ci, iy as usize, ix as usize]);
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: [usize; 4], seed: u64) -> Tensor4 {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor4::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn weight_count_matches_formula() {
        assert_eq!(ConvSpec::new(4, 2, 3).weight_count(), 72);
        assert_eq!(ConvSpec::new(8, 4, 3).groups(4).weight_count(), 3 * 3 * 8 * 4 / 4);
    }

    #[test]
    fn depthwise_identity_kernel_is_identity() {
        let spec = ConvSpec::new(3, 3, 1).groups(3);
        let x = pseudo([2, 3, 4, 5], 1);
        let w = Tensor4::full(spec.weight_shape(), 1.0);
        let b = Tensor4::zeros([1, 3, 1, 1]);
        let y = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_neighbors() {
        let spec = ConvSpec::new(1, 1, 3).without_bias();
        let x = Tensor4::full([1, 1, 3, 3], 1.0);
        let w = Tensor4::full(spec.weight_shape(), 1.0);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.at([0, 0, 1, 1]), 9.0);
        for (yy, xx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at([0, 0, yy, xx]), 4.0);
        }
    }

    #[test]
    fn matches_direct_summation() {
        let cases = [
            ConvSpec::new(4, 6, 3),
            ConvSpec::new(4, 6, 3).groups(2),
            ConvSpec::new(8, 4, 3).groups(4).without_bias(),
            ConvSpec::new(3, 5, 1),
            ConvSpec::new(2, 2, 5).stride(2, 2).padding(1, 2),
        ];
        for (i, spec) in cases.iter().enumerate() {
            let x = pseudo([2, spec.in_channels, 7, 6], i as u64);
            let w = pseudo(spec.weight_shape(), 100 + i as u64);
            let b = spec.bias.then(|| pseudo([1, spec.out_channels, 1, 1], 200 + i as u64));
            let fast = conv2d_forward(&x, &w, b.as_ref(), spec).unwrap();
            let slow = naive_conv(&x, &w, b.as_ref(), spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{spec}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn grouped_equals_independent_convs_concatenated() {
        let g = 4;
        let spec = ConvSpec::new(8, 8, 3).groups(g);
        let x = pseudo([1, 8, 5, 5], 7);
        let w = pseudo(spec.weight_shape(), 8);
        let b = pseudo([1, 8, 1, 1], 9);
        let grouped = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
        let sub = ConvSpec::new(2, 2, 3);
        for gi in 0..g {
            let xs = Tensor4::from_fn([1, 2, 5, 5], |[n, c, y, xx]| x.at([n, gi * 2 + c, y, xx]));
            let ws = Tensor4::from_fn(sub.weight_shape(), |[p, c, ky, kx]| {
                w.at([gi * 2 + p, c, ky, kx])
            });
            let bs = Tensor4::from_fn([1, 2, 1, 1], |[_, p, _, _]| b.data()[gi * 2 + p]);
            let ys = conv2d_forward(&xs, &ws, Some(&bs), &sub).unwrap();
            for p in 0..2 {
                for y in 0..5 {
                    for xx in 0..5 {
                        assert_eq!(ys.at([0, p, y, xx]), grouped.at([0, gi * 2 + p, y, xx]));
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let spec = ConvSpec::new(4, 2, 3);
        let x = Tensor4::zeros([1, 3, 5, 5]);
        let w = Tensor4::zeros(spec.weight_shape());
        let b = Tensor4::zeros([1, 2, 1, 1]);
        let err = conv2d_forward(&x, &w, Some(&b), &spec).unwrap_err().to_string();
        assert!(err.contains("3 channels"), "{err}");
        assert!(ConvSpec::new(4, 3, 3).groups(2).validate().is_err());
    }
}
