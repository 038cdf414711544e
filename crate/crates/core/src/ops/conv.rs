//! Dilated 3D convolution, centred taps.
//!
//! Output voxel `o` of a `k`-tap kernel with dilation `r` reads input voxels
//! `o + (t - k/2) * r` for `t in 0..k` under same padding (zero fill outside
//! the volume), and `o + t * r` under valid padding.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    #[default]
    Same,
}

/// Which loop nest evaluates the convolution. Both produce the same values
/// up to floating-point summation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    /// Strided-tap loops over the raw input; the reference path.
    Direct,
    /// Gather dilated taps into a column matrix, then one matrix product.
    #[default]
    Gemm,
}

/// Weights `(C_out, C_in, k, k, k)` with `k` in {1, 3}, plus a dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<S = f32> {
    weights: Tensor<S>,
    dilation: usize,
}

impl<S: Scalar> ConvKernel<S> {
    pub fn new(weights: Tensor<S>, dilation: usize) -> Result<Self> {
        let dims = weights.dims();
        let ok = dims.len() == 5
            && (dims[2] == 1 || dims[2] == 3)
            && dims[2] == dims[3]
            && dims[3] == dims[4];
        if !ok {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "kernel must be (C_out, C_in, k, k, k) with k in {1, 3}",
            });
        }
        if dilation == 0 {
            return Err(Error::invalid("dilation must be at least 1"));
        }
        Ok(ConvKernel { weights, dilation })
    }

    pub fn weights(&self) -> &Tensor<S> {
        &self.weights
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn c_out(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn extent(&self) -> usize {
        self.weights.dims()[2]
    }

    /// Trainable parameters; independent of the dilation.
    pub fn param_count(&self) -> usize {
        self.weights.numel()
    }

    /// Spatial half-width of the dilated footprint.
    pub fn reach(&self) -> usize {
        (self.extent() / 2) * self.dilation
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    r: usize,
    lead: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new<S: Scalar>(input: &Tensor<S>, kernel: &ConvKernel<S>, padding: Padding) -> Result<Self> {
        let [d, h, w] = input.spatial()?;
        if input.channels() != kernel.c_in() {
            return Err(Error::ShapeMismatch {
                op: "conv3d channels",
                left: input.dims().to_vec(),
                right: kernel.weights.dims().to_vec(),
            });
        }
        let reach = kernel.reach();
        let (lead, output) = match padding {
            Padding::Same => (reach, [d, h, w]),
            Padding::Valid => {
                let span = 2 * reach + 1;
                if d < span || h < span || w < span {
                    return Err(Error::invalid(format!(
                        "input {:?} smaller than dilated kernel span {span}",
                        [d, h, w]
                    )));
                }
                (0, [d - 2 * reach, h - 2 * reach, w - 2 * reach])
            }
        };
        Ok(Geometry {
            c_in: kernel.c_in(),
            c_out: kernel.c_out(),
            k: kernel.extent(),
            r: kernel.dilation,
            lead,
            input: [d, h, w],
            output,
        })
    }

    fn taps(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    /// Input coordinate read by output coordinate `o` at tap `t`, if inside.
    #[inline]
    fn source(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let i = (o + t * self.r) as isize - self.lead as isize;
        (i >= 0 && (i as usize) < self.input[axis]).then_some(i as usize)
    }

    /// Output range along `axis` whose tap `t` lands inside the input, as
    /// `(first, end, input index of first)`.
    #[inline]
    fn valid_range(&self, axis: usize, t: usize) -> (usize, usize, usize) {
        let off = (t * self.r) as isize - self.lead as isize;
        let first = (-off).max(0) as usize;
        let end = ((self.input[axis] as isize - off).max(0) as usize).min(self.output[axis]);
        let first = first.min(end);
        (first, end, (first as isize + off).max(0) as usize)
    }

    fn out_dims(&self) -> Vec<usize> {
        vec![self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    /// Output depth planes per im2col chunk, bounding the column buffer.
    fn planes_per_chunk(&self) -> usize {
        const MAX_COLUMN_ELEMS: usize = 1 << 21;
        let plane = self.output[1] * self.output[2];
        (MAX_COLUMN_ELEMS / (self.taps() * plane).max(1)).clamp(1, self.output[0])
    }
}

pub fn conv3d_forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &ConvKernel<S>,
    padding: Padding,
    algo: ConvAlgo,
) -> Result<Tensor<S>> {
    let g = Geometry::new(input, kernel, padding)?;
    let out = match algo {
        ConvAlgo::Direct => forward_direct(&g, input.data(), kernel.weights.data()),
        ConvAlgo::Gemm => forward_gemm(&g, input.data(), kernel.weights.data()),
    };
    let out = Tensor::from_vec(g.out_dims(), out)?;
    Ok(out)
}

/// Gradients of `sum(grad_out * conv(input))` with respect to the input and
/// the weights.
pub fn conv3d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    kernel: &ConvKernel<S>,
    padding: Padding,
    algo: ConvAlgo,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (gi, gw) = conv3d_backward_parts(grad_out, input, kernel, padding, algo, true)?;
    Ok((gi.expect("input gradient requested"), gw))
}

pub(crate) fn conv3d_backward_parts<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    kernel: &ConvKernel<S>,
    padding: Padding,
    algo: ConvAlgo,
    want_input: bool,
) -> Result<(Option<Tensor<S>>, Tensor<S>)> {
    let g = Geometry::new(input, kernel, padding)?;
    if grad_out.dims() != g.out_dims().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "conv3d_backward",
            left: grad_out.dims().to_vec(),
            right: g.out_dims(),
        });
    }
    let (gi, gw) = match algo {
        ConvAlgo::Direct => backward_direct(&g, grad_out.data(), input.data(), kernel.weights.data(), want_input),
        ConvAlgo::Gemm => backward_gemm(&g, grad_out.data(), input.data(), kernel.weights.data(), want_input),
    };
    let gw = Tensor::from_vec(kernel.weights.dims().to_vec(), gw)?;
    let gi = match gi {
        Some(v) => Some(Tensor::from_vec(input.dims().to_vec(), v)?),
        None => None,
    };
    Ok((gi, gw))
}

fn forward_direct<S: Scalar>(g: &Geometry, input: &[S], weights: &[S]) -> Vec<S> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let n_out = g.out_voxels();
    let k = g.k;
    let mut out = vec![S::zero(); g.c_out * n_out];
    for co in 0..g.c_out {
        let dst = &mut out[co * n_out..(co + 1) * n_out];
        for ci in 0..g.c_in {
            let src = &input[ci * id * ih * iw..(ci + 1) * id * ih * iw];
            for tz in 0..k {
                for ty in 0..k {
                    for tx in 0..k {
                        let w = weights[(((co * g.c_in + ci) * k + tz) * k + ty) * k + tx];
                        for oz in 0..od {
                            let Some(iz) = g.source(0, oz, tz) else { continue };
                            for oy in 0..oh {
                                let Some(iy) = g.source(1, oy, ty) else { continue };
                                for ox in 0..ow {
                                    let Some(ix) = g.source(2, ox, tx) else { continue };
                                    let o = (oz * oh + oy) * ow + ox;
                                    dst[o] = dst[o] + w * src[(iz * ih + iy) * iw + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward_direct<S: Scalar>(
    g: &Geometry,
    grad_out: &[S],
    input: &[S],
    weights: &[S],
    want_input: bool,
) -> (Option<Vec<S>>, Vec<S>) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let n_out = g.out_voxels();
    let n_in = g.in_voxels();
    let k = g.k;
    let mut gw = vec![S::zero(); weights.len()];
    let mut gi = want_input.then(|| vec![S::zero(); g.c_in * n_in]);
    for co in 0..g.c_out {
        let go = &grad_out[co * n_out..(co + 1) * n_out];
        for ci in 0..g.c_in {
            let src = &input[ci * n_in..(ci + 1) * n_in];
            for tz in 0..k {
                for ty in 0..k {
                    for tx in 0..k {
                        let wi = (((co * g.c_in + ci) * k + tz) * k + ty) * k + tx;
                        let w = weights[wi];
                        let mut acc = S::zero();
                        for oz in 0..od {
                            let Some(iz) = g.source(0, oz, tz) else { continue };
                            for oy in 0..oh {
                                let Some(iy) = g.source(1, oy, ty) else { continue };
                                for ox in 0..ow {
                                    let Some(ix) = g.source(2, ox, tx) else { continue };
                                    let d = go[(oz * oh + oy) * ow + ox];
                                    let s = (iz * ih + iy) * iw + ix;
                                    acc = acc + d * src[s];
                                    if let Some(gi) = gi.as_mut() {
                                        let t = ci * id * ih * iw + s;
                                        gi[t] = gi[t] + d * w;
                                    }
                                }
                            }
                        }
                        gw[wi] = acc;
                    }
                }
            }
        }
    }
    (gi, gw)
}

/// Fills `cols` (`taps x planes*H*W`, row-major) with the dilated taps for
/// output planes `z0 .. z0 + planes`.
fn im2col<S: Scalar>(g: &Geometry, input: &[S], z0: usize, planes: usize, cols: &mut [S]) {
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let p = planes * oh * ow;
    let k = g.k;
    for ci in 0..g.c_in {
        let src = &input[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for tz in 0..k {
            for ty in 0..k {
                let (y0, y1, iy0) = g.valid_range(1, ty);
                for tx in 0..k {
                    let (x0, x1, ix0) = g.valid_range(2, tx);
                    let row = ((ci * k + tz) * k + ty) * k + tx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for lz in 0..planes {
                        let plane = &mut dst[lz * oh * ow..(lz + 1) * oh * ow];
                        let Some(iz) = g.source(0, z0 + lz, tz) else {
                            plane.fill(S::zero());
                            continue;
                        };
                        plane[..y0 * ow].fill(S::zero());
                        plane[y1 * ow..].fill(S::zero());
                        for oy in y0..y1 {
                            let iy = iy0 + (oy - y0);
                            let line = &mut plane[oy * ow..(oy + 1) * ow];
                            line[..x0].fill(S::zero());
                            line[x1..].fill(S::zero());
                            if x1 > x0 {
                                let s = (iz * ih + iy) * iw + ix0;
                                line[x0..x1].copy_from_slice(&src[s..s + (x1 - x0)]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input grid.
fn col2im<S: Scalar>(g: &Geometry, cols: &[S], z0: usize, planes: usize, grad_in: &mut [S]) {
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let p = planes * oh * ow;
    let k = g.k;
    for ci in 0..g.c_in {
        let dst = &mut grad_in[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for tz in 0..k {
            for ty in 0..k {
                let (y0, y1, iy0) = g.valid_range(1, ty);
                for tx in 0..k {
                    let (x0, x1, ix0) = g.valid_range(2, tx);
                    let row = ((ci * k + tz) * k + ty) * k + tx;
                    let src = &cols[row * p..(row + 1) * p];
                    if x1 == x0 {
                        continue;
                    }
                    for lz in 0..planes {
                        let Some(iz) = g.source(0, z0 + lz, tz) else { continue };
                        for oy in y0..y1 {
                            let iy = iy0 + (oy - y0);
                            let line = &src[(lz * oh + oy) * ow..(lz * oh + oy + 1) * ow];
                            let s = (iz * ih + iy) * iw + ix0;
                            for (d, &v) in dst[s..s + (x1 - x0)].iter_mut().zip(&line[x0..x1]) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn forward_gemm<S: Scalar>(g: &Geometry, input: &[S], weights: &[S]) -> Vec<S> {
    let n_out = g.out_voxels();
    let taps = g.taps();
    let mut out = vec![S::zero(); g.c_out * n_out];
    if g.k == 1 {
        // Pointwise: the input already is the column matrix.
        unsafe {
            S::gemm(
                g.c_out, taps, n_out, S::one(),
                weights.as_ptr(), taps as isize, 1,
                input.as_ptr(), n_out as isize, 1,
                S::zero(), out.as_mut_ptr(), n_out as isize, 1,
            );
        }
        return out;
    }
    let plane = g.output[1] * g.output[2];
    let chunk = g.planes_per_chunk();
    let mut cols = vec![S::zero(); taps * chunk * plane];
    let mut z0 = 0;
    while z0 < g.output[0] {
        let planes = chunk.min(g.output[0] - z0);
        let p = planes * plane;
        im2col(g, input, z0, planes, &mut cols[..taps * p]);
        unsafe {
            S::gemm(
                g.c_out, taps, p, S::one(),
                weights.as_ptr(), taps as isize, 1,
                cols.as_ptr(), p as isize, 1,
                S::zero(), out.as_mut_ptr().add(z0 * plane), n_out as isize, 1,
            );
        }
        z0 += planes;
    }
    out
}

fn backward_gemm<S: Scalar>(
    g: &Geometry,
    grad_out: &[S],
    input: &[S],
    weights: &[S],
    want_input: bool,
) -> (Option<Vec<S>>, Vec<S>) {
    let n_out = g.out_voxels();
    let n_in = g.in_voxels();
    let taps = g.taps();
    let mut gw = vec![S::zero(); weights.len()];
    let mut gi = want_input.then(|| vec![S::zero(); g.c_in * n_in]);
    if g.k == 1 {
        unsafe {
            // dW = dO * X^T
            S::gemm(
                g.c_out, n_out, taps, S::one(),
                grad_out.as_ptr(), n_out as isize, 1,
                input.as_ptr(), 1, n_out as isize,
                S::zero(), gw.as_mut_ptr(), taps as isize, 1,
            );
            // dX = W^T * dO
            if let Some(gi) = gi.as_mut() {
                S::gemm(
                    taps, g.c_out, n_out, S::one(),
                    weights.as_ptr(), 1, taps as isize,
                    grad_out.as_ptr(), n_out as isize, 1,
                    S::zero(), gi.as_mut_ptr(), n_out as isize, 1,
                );
            }
        }
        return (gi, gw);
    }
    let plane = g.output[1] * g.output[2];
    let chunk = g.planes_per_chunk();
    let mut cols = vec![S::zero(); taps * chunk * plane];
    let mut dcols = if want_input { vec![S::zero(); taps * chunk * plane] } else { Vec::new() };
    let mut z0 = 0;
    while z0 < g.output[0] {
        let planes = chunk.min(g.output[0] - z0);
        let p = planes * plane;
        im2col(g, input, z0, planes, &mut cols[..taps * p]);
        unsafe {
            let go = grad_out.as_ptr().add(z0 * plane);
            S::gemm(
                g.c_out, p, taps, S::one(),
                go, n_out as isize, 1,
                cols.as_ptr(), 1, p as isize,
                S::one(), gw.as_mut_ptr(), taps as isize, 1,
            );
            if let Some(gi) = gi.as_mut() {
                S::gemm(
                    taps, g.c_out, p, S::one(),
                    weights.as_ptr(), 1, taps as isize,
                    go, n_out as isize, 1,
                    S::zero(), dcols.as_mut_ptr(), p as isize, 1,
                );
                col2im(g, &dcols[..taps * p], z0, planes, gi);
            }
        }
        z0 += planes;
    }
    (gi, gw)
}
