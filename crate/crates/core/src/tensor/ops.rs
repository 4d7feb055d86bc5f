//! Differentiable primitives recorded on a [`Tape`].

use super::kernels::{gemm, Conv3dGeometry};
use super::tape::{Backward, BackwardCtx, Tape, Var};
use super::{Real, Result, Tensor, TensorError};

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.01;

fn dims5<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 5]> {
    t.expect_rank(op, 5)?;
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

fn check_vector<T: Real>(op: &'static str, axis: &'static str, t: &Tensor<T>, len: usize) -> Result<()> {
    if t.rank() != 1 || t.numel() != len {
        return Err(TensorError::ShapeMismatch {
            op,
            axis,
            expected: len,
            found: t.numel(),
        });
    }
    Ok(())
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        let axis = a
            .shape()
            .iter()
            .zip(b.shape())
            .position(|(x, y)| x != y)
            .unwrap_or(a.rank().min(b.rank()));
        return Err(TensorError::ShapeMismatch {
            op,
            axis: AXIS_NAMES.get(axis).copied().unwrap_or("rank"),
            expected: a.shape().get(axis).copied().unwrap_or(0),
            found: b.shape().get(axis).copied().unwrap_or(0),
        });
    }
    Ok(())
}

const AXIS_NAMES: [&str; 5] = ["axis 0", "axis 1", "axis 2", "axis 3", "axis 4"];

fn bias_grad<T: Real>(grad_out: &[T], n: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for s in 0..n {
        for (c, g) in gb.iter_mut().enumerate() {
            let off = (s * channels + c) * spatial;
            *g += T::of(grad_out[off..off + spatial].iter().map(|v| v.f64()).sum::<f64>());
        }
    }
    gb
}

struct Conv3dFn {
    geom: Conv3dGeometry,
    batch: usize,
    out_channels: usize,
}

impl<T: Real> Backward<T> for Conv3dFn {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, w) = (ctx.input(0).data(), ctx.input(1).data());
        let gout = ctx.grad_output();
        let (rows, out_len, in_per) = (g.col_rows(), g.out_len(), g.channels * g.in_len());
        let cout = self.out_channels;
        let mut gx = ctx.needs_grad(0).then(|| vec![T::zero(); x.len()]);
        let mut gw = ctx.needs_grad(1).then(|| vec![T::zero(); w.len()]);
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * out_len] };
        for s in 0..self.batch {
            let x_s = &x[s * in_per..(s + 1) * in_per];
            let go_s = &gout[s * cout * out_len..(s + 1) * cout * out_len];
            if let Some(gw) = gw.as_mut() {
                let col_ref: &[T] = if g.is_pointwise() {
                    x_s
                } else {
                    g.im2col(x_s, &mut col);
                    &col
                };
                gemm(cout, out_len, rows, T::one(), go_s, false, col_ref, true, T::one(), gw);
            }
            if let Some(gx) = gx.as_mut() {
                let gx_s = &mut gx[s * in_per..(s + 1) * in_per];
                if g.is_pointwise() {
                    gemm(rows, cout, out_len, T::one(), w, true, go_s, false, T::zero(), gx_s);
                } else {
                    gemm(rows, cout, out_len, T::one(), w, true, go_s, false, T::zero(), &mut col);
                    g.col2im(&col, gx_s);
                }
            }
        }
        let gb = ctx.needs_grad(2).then(|| bias_grad(gout, self.batch, cout, out_len));
        vec![gx, gw, gb]
    }
}

struct ConvTranspose3dFn {
    /// Geometry of the adjoint correlation, read from output grid to input grid.
    geom: Conv3dGeometry,
    batch: usize,
    in_channels: usize,
}

impl<T: Real> Backward<T> for ConvTranspose3dFn {
    fn name(&self) -> &'static str {
        "conv_transpose3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, w) = (ctx.input(0).data(), ctx.input(1).data());
        let gout = ctx.grad_output();
        let cin = self.in_channels;
        let (rows, vin, out_per) = (g.col_rows(), g.out_len(), g.channels * g.in_len());
        let mut gx = ctx.needs_grad(0).then(|| vec![T::zero(); x.len()]);
        let mut gw = ctx.needs_grad(1).then(|| vec![T::zero(); w.len()]);
        let mut col = vec![T::zero(); rows * vin];
        for s in 0..self.batch {
            g.im2col(&gout[s * out_per..(s + 1) * out_per], &mut col);
            if let Some(gx) = gx.as_mut() {
                gemm(cin, rows, vin, T::one(), w, false, &col, false, T::zero(), &mut gx[s * cin * vin..(s + 1) * cin * vin]);
            }
            if let Some(gw) = gw.as_mut() {
                gemm(cin, vin, rows, T::one(), &x[s * cin * vin..(s + 1) * cin * vin], false, &col, true, T::one(), gw);
            }
        }
        let gb = ctx
            .needs_grad(2)
            .then(|| bias_grad(gout, self.batch, g.channels, g.in_len()));
        vec![gx, gw, gb]
    }
}

struct InstanceNormFn<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl<T: Real> Backward<T> for InstanceNormFn<T> {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let gain = ctx.input(1).data();
        let gout = ctx.grad_output();
        let (c_n, v) = (self.channels, self.spatial);
        let mut gx = ctx.needs_grad(0).then(|| vec![T::zero(); gout.len()]);
        let mut ggain = vec![0.0f64; c_n];
        let mut gshift = vec![0.0f64; c_n];
        for s in 0..self.batch {
            for c in 0..c_n {
                let off = (s * c_n + c) * v;
                let go = &gout[off..off + v];
                let xh = &self.normalized[off..off + v];
                let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
                for (&g, &h) in go.iter().zip(xh) {
                    sum_g += g.f64();
                    sum_gx += g.f64() * h.f64();
                }
                ggain[c] += sum_gx;
                gshift[c] += sum_g;
                if let Some(gx) = gx.as_mut() {
                    // d/dx of gain * xhat with batch-free statistics
                    let k = (gain[c] * self.inv_std[s * c_n + c]).f64() / v as f64;
                    let dst = &mut gx[off..off + v];
                    for ((d, &g), &h) in dst.iter_mut().zip(go).zip(xh) {
                        *d = T::of(k * (v as f64 * g.f64() - sum_g - h.f64() * sum_gx));
                    }
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<_>>();
        vec![
            gx,
            ctx.needs_grad(1).then(|| cast(ggain)),
            ctx.needs_grad(2).then(|| cast(gshift)),
        ]
    }
}

struct LeakyReluFn {
    slope: f32,
}

impl<T: Real> Backward<T> for LeakyReluFn {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.input(0).data();
        let g = ctx
            .grad_output()
            .iter()
            .zip(x)
            .map(|(&g, &x)| if x >= T::zero() { g } else { g * T::of(self.slope as f64) })
            .collect();
        vec![Some(g)]
    }
}

struct SoftmaxChannelFn {
    channels: usize,
    spatial: usize,
}

impl<T: Real> Backward<T> for SoftmaxChannelFn {
    fn name(&self) -> &'static str {
        "softmax_channel"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = ctx.output().data();
        let gout = ctx.grad_output();
        let (c_n, v) = (self.channels, self.spatial);
        let mut gx = vec![T::zero(); y.len()];
        for base in (0..y.len()).step_by(c_n * v) {
            for i in 0..v {
                let dot: T = (0..c_n).map(|c| gout[base + c * v + i] * y[base + c * v + i]).sum();
                for c in 0..c_n {
                    let k = base + c * v + i;
                    gx[k] = y[k] * (gout[k] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

struct LinearFn {
    batch: usize,
    in_features: usize,
    out_features: usize,
}

impl<T: Real> Backward<T> for LinearFn {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, w) = (ctx.input(0).data(), ctx.input(1).data());
        let g = ctx.grad_output();
        let (n, fi, fo) = (self.batch, self.in_features, self.out_features);
        let gx = ctx.needs_grad(0).then(|| {
            let mut gx = vec![T::zero(); n * fi];
            gemm(n, fo, fi, T::one(), g, false, w, false, T::zero(), &mut gx);
            gx
        });
        let gw = ctx.needs_grad(1).then(|| {
            let mut gw = vec![T::zero(); fo * fi];
            gemm(fo, n, fi, T::one(), g, true, x, false, T::zero(), &mut gw);
            gw
        });
        let gb = ctx.needs_grad(2).then(|| {
            let mut gb = vec![T::zero(); fo];
            for row in g.chunks(fo) {
                gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

struct ConcatChannelsFn {
    batch: usize,
    left: usize,
    right: usize,
}

impl<T: Real> Backward<T> for ConcatChannelsFn {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_output();
        let total = self.left + self.right;
        let mut ga = Vec::with_capacity(self.batch * self.left);
        let mut gb = Vec::with_capacity(self.batch * self.right);
        for s in 0..self.batch {
            let row = &g[s * total..(s + 1) * total];
            ga.extend_from_slice(&row[..self.left]);
            gb.extend_from_slice(&row[self.left..]);
        }
        vec![Some(ga), Some(gb)]
    }
}

struct SliceLastFn {
    rows: usize,
    width: usize,
    start: usize,
    len: usize,
}

impl<T: Real> Backward<T> for SliceLastFn {
    fn name(&self) -> &'static str {
        "slice_last"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_output();
        let mut gx = vec![T::zero(); self.rows * self.width];
        for r in 0..self.rows {
            gx[r * self.width + self.start..][..self.len].copy_from_slice(&g[r * self.len..(r + 1) * self.len]);
        }
        vec![Some(gx)]
    }
}

struct AddFn;

impl<T: Real> Backward<T> for AddFn {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_output();
        vec![
            ctx.needs_grad(0).then(|| g.to_vec()),
            ctx.needs_grad(1).then(|| g.to_vec()),
        ]
    }
}

struct MulFn;

impl<T: Real> Backward<T> for MulFn {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_output();
        let (a, b) = (ctx.input(0).data(), ctx.input(1).data());
        vec![
            ctx.needs_grad(0).then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
            ctx.needs_grad(1).then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
        ]
    }
}

struct ScaleFn {
    factor: f32,
}

impl<T: Real> Backward<T> for ScaleFn {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let f = T::of(self.factor as f64);
        vec![Some(ctx.grad_output().iter().map(|&g| g * f).collect())]
    }
}

struct AddScalarFn;

impl<T: Real> Backward<T> for AddScalarFn {
    fn name(&self) -> &'static str {
        "add_scalar"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad_output().to_vec())]
    }
}

struct SumFn {
    len: usize,
    factor: f64,
}

impl<T: Real> Backward<T> for SumFn {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![ctx.grad_output()[0] * T::of(self.factor); self.len])]
    }
}

impl<T: Real> Tape<T> {
    /// Direct 3D cross-correlation with zero padding.
    ///
    /// `input` is `[N, Cin, D, H, W]`, `weight` is `[Cout, Cin, kD, kH, kW]`, `bias` is `[Cout]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        const OP: &str = "conv3d";
        let (xt, wt, bt) = (self.value(input), self.value(weight), self.value(bias));
        let [n, cin, d, h, w] = dims5(xt, OP)?;
        let [cout, wcin, kd, kh, kw] = dims5(wt, OP)?;
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                axis: "input channels",
                expected: wcin,
                found: cin,
            });
        }
        check_vector(OP, "bias", bt, cout)?;
        let geom = Conv3dGeometry::new(OP, cin, [d, h, w], [kd, kh, kw], stride, padding)?;
        let (rows, out_len, in_per) = (geom.col_rows(), geom.out_len(), cin * geom.in_len());
        let mut out = vec![T::zero(); n * cout * out_len];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * out_len] };
        for s in 0..n {
            let x_s = &xt.data()[s * in_per..(s + 1) * in_per];
            let out_s = &mut out[s * cout * out_len..(s + 1) * cout * out_len];
            for (c, row) in out_s.chunks_mut(out_len).enumerate() {
                row.fill(bt.data()[c]);
            }
            let col_ref: &[T] = if geom.is_pointwise() {
                x_s
            } else {
                geom.im2col(x_s, &mut col);
                &col
            };
            gemm(cout, rows, out_len, T::one(), wt.data(), false, col_ref, false, T::one(), out_s);
        }
        let [od, oh, ow] = geom.out;
        let out = Tensor::new([n, cout, od, oh, ow], out)?;
        Ok(self.apply(
            Conv3dFn {
                geom,
                batch: n,
                out_channels: cout,
            },
            &[input, weight, bias],
            out,
        ))
    }

    /// Transposed 3D convolution (the adjoint of a strided correlation), no padding.
    ///
    /// `weight` is `[Cin, Cout, kD, kH, kW]`; output extent per axis is `(in - 1) * stride + k`.
    pub fn conv_transpose3d(&mut self, input: Var, weight: Var, bias: Var, stride: [usize; 3]) -> Result<Var> {
        const OP: &str = "conv_transpose3d";
        let (xt, wt, bt) = (self.value(input), self.value(weight), self.value(bias));
        let [n, cin, d, h, w] = dims5(xt, OP)?;
        let [wcin, cout, kd, kh, kw] = dims5(wt, OP)?;
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                axis: "input channels",
                expected: wcin,
                found: cin,
            });
        }
        check_vector(OP, "bias", bt, cout)?;
        if stride.contains(&0) {
            return Err(TensorError::OutputSize {
                op: OP,
                axis: "stride",
                detail: "stride must be >= 1".into(),
            });
        }
        let out_dims = [(d - 1) * stride[0] + kd, (h - 1) * stride[1] + kh, (w - 1) * stride[2] + kw];
        let geom = Conv3dGeometry::new(OP, cout, out_dims, [kd, kh, kw], stride, [0, 0, 0])?;
        assert_eq!(geom.out, [d, h, w]);
        let (rows, vin, out_per) = (geom.col_rows(), geom.out_len(), cout * geom.in_len());
        let mut out = vec![T::zero(); n * out_per];
        let mut col = vec![T::zero(); rows * vin];
        for s in 0..n {
            let x_s = &xt.data()[s * cin * vin..(s + 1) * cin * vin];
            gemm(rows, cin, vin, T::one(), wt.data(), true, x_s, false, T::zero(), &mut col);
            let out_s = &mut out[s * out_per..(s + 1) * out_per];
            for (c, plane) in out_s.chunks_mut(geom.in_len()).enumerate() {
                plane.fill(bt.data()[c]);
            }
            geom.col2im(&col, out_s);
        }
        let out = Tensor::new([n, cout, out_dims[0], out_dims[1], out_dims[2]], out)?;
        Ok(self.apply(
            ConvTranspose3dFn {
                geom,
                batch: n,
                in_channels: cin,
            },
            &[input, weight, bias],
            out,
        ))
    }

    /// Per-sample, per-channel standardization over the spatial axes followed by `gain`/`shift`.
    pub fn instance_norm(&mut self, input: Var, gain: Var, shift: Var, epsilon: f32) -> Result<Var> {
        const OP: &str = "instance_norm";
        let (xt, gt, st) = (self.value(input), self.value(gain), self.value(shift));
        let [n, c_n, ..] = dims5(xt, OP)?;
        check_vector(OP, "gain", gt, c_n)?;
        check_vector(OP, "shift", st, c_n)?;
        let v = xt.spatial_len();
        if v < 2 {
            return Err(TensorError::Invalid {
                op: OP,
                detail: format!("spatial volume must be at least 2 voxels, got {v}"),
            });
        }
        let x = xt.data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * c_n];
        for s in 0..n {
            for c in 0..c_n {
                let idx = s * c_n + c;
                let src = &x[idx * v..(idx + 1) * v];
                let mean = src.iter().map(|a| a.f64()).sum::<f64>() / v as f64;
                let var = src.iter().map(|a| (a.f64() - mean).powi(2)).sum::<f64>() / v as f64;
                let is = 1.0 / (var + epsilon as f64).sqrt();
                inv_std[idx] = T::of(is);
                let (g, b) = (gt.data()[c], st.data()[c]);
                for i in 0..v {
                    let xh = T::of((src[i].f64() - mean) * is);
                    normalized[idx * v + i] = xh;
                    out[idx * v + i] = g * xh + b;
                }
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.apply(
            InstanceNormFn {
                normalized,
                inv_std,
                batch: n,
                channels: c_n,
                spatial: v,
            },
            &[input, gain, shift],
            out,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        let xt = self.value(input);
        let s = T::of(slope as f64);
        let data = xt.data().iter().map(|&x| if x >= T::zero() { x } else { s * x }).collect();
        let out = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        self.apply(LeakyReluFn { slope }, &[input], out)
    }

    /// Per-voxel softmax across the channel axis of an `N x C x ...` tensor.
    pub fn softmax_channel(&mut self, input: Var) -> Result<Var> {
        let xt = self.value(input);
        let out = softmax_channel_values(xt)?;
        let (channels, spatial) = (xt.shape()[1], xt.spatial_len());
        Ok(self.apply(SoftmaxChannelFn { channels, spatial }, &[input], out))
    }

    /// `input [N, in] x weight[out, in]^T + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let (xt, wt, bt) = (self.value(input), self.value(weight), self.value(bias));
        xt.expect_rank(OP, 2)?;
        wt.expect_rank(OP, 2)?;
        let (n, fi) = (xt.shape()[0], xt.shape()[1]);
        let (fo, wi) = (wt.shape()[0], wt.shape()[1]);
        if wi != fi {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                axis: "in features",
                expected: wi,
                found: fi,
            });
        }
        check_vector(OP, "bias", bt, fo)?;
        let mut out = vec![T::zero(); n * fo];
        for row in out.chunks_mut(fo) {
            row.copy_from_slice(bt.data());
        }
        gemm(n, fi, fo, T::one(), xt.data(), false, wt.data(), true, T::one(), &mut out);
        let out = Tensor::new([n, fo], out)?;
        Ok(self.apply(
            LinearFn {
                batch: n,
                in_features: fi,
                out_features: fo,
            },
            &[input, weight, bias],
            out,
        ))
    }

    /// Concatenate two `N x C x ...` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() < 2 || at.rank() != bt.rank() {
            return Err(TensorError::Rank {
                op: OP,
                expected: at.rank(),
                found: bt.shape().to_vec(),
            });
        }
        if at.shape()[0] != bt.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                axis: "batch",
                expected: at.shape()[0],
                found: bt.shape()[0],
            });
        }
        if at.shape()[2..] != bt.shape()[2..] {
            let i = (2..at.rank()).find(|&i| at.shape()[i] != bt.shape()[i]).unwrap();
            return Err(TensorError::ShapeMismatch {
                op: OP,
                axis: AXIS_NAMES[i.min(4)],
                expected: at.shape()[i],
                found: bt.shape()[i],
            });
        }
        let n = at.shape()[0];
        let (left, right) = (at.numel() / n, bt.numel() / n);
        let mut data = Vec::with_capacity(at.numel() + bt.numel());
        for s in 0..n {
            data.extend_from_slice(&at.data()[s * left..(s + 1) * left]);
            data.extend_from_slice(&bt.data()[s * right..(s + 1) * right]);
        }
        let mut shape = at.shape().to_vec();
        shape[1] += bt.shape()[1];
        let out = Tensor::new(shape, data)?;
        Ok(self.apply(ConcatChannelsFn { batch: n, left, right }, &[a, b], out))
    }

    /// Columns `start..start + len` of a `[rows, width]` matrix.
    pub fn slice_last(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_last";
        let xt = self.value(input);
        xt.expect_rank(OP, 2)?;
        let (rows, width) = (xt.shape()[0], xt.shape()[1]);
        if len == 0 || start + len > width {
            return Err(TensorError::Invalid {
                op: OP,
                detail: format!("range {start}..{} exceeds width {width}", start + len),
            });
        }
        let data = (0..rows).flat_map(|r| xt.data()[r * width + start..][..len].iter().copied()).collect();
        let out = Tensor::new([rows, len], data)?;
        Ok(self.apply(SliceLastFn { rows, width, start, len }, &[input], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("add", at, bt)?;
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.apply(AddFn, &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape("mul", at, bt)?;
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.apply(MulFn, &[a, b], out))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let xt = self.value(input);
        let f = T::of(factor as f64);
        let out = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&x| x * f).collect()).expect("same shape");
        self.apply(ScaleFn { factor }, &[input], out)
    }

    pub fn add_scalar(&mut self, input: Var, value: f32) -> Var {
        let xt = self.value(input);
        let c = T::of(value as f64);
        let out = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&x| x + c).collect()).expect("same shape");
        self.apply(AddScalarFn, &[input], out)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let xt = self.value(input);
        let total = T::of(xt.data().iter().map(|x| x.f64()).sum::<f64>());
        let len = xt.numel();
        self.apply(SumFn { len, factor: 1.0 }, &[input], Tensor::scalar(total))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let xt = self.value(input);
        let len = xt.numel();
        let total = xt.data().iter().map(|x| x.f64()).sum::<f64>() / len as f64;
        self.apply(
            SumFn {
                len,
                factor: 1.0 / len as f64,
            },
            &[input],
            Tensor::scalar(T::of(total)),
        )
    }
}

/// Numerically stable channel softmax without recording.
pub(crate) fn softmax_channel_values<T: Real>(xt: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "softmax_channel";
    if xt.rank() < 2 {
        return Err(TensorError::Rank {
            op: OP,
            expected: 5,
            found: xt.shape().to_vec(),
        });
    }
    let c_n = xt.shape()[1];
    if c_n < 2 {
        return Err(TensorError::Invalid {
            op: OP,
            detail: format!("need at least 2 channels, got {c_n}"),
        });
    }
    let v = xt.spatial_len();
    let x = xt.data();
    let mut out = vec![T::zero(); x.len()];
    for base in (0..x.len()).step_by(c_n * v) {
        for i in 0..v {
            let m = (0..c_n).map(|c| x[base + c * v + i]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..c_n {
                let e = (x[base + c * v + i] - m).exp();
                out[base + c * v + i] = e;
                z += e;
            }
            for c in 0..c_n {
                out[base + c * v + i] /= z;
            }
        }
    }
    Tensor::new(xt.shape().to_vec(), out)
}
