//! Forward kernels and their adjoints.
//!
//! Every function here is pure: inputs are borrowed, a fresh tensor is returned.
//! The autodiff tape in [`crate::tape`] records calls to these kernels and uses the
//! `*_backward` functions to propagate gradients.

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution. Padding is explicit and symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride 1 with "same" padding `dilation * (k - 1) / 2`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation, dilation * (kernel - 1) / 2)
    }

    /// Spatial output size, `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` when the
    /// dilated kernel does not fit.
    pub fn out_dim(&self, n: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

/// Spatial output size of a transposed convolution, `(n - 1) s - 2p + k`.
pub fn conv_transpose_out_dim(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    ((n - 1) * stride + kernel).checked_sub(2 * padding).filter(|&d| d > 0)
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    spec: ConvSpec,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Half-open range of output columns whose input column `ox * s - p + off` is in bounds.
    fn valid_range(&self, offset: usize, out: usize, extent: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let p = self.spec.padding;
        // need ox*s + offset >= p and ox*s + offset < extent + p
        let lo = if offset >= p { 0 } else { (p - offset).div_ceil(s) };
        let hi = if extent + p > offset {
            ((extent + p - offset).div_ceil(s)).min(out)
        } else {
            0
        };
        (lo.min(out), hi.max(lo.min(out)))
    }
}

/// Unfolds one image `(channels, height, width)` into columns `(channels*k*k, out_h*out_w)`.
/// Row `r` of the result starts at `cols[r * ld]`.
fn im2col<T: Float>(img: &[T], g: &Geometry, cols: &mut [T], ld: usize) {
    let (k, s, d, p) = (g.kernel, g.spec.stride, g.spec.dilation, g.spec.padding);
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ki * d, g.out_h, g.height);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + ncols];
                let (ox_lo, ox_hi) = g.valid_range(kj * d, g.out_w, g.width);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < oy_lo || oy >= oy_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    if ox_lo >= ox_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ki * d - p;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    line[..ox_lo].fill(T::zero());
                    line[ox_hi..].fill(T::zero());
                    let ix0 = ox_lo * s + kj * d - p;
                    if s == 1 {
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (v, &x) in line[ox_lo..ox_hi].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image buffer.
fn col2im<T: Float>(cols: &[T], g: &Geometry, img: &mut [T], ld: usize) {
    let (k, s, d, p) = (g.kernel, g.spec.stride, g.spec.dilation, g.spec.padding);
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ki * d, g.out_h, g.height);
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..row * ld + ncols];
                let (ox_lo, ox_hi) = g.valid_range(kj * d, g.out_w, g.width);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki * d - p;
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let ix0 = ox_lo * s + kj * d - p;
                    if s == 1 {
                        for (o, &v) in dst[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(&line[ox_lo..ox_hi]) {
                            *o += v;
                        }
                    } else {
                        for (o, &v) in dst[ix0..].iter_mut().step_by(s).zip(&line[ox_lo..ox_hi]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Float>(op: &'static str, bias: &Tensor<T>, n: usize) -> Result<()> {
    if bias.shape() != [n] {
        return Err(shape_err(op, format!("bias [{n}]"), bias.shape()));
    }
    Ok(())
}

fn conv_geometry<T: Float>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(usize, usize, Geometry)> {
    let (b, cin, h, w) = input.dims4(op)?;
    let [cout, wcin, kh, kw] = weight.shape()[..] else {
        return Err(shape_err(op, "weight rank 4 (out_ch, in_ch, k, k)", weight.shape()));
    };
    if wcin != cin {
        return Err(shape_err(op, format!("weight in_ch {cin}"), weight.shape()));
    }
    if kh != kw {
        return Err(shape_err(op, "square kernel", weight.shape()));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("stride and dilation must be >= 1, got {spec:?}"),
        });
    }
    let (Some(out_h), Some(out_w)) = (spec.out_dim(h, kh), spec.out_dim(w, kw)) else {
        return Err(shape_err(op, format!("spatial dims that fit kernel {kh} under {spec:?}"), input.shape()));
    };
    Ok((
        b,
        cout,
        Geometry {
            channels: cin,
            height: h,
            width: w,
            kernel: kh,
            spec,
            out_h,
            out_w,
        },
    ))
}

/// Channel-major zero-padded copy of a batch for stride-1 convolution without im2col.
///
/// Channel `c` occupies `data[c * cstride..]` and holds the `b` padded planes back to back
/// (the "grid"), followed by enough zeros that every kernel tap can view `grid` elements
/// starting at its offset. Output pixel `(n, y, x)` lives at grid index
/// `n * hp * wp + y * wp + x`; the remaining grid positions are scratch.
struct PaddedBatch<T> {
    data: Vec<T>,
    cstride: usize,
    grid: usize,
    hp: usize,
    wp: usize,
}

impl<T: Float> PaddedBatch<T> {
    fn new(b: usize, g: &Geometry) -> Self {
        let p = g.spec.padding;
        let (hp, wp) = (g.height + 2 * p, g.width + 2 * p);
        let grid = b * hp * wp;
        let slack = g.spec.dilation * (g.kernel - 1) * (wp + 1);
        let cstride = grid + slack;
        Self {
            data: vec![T::zero(); g.channels * cstride],
            cstride,
            grid,
            hp,
            wp,
        }
    }

    fn from_batch(x: &[T], b: usize, g: &Geometry) -> Self {
        let mut pb = Self::new(b, g);
        let p = g.spec.padding;
        for n in 0..b {
            for c in 0..g.channels {
                let src = &x[(n * g.channels + c) * g.height * g.width..];
                for y in 0..g.height {
                    let dst = c * pb.cstride + n * pb.hp * pb.wp + (y + p) * pb.wp + p;
                    pb.data[dst..dst + g.width].copy_from_slice(&src[y * g.width..(y + 1) * g.width]);
                }
            }
        }
        pb
    }

    fn tap_offset(&self, g: &Geometry, ki: usize, kj: usize) -> usize {
        g.spec.dilation * (ki * self.wp + kj)
    }
}

fn direct_forward<T: Float>(x: &[T], w: &[T], bias: &[T], b: usize, cout: usize, g: &Geometry) -> Vec<T> {
    let (cin, k) = (g.channels, g.kernel);
    let xin = PaddedBatch::from_batch(x, b, g);
    let grid = xin.grid;
    let mut acc = vec![T::zero(); cout * grid];
    for ki in 0..k {
        for kj in 0..k {
            let off = xin.tap_offset(g, ki, kj);
            T::gemm_strided(
                cout,
                cin,
                grid,
                (&w[ki * k + kj..], cin * k * k, k * k),
                (&xin.data[off..], xin.cstride, 1),
                T::one(),
                (&mut acc, grid, 1),
            );
        }
    }
    let plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); b * cout * plane];
    for n in 0..b {
        for o in 0..cout {
            let dst = &mut out[(n * cout + o) * plane..(n * cout + o + 1) * plane];
            for y in 0..g.out_h {
                let src = &acc[o * grid + n * xin.hp * xin.wp + y * xin.wp..][..g.out_w];
                for (d, &v) in dst[y * g.out_w..(y + 1) * g.out_w].iter_mut().zip(src) {
                    *d = v + bias[o];
                }
            }
        }
    }
    out
}

fn direct_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    b: usize,
    cout: usize,
    g: &Geometry,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (cin, k, p) = (g.channels, g.kernel, g.spec.padding);
    let xin = PaddedBatch::from_batch(x, b, g);
    let grid = xin.grid;
    let plane = g.out_h * g.out_w;
    let mut dy_grid = vec![T::zero(); cout * grid];
    let mut db = vec![T::zero(); cout];
    for n in 0..b {
        for o in 0..cout {
            let src = &dy[(n * cout + o) * plane..(n * cout + o + 1) * plane];
            db[o] += src.iter().copied().sum::<T>();
            for y in 0..g.out_h {
                let dst = o * grid + n * xin.hp * xin.wp + y * xin.wp;
                dy_grid[dst..dst + g.out_w].copy_from_slice(&src[y * g.out_w..(y + 1) * g.out_w]);
            }
        }
    }
    let mut dw = vec![T::zero(); w.len()];
    let mut dx_pad = PaddedBatch::<T>::new(b, g);
    for ki in 0..k {
        for kj in 0..k {
            let off = xin.tap_offset(g, ki, kj);
            let tap = ki * k + kj;
            T::gemm_strided(
                cout,
                grid,
                cin,
                (&dy_grid, grid, 1),
                (&xin.data[off..], 1, xin.cstride),
                T::zero(),
                (&mut dw[tap..], cin * k * k, k * k),
            );
            T::gemm_strided(
                cin,
                cout,
                grid,
                (&w[tap..], k * k, cin * k * k),
                (&dy_grid, grid, 1),
                T::one(),
                (&mut dx_pad.data[off..], dx_pad.cstride, 1),
            );
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    for n in 0..b {
        for c in 0..cin {
            let dst = &mut dx[(n * cin + c) * g.height * g.width..];
            for y in 0..g.height {
                let src = c * dx_pad.cstride + n * dx_pad.hp * dx_pad.wp + (y + p) * dx_pad.wp + p;
                dst[y * g.width..(y + 1) * g.width].copy_from_slice(&dx_pad.data[src..src + g.width]);
            }
        }
    }
    (dx, dw, db)
}

/// Stride-1 convolution to a single output channel as shifted multiply-adds over the padded grid.
fn single_forward<T: Float>(x: &[T], w: &[T], bias: T, b: usize, g: &Geometry) -> Vec<T> {
    let (cin, k) = (g.channels, g.kernel);
    let xin = PaddedBatch::from_batch(x, b, g);
    let grid = xin.grid;
    let mut acc = vec![bias; grid];
    for c in 0..cin {
        let chan = &xin.data[c * xin.cstride..(c + 1) * xin.cstride];
        for ki in 0..k {
            for kj in 0..k {
                let wv = w[(c * k + ki) * k + kj];
                let off = xin.tap_offset(g, ki, kj);
                for (a, &v) in acc.iter_mut().zip(&chan[off..off + grid]) {
                    *a += wv * v;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(b * g.out_h * g.out_w);
    for n in 0..b {
        for y in 0..g.out_h {
            let from = n * xin.hp * xin.wp + y * xin.wp;
            out.extend_from_slice(&acc[from..from + g.out_w]);
        }
    }
    out
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot_lanes<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn single_backward<T: Float>(x: &[T], w: &[T], dy: &[T], b: usize, g: &Geometry) -> (Vec<T>, Vec<T>, T) {
    let (cin, k, p) = (g.channels, g.kernel, g.spec.padding);
    let xin = PaddedBatch::from_batch(x, b, g);
    let grid = xin.grid;
    let mut dy_grid = vec![T::zero(); grid];
    for n in 0..b {
        for y in 0..g.out_h {
            let dst = n * xin.hp * xin.wp + y * xin.wp;
            let src = (n * g.out_h + y) * g.out_w;
            dy_grid[dst..dst + g.out_w].copy_from_slice(&dy[src..src + g.out_w]);
        }
    }
    let db = dy.iter().copied().sum::<T>();
    let mut dw = vec![T::zero(); w.len()];
    let mut dx_pad = PaddedBatch::<T>::new(b, g);
    for c in 0..cin {
        let chan = &xin.data[c * xin.cstride..(c + 1) * xin.cstride];
        let dchan = &mut dx_pad.data[c * xin.cstride..(c + 1) * xin.cstride];
        for ki in 0..k {
            for kj in 0..k {
                let tap = (c * k + ki) * k + kj;
                let off = xin.tap_offset(g, ki, kj);
                dw[tap] = dot_lanes(&chan[off..off + grid], &dy_grid);
                let wv = w[tap];
                for (a, &d) in dchan[off..off + grid].iter_mut().zip(&dy_grid) {
                    *a += wv * d;
                }
            }
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    for n in 0..b {
        for c in 0..cin {
            let dst = &mut dx[(n * cin + c) * g.height * g.width..];
            for y in 0..g.height {
                let src = c * dx_pad.cstride + n * dx_pad.hp * dx_pad.wp + (y + p) * dx_pad.wp + p;
                dst[y * g.width..(y + 1) * g.width].copy_from_slice(&dx_pad.data[src..src + g.width]);
            }
        }
    }
    (dx, dw, db)
}

/// Images per GEMM so that one column buffer stays around a megabyte.
fn chunk_size(rows: usize, ncols: usize, b: usize) -> usize {
    (262_144 / (rows * ncols).max(1)).clamp(1, b.max(1))
}

/// Whether the im2col-free path pays off: it runs one GEMM per kernel tap with
/// inner dimension `in_ch`, which is only efficient for wide layers.
fn use_direct(spec: ConvSpec, cin: usize, cout: usize) -> bool {
    spec.stride == 1 && spec.dilation == 1 && cin >= 16 && cout >= 16
}

/// 2-D cross-correlation. `weight` is `(out_ch, in_ch, k, k)`, `bias` is `(out_ch)`.
pub fn conv2d<T: Float>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let (b, cout, g) = conv_geometry("conv2d", input, weight, spec)?;
    check_bias("conv2d", bias, cout)?;
    if spec.stride == 1 && cout == 1 {
        let out = single_forward(input.data(), weight.data(), bias.data()[0], b, &g);
        return Tensor::from_vec(vec![b, 1, g.out_h, g.out_w], out);
    }
    if use_direct(spec, g.channels, cout) {
        let out = direct_forward(input.data(), weight.data(), bias.data(), b, cout, &g);
        return Tensor::from_vec(vec![b, cout, g.out_h, g.out_w], out);
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let in_per = g.channels * g.height * g.width;
    let chunk = chunk_size(rows, ncols, b);
    let mut cols = vec![T::zero(); rows * chunk * ncols];
    let mut prod = vec![T::zero(); cout * chunk * ncols];
    let mut out = Vec::with_capacity(b * cout * ncols);
    for n0 in (0..b).step_by(chunk) {
        let cb = chunk.min(b - n0);
        let ld = cb * ncols;
        for i in 0..cb {
            let n = n0 + i;
            im2col(&input.data()[n * in_per..(n + 1) * in_per], &g, &mut cols[i * ncols..], ld);
        }
        T::gemm(cout, rows, ld, weight.data(), false, &cols[..rows * ld], false, T::zero(), &mut prod[..cout * ld]);
        unbatch_into(&prod[..cout * ld], cb, cout, ncols, Some(bias.data()), &mut out);
    }
    Tensor::from_vec(vec![b, cout, g.out_h, g.out_w], out)
}

/// Appends `(c, b * plane)` as `(b, c, plane)`, optionally adding a per-channel bias.
fn unbatch_into<T: Float>(src: &[T], b: usize, c: usize, plane: usize, bias: Option<&[T]>, out: &mut Vec<T>) {
    for n in 0..b {
        for o in 0..c {
            let row = &src[o * b * plane + n * plane..o * b * plane + (n + 1) * plane];
            match bias {
                Some(bias) => out.extend(row.iter().map(|&v| v + bias[o])),
                None => out.extend_from_slice(row),
            }
        }
    }
}

/// Writes images `n0..n0 + b` of a `(_, c, plane)` batch as `(c, b * plane)` into `dst`.
fn batch_major_into<T: Float>(src: &[T], n0: usize, b: usize, c: usize, plane: usize, dst: &mut [T]) {
    for n in 0..b {
        for o in 0..c {
            let from = ((n0 + n) * c + o) * plane;
            dst[o * b * plane + n * plane..o * b * plane + (n + 1) * plane].copy_from_slice(&src[from..from + plane]);
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, cout, g) = conv_geometry("conv2d_backward", input, weight, spec)?;
    if grad_out.shape() != [b, cout, g.out_h, g.out_w] {
        return Err(shape_err("conv2d_backward", "grad matching output", grad_out.shape()));
    }
    if spec.stride == 1 && cout == 1 {
        let (dx, dw, db) = single_backward(input.data(), weight.data(), grad_out.data(), b, &g);
        return Ok((
            Tensor::from_vec(input.shape().to_vec(), dx)?,
            Tensor::from_vec(weight.shape().to_vec(), dw)?,
            Tensor::from_vec(vec![1], vec![db])?,
        ));
    }
    if use_direct(spec, g.channels, cout) {
        let (dx, dw, db) = direct_backward(input.data(), weight.data(), grad_out.data(), b, cout, &g);
        return Ok((
            Tensor::from_vec(input.shape().to_vec(), dx)?,
            Tensor::from_vec(weight.shape().to_vec(), dw)?,
            Tensor::from_vec(vec![cout], db)?,
        ));
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let in_per = g.channels * g.height * g.width;
    let chunk = chunk_size(rows, ncols, b);
    let mut cols = vec![T::zero(); rows * chunk * ncols];
    let mut dy = vec![T::zero(); cout * chunk * ncols];
    let mut dx = Tensor::zeros(input.shape().to_vec());
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = vec![T::zero(); cout];
    for n0 in (0..b).step_by(chunk) {
        let cb = chunk.min(b - n0);
        let ld = cb * ncols;
        for i in 0..cb {
            let n = n0 + i;
            im2col(&input.data()[n * in_per..(n + 1) * in_per], &g, &mut cols[i * ncols..], ld);
        }
        batch_major_into(grad_out.data(), n0, cb, cout, ncols, &mut dy);
        let dy = &dy[..cout * ld];
        T::gemm(cout, ld, rows, dy, false, &cols[..rows * ld], true, T::one(), dw.data_mut());
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy[o * ld..(o + 1) * ld].iter().copied().sum::<T>();
        }
        // the column buffer is reused for the input gradient
        T::gemm(rows, cout, ld, weight.data(), true, dy, false, T::zero(), &mut cols[..rows * ld]);
        for i in 0..cb {
            let n = n0 + i;
            col2im(&cols[i * ncols..], &g, &mut dx.data_mut()[n * in_per..(n + 1) * in_per], ld);
        }
    }
    Ok((dx, dw, Tensor::from_vec(vec![cout], db)?))
}

fn deconv_geometry<T: Float>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, Geometry)> {
    let (b, cin, h, w) = input.dims4(op)?;
    let [wcin, cout, kh, kw] = weight.shape()[..] else {
        return Err(shape_err(op, "weight rank 4 (in_ch, out_ch, k, k)", weight.shape()));
    };
    if wcin != cin || kh != kw {
        return Err(shape_err(op, format!("weight ({cin}, _, k, k)"), weight.shape()));
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: "stride must be >= 1".into(),
        });
    }
    let (Some(out_h), Some(out_w)) = (
        conv_transpose_out_dim(h, kh, stride, padding),
        conv_transpose_out_dim(w, kw, stride, padding),
    ) else {
        return Err(shape_err(op, format!("dims with positive output under k={kh}, p={padding}"), input.shape()));
    };
    // Geometry of the forward convolution this operator is the adjoint of.
    let g = Geometry {
        channels: cout,
        height: out_h,
        width: out_w,
        kernel: kh,
        spec: ConvSpec::new(stride, 1, padding),
        out_h: h,
        out_w: w,
    };
    Ok((b, cin, cout, g))
}

/// Transposed convolution (adjoint of [`conv2d`] with the same weight).
/// `weight` is `(in_ch, out_ch, k, k)`; output spatial size is `(n - 1) s - 2p + k`.
pub fn conv_transpose2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, cin, cout, g) = deconv_geometry("conv_transpose2d", input, weight, stride, padding)?;
    check_bias("conv_transpose2d", bias, cout)?;
    let (rows, ncols) = (g.rows(), g.cols());
    let plane = g.height * g.width;
    let out_per = cout * plane;
    let chunk = chunk_size(rows, ncols, b);
    let mut x = vec![T::zero(); cin * chunk * ncols];
    let mut cols = vec![T::zero(); rows * chunk * ncols];
    let mut out = vec![T::zero(); b * out_per];
    for (o, &bv) in bias.data().iter().enumerate() {
        for n in 0..b {
            out[n * out_per + o * plane..n * out_per + (o + 1) * plane].fill(bv);
        }
    }
    for n0 in (0..b).step_by(chunk) {
        let cb = chunk.min(b - n0);
        let ld = cb * ncols;
        batch_major_into(input.data(), n0, cb, cin, ncols, &mut x);
        T::gemm(rows, cin, ld, weight.data(), true, &x[..cin * ld], false, T::zero(), &mut cols[..rows * ld]);
        for i in 0..cb {
            let n = n0 + i;
            col2im(&cols[i * ncols..], &g, &mut out[n * out_per..(n + 1) * out_per], ld);
        }
    }
    Tensor::from_vec(vec![b, cout, g.height, g.width], out)
}

/// Gradients of [`conv_transpose2d`] with respect to input, weight and bias.
pub fn conv_transpose2d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, cin, cout, g) = deconv_geometry("conv_transpose2d_backward", input, weight, stride, padding)?;
    if grad_out.shape() != [b, cout, g.height, g.width] {
        return Err(shape_err("conv_transpose2d_backward", "grad matching output", grad_out.shape()));
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let plane = g.height * g.width;
    let out_per = cout * plane;
    let chunk = chunk_size(rows, ncols, b);
    let mut dcols = vec![T::zero(); rows * chunk * ncols];
    let mut x = vec![T::zero(); cin * chunk * ncols];
    let mut dxb = vec![T::zero(); cin * chunk * ncols];
    let mut dx = Vec::with_capacity(input.len());
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = vec![T::zero(); cout];
    for n0 in (0..b).step_by(chunk) {
        let cb = chunk.min(b - n0);
        let ld = cb * ncols;
        for i in 0..cb {
            let n = n0 + i;
            let dy = &grad_out.data()[n * out_per..(n + 1) * out_per];
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
            im2col(dy, &g, &mut dcols[i * ncols..], ld);
        }
        batch_major_into(input.data(), n0, cb, cin, ncols, &mut x);
        let dcols = &dcols[..rows * ld];
        T::gemm(cin, rows, ld, weight.data(), false, dcols, false, T::zero(), &mut dxb[..cin * ld]);
        T::gemm(cin, ld, rows, &x[..cin * ld], false, dcols, true, T::one(), dw.data_mut());
        unbatch_into(&dxb[..cin * ld], cb, cin, ncols, None, &mut dx);
    }
    Ok((Tensor::from_vec(input.shape().to_vec(), dx)?, dw, Tensor::from_vec(vec![cout], db)?))
}

/// Activation kinds supported by [`activation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Prelu,
}

/// Number of channels a per-channel slope applies to, and the inner plane size.
fn channel_layout<T: Float>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [b, c] => Ok((b, c, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(shape_err(op, "rank 2 or 4", x.shape())),
    }
}

/// `max(x, 0) + slope * min(x, 0)` with one slope per channel (axis 1). ReLU takes no slope.
pub fn activation<T: Float>(input: &Tensor<T>, kind: Activation, slope: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match (kind, slope) {
        (Activation::Relu, None) => Ok(input.map(|v| v.max(T::zero()))),
        (Activation::Relu, Some(_)) => Err(TensorError::InvalidArgument {
            op: "activation",
            reason: "relu takes no slope".into(),
        }),
        (Activation::Prelu, None) => Err(TensorError::InvalidArgument {
            op: "activation",
            reason: "prelu needs a per-channel slope".into(),
        }),
        (Activation::Prelu, Some(a)) => {
            let (b, c, plane) = channel_layout("prelu", input)?;
            if a.shape() != [c] {
                return Err(shape_err("prelu", format!("slope [{c}]"), a.shape()));
            }
            let mut out = input.clone();
            out.requires_grad = false;
            for n in 0..b {
                for (ch, &s) in a.data().iter().enumerate() {
                    let off = (n * c + ch) * plane;
                    for v in &mut out.data_mut()[off..off + plane] {
                        if *v < T::zero() {
                            *v *= s;
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Gradients of PReLU with respect to input and slope.
pub fn prelu_backward<T: Float>(input: &Tensor<T>, slope: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, plane) = channel_layout("prelu_backward", input)?;
    let mut dx = grad_out.clone();
    let mut ds = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let s = slope.data()[ch];
            for i in off..off + plane {
                let x = input.data()[i];
                if x < T::zero() {
                    ds[ch] += x * grad_out.data()[i];
                    dx.data_mut()[i] = grad_out.data()[i] * s;
                }
            }
        }
    }
    Ok((dx, Tensor::from_vec(vec![c], ds)?))
}

/// Global average pooling `(b, c, h, w) -> (b, c)`.
pub fn pool_gap<T: Float>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("pool_gap")?;
    let plane = h * w;
    let scale = T::from_f64(1.0 / plane as f64);
    let data = input
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::from_vec(vec![b, c], data)
}

pub fn pool_gap_backward<T: Float>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = input_shape[2] * input_shape[3];
    let scale = T::from_f64(1.0 / plane as f64);
    let mut data = Vec::with_capacity(grad_out.len() * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::from_vec(input_shape.to_vec(), data)
}

/// Affine map `input * weight^T + bias`; `input` is `(batch, in)`, `weight` is `(out, in)`.
pub fn dense<T: Float>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, nin) = input.dims2("dense")?;
    let (nout, win) = weight.dims2("dense")?;
    if win != nin {
        return Err(shape_err("dense", format!("weight (_, {nin})"), weight.shape()));
    }
    check_bias("dense", bias, nout)?;
    let mut out = Vec::with_capacity(b * nout);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    T::gemm(b, nin, nout, input.data(), false, weight.data(), true, T::one(), &mut out);
    Tensor::from_vec(vec![b, nout], out)
}

pub fn dense_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, nin) = input.dims2("dense_backward")?;
    let (nout, _) = weight.dims2("dense_backward")?;
    let mut dx = Tensor::zeros(vec![b, nin]);
    let mut dw = Tensor::zeros(vec![nout, nin]);
    T::gemm(b, nout, nin, grad_out.data(), false, weight.data(), false, T::zero(), dx.data_mut());
    T::gemm(nout, b, nin, grad_out.data(), true, input.data(), false, T::zero(), dw.data_mut());
    let mut db = vec![T::zero(); nout];
    for row in grad_out.data().chunks(nout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((dx, dw, Tensor::from_vec(vec![nout], db)?))
}

pub fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Weights of one LSTM cell with gate order input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a, T> {
    /// `(4 * hidden, in)`
    pub w_ih: &'a Tensor<T>,
    /// `(4 * hidden, hidden)`
    pub w_hh: &'a Tensor<T>,
    /// `(4 * hidden)`
    pub bias: &'a Tensor<T>,
}

/// One step of a standard LSTM cell:
///
/// ```text
/// [i, f, g, o] = x W_ih^T + h W_hh^T + b
/// c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
/// h' = sigmoid(o) * tanh(c')
/// ```
pub fn lstm_step<T: Float>(
    x: &Tensor<T>,
    h: &Tensor<T>,
    c: &Tensor<T>,
    weights: LstmWeights<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, hidden) = h.dims2("lstm_step")?;
    if c.shape() != h.shape() {
        return Err(shape_err("lstm_step", format!("cell {:?}", h.shape()), c.shape()));
    }
    if weights.w_hh.shape() != [4 * hidden, hidden] {
        return Err(shape_err("lstm_step", format!("w_hh [{}, {hidden}]", 4 * hidden), weights.w_hh.shape()));
    }
    let zero_bias = Tensor::zeros(vec![4 * hidden]);
    let gx = dense(x, weights.w_ih, weights.bias)?;
    let gh = dense(h, weights.w_hh, &zero_bias)?;
    if gx.shape() != [b, 4 * hidden] {
        return Err(shape_err("lstm_step", format!("gates [{b}, {}]", 4 * hidden), gx.shape()));
    }
    let mut h_next = Vec::with_capacity(b * hidden);
    let mut c_next = Vec::with_capacity(b * hidden);
    for n in 0..b {
        let row = |k: usize, j: usize| gx.data()[n * 4 * hidden + k * hidden + j] + gh.data()[n * 4 * hidden + k * hidden + j];
        for j in 0..hidden {
            let i = sigmoid(row(0, j));
            let f = sigmoid(row(1, j));
            let g = row(2, j).tanh();
            let o = sigmoid(row(3, j));
            let cn = f * c.data()[n * hidden + j] + i * g;
            c_next.push(cn);
            h_next.push(o * cn.tanh());
        }
    }
    Ok((Tensor::from_vec(vec![b, hidden], h_next)?, Tensor::from_vec(vec![b, hidden], c_next)?))
}
