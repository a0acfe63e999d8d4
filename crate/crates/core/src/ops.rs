//! Forward and backward kernels for the handful of operators the models use.
//!
//! Every kernel is a pure function over [`Tensor`]s. The autograd graph and
//! the eager backend both dispatch here so training and inference share one
//! arithmetic path.

use crate::tensor::{Real, Tensor};

/// Geometry of a 1-D convolution over `(batch, channels, time)` tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn symmetric(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            pad_left: padding,
            pad_right: padding,
            dilation: 1,
            groups,
        }
    }

    /// Left-only padding so output at `t` sees inputs `<= t`.
    pub fn causal(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            pad_left: (kernel - 1) * dilation,
            pad_right: 0,
            dilation,
            groups: 1,
        }
    }

    /// Output length for an input of `len` samples, or `None` if the input
    /// cannot cover a single kernel footprint.
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + self.pad_left + self.pad_right;
        let span = self.dilation * (kernel - 1) + 1;
        if padded < span {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

fn dims3(t: &[usize]) -> (usize, usize, usize) {
    assert_eq!(t.len(), 3, "expected (batch, channels, time), got {t:?}");
    (t[0], t[1], t[2])
}

fn is_identity_im2col(geom: &ConvGeom, kernel: usize) -> bool {
    kernel == 1 && geom.stride == 1 && geom.pad_left == 0 && geom.pad_right == 0
}

/// Unfold one group of one batch item into `(cin_g * kernel, out_len)`.
fn im2col<T: Real>(
    x: &[T],
    len: usize,
    cin_g: usize,
    kernel: usize,
    out_len: usize,
    geom: &ConvGeom,
    cols: &mut [T],
) {
    for ci in 0..cin_g {
        let row_in = &x[ci * len..(ci + 1) * len];
        for k in 0..kernel {
            let row = &mut cols[(ci * kernel + k) * out_len..(ci * kernel + k + 1) * out_len];
            let offset = (k * geom.dilation) as isize - geom.pad_left as isize;
            if geom.stride == 1 {
                // valid t: 0 <= t + offset < len
                let lo = (-offset).clamp(0, out_len as isize) as usize;
                let hi = (len as isize - offset).clamp(0, out_len as isize) as usize;
                row[..lo].fill(T::zero());
                if hi > lo {
                    let src = (lo as isize + offset) as usize;
                    row[lo..hi].copy_from_slice(&row_in[src..src + (hi - lo)]);
                }
                if hi < out_len {
                    row[hi.max(lo)..].fill(T::zero());
                }
            } else {
                for (t, r) in row.iter_mut().enumerate() {
                    let idx = (t * geom.stride) as isize + offset;
                    *r = if idx >= 0 && (idx as usize) < len {
                        row_in[idx as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

/// Row-major `rows x cols` matrix into its `cols x rows` transpose.
fn transpose_into<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const BLOCK: usize = 64;
    let dst = &mut dst[..rows * cols];
    for c0 in (0..cols).step_by(BLOCK) {
        let c1 = (c0 + BLOCK).min(cols);
        let dst_block = &mut dst[c0 * rows..c1 * rows];
        for (r, src_row) in src.chunks_exact(cols).take(rows).enumerate() {
            for (d, &v) in dst_block.chunks_exact_mut(rows).zip(&src_row[c0..c1]) {
                d[r] = v;
            }
        }
    }
}

/// Scatter-add the transpose of [`im2col`].
fn col2im<T: Real>(
    cols: &[T],
    len: usize,
    cin_g: usize,
    kernel: usize,
    out_len: usize,
    geom: &ConvGeom,
    gx: &mut [T],
) {
    for ci in 0..cin_g {
        let row_out = &mut gx[ci * len..(ci + 1) * len];
        for k in 0..kernel {
            let row = &cols[(ci * kernel + k) * out_len..(ci * kernel + k + 1) * out_len];
            let offset = (k * geom.dilation) as isize - geom.pad_left as isize;
            if geom.stride == 1 {
                let lo = (-offset).clamp(0, out_len as isize) as usize;
                let hi = (len as isize - offset).clamp(0, out_len as isize) as usize;
                if hi > lo {
                    let dst = (lo as isize + offset) as usize;
                    for (o, &v) in row_out[dst..dst + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                        *o += v;
                    }
                }
                continue;
            }
            for (t, &v) in row.iter().enumerate() {
                let idx = (t * geom.stride) as isize + offset;
                if idx >= 0 && (idx as usize) < len {
                    row_out[idx as usize] += v;
                }
            }
        }
    }
}

/// `y = conv1d(x, w) + b` with `x: (B, Cin, L)`, `w: (Cout, Cin/g, K)`, `b: (Cout)`.
pub fn conv1d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Tensor<T> {
    let (batch, cin, len) = dims3(x.shape());
    let (cout, cin_g, kernel) = dims3(w.shape());
    let groups = geom.groups;
    assert!(cin % groups == 0 && cout % groups == 0, "channels not divisible by groups");
    assert_eq!(cin / groups, cin_g, "weight input channels mismatch");
    let cout_g = cout / groups;
    let out_len = geom
        .output_len(len, kernel)
        .expect("input shorter than convolution footprint");
    let rows = cin_g * kernel;
    let identity = is_identity_im2col(geom, kernel);
    let mut cols = if identity {
        Vec::new()
    } else {
        vec![T::zero(); rows * out_len]
    };
    let mut y = vec![T::zero(); batch * cout * out_len];
    let xd = x.data();
    let wd = w.data();
    for bi in 0..batch {
        for gi in 0..groups {
            let xg = &xd[(bi * cin + gi * cin_g) * len..(bi * cin + (gi + 1) * cin_g) * len];
            let src: &[T] = if identity {
                xg
            } else {
                im2col(xg, len, cin_g, kernel, out_len, geom, &mut cols);
                &cols
            };
            let wg = &wd[gi * cout_g * rows..(gi + 1) * cout_g * rows];
            let yg = &mut y[(bi * cout + gi * cout_g) * out_len..(bi * cout + (gi + 1) * cout_g) * out_len];
            T::gemm(
                cout_g,
                rows,
                out_len,
                T::one(),
                wg,
                (rows as isize, 1),
                src,
                (out_len as isize, 1),
                T::zero(),
                yg,
                (out_len as isize, 1),
            );
        }
        if let Some(b) = b {
            let bd = b.data();
            for o in 0..cout {
                let row = &mut y[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                let bias = bd[o];
                for v in row.iter_mut() {
                    *v += bias;
                }
            }
        }
    }
    Tensor::new(vec![batch, cout, out_len], y)
}

/// Gradients of [`conv1d_forward`]; each output is computed only when requested.
pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub b: Option<Tensor<T>>,
}

pub fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    geom: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (batch, cin, len) = dims3(x.shape());
    let (cout, cin_g, kernel) = dims3(w.shape());
    let (_, _, out_len) = dims3(gy.shape());
    let groups = geom.groups;
    let cout_g = cout / groups;
    let rows = cin_g * kernel;
    let identity = is_identity_im2col(geom, kernel);
    let (need_x, need_w, need_b) = need;

    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut gb = need_b.then(|| vec![T::zero(); cout]);
    let mut cols = if identity || !need_w {
        Vec::new()
    } else {
        vec![T::zero(); rows * out_len]
    };
    let mut gcols = if identity || !need_x {
        Vec::new()
    } else {
        vec![T::zero(); rows * out_len]
    };
    let (mut cols_t, mut gy_t) = if need_w {
        (vec![T::zero(); rows * out_len], vec![T::zero(); cout_g * out_len])
    } else {
        (Vec::new(), Vec::new())
    };
    let xd = x.data();
    let wd = w.data();
    let gyd = gy.data();

    for bi in 0..batch {
        for gi in 0..groups {
            let gyg = &gyd[(bi * cout + gi * cout_g) * out_len..(bi * cout + (gi + 1) * cout_g) * out_len];
            let xg_range = (bi * cin + gi * cin_g) * len..(bi * cin + (gi + 1) * cin_g) * len;
            if let Some(gw) = gw.as_mut() {
                let xg = &xd[xg_range.clone()];
                let src: &[T] = if identity {
                    xg
                } else {
                    im2col(xg, len, cin_g, kernel, out_len, geom, &mut cols);
                    &cols
                };
                // Both operands are contracted along time, their contiguous
                // axis; transposing first gives the GEMM unit-stride packing
                // (strided packing at power-of-two lengths thrashes the cache).
                transpose_into(src, rows, out_len, &mut cols_t);
                transpose_into(gyg, cout_g, out_len, &mut gy_t);
                // gw_g (cout_g x rows) += gy_g (cout_g x out_len) @ cols^T
                T::gemm(
                    cout_g,
                    out_len,
                    rows,
                    T::one(),
                    &gy_t,
                    (1, cout_g as isize),
                    &cols_t,
                    (rows as isize, 1),
                    T::one(),
                    &mut gw[gi * cout_g * rows..(gi + 1) * cout_g * rows],
                    (rows as isize, 1),
                );
            }
            if let Some(gx) = gx.as_mut() {
                let wg = &wd[gi * cout_g * rows..(gi + 1) * cout_g * rows];
                if identity {
                    T::gemm(
                        rows,
                        cout_g,
                        out_len,
                        T::one(),
                        wg,
                        (1, rows as isize),
                        gyg,
                        (out_len as isize, 1),
                        T::one(),
                        &mut gx[xg_range],
                        (out_len as isize, 1),
                    );
                } else {
                    T::gemm(
                        rows,
                        cout_g,
                        out_len,
                        T::one(),
                        wg,
                        (1, rows as isize),
                        gyg,
                        (out_len as isize, 1),
                        T::zero(),
                        &mut gcols,
                        (out_len as isize, 1),
                    );
                    col2im(&gcols, len, cin_g, kernel, out_len, geom, &mut gx[xg_range]);
                }
            }
        }
        if let Some(gb) = gb.as_mut() {
            for o in 0..cout {
                let row = &gyd[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                gb[o] += row.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads {
        x: gx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        w: gw.map(|d| Tensor::new(w.shape().to_vec(), d)),
        b: gb.map(|d| Tensor::new(vec![cout], d)),
    }
}

fn row_norms<T: Real>(v: &Tensor<T>) -> Vec<T> {
    let rows = v.shape()[0];
    let width = v.len() / rows;
    v.data()
        .chunks(width)
        .map(|r| r.iter().map(|&a| a * a).sum::<T>().sqrt())
        .collect()
}

/// Weight normalization: `w[o] = g[o] * v[o] / |v[o]|`, one magnitude per output channel.
pub fn weight_norm_forward<T: Real>(v: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let rows = v.shape()[0];
    assert_eq!(g.len(), rows);
    let width = v.len() / rows;
    let norms = row_norms(v);
    let mut out = v.clone();
    for (o, row) in out.data_mut().chunks_mut(width).enumerate() {
        let scale = g.data()[o] / norms[o];
        for a in row.iter_mut() {
            *a *= scale;
        }
    }
    out
}

pub fn weight_norm_backward<T: Real>(
    v: &Tensor<T>,
    g: &Tensor<T>,
    gw: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let rows = v.shape()[0];
    let width = v.len() / rows;
    let norms = row_norms(v);
    let mut gv = Tensor::zeros(v.shape().to_vec());
    let mut gg = Tensor::zeros(vec![rows]);
    for o in 0..rows {
        let vr = &v.data()[o * width..(o + 1) * width];
        let gr = &gw.data()[o * width..(o + 1) * width];
        let n = norms[o];
        // projection through the unit direction, exact for single-tap rows
        let unit: Vec<T> = vr.iter().map(|&a| a / n).collect();
        let dot: T = unit.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        gg.data_mut()[o] = dot;
        let scale = g.data()[o] / n;
        for ((out, &a), &b) in gv.data_mut()[o * width..(o + 1) * width]
            .iter_mut()
            .zip(&unit)
            .zip(gr)
        {
            *out = scale * (b - dot * a);
        }
    }
    (gv, gg)
}

/// `u^T W v` for `W` viewed as `(rows, numel / rows)`.
pub fn bilinear_sigma<T: Real>(w: &Tensor<T>, u: &[T], v: &[T]) -> T {
    let rows = w.shape()[0];
    let width = w.len() / rows;
    w.data()
        .chunks(width)
        .zip(u)
        .map(|(row, &ui)| ui * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

/// One power-iteration step on `W`, updating `u` and `v` in place.
pub fn power_iteration<T: Real>(w: &Tensor<T>, u: &mut [T], v: &mut [T]) {
    let rows = w.shape()[0];
    let width = w.len() / rows;
    let eps = T::from_f64_lossy(1e-12);
    // v = normalize(W^T u)
    v.fill(T::zero());
    for (row, &ui) in w.data().chunks(width).zip(u.iter()) {
        for (vj, &a) in v.iter_mut().zip(row) {
            *vj += a * ui;
        }
    }
    let nv = v.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
    v.iter_mut().for_each(|a| *a = *a / nv);
    // u = normalize(W v)
    for (ui, row) in u.iter_mut().zip(w.data().chunks(width)) {
        *ui = row.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
    }
    let nu = u.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
    u.iter_mut().for_each(|a| *a = *a / nu);
}

/// Spectral normalization `W / sigma` with `sigma = u^T W v` and `u`, `v` held fixed.
pub fn spectral_norm_forward<T: Real>(w: &Tensor<T>, u: &[T], v: &[T]) -> (Tensor<T>, T) {
    let sigma = bilinear_sigma(w, u, v);
    (w.map(|a| a / sigma), sigma)
}

pub fn spectral_norm_backward<T: Real>(
    w: &Tensor<T>,
    u: &[T],
    v: &[T],
    sigma: T,
    gw: &Tensor<T>,
) -> Tensor<T> {
    let rows = w.shape()[0];
    let width = w.len() / rows;
    let inner: T = w.data().iter().zip(gw.data()).map(|(&a, &b)| a * b).sum();
    let coeff = inner / (sigma * sigma);
    let mut out = Tensor::zeros(w.shape().to_vec());
    for o in 0..rows {
        for j in 0..width {
            let idx = o * width + j;
            out.data_mut()[idx] = gw.data()[idx] / sigma - coeff * u[o] * v[j];
        }
    }
    out
}

#[inline(always)]
fn sigmoid<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half + half * (half * x).fast_tanh()
}

/// `tanh(a) * sigmoid(b)` where `a` and `b` are the two channel halves.
pub fn gated_tanh_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (batch, ch2, len) = dims3(x.shape());
    assert!(ch2 % 2 == 0, "gated activation needs an even channel count");
    let ch = ch2 / 2;
    let mut out = vec![T::zero(); batch * ch * len];
    for bi in 0..batch {
        let base = bi * ch2 * len;
        let a = &x.data()[base..base + ch * len];
        let b = &x.data()[base + ch * len..base + ch2 * len];
        let o = &mut out[bi * ch * len..(bi + 1) * ch * len];
        for ((o, &a), &b) in o.iter_mut().zip(a).zip(b) {
            *o = a.fast_tanh() * sigmoid(b);
        }
    }
    Tensor::new(vec![batch, ch, len], out)
}

pub fn gated_tanh_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let (batch, ch2, len) = dims3(x.shape());
    let ch = ch2 / 2;
    let mut gx = vec![T::zero(); x.len()];
    for bi in 0..batch {
        let base = bi * ch2 * len;
        let g = &gy.data()[bi * ch * len..(bi + 1) * ch * len];
        let n = ch * len;
        let (xa, xb) = x.data()[base..base + 2 * n].split_at(n);
        let (ga, gb) = gx[base..base + 2 * n].split_at_mut(n);
        let (g, ga, gb, xb) = (&g[..n], &mut ga[..n], &mut gb[..n], &xb[..n]);
        for i in 0..n {
            let ta = xa[i].fast_tanh();
            let sb = sigmoid(xb[i]);
            let gs = g[i] * sb;
            ga[i] = gs * (T::one() - ta * ta);
            gb[i] = gs * ta * (T::one() - sb);
        }
    }
    Tensor::new(x.shape().to_vec(), gx)
}

pub fn leaky_relu_forward<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|a| if a >= T::zero() { a } else { a * slope })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&a, &g)| if a >= T::zero() { g } else { g * slope })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Non-overlapping mean pooling along time; the trailing partial window is dropped.
pub fn avg_pool_forward<T: Real>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (batch, ch, len) = dims3(x.shape());
    let out_len = len / k;
    let scale = T::one() / T::from_usize(k).unwrap();
    let mut out = vec![T::zero(); batch * ch * out_len];
    for r in 0..batch * ch {
        let row = &x.data()[r * len..(r + 1) * len];
        for t in 0..out_len {
            out[r * out_len + t] = row[t * k..(t + 1) * k].iter().copied().sum::<T>() * scale;
        }
    }
    Tensor::new(vec![batch, ch, out_len], out)
}

pub fn avg_pool_backward<T: Real>(in_shape: &[usize], gy: &Tensor<T>, k: usize) -> Tensor<T> {
    let (batch, ch, len) = dims3(in_shape);
    let out_len = len / k;
    let scale = T::one() / T::from_usize(k).unwrap();
    let mut gx = vec![T::zero(); batch * ch * len];
    for r in 0..batch * ch {
        for t in 0..out_len {
            let g = gy.data()[r * out_len + t] * scale;
            gx[r * len + t * k..r * len + (t + 1) * k].fill(g);
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

/// Source index in the unpadded signal for padded position `i` under right
/// reflection padding (edge sample not repeated).
fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

/// Height of the period-folded map for a signal of `len` samples.
pub fn period_fold_height(len: usize, period: usize) -> usize {
    len.div_ceil(period)
}

/// Fold `(B, 1, T)` into `(B * p, 1, ceil(T / p))`: row `b * p + c` holds
/// samples `c, c + p, c + 2p, ...` of item `b`, with right reflection
/// padding up to a multiple of `p`.
pub fn period_fold_forward<T: Real>(x: &Tensor<T>, period: usize) -> Tensor<T> {
    let (batch, ch, len) = dims3(x.shape());
    assert_eq!(ch, 1, "period folding expects a mono waveform");
    let height = period_fold_height(len, period);
    assert!(height * period - len < len, "signal too short to reflect-pad");
    let mut out = vec![T::zero(); batch * period * height];
    for bi in 0..batch {
        let row = &x.data()[bi * len..(bi + 1) * len];
        for c in 0..period {
            let dst = &mut out[(bi * period + c) * height..(bi * period + c + 1) * height];
            for (h, d) in dst.iter_mut().enumerate() {
                *d = row[reflect_index(h * period + c, len)];
            }
        }
    }
    Tensor::new(vec![batch * period, 1, height], out)
}

pub fn period_fold_backward<T: Real>(in_shape: &[usize], gy: &Tensor<T>, period: usize) -> Tensor<T> {
    let (batch, _, len) = dims3(in_shape);
    let height = period_fold_height(len, period);
    let mut gx = vec![T::zero(); batch * len];
    for bi in 0..batch {
        for c in 0..period {
            let src = &gy.data()[(bi * period + c) * height..(bi * period + c + 1) * height];
            for (h, &g) in src.iter().enumerate() {
                gx[bi * len + reflect_index(h * period + c, len)] += g;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

/// First-order pre-emphasis `y[n] = x[n] - coeff * x[n - 1]` applied per row.
pub fn preemphasis_rows<T: Real>(data: &[T], row_len: usize, coeff: T) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let mut prev = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - coeff * prev;
            prev = s;
        }
    }
    out
}

/// Transpose of [`preemphasis_rows`].
pub fn preemphasis_rows_transpose<T: Real>(grad: &[T], row_len: usize, coeff: T) -> Vec<T> {
    let mut out = vec![T::zero(); grad.len()];
    for (src, dst) in grad.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let n = src.len();
        for i in 0..n {
            let next = if i + 1 < n { src[i + 1] } else { T::zero() };
            dst[i] = src[i] - coeff * next;
        }
    }
    out
}
