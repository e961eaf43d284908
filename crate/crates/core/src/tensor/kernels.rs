//! Buffer-level kernels behind the tape operations.
//!
//! Convolutions are lowered to GEMM one output depth-plane at a time, so the
//! im2col scratch buffer is bounded by `cin·kd·kh·kw × oh·ow`.

use crate::error::{Error, Result};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output extent is `ceil(input / stride)`.
    Same,
    Valid,
}

fn same_pad(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Shapes of a 3-D cross-correlation. Spatial triples are `(d, h, w)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad_lo: [usize; 3],
}

impl ConvGeom {
    pub fn conv(
        n: usize,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<ConvGeom> {
        if stride.contains(&0) || kernel.contains(&0) {
            return Err(Error::ShapeMismatch("zero stride or kernel extent".into()));
        }
        if input.contains(&0) {
            return Err(Error::ShapeMismatch(format!("empty input {input:?}")));
        }
        let mut output = [0; 3];
        let mut pad_lo = [0; 3];
        for a in 0..3 {
            match padding {
                Padding::Same => {
                    let (o, p) = same_pad(input[a], kernel[a], stride[a]);
                    output[a] = o;
                    pad_lo[a] = p;
                }
                Padding::Valid => {
                    if input[a] < kernel[a] {
                        return Err(Error::ShapeMismatch(format!(
                            "kernel {kernel:?} does not fit input {input:?}"
                        )));
                    }
                    output[a] = (input[a] - kernel[a]) / stride[a] + 1;
                }
            }
        }
        Ok(ConvGeom {
            n,
            cin,
            cout,
            input,
            output,
            kernel,
            stride,
            pad_lo,
        })
    }

    /// Geometry of the convolution whose adjoint is the transposed
    /// convolution taking `input` (with `cin_t` channels) to
    /// `input × stride` (with `cout_t` channels).
    pub fn transpose(
        n: usize,
        cin_t: usize,
        cout_t: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Result<ConvGeom> {
        let big = std::array::from_fn(|a| input[a] * stride[a]);
        let g = ConvGeom::conv(n, cout_t, cin_t, big, kernel, stride, Padding::Same)?;
        debug_assert_eq!(g.output, input);
        Ok(g)
    }

    pub fn k_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.n * self.cin * self.in_vol()
    }

    pub fn output_len(&self) -> usize {
        self.n * self.cout * self.out_vol()
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.k_len()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad_lo == [0, 0, 0]
    }

    /// Output positions `o` along one axis whose source `o·s + k − p` is
    /// inside `[0, len)`.
    #[inline]
    fn valid_range(len: usize, s: usize, k: usize, p: usize, out: usize) -> (usize, usize) {
        // o·s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o·s + k − p <= len − 1
        let hi = if len + p > k {
            ((len + p - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// `C ← alpha·A·B + beta·C` with bounds checked against the slices.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
    assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    // SAFETY: the asserts above bound every addressed element, and `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Fills `cols` (`k_len × oh·ow`) for output depth `od` of one sample.
fn im2col_plane<T: Scalar>(x: &[T], g: &ConvGeom, od: usize, cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad_lo;
    let [_, oh, ow] = g.output;
    let plane = oh * ow;
    for ci in 0..g.cin {
        for a in 0..kd {
            let id = (od * g.stride[0] + a) as isize - pd as isize;
            for b in 0..kh {
                let (h_lo, h_hi) = ConvGeom::valid_range(h, sh, b, ph, oh);
                for c in 0..kw {
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    if id < 0 || id >= d as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let (w_lo, w_hi) = ConvGeom::valid_range(w, sw, c, pw, ow);
                    let chan = (ci * d + id as usize) * h;
                    dst[..h_lo * ow].fill(T::zero());
                    dst[h_hi * ow..].fill(T::zero());
                    for o_h in h_lo..h_hi {
                        let ih = o_h * sh + b - ph;
                        let src = &x[(chan + ih) * w..(chan + ih + 1) * w];
                        let drow = &mut dst[o_h * ow..(o_h + 1) * ow];
                        drow[..w_lo].fill(T::zero());
                        drow[w_hi..].fill(T::zero());
                        if sw == 1 {
                            let s0 = w_lo + c - pw;
                            drow[w_lo..w_hi].copy_from_slice(&src[s0..s0 + (w_hi - w_lo)]);
                        } else {
                            for o_w in w_lo..w_hi {
                                drow[o_w] = src[o_w * sw + c - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into `dx` for output depth `od` of one sample.
fn col2im_plane<T: Scalar>(cols: &[T], g: &ConvGeom, od: usize, dx: &mut [T]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [_, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad_lo;
    let [_, oh, ow] = g.output;
    let plane = oh * ow;
    for ci in 0..g.cin {
        for a in 0..kd {
            let id = (od * g.stride[0] + a) as isize - pd as isize;
            if id < 0 || id >= d as isize {
                continue;
            }
            let chan = (ci * d + id as usize) * h;
            for b in 0..kh {
                let (h_lo, h_hi) = ConvGeom::valid_range(h, sh, b, ph, oh);
                for c in 0..kw {
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (w_lo, w_hi) = ConvGeom::valid_range(w, sw, c, pw, ow);
                    for o_h in h_lo..h_hi {
                        let ih = o_h * sh + b - ph;
                        let drow = &mut dx[(chan + ih) * w..(chan + ih + 1) * w];
                        let srow = &src[o_h * ow..(o_h + 1) * ow];
                        if sw == 1 {
                            let s0 = w_lo + c - pw;
                            for (dst, &v) in drow[s0..s0 + (w_hi - w_lo)].iter_mut().zip(&srow[w_lo..w_hi]) {
                                *dst += v;
                            }
                        } else {
                            for o_w in w_lo..w_hi {
                                drow[o_w * sw + c - pw] += srow[o_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w) + b`. `w` is `[cout, cin, kd, kh, kw]`.
pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    debug_assert_eq!(x.len(), g.input_len());
    debug_assert_eq!(w.len(), g.weight_len());
    let k = g.k_len();
    let plane = g.out_plane();
    let out_vol = g.out_vol();
    let in_vol = g.in_vol();
    let mut y = vec![T::zero(); g.output_len()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.n {
        let xs = &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        let ys = &mut y[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        for od in 0..g.output[0] {
            let c = &mut ys[od * plane..];
            if g.is_pointwise() {
                gemm(
                    g.cout,
                    k,
                    plane,
                    T::one(),
                    w,
                    (k, 1),
                    &xs[od * plane..],
                    (in_vol, 1),
                    T::zero(),
                    c,
                    (out_vol, 1),
                );
            } else {
                im2col_plane(xs, g, od, &mut cols);
                gemm(
                    g.cout,
                    k,
                    plane,
                    T::one(),
                    w,
                    (k, 1),
                    &cols,
                    (plane, 1),
                    T::zero(),
                    c,
                    (out_vol, 1),
                );
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for (co, &bv) in b.iter().enumerate() {
                let start = (n * g.cout + co) * out_vol;
                for v in &mut y[start..start + out_vol] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Gradient of the convolution with respect to its input.
pub fn conv_backward_data<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    debug_assert_eq!(dy.len(), g.output_len());
    let k = g.k_len();
    let plane = g.out_plane();
    let out_vol = g.out_vol();
    let in_vol = g.in_vol();
    let mut dx = vec![T::zero(); g.input_len()];
    let mut dcols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.n {
        let dys = &dy[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        let dxs = &mut dx[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        for od in 0..g.output[0] {
            let b = &dys[od * plane..];
            if g.is_pointwise() {
                gemm(
                    k,
                    g.cout,
                    plane,
                    T::one(),
                    w,
                    (1, k),
                    b,
                    (out_vol, 1),
                    T::zero(),
                    &mut dxs[od * plane..],
                    (in_vol, 1),
                );
            } else {
                gemm(
                    k,
                    g.cout,
                    plane,
                    T::one(),
                    w,
                    (1, k),
                    b,
                    (out_vol, 1),
                    T::zero(),
                    &mut dcols,
                    (plane, 1),
                );
                col2im_plane(&dcols, g, od, dxs);
            }
        }
    }
    dx
}

/// Gradient of the convolution with respect to its weights.
pub fn conv_backward_weight<T: Scalar>(x: &[T], dy: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.k_len();
    let plane = g.out_plane();
    let out_vol = g.out_vol();
    let in_vol = g.in_vol();
    let mut dw = vec![T::zero(); g.weight_len()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.n {
        let xs = &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        let dys = &dy[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        for od in 0..g.output[0] {
            let a = &dys[od * plane..];
            if g.is_pointwise() {
                gemm(
                    g.cout,
                    plane,
                    k,
                    T::one(),
                    a,
                    (out_vol, 1),
                    &xs[od * plane..],
                    (1, in_vol),
                    T::one(),
                    &mut dw,
                    (k, 1),
                );
            } else {
                im2col_plane(xs, g, od, &mut cols);
                gemm(
                    g.cout,
                    plane,
                    k,
                    T::one(),
                    a,
                    (out_vol, 1),
                    &cols,
                    (1, plane),
                    T::one(),
                    &mut dw,
                    (k, 1),
                );
            }
        }
    }
    dw
}

/// Per-channel sum of `dy` (`[n, c, spatial]`).
pub fn channel_sums<T: Scalar>(dy: &[T], n: usize, c: usize) -> Vec<T> {
    let vol = dy.len() / (n * c).max(1);
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (s * c + ch) * vol;
            *o += dy[start..start + vol].iter().copied().sum::<T>();
        }
    }
    out
}

/// Max-pooling shapes with `-inf` padding in `same` mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub pad_lo: [usize; 3],
}

impl PoolGeom {
    pub fn new(n: usize, c: usize, input: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<PoolGeom> {
        if window.iter().chain(&stride).any(|&v| v == 0) || input.contains(&0) {
            return Err(Error::ShapeMismatch("zero extent in max-pool".into()));
        }
        let mut output = [0; 3];
        let mut pad_lo = [0; 3];
        for a in 0..3 {
            let (o, p) = same_pad(input[a], window[a], stride[a]);
            output[a] = o;
            pad_lo[a] = p;
        }
        Ok(PoolGeom {
            n,
            c,
            input,
            output,
            window,
            stride,
            pad_lo,
        })
    }
}

/// Returns pooled values and, per output, the flat in-channel index of the
/// first maximum in scan order.
pub fn maxpool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let mut y = Vec::with_capacity(g.n * g.c * out_vol);
    let mut arg = Vec::with_capacity(g.n * g.c * out_vol);
    for nc in 0..g.n * g.c {
        let xs = &x[nc * in_vol..(nc + 1) * in_vol];
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = u32::MAX;
                    for a in 0..g.window[0] {
                        let iz = (z * g.stride[0] + a) as isize - g.pad_lo[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for b in 0..g.window[1] {
                            let iy = (yy * g.stride[1] + b) as isize - g.pad_lo[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for c in 0..g.window[2] {
                                let ix = (xx * g.stride[2] + c) as isize - g.pad_lo[2] as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = ix as usize + w * (iy as usize + h * iz as usize);
                                if xs[i] > best || best_i == u32::MAX {
                                    best = xs[i];
                                    best_i = i as u32;
                                }
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], arg: &[u32], g: &PoolGeom) -> Vec<T> {
    let in_vol: usize = g.input.iter().product();
    let out_vol: usize = g.output.iter().product();
    let mut dx = vec![T::zero(); g.n * g.c * in_vol];
    for nc in 0..g.n * g.c {
        for o in 0..out_vol {
            let j = nc * out_vol + o;
            dx[nc * in_vol + arg[j] as usize] += dy[j];
        }
    }
    dx
}

/// Normalized values and per-(n, c) inverse standard deviations.
pub fn instance_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let vol = x.len() / (n * c);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for s in 0..n {
        for ch in 0..c {
            let start = (s * c + ch) * vol;
            let xs = &x[start..start + vol];
            let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / vol as f64;
            let var = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / vol as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(T::of(is));
            let (gm, bt) = (gamma[ch], beta[ch]);
            let mean_t = T::of(mean);
            let is_t = T::of(is);
            for i in 0..vol {
                let h = (xs[i] - mean_t) * is_t;
                xhat[start + i] = h;
                y[start + i] = gm * h + bt;
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let vol = dy.len() / (n * c);
    let m = vol as f64;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let start = (s * c + ch) * vol;
            let g = &dy[start..start + vol];
            let h = &xhat[start..start + vol];
            let mut sum_g = 0.0;
            let mut sum_gh = 0.0;
            for i in 0..vol {
                sum_g += g[i].f64();
                sum_gh += g[i].f64() * h[i].f64();
            }
            dbeta[ch] += T::of(sum_g);
            dgamma[ch] += T::of(sum_gh);
            let gm = gamma[ch].f64();
            let is = inv_std[s * c + ch].f64();
            // dx = γ·σ⁻¹ (g − mean(g) − x̂·mean(g·x̂))
            let scale = T::of(gm * is);
            let mg = T::of(sum_g / m);
            let mgh = T::of(sum_gh / m);
            for i in 0..vol {
                dx[start + i] = scale * (g[i] - mg - h[i] * mgh);
            }
        }
    }
    (dx, dgamma, dbeta)
}
