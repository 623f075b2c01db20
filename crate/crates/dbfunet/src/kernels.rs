//! Raw compute kernels over flat slices. Everything here is single-threaded
//! and accumulates in a fixed order, so results are bitwise reproducible.

use num_traits::Float;

use crate::tensor::Real;

/// Geometry of a cubic-kernel 3D correlation between one input and one
/// output channel.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 3], k: usize, stride: usize, pad: usize) -> Self {
        let o = |n: usize| (n + 2 * pad - k) / stride + 1;
        Self {
            input,
            output: [o(input[0]), o(input[1]), o(input[2])],
            k,
            stride,
            pad,
        }
    }

    /// Output index range along one axis for which tap `t` lands inside the input.
    fn valid(&self, axis: usize, t: usize) -> (usize, usize) {
        let (n, on, s, p) = (self.input[axis], self.output[axis], self.stride, self.pad);
        let lo = if p > t { (p - t).div_ceil(s) } else { 0 };
        if n + p <= t {
            return (0, 0);
        }
        let hi = ((n - 1 + p - t) / s + 1).min(on);
        (lo.min(hi), hi)
    }

    /// Visit every (output row, input row, tap) triple with a non-empty
    /// valid span: f(out_row_start, in_row_start, tap, ow_lo, ow_hi, kw).
    #[inline(always)]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let [_, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let (k, s, p) = (self.k, self.stride, self.pad);
        let wspans: Vec<(usize, usize)> = (0..k).map(|t| self.valid(2, t)).collect();
        for z in 0..od {
            for y in 0..oh {
                let out_row = (z * oh + y) * ow;
                for kd in 0..k {
                    let iz = z * s + kd;
                    if iz < p || iz - p >= self.input[0] {
                        continue;
                    }
                    for kh in 0..k {
                        let iy = y * s + kh;
                        if iy < p || iy - p >= ih {
                            continue;
                        }
                        let in_row = ((iz - p) * ih + (iy - p)) * iw;
                        for (kw, &(lo, hi)) in wspans.iter().enumerate() {
                            if lo < hi {
                                f(out_row, in_row, (kd * k + kh) * k + kw, lo, hi, kw);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out += corr(inp, ker)
pub fn conv_forward_acc<T: Real>(out: &mut [T], inp: &[T], ker: &[T], g: &ConvGeom) {
    let (s, p) = (g.stride, g.pad);
    g.for_each_row(|orow, irow, tap, lo, hi, kw| {
        let w = ker[tap];
        let o = &mut out[orow + lo..orow + hi];
        if s == 1 {
            let start = irow + lo + kw - p;
            let i = &inp[start..start + (hi - lo)];
            for (a, &b) in o.iter_mut().zip(i) {
                *a += w * b;
            }
        } else {
            for (j, a) in o.iter_mut().enumerate() {
                *a += w * inp[irow + (lo + j) * s + kw - p];
            }
        }
    });
}

/// gin += corr^T(gout, ker)
pub fn conv_input_grad_acc<T: Real>(gin: &mut [T], gout: &[T], ker: &[T], g: &ConvGeom) {
    let (s, p) = (g.stride, g.pad);
    g.for_each_row(|orow, irow, tap, lo, hi, kw| {
        let w = ker[tap];
        let o = &gout[orow + lo..orow + hi];
        if s == 1 {
            let start = irow + lo + kw - p;
            let i = &mut gin[start..start + (hi - lo)];
            for (a, &b) in i.iter_mut().zip(o) {
                *a += w * b;
            }
        } else {
            for (j, &b) in o.iter().enumerate() {
                gin[irow + (lo + j) * s + kw - p] += w * b;
            }
        }
    });
}

/// gker += sum over outputs of gout * shifted input
pub fn conv_weight_grad_acc<T: Real>(gker: &mut [T], gout: &[T], inp: &[T], g: &ConvGeom) {
    let (s, p) = (g.stride, g.pad);
    g.for_each_row(|orow, irow, tap, lo, hi, kw| {
        let o = &gout[orow + lo..orow + hi];
        let mut acc = T::zero();
        if s == 1 {
            let start = irow + lo + kw - p;
            let i = &inp[start..start + (hi - lo)];
            for (&a, &b) in o.iter().zip(i) {
                acc += a * b;
            }
        } else {
            for (j, &a) in o.iter().enumerate() {
                acc += a * inp[irow + (lo + j) * s + kw - p];
            }
        }
        gker[tap] += acc;
    });
}

/// Copy of one channel with `p` zeros on every side.
fn pad_channel<T: Real>(src: &[T], n: [usize; 3], p: usize) -> (Vec<T>, [usize; 3]) {
    let pn = [n[0] + 2 * p, n[1] + 2 * p, n[2] + 2 * p];
    let mut out = vec![T::zero(); pn.iter().product()];
    for z in 0..n[0] {
        for y in 0..n[1] {
            let d = ((z + p) * pn[1] + y + p) * pn[2] + p;
            out[d..d + n[2]].copy_from_slice(&src[(z * n[1] + y) * n[2]..][..n[2]]);
        }
    }
    (out, pn)
}

#[inline(always)]
fn axpy<T: Real>(dst: &mut [T], w: T, src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += w * b;
    }
}

/// Stride-1 "same" correlation (pad = k/2, odd k) over a padded copy of the
/// input, so the inner loops carry no bounds logic.
pub fn conv_same_forward_acc<T: Real>(out: &mut [T], inp: &[T], ker: &[T], n: [usize; 3], k: usize) {
    let (pin, pn) = pad_channel(inp, n, k / 2);
    same_corr(out, &pin, pn, ker, n, k);
}

fn same_corr<T: Real>(out: &mut [T], pin: &[T], pn: [usize; 3], ker: &[T], n: [usize; 3], k: usize) {
    match n[2] {
        4 => same_corr_fixed::<4, T>(out, pin, pn, ker, n, k),
        8 => same_corr_fixed::<8, T>(out, pin, pn, ker, n, k),
        16 => same_corr_fixed::<16, T>(out, pin, pn, ker, n, k),
        32 => same_corr_fixed::<32, T>(out, pin, pn, ker, n, k),
        64 => same_corr_fixed::<64, T>(out, pin, pn, ker, n, k),
        _ => same_corr_any(out, pin, pn, ker, n, k),
    }
}

/// Row width known at compile time: the output row lives in registers for
/// the whole k^3 tap loop.
fn same_corr_fixed<const W: usize, T: Real>(out: &mut [T], pin: &[T], pn: [usize; 3], ker: &[T], n: [usize; 3], k: usize) {
    for z in 0..n[0] {
        for y in 0..n[1] {
            let orow: &mut [T; W] = (&mut out[(z * n[1] + y) * W..][..W]).try_into().unwrap();
            let mut acc = *orow;
            for kd in 0..k {
                for kh in 0..k {
                    let irow = &pin[((z + kd) * pn[1] + y + kh) * pn[2]..][..pn[2]];
                    let taps = &ker[(kd * k + kh) * k..][..k];
                    for (kw, &t) in taps.iter().enumerate() {
                        let src: &[T; W] = irow[kw..kw + W].try_into().unwrap();
                        for i in 0..W {
                            acc[i] += t * src[i];
                        }
                    }
                }
            }
            *orow = acc;
        }
    }
}

fn same_corr_any<T: Real>(out: &mut [T], pin: &[T], pn: [usize; 3], ker: &[T], n: [usize; 3], k: usize) {
    let w = n[2];
    for z in 0..n[0] {
        for y in 0..n[1] {
            let orow = &mut out[(z * n[1] + y) * w..][..w];
            for kd in 0..k {
                for kh in 0..k {
                    let irow = &pin[((z + kd) * pn[1] + y + kh) * pn[2]..][..pn[2]];
                    let taps = &ker[(kd * k + kh) * k..][..k];
                    for (kw, &t) in taps.iter().enumerate() {
                        axpy(orow, t, &irow[kw..kw + w]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_same_forward_acc`]: correlation of the padded output
/// gradient with the flipped kernel.
pub fn conv_same_input_grad_acc<T: Real>(gin: &mut [T], gout: &[T], ker: &[T], n: [usize; 3], k: usize) {
    let (pg, pn) = pad_channel(gout, n, k / 2);
    let flipped: Vec<T> = ker.iter().rev().copied().collect();
    same_corr(gin, &pg, pn, &flipped, n, k);
}

/// Weight gradient of [`conv_same_forward_acc`]: one pass over the volume
/// per tap, accumulating a row-vector partial sum.
pub fn conv_same_weight_grad_acc<T: Real>(gker: &mut [T], gout: &[T], inp: &[T], n: [usize; 3], k: usize) {
    let (pin, pn) = pad_channel(inp, n, k / 2);
    match n[2] {
        4 => same_wgrad_fixed::<4, T>(gker, gout, &pin, pn, n, k),
        8 => same_wgrad_fixed::<8, T>(gker, gout, &pin, pn, n, k),
        16 => same_wgrad_fixed::<16, T>(gker, gout, &pin, pn, n, k),
        32 => same_wgrad_fixed::<32, T>(gker, gout, &pin, pn, n, k),
        64 => same_wgrad_fixed::<64, T>(gker, gout, &pin, pn, n, k),
        _ => same_wgrad_any(gker, gout, &pin, pn, n, k),
    }
}

fn same_wgrad_fixed<const W: usize, T: Real>(gker: &mut [T], gout: &[T], pin: &[T], pn: [usize; 3], n: [usize; 3], k: usize) {
    // one pass per (kd, kh); the k horizontal taps share the loaded rows
    const MAX_K: usize = 7;
    if k > MAX_K {
        return same_wgrad_any(gker, gout, pin, pn, n, k);
    }
    for kd in 0..k {
        for kh in 0..k {
            let mut acc = [[T::zero(); W]; MAX_K];
            for z in 0..n[0] {
                for y in 0..n[1] {
                    let grow: &[T; W] = gout[(z * n[1] + y) * W..][..W].try_into().unwrap();
                    let off = ((z + kd) * pn[1] + y + kh) * pn[2];
                    let irow = &pin[off..off + pn[2]];
                    for (kw, a) in acc.iter_mut().enumerate().take(k) {
                        let src: &[T; W] = irow[kw..kw + W].try_into().unwrap();
                        for i in 0..W {
                            a[i] += grow[i] * src[i];
                        }
                    }
                }
            }
            for (kw, a) in acc.iter().enumerate().take(k) {
                gker[(kd * k + kh) * k + kw] += a.iter().copied().sum::<T>();
            }
        }
    }
}

fn same_wgrad_any<T: Real>(gker: &mut [T], gout: &[T], pin: &[T], pn: [usize; 3], n: [usize; 3], k: usize) {
    let w = n[2];
    let mut acc = vec![T::zero(); w];
    for kd in 0..k {
        for kh in 0..k {
            for kw in 0..k {
                acc.iter_mut().for_each(|a| *a = T::zero());
                for z in 0..n[0] {
                    for y in 0..n[1] {
                        let grow = &gout[(z * n[1] + y) * w..][..w];
                        let off = ((z + kd) * pn[1] + y + kh) * pn[2] + kw;
                        for ((a, &g), &x) in acc.iter_mut().zip(grow).zip(&pin[off..off + w]) {
                            *a += g * x;
                        }
                    }
                }
                gker[(kd * k + kh) * k + kw] += acc.iter().copied().sum::<T>();
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// exp(x) for x <= 0 via range reduction and a degree-6 polynomial.
/// Branch-free so that loops over it vectorise.
#[inline(always)]
fn exp_neg(x: f32) -> f32 {
    let x = x.max(-87.0);
    let n = (x * std::f32::consts::LOG2_E + 0.5).floor();
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (0.5 + r * (0.166_666_67 + r * (0.041_666_668 + r * (0.008_333_334 + r * 0.001_388_889)))));
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

#[inline(always)]
pub fn tanh_f32(u: f32) -> f32 {
    let e = exp_neg(-2.0 * u.abs());
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// tanh-approximated GELU and its derivative, given a tanh.
#[inline(always)]
fn gelu_with<T: Float>(x: T, tanh: impl Fn(T) -> T, c: T, a: T) -> (T, T) {
    let half = T::one() / (T::one() + T::one());
    let three = T::one() + T::one() + T::one();
    let u = c * (x + a * x * x * x);
    let t = tanh(u);
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

fn sgemm_or_dgemm_check(len: usize, m: usize, n: usize) {
    assert!(len >= m * n);
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        sgemm_or_dgemm_check(c.len(), m, n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: the graph ops assert operand shapes before calling, so
        // the strided extents lie inside the slices.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), a_strides.0, a_strides.1, b.as_ptr(), b_strides.0, b_strides.1, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gelu(self) -> f32 {
        gelu_with(self, tanh_f32, GELU_C as f32, GELU_A as f32).0
    }

    fn gelu_grad(self) -> f32 {
        gelu_with(self, tanh_f32, GELU_C as f32, GELU_A as f32).1
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        sgemm_or_dgemm_check(c.len(), m, n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), a_strides.0, a_strides.1, b.as_ptr(), b_strides.0, b_strides.1, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn gelu(self) -> f64 {
        gelu_with(self, f64::tanh, GELU_C, GELU_A).0
    }

    fn gelu_grad(self) -> f64 {
        gelu_with(self, f64::tanh, GELU_C, GELU_A).1
    }
}

/// Output size of a 2x2x2 stride-2 ceil-mode pool.
pub fn pooled(n: [usize; 3]) -> [usize; 3] {
    [n[0].div_ceil(2), n[1].div_ceil(2), n[2].div_ceil(2)]
}

/// Average over the valid part of each 2x2x2 window (partial windows at odd
/// borders average fewer voxels).
pub fn avgpool2<T: Real>(out: &mut [T], inp: &[T], n: [usize; 3]) {
    let o = pooled(n);
    for z in 0..o[0] {
        for y in 0..o[1] {
            for x in 0..o[2] {
                let mut acc = T::zero();
                let mut cnt = 0;
                for iz in 2 * z..(2 * z + 2).min(n[0]) {
                    for iy in 2 * y..(2 * y + 2).min(n[1]) {
                        for ix in 2 * x..(2 * x + 2).min(n[2]) {
                            acc += inp[(iz * n[1] + iy) * n[2] + ix];
                            cnt += 1;
                        }
                    }
                }
                out[(z * o[1] + y) * o[2] + x] = acc / T::of(cnt as f64);
            }
        }
    }
}

pub fn avgpool2_grad<T: Real>(gin: &mut [T], gout: &[T], n: [usize; 3]) {
    let o = pooled(n);
    for z in 0..o[0] {
        for y in 0..o[1] {
            for x in 0..o[2] {
                let zs = 2 * z..(2 * z + 2).min(n[0]);
                let ys = 2 * y..(2 * y + 2).min(n[1]);
                let xs = 2 * x..(2 * x + 2).min(n[2]);
                let cnt = zs.len() * ys.len() * xs.len();
                let g = gout[(z * o[1] + y) * o[2] + x] / T::of(cnt as f64);
                for iz in zs {
                    for iy in ys.clone() {
                        for ix in xs.clone() {
                            gin[(iz * n[1] + iy) * n[2] + ix] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour x2 upsampling of an `n` grid, cropped to `target`.
pub fn upsample2<T: Real>(out: &mut [T], inp: &[T], n: [usize; 3], target: [usize; 3]) {
    for z in 0..target[0] {
        for y in 0..target[1] {
            let irow = ((z / 2) * n[1] + y / 2) * n[2];
            let orow = (z * target[1] + y) * target[2];
            for x in 0..target[2] {
                out[orow + x] = inp[irow + x / 2];
            }
        }
    }
}

pub fn upsample2_grad<T: Real>(gin: &mut [T], gout: &[T], n: [usize; 3], target: [usize; 3]) {
    for z in 0..target[0] {
        for y in 0..target[1] {
            let irow = ((z / 2) * n[1] + y / 2) * n[2];
            let orow = (z * target[1] + y) * target[2];
            for x in 0..target[2] {
                gin[irow + x / 2] += gout[orow + x];
            }
        }
    }
}
