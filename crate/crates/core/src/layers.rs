//! Forward and backward kernels for the layers SeUNet is built from.
//!
//! Backward functions accumulate parameter gradients into caller-provided
//! buffers (`+=`) and return the input gradient.

use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------- conv ----

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for oy in 0..h {
                    let out = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let src = iy as usize * w;
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&plane[src + s0..src + s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = iy as usize * w;
                    let s0 = (x_lo as isize + dx) as usize;
                    let src = &row[oy * w + x_lo..oy * w + x_hi];
                    for (d, s) in plane[dst + s0..dst + s0 + src.len()].iter_mut().zip(src) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with a square `k x k` kernel (k odd).
/// `weight` is `[cout][cin][k][k]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
) -> Tensor<T> {
    let kk = x.c * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight shape");
    assert_eq!(bias.len(), cout, "conv bias shape");
    let hw = x.hw();
    let mut y = Tensor::zeros(x.n, cout, x.h, x.w);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for i in 0..x.n {
        let ys = y.sample_mut(i);
        for (o, b) in bias.iter().enumerate() {
            ys[o * hw..(o + 1) * hw].fill(*b);
        }
        let src: &[T] = if k == 1 {
            x.sample(i)
        } else {
            im2col(x.sample(i), x.c, x.h, x.w, k, &mut col);
            &col
        };
        T::gemm(cout, kk, hw, T::one(), weight, kk, 1, src, hw, 1, T::one(), ys, hw, 1);
    }
    y
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    cout: usize,
    k: usize,
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let kk = x.c * k * k;
    let hw = x.hw();
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcol = if need_dx && k != 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
    for i in 0..x.n {
        let dys = dy.sample(i);
        for (o, db) in dbias.iter_mut().enumerate() {
            *db = *db + dys[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        let src: &[T] = if k == 1 {
            x.sample(i)
        } else {
            im2col(x.sample(i), x.c, x.h, x.w, k, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(cout, hw, kk, T::one(), dys, hw, 1, src, 1, hw, T::one(), dweight, kk, 1);
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.sample_mut(i);
            if k == 1 {
                T::gemm(kk, cout, hw, T::one(), weight, 1, kk, dys, hw, 1, T::zero(), dxs, hw, 1);
            } else {
                T::gemm(kk, cout, hw, T::one(), weight, 1, kk, dys, hw, 1, T::zero(), &mut dcol, hw, 1);
                col2im(&dcol, x.c, x.h, x.w, k, dxs);
            }
        }
    }
    dx
}

// ---------------------------------------------------------- batch norm ----

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch statistics observed in a training-mode pass; `var` is unbiased.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, BnCache<T>, BnBatchStats<T>) {
    let (n, c, hw) = (x.n, x.c, x.hw());
    let m = (n * hw) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut xhat = Tensor::zeros(n, c, x.h, x.w);
    let mut y = Tensor::zeros(n, c, x.h, x.w);
    for ch in 0..c {
        let mut s = 0.0f64;
        for i in 0..n {
            s += x.channel(i, ch).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for i in 0..n {
            ss += x
                .channel(i, ch)
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        let biased = ss / m;
        let unbiased = if m > 1.0 { ss / (m - 1.0) } else { 0.0 };
        let istd = 1.0 / (biased + BN_EPS).sqrt();
        mean[ch] = T::from_f64(mu);
        var[ch] = T::from_f64(unbiased);
        inv_std[ch] = T::from_f64(istd);
        let (mu, istd) = (T::from_f64(mu), T::from_f64(istd));
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for p in off..off + hw {
                let xh = (x.data[p] - mu) * istd;
                xhat.data[p] = xh;
                y.data[p] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, BnCache { xhat, inv_std }, BnBatchStats { mean, var })
}

pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let (c, hw) = (x.c, x.hw());
    let mut y = x.clone();
    for ch in 0..c {
        let istd = T::one() / (running_var[ch] + T::from_f64(BN_EPS)).sqrt();
        let scale = gamma[ch] * istd;
        let shift = beta[ch] - running_mean[ch] * scale;
        for i in 0..x.n {
            let off = (i * c + ch) * hw;
            for v in &mut y.data[off..off + hw] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let (n, c, hw) = (dy.n, dy.c, dy.hw());
    let m = T::from_f64((n * hw) as f64);
    let mut dx = Tensor::zeros(n, c, dy.h, dy.w);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for p in off..off + hw {
                sum_dy = sum_dy + dy.data[p];
                sum_dy_xhat = sum_dy_xhat + dy.data[p] * cache.xhat.data[p];
            }
        }
        dgamma[ch] = dgamma[ch] + sum_dy_xhat;
        dbeta[ch] = dbeta[ch] + sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for p in off..off + hw {
                dx.data[p] = k * (m * dy.data[p] - sum_dy - cache.xhat.data[p] * sum_dy_xhat);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- relu ----

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, o) in dy.data.iter_mut().zip(&out.data) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}

// ---------------------------------------------------- squeeze-excitation ----

#[derive(Debug, Clone)]
pub struct SeCache<T> {
    pub x: Tensor<T>,
    /// Squeezed descriptor `[n][c]`.
    pub squeeze: Vec<T>,
    /// Hidden pre-activation `[n][hidden]`.
    pub hidden_pre: Vec<T>,
    /// Gate `[n][c]`, each in (0, 1).
    pub gate: Vec<T>,
}

pub struct SeParams<'a, T> {
    /// `[hidden][c]`
    pub w1: &'a [T],
    pub b1: &'a [T],
    /// `[c][hidden]`
    pub w2: &'a [T],
    pub b2: &'a [T],
    pub hidden: usize,
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Channel gate of a squeeze-excitation block: global average pool, FC,
/// ReLU, FC, sigmoid. Returns `(squeeze, hidden_pre, gate)`.
pub fn se_gate<T: Scalar>(x: &Tensor<T>, p: &SeParams<'_, T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hid) = (x.n, x.c, p.hidden);
    let inv_hw = T::from_f64(1.0 / x.hw() as f64);
    let mut squeeze = vec![T::zero(); n * c];
    let mut hidden_pre = vec![T::zero(); n * hid];
    let mut gate = vec![T::zero(); n * c];
    for i in 0..n {
        for ch in 0..c {
            squeeze[i * c + ch] = x.channel(i, ch).iter().copied().sum::<T>() * inv_hw;
        }
        let s = &squeeze[i * c..(i + 1) * c];
        for j in 0..hid {
            let row = &p.w1[j * c..(j + 1) * c];
            hidden_pre[i * hid + j] = p.b1[j] + row.iter().zip(s).map(|(a, b)| *a * *b).sum::<T>();
        }
        let a: Vec<T> = hidden_pre[i * hid..(i + 1) * hid]
            .iter()
            .map(|v| v.max(T::zero()))
            .collect();
        for ch in 0..c {
            let row = &p.w2[ch * hid..(ch + 1) * hid];
            let z = p.b2[ch] + row.iter().zip(&a).map(|(w, v)| *w * *v).sum::<T>();
            gate[i * c + ch] = sigmoid(z);
        }
    }
    (squeeze, hidden_pre, gate)
}

pub fn se_forward<T: Scalar>(x: &Tensor<T>, p: &SeParams<'_, T>) -> (Tensor<T>, SeCache<T>) {
    let (squeeze, hidden_pre, gate) = se_gate(x, p);
    let mut y = x.clone();
    let hw = x.hw();
    for i in 0..x.n {
        for ch in 0..x.c {
            let g = gate[i * x.c + ch];
            let off = (i * x.c + ch) * hw;
            for v in &mut y.data[off..off + hw] {
                *v = *v * g;
            }
        }
    }
    (
        y,
        SeCache {
            x: x.clone(),
            squeeze,
            hidden_pre,
            gate,
        },
    )
}

pub struct SeGrads<'a, T> {
    pub w1: &'a mut [T],
    pub b1: &'a mut [T],
    pub w2: &'a mut [T],
    pub b2: &'a mut [T],
}

pub fn se_backward<T: Scalar>(
    dy: &Tensor<T>,
    p: &SeParams<'_, T>,
    cache: &SeCache<T>,
    g: SeGrads<'_, T>,
) -> Tensor<T> {
    let (n, c, hid, hw) = (dy.n, dy.c, p.hidden, dy.hw());
    let inv_hw = T::from_f64(1.0 / hw as f64);
    let mut dx = dy.clone();
    for i in 0..n {
        let mut dz2 = vec![T::zero(); c];
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let gate = cache.gate[i * c + ch];
            let dgate: T = dy.data[off..off + hw]
                .iter()
                .zip(&cache.x.data[off..off + hw])
                .map(|(a, b)| *a * *b)
                .sum();
            dz2[ch] = dgate * gate * (T::one() - gate);
            for v in &mut dx.data[off..off + hw] {
                *v = *v * gate;
            }
        }
        let hpre = &cache.hidden_pre[i * hid..(i + 1) * hid];
        let mut da = vec![T::zero(); hid];
        for ch in 0..c {
            g.b2[ch] = g.b2[ch] + dz2[ch];
            for j in 0..hid {
                let a = hpre[j].max(T::zero());
                g.w2[ch * hid + j] = g.w2[ch * hid + j] + dz2[ch] * a;
                da[j] = da[j] + p.w2[ch * hid + j] * dz2[ch];
            }
        }
        let s = &cache.squeeze[i * c..(i + 1) * c];
        let mut ds = vec![T::zero(); c];
        for j in 0..hid {
            let dz1 = if hpre[j] > T::zero() { da[j] } else { T::zero() };
            g.b1[j] = g.b1[j] + dz1;
            for ch in 0..c {
                g.w1[j * c + ch] = g.w1[j * c + ch] + dz1 * s[ch];
                ds[ch] = ds[ch] + p.w1[j * c + ch] * dz1;
            }
        }
        for ch in 0..c {
            let add = ds[ch] * inv_hw;
            let off = (i * c + ch) * hw;
            for v in &mut dx.data[off..off + hw] {
                *v = *v + add;
            }
        }
    }
    dx
}

// ------------------------------------------------------ pool / upsample ----

/// 2x2 max pool, stride 2. Returns output and flat argmax indices into `x`.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "max_pool2 needs even spatial size");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; y.data.len()];
    for plane in 0..x.n * x.c {
        let ib = plane * x.h * x.w;
        let ob = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ib + 2 * oy * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ib + (2 * oy + dy) * x.w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                y.data[ob + oy * ow + ox] = x.data[best];
                arg[ob + oy * ow + ox] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u32], input_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (g, &a) in dy.data.iter().zip(arg) {
        dx.data[a as usize] = dx.data[a as usize] + *g;
    }
    dx
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for plane in 0..x.n * x.c {
        let ib = plane * x.h * x.w;
        let ob = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                y.data[ob + oy * ow + ox] = x.data[ib + (oy / 2) * x.w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for plane in 0..dy.n * dy.c {
        let ib = plane * dy.h * dy.w;
        let ob = plane * h * w;
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                let o = ob + (oy / 2) * w + ox / 2;
                dx.data[o] = dx.data[o] + dy.data[ib + oy * dy.w + ox];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shape");
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let ys = y.sample_mut(i);
        let la = a.sample_len();
        ys[..la].copy_from_slice(a.sample(i));
        ys[la..].copy_from_slice(b.sample(i));
    }
    y
}

pub fn split_channels<T: Scalar>(y: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let cb = y.c - ca;
    let mut a = Tensor::zeros(y.n, ca, y.h, y.w);
    let mut b = Tensor::zeros(y.n, cb, y.h, y.w);
    let la = ca * y.hw();
    for i in 0..y.n {
        a.sample_mut(i).copy_from_slice(&y.sample(i)[..la]);
        b.sample_mut(i).copy_from_slice(&y.sample(i)[la..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct 7-loop convolution, independent of im2col/gemm.
    fn naive_conv(x: &Tensor<f64>, wt: &[f64], b: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let pad = (k / 2) as isize;
        let mut y = Tensor::zeros(x.n, cout, x.h, x.w);
        for i in 0..x.n {
            for o in 0..cout {
                for r in 0..x.h {
                    for c in 0..x.w {
                        let mut s = b[o];
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = r as isize + ky as isize - pad;
                                    let ix = c as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    s += wt[((o * x.c + ci) * k + ky) * k + kx]
                                        * x.data[((i * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                        y.data[((i * cout + o) * x.h + r) * x.w + c] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &k in &[1usize, 3] {
            let x = rand_tensor(&mut rng, 2, 3, 5, 7);
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = conv2d_forward(&x, &w, &b, 4, k);
            let z = naive_conv(&x, &w, &b, 4, k);
            for (a, b) in y.data.iter().zip(&z.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Gradient of sum(y * r) for a fixed random r, checked by central differences.
    #[test]
    fn conv_backward_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &k in &[1usize, 3] {
            let x = rand_tensor(&mut rng, 2, 2, 4, 3);
            let mut w: Vec<f64> = (0..3 * 2 * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = vec![0.1, -0.2, 0.3];
            let r = rand_tensor(&mut rng, 2, 3, 4, 3);
            let obj = |x: &Tensor<f64>, w: &[f64]| -> f64 {
                conv2d_forward(x, w, &b, 3, k).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
            };
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; 3];
            let dx = conv2d_backward(&x, &w, 3, k, &r, &mut dw, &mut db, true).unwrap();
            let h = 1e-6;
            for j in 0..w.len() {
                let o = w[j];
                w[j] = o + h;
                let p = obj(&x, &w);
                w[j] = o - h;
                let m = obj(&x, &w);
                w[j] = o;
                assert!(((p - m) / (2.0 * h) - dw[j]).abs() < 1e-6);
            }
            let mut xp = x.clone();
            for j in 0..x.data.len() {
                let o = xp.data[j];
                xp.data[j] = o + h;
                let p = obj(&xp, &w);
                xp.data[j] = o - h;
                let m = obj(&xp, &w);
                xp.data[j] = o;
                assert!(((p - m) / (2.0 * h) - dx.data[j]).abs() < 1e-6);
            }
            let sums: Vec<f64> = (0..3)
                .map(|o| (0..2).map(|i| r.channel(i, o).iter().sum::<f64>()).sum())
                .collect();
            for o in 0..3 {
                assert!((db[o] - sums[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_normalizes_and_backprops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 3, 2, 3, 3);
        let gamma = vec![1.5, 0.5];
        let beta = vec![0.2, -0.1];
        let (y, cache, stats) = batch_norm_train(&x, &gamma, &beta);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|i| cache.xhat.channel(i, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!(stats.var[ch] > 0.0);
        }
        let r = rand_tensor(&mut rng, 3, 2, 3, 3);
        let obj = |x: &Tensor<f64>| -> f64 {
            batch_norm_train(x, &gamma, &beta).0.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let mut dg = vec![0.0; 2];
        let mut dbt = vec![0.0; 2];
        let dx = batch_norm_backward(&r, &gamma, &cache, &mut dg, &mut dbt);
        let h = 1e-6;
        let mut xp = x.clone();
        for j in 0..x.data.len() {
            let o = xp.data[j];
            xp.data[j] = o + h;
            let p = obj(&xp);
            xp.data[j] = o - h;
            let m = obj(&xp);
            xp.data[j] = o;
            assert!(((p - m) / (2.0 * h) - dx.data[j]).abs() < 1e-6, "bn dx {j}");
        }
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 1, 2, 4, 4);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.shape(), [1, 2, 2, 2]);
        for (v, &a) in y.data.iter().zip(&arg) {
            assert_eq!(*v, x.data[a as usize]);
        }
        // <up(a), b> == <a, up^T(b)>
        let a = rand_tensor(&mut rng, 1, 2, 2, 3);
        let b = rand_tensor(&mut rng, 1, 2, 4, 6);
        let lhs: f64 = upsample2(&a).data.iter().zip(&b.data).map(|(p, q)| p * q).sum();
        let rhs: f64 = a.data.iter().zip(&upsample2_backward(&b).data).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, 2, 2, 3, 3);
        let b = rand_tensor(&mut rng, 2, 3, 3, 3);
        let (a2, b2) = split_channels(&concat(&a, &b), 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
