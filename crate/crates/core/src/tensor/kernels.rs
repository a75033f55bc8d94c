//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! row-major slices; shape checking happens in the graph layer.

use num_complex::Complex64;

use super::fft::{next_pow2, FftPlan};

#[inline]
fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

pub(crate) fn conv1d_out_len(t: usize, k: usize, stride: usize, pad: (usize, usize)) -> Option<usize> {
    let padded = t + pad.0 + pad.1;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output positions `t` for which tap `k` reads an in-bounds input sample.
#[inline]
fn valid_range(t_in: usize, t_out: usize, k: usize, stride: usize, pad_left: usize) -> (usize, usize) {
    let lo = if pad_left > k { ceil_div(pad_left - k, stride) } else { 0 };
    let hi = if t_in + pad_left > k {
        ceil_div(t_in + pad_left - k, stride).min(t_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub t_out: usize,
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut y = vec![0.0; d.batch * d.c_out * d.t_out];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let yrow = &mut y[(b * d.c_out + o) * d.t_out..][..d.t_out];
            for i in 0..d.c_in {
                let xrow = &x[(b * d.c_in + i) * d.t_in..][..d.t_in];
                for k in 0..d.k {
                    let wv = w[(o * d.c_in + i) * d.k + k];
                    let (lo, hi) = valid_range(d.t_in, d.t_out, k, d.stride, d.pad_left);
                    if d.stride == 1 {
                        let off = lo + k - d.pad_left;
                        for (yv, xv) in yrow[lo..hi].iter_mut().zip(&xrow[off..]) {
                            *yv += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            yrow[t] += wv * xrow[t * d.stride + k - d.pad_left];
                        }
                    }
                }
            }
        }
    }
    y
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes[0] + lanes[1] + lanes[2] + lanes[3] + tail
}

pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: &ConvDims,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    let mut strided = vec![0.0; d.t_out];
    for b in 0..d.batch {
        for i in 0..d.c_in {
            let xbase = (b * d.c_in + i) * d.t_in;
            for k in 0..d.k {
                let (lo, hi) = valid_range(d.t_in, d.t_out, k, d.stride, d.pad_left);
                if lo >= hi {
                    continue;
                }
                let start = xbase + lo * d.stride + k - d.pad_left;
                let xs: &[f64] = if d.stride == 1 {
                    &x[start..][..hi - lo]
                } else {
                    for (s, xv) in strided.iter_mut().zip(x[start..].iter().step_by(d.stride)).take(hi - lo) {
                        *s = *xv;
                    }
                    &strided[..hi - lo]
                };
                if let Some(gw) = gw.as_mut() {
                    for o in 0..d.c_out {
                        let grow = &gy[(b * d.c_out + o) * d.t_out..][lo..hi];
                        gw[(o * d.c_in + i) * d.k + k] += dot(grow, xs);
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    for o in 0..d.c_out {
                        let wv = w[(o * d.c_in + i) * d.k + k];
                        let grow = &gy[(b * d.c_out + o) * d.t_out..][lo..hi];
                        if d.stride == 1 {
                            for (gxv, gv) in gx[start..][..hi - lo].iter_mut().zip(grow) {
                                *gxv += wv * gv;
                            }
                        } else {
                            for (gxv, gv) in gx[start..].iter_mut().step_by(d.stride).zip(grow) {
                                *gxv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// `[m × k] · [k × n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` with `a: [m × n]`, `b: [k × n]`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..][..n];
        for j in 0..k {
            out[i * k + j] = arow.iter().zip(&b[j * n..][..n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b` with `a: [m × k]`, `b: [m × n]`.
pub(crate) fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..][..n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Causal long convolution through the FFT.
///
/// `y[b,c,t] = Σ_{s ≤ t} k[c,s] · u[b,c,t-s]`, with `u: [B,C,T]` and
/// `k: [C,L]`. Two batch rows sharing a channel are packed into the real and
/// imaginary parts of a single complex transform.
pub(crate) struct CausalConv {
    batch: usize,
    channels: usize,
    t: usize,
    k_len: usize,
    eff_len: usize,
    plan: FftPlan,
}

impl CausalConv {
    pub fn new(batch: usize, channels: usize, t: usize, k_len: usize) -> Self {
        let eff_len = k_len.min(t).max(1);
        let n = next_pow2(t + eff_len - 1);
        CausalConv {
            batch,
            channels,
            t,
            k_len,
            eff_len,
            plan: FftPlan::new(n),
        }
    }

    fn n(&self) -> usize {
        self.plan.len()
    }

    fn kernel_spectrum(&self, k: &[f64], c: usize) -> Vec<Complex64> {
        let n = self.n();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (dst, &v) in buf.iter_mut().zip(&k[c * self.k_len..][..self.eff_len]) {
            dst.re = v;
        }
        self.plan.forward(&mut buf);
        buf
    }

    /// Packs rows `b0` and `b0+1` (if present) of channel `c` and transforms.
    fn packed_spectrum(&self, x: &[f64], c: usize, b0: usize) -> Vec<Complex64> {
        let n = self.n();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let r0 = &x[(b0 * self.channels + c) * self.t..][..self.t];
        for (dst, &v) in buf.iter_mut().zip(r0) {
            dst.re = v;
        }
        if b0 + 1 < self.batch {
            let r1 = &x[((b0 + 1) * self.channels + c) * self.t..][..self.t];
            for (dst, &v) in buf.iter_mut().zip(r1) {
                dst.im = v;
            }
        }
        self.plan.forward(&mut buf);
        buf
    }

    fn unpack(&self, buf: &[Complex64], out: &mut [f64], c: usize, b0: usize) {
        let t = self.t;
        let o0 = &mut out[(b0 * self.channels + c) * t..][..t];
        for (dst, v) in o0.iter_mut().zip(buf) {
            *dst = v.re;
        }
        if b0 + 1 < self.batch {
            let o1 = &mut out[((b0 + 1) * self.channels + c) * t..][..t];
            for (dst, v) in o1.iter_mut().zip(buf) {
                *dst = v.im;
            }
        }
    }

    pub fn forward(&self, u: &[f64], k: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; u.len()];
        for c in 0..self.channels {
            let kf = self.kernel_spectrum(k, c);
            for b0 in (0..self.batch).step_by(2) {
                let mut z = self.packed_spectrum(u, c, b0);
                for (zv, kv) in z.iter_mut().zip(&kf) {
                    *zv *= kv;
                }
                self.plan.inverse(&mut z);
                self.unpack(&z, &mut y, c, b0);
            }
        }
        y
    }

    /// Returns `(∂/∂u, ∂/∂k)` for upstream gradient `g: [B,C,T]`.
    pub fn backward(
        &self,
        u: &[f64],
        k: &[f64],
        g: &[f64],
        want_u: bool,
        want_k: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let n = self.n();
        let mut gu = want_u.then(|| vec![0.0; u.len()]);
        let mut gk = want_k.then(|| vec![0.0; self.channels * self.k_len]);
        for c in 0..self.channels {
            let kf = want_u.then(|| self.kernel_spectrum(k, c));
            let mut acc = vec![Complex64::new(0.0, 0.0); if want_k { n } else { 0 }];
            for b0 in (0..self.batch).step_by(2) {
                let gf = self.packed_spectrum(g, c, b0);
                if let (Some(gu), Some(kf)) = (gu.as_mut(), kf.as_ref()) {
                    let mut z: Vec<Complex64> =
                        gf.iter().zip(kf).map(|(gv, kv)| gv * kv.conj()).collect();
                    self.plan.inverse(&mut z);
                    self.unpack(&z, gu, c, b0);
                }
                if want_k {
                    let uf = self.packed_spectrum(u, c, b0);
                    for ((a, gv), uv) in acc.iter_mut().zip(&gf).zip(&uf) {
                        *a += gv * uv.conj();
                    }
                }
            }
            if let Some(gk) = gk.as_mut() {
                self.plan.inverse(&mut acc);
                for (dst, v) in gk[c * self.k_len..][..self.eff_len].iter_mut().zip(&acc) {
                    *dst = v.re;
                }
            }
        }
        (gu, gk)
    }
}

/// Direct O(T·L) causal convolution, used for inference cross-checks.
pub(crate) fn causal_conv_direct(u: &[f64], k: &[f64]) -> Vec<f64> {
    let t = u.len();
    let mut y = vec![0.0; t];
    for (s, &kv) in k.iter().enumerate().take(t) {
        for (yv, uv) in y[s..].iter_mut().zip(u) {
            *yv += kv * uv;
        }
    }
    y
}

/// Raw parameter slices of a diagonal state-space layer, `[C]` and `[C, N]`.
pub(crate) struct SsmParamSlices<'a> {
    pub channels: usize,
    pub modes: usize,
    pub log_dt: &'a [f64],
    pub log_neg_re: &'a [f64],
    pub im: &'a [f64],
    pub b_re: &'a [f64],
    pub b_im: &'a [f64],
    pub c_re: &'a [f64],
    pub c_im: &'a [f64],
    pub pair_factor: f64,
}

struct Mode {
    dt: f64,
    lambda: Complex64,
    a_bar: Complex64,
    b: Complex64,
    b_bar: Complex64,
    c: Complex64,
}

impl SsmParamSlices<'_> {
    fn mode(&self, ch: usize, n: usize) -> Mode {
        let idx = ch * self.modes + n;
        let dt = self.log_dt[ch].exp();
        let lambda = Complex64::new(-self.log_neg_re[idx].exp(), self.im[idx]);
        let a_bar = (lambda * dt).exp();
        let b = Complex64::new(self.b_re[idx], self.b_im[idx]);
        let b_bar = (a_bar - 1.0) / lambda * b;
        let c = Complex64::new(self.c_re[idx], self.c_im[idx]);
        Mode {
            dt,
            lambda,
            a_bar,
            b,
            b_bar,
            c,
        }
    }

    /// Discretized (zero-order hold) convolution kernel `[C, len]`.
    pub fn kernel(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.channels * len];
        for ch in 0..self.channels {
            let row = &mut out[ch * len..][..len];
            for n in 0..self.modes {
                let m = self.mode(ch, n);
                let mut z = m.c * m.b_bar;
                for v in row.iter_mut() {
                    *v += self.pair_factor * z.re;
                    z *= m.a_bar;
                }
            }
        }
        out
    }

    /// Gradients of `Σ g · kernel` w.r.t. the seven parameter slices, in
    /// declaration order.
    pub fn kernel_backward(&self, g: &[f64], len: usize) -> [Vec<f64>; 7] {
        let cn = self.channels * self.modes;
        let mut g_log_dt = vec![0.0; self.channels];
        let mut g_lnr = vec![0.0; cn];
        let mut g_im = vec![0.0; cn];
        let mut g_bre = vec![0.0; cn];
        let mut g_bim = vec![0.0; cn];
        let mut g_cre = vec![0.0; cn];
        let mut g_cim = vec![0.0; cn];
        let f = self.pair_factor;
        for ch in 0..self.channels {
            let grow = &g[ch * len..][..len];
            let mut g_dt = 0.0;
            for n in 0..self.modes {
                let idx = ch * self.modes + n;
                let m = self.mode(ch, n);
                // S = Σ_l g_l Ā^l, T = Σ_l l g_l Ā^{l-1}
                let mut s = Complex64::new(0.0, 0.0);
                let mut t = Complex64::new(0.0, 0.0);
                let mut pow = Complex64::new(1.0, 0.0);
                let mut pow_prev = Complex64::new(0.0, 0.0);
                for (l, &gl) in grow.iter().enumerate() {
                    s += pow * gl;
                    if l > 0 {
                        t += pow_prev * (gl * l as f64);
                    }
                    pow_prev = pow;
                    pow *= m.a_bar;
                }
                let w = m.c * m.b_bar;
                let g_w = (s * f).conj();
                let g_abar = (w * t * f).conj();
                let g_c = g_w * m.b_bar.conj();
                let g_bbar = g_w * m.c.conj();
                let ratio = (m.a_bar - 1.0) / m.lambda;
                let g_b = g_bbar * ratio.conj();
                let lam2 = m.lambda * m.lambda;
                let dbbar_dlambda = m.b * (m.a_bar * m.dt * m.lambda - (m.a_bar - 1.0)) / lam2;
                let g_lambda = g_abar * (m.a_bar * m.dt).conj() + g_bbar * dbbar_dlambda.conj();
                g_dt += (g_abar * (m.lambda * m.a_bar).conj()).re + (g_bbar * (m.b * m.a_bar).conj()).re;
                g_lnr[idx] = g_lambda.re * m.lambda.re;
                g_im[idx] = g_lambda.im;
                g_bre[idx] = g_b.re;
                g_bim[idx] = g_b.im;
                g_cre[idx] = g_c.re;
                g_cim[idx] = g_c.im;
            }
            g_log_dt[ch] = g_dt * self.log_dt[ch].exp();
        }
        [g_log_dt, g_lnr, g_im, g_bre, g_bim, g_cre, g_cim]
    }

    /// Step-by-step state recurrence for one channel:
    /// `x_l = Ā x_{l-1} + B̄ u_l`, `y_l = f · Re(Σ_n C_n x_{l,n})`.
    pub fn recurrence(&self, ch: usize, u: &[f64]) -> Vec<f64> {
        let modes: Vec<Mode> = (0..self.modes).map(|n| self.mode(ch, n)).collect();
        let mut state = vec![Complex64::new(0.0, 0.0); self.modes];
        u.iter()
            .map(|&uv| {
                let mut y = 0.0;
                for (x, m) in state.iter_mut().zip(&modes) {
                    *x = m.a_bar * *x + m.b_bar * uv;
                    y += (m.c * *x).re;
                }
                self.pair_factor * y
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fft_causal_conv_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(b, c, t, l) in &[(1, 1, 7, 3), (3, 2, 33, 33), (2, 3, 16, 40), (5, 1, 100, 17)] {
            let u: Vec<f64> = (0..b * c * t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..c * l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cc = CausalConv::new(b, c, t, l);
            let y = cc.forward(&u, &k);
            for bi in 0..b {
                for ci in 0..c {
                    let row = &u[(bi * c + ci) * t..][..t];
                    let want = causal_conv_direct(row, &k[ci * l..][..l]);
                    let got = &y[(bi * c + ci) * t..][..t];
                    for (w, g) in want.iter().zip(got) {
                        assert!((w - g).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn strided_conv_valid_range() {
        // T=5, k=3, stride 2, causal padding 2 -> 3 outputs
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let w = [1.0, 10.0, 100.0];
        let d = ConvDims {
            batch: 1,
            c_in: 1,
            t_in: 5,
            c_out: 1,
            k: 3,
            stride: 2,
            pad_left: 2,
            t_out: conv1d_out_len(5, 3, 2, (2, 0)).unwrap(),
        };
        assert_eq!(d.t_out, 3);
        let y = conv1d_forward(&x, &w, &d);
        assert_eq!(y, vec![100.0, 1.0 + 20.0 + 300.0, 3.0 + 40.0 + 500.0]);
    }
}
