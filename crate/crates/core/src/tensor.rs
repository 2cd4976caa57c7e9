//! Dense row-major tensors and the raw numeric kernels.
//!
//! Values are stored as f64. Verification (gradient checking) runs directly
//! on these. Training keeps persistent state (parameters, optimizer moments)
//! rounded to the f32 grid after every update so checkpoints can store 32-bit
//! values losslessly; see `optim`.
//!
//! Every kernel fixes its accumulation order, so results are bitwise
//! reproducible and independent of how callers batch work. The autodiff tape
//! and the cache-based decoder call the same kernels, which is what makes
//! cached and uncached decoding bitwise identical.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor_new",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n], requires_grad: false }
    }

    /// Gaussian init on the f32 grid (params are stored at f32 precision).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            // Box-Muller from two uniforms; avoids distribution-crate drift.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            data.push((std * z) as f32 as f64);
        }
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Round every element to the nearest f32. Persistent training state
    /// lives on this grid so 32-bit checkpoints round-trip bitwise.
    pub fn round_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

pub fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    for &v in data {
        if !v.is_finite() {
            return Err(Error::NonFinite { op, ctx: None });
        }
    }
    Ok(())
}

/// Attention mask over an L×L grid; `allowed[i*l + j]` says whether position
/// i may attend to position j.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub l: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn new(l: usize) -> Self {
        Mask { l, allowed: vec![false; l * l] }
    }

    pub fn allow(&mut self, i: usize, j: usize) {
        self.allowed[i * self.l + j] = true;
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.l + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.l..(i + 1) * self.l]
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────────
//
// All matrices are row-major slices. Accumulation orders are part of the
// contract: for every output element the additions happen in ascending index
// order of the summed dimension.

pub mod kernels {
    /// C[m×n] = A[m×k]·B[k×n]. Accumulates over p ascending for each (i, j).
    pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        c.fill(0.0);
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = a[i * k + p];
                let b_row = &b[p * n..(p + 1) * n];
                for (cv, bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ip * bv;
                }
            }
        }
    }

    /// C[m×n] = A[m×k]·B[n×k]ᵀ (rows of B are dotted against rows of A).
    pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &b[j * k..(j + 1) * k];
                c[i * n + j] = dot(a_row, b_row);
            }
        }
    }

    /// C[k×n] = A[m×k]ᵀ·B[m×n]. Accumulates over i ascending.
    pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        c.fill(0.0);
        for i in 0..m {
            let b_row = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = a[i * k + p];
                let c_row = &mut c[p * n..(p + 1) * n];
                for (cv, bv) in c_row.iter_mut().zip(b_row) {
                    *cv += a_ip * bv;
                }
            }
        }
    }

    /// Sequential dot product, index-ascending. The cache-based decoder and
    /// the full-sequence forward both reduce attention scores through this.
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for (x, y) in a.iter().zip(b) {
            s += x * y;
        }
        s
    }

    /// Numerically-stable softmax over one row, in place.
    pub fn softmax_row(row: &mut [f64]) {
        let mut mx = f64::NEG_INFINITY;
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }

    /// Softmax over the columns of `row` where `allowed` is true; disallowed
    /// entries are written as exactly 0.0 and never read.
    pub fn masked_softmax_row(row: &mut [f64], allowed: &[bool]) {
        let mut mx = f64::NEG_INFINITY;
        for (v, &ok) in row.iter().zip(allowed) {
            if ok && *v > mx {
                mx = *v;
            }
        }
        let mut sum = 0.0;
        for (v, &ok) in row.iter_mut().zip(allowed) {
            if ok {
                *v = (*v - mx).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        let inv = 1.0 / sum;
        for (v, &ok) in row.iter_mut().zip(allowed) {
            if ok {
                *v *= inv;
            }
        }
    }

    /// Row mean/variance layer norm: y = gamma·(x−μ)/√(σ²+eps) + beta.
    /// Returns (mean, inv_std) per row for the backward pass.
    pub fn layer_norm_row(
        x: &[f64],
        gamma: &[f64],
        beta: &[f64],
        eps: f64,
        y: &mut [f64],
    ) -> (f64, f64) {
        let n = x.len() as f64;
        let mut mean = 0.0;
        for &v in x {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for &v in x {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let inv_std = 1.0 / (var + eps).sqrt();
        for i in 0..x.len() {
            y[i] = gamma[i] * ((x[i] - mean) * inv_std) + beta[i];
        }
        (mean, inv_std)
    }

    pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    }

    /// Strided valid convolution where kernel size equals the stride, i.e.
    /// non-overlapping k×k windows. Input [h][w][ci], weight [ky][kx][ci][co],
    /// output [h/k][w/k][co]. Sums ky, kx, ci ascending.
    pub fn conv2d_stride(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        h: usize,
        wd: usize,
        ci: usize,
        co: usize,
        k: usize,
        out: &mut [f64],
    ) {
        let oh = h / k;
        let ow = wd / k;
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = (oy * ow + ox) * co;
                out[o_base..o_base + co].copy_from_slice(b);
                for ky in 0..k {
                    for kx in 0..k {
                        let x_base = ((oy * k + ky) * wd + (ox * k + kx)) * ci;
                        for c_in in 0..ci {
                            let xv = x[x_base + c_in];
                            let w_base = ((ky * k + kx) * ci + c_in) * co;
                            let w_row = &w[w_base..w_base + co];
                            let o_row = &mut out[o_base..o_base + co];
                            for (ov, wv) in o_row.iter_mut().zip(w_row) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Mean over non-overlapping k×k windows, per channel. Division by k²
    /// happens once after the window sum (exact for power-of-two k²).
    pub fn area_downsample(x: &[f64], h: usize, w: usize, c: usize, k: usize, out: &mut [f64]) {
        let oh = h / k;
        let ow = w / k;
        let inv = 1.0 / ((k * k) as f64);
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = (oy * ow + ox) * c;
                for ch in 0..c {
                    out[o_base + ch] = 0.0;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let x_base = ((oy * k + ky) * w + (ox * k + kx)) * c;
                        for ch in 0..c {
                            out[o_base + ch] += x[x_base + ch];
                        }
                    }
                }
                for ch in 0..c {
                    out[o_base + ch] *= inv;
                }
            }
        }
    }

    /// Packed-channel layout shared by shuffle/unshuffle: packed channel
    /// c = out_channel·k² + s, where s enumerates the k×k sub-offsets in
    /// row-major order (dy = s / k, dx = s % k).
    ///
    /// pixel_shuffle: [h][w][c·k²] → [h·k][w·k][c].
    pub fn pixel_shuffle(x: &[f64], h: usize, w: usize, c_out: usize, k: usize, out: &mut [f64]) {
        let c_in = c_out * k * k;
        for y in 0..h {
            for xw in 0..w {
                let base_in = (y * w + xw) * c_in;
                for pc in 0..c_in {
                    let ch = pc / (k * k);
                    let s = pc % (k * k);
                    let (dy, dx) = (s / k, s % k);
                    let oy = y * k + dy;
                    let ox = xw * k + dx;
                    out[(oy * w * k + ox) * c_out + ch] = x[base_in + pc];
                }
            }
        }
    }

    /// pixel_unshuffle: [h·k][w·k][c] → [h][w][c·k²]; inverse of the above.
    pub fn pixel_unshuffle(x: &[f64], h: usize, w: usize, c: usize, k: usize, out: &mut [f64]) {
        // h, w are the *output* (coarse) grid dims; input is [h·k][w·k][c].
        let c_out = c * k * k;
        for y in 0..h {
            for xw in 0..w {
                let base_out = (y * w + xw) * c_out;
                for ch in 0..c {
                    for s in 0..k * k {
                        let (dy, dx) = (s / k, s % k);
                        let iy = y * k + dy;
                        let ix = xw * k + dx;
                        out[base_out + ch * k * k + s] = x[(iy * w * k + ix) * c + ch];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::kernels::*;
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn matmul_2x2_identity() {
        // [DERIVED] oracle: hand-multiplied 2x2 case, frozen.
        let a = [1.0, 2.0, 3.0, 4.0];
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        matmul_nn(&a, &i2, &mut c, 2, 2, 2);
        assert_eq!(c, a);
        let b = [5.0, 6.0, 7.0, 8.0];
        matmul_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let mut rng = crate::testutil::rng(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mut c = vec![0.0; 15];
        matmul_nn(&a.data, &b.data, &mut c, 3, 4, 5);

        // nt path: B stored as [5,4] transposed.
        let mut bt = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b.data[i * 5 + j];
            }
        }
        let mut c2 = vec![0.0; 15];
        matmul_nt(&a.data, &bt, &mut c2, 3, 4, 5);
        for (x, y) in c.iter().zip(&c2) {
            assert!(approx(*x, *y, 1e-12));
        }

        // tn path: A stored as [4,3] transposed.
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a.data[i * 4 + j];
            }
        }
        let mut c3 = vec![0.0; 15];
        matmul_tn(&at, &b.data, &mut c3, 4, 3, 5);
        for (x, y) in c.iter().zip(&c3) {
            assert!(approx(*x, *y, 1e-12));
        }
    }

    #[test]
    fn area_downsample_means_windows() {
        // [DERIVED] oracle: mean of each 2x2 window computed by hand.
        let x = [1.0, 2.0, 3.0, 4.0]; // 2x2x1
        let mut out = [0.0; 1];
        area_downsample(&x, 2, 2, 1, 2, &mut out);
        assert_eq!(out[0], 2.5);
    }

    #[test]
    fn pixel_shuffle_layout_and_bijection() {
        // 1x1x4 with k=2 → 2x2x1 laid out row-major by sub-offset.
        let x = [10.0, 20.0, 30.0, 40.0];
        let mut out = [0.0; 4];
        pixel_shuffle(&x, 1, 1, 1, 2, &mut out);
        assert_eq!(out, [10.0, 20.0, 30.0, 40.0]); // (0,0),(0,1),(1,0),(1,1)

        let mut back = [0.0; 4];
        pixel_unshuffle(&out, 1, 1, 1, 2, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn pixel_shuffle_roundtrip_k4() {
        let mut rng = crate::testutil::rng(3);
        let h = 2;
        let w = 3;
        let c = 5;
        let k = 4;
        let x = Tensor::randn(&[h, w, c * k * k], 1.0, &mut rng);
        let mut mid = vec![0.0; h * k * w * k * c];
        pixel_shuffle(&x.data, h, w, c, k, &mut mid);
        let mut back = vec![0.0; x.numel()];
        pixel_unshuffle(&mid, h, w, c, k, &mut back);
        assert_eq!(back, x.data);
    }

    #[test]
    fn conv_stride_k1_is_pointwise() {
        let x = [1.0, 2.0, 3.0, 4.0]; // 2x2x1
        let w = [2.0]; // 1x1x1x1
        let b = [0.5];
        let mut out = [0.0; 4];
        conv2d_stride(&x, &w, &b, 2, 2, 1, 1, 1, &mut out);
        assert_eq!(out, [2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![0.1, 0.5, -2.0, 3.0];
        softmax_row(&mut row);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_ignores_disallowed() {
        let mut row = vec![1.0, f64::INFINITY, 2.0];
        let allowed = vec![true, false, true];
        masked_softmax_row(&mut row, &allowed);
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_detected() {
        assert!(ensure_finite(&[1.0, f64::NAN], "t").is_err());
        assert!(ensure_finite(&[1.0, f64::INFINITY], "t").is_err());
        assert!(ensure_finite(&[1.0, -2.0], "t").is_ok());
    }
}
