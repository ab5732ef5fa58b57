//! Slice-level numeric kernels shared by the tape and the cached decoder.
//!
//! All matrices are row-major. Nothing here allocates more than its output.

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_t(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[m×n] = a[r×m]ᵀ · b[r×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], r: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for row in 0..r {
        let arow = &a[row * m..(row + 1) * m];
        let brow = &b[row * n..(row + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS normalisation. Returns the output and each row's inverse RMS.
pub fn rms_norm(x: &[f64], gain: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut out = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        inv[r] = s;
        for j in 0..d {
            out[r * d + j] = xr[j] * s * gain[j];
        }
    }
    (out, inv)
}

/// Adjoints of [`rms_norm`] for input and gain.
pub fn rms_norm_backward(
    x: &[f64],
    gain: &[f64],
    inv: &[f64],
    dy: &[f64],
    rows: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut dx = vec![0.0; rows * d];
    let mut dg = vec![0.0; d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let s = inv[r];
        let mut proj = 0.0;
        for j in 0..d {
            proj += dyr[j] * gain[j] * xr[j];
            dg[j] += dyr[j] * xr[j] * s;
        }
        let coef = s * s * s * proj / d as f64;
        for j in 0..d {
            dx[r * d + j] = s * gain[j] * dyr[j] - coef * xr[j];
        }
    }
    (dx, dg)
}

/// Rotary embedding, half-split convention, applied per head in place.
///
/// Row `i` sits at absolute position `offset + i`. `inverse` applies the
/// transpose rotation, which is also the adjoint.
pub fn rope_in_place(
    x: &mut [f64],
    rows: usize,
    heads: usize,
    head_dim: usize,
    base: f64,
    offset: usize,
    inverse: bool,
) {
    let half = head_dim / 2;
    let width = heads * head_dim;
    for r in 0..rows {
        let pos = (offset + r) as f64;
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = (pos * freq).sin_cos();
            let sin = if inverse { -sin } else { sin };
            for h in 0..heads {
                let base_idx = r * width + h * head_dim;
                let a = x[base_idx + i];
                let b = x[base_idx + i + half];
                x[base_idx + i] = a * cos - b * sin;
                x[base_idx + i + half] = a * sin + b * cos;
            }
        }
    }
}

/// Causal multi-head scaled dot-product attention.
///
/// `q` holds `tq` rows at absolute positions `q_offset..`, `k`/`v` hold `tk`
/// rows from position 0. Returns the output and the attention
/// probabilities laid out `[heads][tq][tk]` (masked entries zero).
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    heads: usize,
    head_dim: usize,
    q_offset: usize,
) -> (Vec<f64>, Vec<f64>) {
    let width = heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; tq * width];
    let mut probs = vec![0.0; heads * tq * tk];
    for h in 0..heads {
        let hoff = h * head_dim;
        for i in 0..tq {
            let visible = (q_offset + i + 1).min(tk);
            let qi = &q[i * width + hoff..i * width + hoff + head_dim];
            let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let s = dot(qi, &k[j * width + hoff..j * width + hoff + head_dim]) * scale;
                prow[j] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for p in prow.iter_mut().take(visible) {
                *p = (*p - max).exp();
                total += *p;
            }
            let orow = &mut out[i * width + hoff..i * width + hoff + head_dim];
            for j in 0..visible {
                prow[j] /= total;
                let pj = prow[j];
                let vj = &v[j * width + hoff..j * width + hoff + head_dim];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Adjoints of [`attention`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    tq: usize,
    tk: usize,
    heads: usize,
    head_dim: usize,
    q_offset: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let width = heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = vec![0.0; tq * width];
    let mut dk = vec![0.0; tk * width];
    let mut dv = vec![0.0; tk * width];
    let mut dp = vec![0.0; tk];
    for h in 0..heads {
        let hoff = h * head_dim;
        for i in 0..tq {
            let visible = (q_offset + i + 1).min(tk);
            let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let doi = &dout[i * width + hoff..i * width + hoff + head_dim];
            let mut weighted = 0.0;
            for j in 0..visible {
                let vj = &v[j * width + hoff..j * width + hoff + head_dim];
                dp[j] = dot(doi, vj);
                weighted += prow[j] * dp[j];
                let dvj = &mut dv[j * width + hoff..j * width + hoff + head_dim];
                for (d, &g) in dvj.iter_mut().zip(doi) {
                    *d += prow[j] * g;
                }
            }
            let qi = &q[i * width + hoff..i * width + hoff + head_dim];
            for j in 0..visible {
                let ds = prow[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * width + hoff..j * width + hoff + head_dim];
                let dqi = &mut dq[i * width + hoff..i * width + hoff + head_dim];
                for (d, &kv) in dqi.iter_mut().zip(kj) {
                    *d += ds * kv;
                }
                let dkj = &mut dk[j * width + hoff..j * width + hoff + head_dim];
                for (d, &qv) in dkj.iter_mut().zip(qi) {
                    *d += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2x3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let ab = matmul(&a, &b, 2, 3, 2);
        assert_eq!(ab, vec![58.0, 64.0, 139.0, 154.0]);
        assert_eq!(matmul_t(&a, &bt, 2, 3, 2), ab);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), ab);
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let mut x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let orig = x.clone();
        rope_in_place(&mut x, 3, 2, 4, 10_000.0, 5, false);
        assert!(x.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope_in_place(&mut x, 3, 2, 4, 10_000.0, 5, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn first_query_attends_only_to_itself() {
        let q = [1.0, 0.0, 0.0, 1.0];
        let k = [1.0, 0.0, 0.0, 1.0];
        let v = [3.0, 4.0, 5.0, 6.0];
        let (out, probs) = attention(&q, &k, &v, 2, 2, 1, 2, 0);
        assert_eq!(&out[..2], &[3.0, 4.0]);
        assert_eq!(probs[1], 0.0);
        assert!((probs[2] + probs[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lse_is_stable_for_large_inputs() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
