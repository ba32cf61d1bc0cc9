//! Raw numeric kernels shared by the forward and backward passes.

/// `c[m,n] (+)= op(a)[m,k] · op(b)[k,n]` where `op` optionally transposes a
/// row-major operand in place via strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m·k, k·n and m·n
    // elements of the row-major buffers whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Layout shared by the attention kernels: `batch` blocks of `seq` rows,
/// each row `heads · head_dim` wide.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnLayout {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    #[inline]
    fn at(&self, b: usize, i: usize, h: usize) -> usize {
        (b * self.seq + i) * self.width() + h * self.head_dim
    }
}

/// Scaled dot-product attention per (batch item, head). Returns the output
/// rows and the attention probabilities `[batch, heads, seq, seq]`.
pub(crate) fn attention_forward(q: &[f64], k: &[f64], v: &[f64], l: AttnLayout) -> (Vec<f64>, Vec<f64>) {
    let (n, dh) = (l.seq, l.head_dim);
    let scale = l.scale();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; l.batch * l.heads * n * n];
    let mut scores = vec![0.0; n];
    for b in 0..l.batch {
        for h in 0..l.heads {
            for i in 0..n {
                let qi = &q[l.at(b, i, h)..l.at(b, i, h) + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k[l.at(b, j, h)..l.at(b, j, h) + dh];
                    *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                let p_off = ((b * l.heads + h) * n + i) * n;
                softmax_row(&scores, &mut probs[p_off..p_off + n]);
                let o = l.at(b, i, h);
                for j in 0..n {
                    let p = probs[p_off + j];
                    let vj = l.at(b, j, h);
                    for c in 0..dh {
                        out[o + c] += p * v[vj + c];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] w.r.t. q, k and v.
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    l: AttnLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, dh) = (l.seq, l.head_dim);
    let scale = l.scale();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; n];
    for b in 0..l.batch {
        for h in 0..l.heads {
            for i in 0..n {
                let p_off = ((b * l.heads + h) * n + i) * n;
                let p = &probs[p_off..p_off + n];
                let oi = l.at(b, i, h);
                for j in 0..n {
                    let vj = l.at(b, j, h);
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += dout[oi + c] * v[vj + c];
                        dv[vj + c] += p[j] * dout[oi + c];
                    }
                    dp[j] = acc;
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = l.at(b, j, h);
                    for c in 0..dh {
                        dq[oi + c] += ds * k[kj + c];
                        dk[kj + c] += ds * q[oi + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
