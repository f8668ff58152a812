//! Raw row-major kernels shared by the tape and by the skipping inference engine.
//!
//! Every kernel computes each output row from the matching input row only, so running a
//! kernel over a subset of rows yields bit-identical rows to running it over the full
//! matrix. The inference engine's skip-equivalence relies on this.

pub const LN_EPS: f64 = 1e-6;

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), where `op(a)` is `m×k`, `op(b)` is `k×n`.
///
/// `a_trans` means `a` is stored as `k×m`; `b_trans` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
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
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the logical dims and the strides
    // address exactly those elements.
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

/// Plain `[m×k] · [k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, &mut c, false);
    c
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Layer norm over rows of width `d`. Returns `(out, xhat, rstd)`.
pub fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
            o[j] = xh[j] * gain[j] + bias[j];
        }
    }
    (out, xhat, rstd)
}

/// Numerically stable softmax over the entries of `scores` whose index is allowed.
/// Disallowed entries become exactly 0; a row with nothing allowed becomes all zeros.
pub fn masked_softmax_in_place(scores: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, s) in scores.iter().enumerate() {
        if allowed(j) && *s > max {
            max = *s;
        }
    }
    if max == f64::NEG_INFINITY {
        scores.iter_mut().for_each(|s| *s = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, s) in scores.iter_mut().enumerate() {
        if allowed(j) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// One attention block: `q_len` query rows against `k_len` key/value rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Shape of a packed multi-head attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub segments: Vec<Segment>,
    /// Query `i` of a segment may see key `j` only when `j <= i + (k_len - q_len)`.
    pub causal: bool,
    /// Per key row; `false` removes the key from every softmax.
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionSpec {
    pub fn key_allowed(&self, seg: &Segment, qi: usize, kj: usize) -> bool {
        if self.causal && kj > qi + (seg.k_len - seg.q_len) {
            return false;
        }
        match &self.key_mask {
            Some(mask) => mask[seg.k_start + kj],
            None => true,
        }
    }

    /// Number of probability entries stored by [`attention`].
    pub fn prob_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| self.heads * s.q_len * s.k_len)
            .sum()
    }
}

/// Scaled dot-product multi-head attention over packed rows of width `d`.
/// Returns the context rows and the attention probabilities laid out as
/// `[segment][head][query][key]`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], d: usize, spec: &AttentionSpec) -> (Vec<f64>, Vec<f64>) {
    let h = spec.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let q_rows = q.len() / d;
    let mut ctx = vec![0.0; q_rows * d];
    let mut probs = vec![0.0; spec.prob_len()];
    let mut off = 0;
    for seg in &spec.segments {
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..seg.q_len {
                let qrow = &q[(seg.q_start + i) * d + c0..(seg.q_start + i) * d + c0 + dh];
                let p = &mut probs[off..off + seg.k_len];
                for (j, pj) in p.iter_mut().enumerate() {
                    if spec.key_allowed(seg, i, j) {
                        let krow = &k[(seg.k_start + j) * d + c0..(seg.k_start + j) * d + c0 + dh];
                        *pj = dot(qrow, krow) * scale;
                    }
                }
                masked_softmax_in_place(p, |j| spec.key_allowed(seg, i, j));
                let crow = &mut ctx[(seg.q_start + i) * d + c0..(seg.q_start + i) * d + c0 + dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj != 0.0 {
                        let vrow = &v[(seg.k_start + j) * d + c0..(seg.k_start + j) * d + c0 + dh];
                        for (c, vv) in crow.iter_mut().zip(vrow) {
                            *c += pj * vv;
                        }
                    }
                }
                off += seg.k_len;
            }
        }
    }
    (ctx, probs)
}

/// Softmax weights, per-key shares and per-row presence of [`gated_attention`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GatedProbs {
    /// `rho_i * pi_ij`, laid out like [`attention`] probabilities.
    pub probs: Vec<f64>,
    /// `exp(s_ij - m_i) / Z_i`, zero for keys with weight 0.
    pub shares: Vec<f64>,
    /// `1 - prod_j (1 - w_j)` over the visible keys, one entry per (segment, head, query).
    pub presence: Vec<f64>,
}

/// Attention with a soft key weight `w_j` in `[0, 1]`:
/// `p_ij = rho_i * w_j exp(s_ij) / sum_k w_k exp(s_ik)` with `rho_i = 1 - prod_k (1 - w_k)`.
/// Binary weights give exactly a hard key mask, including the all-zero row when no key
/// is left; weights of 1 reproduce [`attention`] bit for bit.
pub fn gated_attention(q: &[f64], k: &[f64], v: &[f64], w: &[f64], d: usize, spec: &AttentionSpec) -> (Vec<f64>, GatedProbs) {
    let h = spec.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let q_rows = q.len() / d;
    let mut ctx = vec![0.0; q_rows * d];
    let n = spec.prob_len();
    let mut out = GatedProbs {
        probs: vec![0.0; n],
        shares: vec![0.0; n],
        presence: Vec::with_capacity(n),
    };
    let mut off = 0;
    for seg in &spec.segments {
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..seg.q_len {
                let qrow = &q[(seg.q_start + i) * d + c0..(seg.q_start + i) * d + c0 + dh];
                let live = |j: usize| spec.key_allowed(seg, i, j) && w[seg.k_start + j] > 0.0;
                let p = &mut out.probs[off..off + seg.k_len];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    if live(j) {
                        let krow = &k[(seg.k_start + j) * d + c0..(seg.k_start + j) * d + c0 + dh];
                        *pj = dot(qrow, krow) * scale;
                        max = max.max(*pj);
                    }
                }
                let r = &mut out.shares[off..off + seg.k_len];
                let mut z = 0.0;
                for j in 0..seg.k_len {
                    if live(j) {
                        r[j] = (p[j] - max).exp();
                        p[j] = w[seg.k_start + j] * r[j];
                        z += p[j];
                    } else {
                        p[j] = 0.0;
                    }
                }
                let mut keep = 1.0;
                for j in 0..seg.k_len {
                    if spec.key_allowed(seg, i, j) {
                        keep *= 1.0 - w[seg.k_start + j];
                    }
                }
                let rho = if z > 0.0 { 1.0 - keep } else { 0.0 };
                out.presence.push(rho);
                for j in 0..seg.k_len {
                    if z > 0.0 {
                        r[j] /= z;
                        p[j] = rho * (p[j] / z);
                    }
                }
                let crow = &mut ctx[(seg.q_start + i) * d + c0..(seg.q_start + i) * d + c0 + dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj != 0.0 {
                        let vrow = &v[(seg.k_start + j) * d + c0..(seg.k_start + j) * d + c0 + dh];
                        for (c, vv) in crow.iter_mut().zip(vrow) {
                            *c += pj * vv;
                        }
                    }
                }
                off += seg.k_len;
            }
        }
    }
    (ctx, out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
