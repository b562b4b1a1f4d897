//! Single-direction LSTM over a flat input sequence, with hand-written
//! backpropagation through time.
//!
//! Gate layout in the stacked weight matrix is `[input, forget, cell, output]`;
//! each step computes `z = W [x; h_prev] + b`.

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y += W v` for row-major `W` of shape `rows x v.len()`.
#[inline]
pub(crate) fn gemv_acc(w: &[f64], v: &[f64], y: &mut [f64]) {
    let cols = v.len();
    for (r, out) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (a, b) in row.iter().zip(v) {
            s += a * b;
        }
        *out += s;
    }
}

/// `dw += d ⊗ v` and `dv += Wᵀ d`.
#[inline]
pub(crate) fn gemv_back(w: &[f64], v: &[f64], d: &[f64], dw: &mut [f64], dv: &mut [f64]) {
    let cols = v.len();
    for (r, &g) in d.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            drow[c] += g * v[c];
            dv[c] += g * row[c];
        }
    }
}

pub struct LstmWeights<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub input: usize,
    pub hidden: usize,
}

/// Everything the backward pass needs, stored per step in processing order.
pub struct LstmCache {
    input: usize,
    hidden: usize,
    reverse: bool,
    /// `[x; h_prev]` per step.
    xh: Vec<f64>,
    /// Activated gates `[i, f, g, o]` per step.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    /// Hidden states indexed by sequence position (not processing order).
    pub h: Vec<f64>,
}

impl LstmCache {
    pub fn h_at(&self, pos: usize) -> &[f64] {
        &self.h[pos * self.hidden..(pos + 1) * self.hidden]
    }
}

/// Runs the LSTM over `xs` (row-major, `len x input`). With `reverse` the
/// sequence is consumed from the end; `h` is still indexed by position.
pub fn forward(p: &LstmWeights, xs: &[f64], len: usize, reverse: bool) -> LstmCache {
    let (d, h) = (p.input, p.hidden);
    debug_assert_eq!(xs.len(), len * d);
    let mut cache = LstmCache {
        input: d,
        hidden: h,
        reverse,
        xh: vec![0.0; len * (d + h)],
        gates: vec![0.0; len * 4 * h],
        c: vec![0.0; len * h],
        tanh_c: vec![0.0; len * h],
        h: vec![0.0; len * h],
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut z = vec![0.0; 4 * h];
    for step in 0..len {
        let pos = if reverse { len - 1 - step } else { step };
        let xh = &mut cache.xh[step * (d + h)..(step + 1) * (d + h)];
        xh[..d].copy_from_slice(&xs[pos * d..(pos + 1) * d]);
        xh[d..].copy_from_slice(&h_prev);
        z.copy_from_slice(p.b);
        gemv_acc(p.w, xh, &mut z);
        let g = &mut cache.gates[step * 4 * h..(step + 1) * 4 * h];
        for j in 0..h {
            g[j] = sigmoid(z[j]);
            g[h + j] = sigmoid(z[h + j]);
            g[2 * h + j] = z[2 * h + j].tanh();
            g[3 * h + j] = sigmoid(z[3 * h + j]);
        }
        for j in 0..h {
            let c = g[h + j] * c_prev[j] + g[j] * g[2 * h + j];
            let tc = c.tanh();
            cache.c[step * h + j] = c;
            cache.tanh_c[step * h + j] = tc;
            let hv = g[3 * h + j] * tc;
            cache.h[pos * h + j] = hv;
            h_prev[j] = hv;
            c_prev[j] = c;
        }
    }
    cache
}

/// Backpropagates `dh` (gradient w.r.t. each position's hidden state,
/// indexed by position) into `dw`, `db` and `dxs`.
pub fn backward(p: &LstmWeights, cache: &LstmCache, dh: &[f64], dw: &mut [f64], db: &mut [f64], dxs: &mut [f64]) {
    let (d, h) = (cache.input, cache.hidden);
    let len = cache.h.len() / h.max(1);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    let mut dxh = vec![0.0; d + h];
    for step in (0..len).rev() {
        let pos = if cache.reverse { len - 1 - step } else { step };
        let g = &cache.gates[step * 4 * h..(step + 1) * 4 * h];
        for j in 0..h {
            let dhj = dh[pos * h + j] + dh_next[j];
            let tc = cache.tanh_c[step * h + j];
            let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let c_prev = if step > 0 { cache.c[(step - 1) * h + j] } else { 0.0 };
            let dc = dc_next[j] + dhj * o * (1.0 - tc * tc);
            dz[j] = dc * gg * i * (1.0 - i);
            dz[h + j] = dc * c_prev * f * (1.0 - f);
            dz[2 * h + j] = dc * i * (1.0 - gg * gg);
            dz[3 * h + j] = dhj * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        for (a, b) in db.iter_mut().zip(&dz) {
            *a += b;
        }
        dxh.iter_mut().for_each(|v| *v = 0.0);
        let xh = &cache.xh[step * (d + h)..(step + 1) * (d + h)];
        gemv_back(p.w, xh, &dz, dw, &mut dxh);
        for (a, b) in dxs[pos * d..(pos + 1) * d].iter_mut().zip(&dxh[..d]) {
            *a += b;
        }
        dh_next.copy_from_slice(&dxh[d..]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (d, h, len) = (3, 4, 5);
        let mut w: Vec<f64> = (0..4 * h * (d + h)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..4 * h).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let xs: Vec<f64> = (0..len * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coef: Vec<f64> = (0..len * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for reverse in [false, true] {
            let loss = |w: &[f64], xs: &[f64]| {
                let c = forward(&LstmWeights { w, b: &b, input: d, hidden: h }, xs, len, reverse);
                c.h.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>()
            };
            let c = forward(&LstmWeights { w: &w, b: &b, input: d, hidden: h }, &xs, len, reverse);
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; b.len()];
            let mut dx = vec![0.0; xs.len()];
            backward(&LstmWeights { w: &w, b: &b, input: d, hidden: h }, &c, &coef, &mut dw, &mut db, &mut dx);
            let eps = 1e-6;
            for k in [0, 7, 30, w.len() - 1] {
                let orig = w[k];
                w[k] = orig + eps;
                let up = loss(&w, &xs);
                w[k] = orig - eps;
                let dn = loss(&w, &xs);
                w[k] = orig;
                let num = (up - dn) / (2.0 * eps);
                assert!((num - dw[k]).abs() < 1e-7, "w[{k}] {num} vs {}", dw[k]);
            }
            let mut xs2 = xs.clone();
            for k in 0..xs.len() {
                let orig = xs2[k];
                xs2[k] = orig + eps;
                let up = loss(&w, &xs2);
                xs2[k] = orig - eps;
                let dn = loss(&w, &xs2);
                xs2[k] = orig;
                assert!(((up - dn) / (2.0 * eps) - dx[k]).abs() < 1e-7);
            }
        }
    }
}
