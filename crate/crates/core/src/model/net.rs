//! Two-level bi-LSTM emitting per-block label scores for the CRF.
//!
//! Token embeddings feed a bi-LSTM over the whole contract. Each reachable
//! block is summarised as `[mean embedding; forward state at its last token;
//! backward state at its first token]`, a second bi-LSTM runs over these
//! block features, and a linear layer yields two emission scores per block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crf::{self, Emissions, Transitions};
use super::lstm::{self, gemv_acc, gemv_back, LstmCache, LstmWeights};
use super::token::Encoded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Dims {
    fn feature(&self) -> usize {
        self.embed + 2 * self.hidden1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

const EMB: usize = 0;
const TOK_FWD: usize = 1;
const TOK_BWD: usize = 3;
const BLK_FWD: usize = 5;
const BLK_BWD: usize = 7;
const PROJ_W: usize = 9;
const PROJ_B: usize = 10;
const TRANS: usize = 11;

/// All trainable tensors in a fixed order; gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct FsiParams {
    pub dims: Dims,
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("contract has no reachable blocks")]
pub struct EmptyContract;

pub fn layout(d: &Dims) -> Vec<(&'static str, usize, usize)> {
    let (e, h1, h2, f) = (d.embed, d.hidden1, d.hidden2, d.feature());
    vec![
        ("embedding", d.vocab, e),
        ("tok_fwd.w", 4 * h1, e + h1),
        ("tok_fwd.b", 1, 4 * h1),
        ("tok_bwd.w", 4 * h1, e + h1),
        ("tok_bwd.b", 1, 4 * h1),
        ("blk_fwd.w", 4 * h2, f + h2),
        ("blk_fwd.b", 1, 4 * h2),
        ("blk_bwd.w", 4 * h2, f + h2),
        ("blk_bwd.b", 1, 4 * h2),
        ("proj.w", 2, 2 * h2),
        ("proj.b", 1, 2),
        ("transitions", 2, 2),
    ]
}

impl FsiParams {
    pub fn zeros(dims: Dims) -> Self {
        let tensors = layout(&dims)
            .into_iter()
            .map(|(name, rows, cols)| Tensor { name, rows, cols, data: vec![0.0; rows * cols] })
            .collect();
        FsiParams { dims, tensors }
    }

    /// Uniform(±1/√fan_in) weights, forget-gate biases at 1, zero transitions.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, t) in p.tensors.iter_mut().enumerate() {
            let scale = match i {
                EMB => 0.5,
                TRANS => 0.0,
                _ if t.rows == 1 => 0.0,
                _ => 1.0 / (t.cols as f64).sqrt(),
            };
            for v in &mut t.data {
                *v = if scale == 0.0 { 0.0 } else { rng.gen_range(-scale..scale) };
            }
        }
        for (bias, h) in
            [(TOK_FWD + 1, dims.hidden1), (TOK_BWD + 1, dims.hidden1), (BLK_FWD + 1, dims.hidden2), (BLK_BWD + 1, dims.hidden2)]
        {
            p.tensors[bias].data[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn transitions(&self) -> Transitions {
        let t = &self.tensors[TRANS].data;
        [[t[0], t[1]], [t[2], t[3]]]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &FsiParams) {
        for (x, y) in self.values_mut().zip(other.values()) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values_mut().for_each(|v| *v *= a);
    }

    fn lstm(&self, at: usize, input: usize, hidden: usize) -> LstmWeights<'_> {
        LstmWeights { w: &self.tensors[at].data, b: &self.tensors[at + 1].data, input, hidden }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub struct ForwardPass {
    pub emissions: Vec<Emissions>,
    tok_fwd: LstmCache,
    tok_bwd: LstmCache,
    blk_fwd: LstmCache,
    blk_bwd: LstmCache,
    /// `[gf; gb]` per block.
    g: Vec<f64>,
}

impl ForwardPass {
    /// Token-level hidden states, forward and backward, at position `n`.
    pub fn token_states(&self, n: usize) -> (&[f64], &[f64]) {
        (self.tok_fwd.h_at(n), self.tok_bwd.h_at(n))
    }
}

pub fn forward(p: &FsiParams, enc: &Encoded) -> Result<ForwardPass, EmptyContract> {
    if enc.blocks.is_empty() {
        return Err(EmptyContract);
    }
    let d = p.dims;
    let (e, h1, h2, f) = (d.embed, d.hidden1, d.hidden2, d.feature());
    let n = enc.ids.len();
    let emb = &p.tensors[EMB].data;
    let mut x = vec![0.0; n * e];
    for (i, &t) in enc.ids.iter().enumerate() {
        let t = (t as usize).min(d.vocab - 1);
        x[i * e..(i + 1) * e].copy_from_slice(&emb[t * e..(t + 1) * e]);
    }
    let tok_fwd = lstm::forward(&p.lstm(TOK_FWD, e, h1), &x, n, false);
    let tok_bwd = lstm::forward(&p.lstm(TOK_BWD, e, h1), &x, n, true);

    let k = enc.blocks.len();
    let mut feats = vec![0.0; k * f];
    for (b, r) in enc.blocks.iter().enumerate() {
        let row = &mut feats[b * f..(b + 1) * f];
        let inv = 1.0 / r.len() as f64;
        for t in r.clone() {
            for j in 0..e {
                row[j] += x[t * e + j] * inv;
            }
        }
        row[e..e + h1].copy_from_slice(tok_fwd.h_at(r.end - 1));
        row[e + h1..].copy_from_slice(tok_bwd.h_at(r.start));
    }
    let blk_fwd = lstm::forward(&p.lstm(BLK_FWD, f, h2), &feats, k, false);
    let blk_bwd = lstm::forward(&p.lstm(BLK_BWD, f, h2), &feats, k, true);

    let mut g = vec![0.0; k * 2 * h2];
    let mut emissions = Vec::with_capacity(k);
    let (pw, pb) = (&p.tensors[PROJ_W].data, &p.tensors[PROJ_B].data);
    for b in 0..k {
        let gk = &mut g[b * 2 * h2..(b + 1) * 2 * h2];
        gk[..h2].copy_from_slice(blk_fwd.h_at(b));
        gk[h2..].copy_from_slice(blk_bwd.h_at(b));
        let mut em = [pb[0], pb[1]];
        gemv_acc(pw, gk, &mut em);
        emissions.push(em);
    }
    Ok(ForwardPass { emissions, tok_fwd, tok_bwd, blk_fwd, blk_bwd, g })
}

/// Backpropagates emission gradients (and optionally extra gradients on the
/// token-level hidden states) into `grad`.
pub fn backward(
    p: &FsiParams,
    enc: &Encoded,
    fp: &ForwardPass,
    d_em: &[Emissions],
    extra_token_grads: Option<(&[f64], &[f64])>,
    grad: &mut FsiParams,
) {
    let d = p.dims;
    let (e, h1, h2, f) = (d.embed, d.hidden1, d.hidden2, d.feature());
    let n = enc.ids.len();
    let k = enc.blocks.len();

    let mut dgf = vec![0.0; k * h2];
    let mut dgb = vec![0.0; k * h2];
    {
        let pw = &p.tensors[PROJ_W].data;
        let mut dpw = std::mem::take(&mut grad.tensors[PROJ_W].data);
        let mut dg = vec![0.0; 2 * h2];
        for b in 0..k {
            let gk = &fp.g[b * 2 * h2..(b + 1) * 2 * h2];
            dg.iter_mut().for_each(|v| *v = 0.0);
            gemv_back(pw, gk, &d_em[b], &mut dpw, &mut dg);
            grad.tensors[PROJ_B].data[0] += d_em[b][0];
            grad.tensors[PROJ_B].data[1] += d_em[b][1];
            dgf[b * h2..(b + 1) * h2].copy_from_slice(&dg[..h2]);
            dgb[b * h2..(b + 1) * h2].copy_from_slice(&dg[h2..]);
        }
        grad.tensors[PROJ_W].data = dpw;
    }

    let mut dfeats = vec![0.0; k * f];
    lstm_backward(p, grad, BLK_FWD, f, h2, &fp.blk_fwd, &dgf, &mut dfeats);
    lstm_backward(p, grad, BLK_BWD, f, h2, &fp.blk_bwd, &dgb, &mut dfeats);

    let mut dx = vec![0.0; n * e];
    let mut dhf = vec![0.0; n * h1];
    let mut dhb = vec![0.0; n * h1];
    if let Some((ef, eb)) = extra_token_grads {
        dhf.copy_from_slice(ef);
        dhb.copy_from_slice(eb);
    }
    for (b, r) in enc.blocks.iter().enumerate() {
        let row = &dfeats[b * f..(b + 1) * f];
        let inv = 1.0 / r.len() as f64;
        for t in r.clone() {
            for j in 0..e {
                dx[t * e + j] += row[j] * inv;
            }
        }
        let last = r.end - 1;
        for j in 0..h1 {
            dhf[last * h1 + j] += row[e + j];
            dhb[r.start * h1 + j] += row[e + h1 + j];
        }
    }
    lstm_backward(p, grad, TOK_FWD, e, h1, &fp.tok_fwd, &dhf, &mut dx);
    lstm_backward(p, grad, TOK_BWD, e, h1, &fp.tok_bwd, &dhb, &mut dx);

    let demb = &mut grad.tensors[EMB].data;
    for (i, &t) in enc.ids.iter().enumerate() {
        let t = (t as usize).min(d.vocab - 1);
        for j in 0..e {
            demb[t * e + j] += dx[i * e + j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    p: &FsiParams,
    grad: &mut FsiParams,
    at: usize,
    input: usize,
    hidden: usize,
    cache: &LstmCache,
    dh: &[f64],
    dxs: &mut [f64],
) {
    let mut dw = std::mem::take(&mut grad.tensors[at].data);
    let mut db = std::mem::take(&mut grad.tensors[at + 1].data);
    lstm::backward(&p.lstm(at, input, hidden), cache, dh, &mut dw, &mut db, dxs);
    grad.tensors[at].data = dw;
    grad.tensors[at + 1].data = db;
}

pub fn emissions(p: &FsiParams, enc: &Encoded) -> Result<Vec<Emissions>, EmptyContract> {
    Ok(forward(p, enc)?.emissions)
}

/// CRF negative log-likelihood of `labels`, accumulating its gradient.
pub fn loss_and_grad(p: &FsiParams, enc: &Encoded, labels: &[u8], grad: &mut FsiParams) -> Result<f64, EmptyContract> {
    let fp = forward(p, enc)?;
    let (loss, d_em, d_tr) = crf::nll_grad(&fp.emissions, &p.transitions(), labels);
    for (g, v) in grad.tensors[TRANS].data.iter_mut().zip(d_tr.iter().flatten()) {
        *g += v;
    }
    backward(p, enc, &fp, &d_em, None, grad);
    Ok(loss)
}

pub fn loss(p: &FsiParams, enc: &Encoded, labels: &[u8]) -> Result<f64, EmptyContract> {
    Ok(crf::nll(&emissions(p, enc)?, &p.transitions(), labels))
}

/// Output layers for next/previous-token prediction during optional
/// pretraining of the token-level bi-LSTM. Not part of the saved model.
#[derive(Debug, Clone)]
pub struct LmHead {
    pub fwd_w: Vec<f64>,
    pub fwd_b: Vec<f64>,
    pub bwd_w: Vec<f64>,
    pub bwd_b: Vec<f64>,
}

impl LmHead {
    pub fn init(dims: &Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a2b);
        let s = 1.0 / (dims.hidden1 as f64).sqrt();
        let mut w = || (0..dims.vocab * dims.hidden1).map(|_| rng.gen_range(-s..s)).collect::<Vec<_>>();
        let fwd_w = w();
        let bwd_w = w();
        LmHead { fwd_w, fwd_b: vec![0.0; dims.vocab], bwd_w, bwd_b: vec![0.0; dims.vocab] }
    }

    pub fn zeros_like(&self) -> Self {
        LmHead {
            fwd_w: vec![0.0; self.fwd_w.len()],
            fwd_b: vec![0.0; self.fwd_b.len()],
            bwd_w: vec![0.0; self.bwd_w.len()],
            bwd_b: vec![0.0; self.bwd_b.len()],
        }
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.fwd_w.iter_mut().chain(&mut self.fwd_b).chain(&mut self.bwd_w).chain(&mut self.bwd_b)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.fwd_w.iter().chain(&self.fwd_b).chain(&self.bwd_w).chain(&self.bwd_b)
    }
}

/// Summed cross-entropy of predicting each next token from the forward
/// state and each previous token from the backward state.
pub fn lm_loss_and_grad(
    p: &FsiParams,
    head: &LmHead,
    enc: &Encoded,
    grad: &mut FsiParams,
    head_grad: &mut LmHead,
) -> Result<f64, EmptyContract> {
    let fp = forward(p, enc)?;
    let (v, h1) = (p.dims.vocab, p.dims.hidden1);
    let n = enc.ids.len();
    let mut dhf = vec![0.0; n * h1];
    let mut dhb = vec![0.0; n * h1];
    let mut total = 0.0;
    let mut logits = vec![0.0; v];
    for pos in 0..n {
        let (hf, hb) = fp.token_states(pos);
        let targets = [(pos + 1 < n).then(|| enc.ids.get(pos + 1).copied()).flatten(), pos.checked_sub(1).map(|q| enc.ids[q])];
        for (dir, target) in targets.into_iter().enumerate() {
            let Some(t) = target else { continue };
            let (w, b, hs, gw, gb, dh) = if dir == 0 {
                (&head.fwd_w, &head.fwd_b, hf, &mut head_grad.fwd_w, &mut head_grad.fwd_b, &mut dhf)
            } else {
                (&head.bwd_w, &head.bwd_b, hb, &mut head_grad.bwd_w, &mut head_grad.bwd_b, &mut dhb)
            };
            logits.copy_from_slice(b);
            gemv_acc(w, hs, &mut logits);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let lz = m + z.ln();
            total += lz - logits[t as usize];
            let mut dl: Vec<f64> = logits.iter().map(|l| (l - lz).exp()).collect();
            dl[t as usize] -= 1.0;
            for (a, c) in gb.iter_mut().zip(&dl) {
                *a += c;
            }
            let dh_row = &mut dh[pos * h1..(pos + 1) * h1];
            gemv_back(w, hs, &dl, gw, dh_row);
        }
    }
    let zero_em = vec![[0.0; 2]; enc.blocks.len()];
    backward(p, enc, &fp, &zero_em, Some((&dhf, &dhb)), grad);
    Ok(total)
}
