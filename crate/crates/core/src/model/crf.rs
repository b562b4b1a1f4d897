//! Two-label linear-chain CRF: partition function, NLL with gradients,
//! posterior marginals and Viterbi decoding, all in log space.
//!
//! A path `y` scores `Σ_k em[k][y_k] + Σ_{k>0} trans[y_{k-1}][y_k]`.

pub type Emissions = [f64; 2];
pub type Transitions = [[f64; 2]; 2];

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn path_score(em: &[Emissions], trans: &Transitions, labels: &[u8]) -> f64 {
    let mut s = 0.0;
    for (k, (&y, e)) in labels.iter().zip(em).enumerate() {
        s += e[y as usize];
        if k > 0 {
            s += trans[labels[k - 1] as usize][y as usize];
        }
    }
    s
}

/// Forward (`alpha`) and backward (`beta`) log messages and `log Z`.
pub struct Lattice {
    pub alpha: Vec<Emissions>,
    pub beta: Vec<Emissions>,
    pub log_z: f64,
}

pub fn lattice(em: &[Emissions], trans: &Transitions) -> Lattice {
    let n = em.len();
    let mut alpha = vec![[0.0; 2]; n];
    let mut beta = vec![[0.0; 2]; n];
    if n == 0 {
        return Lattice { alpha, beta, log_z: 0.0 };
    }
    alpha[0] = em[0];
    for k in 1..n {
        for y in 0..2 {
            alpha[k][y] = em[k][y] + lse2(alpha[k - 1][0] + trans[0][y], alpha[k - 1][1] + trans[1][y]);
        }
    }
    for k in (0..n - 1).rev() {
        for y in 0..2 {
            beta[k][y] = lse2(trans[y][0] + em[k + 1][0] + beta[k + 1][0], trans[y][1] + em[k + 1][1] + beta[k + 1][1]);
        }
    }
    let log_z = lse2(alpha[n - 1][0], alpha[n - 1][1]);
    Lattice { alpha, beta, log_z }
}

pub fn nll(em: &[Emissions], trans: &Transitions, labels: &[u8]) -> f64 {
    assert_eq!(em.len(), labels.len(), "emission and label lengths differ");
    lattice(em, trans).log_z - path_score(em, trans, labels)
}

/// Posterior probability of label 1 for every position.
pub fn marginals(em: &[Emissions], trans: &Transitions) -> Vec<f64> {
    let l = lattice(em, trans);
    (0..em.len()).map(|k| (l.alpha[k][1] + l.beta[k][1] - l.log_z).exp()).collect()
}

/// NLL together with its gradients w.r.t. emissions and transitions.
pub fn nll_grad(em: &[Emissions], trans: &Transitions, labels: &[u8]) -> (f64, Vec<Emissions>, Transitions) {
    assert_eq!(em.len(), labels.len(), "emission and label lengths differ");
    let l = lattice(em, trans);
    let n = em.len();
    let mut d_em = vec![[0.0; 2]; n];
    let mut d_tr = [[0.0; 2]; 2];
    for k in 0..n {
        for y in 0..2 {
            d_em[k][y] = (l.alpha[k][y] + l.beta[k][y] - l.log_z).exp();
        }
        d_em[k][labels[k] as usize] -= 1.0;
        if k > 0 {
            for a in 0..2 {
                for b in 0..2 {
                    d_tr[a][b] += (l.alpha[k - 1][a] + trans[a][b] + em[k][b] + l.beta[k][b] - l.log_z).exp();
                }
            }
            d_tr[labels[k - 1] as usize][labels[k] as usize] -= 1.0;
        }
    }
    (l.log_z - path_score(em, trans, labels), d_em, d_tr)
}

/// Highest-scoring label sequence; ties go to label 0.
pub fn viterbi(em: &[Emissions], trans: &Transitions) -> Vec<u8> {
    let n = em.len();
    if n == 0 {
        return Vec::new();
    }
    let mut score = em[0];
    let mut back = vec![[0u8; 2]; n];
    for k in 1..n {
        let mut next = [0.0; 2];
        for y in 0..2 {
            let from0 = score[0] + trans[0][y];
            let from1 = score[1] + trans[1][y];
            let (best, arg) = if from1 > from0 { (from1, 1) } else { (from0, 0) };
            next[y] = best + em[k][y];
            back[k][y] = arg;
        }
        score = next;
    }
    let mut y = if score[1] > score[0] { 1u8 } else { 0u8 };
    let mut out = vec![0u8; n];
    for k in (0..n).rev() {
        out[k] = y;
        y = back[k][y as usize];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_closed_form() {
        let (a, b) = (0.3, -1.2);
        let loss = nll(&[[a, b]], &[[0.0; 2]; 2], &[0]);
        assert!((loss - ((a.exp() + b.exp()).ln() - a)).abs() < 1e-12);
        assert_eq!(viterbi(&[[a, b]], &[[0.0; 2]; 2]), vec![0]);
        assert_eq!(viterbi(&[[b, a]], &[[0.0; 2]; 2]), vec![1]);
    }

    #[test]
    fn uniform_is_log2_per_block() {
        let em = vec![[0.5, 0.5]; 7];
        let loss = nll(&em, &[[0.0; 2]; 2], &[1, 0, 1, 1, 0, 0, 1]);
        assert!((loss - 7.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(viterbi(&em, &[[0.0; 2]; 2]), vec![0; 7], "ties go to 0");
    }

    #[test]
    fn zero_transitions_factorise() {
        let em = [[0.2, 1.0], [-0.4, 0.1], [2.0, -3.0]];
        let m = marginals(&em, &[[0.0; 2]; 2]);
        for (k, e) in em.iter().enumerate() {
            let soft = e[1].exp() / (e[0].exp() + e[1].exp());
            assert!((m[k] - soft).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence() {
        assert!(viterbi(&[], &[[0.0; 2]; 2]).is_empty());
        assert_eq!(nll(&[], &[[0.0; 2]; 2], &[]), 0.0);
    }
}
