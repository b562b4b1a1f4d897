//! Analytic gradients of the labeler loss against central differences
//! over every parameter.

use evmfunc::model::net::{loss, loss_and_grad, Dims, FsiParams};
use evmfunc::model::Encoded;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(rng: &mut ChaCha8Rng, vocab: usize) -> (Encoded, Vec<u8>) {
    let n_blocks = rng.gen_range(1..=4);
    let mut ids = Vec::new();
    let mut blocks = Vec::new();
    for _ in 0..n_blocks {
        let start = ids.len();
        for _ in 0..rng.gen_range(1..=4) {
            ids.push(rng.gen_range(0..vocab as u32));
        }
        blocks.push(start..ids.len());
    }
    let entries = blocks.iter().map(|r| r.start as u32).collect();
    let labels = (0..n_blocks).map(|_| rng.gen_range(0..2)).collect();
    (Encoded { ids, blocks, entries }, labels)
}

/// Largest relative error over all parameters.
fn worst_error(p: &mut FsiParams, enc: &Encoded, labels: &[u8]) -> f64 {
    let mut g = p.zeros_like();
    loss_and_grad(p, enc, labels, &mut g).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..p.tensors.len() {
        for k in 0..p.tensors[t].data.len() {
            let orig = p.tensors[t].data[k];
            p.tensors[t].data[k] = orig + eps;
            let up = loss(p, enc, labels).unwrap();
            p.tensors[t].data[k] = orig - eps;
            let dn = loss(p, enc, labels).unwrap();
            p.tensors[t].data[k] = orig;
            let num = (up - dn) / (2.0 * eps);
            let ana = g.tensors[t].data[k];
            worst = worst.max((ana - num).abs() / (ana.abs() + num.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn analytic_matches_numeric_at_small_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ad);
    let vocab = 12;
    for i in 0..20 {
        let dims = Dims { vocab, embed: 8, hidden1: 8, hidden2: 8 };
        let mut p = FsiParams::init(dims, i);
        let (enc, labels) = random_instance(&mut rng, vocab);
        let e = worst_error(&mut p, &enc, &labels);
        assert!(e <= 1e-4, "instance {i}: relative error {e}");
    }
}
