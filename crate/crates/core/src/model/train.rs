//! Mini-batch training with momentum, norm clipping and plateau decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::net::{self, Dims, FsiParams, LmHead};
use super::token::{Encoded, Vocab};
use super::FsiModel;
use crate::config::{ConfigError, KeyValues};

/// One training contract: encoded blocks and their 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub enc: Encoded,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub embed: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    /// Relative improvement below which the epoch counts as a plateau.
    pub plateau_tol: f64,
    pub token_cap: usize,
    pub pretrain: bool,
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            embed: 32,
            hidden1: 64,
            hidden2: 64,
            epochs: 20,
            batch: 8,
            lr: 0.01,
            momentum: 0.9,
            clip: 5.0,
            plateau_tol: 1e-3,
            token_cap: 50_000,
            pretrain: false,
            pretrain_epochs: 2,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "embed",
    "hidden1",
    "hidden2",
    "epochs",
    "batch",
    "lr",
    "momentum",
    "clip",
    "plateau_tol",
    "token_cap",
    "pretrain",
    "pretrain_epochs",
];

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        kv.reject_unknown(KEYS)?;
        let mut c = TrainConfig::default();
        kv.apply("seed", &mut c.seed)?;
        kv.apply("embed", &mut c.embed)?;
        kv.apply("hidden1", &mut c.hidden1)?;
        kv.apply("hidden2", &mut c.hidden2)?;
        kv.apply("epochs", &mut c.epochs)?;
        kv.apply("batch", &mut c.batch)?;
        kv.apply("lr", &mut c.lr)?;
        kv.apply("momentum", &mut c.momentum)?;
        kv.apply("clip", &mut c.clip)?;
        kv.apply("plateau_tol", &mut c.plateau_tol)?;
        kv.apply("token_cap", &mut c.token_cap)?;
        kv.apply("pretrain", &mut c.pretrain)?;
        kv.apply("pretrain_epochs", &mut c.pretrain_epochs)?;
        c.check()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "seed = {}\nembed = {}\nhidden1 = {}\nhidden2 = {}\nepochs = {}\nbatch = {}\nlr = {}\nmomentum = {}\nclip = {}\nplateau_tol = {}\ntoken_cap = {}\npretrain = {}\npretrain_epochs = {}\n",
            self.seed,
            self.embed,
            self.hidden1,
            self.hidden2,
            self.epochs,
            self.batch,
            self.lr,
            self.momentum,
            self.clip,
            self.plateau_tol,
            self.token_cap,
            self.pretrain,
            self.pretrain_epochs
        )
    }

    fn check(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: &str| Err(ConfigError::Range { key: key.into(), msg: msg.into() });
        if self.embed == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return bad("embed", "dimensions must be positive");
        }
        if self.batch == 0 {
            return bad("batch", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if !(self.clip > 0.0) {
            return bad("clip", "must be positive");
        }
        if self.token_cap == 0 {
            return bad("token_cap", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("loss diverged at epoch {epoch}")]
    DivergedTraining { epoch: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean per-contract loss of each supervised epoch.
    pub loss: Vec<f64>,
    /// Mean per-contract LM loss of each pretraining epoch.
    pub pretrain_loss: Vec<f64>,
    pub final_lr: f64,
}

/// Momentum SGD state over a flat parameter vector.
struct Sgd {
    velocity: Vec<f64>,
    lr: f64,
    momentum: f64,
    clip: f64,
}

impl Sgd {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Sgd { velocity: vec![0.0; n], lr: cfg.lr, momentum: cfg.momentum, clip: cfg.clip }
    }

    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grad: &[f64]) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let s = if norm > self.clip { self.clip / norm } else { 1.0 };
        for ((p, v), g) in params.zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + s * g;
            *p -= self.lr * *v;
        }
    }
}

/// Sum of per-item gradients, reduced in item order so results do not
/// depend on thread scheduling.
fn batch_grad<T: Sync, G: Send>(
    items: &[&T],
    f: impl Fn(&T) -> (f64, G) + Sync,
    mut add: impl FnMut(&mut Vec<f64>, &G),
    n: usize,
) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, G)> = items.par_iter().map(|t| f(t)).collect();
    let mut total = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        add(&mut total, g);
    }
    (loss, total)
}

fn add_params(acc: &mut Vec<f64>, g: &FsiParams) {
    for (a, b) in acc.iter_mut().zip(g.values()) {
        *a += b;
    }
}

pub fn train(vocab: Vocab, data: &[LabeledSequence], cfg: &TrainConfig) -> Result<(FsiModel, TrainHistory), TrainError> {
    cfg.check()?;
    let data: Vec<LabeledSequence> = data
        .iter()
        .filter(|s| !s.enc.is_empty())
        .map(|s| {
            let enc = s.enc.truncated(cfg.token_cap);
            let labels = s.labels[..enc.len()].to_vec();
            LabeledSequence { enc, labels }
        })
        .collect();
    if data.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let dims = Dims { vocab: vocab.len(), embed: cfg.embed, hidden1: cfg.hidden1, hidden2: cfg.hidden2 };
    let mut params = FsiParams::init(dims, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let n_params = params.num_params();

    if cfg.pretrain {
        let mut head = LmHead::init(&dims, cfg.seed);
        let n_head = head.values().count();
        let mut opt = Sgd::new(n_params + n_head, cfg);
        for epoch in 0..cfg.pretrain_epochs {
            let mut order: Vec<&LabeledSequence> = data.iter().collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let (loss, mut g) = batch_grad(
                    chunk,
                    |s| {
                        let mut g = params.zeros_like();
                        let mut hg = head.zeros_like();
                        let l = net::lm_loss_and_grad(&params, &head, &s.enc, &mut g, &mut hg).expect("nonempty");
                        (l / s.enc.ids.len() as f64, (g, hg))
                    },
                    |acc, (g, hg)| {
                        for (a, b) in acc.iter_mut().zip(g.values().chain(hg.values())) {
                            *a += b;
                        }
                    },
                    n_params + n_head,
                );
                g.iter_mut().for_each(|v| *v /= chunk.len() as f64);
                opt.step(params.values_mut().chain(head.values_mut()), &g);
                total += loss;
            }
            let mean = total / data.len() as f64;
            if !mean.is_finite() || !params.is_finite() {
                return Err(TrainError::DivergedTraining { epoch });
            }
            history.pretrain_loss.push(mean);
        }
    }

    let mut opt = Sgd::new(n_params, cfg);
    let mut best = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<&LabeledSequence> = data.iter().collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let (loss, mut g) = batch_grad(
                chunk,
                |s| {
                    let mut g = params.zeros_like();
                    let l = net::loss_and_grad(&params, &s.enc, &s.labels, &mut g).expect("nonempty");
                    (l, g)
                },
                add_params,
                n_params,
            );
            g.iter_mut().for_each(|v| *v /= chunk.len() as f64);
            opt.step(params.values_mut(), &g);
            total += loss;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(TrainError::DivergedTraining { epoch });
        }
        history.loss.push(mean);
        if mean > best - cfg.plateau_tol * best.abs() {
            opt.lr *= 0.5;
        }
        best = best.min(mean);
    }
    history.final_lr = opt.lr;
    Ok((FsiModel { params, vocab }, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_checks() {
        let c = TrainConfig { seed: 3, epochs: 4, pretrain: true, lr: 0.02, ..Default::default() };
        assert_eq!(TrainConfig::parse(&c.to_kv()).unwrap(), c);
        assert!(matches!(TrainConfig::parse("lr = 0"), Err(ConfigError::Range { .. })));
        assert!(matches!(TrainConfig::parse("bogus = 1"), Err(ConfigError::Unknown(_))));
        assert!(matches!(TrainConfig::parse("epochs = many"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn empty_corpus_rejected() {
        let vocab = Vocab::from_tokens(vec![super::super::token::UNK.into()]).unwrap();
        assert_eq!(train(vocab, &[], &TrainConfig::default()).unwrap_err(), TrainError::EmptyCorpus);
    }
}
