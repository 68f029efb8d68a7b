//! End-to-end training: seeded shuffling, adaptive sensing through the live
//! W_φ, Charbonnier objective with the orthogonality penalty, Adam updates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::checkpoint;
use crate::error::{CsError, Result};
use crate::loss::{loss_ortho, loss_recon, loss_total};
use crate::model::Network;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_o: f64,
    pub eps_charb: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            epochs: 200,
            lambda_o: 0.01,
            eps_charb: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(CsError::parameter("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(CsError::parameter("batch size and epochs must be positive"));
        }
        if self.lambda_o < 0.0 || !self.lambda_o.is_finite() {
            return Err(CsError::parameter("lambda must be nonnegative"));
        }
        if self.eps_charb <= 0.0 {
            return Err(CsError::parameter("charbonnier epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub ortho: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochLoss>,
    pub optimizer: Adam,
}

/// Train in place over `corpus` (each row one flattened block in [0,1]).
/// On a non-finite loss the current state is dumped to `diagnostic` (when
/// given) and a numeric error is returned. `on_epoch` observes the network
/// and the loss row after every epoch, e.g. to persist interim checkpoints.
pub fn train(
    net: &mut Network,
    corpus: &[Vec<f64>],
    cfg: &TrainConfig,
    diagnostic: Option<&Path>,
    mut on_epoch: impl FnMut(&Network, &EpochLoss),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_p = net.config.n_p();
    if corpus.is_empty() {
        return Err(CsError::data("training corpus is empty"));
    }
    if corpus.len() < cfg.batch_size {
        return Err(CsError::data(format!(
            "corpus holds {} blocks, batch size {} needs at least that many",
            corpus.len(),
            cfg.batch_size
        )));
    }
    if let Some(bad) = corpus.iter().position(|b| b.len() != n_p) {
        return Err(CsError::dimension(format!(
            "corpus block {bad} has {} values, model expects {n_p}",
            corpus[bad].len()
        )));
    }

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                break;
            }
            let mut data = Vec::with_capacity(chunk.len() * n_p);
            for &i in chunk {
                data.extend_from_slice(&corpus[i]);
            }
            let x = Tensor::from_vec(&[chunk.len(), n_p], data)?;

            let step = step_batch(net, &x, cfg);
            let (l_total, l_recon, l_ortho, grads_applied) = match step {
                Ok(v) => v,
                Err(err) => {
                    if let Some(path) = diagnostic {
                        let _ = checkpoint::save(path, net, Some(&adam), epoch, &history);
                    }
                    return Err(err);
                }
            };
            debug_assert!(grads_applied);
            adam.step(net.params_mut())?;

            sums.0 += l_total;
            sums.1 += l_recon;
            sums.2 += l_ortho;
            batches += 1;
        }
        if batches == 0 {
            return Err(CsError::data("corpus yields no full batch"));
        }
        let row = EpochLoss {
            epoch,
            total: sums.0 / batches as f64,
            recon: sums.1 / batches as f64,
            ortho: sums.2 / batches as f64,
        };
        on_epoch(net, &row);
        history.push(row);
    }

    Ok(TrainOutcome {
        history,
        optimizer: adam,
    })
}

/// One forward/backward on a batch; loads gradients into the parameters.
/// With lambda zero the symmetry path is never built, so no orthogonality
/// gradient can leak into the update.
fn step_batch(
    net: &mut Network,
    x: &Tensor,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64, bool)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let xn = tape.constant(x.clone());
    let y = net.measure_bound(&mut tape, &bound, xn)?;
    let sym_eps = (cfg.lambda_o > 0.0).then_some(cfg.eps_charb);
    let f = net.forward_bound(&mut tape, &bound, y, Mode::Train, sym_eps)?;

    let l_r = loss_recon(&mut tape, f.x_hat, xn, cfg.eps_charb)?;
    let (l_t, ortho_val) = if cfg.lambda_o > 0.0 {
        let l_o = loss_ortho(&mut tape, &f.sym)?;
        let t = loss_total(&mut tape, l_r, l_o, cfg.lambda_o)?;
        (t, tape.value(l_o).data()[0])
    } else {
        (l_r, 0.0)
    };
    let total_val = tape.value(l_t).data()[0];
    let recon_val = tape.value(l_r).data()[0];
    if !total_val.is_finite() {
        return Err(CsError::Numeric(format!(
            "loss became non-finite (total {total_val}, recon {recon_val})"
        )));
    }

    let grads = tape.backward(l_t)?;
    for p in net.params_mut() {
        match grads.by_name(&p.name) {
            Some(g) => p.grad = g.clone(),
            None => p.zero_grad(),
        }
    }
    Ok((total_val, recon_val, ortho_val, true))
}
