//! Single-threaded training loop over compiled corpus items, plus
//! teacher-forced evaluation of symbol-word accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densedata::{compile_item, CorpusItem, DataError, Vocab};
use crate::model::{Model, ModelError};
use crate::numkit::{Adam, Real};

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub decode_rate: f64,
    /// Frames retained per item: last `frame_cap` seconds at 1 fps.
    pub frame_cap: usize,
    pub shuffle_seed: u64,
    /// Record one loss-curve point every this many steps.
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 1e-3,
            decode_rate: 1.0,
            frame_cap: 8,
            shuffle_seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
}

/// One optimizer step per item, items reshuffled each epoch. Returns the
/// loss curve (running mean over each logging window).
pub fn train<T: Real>(
    model: &mut Model<T>,
    vocab: &Vocab,
    items: &[CorpusItem],
    opts: &TrainOptions,
) -> Result<Vec<CurvePoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut opt = Adam::new(&model.store, T::from_f64(opts.lr));
    let mut curve = Vec::new();
    let mut window_sum = 0.0;
    let mut window_n = 0usize;
    let mut step = 0usize;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let item = compile_item(vocab, &items[i], opts.decode_rate, opts.frame_cap)?;
            let out = model.loss_and_grad(
                &item.inputs,
                &item.frames,
                &item.targets,
                &item.loss_mask,
            )?;
            opt.step(&mut model.store, &[]);
            model.store.zero_grads();
            step += 1;
            window_sum += out.loss;
            window_n += 1;
            if step % opts.log_every == 0 {
                curve.push(CurvePoint {
                    step,
                    loss: window_sum / window_n as f64,
                });
                window_sum = 0.0;
                window_n = 0;
            }
        }
    }
    if window_n > 0 {
        curve.push(CurvePoint {
            step,
            loss: window_sum / window_n as f64,
        });
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
}

impl AccuracyReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Teacher-forced accuracy over answer positions whose target is a symbol
/// word: does the argmax over the full vocabulary name the right symbol?
pub fn symbol_accuracy<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    items: &[CorpusItem],
    decode_rate: f64,
    frame_cap: usize,
) -> Result<AccuracyReport> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for item in items {
        let ti = compile_item(vocab, item, decode_rate, frame_cap)?;
        let encoded: Vec<crate::model::FrameTokens<T>> = ti
            .frames
            .iter()
            .map(|(f, t)| model.encode_frame(f, *t))
            .collect::<std::result::Result<_, _>>()?;
        let logits = model.forward(&ti.inputs, &encoded)?;
        for i in 0..ti.targets.len() {
            if !ti.loss_mask[i] || ti.target_symbols[i].is_none() {
                continue;
            }
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            total += 1;
            if best as u32 == ti.targets[i] {
                correct += 1;
            }
        }
    }
    Ok(AccuracyReport { correct, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densedata::{generate, GenConfig};
    use crate::model::ModelConfig;

    #[test]
    fn short_training_run_reduces_loss() {
        let vocab = Vocab::new();
        let mut cfg = ModelConfig::tiny(vocab.len());
        cfg.symbol_table_size = crate::densedata::N_SYMBOLS;
        let mut model: Model<f32> = Model::init(cfg, 1).unwrap();
        let items = generate(&GenConfig { n_items: 60, ..Default::default() }, 9).unwrap();
        let opts = TrainOptions {
            epochs: 2,
            log_every: 30,
            ..Default::default()
        };
        let curve = train(&mut model, &vocab, &items, &opts).unwrap();
        assert!(curve.len() >= 2);
        assert!(curve.last().unwrap().loss < curve.first().unwrap().loss);
        let acc = symbol_accuracy(&model, &vocab, &items[..20], 1.0, 8).unwrap();
        assert!(acc.total > 0);
    }
}
