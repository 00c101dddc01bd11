//! Mini-batch Adam training with a step learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::AnnotatedSample;
use crate::embeddings::EmbeddingTable;
use crate::error::{config_err, input_err, Error, Result};
use crate::loss::{LossWeights, MaskPyramid};
use crate::model::{ModelConfig, SegmentationModel};
use crate::tensor::Volume;
use crate::textenc::{embed_sentence, SentenceMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Iterations between learning-rate drops.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Frames per input clip, centered on the annotated frame.
    pub clip_len: usize,
    pub seed: u64,
    /// Per-resolution loss weights, lowest resolution first.
    pub alphas: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay_every: 800,
            decay_factor: 10.0,
            iterations: 2000,
            batch_size: 2,
            clip_len: 4,
            seed: 7,
            alphas: vec![1.0, 1.0, 1.0],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<LossWeights> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!(
                "learning rate must be positive, got {}",
                self.lr
            ));
        }
        if self.decay_every == 0 || !(self.decay_factor >= 1.0) {
            return Err(config_err!(
                "decay_every must be positive and decay_factor at least 1"
            ));
        }
        if self.batch_size == 0 || self.clip_len == 0 {
            return Err(config_err!("batch_size and clip_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(config_err!(
                "Adam needs betas in [0, 1) and a positive epsilon"
            ));
        }
        if self.alphas.len() != model.resolutions.len() {
            return Err(config_err!(
                "{} loss weights for {} resolutions",
                self.alphas.len(),
                model.resolutions.len()
            ));
        }
        LossWeights::new(self.alphas.clone())
    }

    /// Step schedule: `lr / decay_factor^(iter / decay_every)`.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        self.lr / self.decay_factor.powi((iter / self.decay_every) as i32)
    }
}

/// First and second moment estimates, one vector per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &SegmentationModel<f32>) -> Self {
        let shapes: Vec<Vec<f32>> = model
            .blocks()
            .iter()
            .map(|(_, b)| vec![0.0; b.len()])
            .collect();
        Self {
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn update(
        &mut self,
        model: &mut SegmentationModel<f32>,
        grad: &SegmentationModel<f32>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps_hat = (cfg.epsilon * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((_, p), (_, g)), (m, v)) in model
            .blocks_mut()
            .into_iter()
            .zip(grad.blocks())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= step_size * m[k] / (v[k].sqrt() + eps_hat);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

pub const LOSS_LOG_HEADER: [&str; 3] = ["iter", "lr", "loss"];

/// Writes records as `iter,lr,loss` CSV; `header` is false when appending.
pub fn write_loss_log<W: std::io::Write>(
    out: W,
    records: &[LossRecord],
    header: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if header {
        w.write_record(LOSS_LOG_HEADER)?;
    }
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<loss log>", e))
}

pub fn read_loss_log<R: std::io::Read>(input: R) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(LOSS_LOG_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be {}", LOSS_LOG_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |what: &str| Error::Parse {
            line,
            msg: format!("bad {what}"),
        };
        if rec.len() != 3 {
            return Err(bad("row length"));
        }
        out.push(LossRecord {
            iteration: rec[0].parse().map_err(|_| bad("iteration"))?,
            lr: rec[1].parse().map_err(|_| bad("learning rate"))?,
            loss: rec[2].parse().map_err(|_| bad("loss"))?,
        });
    }
    Ok(out)
}

/// A sample with its sentence, input window and target pyramid precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sentence: SentenceMatrix,
    pub clip: Volume<f32>,
    pub target: MaskPyramid,
}

pub fn prepare(
    samples: &[AnnotatedSample],
    config: &ModelConfig,
    table: &EmbeddingTable,
    clip_len: usize,
) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let clip = s.clip(config.stream);
            if clip.size() != config.canvas() {
                return Err(config_err!(
                    "clip {} is {}x{} but the model expects {}",
                    s.video_id,
                    clip.size(),
                    clip.size(),
                    config.canvas()
                ));
            }
            Ok(Prepared {
                sentence: embed_sentence(&s.sentence, table, config.l_max)?,
                clip: clip.window(s.center(), clip_len).frames,
                target: MaskPyramid::from_mask(&s.gt_mask, &config.resolutions)?,
            })
        })
        .collect()
}

/// Model state after (or during) training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: SegmentationModel<f32>,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate(&model_config)?;
        let model = SegmentationModel::new(model_config, config.seed)?;
        Ok(Self {
            optimizer: Adam::new(&model),
            model,
            config,
            iteration: 0,
        })
    }
}

fn per_sample(
    model: &SegmentationModel<f32>,
    batch: &[&Prepared],
    weights: &LossWeights,
) -> Result<Vec<(f32, SegmentationModel<f32>)>> {
    let run = |p: &&Prepared| model.loss_and_grad(&p.sentence, &p.clip, &p.target, weights);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(run).collect()
    }
}

/// Name of the block holding the largest (or first non-finite) gradient entry.
fn worst_block(grad: &SegmentationModel<f32>) -> String {
    let mut best = (String::new(), -1.0f32);
    for (name, g) in grad.blocks() {
        for &x in g.iter() {
            let mag = if x.is_finite() {
                x.abs()
            } else {
                f32::INFINITY
            };
            if mag > best.1 {
                best = (name.clone(), mag);
            }
        }
    }
    best.0
}

/// Runs `state.config.iterations - state.iteration` further iterations.
///
/// Batches are drawn by shuffling the training set each epoch; per-sample
/// gradients are summed in batch order so results do not depend on the
/// thread count.
pub fn train(
    state: &mut TrainState,
    data: &[Prepared],
    mut observe: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(input_err!("training set is empty"));
    }
    let weights = state.config.validate(&state.model.config)?;
    let cfg = state.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut next_batch = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut out = Vec::with_capacity(cfg.batch_size);
        while out.len() < cfg.batch_size {
            if cursor == data.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            out.push(order[cursor]);
            cursor += 1;
        }
        out
    };
    // replay the permutation stream so a resumed run sees the same batches
    for _ in 0..state.iteration {
        next_batch(&mut rng);
    }

    let mut log = Vec::new();
    while state.iteration < cfg.iterations {
        let idx = next_batch(&mut rng);
        let batch: Vec<&Prepared> = idx.iter().map(|&k| &data[k]).collect();
        let results = per_sample(&state.model, &batch, &weights)?;
        let mut grad = state.model.zeros_like();
        let mut loss = 0.0f64;
        let scale = 1.0 / batch.len() as f32;
        for (l, g) in &results {
            loss += *l as f64;
            grad.add_scaled(g, scale);
        }
        loss /= batch.len() as f64;
        let finite = loss.is_finite()
            && grad
                .blocks()
                .iter()
                .all(|(_, g)| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at iteration {}; largest gradient in {}",
                state.iteration,
                worst_block(&grad)
            )));
        }
        let lr = cfg.learning_rate(state.iteration);
        state.optimizer.update(&mut state.model, &grad, lr, &cfg);
        let rec = LossRecord {
            iteration: state.iteration,
            lr,
            loss,
        };
        observe(&rec);
        log.push(rec);
        state.iteration += 1;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, ShapeWorldSpec, Split};
    use crate::decoder::ResolutionSet;
    use crate::videoenc::ConvSpec;

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            l_max: 6,
            resolutions: ResolutionSet::new(vec![2, 8, 32]).unwrap(),
            video_stack: vec![
                ConvSpec {
                    kernel: [3, 3, 3],
                    stride: [1, 2, 2],
                    channels: 8,
                },
                ConvSpec {
                    kernel: [3, 3, 3],
                    stride: [2, 2, 2],
                    channels: 8,
                },
                ConvSpec {
                    kernel: [1, 3, 3],
                    stride: [1, 2, 2],
                    channels: 8,
                },
                ConvSpec {
                    kernel: [1, 3, 3],
                    stride: [1, 2, 2],
                    channels: 8,
                },
            ],
            decoder_widths: vec![8, 4],
            ..Default::default()
        }
    }

    fn tiny_world() -> ShapeWorldSpec {
        ShapeWorldSpec {
            canvas: 32,
            frames: 4,
            max_actors: 1,
            min_half: 4.0,
            max_half: 5.0,
            speed: 1.0,
            growth: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_drops_by_factor() {
        let c = TrainConfig {
            lr: 1e-3,
            decay_every: 10,
            decay_factor: 10.0,
            ..Default::default()
        };
        assert_eq!(c.learning_rate(0), 1e-3);
        assert_eq!(c.learning_rate(9), 1e-3);
        assert!((c.learning_rate(10) - 1e-4).abs() < 1e-18);
        assert!((c.learning_rate(25) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut m = SegmentationModel::<f32>::new(tiny_model(), 1).unwrap();
        let before = m.clone();
        let mut g = m.zeros_like();
        g.text.bias.iter_mut().for_each(|x| *x = 0.3);
        let mut adam = Adam::new(&m);
        adam.update(&mut m, &g, 1e-3, &cfg);
        for (a, b) in m.text.bias.iter().zip(&before.text.bias) {
            assert!(((b - a) - 1e-3).abs() < 1e-6);
        }
        assert_eq!(m.text.weight, before.text.weight);
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let table = EmbeddingTable::empty(8, 0).unwrap();
        let samples = generate(&tiny_world(), Split::Train, 8).unwrap();
        let cfg = TrainConfig {
            iterations: 30,
            batch_size: 2,
            clip_len: 2,
            lr: 3e-3,
            ..Default::default()
        };
        let data = prepare(&samples, &tiny_model(), &table, cfg.clip_len).unwrap();
        let run = || {
            let mut s = TrainState::new(tiny_model(), cfg.clone()).unwrap();
            let log = train(&mut s, &data, |_| {}).unwrap();
            (s, log)
        };
        let (a, log) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        let head: f64 = log[..5].iter().map(|r| r.loss).sum();
        let tail: f64 = log[25..].iter().map(|r| r.loss).sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let table = EmbeddingTable::empty(8, 0).unwrap();
        let samples = generate(&tiny_world(), Split::Train, 5).unwrap();
        let cfg = TrainConfig {
            iterations: 6,
            batch_size: 2,
            clip_len: 2,
            ..Default::default()
        };
        let data = prepare(&samples, &tiny_model(), &table, cfg.clip_len).unwrap();
        let mut full = TrainState::new(tiny_model(), cfg.clone()).unwrap();
        train(&mut full, &data, |_| {}).unwrap();
        let mut part = TrainState::new(
            tiny_model(),
            TrainConfig {
                iterations: 3,
                ..cfg.clone()
            },
        )
        .unwrap();
        train(&mut part, &data, |_| {}).unwrap();
        part.config.iterations = 6;
        train(&mut part, &data, |_| {}).unwrap();
        assert_eq!(part.model, full.model);
    }

    #[test]
    fn nan_aborts_with_block_name() {
        let table = EmbeddingTable::empty(8, 0).unwrap();
        let samples = generate(&tiny_world(), Split::Train, 2).unwrap();
        let cfg = TrainConfig {
            iterations: 1,
            clip_len: 2,
            ..Default::default()
        };
        let data = prepare(&samples, &tiny_model(), &table, 2).unwrap();
        let mut s = TrainState::new(tiny_model(), cfg).unwrap();
        s.model.video.layers[0].bias[0] = f32::NAN;
        match train(&mut s, &data, |_| {}) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("largest gradient in"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_alpha_count_is_config_error() {
        let cfg = TrainConfig {
            alphas: vec![1.0],
            ..Default::default()
        };
        assert!(matches!(
            cfg.validate(&ModelConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_log_round_trip() {
        let recs = vec![
            LossRecord {
                iteration: 0,
                lr: 1e-3,
                loss: 2.0794415416798357,
            },
            LossRecord {
                iteration: 1,
                lr: 1e-4,
                loss: 0.1,
            },
        ];
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &recs, true).unwrap();
        assert!(buf.starts_with(b"iter,lr,loss\n0,0.001,"));
        assert_eq!(read_loss_log(buf.as_slice()).unwrap(), recs);
        assert!(read_loss_log("it,lr,loss\n".as_bytes()).is_err());
    }
}
