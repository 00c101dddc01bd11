//! Browser bindings: render a shape world, train a small model on it, and
//! segment the actor a typed sentence refers to.

use std::sync::Arc;

use actseg::data::{generate, nth_video, ShapeWorldSpec, Split, Video};
use actseg::decoder::{predict_mask, ResolutionSet};
use actseg::embeddings::EmbeddingTable;
use actseg::inference::{Scorer, Segmenter};
use actseg::metrics::iou;
use actseg::model::ModelConfig;
use actseg::tensor::Mask;
use actseg::trainer::{prepare, train, Prepared, TrainConfig, TrainState};
use actseg::videoenc::ConvSpec;
use wasm_bindgen::prelude::*;

fn js_err(e: actseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A 32x32, four-frame world with up to two actors.
pub fn demo_world(seed: u64) -> ShapeWorldSpec {
    ShapeWorldSpec {
        canvas: 32,
        frames: 4,
        max_actors: 2,
        min_half: 4.0,
        max_half: 5.0,
        speed: 1.0,
        growth: 0.5,
        seed,
        ..Default::default()
    }
}

pub fn demo_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        l_max: 6,
        resolutions: ResolutionSet::new(vec![2, 8, 32]).expect("valid"),
        video_stack: vec![
            ConvSpec {
                kernel: [3, 3, 3],
                stride: [1, 2, 2],
                channels: 8,
            },
            ConvSpec {
                kernel: [3, 3, 3],
                stride: [2, 2, 2],
                channels: 16,
            },
            ConvSpec {
                kernel: [1, 3, 3],
                stride: [1, 2, 2],
                channels: 16,
            },
            ConvSpec {
                kernel: [1, 3, 3],
                stride: [1, 2, 2],
                channels: 16,
            },
        ],
        decoder_widths: vec![8, 8],
        ..Default::default()
    }
}

#[wasm_bindgen]
pub struct Demo {
    world: ShapeWorldSpec,
    state: TrainState,
    table: EmbeddingTable,
    data: Vec<Prepared>,
    video: Arc<Video>,
    last_mask: Option<Mask>,
}

#[wasm_bindgen]
impl Demo {
    /// Builds a fresh model and a 48-video training set from `seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        let world = demo_world(seed as u64);
        let model = demo_model();
        let config = TrainConfig {
            clip_len: 2,
            batch_size: 4,
            lr: 3e-3,
            decay_every: 100_000,
            seed: seed as u64,
            ..Default::default()
        };
        let state = TrainState::new(model.clone(), config).map_err(js_err)?;
        let table = EmbeddingTable::empty(model.embed_dim, seed as u64).map_err(js_err)?;
        let samples = generate(&world, Split::Train, 48).map_err(js_err)?;
        let data = prepare(&samples, &model, &table, state.config.clip_len).map_err(js_err)?;
        let video = Arc::new(nth_video(&world, Split::Test, 0).map_err(js_err)?);
        Ok(Demo {
            world,
            state,
            table,
            data,
            video,
            last_mask: None,
        })
    }

    pub fn size(&self) -> usize {
        self.world.canvas
    }

    pub fn frames(&self) -> usize {
        self.world.frames
    }

    /// Renders test video `index` and makes it current.
    pub fn render(&mut self, index: u32) -> Result<(), JsError> {
        self.video = Arc::new(nth_video(&self.world, Split::Test, index as usize).map_err(js_err)?);
        self.last_mask = None;
        Ok(())
    }

    /// One sentence per actor of the current video, newline separated.
    pub fn sentences(&self) -> String {
        self.video
            .actors
            .iter()
            .map(|a| a.sentence(self.world.variant))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// RGBA pixels of frame `t`; `flow` selects the motion field instead.
    pub fn frame_rgba(&self, t: usize, flow: bool) -> Vec<u8> {
        let clip = if flow {
            &self.video.flow
        } else {
            &self.video.appearance
        };
        let v = &clip.frames;
        let t = t.min(v.frames - 1);
        let mut out = Vec::with_capacity(v.height * v.width * 4);
        for i in 0..v.height {
            for j in 0..v.width {
                let px = v.at(t, i, j);
                let rgb = if flow {
                    let c = |x: f32| (128.0 + 48.0 * x).clamp(0.0, 255.0) as u8;
                    [c(px[0]), c(px[1]), 128]
                } else {
                    [0, 1, 2].map(|k| (px[k] * 255.0).round().clamp(0.0, 255.0) as u8)
                };
                out.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
            }
        }
        out
    }

    /// Runs `steps` more training iterations and returns the mean loss over them.
    pub fn train(&mut self, steps: u32) -> Result<f64, JsError> {
        self.state.config.iterations = self.state.iteration + steps as usize;
        let log = train(&mut self.state, &self.data, |_| {}).map_err(js_err)?;
        Ok(log.iter().map(|r| r.loss).sum::<f64>() / log.len().max(1) as f64)
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    /// Center-frame mask for `sentence` as 0/1 bytes, row-major.
    pub fn segment(&mut self, sentence: &str) -> Result<Vec<u8>, JsError> {
        let seg = Segmenter {
            model: &self.state.model,
            table: &self.table,
            clip_len: self.state.config.clip_len,
        };
        let map = Scorer::Single(seg)
            .response(sentence, &self.video)
            .map_err(js_err)?;
        let mask = predict_mask(&map);
        let bytes = mask.data.iter().map(|&b| b as u8).collect();
        self.last_mask = Some(mask);
        Ok(bytes)
    }

    /// IoU of the last segmentation with the best-matching actor.
    pub fn best_iou(&self) -> f64 {
        let Some(pred) = &self.last_mask else {
            return 0.0;
        };
        self.video
            .masks
            .iter()
            .filter_map(|m| iou(pred, m).ok())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_and_model_agree() {
        demo_world(1).validate().unwrap();
        demo_model().validate().unwrap();
        assert_eq!(demo_model().canvas(), demo_world(1).canvas);
    }

    #[test]
    fn demo_round_trip() {
        let mut d = Demo::new(3).unwrap();
        assert_eq!(d.frame_rgba(0, false).len(), 32 * 32 * 4);
        assert_eq!(d.frame_rgba(9, true).len(), 32 * 32 * 4);
        assert!(!d.sentences().is_empty());
        let l0 = d.train(3).unwrap();
        assert!(l0.is_finite());
        assert_eq!(d.iteration(), 3);
        let sentence = d.sentences().lines().next().unwrap().to_owned();
        let m = d.segment(&sentence).unwrap();
        assert_eq!(m.len(), 32 * 32);
        assert!((0.0..=1.0).contains(&d.best_iou()));
        d.render(1).unwrap();
        assert_eq!(d.best_iou(), 0.0);
    }

    #[test]
    fn same_seed_same_pixels() {
        let (a, b) = (Demo::new(5).unwrap(), Demo::new(5).unwrap());
        assert_eq!(a.frame_rgba(1, false), b.frame_rgba(1, false));
        assert_eq!(a.sentences(), b.sentences());
    }
}
