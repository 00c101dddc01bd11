//! Segmentation of trained models: single-stream, two-stream fusion and
//! actor-action pair labelling.

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedSample, Pair, Video};
use crate::decoder::predict_mask;
use crate::embeddings::EmbeddingTable;
use crate::error::{config_err, input_err, Result};
use crate::metrics::{aggregate, EvalReport, LabelMap};
use crate::model::{Responses, SegmentationModel};
use crate::tensor::{Map, Mask};
use crate::textenc::embed_sentence;
use crate::videoenc::VideoClip;

/// A trained single-stream model with its word table.
#[derive(Clone, Debug)]
pub struct Segmenter<'a> {
    pub model: &'a SegmentationModel<f32>,
    pub table: &'a EmbeddingTable,
    pub clip_len: usize,
}

impl Segmenter<'_> {
    /// Response maps for a sentence and the window centered on `center`.
    pub fn responses(
        &self,
        sentence: &str,
        clip: &VideoClip,
        center: usize,
    ) -> Result<Responses<f32>> {
        if clip.kind != self.model.config.stream {
            return Err(input_err!(
                "model expects a {:?} clip, got {:?}",
                self.model.config.stream,
                clip.kind
            ));
        }
        if center >= clip.len() {
            return Err(input_err!(
                "center frame {center} is outside a {}-frame clip",
                clip.len()
            ));
        }
        let s = embed_sentence(sentence, self.table, self.model.config.l_max)?;
        self.model
            .forward(&s, &clip.window(center, self.clip_len).frames)
    }

    pub fn top_response(
        &self,
        sentence: &str,
        clip: &VideoClip,
        center: usize,
    ) -> Result<Map<f32>> {
        Ok(self
            .responses(sentence, clip, center)?
            .pop()
            .expect("at least one level"))
    }

    pub fn sample_response(&self, s: &AnnotatedSample) -> Result<Map<f32>> {
        self.top_response(&s.sentence, s.clip(self.model.config.stream), s.center())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub appearance_weight: f64,
    pub flow_weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            appearance_weight: 2.0,
            flow_weight: 1.0,
        }
    }
}

/// Weighted average of the appearance and flow responses.
pub fn fuse(appearance: &Map<f32>, flow: &Map<f32>, cfg: FusionConfig) -> Result<Map<f32>> {
    if appearance.size != flow.size {
        return Err(input_err!(
            "fusing maps of size {} and {}",
            appearance.size,
            flow.size
        ));
    }
    let (wa, wf) = (cfg.appearance_weight, cfg.flow_weight);
    if !(wa >= 0.0 && wf >= 0.0 && wa + wf > 0.0) {
        return Err(config_err!(
            "fusion weights must be nonnegative with a positive sum"
        ));
    }
    let data = appearance
        .data
        .iter()
        .zip(&flow.data)
        .map(|(&a, &f)| ((wa * a as f64 + wf * f as f64) / (wa + wf)) as f32)
        .collect();
    Ok(Map {
        size: appearance.size,
        data,
    })
}

/// How to turn a sample into a top-resolution response.
pub enum Scorer<'a> {
    Single(Segmenter<'a>),
    Fused {
        appearance: Segmenter<'a>,
        flow: Segmenter<'a>,
        weights: FusionConfig,
    },
}

impl Scorer<'_> {
    pub fn response(&self, sentence: &str, video: &Video) -> Result<Map<f32>> {
        match self {
            Scorer::Single(s) => s.top_response(sentence, pick(video, s), video.center),
            Scorer::Fused {
                appearance,
                flow,
                weights,
            } => fuse(
                &appearance.top_response(sentence, pick(video, appearance), video.center)?,
                &flow.top_response(sentence, pick(video, flow), video.center)?,
                *weights,
            ),
        }
    }

    pub fn predict(&self, s: &AnnotatedSample) -> Result<Mask> {
        Ok(predict_mask(&self.response(&s.sentence, &s.video)?))
    }
}

fn pick<'v>(video: &'v Video, s: &Segmenter<'_>) -> &'v VideoClip {
    match s.model.config.stream {
        crate::videoenc::StreamKind::Appearance => &video.appearance,
        crate::videoenc::StreamKind::Flow => &video.flow,
    }
}

/// Predicted and ground-truth masks for every sample.
pub fn predict_all(scorer: &Scorer<'_>, samples: &[AnnotatedSample]) -> Result<Vec<(Mask, Mask)>> {
    let run = |s: &AnnotatedSample| scorer.predict(s).map(|p| (p, s.gt_mask.clone()));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        samples.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().map(run).collect()
    }
}

pub fn evaluate(scorer: &Scorer<'_>, samples: &[AnnotatedSample]) -> Result<EvalReport> {
    aggregate(&predict_all(scorer, samples)?)
}

/// Video-level scores for every actor-action pair.
pub type PairScores = Vec<f64>;

/// Scores 1 for pairs present in the video and 0 otherwise.
pub fn oracle_pair_scores(video: &Video) -> PairScores {
    let mut s = vec![0.0; Pair::COUNT];
    for a in &video.actors {
        s[a.pair().0] = 1.0;
    }
    s
}

pub const PAIR_THRESHOLD: f64 = 0.5;

/// Pairs scoring at least `threshold`; the single best pair if none does.
pub fn select_pairs(scores: &[f64], threshold: f64) -> Result<Vec<Pair>> {
    if scores.len() != Pair::COUNT {
        return Err(input_err!(
            "expected {} pair scores, got {}",
            Pair::COUNT,
            scores.len()
        ));
    }
    let chosen: Vec<Pair> = Pair::all().filter(|p| scores[p.0] >= threshold).collect();
    if !chosen.is_empty() {
        return Ok(chosen);
    }
    // first maximum wins ties
    let best = (0..scores.len()).fold(0, |b, k| if scores[k] > scores[b] { k } else { b });
    Ok(vec![Pair(best)])
}

/// Labels each pixel with the selected pair of largest positive response.
pub fn pair_inference(
    scorer: &Scorer<'_>,
    video: &Video,
    scores: &[f64],
    threshold: f64,
) -> Result<LabelMap> {
    let pairs = select_pairs(scores, threshold)?;
    let maps = pairs
        .iter()
        .map(|p| scorer.response(&p.text(), video))
        .collect::<Result<Vec<_>>>()?;
    Ok(label_from_responses(&pairs, &maps))
}

/// Per-pixel argmax over `maps` (lowest index on ties); nonpositive maxima are background.
pub fn label_from_responses(pairs: &[Pair], maps: &[Map<f32>]) -> LabelMap {
    let n = maps[0].size;
    let mut out = LabelMap::background(n, n);
    for k in 0..n * n {
        let mut best: Option<(usize, f32)> = None;
        for (p, m) in maps.iter().enumerate() {
            if best.is_none_or(|(_, v)| m.data[k] > v) {
                best = Some((p, m.data[k]));
            }
        }
        if let Some((p, v)) = best {
            if v > 0.0 {
                out.data[k] = Some(pairs[p].0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_weights() {
        let a = Map {
            size: 1,
            data: vec![3.0f32],
        };
        let f = Map {
            size: 1,
            data: vec![-3.0f32],
        };
        assert_eq!(
            fuse(&a, &f, FusionConfig::default()).unwrap().data,
            vec![1.0]
        );
        let only_flow = FusionConfig {
            appearance_weight: 0.0,
            flow_weight: 1.0,
        };
        assert_eq!(fuse(&a, &f, only_flow).unwrap().data, vec![-3.0]);
        assert!(fuse(
            &a,
            &f,
            FusionConfig {
                appearance_weight: 0.0,
                flow_weight: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn selection_threshold_and_fallback() {
        let mut s = vec![0.1; Pair::COUNT];
        s[4] = 0.5;
        s[9] = 0.9;
        assert_eq!(select_pairs(&s, 0.5).unwrap(), vec![Pair(4), Pair(9)]);
        let mut low = vec![0.2; Pair::COUNT];
        low[7] = 0.3;
        low[11] = 0.3;
        assert_eq!(select_pairs(&low, 0.5).unwrap(), vec![Pair(7)]);
        assert!(select_pairs(&[0.1], 0.5).is_err());
    }

    #[test]
    fn argmax_ties_and_background() {
        let pairs = [Pair(3), Pair(5)];
        let maps = [
            Map {
                size: 2,
                data: vec![1.0, 0.0, -1.0, 2.0],
            },
            Map {
                size: 2,
                data: vec![1.0, -0.5, -2.0, 3.0],
            },
        ];
        let l = label_from_responses(&pairs, &maps);
        assert_eq!(l.data, vec![Some(3), None, None, Some(5)]);
    }
}
