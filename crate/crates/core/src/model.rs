//! The full single-stream network: sentence encoder, clip encoder and the
//! dynamic-filter decoder, with a joint backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{respond, respond_backward, Decoder, ResolutionSet};
use crate::error::{config_err, Result};
use crate::loss::{
    grad_check, total_loss, total_loss_with_grad, GradCheckOptions, GradCheckReport, LossWeights,
    MaskPyramid, ParamBlock,
};
use crate::tensor::{Map, Real, Volume};
use crate::textenc::{SentenceEncoder, SentenceMatrix, TextEncoder};
use crate::videoenc::{default_stack, ConvSpec, StreamKind, VideoEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub l_max: usize,
    pub stream: StreamKind,
    pub resolutions: ResolutionSet,
    pub video_stack: Vec<ConvSpec>,
    /// Feature width of every pyramid level above the base.
    pub decoder_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            l_max: 8,
            stream: StreamKind::Appearance,
            resolutions: ResolutionSet::new(vec![4, 16, 64]).expect("valid"),
            video_stack: default_stack(),
            decoder_widths: vec![16, 16],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(config_err!("embed_dim must be positive"));
        }
        if self.l_max < 2 {
            return Err(config_err!("l_max must be at least 2"));
        }
        if self.video_stack.is_empty()
            || self
                .video_stack
                .iter()
                .any(|s| s.channels == 0 || s.stride.contains(&0) || s.kernel.contains(&0))
        {
            return Err(config_err!(
                "video stack layers need positive kernels, strides and channels"
            ));
        }
        if self.video_stack.iter().any(|s| s.stride[1] != s.stride[2]) {
            return Err(config_err!(
                "video stack strides must be equal on both spatial axes"
            ));
        }
        let stride: usize = self.video_stack.iter().map(|s| s.stride[1]).product();
        if self.resolutions.base() * stride != self.resolutions.max() {
            return Err(config_err!(
                "encoder stride {stride} maps {} to {}, but the base resolution is {}",
                self.resolutions.max(),
                self.resolutions.max() / stride,
                self.resolutions.base()
            ));
        }
        if self.decoder_widths.len() + 1 != self.resolutions.len() {
            return Err(config_err!(
                "{} decoder widths for {} resolutions",
                self.decoder_widths.len(),
                self.resolutions.len()
            ));
        }
        if self.decoder_widths.contains(&0) {
            return Err(config_err!("decoder widths must be positive"));
        }
        Ok(())
    }

    pub fn level_widths(&self) -> Vec<usize> {
        let base = self.video_stack.last().expect("nonempty").channels;
        std::iter::once(base)
            .chain(self.decoder_widths.iter().copied())
            .collect()
    }

    pub fn canvas(&self) -> usize {
        self.resolutions.max()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationModel<T> {
    pub config: ModelConfig,
    pub text: TextEncoder<T>,
    pub video: VideoEncoder<T>,
    pub decoder: Decoder<T>,
}

/// Piecewise-linear decisions of one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern {
    pub winners: Vec<Option<usize>>,
    pub video: Vec<Vec<bool>>,
    pub decoder: Vec<Vec<bool>>,
}

/// Response maps for every level, lowest resolution first.
pub type Responses<T> = Vec<Map<T>>;

impl<T: Real> SegmentationModel<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            text: TextEncoder::zeros(config.embed_dim),
            video: VideoEncoder::zeros(config.stream.channels(), &config.video_stack)?,
            decoder: Decoder::zeros(&config.level_widths(), config.embed_dim),
            config,
        })
    }

    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.text.init(&mut rng);
        m.video.init(&mut rng);
        m.decoder.init(&mut rng);
        Ok(m)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            text: self.text.zeros_like(),
            video: self.video.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Named parameter blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = vec![
            ("text.weight".to_owned(), &self.text.weight),
            ("text.bias".to_owned(), &self.text.bias),
        ];
        for (k, l) in self.video.layers.iter().enumerate() {
            out.push((format!("video.{k}.weight"), &l.weight));
            out.push((format!("video.{k}.bias"), &l.bias));
        }
        for (k, b) in self.decoder.blocks.iter().enumerate() {
            out.push((format!("deconv.{k}.up.weight"), &b.up.weight));
            out.push((format!("deconv.{k}.up.bias"), &b.up.bias));
            out.push((format!("deconv.{k}.refine.weight"), &b.refine.weight));
            out.push((format!("deconv.{k}.refine.bias"), &b.refine.bias));
        }
        for (k, h) in self.decoder.heads.iter().enumerate() {
            out.push((format!("filter.{k}.weight"), &h.weight));
            out.push((format!("filter.{k}.bias"), &h.bias));
        }
        out
    }

    /// Same order as [`Self::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = vec![
            ("text.weight".to_owned(), &mut self.text.weight),
            ("text.bias".to_owned(), &mut self.text.bias),
        ];
        for (k, l) in self.video.layers.iter_mut().enumerate() {
            out.push((format!("video.{k}.weight"), &mut l.weight));
            out.push((format!("video.{k}.bias"), &mut l.bias));
        }
        for (k, b) in self.decoder.blocks.iter_mut().enumerate() {
            out.push((format!("deconv.{k}.up.weight"), &mut b.up.weight));
            out.push((format!("deconv.{k}.up.bias"), &mut b.up.bias));
            out.push((format!("deconv.{k}.refine.weight"), &mut b.refine.weight));
            out.push((format!("deconv.{k}.refine.bias"), &mut b.refine.bias));
        }
        for (k, h) in self.decoder.heads.iter_mut().enumerate() {
            out.push((format!("filter.{k}.weight"), &mut h.weight));
            out.push((format!("filter.{k}.bias"), &mut h.bias));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> SegmentationModel<U> {
        let mut out = SegmentationModel::<U>::zeros(self.config.clone()).expect("validated config");
        for ((_, dst), (_, src)) in out.blocks_mut().into_iter().zip(self.blocks()) {
            *dst = crate::tensor::cast_vec(src);
        }
        out
    }

    /// Elementwise `self += other * scale`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
    }

    pub fn forward(&self, sentence: &SentenceMatrix, clip: &Volume<T>) -> Result<Responses<T>> {
        let (t, _) = self.text.encode(sentence)?;
        let filters = self.decoder.generate_filters(&t)?;
        let (base, _) = self.video.encode(clip)?;
        let (pyr, _) = self.decoder.build_pyramid(&base)?;
        respond(&pyr, &filters)
    }

    /// Max-pool winners and ReLU states of a forward pass.
    pub fn activation_pattern(
        &self,
        sentence: &SentenceMatrix,
        clip: &Volume<T>,
    ) -> Result<ActivationPattern> {
        let (_, text_cache) = self.text.encode(sentence)?;
        let (base, video_cache) = self.video.encode(clip)?;
        let (_, pyr_cache) = self.decoder.build_pyramid(&base)?;
        Ok(ActivationPattern {
            winners: text_cache.winners().to_vec(),
            video: video_cache.gates(),
            decoder: pyr_cache.gates(),
        })
    }

    /// Forward pass with every ReLU and max-pool decision taken from `pattern`.
    /// Within the region where the pattern holds this equals [`Self::forward`],
    /// and it stays smooth across the region's boundary.
    pub fn forward_gated(
        &self,
        sentence: &SentenceMatrix,
        clip: &Volume<T>,
        pattern: &ActivationPattern,
    ) -> Result<Responses<T>> {
        let t = self.text.encode_gated(sentence, &pattern.winners);
        let filters = self.decoder.generate_filters(&t)?;
        let (base, _) = self.video.encode_gated(clip, Some(&pattern.video))?;
        let (pyr, _) = self
            .decoder
            .build_pyramid_gated(&base, Some(&pattern.decoder))?;
        respond(&pyr, &filters)
    }

    /// Loss and parameter gradients for one sample.
    pub fn loss_and_grad(
        &self,
        sentence: &SentenceMatrix,
        clip: &Volume<T>,
        target: &MaskPyramid,
        weights: &LossWeights,
    ) -> Result<(T, Self)> {
        let (t, text_cache) = self.text.encode(sentence)?;
        let filters = self.decoder.generate_filters(&t)?;
        let (base, video_cache) = self.video.encode(clip)?;
        let (pyr, pyr_cache) = self.decoder.build_pyramid(&base)?;
        let maps = respond(&pyr, &filters)?;
        let (loss, d_maps) = total_loss_with_grad(&maps, target, weights)?;

        let mut grad = self.zeros_like();
        let (d_levels, d_filters) = respond_backward(&pyr, &filters, &d_maps);
        let d_t = self
            .decoder
            .filters_backward(&t, &filters, &d_filters, &mut grad.decoder);
        self.text
            .backward(sentence, &text_cache, &d_t, &mut grad.text);
        let d_base = self
            .decoder
            .pyramid_backward(&pyr_cache, d_levels, &mut grad.decoder);
        self.video.backward(&video_cache, &d_base, &mut grad.video);
        Ok((loss, grad))
    }
}

impl SegmentationModel<f64> {
    /// Central-difference check of [`Self::loss_and_grad`] on one sample.
    ///
    /// ReLUs and the max-pool are piecewise linear, and with thousands of
    /// units some pre-activation lies within `eps` of its kink, so a probe of
    /// the raw network would difference across kinks. Probes therefore go
    /// through [`Self::forward_gated`] with the check point's pattern, whose
    /// derivative there is exactly what backpropagation computes.
    pub fn gradient_check(
        &self,
        sentence: &SentenceMatrix,
        clip: &Volume<f64>,
        target: &MaskPyramid,
        weights: &LossWeights,
        opts: GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let (loss, grad) = self.loss_and_grad(sentence, clip, target, weights)?;
        let pattern = self.activation_pattern(sentence, clip)?;
        let gated = total_loss(
            &self.forward_gated(sentence, clip, &pattern)?,
            target,
            weights,
        )?;
        if (gated - loss).abs() > 1e-12 * loss.abs().max(1.0) {
            return Err(crate::Error::Numeric(format!(
                "gated forward gives {gated}, network gives {loss}"
            )));
        }
        let blocks: Vec<ParamBlock> = self
            .blocks()
            .into_iter()
            .map(|(name, v)| ParamBlock {
                name,
                values: v.clone(),
            })
            .collect();
        let analytic: Vec<Vec<f64>> = grad.blocks().into_iter().map(|(_, v)| v.clone()).collect();
        let mut probe = self.clone();
        grad_check(
            &blocks,
            &analytic,
            |bs| {
                for ((_, dst), b) in probe.blocks_mut().into_iter().zip(bs) {
                    dst.copy_from_slice(&b.values);
                }
                probe
                    .forward_gated(sentence, clip, &pattern)
                    .and_then(|maps| total_loss(&maps, target, weights))
                    .unwrap_or(f64::NAN)
            },
            opts,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::predict_mask;
    use crate::embeddings::EmbeddingTable;
    use crate::textenc::embed_sentence;

    fn small_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            l_max: 6,
            resolutions: ResolutionSet::new(vec![1, 4, 16]).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_consistent() {
        ModelConfig::default().validate().unwrap();
        let m = SegmentationModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.config.level_widths(), vec![32, 16, 16]);
        assert!(m.parameter_count() > 10_000);
    }

    #[test]
    fn mismatched_stride_is_rejected() {
        let cfg = ModelConfig {
            resolutions: ResolutionSet::new(vec![8, 32]).unwrap(),
            decoder_widths: vec![16],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_model_predicts_empty_mask() {
        let m = SegmentationModel::<f64>::zeros(small_config()).unwrap();
        let table = EmbeddingTable::empty(6, 0).unwrap();
        let s = embed_sentence("red square moving left", &table, 6).unwrap();
        let clip = Volume::zeros(2, 16, 16, 3);
        let maps = m.forward(&s, &clip).unwrap();
        assert_eq!(
            maps.iter().map(|m| m.size).collect::<Vec<_>>(),
            vec![1, 4, 16]
        );
        assert_eq!(predict_mask(maps.last().unwrap()).count(), 0);
    }

    #[test]
    fn different_sentences_give_different_responses() {
        let m = SegmentationModel::<f64>::new(small_config(), 3).unwrap();
        let table = EmbeddingTable::empty(6, 1).unwrap();
        let clip = Volume {
            data: (0..2 * 16 * 16 * 3)
                .map(|k| ((k * 37) % 101) as f64 / 101.0)
                .collect(),
            ..Volume::zeros(2, 16, 16, 3)
        };
        let a = m
            .forward(&embed_sentence("red square", &table, 6).unwrap(), &clip)
            .unwrap();
        let b = m
            .forward(&embed_sentence("blue circle", &table, 6).unwrap(), &clip)
            .unwrap();
        assert_ne!(a.last(), b.last());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let m = SegmentationModel::<f64>::new(small_config(), 11).unwrap();
        let table = EmbeddingTable::empty(6, 2).unwrap();
        let s = embed_sentence("blue circle moving up", &table, 6).unwrap();
        let clip = Volume {
            data: (0..2 * 16 * 16 * 3)
                .map(|k| ((k * 53) % 97) as f64 / 97.0)
                .collect(),
            ..Volume::zeros(2, 16, 16, 3)
        };
        let y = crate::tensor::Mask::from_fn(16, 16, |i, j| {
            (4..11).contains(&i) && (3..9).contains(&j)
        });
        let target = MaskPyramid::from_mask(&y, &m.config.resolutions).unwrap();
        let opts = GradCheckOptions {
            probes_per_block: Some(6),
            ..Default::default()
        };
        let report = m
            .gradient_check(&s, &clip, &target, &LossWeights::uniform(3), opts)
            .unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn gated_forward_matches_network_at_its_pattern() {
        let m = SegmentationModel::<f64>::new(small_config(), 4).unwrap();
        let table = EmbeddingTable::empty(6, 2).unwrap();
        let s = embed_sentence("green triangle growing", &table, 6).unwrap();
        let clip = Volume {
            data: (0..2 * 16 * 16 * 3)
                .map(|k| ((k * 29) % 89) as f64 / 89.0)
                .collect(),
            ..Volume::zeros(2, 16, 16, 3)
        };
        let p = m.activation_pattern(&s, &clip).unwrap();
        assert_eq!(
            m.forward_gated(&s, &clip, &p).unwrap(),
            m.forward(&s, &clip).unwrap()
        );
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let m = SegmentationModel::<f32>::new(small_config(), 9).unwrap();
        assert_eq!(m.cast::<f64>().cast::<f32>(), m);
    }
}
