//! Clip encoder: 3D conv stack, temporal average pooling, per-position L2
//! normalization and appended coordinate channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::nn::{gate_inplace, l2_normalize, l2_normalize_backward, relu_backward_inplace, Conv3d};
use crate::tensor::{Grid, Real, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    /// RGB frames in `[0, 1]`.
    Appearance,
    /// Per-pixel displacement `(dx, dy)` in pixels/frame.
    Flow,
}

impl StreamKind {
    pub fn channels(self) -> usize {
        match self {
            StreamKind::Appearance => 3,
            StreamKind::Flow => 2,
        }
    }
}

/// `N × H × W × C` clip of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub kind: StreamKind,
    pub frames: Volume<f32>,
}

impl VideoClip {
    pub fn new(kind: StreamKind, frames: Volume<f32>) -> Result<Self> {
        if frames.channels != kind.channels() {
            return Err(config_err!(
                "{kind:?} clips carry {} channels, got {}",
                kind.channels(),
                frames.channels
            ));
        }
        if frames.frames == 0 {
            return Err(input_err!("clip has no frames"));
        }
        if frames.height != frames.width {
            return Err(input_err!(
                "clip frames must be square, got {}x{}",
                frames.height,
                frames.width
            ));
        }
        Ok(Self { kind, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames.frames == 0
    }

    pub fn size(&self) -> usize {
        self.frames.height
    }

    /// `n` frames around `center` (at index `n / 2` of the result), repeating
    /// boundary frames where the window runs off either end.
    pub fn window(&self, center: usize, n: usize) -> VideoClip {
        let v = &self.frames;
        let per = v.height * v.width * v.channels;
        let mut data = Vec::with_capacity(n * per);
        let last = v.frames as isize - 1;
        for k in 0..n {
            let t = (center as isize + k as isize - (n / 2) as isize).clamp(0, last) as usize;
            data.extend_from_slice(&v.data[t * per..(t + 1) * per]);
        }
        VideoClip {
            kind: self.kind,
            frames: Volume {
                frames: n,
                data,
                ..v.clone()
            },
        }
    }
}

/// `r × r × 2`: channel 0 is x (−1 → +1 across columns), channel 1 is y (down rows).
pub fn coordinate_channels<T: Real>(r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(input_err!("coordinate grid needs r >= 1"));
    }
    let coord = |k: usize| {
        if r == 1 {
            T::zero()
        } else {
            T::lit(-1.0 + 2.0 * k as f64 / (r - 1) as f64)
        }
    };
    Ok(Grid::from_fn(r, r, 2, |i, j, c| {
        if c == 0 {
            coord(j)
        } else {
            coord(i)
        }
    }))
}

/// Concatenates the two coordinate channels after the feature channels.
pub fn append_coordinates<T: Real>(features: &Grid<T>) -> Grid<T> {
    let coords = coordinate_channels::<T>(features.height).expect("nonempty grid");
    let c = features.channels;
    Grid::from_fn(features.height, features.width, c + 2, |i, j, k| {
        if k < c {
            features.get(i, j, k)
        } else {
            coords.get(i, j, k - c)
        }
    })
}

/// Drops the trailing coordinate channels of a gradient grid.
pub fn strip_coordinates<T: Real>(g: &Grid<T>) -> Grid<T> {
    let c = g.channels - 2;
    Grid::from_fn(g.height, g.width, c, |i, j, k| g.get(i, j, k))
}

/// Normalized features plus coordinates at the base resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub grid: Grid<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn resolution(&self) -> usize {
        self.grid.height
    }

    pub fn feature_channels(&self) -> usize {
        self.grid.channels - 2
    }

    pub fn features(&self) -> Grid<T> {
        strip_coordinates(&self.grid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub channels: usize,
}

/// Default desk-scale stack, spatial stride product 16.
pub fn default_stack() -> Vec<ConvSpec> {
    vec![
        ConvSpec {
            kernel: [3, 3, 3],
            stride: [1, 2, 2],
            channels: 16,
        },
        ConvSpec {
            kernel: [3, 3, 3],
            stride: [2, 2, 2],
            channels: 32,
        },
        ConvSpec {
            kernel: [3, 3, 3],
            stride: [2, 2, 2],
            channels: 32,
        },
        ConvSpec {
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
            channels: 32,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEncoder<T> {
    pub layers: Vec<Conv3d<T>>,
}

pub struct VideoCache<T> {
    /// Input of layer 0, then each post-ReLU output.
    acts: Vec<Volume<T>>,
    pooled: Grid<T>,
    normalized: Grid<T>,
    norms: Vec<T>,
}

impl<T: Real> VideoCache<T> {
    /// On/off state of every ReLU unit, per layer.
    pub fn gates(&self) -> Vec<Vec<bool>> {
        self.acts[1..]
            .iter()
            .map(|a| a.data.iter().map(|&v| v > T::zero()).collect())
            .collect()
    }
}

impl<T: Real> VideoEncoder<T> {
    pub fn zeros(input_channels: usize, stack: &[ConvSpec]) -> Result<Self> {
        if stack.is_empty() {
            return Err(config_err!("video encoder needs at least one layer"));
        }
        let mut cin = input_channels;
        let layers = stack
            .iter()
            .map(|s| {
                let layer = Conv3d::zeros(s.kernel, s.stride, cin, s.channels);
                cin = s.channels;
                layer
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Conv3d::zeros_like).collect(),
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        for l in &mut self.layers {
            l.init(rng);
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().expect("nonempty").out_channels
    }

    pub fn spatial_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride[1]).product()
    }

    pub fn encode(&self, clip: &Volume<T>) -> Result<(FeatureGrid<T>, VideoCache<T>)> {
        self.encode_gated(clip, None)
    }

    /// [`Self::encode`] with the ReLU units replaced by fixed on/off `gates`.
    pub fn encode_gated(
        &self,
        clip: &Volume<T>,
        gates: Option<&[Vec<bool>]>,
    ) -> Result<(FeatureGrid<T>, VideoCache<T>)> {
        if clip.channels != self.input_channels() {
            return Err(config_err!(
                "clip has {} channels, encoder expects {}",
                clip.channels,
                self.input_channels()
            ));
        }
        if clip.height % self.spatial_stride() != 0 {
            return Err(config_err!(
                "clip size {} is not divisible by the encoder stride {}",
                clip.height,
                self.spatial_stride()
            ));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(clip.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts.last().expect("input"))?;
            gate_inplace(&mut y.data, gates.map(|g| g[k].as_slice()));
            acts.push(y);
        }
        let top = acts.last().expect("output");
        let mut pooled = Grid::zeros(top.height, top.width, top.channels);
        let scale = T::one() / T::lit(top.frames as f64);
        for t in 0..top.frames {
            let n = pooled.data.len();
            for (p, &v) in pooled.data.iter_mut().zip(&top.data[t * n..(t + 1) * n]) {
                *p += v * scale;
            }
        }
        let (normalized, norms) = l2_normalize(&pooled);
        let grid = append_coordinates(&normalized);
        Ok((
            FeatureGrid { grid },
            VideoCache {
                acts,
                pooled,
                normalized,
                norms,
            },
        ))
    }

    /// `d_grid` is the gradient with respect to the full feature grid (coordinates included).
    pub fn backward(&self, cache: &VideoCache<T>, d_grid: &Grid<T>, grad: &mut Self) {
        let d_norm = strip_coordinates(d_grid);
        let d_pooled = l2_normalize_backward(&cache.normalized, &cache.norms, &d_norm);
        debug_assert_eq!(d_pooled.data.len(), cache.pooled.data.len());
        let top = cache.acts.last().expect("output");
        let scale = T::one() / T::lit(top.frames as f64);
        let mut dy = Volume::zeros(top.frames, top.height, top.width, top.channels);
        let n = d_pooled.data.len();
        for t in 0..top.frames {
            for (d, &g) in dy.data[t * n..(t + 1) * n].iter_mut().zip(&d_pooled.data) {
                *d = g * scale;
            }
        }
        for (k, layer) in self.layers.iter().enumerate().rev() {
            relu_backward_inplace(&mut dy.data, &cache.acts[k + 1].data);
            let dx = layer.backward(&cache.acts[k], &dy, &mut grad.layers[k], k > 0);
            match dx {
                Some(dx) => dy = dx,
                None => break,
            }
        }
    }
}

pub fn encode_video<T: Real>(clip: &VideoClip, p: &VideoEncoder<T>) -> Result<FeatureGrid<T>> {
    p.encode(&clip.frames.cast()).map(|(g, _)| g)
}
