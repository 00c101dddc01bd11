//! Multi-resolution decoding with sentence-generated dynamic filters.
//!
//! The base feature grid is upsampled by deconvolution blocks into a pyramid;
//! at each level a filter `f^r = tanh(W^r T + b^r)` is correlated with the
//! features (a 1×1 filter spanning all channels) to give the response map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{
    gate_inplace, l2_normalize, l2_normalize_backward, relu_backward_inplace, Conv3d,
    ConvTranspose2d,
};
use crate::tensor::{Grid, Map, Mask, Real};
use crate::videoenc::{append_coordinates, strip_coordinates, FeatureGrid};

/// Increasing resolutions, each four times the previous.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ResolutionSet(Vec<usize>);

impl ResolutionSet {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() || levels[0] == 0 {
            return Err(config_err!("resolution set must be nonempty and positive"));
        }
        if levels.windows(2).any(|w| w[1] != 4 * w[0]) {
            return Err(config_err!(
                "each resolution must be 4x the previous: {levels:?}"
            ));
        }
        Ok(Self(levels))
    }

    pub fn levels(&self) -> &[usize] {
        &self.0
    }

    pub fn base(&self) -> usize {
        self.0[0]
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("nonempty")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for ResolutionSet {
    type Error = crate::error::Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ResolutionSet> for Vec<usize> {
    fn from(r: ResolutionSet) -> Self {
        r.0
    }
}

/// One upsampling step: 8×8 stride-4 transposed conv + ReLU, 3×3 conv + ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvBlock<T> {
    pub up: ConvTranspose2d<T>,
    pub refine: Conv3d<T>,
}

impl<T: Real> DeconvBlock<T> {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            up: ConvTranspose2d::zeros(8, 4, 2, in_channels, out_channels),
            refine: Conv3d::zeros([1, 3, 3], [1, 1, 1], out_channels, out_channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            up: self.up.zeros_like(),
            refine: self.refine.zeros_like(),
        }
    }
}

/// Single fully connected layer producing one level's filter.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterHead<T> {
    pub channels: usize,
    pub dim: usize,
    /// `channels × dim`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> FilterHead<T> {
    pub fn zeros(channels: usize, dim: usize) -> Self {
        Self {
            channels,
            dim,
            weight: vec![T::zero(); channels * dim],
            bias: vec![T::zero(); channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.dim)
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let b = 1.0 / (self.dim as f64).sqrt();
        for w in &mut self.weight {
            *w = T::lit(rng.random_range(-b..=b));
        }
        for w in &mut self.bias {
            *w = T::lit(rng.random_range(-0.1..=0.1));
        }
    }

    pub fn forward(&self, t: &[T]) -> Result<Vec<T>> {
        if t.len() != self.dim {
            return Err(config_err!(
                "sentence vector has dimension {}, filter head expects {}",
                t.len(),
                self.dim
            ));
        }
        Ok((0..self.channels)
            .map(|c| {
                let row = &self.weight[c * self.dim..(c + 1) * self.dim];
                open_unit(
                    row.iter()
                        .zip(t)
                        .fold(self.bias[c], |s, (&w, &x)| s + w * x)
                        .tanh(),
                )
            })
            .collect())
    }

    /// Accumulates into `grad`, adds `dT` into `d_t`.
    fn backward(&self, t: &[T], f: &[T], d_f: &[T], grad: &mut Self, d_t: &mut [T]) {
        for c in 0..self.channels {
            let d_pre = d_f[c] * (T::one() - f[c] * f[c]);
            grad.bias[c] += d_pre;
            let r = c * self.dim..(c + 1) * self.dim;
            for ((gw, &w), (&x, dt)) in grad.weight[r.clone()]
                .iter_mut()
                .zip(&self.weight[r])
                .zip(t.iter().zip(d_t.iter_mut()))
            {
                *gw += d_pre * x;
                *dt += d_pre * w;
            }
        }
    }
}

/// Keeps saturated `tanh` outputs strictly inside `(-1, 1)`.
fn open_unit<T: Real>(v: T) -> T {
    let edge = T::one() - T::epsilon() / T::lit(2.0);
    v.max(-edge).min(edge)
}

/// Per-level features with coordinates appended; level 0 is the base grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Grid<T>>,
}

pub type DynamicFilter<T> = Vec<T>;

struct BlockCache<T> {
    input: Grid<T>,
    up_out: Grid<T>,
    refine_out: Grid<T>,
    normalized: Grid<T>,
    norms: Vec<T>,
}

pub struct PyramidCache<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> PyramidCache<T> {
    /// On/off state of every ReLU unit: upsampling then refinement, per block.
    pub fn gates(&self) -> Vec<Vec<bool>> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.up_out.data, &b.refine_out.data])
            .map(|d| d.iter().map(|&v| v > T::zero()).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub blocks: Vec<DeconvBlock<T>>,
    pub heads: Vec<FilterHead<T>>,
}

impl<T: Real> Decoder<T> {
    /// `widths[k]` is the feature width of level `k` (before coordinates).
    pub fn zeros(widths: &[usize], text_dim: usize) -> Self {
        Self {
            blocks: widths
                .windows(2)
                .map(|w| DeconvBlock::zeros(w[0], w[1]))
                .collect(),
            heads: widths
                .iter()
                .map(|&c| FilterHead::zeros(c + 2, text_dim))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(DeconvBlock::zeros_like).collect(),
            heads: self.heads.iter().map(FilterHead::zeros_like).collect(),
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        for b in &mut self.blocks {
            b.up.init(rng);
            b.refine.init(rng);
        }
        for h in &mut self.heads {
            h.init(rng);
        }
    }

    pub fn levels(&self) -> usize {
        self.heads.len()
    }

    pub fn generate_filters(&self, t: &[T]) -> Result<Vec<DynamicFilter<T>>> {
        self.heads.iter().map(|h| h.forward(t)).collect()
    }

    pub fn build_pyramid(
        &self,
        base: &FeatureGrid<T>,
    ) -> Result<(FeaturePyramid<T>, PyramidCache<T>)> {
        self.build_pyramid_gated(base, None)
    }

    /// [`Self::build_pyramid`] with the ReLU units replaced by fixed on/off `gates`.
    pub fn build_pyramid_gated(
        &self,
        base: &FeatureGrid<T>,
        gates: Option<&[Vec<bool>]>,
    ) -> Result<(FeaturePyramid<T>, PyramidCache<T>)> {
        if base.feature_channels() != self.heads[0].channels - 2 {
            return Err(config_err!(
                "base grid has {} feature channels, decoder expects {}",
                base.feature_channels(),
                self.heads[0].channels - 2
            ));
        }
        let mut levels = vec![base.grid.clone()];
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut input = base.features();
        for (k, block) in self.blocks.iter().enumerate() {
            let mut up_out = block.up.forward(&input)?;
            gate_inplace(&mut up_out.data, gates.map(|g| g[2 * k].as_slice()));
            let mut refine_out = block.refine.forward(&up_out.clone().into_volume())?;
            gate_inplace(&mut refine_out.data, gates.map(|g| g[2 * k + 1].as_slice()));
            let refine_out = refine_out.frame(0);
            let (normalized, norms) = l2_normalize(&refine_out);
            levels.push(append_coordinates(&normalized));
            caches.push(BlockCache {
                input,
                up_out,
                refine_out,
                normalized: normalized.clone(),
                norms,
            });
            input = normalized;
        }
        Ok((FeaturePyramid { levels }, PyramidCache { blocks: caches }))
    }

    /// Backpropagates level gradients `d_levels` (coordinates included) to the base grid.
    pub fn pyramid_backward(
        &self,
        cache: &PyramidCache<T>,
        mut d_levels: Vec<Grid<T>>,
        grad: &mut Self,
    ) -> Grid<T> {
        for k in (0..self.blocks.len()).rev() {
            let block = &self.blocks[k];
            let c = &cache.blocks[k];
            let d_top = d_levels.pop().expect("level gradient");
            let d_norm = strip_coordinates(&d_top);
            let mut d_refine = l2_normalize_backward(&c.normalized, &c.norms, &d_norm);
            relu_backward_inplace(&mut d_refine.data, &c.refine_out.data);
            let mut d_up = block
                .refine
                .backward(
                    &c.up_out.clone().into_volume(),
                    &d_refine.into_volume(),
                    &mut grad.blocks[k].refine,
                    true,
                )
                .expect("input gradient")
                .frame(0);
            relu_backward_inplace(&mut d_up.data, &c.up_out.data);
            let d_in = block.up.backward(&c.input, &d_up, &mut grad.blocks[k].up);
            let below = d_levels.last_mut().expect("lower level");
            let cb = below.channels;
            for (p, px) in d_in.data.chunks(d_in.channels).enumerate() {
                for (ch, &g) in px.iter().enumerate() {
                    below.data[p * cb + ch] += g;
                }
            }
        }
        d_levels.pop().expect("base gradient")
    }

    /// Accumulates filter-head gradients and returns `dT`.
    pub fn filters_backward(
        &self,
        t: &[T],
        filters: &[DynamicFilter<T>],
        d_filters: &[Vec<T>],
        grad: &mut Self,
    ) -> Vec<T> {
        let mut d_t = vec![T::zero(); t.len()];
        for (k, head) in self.heads.iter().enumerate() {
            head.backward(t, &filters[k], &d_filters[k], &mut grad.heads[k], &mut d_t);
        }
        d_t
    }
}

/// `S_ij = sum_c f_c V_ijc` at every level.
pub fn respond<T: Real>(
    pyr: &FeaturePyramid<T>,
    filters: &[DynamicFilter<T>],
) -> Result<Vec<Map<T>>> {
    if pyr.levels.len() != filters.len() {
        return Err(config_err!(
            "{} pyramid levels but {} filters",
            pyr.levels.len(),
            filters.len()
        ));
    }
    pyr.levels
        .iter()
        .zip(filters)
        .map(|(v, f)| {
            if v.channels != f.len() {
                return Err(config_err!(
                    "level has {} channels, filter has {}",
                    v.channels,
                    f.len()
                ));
            }
            let data = v
                .data
                .chunks(v.channels)
                .map(|px| px.iter().zip(f).fold(T::zero(), |s, (&a, &b)| s + a * b))
                .collect();
            Ok(Map {
                size: v.height,
                data,
            })
        })
        .collect()
}

/// Gradients of [`respond`] with respect to the levels and the filters.
pub fn respond_backward<T: Real>(
    pyr: &FeaturePyramid<T>,
    filters: &[DynamicFilter<T>],
    d_maps: &[Map<T>],
) -> (Vec<Grid<T>>, Vec<Vec<T>>) {
    let mut d_levels = Vec::with_capacity(pyr.levels.len());
    let mut d_filters = Vec::with_capacity(filters.len());
    for ((v, f), ds) in pyr.levels.iter().zip(filters).zip(d_maps) {
        let c = v.channels;
        let mut dv = Grid::zeros(v.height, v.width, c);
        let mut df = vec![T::zero(); c];
        for (p, &g) in ds.data.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let px = &v.data[p * c..(p + 1) * c];
            for k in 0..c {
                df[k] += g * px[k];
                dv.data[p * c + k] = g * f[k];
            }
        }
        d_levels.push(dv);
        d_filters.push(df);
    }
    (d_levels, d_filters)
}

/// Foreground wherever the response is strictly positive.
pub fn predict_mask<T: Real>(s: &Map<T>) -> Mask {
    Mask {
        height: s.size,
        width: s.size,
        data: s.data.iter().map(|&v| v > T::zero()).collect(),
    }
}
