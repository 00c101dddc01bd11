//! Multi-resolution pixel-wise logistic loss and a finite-difference
//! gradient-check harness.

use serde::{Deserialize, Serialize};

use crate::decoder::ResolutionSet;
use crate::error::{config_err, input_err, Error, Result};
use crate::tensor::{Map, Mask, Real};

/// Block-vote downsampling: a cell is foreground iff at least half of its block is.
pub fn downsample_mask(y: &Mask, r: usize) -> Result<Mask> {
    if y.height != y.width {
        return Err(input_err!(
            "mask must be square, got {}x{}",
            y.height,
            y.width
        ));
    }
    if r == 0 || y.height % r != 0 {
        return Err(input_err!(
            "resolution {r} does not divide mask size {}",
            y.height
        ));
    }
    let k = y.height / r;
    Ok(Mask::from_fn(r, r, |i, j| {
        let mut on = 0;
        for a in 0..k {
            for b in 0..k {
                on += usize::from(y.get(i * k + a, j * k + b));
            }
        }
        2 * on >= k * k
    }))
}

/// Ground truth at every resolution, labels in `{-1, +1}` (`true` = +1).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<Mask>,
}

impl MaskPyramid {
    pub fn from_mask(y: &Mask, resolutions: &ResolutionSet) -> Result<Self> {
        if y.height != resolutions.max() {
            return Err(config_err!(
                "mask is {}x{}, highest resolution is {}",
                y.height,
                y.width,
                resolutions.max()
            ));
        }
        let levels = resolutions
            .levels()
            .iter()
            .map(|&r| downsample_mask(y, r))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }
}

/// Per-resolution weights `alpha_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(config_err!(
                "loss weights must be finite and nonnegative: {alphas:?}"
            ));
        }
        if alphas.iter().sum::<f64>() <= 0.0 {
            return Err(config_err!("loss weights must not all be zero"));
        }
        Ok(Self(alphas))
    }

    pub fn uniform(levels: usize) -> Self {
        Self(vec![1.0; levels])
    }

    /// Only the highest resolution contributes.
    pub fn highest_only(levels: usize) -> Self {
        let mut a = vec![0.0; levels];
        a[levels - 1] = 1.0;
        Self(a)
    }

    pub fn alphas(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|a| a * c).collect())
    }
}

impl TryFrom<Vec<f64>> for LossWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LossWeights> for Vec<f64> {
    fn from(w: LossWeights) -> Self {
        w.0
    }
}

#[inline]
fn label<T: Real>(y: bool) -> T {
    if y {
        T::one()
    } else {
        -T::one()
    }
}

/// `log(1 + exp(-s*y))` without overflow.
pub fn pixel_loss<T: Real>(s: T, y: bool) -> T {
    let z = -s * label::<T>(y);
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `d/ds log(1 + exp(-s*y)) = -y * sigmoid(-s*y)`.
pub fn pixel_loss_grad<T: Real>(s: T, y: bool) -> T {
    let yv = label::<T>(y);
    let z = -s * yv;
    let sig = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    -yv * sig
}

fn check_shapes<T: Real>(s: &[Map<T>], y: &MaskPyramid, w: &LossWeights) -> Result<()> {
    if s.len() != y.levels.len() || s.len() != w.alphas().len() {
        return Err(config_err!(
            "{} response maps, {} mask levels, {} weights",
            s.len(),
            y.levels.len(),
            w.alphas().len()
        ));
    }
    for (m, g) in s.iter().zip(&y.levels) {
        if m.size != g.height || m.size != g.width {
            return Err(config_err!(
                "response map {0}x{0} vs mask {1}x{2}",
                m.size,
                g.height,
                g.width
            ));
        }
    }
    Ok(())
}

/// `sum_r alpha_r / r^2 * sum_ij log(1 + exp(-S_ij Y_ij))`
pub fn total_loss<T: Real>(s: &[Map<T>], y: &MaskPyramid, w: &LossWeights) -> Result<T> {
    check_shapes(s, y, w)?;
    let mut total = T::zero();
    for ((m, g), &a) in s.iter().zip(&y.levels).zip(w.alphas()) {
        if a == 0.0 {
            continue;
        }
        let sum: T = m
            .data
            .iter()
            .zip(&g.data)
            .map(|(&v, &l)| pixel_loss(v, l))
            .sum();
        total += T::lit(a) * sum / T::lit((m.size * m.size) as f64);
    }
    Ok(total)
}

/// Loss and its gradient with respect to every response value.
pub fn total_loss_with_grad<T: Real>(
    s: &[Map<T>],
    y: &MaskPyramid,
    w: &LossWeights,
) -> Result<(T, Vec<Map<T>>)> {
    let loss = total_loss(s, y, w)?;
    let grads = s
        .iter()
        .zip(&y.levels)
        .zip(w.alphas())
        .map(|((m, g), &a)| {
            let scale = T::lit(a) / T::lit((m.size * m.size) as f64);
            Map {
                size: m.size,
                data: m
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &l)| {
                        if a == 0.0 {
                            T::zero()
                        } else {
                            scale * pixel_loss_grad(v, l)
                        }
                    })
                    .collect(),
            }
        })
        .collect();
    Ok((loss, grads))
}

/// A named parameter block for [`grad_check`].
#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn worst(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Entries probed per block; `None` checks every entry. Probes are spread
    /// evenly across the block.
    pub probes_per_block: Option<usize>,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-2,
            probes_per_block: None,
            floor: 1e-6,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `loss`.
pub fn grad_check<F>(
    blocks: &[ParamBlock],
    analytic: &[Vec<f64>],
    mut loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[ParamBlock]) -> f64,
{
    if blocks.len() != analytic.len() {
        return Err(config_err!(
            "{} blocks but {} gradients",
            blocks.len(),
            analytic.len()
        ));
    }
    let mut work = blocks.to_vec();
    let base = loss(&work);
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is {base} at the check point")));
    }
    let mut reports = Vec::with_capacity(blocks.len());
    for (b, grad) in analytic.iter().enumerate() {
        let n = blocks[b].values.len();
        if grad.len() != n {
            return Err(config_err!(
                "block {} has {n} values but {} gradients",
                blocks[b].name,
                grad.len()
            ));
        }
        let picks: Vec<usize> = match opts.probes_per_block {
            Some(k) if k < n => (0..k).map(|i| i * n / k + (n / k) / 2).collect(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &k in &picks {
            let orig = work[b].values[k];
            work[b].values[k] = orig + opts.eps;
            let up = loss(&work);
            work[b].values[k] = orig - opts.eps;
            let down = loss(&work);
            work[b].values[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss probing {}[{k}]",
                    blocks[b].name
                )));
            }
            let numeric = (up - down) / (2.0 * opts.eps);
            worst = worst.max(relative_error(grad[k], numeric, opts.floor));
        }
        reports.push(BlockReport {
            name: blocks[b].name.clone(),
            checked: picks.len(),
            max_rel_error: worst,
            passed: worst <= opts.tol,
        });
    }
    Ok(GradCheckReport {
        eps: opts.eps,
        tol: opts.tol,
        blocks: reports,
    })
}
