//! Layer primitives with hand-written backward passes.
//!
//! All tensors are channels-last. Weights are laid out so that the innermost
//! index is the output channel, which keeps the hot loops contiguous.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::tensor::{Grid, Real, Volume};

fn uniform<T: Real, R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect()
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    for (y, &w) in acc.iter_mut().zip(x) {
        *y += a * w;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// 3D cross-correlation with "same"-style zero padding: output extent is
/// `ceil(input / stride)` on every axis, leading padding `(k - 1) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<T> {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[kt][kh][kw][cin][cout]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3d<T> {
    pub fn zeros(
        kernel: [usize; 3],
        stride: [usize; 3],
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let n = kernel.iter().product::<usize>() * in_channels * out_channels;
        Self {
            kernel,
            stride,
            in_channels,
            out_channels,
            weight: vec![T::zero(); n],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-uniform weights, fan-in-scaled uniform biases.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let fan_in = (self.kernel.iter().product::<usize>() * self.in_channels) as f64;
        self.weight = uniform(rng, self.weight.len(), (6.0 / fan_in).sqrt());
        self.bias = uniform(rng, self.bias.len(), 1.0 / fan_in.sqrt());
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.kernel,
            self.stride,
            self.in_channels,
            self.out_channels,
        )
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| dims[a].div_ceil(self.stride[a]))
    }

    fn pad(&self) -> [usize; 3] {
        self.kernel.map(|k| (k - 1) / 2)
    }

    #[inline]
    fn w_block(&self, kt: usize, kh: usize, kw: usize) -> usize {
        ((kt * self.kernel[1] + kh) * self.kernel[2] + kw) * self.in_channels * self.out_channels
    }

    /// Input index touched by output `o` at kernel tap `k` on `axis`.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride[axis] + k).checked_sub(self.pad()[axis])?;
        (p < extent).then_some(p)
    }

    /// Pre-activation output.
    pub fn forward(&self, x: &Volume<T>) -> Result<Volume<T>> {
        if x.channels != self.in_channels {
            return Err(config_err!(
                "conv3d expects {} input channels, got {}",
                self.in_channels,
                x.channels
            ));
        }
        let [ot_n, oh_n, ow_n] = self.output_dims(x.dims());
        let mut out = Volume::zeros(ot_n, oh_n, ow_n, self.out_channels);
        let cout = self.out_channels;
        for ot in 0..ot_n {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let o = out.offset(ot, oh, ow);
                    let acc = &mut out.data[o..o + cout];
                    acc.copy_from_slice(&self.bias);
                    for kt in 0..self.kernel[0] {
                        let Some(it) = self.src(0, ot, kt, x.frames) else {
                            continue;
                        };
                        for kh in 0..self.kernel[1] {
                            let Some(ih) = self.src(1, oh, kh, x.height) else {
                                continue;
                            };
                            for kw in 0..self.kernel[2] {
                                let Some(iw) = self.src(2, ow, kw, x.width) else {
                                    continue;
                                };
                                let xs = x.at(it, ih, iw);
                                let wb = self.w_block(kt, kh, kw);
                                for (ci, &xv) in xs.iter().enumerate() {
                                    if xv == T::zero() {
                                        continue;
                                    }
                                    let row = &self.weight[wb + ci * cout..wb + (ci + 1) * cout];
                                    axpy(acc, xv, row);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient when requested.
    pub fn backward(
        &self,
        x: &Volume<T>,
        dout: &Volume<T>,
        grad: &mut Self,
        want_dx: bool,
    ) -> Option<Volume<T>> {
        let cout = self.out_channels;
        let mut dx = want_dx.then(|| Volume::zeros(x.frames, x.height, x.width, x.channels));
        for ot in 0..dout.frames {
            for oh in 0..dout.height {
                for ow in 0..dout.width {
                    let g = dout.at(ot, oh, ow);
                    if g.iter().all(|v| *v == T::zero()) {
                        continue;
                    }
                    axpy(&mut grad.bias, T::one(), g);
                    for kt in 0..self.kernel[0] {
                        let Some(it) = self.src(0, ot, kt, x.frames) else {
                            continue;
                        };
                        for kh in 0..self.kernel[1] {
                            let Some(ih) = self.src(1, oh, kh, x.height) else {
                                continue;
                            };
                            for kw in 0..self.kernel[2] {
                                let Some(iw) = self.src(2, ow, kw, x.width) else {
                                    continue;
                                };
                                let xo = x.offset(it, ih, iw);
                                let wb = self.w_block(kt, kh, kw);
                                for ci in 0..self.in_channels {
                                    let r = wb + ci * cout..wb + (ci + 1) * cout;
                                    let xv = x.data[xo + ci];
                                    if xv != T::zero() {
                                        axpy(&mut grad.weight[r.clone()], xv, g);
                                    }
                                    if let Some(dx) = dx.as_mut() {
                                        dx.data[xo + ci] += dot(&self.weight[r], g);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 2D transposed convolution: `out[i*s + k - p] += x[i] * w[k]` per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[kh][kw][cin][cout]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn zeros(
        kernel: usize,
        stride: usize,
        padding: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            weight: vec![T::zero(); kernel * kernel * in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.kernel,
            self.stride,
            self.padding,
            self.in_channels,
            self.out_channels,
        )
    }

    /// Each output pixel receives `(kernel / stride)^2 * cin` contributions.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let taps = (self.kernel / self.stride).max(1);
        let fan_in = (taps * taps * self.in_channels) as f64;
        self.weight = uniform(rng, self.weight.len(), (6.0 / fan_in).sqrt());
        self.bias = uniform(rng, self.bias.len(), 1.0 / fan_in.sqrt());
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel - 2 * self.padding
    }

    #[inline]
    fn dst(&self, i: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (i * self.stride + k).checked_sub(self.padding)?;
        (p < extent).then_some(p)
    }

    pub fn forward(&self, x: &Grid<T>) -> Result<Grid<T>> {
        if x.channels != self.in_channels {
            return Err(config_err!(
                "transposed conv expects {} input channels, got {}",
                self.in_channels,
                x.channels
            ));
        }
        let (oh_n, ow_n) = (self.output_size(x.height), self.output_size(x.width));
        let cout = self.out_channels;
        let mut out = Grid::zeros(oh_n, ow_n, cout);
        for px in out.data.chunks_mut(cout) {
            px.copy_from_slice(&self.bias);
        }
        for ih in 0..x.height {
            for iw in 0..x.width {
                let xs = x.at(ih, iw);
                for kh in 0..self.kernel {
                    let Some(oh) = self.dst(ih, kh, oh_n) else {
                        continue;
                    };
                    for kw in 0..self.kernel {
                        let Some(ow) = self.dst(iw, kw, ow_n) else {
                            continue;
                        };
                        let o = out.offset(oh, ow);
                        let wb = (kh * self.kernel + kw) * self.in_channels * cout;
                        for (ci, &xv) in xs.iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let row = &self.weight[wb + ci * cout..wb + (ci + 1) * cout];
                            axpy(&mut out.data[o..o + cout], xv, row);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Grid<T>, dout: &Grid<T>, grad: &mut Self) -> Grid<T> {
        let cout = self.out_channels;
        for g in dout.data.chunks(cout) {
            axpy(&mut grad.bias, T::one(), g);
        }
        let mut dx = Grid::zeros(x.height, x.width, x.channels);
        for ih in 0..x.height {
            for iw in 0..x.width {
                let xo = x.offset(ih, iw);
                for kh in 0..self.kernel {
                    let Some(oh) = self.dst(ih, kh, dout.height) else {
                        continue;
                    };
                    for kw in 0..self.kernel {
                        let Some(ow) = self.dst(iw, kw, dout.width) else {
                            continue;
                        };
                        let g = dout.at(oh, ow);
                        if g.iter().all(|v| *v == T::zero()) {
                            continue;
                        }
                        let wb = (kh * self.kernel + kw) * self.in_channels * cout;
                        for ci in 0..self.in_channels {
                            let r = wb + ci * cout..wb + (ci + 1) * cout;
                            let xv = x.data[xo + ci];
                            if xv != T::zero() {
                                axpy(&mut grad.weight[r.clone()], xv, g);
                            }
                            dx.data[xo + ci] += dot(&self.weight[r], g);
                        }
                    }
                }
            }
        }
        dx
    }
}

/// ReLU, or multiplication by a recorded on/off pattern when `gate` is given.
pub fn gate_inplace<T: Real>(v: &mut [T], gate: Option<&[bool]>) {
    match gate {
        None => relu_inplace(v),
        Some(g) => {
            for (x, &on) in v.iter_mut().zip(g) {
                if !on {
                    *x = T::zero();
                }
            }
        }
    }
}

pub fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(grad: &mut [T], out: &[T]) {
    for (g, &y) in grad.iter_mut().zip(out) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Normalizes every spatial position to unit Euclidean norm. All-zero
/// positions stay zero. Returns the normalized grid and the per-position norms.
pub fn l2_normalize<T: Real>(x: &Grid<T>) -> (Grid<T>, Vec<T>) {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.positions());
    for px in y.data.chunks_mut(x.channels) {
        let n = px.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if n > T::zero() {
            for v in px.iter_mut() {
                *v = *v / n;
            }
        }
        norms.push(n);
    }
    (y, norms)
}

/// `dx = (dy - y (y . dy)) / |x|`; zero-norm positions pass no gradient.
pub fn l2_normalize_backward<T: Real>(y: &Grid<T>, norms: &[T], dy: &Grid<T>) -> Grid<T> {
    let c = y.channels;
    let mut dx = Grid::zeros(y.height, y.width, c);
    for (p, &n) in norms.iter().enumerate() {
        if n == T::zero() {
            continue;
        }
        let ys = &y.data[p * c..(p + 1) * c];
        let gs = &dy.data[p * c..(p + 1) * c];
        let proj = dot(ys, gs);
        for k in 0..c {
            dx.data[p * c + k] = (gs[k] - ys[k] * proj) / n;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid<f64> {
        Grid::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn transposed_conv_output_is_four_times_input() {
        let t = ConvTranspose2d::<f64>::zeros(8, 4, 2, 1, 1);
        for r in [1, 4, 16] {
            assert_eq!(t.output_size(r), 4 * r);
        }
    }

    #[test]
    fn conv3d_same_padding_sizes() {
        let c = Conv3d::<f32>::zeros([3, 3, 3], [2, 2, 2], 1, 1);
        assert_eq!(c.output_dims([4, 64, 64]), [2, 32, 32]);
        assert_eq!(c.output_dims([1, 5, 5]), [1, 3, 3]);
    }

    #[test]
    fn l2_normalize_keeps_zero_rows_zero() {
        let g = Grid::from_fn(1, 2, 3, |_, j, c| if j == 0 { 0.0 } else { (c + 1) as f64 });
        let (y, norms) = l2_normalize(&g);
        assert!(y.at(0, 0).iter().all(|v| *v == 0.0));
        let n: f64 = y.at(0, 1).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(norms[0], 0.0);
    }

    #[test]
    fn l2_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_grid(&mut rng, 2, 2, 4);
        let w = random_grid(&mut rng, 2, 2, 4);
        let f = |x: &Grid<f64>| {
            let (y, _) = l2_normalize(x);
            y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (y, norms) = l2_normalize(&x);
        let dx = l2_normalize_backward(&y, &norms, &w);
        for k in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[k] += 1e-6;
            let mut xm = x.clone();
            xm.data[k] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx.data[k]).abs() < 1e-6, "{fd} vs {}", dx.data[k]);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv3d::<f64>::zeros([2, 3, 3], [1, 2, 2], 2, 3);
        conv.init(&mut rng);
        let x = Volume {
            frames: 3,
            height: 5,
            width: 4,
            channels: 2,
            data: (0..3 * 5 * 4 * 2)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        };
        let y = conv.forward(&x).unwrap();
        let probe: Vec<f64> = (0..y.data.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let readout = |c: &Conv3d<f64>, x: &Volume<f64>| {
            c.forward(x)
                .unwrap()
                .data
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let dout = Volume {
            data: probe.clone(),
            ..y.clone()
        };
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&x, &dout, &mut grad, true).unwrap();
        let eps = 1e-6;
        for k in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight[k] += eps;
            let mut m = conv.clone();
            m.weight[k] -= eps;
            let fd = (readout(&p, &x) - readout(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.weight[k]).abs() < 1e-7);
        }
        for k in 0..x.data.len() {
            let mut p = x.clone();
            p.data[k] += eps;
            let mut m = x.clone();
            m.data[k] -= eps;
            let fd = (readout(&conv, &p) - readout(&conv, &m)) / (2.0 * eps);
            assert!((fd - dx.data[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn transposed_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = ConvTranspose2d::<f64>::zeros(8, 4, 2, 2, 3);
        t.init(&mut rng);
        let x = random_grid(&mut rng, 2, 2, 2);
        let y = t.forward(&x).unwrap();
        let probe = random_grid(&mut rng, y.height, y.width, y.channels);
        let readout = |t: &ConvTranspose2d<f64>, x: &Grid<f64>| {
            t.forward(x)
                .unwrap()
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut grad = t.zeros_like();
        let dx = t.backward(&x, &probe, &mut grad);
        let eps = 1e-6;
        for k in (0..t.weight.len()).step_by(7) {
            let mut p = t.clone();
            p.weight[k] += eps;
            let mut m = t.clone();
            m.weight[k] -= eps;
            let fd = (readout(&p, &x) - readout(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.weight[k]).abs() < 1e-7);
        }
        for k in 0..x.data.len() {
            let mut p = x.clone();
            p.data[k] += eps;
            let mut m = x.clone();
            m.data[k] -= eps;
            let fd = (readout(&t, &p) - readout(&t, &m)) / (2.0 * eps);
            assert!((fd - dx.data[k]).abs() < 1e-7);
        }
    }
}
