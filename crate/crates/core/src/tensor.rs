//! Dense channels-last storage for clips and feature maps.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + MulAssign
        + Sum
        + Default
        + Debug
        + Send
        + Sync
        + 'static
{
}

/// Casts every element of a slice.
pub fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter()
        .map(|x| U::from(*x).expect("finite cast"))
        .collect()
}

/// A `frames × height × width × channels` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![T::zero(); frames * height * width * channels],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    #[inline]
    pub fn offset(&self, t: usize, i: usize, j: usize) -> usize {
        ((t * self.height + i) * self.width + j) * self.channels
    }

    pub fn at(&self, t: usize, i: usize, j: usize) -> &[T] {
        let o = self.offset(t, i, j);
        &self.data[o..o + self.channels]
    }

    pub fn at_mut(&mut self, t: usize, i: usize, j: usize) -> &mut [T] {
        let o = self.offset(t, i, j);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn frame(&self, t: usize) -> Grid<T> {
        let n = self.height * self.width * self.channels;
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[t * n..(t + 1) * n].to_vec(),
        }
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: cast_vec(&self.data),
        }
    }
}

/// A `height × width × channels` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.width + j) * self.channels
    }

    pub fn at(&self, i: usize, j: usize) -> &[T] {
        let o = self.offset(i, j);
        &self.data[o..o + self.channels]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let o = self.offset(i, j);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> T {
        self.data[self.offset(i, j) + c]
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Views the grid as a one-frame volume.
    pub fn into_volume(self) -> Volume<T> {
        Volume {
            frames: 1,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data,
        }
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: cast_vec(&self.data),
        }
    }
}

/// Square real-valued map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Map<T> {
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Real> Map<T> {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![T::zero(); size * size],
        }
    }

    pub fn filled(size: usize, v: T) -> Self {
        Self {
            size,
            data: vec![v; size * size],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.size + j]
    }
}

/// Binary mask, row-major, `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }
}
