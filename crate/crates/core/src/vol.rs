//! Plain 3D volume containers shared by the data, masking, pseudo-label and
//! evaluation layers. Layout is row-major `[l][w][h]` with the `h` axis
//! contiguous; class fields prepend a class axis: `[k][l][w][h]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial extent of a volume, `(l, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub l: usize,
    pub w: usize,
    pub h: usize,
}

impl Dims3 {
    pub fn new(l: usize, w: usize, h: usize) -> Self {
        Dims3 { l, w, h }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.l * self.w * self.h
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.h + k
    }

    /// Inverse of [`Dims3::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let k = idx % self.h;
        let rest = idx / self.h;
        (rest / self.w, rest % self.w, k)
    }

    pub fn divisible_by(&self, b: usize) -> bool {
        b > 0 && self.l % b == 0 && self.w % b == 0 && self.h % b == 0
    }
}

impl std::fmt::Display for Dims3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.l, self.w, self.h)
    }
}

/// A scalar 3D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims3,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: Dims3) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.voxels()],
        }
    }

    pub fn from_vec(dims: Dims3, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::Shape(format!(
                "volume data length {} does not match dims {}",
                data.len(),
                dims
            )));
        }
        Ok(Volume { dims, data })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.dims.index(i, j, k)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        &mut self.data[self.dims.index(i, j, k)]
    }
}

/// An integer label map with values in `0..classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Dims3,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn zeros(dims: Dims3) -> Self {
        LabelVolume {
            dims,
            data: vec![0; dims.voxels()],
        }
    }

    pub fn from_vec(dims: Dims3, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::Shape(format!(
                "label data length {} does not match dims {}",
                data.len(),
                dims
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// A per-class scalar field of shape `(classes, l, w, h)`. Depending on the
/// producer it holds logits, probabilities, or a one-hot encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVolume {
    pub classes: usize,
    pub dims: Dims3,
    pub data: Vec<f64>,
}

impl ClassVolume {
    pub fn zeros(classes: usize, dims: Dims3) -> Self {
        ClassVolume {
            classes,
            dims,
            data: vec![0.0; classes * dims.voxels()],
        }
    }

    pub fn from_vec(classes: usize, dims: Dims3, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * dims.voxels() {
            return Err(Error::Shape(format!(
                "class volume data length {} does not match {}x{}",
                data.len(),
                classes,
                dims
            )));
        }
        Ok(ClassVolume {
            classes,
            dims,
            data,
        })
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.voxels()
    }

    /// Channel `k` as a contiguous slice.
    #[inline]
    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn at(&self, k: usize, voxel: usize) -> f64 {
        self.data[k * self.voxels() + voxel]
    }

    /// Softmax across the class axis, per voxel.
    pub fn softmax(&self) -> ClassVolume {
        let n = self.voxels();
        let mut out = ClassVolume::zeros(self.classes, self.dims);
        for v in 0..n {
            let mut max = f64::NEG_INFINITY;
            for k in 0..self.classes {
                max = max.max(self.data[k * n + v]);
            }
            let mut sum = 0.0;
            for k in 0..self.classes {
                let e = (self.data[k * n + v] - max).exp();
                out.data[k * n + v] = e;
                sum += e;
            }
            for k in 0..self.classes {
                out.data[k * n + v] /= sum;
            }
        }
        out
    }

    /// Per-voxel argmax with lowest-index tie-break.
    pub fn argmax(&self) -> LabelVolume {
        let n = self.voxels();
        let mut out = LabelVolume::zeros(self.dims);
        for v in 0..n {
            let mut best_k = 0usize;
            let mut best = self.data[v];
            for k in 1..self.classes {
                let val = self.data[k * n + v];
                if val > best {
                    best = val;
                    best_k = k;
                }
            }
            out.data[v] = best_k as u8;
        }
        out
    }

    /// True when every voxel's channel sum is within `tol` of 1 and entries
    /// are nonnegative.
    pub fn is_normalized(&self, tol: f64) -> bool {
        let n = self.voxels();
        for v in 0..n {
            let mut sum = 0.0;
            for k in 0..self.classes {
                let p = self.data[k * n + v];
                if p < 0.0 {
                    return false;
                }
                sum += p;
            }
            if (sum - 1.0).abs() > tol {
                return false;
            }
        }
        true
    }
}

/// One-hot encode an integer label map into `(classes, l, w, h)`.
///
/// Errors when a voxel holds a class id `>= classes`.
pub fn one_hot_encode(label: &LabelVolume, classes: usize) -> Result<ClassVolume> {
    let n = label.dims.voxels();
    let mut out = ClassVolume::zeros(classes, label.dims);
    for (v, &c) in label.data.iter().enumerate() {
        let c = c as usize;
        if c >= classes {
            return Err(Error::Validation(format!(
                "label value {c} out of range for {classes} classes"
            )));
        }
        out.data[c * n + v] = 1.0;
    }
    Ok(out)
}
