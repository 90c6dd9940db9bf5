//! A small reverse-mode autodiff tape over f64 buffers.
//!
//! Shapes are limited to what the trainer needs: channel volumes
//! `(channels, l, w, h)`, matrices, vectors, and scalars. Ops record a
//! backward closure onto the tape; `Tape::backward` walks node ids in
//! reverse, which is a valid topological order because parents are always
//! created first. Gradients land in a [`Grads`] arena and are routed to
//! parameter stores via the `(StoreKey, index)` tag on parameter leaves.
//!
//! Determinism: every accumulation runs in a fixed order; rayon is only used
//! across independent output channels, so results are bit-identical for any
//! thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{ParamStore, StoreKey};
use crate::vol::{ClassVolume, Dims3};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarShape {
    /// `(channels, dims)` channel volume.
    Chan(usize, Dims3),
    /// `(rows, cols)` row-major matrix.
    Mat(usize, usize),
    Vector(usize),
    Scalar,
}

impl VarShape {
    pub fn len(&self) -> usize {
        match *self {
            VarShape::Chan(c, d) => c * d.voxels(),
            VarShape::Mat(r, c) => r * c,
            VarShape::Vector(n) => n,
            VarShape::Scalar => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A value tracked (or not) by the tape. Cloning is cheap.
#[derive(Clone)]
pub struct Var {
    pub node: Option<NodeId>,
    pub data: Arc<Vec<f64>>,
    pub shape: VarShape,
}

impl Var {
    pub fn constant(data: Vec<f64>, shape: VarShape) -> Var {
        debug_assert_eq!(data.len(), shape.len());
        Var {
            node: None,
            data: Arc::new(data),
            shape,
        }
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(matches!(self.shape, VarShape::Scalar));
        self.data[0]
    }

    pub fn value(&self) -> &[f64] {
        &self.data
    }

    /// Drops the grad history, keeping the value.
    pub fn detach(&self) -> Var {
        Var {
            node: None,
            data: self.data.clone(),
            shape: self.shape,
        }
    }

    pub fn chan_parts(&self) -> (usize, Dims3) {
        match self.shape {
            VarShape::Chan(c, d) => (c, d),
            _ => panic!("expected channel volume"),
        }
    }

    pub fn to_class_volume(&self) -> ClassVolume {
        let (c, d) = self.chan_parts();
        ClassVolume {
            classes: c,
            dims: d,
            data: self.data.as_ref().clone(),
        }
    }
}

type BackFn = Box<dyn Fn(&[f64], &mut Grads) + Send>;

struct Node {
    backward: Option<BackFn>,
    param: Option<(StoreKey, usize)>,
}

/// Gradient arena produced by [`Tape::backward`].
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    fn add<F: FnOnce(&mut [f64])>(&mut self, id: NodeId, len: usize, f: F) {
        let buf = self.bufs[id].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    pub fn get(&self, var: &Var) -> Option<&[f64]> {
        var.node
            .and_then(|id| self.bufs.get(id))
            .and_then(|b| b.as_deref())
    }
}

pub struct Tape {
    recording: bool,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            recording: true,
            nodes: Vec::new(),
        }
    }

    /// A tape that records nothing; forwards become pure evaluation.
    pub fn no_grad() -> Tape {
        Tape {
            recording: false,
            nodes: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, backward: Option<BackFn>, param: Option<(StoreKey, usize)>) -> NodeId {
        self.nodes.push(Node { backward, param });
        self.nodes.len() - 1
    }

    /// Registers node creation for an op output. Returns `None` when nothing
    /// upstream needs gradients.
    fn record(&mut self, inputs: &[&Var], make: impl FnOnce() -> BackFn) -> Option<NodeId> {
        if !self.recording || inputs.iter().all(|v| v.node.is_none()) {
            return None;
        }
        Some(self.push(Some(make()), None))
    }

    /// Leaf tied to a parameter store entry.
    pub fn param(&mut self, store: &ParamStore, key: StoreKey, idx: usize) -> Var {
        let entry = &store.entries[idx];
        let shape = entry.var_shape();
        let node = if self.recording {
            Some(self.push(None, Some((key, idx))))
        } else {
            None
        };
        Var {
            node,
            data: Arc::new(entry.data.clone()),
            shape,
        }
    }

    /// Leaf with gradient tracking but no parameter tag (for grad-wrt-input
    /// tests).
    pub fn leaf(&mut self, data: Vec<f64>, shape: VarShape) -> Var {
        let node = if self.recording {
            Some(self.push(None, None))
        } else {
            None
        };
        Var {
            node,
            data: Arc::new(data),
            shape,
        }
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: &Var) -> Result<Grads> {
        let root_id = root.node.ok_or_else(|| {
            Error::Runtime("backward called on a constant (nothing recorded)".into())
        })?;
        if !matches!(root.shape, VarShape::Scalar) {
            return Err(Error::Runtime("backward root must be scalar".into()));
        }
        let mut grads = Grads {
            bufs: vec![None; self.nodes.len()],
        };
        grads.bufs[root_id] = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            let Some(g) = grads.bufs[id].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[id].backward {
                back(&g, &mut grads);
            } else {
                // leaves keep their gradient
                grads.bufs[id] = Some(g);
            }
        }
        Ok(grads)
    }

    /// Parameter-leaf gradients present after a backward pass, as
    /// `(store key, entry index, gradient)` triples in node order.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a Grads,
    ) -> impl Iterator<Item = (StoreKey, usize, &'a [f64])> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(id, node)| {
            let (key, idx) = node.param?;
            let g = grads.bufs[id].as_deref()?;
            Some((key, idx, g))
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

// ---------------------------------------------------------------------------
// convolution kernels
// ---------------------------------------------------------------------------

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// One fused 3-tap pass: `acc[x] += w0*src[x-1] + w1*src[x] + w2*src[x+1]`
/// with zero padding at the row ends.
#[inline]
fn tap3_row(acc: &mut [f64], src: &[f64], w0: f64, w1: f64, w2: f64) {
    let h = acc.len();
    if h == 1 {
        acc[0] += w1 * src[0];
        return;
    }
    acc[0] += w1 * src[0] + w2 * src[1];
    for x in 1..h - 1 {
        acc[x] += w0 * src[x - 1] + w1 * src[x] + w2 * src[x + 1];
    }
    acc[h - 1] += w0 * src[h - 2] + w1 * src[h - 1];
}

/// 3x3x3 convolution, stride 1, zero padding 1.
fn conv3_forward(x: &[f64], ci_n: usize, dims: Dims3, w: &[f64], co_n: usize, bias: &[f64]) -> Vec<f64> {
    let n = dims.voxels();
    let (dl, dw, dh) = (dims.l as isize, dims.w as isize, dims.h as isize);
    let mut out = vec![0.0; co_n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(co, oc)| {
        let b = bias[co];
        let mut acc = vec![0.0; dims.h];
        for z in 0..dl {
            for y in 0..dw {
                acc.fill(b);
                for ci in 0..ci_n {
                    let xc = &x[ci * n..(ci + 1) * n];
                    let wbase = (co * ci_n + ci) * 27;
                    for kd in 0..3isize {
                        let sz = z + kd - 1;
                        if sz < 0 || sz >= dl {
                            continue;
                        }
                        for kh in 0..3isize {
                            let sy = y + kh - 1;
                            if sy < 0 || sy >= dw {
                                continue;
                            }
                            let ibase = ((sz * dw + sy) * dh) as usize;
                            let src = &xc[ibase..ibase + dims.h];
                            let wrow = &w[wbase + ((kd * 3 + kh) * 3) as usize..];
                            tap3_row(&mut acc, src, wrow[0], wrow[1], wrow[2]);
                        }
                    }
                }
                let obase = ((z * dw + y) * dh) as usize;
                oc[obase..obase + dims.h].copy_from_slice(&acc);
            }
        }
    });
    out
}

/// Gradient of conv3 wrt input: correlate the output gradient with the
/// flipped kernel.
fn conv3_backward_input(gy: &[f64], co_n: usize, dims: Dims3, w: &[f64], ci_n: usize) -> Vec<f64> {
    let n = dims.voxels();
    let (dl, dw, dh) = (dims.l as isize, dims.w as isize, dims.h as isize);
    let mut gx = vec![0.0; ci_n * n];
    gx.par_chunks_mut(n).enumerate().for_each(|(ci, gc)| {
        let mut acc = vec![0.0; dims.h];
        for z in 0..dl {
            for y in 0..dw {
                acc.fill(0.0);
                for co in 0..co_n {
                    let gyc = &gy[co * n..(co + 1) * n];
                    let wbase = (co * ci_n + ci) * 27;
                    for kd in 0..3isize {
                        // x[z] feeds y[z - (kd - 1)]
                        let sz = z - (kd - 1);
                        if sz < 0 || sz >= dl {
                            continue;
                        }
                        for kh in 0..3isize {
                            let sy = y - (kh - 1);
                            if sy < 0 || sy >= dw {
                                continue;
                            }
                            let ibase = ((sz * dw + sy) * dh) as usize;
                            let src = &gyc[ibase..ibase + dims.h];
                            let wrow = &w[wbase + ((kd * 3 + kh) * 3) as usize..];
                            // flipped kernel: taps walk the opposite way
                            tap3_row(&mut acc, src, wrow[2], wrow[1], wrow[0]);
                        }
                    }
                }
                let obase = ((z * dw + y) * dh) as usize;
                for (d, s) in gc[obase..obase + dims.h].iter_mut().zip(acc.iter()) {
                    *d += s;
                }
            }
        }
    });
    gx
}

fn conv3_backward_weight(gy: &[f64], co_n: usize, x: &[f64], ci_n: usize, dims: Dims3) -> (Vec<f64>, Vec<f64>) {
    let n = dims.voxels();
    let (dl, dw, dh) = (dims.l as isize, dims.w as isize, dims.h as isize);
    let mut gw = vec![0.0; co_n * ci_n * 27];
    let mut gb = vec![0.0; co_n];
    gw.par_chunks_mut(ci_n * 27)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(co, (gwc, gbc))| {
            let gyc = &gy[co * n..(co + 1) * n];
            *gbc = gyc.iter().sum();
            for ci in 0..ci_n {
                let xc = &x[ci * n..(ci + 1) * n];
                for kd in 0..3isize {
                    for kh in 0..3isize {
                        // the three kw taps share each row pass
                        let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                        for z in 0..dl {
                            let sz = z + kd - 1;
                            if sz < 0 || sz >= dl {
                                continue;
                            }
                            for y in 0..dw {
                                let sy = y + kh - 1;
                                if sy < 0 || sy >= dw {
                                    continue;
                                }
                                let h = dims.h;
                                let g = &gyc[((z * dw + y) * dh) as usize..][..h];
                                let s = &xc[((sz * dw + sy) * dh) as usize..][..h];
                                a1 += g[0] * s[0];
                                for xk in 1..h {
                                    a0 += g[xk] * s[xk - 1];
                                    a1 += g[xk] * s[xk];
                                    a2 += g[xk - 1] * s[xk];
                                }
                            }
                        }
                        let base = ci * 27 + ((kd * 3 + kh) * 3) as usize;
                        gwc[base] = a0;
                        gwc[base + 1] = a1;
                        gwc[base + 2] = a2;
                    }
                }
            }
        });
    (gw, gb)
}

/// 2x2x2 convolution with stride 2 (downsampling); dims must be even.
fn conv2s2_forward(x: &[f64], ci_n: usize, dims: Dims3, w: &[f64], co_n: usize, bias: &[f64]) -> (Vec<f64>, Dims3) {
    let od = Dims3::new(dims.l / 2, dims.w / 2, dims.h / 2);
    let n_in = dims.voxels();
    let n_out = od.voxels();
    let mut out = vec![0.0; co_n * n_out];
    out.par_chunks_mut(n_out).enumerate().for_each(|(co, oc)| {
        for z in 0..od.l {
            for y in 0..od.w {
                let obase = od.index(z, y, 0);
                let row = &mut oc[obase..obase + od.h];
                row.fill(bias[co]);
                for ci in 0..ci_n {
                    let xc = &x[ci * n_in..(ci + 1) * n_in];
                    let wbase = (co * ci_n + ci) * 8;
                    for kd in 0..2 {
                        for kh in 0..2 {
                            let ibase = dims.index(2 * z + kd, 2 * y + kh, 0);
                            for kw in 0..2 {
                                let wv = w[wbase + (kd * 2 + kh) * 2 + kw];
                                for xo in 0..od.h {
                                    row[xo] += wv * xc[ibase + 2 * xo + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    (out, od)
}

fn conv2s2_backward_input(gy: &[f64], co_n: usize, od: Dims3, w: &[f64], ci_n: usize, dims: Dims3) -> Vec<f64> {
    let n_in = dims.voxels();
    let n_out = od.voxels();
    let mut gx = vec![0.0; ci_n * n_in];
    gx.par_chunks_mut(n_in).enumerate().for_each(|(ci, gc)| {
        for co in 0..co_n {
            let gyc = &gy[co * n_out..(co + 1) * n_out];
            let wbase = (co * ci_n + ci) * 8;
            for z in 0..od.l {
                for y in 0..od.w {
                    let obase = od.index(z, y, 0);
                    for kd in 0..2 {
                        for kh in 0..2 {
                            let ibase = dims.index(2 * z + kd, 2 * y + kh, 0);
                            for kw in 0..2 {
                                let wv = w[wbase + (kd * 2 + kh) * 2 + kw];
                                for xo in 0..od.h {
                                    gc[ibase + 2 * xo + kw] += wv * gyc[obase + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv2s2_backward_weight(gy: &[f64], co_n: usize, od: Dims3, x: &[f64], ci_n: usize, dims: Dims3) -> (Vec<f64>, Vec<f64>) {
    let n_in = dims.voxels();
    let n_out = od.voxels();
    let mut gw = vec![0.0; co_n * ci_n * 8];
    let mut gb = vec![0.0; co_n];
    gw.par_chunks_mut(ci_n * 8)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(co, (gwc, gbc))| {
            let gyc = &gy[co * n_out..(co + 1) * n_out];
            *gbc = gyc.iter().sum();
            for ci in 0..ci_n {
                let xc = &x[ci * n_in..(ci + 1) * n_in];
                for kd in 0..2 {
                    for kh in 0..2 {
                        for kw in 0..2 {
                            let mut acc = 0.0;
                            for z in 0..od.l {
                                for y in 0..od.w {
                                    let obase = od.index(z, y, 0);
                                    let ibase = dims.index(2 * z + kd, 2 * y + kh, 0);
                                    for xo in 0..od.h {
                                        acc += gyc[obase + xo] * xc[ibase + 2 * xo + kw];
                                    }
                                }
                            }
                            gwc[ci * 8 + (kd * 2 + kh) * 2 + kw] = acc;
                        }
                    }
                }
            }
        });
    (gw, gb)
}

fn conv1_forward(x: &[f64], ci_n: usize, n: usize, w: &[f64], co_n: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; co_n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(co, oc)| {
        oc.fill(bias[co]);
        for ci in 0..ci_n {
            axpy(oc, &x[ci * n..(ci + 1) * n], w[co * ci_n + ci]);
        }
    });
    out
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

/// 3x3x3 same-size convolution with bias.
pub fn conv3(tape: &mut Tape, x: &Var, w: &Var, b: &Var) -> Result<Var> {
    let (ci, dims) = x.chan_parts();
    let co = b.shape.len();
    if w.shape.len() != co * ci * 27 {
        return Err(shape_err("conv3", format!("weight len {} != {}x{}x27", w.shape.len(), co, ci)));
    }
    let out = conv3_forward(&x.data, ci, dims, &w.data, co, &b.data);
    let shape = VarShape::Chan(co, dims);
    let node = tape.record(&[x, w, b], || {
        let (xd, wd) = (x.data.clone(), w.data.clone());
        let (xn, wn, bn) = (x.node, w.node, b.node);
        let (xlen, wlen, blen) = (x.shape.len(), w.shape.len(), b.shape.len());
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                let gx = conv3_backward_input(gy, co, dims, &wd, ci);
                grads.add(id, xlen, |buf| axpy(buf, &gx, 1.0));
            }
            if wn.is_some() || bn.is_some() {
                let (gw, gb) = conv3_backward_weight(gy, co, &xd, ci, dims);
                if let Some(id) = wn {
                    grads.add(id, wlen, |buf| axpy(buf, &gw, 1.0));
                }
                if let Some(id) = bn {
                    grads.add(id, blen, |buf| axpy(buf, &gb, 1.0));
                }
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape,
    })
}

/// 2x2x2 stride-2 downsampling convolution.
pub fn conv_down(tape: &mut Tape, x: &Var, w: &Var, b: &Var) -> Result<Var> {
    let (ci, dims) = x.chan_parts();
    if dims.l % 2 != 0 || dims.w % 2 != 0 || dims.h % 2 != 0 {
        return Err(shape_err("conv_down", format!("dims {dims} not even")));
    }
    let co = b.shape.len();
    if w.shape.len() != co * ci * 8 {
        return Err(shape_err("conv_down", format!("weight len {} != {}x{}x8", w.shape.len(), co, ci)));
    }
    let (out, od) = conv2s2_forward(&x.data, ci, dims, &w.data, co, &b.data);
    let node = tape.record(&[x, w, b], || {
        let (xd, wd) = (x.data.clone(), w.data.clone());
        let (xn, wn, bn) = (x.node, w.node, b.node);
        let (xlen, wlen, blen) = (x.shape.len(), w.shape.len(), b.shape.len());
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                let gx = conv2s2_backward_input(gy, co, od, &wd, ci, dims);
                grads.add(id, xlen, |buf| axpy(buf, &gx, 1.0));
            }
            if wn.is_some() || bn.is_some() {
                let (gw, gb) = conv2s2_backward_weight(gy, co, od, &xd, ci, dims);
                if let Some(id) = wn {
                    grads.add(id, wlen, |buf| axpy(buf, &gw, 1.0));
                }
                if let Some(id) = bn {
                    grads.add(id, blen, |buf| axpy(buf, &gb, 1.0));
                }
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape: VarShape::Chan(co, od),
    })
}

/// 1x1x1 (pointwise) convolution.
pub fn conv_head(tape: &mut Tape, x: &Var, w: &Var, b: &Var) -> Result<Var> {
    let (ci, dims) = x.chan_parts();
    let co = b.shape.len();
    if w.shape.len() != co * ci {
        return Err(shape_err("conv_head", format!("weight len {} != {}x{}", w.shape.len(), co, ci)));
    }
    let n = dims.voxels();
    let out = conv1_forward(&x.data, ci, n, &w.data, co, &b.data);
    let node = tape.record(&[x, w, b], || {
        let (xd, wd) = (x.data.clone(), w.data.clone());
        let (xn, wn, bn) = (x.node, w.node, b.node);
        let (xlen, wlen, blen) = (x.shape.len(), w.shape.len(), b.shape.len());
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                grads.add(id, xlen, |buf| {
                    for ci_i in 0..ci {
                        for co_i in 0..co {
                            axpy(
                                &mut buf[ci_i * n..(ci_i + 1) * n],
                                &gy[co_i * n..(co_i + 1) * n],
                                wd[co_i * ci + ci_i],
                            );
                        }
                    }
                });
            }
            if let Some(id) = wn {
                grads.add(id, wlen, |buf| {
                    for co_i in 0..co {
                        for ci_i in 0..ci {
                            buf[co_i * ci + ci_i] +=
                                dot(&gy[co_i * n..(co_i + 1) * n], &xd[ci_i * n..(ci_i + 1) * n]);
                        }
                    }
                });
            }
            if let Some(id) = bn {
                grads.add(id, blen, |buf| {
                    for co_i in 0..co {
                        buf[co_i] += gy[co_i * n..(co_i + 1) * n].iter().sum::<f64>();
                    }
                });
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape: VarShape::Chan(co, dims),
    })
}

/// Nearest-neighbor 2x upsampling along every spatial axis.
pub fn upsample2(tape: &mut Tape, x: &Var) -> Var {
    let (c, dims) = x.chan_parts();
    let od = Dims3::new(dims.l * 2, dims.w * 2, dims.h * 2);
    let (n_in, n_out) = (dims.voxels(), od.voxels());
    let mut out = vec![0.0; c * n_out];
    for ch in 0..c {
        let src = &x.data[ch * n_in..(ch + 1) * n_in];
        let dst = &mut out[ch * n_out..(ch + 1) * n_out];
        for z in 0..od.l {
            for y in 0..od.w {
                let ibase = dims.index(z / 2, y / 2, 0);
                let obase = od.index(z, y, 0);
                for xk in 0..od.h {
                    dst[obase + xk] = src[ibase + xk / 2];
                }
            }
        }
    }
    let node = tape.record(&[x], || {
        let xn = x.node;
        let xlen = x.shape.len();
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                grads.add(id, xlen, |buf| {
                    for ch in 0..c {
                        let gsrc = &gy[ch * n_out..(ch + 1) * n_out];
                        let gdst = &mut buf[ch * n_in..(ch + 1) * n_in];
                        for z in 0..od.l {
                            for y in 0..od.w {
                                let ibase = dims.index(z / 2, y / 2, 0);
                                let obase = od.index(z, y, 0);
                                for xk in 0..od.h {
                                    gdst[ibase + xk / 2] += gsrc[obase + xk];
                                }
                            }
                        }
                    }
                });
            }
        })
    });
    Var {
        node,
        data: Arc::new(out),
        shape: VarShape::Chan(c, od),
    }
}

/// Mean-pool by an integer factor along every spatial axis.
pub fn avgpool(tape: &mut Tape, x: &Var, f: usize) -> Result<Var> {
    let (c, dims) = x.chan_parts();
    if f == 0 || !dims.divisible_by(f) {
        return Err(shape_err("avgpool", format!("dims {dims} not divisible by {f}")));
    }
    if f == 1 {
        return Ok(x.clone());
    }
    let od = Dims3::new(dims.l / f, dims.w / f, dims.h / f);
    let (n_in, n_out) = (dims.voxels(), od.voxels());
    let inv = 1.0 / (f * f * f) as f64;
    let mut out = vec![0.0; c * n_out];
    for ch in 0..c {
        let src = &x.data[ch * n_in..(ch + 1) * n_in];
        let dst = &mut out[ch * n_out..(ch + 1) * n_out];
        for z in 0..dims.l {
            for y in 0..dims.w {
                for xk in 0..dims.h {
                    dst[od.index(z / f, y / f, xk / f)] += src[dims.index(z, y, xk)] * inv;
                }
            }
        }
    }
    let node = tape.record(&[x], || {
        let xn = x.node;
        let xlen = x.shape.len();
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                grads.add(id, xlen, |buf| {
                    for ch in 0..c {
                        let gsrc = &gy[ch * n_out..(ch + 1) * n_out];
                        let gdst = &mut buf[ch * n_in..(ch + 1) * n_in];
                        for z in 0..dims.l {
                            for y in 0..dims.w {
                                for xk in 0..dims.h {
                                    gdst[dims.index(z, y, xk)] +=
                                        gsrc[od.index(z / f, y / f, xk / f)] * inv;
                                }
                            }
                        }
                    }
                });
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape: VarShape::Chan(c, od),
    })
}

pub fn concat_channels(tape: &mut Tape, a: &Var, b: &Var) -> Result<Var> {
    let (ca, da) = a.chan_parts();
    let (cb, db) = b.chan_parts();
    if da != db {
        return Err(shape_err("concat", format!("dims {da} vs {db}")));
    }
    let mut out = Vec::with_capacity((ca + cb) * da.voxels());
    out.extend_from_slice(&a.data);
    out.extend_from_slice(&b.data);
    let split = a.shape.len();
    let node = tape.record(&[a, b], || {
        let (an, bn) = (a.node, b.node);
        let (alen, blen) = (a.shape.len(), b.shape.len());
        Box::new(move |gy, grads| {
            if let Some(id) = an {
                grads.add(id, alen, |buf| axpy(buf, &gy[..split], 1.0));
            }
            if let Some(id) = bn {
                grads.add(id, blen, |buf| axpy(buf, &gy[split..], 1.0));
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape: VarShape::Chan(ca + cb, da),
    })
}

pub fn leaky_relu(tape: &mut Tape, x: &Var, slope: f64) -> Var {
    let out: Vec<f64> = x.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
    let node = tape.record(&[x], || {
        let xd = x.data.clone();
        let xn = x.node;
        let xlen = x.shape.len();
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                grads.add(id, xlen, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gy[i] * if xd[i] > 0.0 { 1.0 } else { slope };
                    }
                });
            }
        })
    });
    Var {
        node,
        data: Arc::new(out),
        shape: x.shape,
    }
}

/// Broadcast-add a per-channel bias vector onto a channel volume.
pub fn add_channel_bias(tape: &mut Tape, x: &Var, bias: &Var) -> Result<Var> {
    let (c, dims) = x.chan_parts();
    if bias.shape.len() != c {
        return Err(shape_err("add_channel_bias", format!("bias len {} != channels {c}", bias.shape.len())));
    }
    let n = dims.voxels();
    let mut out = x.data.as_ref().clone();
    for ch in 0..c {
        let bv = bias.data[ch];
        for v in out[ch * n..(ch + 1) * n].iter_mut() {
            *v += bv;
        }
    }
    let node = tape.record(&[x, bias], || {
        let (xn, bn) = (x.node, bias.node);
        let (xlen, blen) = (x.shape.len(), bias.shape.len());
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                grads.add(id, xlen, |buf| axpy(buf, gy, 1.0));
            }
            if let Some(id) = bn {
                grads.add(id, blen, |buf| {
                    for ch in 0..c {
                        buf[ch] += gy[ch * n..(ch + 1) * n].iter().sum::<f64>();
                    }
                });
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape: x.shape,
    })
}

/// `y = W x + b` for a vector input.
pub fn linear(tape: &mut Tape, w: &Var, x: &Var, b: &Var) -> Result<Var> {
    let (o, i) = match w.shape {
        VarShape::Mat(r, c) => (r, c),
        _ => return Err(shape_err("linear", "weight must be a matrix".into())),
    };
    if x.shape.len() != i || b.shape.len() != o {
        return Err(shape_err("linear", format!("shapes W({o}x{i}) x({}) b({})", x.shape.len(), b.shape.len())));
    }
    let mut out = b.data.as_ref().clone();
    for oi in 0..o {
        out[oi] += dot(&w.data[oi * i..(oi + 1) * i], &x.data);
    }
    let node = tape.record(&[w, x, b], || {
        let (wd, xd) = (w.data.clone(), x.data.clone());
        let (wn, xn, bn) = (w.node, x.node, b.node);
        Box::new(move |gy, grads| {
            if let Some(id) = wn {
                grads.add(id, o * i, |buf| {
                    for oi in 0..o {
                        axpy(&mut buf[oi * i..(oi + 1) * i], &xd, gy[oi]);
                    }
                });
            }
            if let Some(id) = xn {
                grads.add(id, i, |buf| {
                    for oi in 0..o {
                        axpy(buf, &wd[oi * i..(oi + 1) * i], gy[oi]);
                    }
                });
            }
            if let Some(id) = bn {
                grads.add(id, o, |buf| axpy(buf, gy, 1.0));
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape: VarShape::Vector(o),
    })
}

/// `Y = W X + b1ᵀ` where X is `(i, p)`: the linear projection of a feature
/// matrix, column-shared bias.
pub fn mat_project(tape: &mut Tape, w: &Var, x: &Var, b: &Var) -> Result<Var> {
    let (o, i) = match w.shape {
        VarShape::Mat(r, c) => (r, c),
        _ => return Err(shape_err("mat_project", "weight must be a matrix".into())),
    };
    let (xi, p) = match x.shape {
        VarShape::Mat(r, c) => (r, c),
        _ => return Err(shape_err("mat_project", "input must be a matrix".into())),
    };
    if xi != i || b.shape.len() != o {
        return Err(shape_err("mat_project", format!("W({o}x{i}) X({xi}x{p}) b({})", b.shape.len())));
    }
    let mut out = vec![0.0; o * p];
    for oi in 0..o {
        let row = &mut out[oi * p..(oi + 1) * p];
        row.fill(b.data[oi]);
        for ii in 0..i {
            axpy(row, &x.data[ii * p..(ii + 1) * p], w.data[oi * i + ii]);
        }
    }
    let node = tape.record(&[w, x, b], || {
        let (wd, xd) = (w.data.clone(), x.data.clone());
        let (wn, xn, bn) = (w.node, x.node, b.node);
        Box::new(move |gy, grads| {
            if let Some(id) = wn {
                grads.add(id, o * i, |buf| {
                    for oi in 0..o {
                        for ii in 0..i {
                            buf[oi * i + ii] +=
                                dot(&gy[oi * p..(oi + 1) * p], &xd[ii * p..(ii + 1) * p]);
                        }
                    }
                });
            }
            if let Some(id) = xn {
                grads.add(id, i * p, |buf| {
                    for oi in 0..o {
                        for ii in 0..i {
                            axpy(
                                &mut buf[ii * p..(ii + 1) * p],
                                &gy[oi * p..(oi + 1) * p],
                                wd[oi * i + ii],
                            );
                        }
                    }
                });
            }
            if let Some(id) = bn {
                grads.add(id, o, |buf| {
                    for oi in 0..o {
                        buf[oi] += gy[oi * p..(oi + 1) * p].iter().sum::<f64>();
                    }
                });
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape: VarShape::Mat(o, p),
    })
}

/// Reinterpret a channel volume as a `(channels, voxels)` matrix (free).
pub fn flatten_spatial(x: &Var) -> Var {
    let (c, dims) = x.chan_parts();
    Var {
        node: x.node,
        data: x.data.clone(),
        shape: VarShape::Mat(c, dims.voxels()),
    }
}

/// `S = e1ᵀ e2` for `(d, p)` feature matrices; `S` is `(p, p)`.
pub fn gram(tape: &mut Tape, e1: &Var, e2: &Var) -> Result<Var> {
    let (d1, p1) = match e1.shape {
        VarShape::Mat(r, c) => (r, c),
        _ => return Err(shape_err("gram", "e1 must be a matrix".into())),
    };
    let (d2, p2) = match e2.shape {
        VarShape::Mat(r, c) => (r, c),
        _ => return Err(shape_err("gram", "e2 must be a matrix".into())),
    };
    if d1 != d2 || p1 != p2 {
        return Err(shape_err("gram", format!("e1({d1}x{p1}) vs e2({d2}x{p2})")));
    }
    let (d, p) = (d1, p1);
    let mut out = vec![0.0; p * p];
    out.par_chunks_mut(p).enumerate().for_each(|(ii, row)| {
        for dd in 0..d {
            axpy(row, &e2.data[dd * p..(dd + 1) * p], e1.data[dd * p + ii]);
        }
    });
    let node = tape.record(&[e1, e2], || {
        let (e1d, e2d) = (e1.data.clone(), e2.data.clone());
        let (n1, n2) = (e1.node, e2.node);
        Box::new(move |gy, grads| {
            if let Some(id) = n1 {
                grads.add(id, d * p, |buf| {
                    for dd in 0..d {
                        for ii in 0..p {
                            buf[dd * p + ii] += dot(&gy[ii * p..(ii + 1) * p], &e2d[dd * p..(dd + 1) * p]);
                        }
                    }
                });
            }
            if let Some(id) = n2 {
                grads.add(id, d * p, |buf| {
                    for dd in 0..d {
                        for ii in 0..p {
                            axpy(&mut buf[dd * p..(dd + 1) * p], &gy[ii * p..(ii + 1) * p], e1d[dd * p + ii]);
                        }
                    }
                });
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape: VarShape::Mat(p, p),
    })
}

pub fn scale(tape: &mut Tape, x: &Var, c: f64) -> Var {
    let out: Vec<f64> = x.data.iter().map(|v| v * c).collect();
    let node = tape.record(&[x], || {
        let xn = x.node;
        let xlen = x.shape.len();
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                grads.add(id, xlen, |buf| axpy(buf, gy, c));
            }
        })
    });
    Var {
        node,
        data: Arc::new(out),
        shape: x.shape,
    }
}

fn softmax_groups(x: &[f64], groups: usize, group_len: usize, stride_is_group: bool) -> Vec<f64> {
    // stride_is_group=true: element (g, j) at g*group_len + j (row softmax)
    // stride_is_group=false: element (g, j) at j*groups + g (column softmax over classes)
    let mut out = vec![0.0; x.len()];
    if stride_is_group {
        for g in 0..groups {
            let src = &x[g * group_len..(g + 1) * group_len];
            let dst = &mut out[g * group_len..(g + 1) * group_len];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &s) in dst.iter_mut().zip(src.iter()) {
                *o = (s - max).exp();
                sum += *o;
            }
            for o in dst.iter_mut() {
                *o /= sum;
            }
        }
    } else {
        for g in 0..groups {
            let mut max = f64::NEG_INFINITY;
            for j in 0..group_len {
                max = max.max(x[j * groups + g]);
            }
            let mut sum = 0.0;
            for j in 0..group_len {
                let e = (x[j * groups + g] - max).exp();
                out[j * groups + g] = e;
                sum += e;
            }
            for j in 0..group_len {
                out[j * groups + g] /= sum;
            }
        }
    }
    out
}

fn softmax_backward_groups(p: &[f64], gy: &[f64], buf: &mut [f64], groups: usize, group_len: usize, stride_is_group: bool) {
    if stride_is_group {
        for g in 0..groups {
            let base = g * group_len;
            let mut dotv = 0.0;
            for j in 0..group_len {
                dotv += gy[base + j] * p[base + j];
            }
            for j in 0..group_len {
                buf[base + j] += p[base + j] * (gy[base + j] - dotv);
            }
        }
    } else {
        for g in 0..groups {
            let mut dotv = 0.0;
            for j in 0..group_len {
                dotv += gy[j * groups + g] * p[j * groups + g];
            }
            for j in 0..group_len {
                let idx = j * groups + g;
                buf[idx] += p[idx] * (gy[idx] - dotv);
            }
        }
    }
}

/// Softmax across the class axis (axis 0) of a `(k, ...)` volume or matrix.
pub fn softmax_classes(tape: &mut Tape, x: &Var) -> Var {
    let (k, m) = match x.shape {
        VarShape::Chan(c, d) => (c, d.voxels()),
        VarShape::Mat(r, c) => (r, c),
        _ => panic!("softmax_classes expects a channel volume or matrix"),
    };
    let out = softmax_groups(&x.data, m, k, false);
    let node = tape.record(&[x], || {
        let pd = Arc::new(out.clone());
        let xn = x.node;
        let xlen = x.shape.len();
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                grads.add(id, xlen, |buf| {
                    softmax_backward_groups(&pd, gy, buf, m, k, false);
                });
            }
        })
    });
    Var {
        node,
        data: Arc::new(out),
        shape: x.shape,
    }
}

/// Softmax along each row of a matrix.
pub fn softmax_rows(tape: &mut Tape, x: &Var) -> Var {
    let (r, c) = match x.shape {
        VarShape::Mat(rr, cc) => (rr, cc),
        _ => panic!("softmax_rows expects a matrix"),
    };
    let out = softmax_groups(&x.data, r, c, true);
    let node = tape.record(&[x], || {
        let pd = Arc::new(out.clone());
        let xn = x.node;
        let xlen = x.shape.len();
        Box::new(move |gy, grads| {
            if let Some(id) = xn {
                grads.add(id, xlen, |buf| {
                    softmax_backward_groups(&pd, gy, buf, r, c, true);
                });
            }
        })
    });
    Var {
        node,
        data: Arc::new(out),
        shape: x.shape,
    }
}

/// Label propagation: `out[k][i] = sum_j C[i][j] * pred[k][j]`, i.e. each
/// output position mixes input positions with the weights of `C`'s row `i`.
pub fn propagate_rows(tape: &mut Tape, pred: &Var, c: &Var) -> Result<Var> {
    let (k, p) = match pred.shape {
        VarShape::Mat(r, cc) => (r, cc),
        _ => return Err(shape_err("propagate", "pred must be a matrix".into())),
    };
    let (pr, pc) = match c.shape {
        VarShape::Mat(r, cc) => (r, cc),
        _ => return Err(shape_err("propagate", "C must be a matrix".into())),
    };
    if pr != p || pc != p {
        return Err(shape_err("propagate", format!("pred(|{k}x{p}) vs C({pr}x{pc})")));
    }
    let mut out = vec![0.0; k * p];
    for ki in 0..k {
        let prow = &pred.data[ki * p..(ki + 1) * p];
        for ii in 0..p {
            out[ki * p + ii] = dot(&c.data[ii * p..(ii + 1) * p], prow);
        }
    }
    let node = tape.record(&[pred, c], || {
        let (predd, cd) = (pred.data.clone(), c.data.clone());
        let (pn, cn) = (pred.node, c.node);
        Box::new(move |gy, grads| {
            if let Some(id) = pn {
                grads.add(id, k * p, |buf| {
                    for ki in 0..k {
                        let grow = &gy[ki * p..(ki + 1) * p];
                        let brow = &mut buf[ki * p..(ki + 1) * p];
                        for ii in 0..p {
                            axpy(brow, &cd[ii * p..(ii + 1) * p], grow[ii]);
                        }
                    }
                });
            }
            if let Some(id) = cn {
                grads.add(id, p * p, |buf| {
                    for ii in 0..p {
                        let brow = &mut buf[ii * p..(ii + 1) * p];
                        for ki in 0..k {
                            axpy(brow, &predd[ki * p..(ki + 1) * p], gy[ki * p + ii]);
                        }
                    }
                });
            }
        })
    });
    Ok(Var {
        node,
        data: Arc::new(out),
        shape: VarShape::Mat(k, p),
    })
}

/// Weighted sum of scalar vars.
pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Var {
    let val: f64 = terms.iter().map(|(v, c)| v.scalar_value() * c).sum();
    let inputs: Vec<&Var> = terms.iter().map(|(v, _)| v).collect();
    let node = tape.record(&inputs, || {
        let parts: Vec<(Option<NodeId>, f64)> = terms.iter().map(|(v, c)| (v.node, *c)).collect();
        Box::new(move |gy, grads| {
            for &(n, c) in &parts {
                if let Some(id) = n {
                    grads.add(id, 1, |buf| buf[0] += gy[0] * c);
                }
            }
        })
    });
    Var {
        node,
        data: Arc::new(vec![val]),
        shape: VarShape::Scalar,
    }
}

// ---------------------------------------------------------------------------
// fused loss ops (targets are constants; gradients flow into the prediction)
// ---------------------------------------------------------------------------

pub const DICE_EPS: f64 = 1e-5;
const CE_CLIP: f64 = 1e-7;

fn class_counts(x: &Var) -> Result<(usize, usize)> {
    match x.shape {
        VarShape::Chan(k, d) => Ok((k, d.voxels())),
        VarShape::Mat(k, m) => Ok((k, m)),
        _ => Err(shape_err("loss", "prediction must be (classes, positions)".into())),
    }
}

/// Combined loss `0.5 * (CE + Dice)` of a probability map against a one-hot
/// target. CE is categorical with natural log; Dice is per class with
/// linear-denominator smoothing, averaged over classes.
pub fn dice_ce_loss(tape: &mut Tape, probs: &Var, target: &[f64]) -> Result<Var> {
    let (k, m) = class_counts(probs)?;
    if target.len() != k * m {
        return Err(shape_err("dice_ce", format!("target len {} != {}x{}", target.len(), k, m)));
    }
    let p = &probs.data;
    let mut ce = 0.0;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut tsum = vec![0.0; k];
    for kk in 0..k {
        let base = kk * m;
        for j in 0..m {
            let pv = p[base + j];
            let tv = target[base + j];
            if tv != 0.0 {
                ce -= tv * pv.max(CE_CLIP).ln();
                inter[kk] += pv * tv;
                tsum[kk] += tv;
            }
            psum[kk] += pv;
        }
    }
    ce /= m as f64;
    let mut dice = 0.0;
    for kk in 0..k {
        dice += 1.0 - (2.0 * inter[kk] + DICE_EPS) / (psum[kk] + tsum[kk] + DICE_EPS);
    }
    dice /= k as f64;
    let val = 0.5 * (ce + dice);

    let node = tape.record(&[probs], || {
        let pd = probs.data.clone();
        let td = target.to_vec();
        let pn = probs.node;
        Box::new(move |gy, grads| {
            let Some(id) = pn else { return };
            let g = gy[0];
            grads.add(id, k * m, |buf| {
                // recompute the per-class sums (cheap relative to storage)
                let mut inter = vec![0.0; k];
                let mut psum = vec![0.0; k];
                let mut tsum = vec![0.0; k];
                for kk in 0..k {
                    let base = kk * m;
                    for j in 0..m {
                        inter[kk] += pd[base + j] * td[base + j];
                        psum[kk] += pd[base + j];
                        tsum[kk] += td[base + j];
                    }
                }
                let inv_m = 1.0 / m as f64;
                let inv_k = 1.0 / k as f64;
                for kk in 0..k {
                    let base = kk * m;
                    let den = psum[kk] + tsum[kk] + DICE_EPS;
                    let num = 2.0 * inter[kk] + DICE_EPS;
                    for j in 0..m {
                        let pv = pd[base + j];
                        let tv = td[base + j];
                        let mut d = 0.0;
                        // CE term
                        if tv != 0.0 && pv > CE_CLIP {
                            d += -tv / pv * inv_m;
                        }
                        // Dice term: d/dp [1 - num/den]
                        d += inv_k * (num - 2.0 * tv * den) / (den * den);
                        buf[base + j] += 0.5 * g * d;
                    }
                }
            });
        })
    });
    Ok(Var {
        node,
        data: Arc::new(vec![val]),
        shape: VarShape::Scalar,
    })
}

/// Per-class weighted DiceCE: each class contributes
/// `w_k * 0.5 * (BCE_k + Dice_k)` (one-vs-rest binary CE per channel),
/// averaged over classes.
pub fn dice_ce_per_class_weighted(tape: &mut Tape, probs: &Var, target: &[f64], weights: &[f64]) -> Result<Var> {
    let (k, m) = class_counts(probs)?;
    if target.len() != k * m || weights.len() != k {
        return Err(shape_err(
            "dice_ce_per_class",
            format!("target {} weights {} vs {}x{}", target.len(), weights.len(), k, m),
        ));
    }
    let p = &probs.data;
    let mut val = 0.0;
    for kk in 0..k {
        let base = kk * m;
        let mut bce = 0.0;
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for j in 0..m {
            let pv = p[base + j].clamp(CE_CLIP, 1.0 - CE_CLIP);
            let tv = target[base + j];
            bce -= tv * pv.ln() + (1.0 - tv) * (1.0 - pv).ln();
            inter += p[base + j] * tv;
            psum += p[base + j];
            tsum += tv;
        }
        bce /= m as f64;
        let dice = 1.0 - (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS);
        val += weights[kk] * 0.5 * (bce + dice);
    }
    val /= k as f64;

    let node = tape.record(&[probs], || {
        let pd = probs.data.clone();
        let td = target.to_vec();
        let wd = weights.to_vec();
        let pn = probs.node;
        Box::new(move |gy, grads| {
            let Some(id) = pn else { return };
            let g = gy[0];
            grads.add(id, k * m, |buf| {
                let inv_m = 1.0 / m as f64;
                let inv_k = 1.0 / k as f64;
                for kk in 0..k {
                    let base = kk * m;
                    let mut inter = 0.0;
                    let mut psum = 0.0;
                    let mut tsum = 0.0;
                    for j in 0..m {
                        inter += pd[base + j] * td[base + j];
                        psum += pd[base + j];
                        tsum += td[base + j];
                    }
                    let den = psum + tsum + DICE_EPS;
                    let num = 2.0 * inter + DICE_EPS;
                    let wk = wd[kk];
                    for j in 0..m {
                        let pv = pd[base + j];
                        let tv = td[base + j];
                        let mut d = 0.0;
                        if pv > CE_CLIP && pv < 1.0 - CE_CLIP {
                            d += (-tv / pv + (1.0 - tv) / (1.0 - pv)) * inv_m;
                        }
                        d += (num - 2.0 * tv * den) / (den * den);
                        buf[base + j] += g * wk * 0.5 * d * inv_k;
                    }
                }
            });
        })
    });
    Ok(Var {
        node,
        data: Arc::new(vec![val]),
        shape: VarShape::Scalar,
    })
}

/// Squared-denominator soft dice loss between two probability maps; the
/// second map is a detached constant.
pub fn soft_dice_loss(tape: &mut Tape, p: &Var, q: &[f64]) -> Result<Var> {
    let (k, m) = class_counts(p)?;
    if q.len() != k * m {
        return Err(shape_err("soft_dice", format!("q len {} != {}x{}", q.len(), k, m)));
    }
    let mut val = 0.0;
    let mut score_parts = Vec::with_capacity(k);
    for kk in 0..k {
        let base = kk * m;
        let mut a = 0.0;
        let mut b = 0.0;
        for j in 0..m {
            let pv = p.data[base + j];
            let qv = q[base + j];
            a += pv * qv;
            b += pv * pv + qv * qv;
        }
        score_parts.push((a, b));
        val += (2.0 * a + DICE_EPS) / (b + DICE_EPS);
    }
    val = 1.0 - val / k as f64;

    let node = tape.record(&[p], || {
        let pd = p.data.clone();
        let qd = q.to_vec();
        let pn = p.node;
        Box::new(move |gy, grads| {
            let Some(id) = pn else { return };
            let g = gy[0];
            grads.add(id, k * m, |buf| {
                let inv_k = 1.0 / k as f64;
                for (kk, &(a, b)) in score_parts.iter().enumerate() {
                    let base = kk * m;
                    let den = b + DICE_EPS;
                    let num = 2.0 * a + DICE_EPS;
                    for j in 0..m {
                        let pv = pd[base + j];
                        let qv = qd[base + j];
                        // d/dp [-(num/den)/k] = -(2q*den - num*2p) / den^2 / k
                        let d = -(2.0 * qv * den - num * 2.0 * pv) / (den * den) * inv_k;
                        buf[base + j] += g * d;
                    }
                }
            });
        })
    });
    Ok(Var {
        node,
        data: Arc::new(vec![val]),
        shape: VarShape::Scalar,
    })
}

/// Teacher-normalized squared error: `||s - t||^2 / max(||t||^2, floor)`.
pub fn rec_ratio_loss(tape: &mut Tape, s: &Var, t: &[f64]) -> Result<Var> {
    if s.shape.len() != t.len() {
        return Err(shape_err("rec_ratio", format!("{} vs {}", s.shape.len(), t.len())));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (sv, tv) in s.data.iter().zip(t.iter()) {
        num += (sv - tv) * (sv - tv);
        den += tv * tv;
    }
    let den = den.max(1e-8);
    let val = num / den;
    let node = tape.record(&[s], || {
        let sd = s.data.clone();
        let td = t.to_vec();
        let sn = s.node;
        Box::new(move |gy, grads| {
            let Some(id) = sn else { return };
            let g = gy[0];
            grads.add(id, sd.len(), |buf| {
                for j in 0..buf.len() {
                    buf[j] += g * 2.0 * (sd[j] - td[j]) / den;
                }
            });
        })
    });
    Ok(Var {
        node,
        data: Arc::new(vec![val]),
        shape: VarShape::Scalar,
    })
}
