//! Reverse-mode automatic differentiation over row-major f64 tensors.
//!
//! The graph is recorded dynamically during the forward pass: every op
//! allocates a fresh node holding its output data, the handles of its
//! inputs, and a closure that routes an upstream gradient to them. Calling
//! [`backward`](Tensor::backward) on a scalar walks the nodes in reverse
//! topological order, accumulates gradients into every `requires_grad`
//! leaf, then drops the recorded edges — a graph is single-use.
//!
//! Gradients always accumulate (`+=`); a leaf used by several paths
//! receives the sum of all contributions.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
///
/// Ops executed inside produce constant tensors with no graph edges.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackFn = Box<dyn Fn(&[f64])>;

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    leaf: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: RefCell<Vec<Tensor>>,
    back: RefCell<Option<BackFn>>,
    consumed: Cell<bool>,
}

/// An n-dimensional f64 array participating in reverse-mode differentiation.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant leaf tensor.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new_node(data, shape.to_vec(), false, true, Vec::new(), None))
    }

    /// Leaf tensor that accumulates gradients (model parameters).
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new_node(data, shape.to_vec(), true, true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::new_node(vec![0.0; numel_of(shape)], shape.to_vec(), false, true, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::new_node(vec![value; numel_of(shape)], shape.to_vec(), false, true, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::new_node(vec![value], vec![1], false, true, Vec::new(), None)
    }

    fn new_node(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        leaf: bool,
        parents: Vec<Tensor>,
        back: Option<BackFn>,
    ) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                requires_grad,
                leaf,
                grad: RefCell::new(None),
                parents: RefCell::new(parents),
                back: RefCell::new(back),
                consumed: Cell::new(false),
            }),
        }
    }

    /// Records a new op node. When gradient tracking is off (or no parent
    /// requires a gradient) the edges are dropped and the result is a
    /// plain constant.
    pub(crate) fn make_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        back: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        if track {
            Self::new_node(data, shape, true, false, parents, Some(Box::new(back)))
        } else {
            Self::new_node(data, shape, false, true, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Copies the data out.
    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Runs `f` over the borrowed data without copying.
    pub fn with_data<T>(&self, f: impl FnOnce(&[f64]) -> T) -> T {
        f(&self.node.data.borrow())
    }

    /// Value of a one-element tensor.
    pub fn item_first(&self) -> f64 { self.node.data.borrow()[0] }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.node.data.borrow()[0]
    }

    /// Accumulated gradient of a leaf, if any has been computed.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrites the data of a leaf tensor (optimizer updates).
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape(format!(
                "set_data length {} vs numel {}",
                data.len(),
                self.numel()
            )));
        }
        self.node.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn accum_grad(&self, contrib: &[f64]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gv, c) in g.iter_mut().zip(contrib) {
                    *gv += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Like [`accum_grad`](Self::accum_grad) but takes ownership, so the
    /// first contribution moves instead of copying.
    pub(crate) fn accum_grad_vec(&self, contrib: Vec<f64>) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gv, c) in g.iter_mut().zip(&contrib) {
                    *gv += c;
                }
            }
            None => *slot = Some(contrib),
        }
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    /// Reverse-mode pass from a scalar loss.
    ///
    /// Every `requires_grad` leaf reachable from `self` ends up holding
    /// `d self / d leaf` in its grad slot. The recorded graph is freed on
    /// the way out; calling backward a second time on the same graph is a
    /// contract error.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.node.consumed.get() {
            return Err(Error::Contract(
                "backward called twice on the same graph".into(),
            ));
        }
        if !self.node.requires_grad {
            // Nothing reachable requires a gradient; trivially done.
            return Ok(());
        }

        // Iterative post-order DFS for a topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.contains_key(&t.id()) {
                continue;
            }
            visited.insert(t.id(), ());
            stack.push((t.clone(), true));
            for p in t.node.parents.borrow().iter() {
                if p.node.requires_grad && !visited.contains_key(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        self.accum_grad(&[1.0]);
        for t in order.iter().rev() {
            let g = t.node.grad.borrow_mut().take();
            if let Some(g) = g {
                if let Some(back) = t.node.back.borrow_mut().take() {
                    back(&g);
                }
                if t.node.leaf {
                    *t.node.grad.borrow_mut() = Some(g);
                }
            }
            if !t.node.leaf {
                t.node.consumed.set(true);
                t.node.parents.borrow_mut().clear();
            }
        }
        self.node.consumed.set(true);
        Ok(())
    }
}

// ── Broadcast helpers ───────────────────────────────────────────────

/// Supported broadcast: identical shapes, or one side is a single element.
fn binary_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::Shape(format!(
            "{op}: incompatible shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn bval(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

/// Sums `contrib` down to a single element when the original operand was
/// a broadcast scalar.
fn reduce_for(operand: &Tensor, contrib: Vec<f64>) -> Vec<f64> {
    if operand.numel() == 1 && contrib.len() > 1 {
        vec![contrib.iter().sum()]
    } else {
        contrib
    }
}

// ── Elementwise ops ─────────────────────────────────────────────────

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape(self, other, "add")?;
        let (a, b) = (self.clone(), other.clone());
        let out: Vec<f64> = {
            let (da, db) = (a.node.data.borrow(), b.node.data.borrow());
            (0..numel_of(&shape)).map(|i| bval(&da, i) + bval(&db, i)).collect()
        };
        Ok(Tensor::make_op(out, shape, vec![a.clone(), b.clone()], move |g| {
            a.accum_grad_vec(reduce_for(&a, g.to_vec()));
            b.accum_grad_vec(reduce_for(&b, g.to_vec()));
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape(self, other, "sub")?;
        let (a, b) = (self.clone(), other.clone());
        let out: Vec<f64> = {
            let (da, db) = (a.node.data.borrow(), b.node.data.borrow());
            (0..numel_of(&shape)).map(|i| bval(&da, i) - bval(&db, i)).collect()
        };
        Ok(Tensor::make_op(out, shape, vec![a.clone(), b.clone()], move |g| {
            a.accum_grad_vec(reduce_for(&a, g.to_vec()));
            b.accum_grad_vec(reduce_for(&b, g.iter().map(|v| -v).collect()));
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape(self, other, "mul")?;
        let (a, b) = (self.clone(), other.clone());
        let out: Vec<f64> = {
            let (da, db) = (a.node.data.borrow(), b.node.data.borrow());
            (0..numel_of(&shape)).map(|i| bval(&da, i) * bval(&db, i)).collect()
        };
        Ok(Tensor::make_op(out, shape, vec![a.clone(), b.clone()], move |g| {
            let ga: Vec<f64> = {
                let db = b.node.data.borrow();
                g.iter().enumerate().map(|(i, gv)| gv * bval(&db, i)).collect()
            };
            let gb: Vec<f64> = {
                let da = a.node.data.borrow();
                g.iter().enumerate().map(|(i, gv)| gv * bval(&da, i)).collect()
            };
            a.accum_grad_vec(reduce_for(&a, ga));
            b.accum_grad_vec(reduce_for(&b, gb));
        }))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape(self, other, "div")?;
        let (a, b) = (self.clone(), other.clone());
        let out: Vec<f64> = {
            let (da, db) = (a.node.data.borrow(), b.node.data.borrow());
            (0..numel_of(&shape)).map(|i| bval(&da, i) / bval(&db, i)).collect()
        };
        Ok(Tensor::make_op(out, shape, vec![a.clone(), b.clone()], move |g| {
            let ga: Vec<f64> = {
                let db = b.node.data.borrow();
                g.iter().enumerate().map(|(i, gv)| gv / bval(&db, i)).collect()
            };
            let gb: Vec<f64> = {
                let (da, db) = (a.node.data.borrow(), b.node.data.borrow());
                g.iter()
                    .enumerate()
                    .map(|(i, gv)| {
                        let bv = bval(&db, i);
                        -gv * bval(&da, i) / (bv * bv)
                    })
                    .collect()
            };
            a.accum_grad_vec(reduce_for(&a, ga));
            b.accum_grad_vec(reduce_for(&b, gb));
        }))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// `c · x` for a constant `c`.
    pub fn scale(&self, c: f64) -> Tensor {
        let a = self.clone();
        let out: Vec<f64> = a.node.data.borrow().iter().map(|v| c * v).collect();
        let shape = a.shape().to_vec();
        Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let contrib: Vec<f64> = g.iter().map(|v| c * v).collect();
            a.accum_grad_vec(contrib);
        })
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&self, c: f64) -> Tensor {
        let a = self.clone();
        let out: Vec<f64> = a.node.data.borrow().iter().map(|v| c + v).collect();
        let shape = a.shape().to_vec();
        Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            a.accum_grad(g);
        })
    }

    pub fn square(&self) -> Tensor {
        let a = self.clone();
        let out: Vec<f64> = a.node.data.borrow().iter().map(|v| v * v).collect();
        let shape = a.shape().to_vec();
        Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let contrib: Vec<f64> = {
                let da = a.node.data.borrow();
                g.iter().zip(da.iter()).map(|(gv, x)| 2.0 * x * gv).collect()
            };
            a.accum_grad_vec(contrib);
        })
    }

    pub fn relu(&self) -> Tensor {
        let a = self.clone();
        let out: Vec<f64> = a.node.data.borrow().iter().map(|v| v.max(0.0)).collect();
        let shape = a.shape().to_vec();
        Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let contrib: Vec<f64> = {
                let da = a.node.data.borrow();
                g.iter()
                    .zip(da.iter())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect()
            };
            a.accum_grad_vec(contrib);
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let a = self.clone();
        let out: Vec<f64> = a.node.data.borrow().iter().map(|v| sigmoid_f(*v)).collect();
        let shape = a.shape().to_vec();
        let saved = out.clone();
        Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let contrib: Vec<f64> = g
                .iter()
                .zip(&saved)
                .map(|(gv, s)| gv * s * (1.0 - s))
                .collect();
            a.accum_grad_vec(contrib);
        })
    }

    pub fn tanh(&self) -> Tensor {
        let a = self.clone();
        let out: Vec<f64> = a.node.data.borrow().iter().map(|v| v.tanh()).collect();
        let shape = a.shape().to_vec();
        let saved = out.clone();
        Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let contrib: Vec<f64> = g.iter().zip(&saved).map(|(gv, t)| gv * (1.0 - t * t)).collect();
            a.accum_grad_vec(contrib);
        })
    }

    /// Exact Gaussian-CDF GELU: `x · Φ(x)`.
    ///
    /// The CDF values are kept for the backward pass, which then only has
    /// to add the `x·φ(x)` term.
    pub fn gelu(&self) -> Tensor {
        let a = self.clone();
        let cdf: Vec<f64> = {
            let da = a.node.data.borrow();
            par_map(&da, norm_cdf)
        };
        let out: Vec<f64> = {
            let da = a.node.data.borrow();
            da.iter().zip(&cdf).map(|(x, c)| x * c).collect()
        };
        let shape = a.shape().to_vec();
        Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let contrib: Vec<f64> = {
                let da = a.node.data.borrow();
                par_map3(g, &da, &cdf, |gv, x, c| gv * (c + x * norm_pdf(x)))
            };
            a.accum_grad_vec(contrib);
        })
    }

    /// Hard clamp to `[lo, hi]`; gradient is zero outside the band.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let a = self.clone();
        let out: Vec<f64> = a.node.data.borrow().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = a.shape().to_vec();
        Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let contrib: Vec<f64> = {
                let da = a.node.data.borrow();
                g.iter()
                    .zip(da.iter())
                    .map(|(gv, x)| if *x >= lo && *x <= hi { *gv } else { 0.0 })
                    .collect()
            };
            a.accum_grad_vec(contrib);
        })
    }

    pub fn sum(&self) -> Tensor {
        let a = self.clone();
        let total: f64 = a.node.data.borrow().iter().sum();
        let n = a.numel();
        Tensor::make_op(vec![total], vec![1], vec![a.clone()], move |g| {
            a.accum_grad_vec(vec![g[0]; n]);
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }
}

// ── Shape ops ───────────────────────────────────────────────────────

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let a = self.clone();
        let out = a.node.data.borrow().clone();
        Ok(Tensor::make_op(out, shape.to_vec(), vec![a.clone()], move |g| {
            a.accum_grad(g);
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "transpose_last2 needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        let rows = self.shape()[rank - 2];
        let cols = self.shape()[rank - 1];
        let batch = self.numel() / (rows * cols);
        let mut shape = self.shape().to_vec();
        shape[rank - 2] = cols;
        shape[rank - 1] = rows;

        let a = self.clone();
        let out = {
            let da = a.node.data.borrow();
            let mut out = vec![0.0; da.len()];
            for b in 0..batch {
                let src = &da[b * rows * cols..(b + 1) * rows * cols];
                let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dst[c * rows + r] = src[r * cols + c];
                    }
                }
            }
            out
        };
        Ok(Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let mut contrib = vec![0.0; g.len()];
            for b in 0..batch {
                let src = &g[b * rows * cols..(b + 1) * rows * cols];
                let dst = &mut contrib[b * rows * cols..(b + 1) * rows * cols];
                // g has shape (cols, rows) per batch; transpose back.
                for c in 0..cols {
                    for r in 0..rows {
                        dst[r * cols + c] = src[c * rows + r];
                    }
                }
            }
            a.accum_grad_vec(contrib);
        }))
    }

    /// Selects channel `c` along the last axis, dropping that axis.
    pub fn index_last(&self, c: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 1 || c >= self.shape()[rank - 1] {
            return Err(Error::Shape(format!(
                "index_last {c} out of bounds for {:?}",
                self.shape()
            )));
        }
        let ch = self.shape()[rank - 1];
        let outer = self.numel() / ch;
        let shape: Vec<usize> = self.shape()[..rank - 1].to_vec();
        let a = self.clone();
        let out: Vec<f64> = {
            let da = a.node.data.borrow();
            (0..outer).map(|i| da[i * ch + c]).collect()
        };
        Ok(Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let mut contrib = vec![0.0; outer * ch];
            for (i, gv) in g.iter().enumerate() {
                contrib[i * ch + c] = *gv;
            }
            a.accum_grad_vec(contrib);
        }))
    }

    /// First-order difference along the last axis: `d[t] = x[t+1] - x[t]`.
    pub fn time_diff(&self) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 1 || self.shape()[rank - 1] < 2 {
            return Err(Error::Shape(format!(
                "time_diff needs a last axis of length >= 2, got {:?}",
                self.shape()
            )));
        }
        let l = self.shape()[rank - 1];
        let rows = self.numel() / l;
        let mut shape = self.shape().to_vec();
        shape[rank - 1] = l - 1;
        let a = self.clone();
        let out: Vec<f64> = {
            let da = a.node.data.borrow();
            let mut out = Vec::with_capacity(rows * (l - 1));
            for r in 0..rows {
                let row = &da[r * l..(r + 1) * l];
                for t in 0..l - 1 {
                    out.push(row[t + 1] - row[t]);
                }
            }
            out
        };
        Ok(Tensor::make_op(out, shape, vec![a.clone()], move |g| {
            let mut contrib = vec![0.0; rows * l];
            for r in 0..rows {
                for t in 0..l - 1 {
                    let gv = g[r * (l - 1) + t];
                    contrib[r * l + t + 1] += gv;
                    contrib[r * l + t] -= gv;
                }
            }
            a.accum_grad_vec(contrib);
        }))
    }
}

// ── Affine (pointwise channel mixing) ───────────────────────────────

impl Tensor {
    /// `y = x · W + b` applied independently at every leading position.
    ///
    /// `x: (..., C_in)`, `w: (C_in, C_out)`, `b: (C_out)`.
    pub fn affine(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 1 {
            return Err(Error::Shape("affine input must have a channel axis".into()));
        }
        let c_in = self.shape()[rank - 1];
        if w.shape().len() != 2 || w.shape()[0] != c_in {
            return Err(Error::Shape(format!(
                "affine: input channels {} vs weight {:?}",
                c_in,
                w.shape()
            )));
        }
        let c_out = w.shape()[1];
        if b.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "affine: bias {:?} vs weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
        let rows = self.numel() / c_in;
        let mut shape = self.shape().to_vec();
        shape[rank - 1] = c_out;

        let (x, wt, bt) = (self.clone(), w.clone(), b.clone());
        let out = {
            let dx = x.node.data.borrow();
            let dw = wt.node.data.borrow();
            let db = bt.node.data.borrow();
            let mut out = Vec::with_capacity(rows * c_out);
            for _ in 0..rows {
                out.extend_from_slice(&db);
            }
            linalg::matmul_acc(&dx, &dw, &mut out, rows, c_in, c_out);
            out
        };
        Ok(Tensor::make_op(out, shape, vec![x.clone(), wt.clone(), bt.clone()], move |g| {
            if x.node.requires_grad {
                // dX = g · Wᵀ
                let w_t = {
                    let dw = wt.node.data.borrow();
                    linalg::transpose(&dw, c_in, c_out)
                };
                let mut gx = vec![0.0; rows * c_in];
                linalg::matmul_acc(g, &w_t, &mut gx, rows, c_out, c_in);
                x.accum_grad_vec(gx);
            }
            if wt.node.requires_grad {
                // dW = Xᵀ · g
                let mut gw = vec![0.0; c_in * c_out];
                {
                    let dx = x.node.data.borrow();
                    linalg::matmul_tn_acc(&dx, g, &mut gw, rows, c_in, c_out);
                }
                wt.accum_grad_vec(gw);
            }
            if bt.node.requires_grad {
                let mut gb = vec![0.0; c_out];
                for r in 0..rows {
                    for j in 0..c_out {
                        gb[j] += g[r * c_out + j];
                    }
                }
                bt.accum_grad_vec(gb);
            }
        }))
    }
}

// ── Elementwise map helpers ─────────────────────────────────────────

const PAR_ELEMS: usize = 1 << 15;

fn band_len(n: usize) -> usize {
    (n / (4 * rayon::current_num_threads())).max(1)
}

fn par_map(x: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    use rayon::prelude::*;
    if x.len() < PAR_ELEMS {
        return x.iter().map(|v| f(*v)).collect();
    }
    let mut out = vec![0.0; x.len()];
    let band = band_len(x.len());
    out.par_chunks_mut(band)
        .zip(x.par_chunks(band))
        .for_each(|(o, xs)| {
            for (ov, xv) in o.iter_mut().zip(xs) {
                *ov = f(*xv);
            }
        });
    out
}

fn par_map3(g: &[f64], x: &[f64], c: &[f64], f: impl Fn(f64, f64, f64) -> f64 + Sync) -> Vec<f64> {
    use rayon::prelude::*;
    debug_assert!(g.len() == x.len() && g.len() == c.len());
    if g.len() < PAR_ELEMS {
        return (0..g.len()).map(|i| f(g[i], x[i], c[i])).collect();
    }
    let mut out = vec![0.0; g.len()];
    let band = band_len(g.len());
    out.par_chunks_mut(band)
        .enumerate()
        .for_each(|(bi, o)| {
            let base = bi * band;
            for (j, ov) in o.iter_mut().enumerate() {
                let i = base + j;
                *ov = f(g[i], x[i], c[i]);
            }
        });
    out
}

// ── Scalar math helpers ─────────────────────────────────────────────

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + crate::fastmath::fexp(-x))
    } else {
        let e = crate::fastmath::fexp(x);
        e / (1.0 + e)
    }
}

/// Standard normal CDF via erf.
pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + crate::fastmath::ferf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn norm_pdf(x: f64) -> f64 {
    crate::fastmath::fexp(-0.5 * x * x) / (2.0 * PI).sqrt()
}

// ── Named parameters ────────────────────────────────────────────────

/// A named, trainable leaf tensor.
///
/// Setting `trainable` to false leaves the value untouched by any
/// optimizer step; gradients may still be computed against it.
pub struct Parameter {
    name: String,
    tensor: Tensor,
    trainable: Cell<bool>,
}

impl Parameter {
    pub fn new(name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Parameter> {
        Ok(Parameter {
            name: name.to_string(),
            tensor: Tensor::variable(data, shape)?,
            trainable: Cell::new(true),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.trainable.get()
    }

    pub fn set_trainable(&self, t: bool) {
        self.trainable.set(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
        assert!(Tensor::from_vec(vec![1.0], &[2]).is_err());
    }

    #[test]
    fn affine_identity_and_forced_arithmetic() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b0 = Tensor::zeros(&[2]);
        let y = x.affine(&w, &b0).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);

        let b = Tensor::from_vec(vec![3.0, 3.0], &[2]).unwrap();
        let y = x.affine(&w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 5.0]);

        let wbad = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        assert!(matches!(x.affine(&wbad, &b0), Err(Error::Shape(_))));
    }

    #[test]
    fn activation_fixed_points() {
        let x = Tensor::from_vec(vec![0.0, -3.0, 3.0_f64.ln()], &[3]).unwrap();
        assert!((x.sigmoid().to_vec()[0] - 0.5).abs() < 1e-15);
        assert!((x.sigmoid().to_vec()[2] - 0.75).abs() < 1e-12);
        assert_eq!(x.tanh().to_vec()[0], 0.0);
        assert_eq!(x.relu().to_vec()[1], 0.0);
        assert_eq!(x.gelu().to_vec()[0], 0.0);
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = Tensor::variable(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::variable(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.square();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_is_contract_error() {
        let x = Tensor::variable(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_accumulates_over_uses() {
        // y = x·x + 3x uses x on two paths; grad must be the sum 2x + 3.
        let x = Tensor::variable(vec![2.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x.scale(3.0)).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::variable(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| x.square().sum());
        assert!(!y.requires_grad());
        assert!(y.backward().is_ok());
        assert!(x.grad().is_none());
    }

    #[test]
    fn activations_pass_grad_check() {
        let xs = vec![0.31, -1.2, 1.7, 0.05, -0.4];
        for f in [
            (|t: &Tensor| t.relu()) as fn(&Tensor) -> Tensor,
            |t| t.gelu(),
            |t| t.sigmoid(),
            |t| t.tanh(),
        ] {
            let rel = grad_check(&xs, |x| f(x).sum());
            assert!(rel < 1e-6, "activation grad rel err {rel}");
        }
    }

    #[test]
    fn composite_grad_check() {
        // loss = Σ sigmoid(W x) with both W and x as leaves.
        let xs = vec![0.5, -0.3, 0.8, 1.1, -0.9, 0.2];
        let rel = grad_check(&xs, |t| {
            let x = t.reshape(&[2, 3]).unwrap();
            let w = Tensor::from_vec(vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.2, -0.1], &[3, 3])
                .unwrap();
            let b = Tensor::zeros(&[3]);
            x.affine(&w, &b).unwrap().sigmoid().sum()
        });
        assert!(rel < 1e-6, "composite grad rel err {rel}");
    }

    #[test]
    fn affine_weight_grad_check() {
        let ws = vec![0.4, -0.6, 0.2, 0.9, -0.1, 0.3];
        let rel = grad_check(&ws, |t| {
            let w = t.reshape(&[2, 3]).unwrap();
            let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 0.7], &[2, 2]).unwrap();
            let b = Tensor::from_vec(vec![0.1, 0.2, -0.3], &[3]).unwrap();
            x.affine(&w, &b).unwrap().square().sum()
        });
        assert!(rel < 1e-6, "affine weight grad rel err {rel}");
    }

    #[test]
    fn clamp_zeroes_gradient_outside_band() {
        let x = Tensor::variable(vec![-1.0, 0.5, 2.0], &[3]).unwrap();
        let loss = x.clamp(0.0, 1.0).sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn broadcast_scalar_ops() {
        let x = Tensor::variable(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = Tensor::variable(vec![2.0], &[1]).unwrap();
        let loss = x.mul(&s).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(s.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn transpose_and_index_round_trip() {
        let x = Tensor::from_vec((0..24).map(|v| v as f64).collect(), &[2, 3, 4]).unwrap();
        let t = x.transpose_last2().unwrap();
        assert_eq!(t.shape(), &[2, 4, 3]);
        let back = t.transpose_last2().unwrap();
        assert_eq!(back.to_vec(), x.to_vec());

        let c1 = x.index_last(1).unwrap();
        assert_eq!(c1.shape(), &[2, 3]);
        assert_eq!(c1.to_vec(), vec![1.0, 5.0, 9.0, 13.0, 17.0, 21.0]);
    }

    #[test]
    fn time_diff_values_and_grad() {
        let x = Tensor::variable(vec![1.0, 3.0, 6.0, 10.0], &[1, 4]).unwrap();
        let d = x.time_diff().unwrap();
        assert_eq!(d.to_vec(), vec![2.0, 3.0, 4.0]);
        let loss = d.square().sum();
        loss.backward().unwrap();
        // d/dx of Σ (x[t+1]-x[t])²
        assert_eq!(x.grad().unwrap(), vec![-4.0, -2.0, -2.0, 8.0]);
    }
}
