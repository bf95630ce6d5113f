//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! Every value is an `f64` array node in a dynamically built DAG. Ops create
//! new nodes holding a backward closure; [`Tensor::backward`] walks the graph
//! in reverse topological order and accumulates gradients into leaves created
//! with [`Tensor::param`]. Single-threaded by design: the training loops rely
//! on bit-exact reproducibility, and all the heavy lifting is delegated to
//! `matrixmultiply` through `ndarray::dot`.

mod conv;
mod nn;
mod opt;

pub use conv::{conv2d_dw, conv2d_dx, conv2d_fwd};
pub use nn::{Act, ConvDecoder, ConvEncoder, GruCell, Linear, Mlp};
pub use opt::Adam;

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &ArrayD<f64>, &[Tensor])>;

struct Node {
    id: usize,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A reference-counted node in the autodiff graph.
pub struct Tensor {
    node: Rc<Node>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.node.id,
            self.shape(),
            self.node.requires_grad
        )
    }
}

fn accumulate(target: &Tensor, g: ArrayD<f64>) {
    if !target.node.requires_grad {
        return;
    }
    let mut slot = target.node.grad.borrow_mut();
    match slot.as_mut() {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

impl Tensor {
    /// Constant leaf; gradients do not flow into it.
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
            }),
        }
    }

    /// Trainable leaf; `backward` accumulates a gradient here.
    pub fn param(data: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                requires_grad: true,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents,
                backward: if requires_grad { Some(backward) } else { None },
                requires_grad,
            }),
        }
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        self.node.data.borrow()
    }

    /// Replace the stored array in place (optimizer updates on leaves).
    pub fn set_data(&self, data: ArrayD<f64>) {
        *self.node.data.borrow_mut() = data;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "value() requires a scalar tensor");
        *d.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Take the accumulated gradient, leaving `None` behind.
    pub fn take_grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow_mut().take()
    }

    /// Cut the graph: same values, gradients stop here.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.data().clone())
    }

    /// Forward: `hard` values. Backward: identity into `self`.
    /// Used for straight-through one-hot samples of categorical latents.
    pub fn straight_through(&self, hard: ArrayD<f64>) -> Tensor {
        assert_eq!(hard.shape(), self.data().shape());
        Tensor::from_op(
            hard,
            vec![self.clone()],
            Box::new(|g, _y, ps| accumulate(&ps[0], g.clone())),
        )
    }

    /// Reverse-mode sweep from a scalar loss. Gradients land on `param` leaves.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar loss");
        assert!(self.node.requires_grad, "loss does not depend on any param");

        // Iterative post-order DFS over parent edges; reverse order is a
        // valid topological schedule (all consumers before producers).
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, pi)) = stack.pop() {
            if pi < t.node.parents.len() {
                let parent = t.node.parents[pi].clone();
                stack.push((t, pi + 1));
                if parent.node.requires_grad && visited.insert(parent.node.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }

        *self.node.grad.borrow_mut() = Some(ArrayD::ones(self.data().raw_dim()));
        for t in order.iter().rev() {
            let Some(back) = &t.node.backward else {
                continue;
            };
            let Some(grad) = t.node.grad.borrow_mut().take() else {
                continue;
            };
            let data = t.node.data.borrow();
            back(&grad, &data, &t.node.parents);
        }
    }

    // ---- elementwise ----

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let out = &*self.data() + &*rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _y, ps| {
                accumulate(&ps[0], g.clone());
                accumulate(&ps[1], g.clone());
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let out = &*self.data() - &*rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _y, ps| {
                accumulate(&ps[0], g.clone());
                accumulate(&ps[1], -g);
            }),
        )
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let out = &*self.data() * &*rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _y, ps| {
                accumulate(&ps[0], g * &*ps[1].data());
                accumulate(&ps[1], g * &*ps[0].data());
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().mapv(|x| x + c);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _y, ps| accumulate(&ps[0], g.clone())),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out = self.data().mapv(|x| x * c);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _y, ps| accumulate(&ps[0], g * c)),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data().mapv(|x| x.max(0.0));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, y, ps| {
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &yy| {
                    if yy <= 0.0 {
                        *d = 0.0
                    }
                });
                accumulate(&ps[0], dx);
            }),
        )
    }

    pub fn elu(&self) -> Tensor {
        let out = self.data().mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, y, ps| {
                // for x <= 0: dy/dx = e^x = y + 1
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &yy| {
                    if yy <= 0.0 {
                        *d *= yy + 1.0
                    }
                });
                accumulate(&ps[0], dx);
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let out = self.data().mapv(f64::tanh);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, y, ps| {
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &yy| *d *= 1.0 - yy * yy);
                accumulate(&ps[0], dx);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.data().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, y, ps| {
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &yy| *d *= yy * (1.0 - yy));
                accumulate(&ps[0], dx);
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let out = self.data().mapv(f64::exp);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, y, ps| accumulate(&ps[0], g * y)),
        )
    }

    /// `ln(x + eps)`; `eps = 0` for exact log on strictly positive inputs.
    pub fn ln_eps(&self, eps: f64) -> Tensor {
        let out = self.data().mapv(|x| (x + eps).ln());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _y, ps| {
                let x = ps[0].data();
                let mut dx = g.clone();
                dx.zip_mut_with(&x, |d, &xx| *d /= xx + eps);
                drop(x);
                accumulate(&ps[0], dx);
            }),
        )
    }

    pub fn softplus(&self) -> Tensor {
        let out = self
            .data()
            .mapv(|x| x.max(0.0) + (1.0 + (-x.abs()).exp()).ln());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _y, ps| {
                let x = ps[0].data();
                let mut dx = g.clone();
                dx.zip_mut_with(&x, |d, &xx| *d *= 1.0 / (1.0 + (-xx).exp()));
                drop(x);
                accumulate(&ps[0], dx);
            }),
        )
    }

    pub fn square(&self) -> Tensor {
        let out = self.data().mapv(|x| x * x);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _y, ps| {
                let x = ps[0].data();
                let dx = g * &x.mapv(|xx| 2.0 * xx);
                drop(x);
                accumulate(&ps[0], dx);
            }),
        )
    }

    /// `sqrt(x + eps)`; the epsilon keeps the gradient finite near zero.
    pub fn sqrt_eps(&self, eps: f64) -> Tensor {
        let out = self.data().mapv(|x| (x + eps).sqrt());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, y, ps| {
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &yy| *d *= 0.5 / yy);
                accumulate(&ps[0], dx);
            }),
        )
    }

    /// `max(x, c)` elementwise; gradient passes only where `x > c`.
    pub fn clamp_min_scalar(&self, c: f64) -> Tensor {
        let out = self.data().mapv(|x| x.max(c));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _y, ps| {
                let x = ps[0].data();
                let mut dx = g.clone();
                dx.zip_mut_with(&x, |d, &xx| {
                    if xx <= c {
                        *d = 0.0
                    }
                });
                drop(x);
                accumulate(&ps[0], dx);
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape: element count mismatch");
        let flat: Vec<f64> = self.data().iter().cloned().collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _y, ps| {
                let pshape = ps[0].data().shape().to_vec();
                let flat: Vec<f64> = g.iter().cloned().collect();
                accumulate(&ps[0], ArrayD::from_shape_vec(IxDyn(&pshape), flat).unwrap());
            }),
        )
    }

    /// Slice `[a, b)` along the first axis.
    pub fn slice_rows(&self, a: usize, b: usize) -> Tensor {
        let out = self
            .data()
            .slice_axis(Axis(0), ndarray::Slice::from(a..b))
            .to_owned();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _y, ps| {
                let mut dx = ArrayD::zeros(ps[0].data().raw_dim());
                dx.slice_axis_mut(Axis(0), ndarray::Slice::from(a..b))
                    .assign(g);
                accumulate(&ps[0], dx);
            }),
        )
    }

    /// Slice `[a, b)` along the second axis of a 2-D tensor.
    pub fn slice_cols(&self, a: usize, b: usize) -> Tensor {
        assert_eq!(self.data().ndim(), 2, "slice_cols: 2-D only");
        let out = self
            .data()
            .slice_axis(Axis(1), ndarray::Slice::from(a..b))
            .to_owned();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _y, ps| {
                let mut dx = ArrayD::zeros(ps[0].data().raw_dim());
                dx.slice_axis_mut(Axis(1), ndarray::Slice::from(a..b))
                    .assign(g);
                accumulate(&ps[0], dx);
            }),
        )
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let rows = parts[0].shape()[0];
        let views: Vec<_> = parts.iter().map(|t| t.node.data.borrow()).collect();
        let views2: Vec<_> = views.iter().map(|d| d.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views2).expect("concat_cols: shape mismatch");
        drop(views);
        let widths: Vec<usize> = parts.iter().map(|t| t.shape()[1]).collect();
        let parents: Vec<Tensor> = parts.iter().map(|t| (*t).clone()).collect();
        let _ = rows;
        Tensor::from_op(
            out,
            parents,
            Box::new(move |g, _y, ps| {
                let mut off = 0;
                for (p, w) in ps.iter().zip(widths.iter()) {
                    let part = g
                        .slice_axis(Axis(1), ndarray::Slice::from(off..off + w))
                        .to_owned();
                    accumulate(p, part);
                    off += w;
                }
            }),
        )
    }

    /// Concatenate tensors along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| t.node.data.borrow()).collect();
        let views2: Vec<_> = views.iter().map(|d| d.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views2).expect("concat_rows: shape mismatch");
        drop(views);
        let heights: Vec<usize> = parts.iter().map(|t| t.shape()[0]).collect();
        let parents: Vec<Tensor> = parts.iter().map(|t| (*t).clone()).collect();
        Tensor::from_op(
            out,
            parents,
            Box::new(move |g, _y, ps| {
                let mut off = 0;
                for (p, h) in ps.iter().zip(heights.iter()) {
                    let part = g
                        .slice_axis(Axis(0), ndarray::Slice::from(off..off + h))
                        .to_owned();
                    accumulate(p, part);
                    off += h;
                }
            }),
        )
    }

    /// Select rows of a 2-D tensor by index (repeats allowed); gradient
    /// scatter-adds back.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let d = self.data();
        let m = d.view().into_dimensionality::<Ix2>().expect("gather_rows: 2-D only");
        let cols = m.ncols();
        let mut out = ndarray::Array2::zeros((idx.len(), cols));
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).assign(&m.row(r));
        }
        drop(d);
        let idx = idx.to_vec();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, _y, ps| {
                let mut dx = ArrayD::zeros(ps[0].data().raw_dim());
                {
                    let mut dxm = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                    for (i, &r) in idx.iter().enumerate() {
                        let mut row = dxm.row_mut(r);
                        row += &gm.row(i);
                    }
                }
                accumulate(&ps[0], dx);
            }),
        )
    }

    // ---- linear algebra ----

    /// 2-D transpose.
    pub fn transpose(&self) -> Tensor {
        let d = self.data();
        let m = d.view().into_dimensionality::<Ix2>().expect("transpose: 2-D only");
        let out = m.t().to_owned().into_dyn();
        drop(d);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _y, ps| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                accumulate(&ps[0], gm.t().to_owned().into_dyn());
            }),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a = self.data();
        let b = rhs.data();
        let am = a.view().into_dimensionality::<Ix2>().expect("matmul lhs: 2-D only");
        let bm = b.view().into_dimensionality::<Ix2>().expect("matmul rhs: 2-D only");
        assert_eq!(am.ncols(), bm.nrows(), "matmul: inner dim mismatch");
        let out = am.dot(&bm).into_dyn();
        drop(a);
        drop(b);
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _y, ps| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                {
                    let b = ps[1].data();
                    let bm = b.view().into_dimensionality::<Ix2>().unwrap();
                    let da = gm.dot(&bm.t()).into_dyn();
                    drop(b);
                    accumulate(&ps[0], da);
                }
                {
                    let a = ps[0].data();
                    let am = a.view().into_dimensionality::<Ix2>().unwrap();
                    let db = am.t().dot(&gm).into_dyn();
                    drop(a);
                    accumulate(&ps[1], db);
                }
            }),
        )
    }

    /// Add a `(C,)` row vector to every row of a `(R, C)` tensor.
    pub fn add_rowvec(&self, bias: &Tensor) -> Tensor {
        let d = self.data();
        let m = d.view().into_dimensionality::<Ix2>().expect("add_rowvec: 2-D only");
        let bd = bias.data();
        let bv = bd.view().into_dimensionality::<Ix1>().expect("add_rowvec: bias 1-D");
        assert_eq!(m.ncols(), bv.len());
        let out = (&m + &bv).into_dyn();
        drop(d);
        drop(bd);
        Tensor::from_op(
            out,
            vec![self.clone(), bias.clone()],
            Box::new(|g, _y, ps| {
                accumulate(&ps[0], g.clone());
                accumulate(&ps[1], g.sum_axis(Axis(0)));
            }),
        )
    }

    /// Scale each row `r` of a `(R, C)` tensor by `v[r]`.
    pub fn mul_colvec(&self, v: &Tensor) -> Tensor {
        let d = self.data();
        let m = d.view().into_dimensionality::<Ix2>().expect("mul_colvec: 2-D only");
        let vd = v.data();
        let vv = vd.view().into_dimensionality::<Ix1>().expect("mul_colvec: v 1-D");
        assert_eq!(m.nrows(), vv.len());
        let col = vv.view().insert_axis(Axis(1));
        let out = (&m * &col).into_dyn();
        drop(d);
        drop(vd);
        Tensor::from_op(
            out,
            vec![self.clone(), v.clone()],
            Box::new(|g, _y, ps| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                {
                    let vd = ps[1].data();
                    let vv = vd.view().into_dimensionality::<Ix1>().unwrap();
                    let dx = (&gm * &vv.view().insert_axis(Axis(1))).into_dyn();
                    drop(vd);
                    accumulate(&ps[0], dx);
                }
                {
                    let xd = ps[0].data();
                    let xm = xd.view().into_dimensionality::<Ix2>().unwrap();
                    let dv = (&gm * &xm).sum_axis(Axis(1)).into_dyn();
                    drop(xd);
                    accumulate(&ps[1], dv);
                }
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![self.clone()],
            Box::new(|g, _y, ps| {
                let gv = g[[0]];
                accumulate(&ps[0], ArrayD::from_elem(ps[0].data().raw_dim(), gv));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum a `(R, C)` tensor over columns, yielding `(R,)`.
    pub fn sum_rows(&self) -> Tensor {
        assert_eq!(self.data().ndim(), 2, "sum_rows: 2-D only");
        let out = self.data().sum_axis(Axis(1));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _y, ps| {
                let cols = ps[0].data().shape()[1];
                let gm = g.view().into_dimensionality::<Ix1>().unwrap();
                let dx = gm
                    .insert_axis(Axis(1))
                    .broadcast((gm.len(), cols))
                    .unwrap()
                    .to_owned()
                    .into_dyn();
                accumulate(&ps[0], dx);
            }),
        )
    }

    // ---- row-wise softmax ----

    pub fn softmax_rows(&self) -> Tensor {
        let out = softmax_rows_data(&self.data());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, y, ps| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let ym = y.view().into_dimensionality::<Ix2>().unwrap();
                let dot = (&gm * &ym).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = (&ym * &(&gm - &dot)).into_dyn();
                accumulate(&ps[0], dx);
            }),
        )
    }

    pub fn log_softmax_rows(&self) -> Tensor {
        let out = log_softmax_rows_data(&self.data());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, y, ps| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let probs = y.mapv(f64::exp);
                let pm = probs.view().into_dimensionality::<Ix2>().unwrap();
                let gsum = gm.sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = (&gm - &(&pm * &gsum)).into_dyn();
                accumulate(&ps[0], dx);
            }),
        )
    }

    // ---- convolution ----

    /// 2-D convolution: input `(B, Ci, H, W)`, weight `(Co, Ci, k, k)`,
    /// bias `(Co,)`.
    pub fn conv2d(&self, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let out = conv::conv2d_fwd(&self.data(), &w.data(), stride, pad);
        let mut out = out;
        conv::add_channel_bias(&mut out, &b.data());
        Tensor::from_op(
            out,
            vec![self.clone(), w.clone(), b.clone()],
            Box::new(move |g, _y, ps| {
                let (h_in, w_in) = {
                    let x = ps[0].data();
                    (x.shape()[2], x.shape()[3])
                };
                accumulate(&ps[0], conv::conv2d_dx(g, &ps[1].data(), stride, pad, h_in, w_in));
                accumulate(&ps[1], conv::conv2d_dw(&ps[0].data(), g, stride, pad));
                accumulate(&ps[2], conv::channel_bias_grad(g));
            }),
        )
    }

    /// Transposed 2-D convolution: input `(B, Ci, H, W)`, weight
    /// `(Ci, Co, k, k)`, bias `(Co,)`. Output spatial size is
    /// `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&self, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (h_out, w_out) = {
            let x = self.data();
            let wd = w.data();
            let k = wd.shape()[2];
            (
                (x.shape()[2] - 1) * stride + k - 2 * pad,
                (x.shape()[3] - 1) * stride + k - 2 * pad,
            )
        };
        let mut out = conv::conv2d_dx(&self.data(), &w.data(), stride, pad, h_out, w_out);
        conv::add_channel_bias(&mut out, &b.data());
        Tensor::from_op(
            out,
            vec![self.clone(), w.clone(), b.clone()],
            Box::new(move |g, _y, ps| {
                accumulate(&ps[0], conv::conv2d_fwd(g, &ps[1].data(), stride, pad));
                accumulate(&ps[1], conv::conv2d_dw(g, &ps[0].data(), stride, pad));
                accumulate(&ps[2], conv::channel_bias_grad(g));
            }),
        )
    }
}

/// Row-wise softmax on a 2-D array (plain data path).
pub fn softmax_rows_data(x: &ArrayD<f64>) -> ArrayD<f64> {
    let m = x.view().into_dimensionality::<Ix2>().expect("softmax: 2-D only");
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out.into_dyn()
}

/// Row-wise log-softmax on a 2-D array (plain data path).
pub fn log_softmax_rows_data(x: &ArrayD<f64>) -> ArrayD<f64> {
    let m = x.view().into_dimensionality::<Ix2>().expect("log_softmax: 2-D only");
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out.into_dyn()
}
