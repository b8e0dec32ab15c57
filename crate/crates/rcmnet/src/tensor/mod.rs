//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation records a node holding its parent tensors and a backward
//! closure. `Tensor::backward` replays the recorded graph in reverse creation
//! order (parents always precede children), accumulating gradients into every
//! reachable node and into leaf tensors marked `requires_grad`.

mod ops;

pub use ops::{PoolMode, concat_channels, conv2d, global_pool, linear, mhsa_attention, pool2d};
pub use ops::{batch_norm2d, channel_max, channel_mean};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Box<dyn Fn(&[f64])>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Shared handle to a tensor. Cloning is cheap (reference count bump).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "buffer length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::new_inner(data, shape.to_vec(), false, None))
    }

    /// Leaf parameter tensor; gradients are accumulated on it by `backward`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_inner(vec![0.0; n], shape.to_vec(), false, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_inner(vec![v], vec![], false, None)
    }

    /// Output of a recorded op. Rejects non-finite elements so NaN/Inf surface
    /// at the op that produced them.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: Box<dyn Fn(&[f64])>,
        op_name: &'static str,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        Ok(Tensor::new_inner(
            data,
            shape,
            true,
            Some(Node { parents, backward }),
        ))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Overwrite the buffer in place (optimizer updates, running statistics).
    /// Only valid on leaf tensors; op outputs are immutable.
    pub fn set_data(&self, data: &[f64]) {
        assert!(self.inner.node.is_none(), "op outputs are immutable");
        assert_eq!(data.len(), self.len());
        self.inner.data.borrow_mut().copy_from_slice(data);
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Gradient buffer; zeros when backward never reached this tensor.
    pub fn grad(&self) -> Vec<f64> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.len()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        // Leaves that do not require gradients are skipped; interior op
        // outputs always accumulate so the chain can continue.
        if self.inner.node.is_none() && !self.inner.requires_grad.get() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Visits each recorded op exactly once
    /// in reverse execution order.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        // Reachable set via explicit-stack DFS over parents.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        // Ids are assigned at creation and parents precede children, so
        // descending id is a valid reverse topological order.
        order.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));
        self.accum_grad(&[1.0]);
        for t in &order {
            if let Some(node) = &t.inner.node {
                let g = t.inner.grad.borrow().clone();
                if let Some(g) = g {
                    (node.backward)(&g);
                }
            }
        }
        Ok(())
    }

    // ---- elementwise / structural ops ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.data();
        let b = other.data();
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop(a);
        drop(b);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accum_grad(g);
                pb.accum_grad(g);
            }),
            "add",
        )
    }

    /// Elementwise product with shape broadcasting: both operands must have
    /// the same rank and each extent must match or be 1 in one operand.
    pub fn mul_bcast(&self, other: &Tensor) -> Result<Tensor> {
        ops::mul_bcast(self, other)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        let p = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let gi: Vec<f64> = g.iter().map(|v| v * c).collect();
                p.accum_grad(&gi);
            }),
            "scale",
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let x = self.to_vec();
        let out: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        let p = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let gi: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                p.accum_grad(&gi);
            }),
            "relu",
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let y: Vec<f64> = self.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let p = self.clone();
        let yc = y.clone();
        Tensor::from_op(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let gi: Vec<f64> = g
                    .iter()
                    .zip(&yc)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                p.accum_grad(&gi);
            }),
            "sigmoid",
        )
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        ops::softmax(self, axis)
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let p = self.clone();
        let n = self.len();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g| {
                p.accum_grad(&vec![g[0]; n]);
            }),
            "sum",
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Scalar view of one element by flat index.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        if index >= self.len() {
            return Err(Error::Shape(format!(
                "select index {index} out of range for {} elements",
                self.len()
            )));
        }
        let v = self.data()[index];
        let p = self.clone();
        let n = self.len();
        Tensor::from_op(
            vec![v],
            vec![],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gi = vec![0.0; n];
                gi[index] = g[0];
                p.accum_grad(&gi);
            }),
            "select",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}: element count differs",
                self.shape(),
                shape
            )));
        }
        let p = self.clone();
        Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g| p.accum_grad(g)),
            "reshape",
        )
    }
}

/// Central finite differences of a scalar-valued re-runnable computation with
/// respect to one leaf tensor: (f(x + h e_i) - f(x - h e_i)) / 2h.
///
/// `f` must re-run the forward pass from the tensor's current data.
pub fn finite_diff_grad<F: FnMut() -> f64>(param: &Tensor, mut f: F, h: f64) -> Vec<f64> {
    let n = param.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = finite_diff_at(param, i, &mut f, h);
    }
    out
}

/// Single-coordinate central difference; used for spot checks on large nets.
pub fn finite_diff_at<F: FnMut() -> f64>(param: &Tensor, index: usize, f: &mut F, h: f64) -> f64 {
    let orig = param.to_vec();
    let mut bumped = orig.clone();
    bumped[index] = orig[index] + h;
    param.set_data(&bumped);
    let up = f();
    bumped[index] = orig[index] - h;
    param.set_data(&bumped);
    let down = f();
    param.set_data(&orig);
    (up - down) / (2.0 * h)
}
