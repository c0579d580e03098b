//! Rank-4 tensors with define-by-run reverse-mode differentiation.
//!
//! Every differentiable operation produces a [`Tensor`] that holds its
//! inputs and a backward closure. [`Tensor::backward`] walks the graph in
//! reverse topological order and deposits gradients into leaf buffers:
//! those of [`Parameter`]s and of tensors created with
//! [`Tensor::variable`]. Graphs are rebuilt on each forward pass.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};

/// Scalar type of the engine. Training runs in `f32`, gradient checks in `f64`.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c`, all row-major, `op(a)` is
    /// `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Strides of op(X) for a row-major X stored as rows x cols (or cols x rows
    // when transposed).
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_float {
    ($t:ty, $f:path) => {
        impl Float for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(trans_a, m, k);
                let (rsb, csb) = gemm_strides(trans_b, k, n);
                // SAFETY: the asserted lengths cover every index reachable with
                // these dimensions and strides.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// Converts an `f64` constant into `T`.
#[inline]
pub fn cast<T: Float>(x: f64) -> T {
    T::from_f64(x).expect("finite constant")
}

/// `(n, c, h, w)` extent of a rank-4 tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording a graph on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

static NEXT_NODE: AtomicU64 = AtomicU64::new(0);

/// Maps the upstream gradient to one optional gradient per input. The mask
/// says which inputs need one.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

type GradBuf<T> = Arc<Mutex<Vec<T>>>;

enum NodeKind<T: Float> {
    Leaf(GradBuf<T>),
    Op {
        name: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    },
}

struct Node<T: Float> {
    id: u64,
    kind: NodeKind<T>,
}

impl<T: Float> Node<T> {
    fn new(kind: NodeKind<T>) -> Arc<Self> {
        Arc::new(Node {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            kind,
        })
    }
}

/// Dense `(n, c, h, w)` array, row-major, optionally attached to a graph.
#[derive(Clone)]
pub struct Tensor<T: Float> {
    shape: Shape,
    data: Arc<Vec<T>>,
    node: Option<Arc<Node<T>>>,
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Float> Tensor<T> {
    /// Constant tensor. Panics if `data.len() != shape.numel()`.
    pub fn new(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.numel(),
            "tensor data length does not match shape {shape}"
        );
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn try_new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor::new(shape, data))
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::new(shape, vec![T::zero(); shape.numel()])
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor::new(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(Shape::scalar(), vec![value])
    }

    /// Leaf tensor that accumulates its own gradient.
    pub fn variable(shape: Shape, data: Vec<T>) -> Self {
        let mut t = Tensor::new(shape, data);
        let grad = Arc::new(Mutex::new(vec![T::zero(); shape.numel()]));
        t.node = Some(Node::new(NodeKind::Leaf(grad)));
        t
    }

    pub(crate) fn leaf_of(shape: Shape, data: Arc<Vec<T>>, grad: GradBuf<T>) -> Self {
        let node = grad_enabled().then(|| Node::new(NodeKind::Leaf(grad)));
        Tensor { shape, data, node }
    }

    /// Result of a differentiable operation. The graph node is dropped when
    /// recording is disabled or no input requires a gradient.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Shape,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        let track = grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        let node = track.then(|| {
            Node::new(NodeKind::Op {
                name,
                inputs,
                backward,
            })
        });
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Accumulated gradient of a leaf, `None` for constants and interior nodes.
    pub fn grad(&self) -> Option<Vec<T>> {
        match &self.node.as_ref()?.kind {
            NodeKind::Leaf(g) => Some(g.lock().expect("grad lock").clone()),
            NodeKind::Op { .. } => None,
        }
    }

    pub fn zero_grad(&self) {
        if let Some(NodeKind::Leaf(g)) = self.node.as_ref().map(|n| &n.kind) {
            g.lock().expect("grad lock").fill(T::zero());
        }
    }

    /// Name of the operation that produced this tensor, if it is tracked.
    pub fn op_name(&self) -> Option<&'static str> {
        match &self.node.as_ref()?.kind {
            NodeKind::Op { name, .. } => Some(name),
            NodeKind::Leaf(_) => None,
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    /// Value of a `(1, 1, 1, 1)` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.shape.numel(), 1, "item() on shape {}", self.shape);
        self.data[0]
    }

    pub fn map<U: Float>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Back-propagates from this scalar, adding `d self / d leaf` into every
    /// reachable leaf gradient. Gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.shape != Shape::scalar() {
            return Err(Error::Contract(format!(
                "backward needs a (1, 1, 1, 1) loss, got {}",
                self.shape
            )));
        }
        let Some(root) = &self.node else {
            return Err(Error::Contract(
                "backward on a tensor that is not connected to a graph".into(),
            ));
        };

        let order = topo_order(root);
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(root.id, vec![T::one()]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id) else {
                continue;
            };
            match &node.kind {
                NodeKind::Leaf(buf) => {
                    let mut buf = buf.lock().expect("grad lock");
                    for (b, v) in buf.iter_mut().zip(&g) {
                        *b += *v;
                    }
                }
                NodeKind::Op {
                    inputs, backward, ..
                } => {
                    let needs: Vec<bool> = inputs.iter().map(Tensor::requires_grad).collect();
                    let input_grads = backward(&g, &needs);
                    debug_assert_eq!(input_grads.len(), inputs.len());
                    for (input, ig) in inputs.iter().zip(input_grads) {
                        let (Some(n), Some(ig)) = (&input.node, ig) else {
                            continue;
                        };
                        debug_assert_eq!(ig.len(), input.shape.numel());
                        match grads.get_mut(&n.id) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, v)| *a += *v),
                            None => {
                                grads.insert(n.id, ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order DFS; reversing it visits every node after all its consumers.
fn topo_order<T: Float>(root: &Arc<Node<T>>) -> Vec<Arc<Node<T>>> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack: Vec<(Arc<Node<T>>, bool)> = vec![(Arc::clone(root), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id) {
            continue;
        }
        stack.push((Arc::clone(&node), true));
        if let NodeKind::Op { inputs, .. } = &node.kind {
            for input in inputs.iter().rev() {
                if let Some(n) = &input.node {
                    if !seen.contains(&n.id) {
                        stack.push((Arc::clone(n), false));
                    }
                }
            }
        }
    }
    order
}

struct ParamInner<T: Float> {
    name: String,
    dims: Vec<usize>,
    shape: Shape,
    group: Option<String>,
    norm: bool,
    value: RwLock<Arc<Vec<T>>>,
    grad: GradBuf<T>,
}

/// Learnable tensor. Clones are handles onto the same storage, which is how
/// parameter sharing is expressed.
#[derive(Clone)]
pub struct Parameter<T: Float>(Arc<ParamInner<T>>);

impl<T: Float> fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Parameter({} {:?})", self.0.name, self.0.dims)
    }
}

/// Maps 1-D `(c)` to `(1, c, 1, 1)`; 4-D dims map directly.
fn dims_to_shape(dims: &[usize]) -> Shape {
    match *dims {
        [c] => Shape::new(1, c, 1, 1),
        [a, b] => Shape::new(1, 1, a, b),
        [a, b, c] => Shape::new(1, a, b, c),
        [a, b, c, d] => Shape::new(a, b, c, d),
        _ => panic!("parameter rank must be 1..=4, got {dims:?}"),
    }
}

impl<T: Float> Parameter<T> {
    pub fn new(name: impl Into<String>, dims: &[usize], values: Vec<T>) -> Self {
        let shape = dims_to_shape(dims);
        assert_eq!(values.len(), shape.numel(), "parameter value count");
        Parameter(Arc::new(ParamInner {
            name: name.into(),
            dims: dims.to_vec(),
            shape,
            group: None,
            norm: false,
            value: RwLock::new(Arc::new(values)),
            grad: Arc::new(Mutex::new(vec![T::zero(); shape.numel()])),
        }))
    }

    /// Marks the parameter as belonging to a shared group.
    pub fn in_group(self, group: Option<&str>) -> Self {
        let Some(group) = group else { return self };
        let mut inner = Arc::try_unwrap(self.0)
            .unwrap_or_else(|_| panic!("in_group must be applied before the parameter is shared"));
        inner.group = Some(group.to_string());
        Parameter(Arc::new(inner))
    }

    /// Marks a normalization affine parameter (for weight-decay exemption).
    pub fn as_norm(self) -> Self {
        let mut inner = Arc::try_unwrap(self.0)
            .unwrap_or_else(|_| panic!("as_norm must be applied before the parameter is shared"));
        inner.norm = true;
        Parameter(Arc::new(inner))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.0.dims
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.numel()
    }

    pub fn group(&self) -> Option<&str> {
        self.0.group.as_deref()
    }

    pub fn is_norm(&self) -> bool {
        self.0.norm
    }

    /// Identity of the underlying storage.
    pub fn storage_id(&self) -> usize {
        Arc::as_ptr(&self.0) as *const () as usize
    }

    pub fn same_storage(&self, other: &Parameter<T>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Snapshot of the current values as a graph leaf.
    pub fn tensor(&self) -> Tensor<T> {
        let data = Arc::clone(&self.0.value.read().expect("param lock"));
        Tensor::leaf_of(self.0.shape, data, Arc::clone(&self.0.grad))
    }

    pub fn values(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.0.value.read().expect("param lock"))
    }

    pub fn set_values(&self, values: Vec<T>) {
        assert_eq!(values.len(), self.numel(), "set_values on {}", self.name());
        *self.0.value.write().expect("param lock") = Arc::new(values);
    }

    pub fn fill(&self, v: T) {
        self.set_values(vec![v; self.numel()]);
    }

    /// In-place update; tensors already taken keep their old snapshot.
    pub fn update(&self, f: impl FnOnce(&mut [T])) {
        let mut guard = self.0.value.write().expect("param lock");
        f(Arc::make_mut(&mut *guard).as_mut_slice());
    }

    pub fn grad(&self) -> Vec<T> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        self.0.grad.lock().expect("grad lock").fill(T::zero());
    }
}

/// Named non-learnable state, e.g. normalization running statistics.
#[derive(Clone)]
pub struct Buffer<T: Float>(Arc<BufferInner<T>>);

struct BufferInner<T: Float> {
    name: String,
    values: RwLock<Vec<T>>,
}

impl<T: Float> fmt::Debug for Buffer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Buffer({})", self.0.name)
    }
}

impl<T: Float> Buffer<T> {
    pub fn new(name: impl Into<String>, values: Vec<T>) -> Self {
        Buffer(Arc::new(BufferInner {
            name: name.into(),
            values: RwLock::new(values),
        }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn len(&self) -> usize {
        self.0.values.read().expect("buffer lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self) -> Vec<T> {
        self.0.values.read().expect("buffer lock").clone()
    }

    pub fn set(&self, values: Vec<T>) {
        let mut guard = self.0.values.write().expect("buffer lock");
        assert_eq!(values.len(), guard.len(), "buffer {} length", self.0.name);
        *guard = values;
    }

    pub fn update(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.values.write().expect("buffer lock"));
    }
}
