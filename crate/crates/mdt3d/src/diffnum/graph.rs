//! Tape-based reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Graph`] records one computation (typically one training step). Every
//! operation pushes a node holding its forward values and, per parent, a
//! closure mapping the node's output gradient to that parent's gradient
//! contribution. [`Tensor::backward`] walks the tape in reverse construction
//! order, which is a valid topological order by construction.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

type BackFn = Box<dyn Fn(&[f64]) -> Vec<f64>>;

struct Node {
    values: Vec<f64>,
    /// Persistent gradient accumulator; repeated backward calls add into it.
    grad: Vec<f64>,
    requires_grad: bool,
    parents: Vec<(usize, BackFn)>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
}

/// A computation tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
    shape: Vec<usize>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape).finish()
    }
}


fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &self,
        values: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<(usize, BackFn)>,
        requires_grad: bool,
    ) -> Tensor {
        debug_assert_eq!(values.len(), numel(&shape));
        let n = values.len();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { values, grad: vec![0.0; n], requires_grad, parents });
        Tensor { graph: self.clone(), id, shape }
    }

    /// New leaf participating in gradient computation.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(values.len(), numel(shape), "leaf: values/shape mismatch");
        self.push(values, shape.to_vec(), Vec::new(), true)
    }

    /// New constant (no gradient).
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(values.len(), numel(shape), "constant: values/shape mismatch");
        self.push(values, shape.to_vec(), Vec::new(), false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(vec![v], &[1])
    }

    fn same_graph(&self, other: &Graph) {
        debug_assert!(Rc::ptr_eq(&self.inner, &other.inner), "tensors from different graphs");
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Handle to the tape this tensor lives on.
    pub fn graph(&self) -> Graph {
        self.graph.clone()
    }

    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].values.clone()
    }

    /// Scalar value; panics if not a single element.
    pub fn item(&self) -> f64 {
        let v = self.graph.inner.borrow();
        let n = &v.nodes[self.id];
        assert_eq!(n.values.len(), 1, "item() on non-scalar tensor");
        n.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient (zeros before the first backward pass).
    pub fn grad(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.graph.inner.borrow_mut();
        for g in inner.nodes[self.id].grad.iter_mut() {
            *g = 0.0;
        }
    }

    /// Reverse-mode gradient accumulation from a scalar loss.
    pub fn backward(&self) -> Result<(), DiffError> {
        if self.len() != 1 {
            return Err(DiffError::NonScalarLoss(self.shape.clone()));
        }
        let mut inner = self.graph.inner.borrow_mut();
        let mut flow: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        flow[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(g) = flow[id].take() else { continue };
            if !inner.nodes[id].requires_grad {
                continue;
            }
            for (gi, gv) in inner.nodes[id].grad.iter_mut().zip(&g) {
                *gi += gv;
            }
            // Parent contributions computed before mutating other nodes.
            let contributions: Vec<(usize, Vec<f64>)> = inner.nodes[id]
                .parents
                .iter()
                .filter(|(pid, _)| inner.nodes[*pid].requires_grad)
                .map(|(pid, f)| (*pid, f(&g)))
                .collect();
            for (pid, contrib) in contributions {
                let slot = flow[pid].get_or_insert_with(|| vec![0.0; contrib.len()]);
                for (s, c) in slot.iter_mut().zip(&contrib) {
                    *s += c;
                }
            }
        }
        Ok(())
    }

    fn binary_check(&self, other: &Tensor, op: &'static str) -> Result<(), DiffError> {
        self.graph.same_graph(&other.graph);
        if self.shape != other.shape {
            return Err(DiffError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        self.binary_check(other, "add")?;
        let a = self.value();
        let b = other.value();
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            vec![
                (self.id, Box::new(|g: &[f64]| g.to_vec()) as BackFn),
                (other.id, Box::new(|g: &[f64]| g.to_vec())),
            ],
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        self.binary_check(other, "sub")?;
        let a = self.value();
        let b = other.value();
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            vec![
                (self.id, Box::new(|g: &[f64]| g.to_vec()) as BackFn),
                (other.id, Box::new(|g: &[f64]| g.iter().map(|v| -v).collect())),
            ],
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        self.binary_check(other, "mul")?;
        let a = self.value();
        let b = other.value();
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let (ac, bc) = (a, b);
        let b_for_a = bc.clone();
        let a_for_b = ac;
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            vec![
                (
                    self.id,
                    Box::new(move |g: &[f64]| g.iter().zip(&b_for_a).map(|(g, b)| g * b).collect())
                        as BackFn,
                ),
                (
                    other.id,
                    Box::new(move |g: &[f64]| g.iter().zip(&a_for_b).map(|(g, a)| g * a).collect()),
                ),
            ],
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        self.binary_check(other, "div")?;
        let a = self.value();
        let b = other.value();
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x / y).collect();
        let b1 = b.clone();
        let a1 = a;
        let b2 = b1.clone();
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            vec![
                (
                    self.id,
                    Box::new(move |g: &[f64]| g.iter().zip(&b1).map(|(g, b)| g / b).collect())
                        as BackFn,
                ),
                (
                    other.id,
                    Box::new(move |g: &[f64]| {
                        g.iter()
                            .zip(a1.iter().zip(&b2))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect()
                    }),
                ),
            ],
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| v + c).collect();
        self.graph.push(
            out,
            self.shape.clone(),
            vec![(self.id, Box::new(|g: &[f64]| g.to_vec()) as BackFn)],
            self.requires_grad(),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| v * c).collect();
        self.graph.push(
            out,
            self.shape.clone(),
            vec![(self.id, Box::new(move |g: &[f64]| g.iter().map(|v| v * c).collect()) as BackFn)],
            self.requires_grad(),
        )
    }

    /// Elementwise max(0, x); subgradient 0 at exactly 0.
    pub fn relu(&self) -> Tensor {
        let a = self.value();
        let out: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
        self.graph.push(
            out,
            self.shape.clone(),
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    g.iter().zip(&a).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()
                }) as BackFn,
            )],
            self.requires_grad(),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let s = out.clone();
        self.graph.push(
            out,
            self.shape.clone(),
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    g.iter().zip(&s).map(|(g, s)| g * s * (1.0 - s)).collect()
                }) as BackFn,
            )],
            self.requires_grad(),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let out: Vec<f64> = self.value().iter().map(|v| v.sqrt()).collect();
        let s = out.clone();
        self.graph.push(
            out,
            self.shape.clone(),
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    g.iter().zip(&s).map(|(g, s)| g * 0.5 / s.max(1e-300)).collect()
                }) as BackFn,
            )],
            self.requires_grad(),
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let n = self.len();
        let out = vec![self.value().iter().sum()];
        self.graph.push(
            out,
            vec![1],
            vec![(self.id, Box::new(move |g: &[f64]| vec![g[0]; n]) as BackFn)],
            self.requires_grad(),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Same values, new shape (row-major layout preserved).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, DiffError> {
        if numel(shape) != self.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(self.graph.push(
            self.value(),
            shape.to_vec(),
            vec![(self.id, Box::new(|g: &[f64]| g.to_vec()) as BackFn)],
            self.requires_grad(),
        ))
    }

    /// Forward identity; contributes zero gradient to its input.
    pub fn stop_gradient(&self) -> Tensor {
        self.graph.push(self.value(), self.shape.clone(), Vec::new(), false)
    }

    /// Matrix product: [n, k] x [k, m] -> [n, m].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        self.graph.same_graph(&other.graph);
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let a = self.value();
        let b = other.value();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..m {
                    out[i * m + j] += av * b[p * m + j];
                }
            }
        }
        let b_for_a = b;
        let a_for_b = a;
        Ok(self.graph.push(
            out,
            vec![n, m],
            vec![
                (
                    self.id,
                    Box::new(move |g: &[f64]| {
                        // dA = G B^T
                        let mut da = vec![0.0; n * k];
                        for i in 0..n {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += g[i * m + j] * b_for_a[p * m + j];
                                }
                                da[i * k + p] = acc;
                            }
                        }
                        da
                    }) as BackFn,
                ),
                (
                    other.id,
                    Box::new(move |g: &[f64]| {
                        // dB = A^T G
                        let mut db = vec![0.0; k * m];
                        for i in 0..n {
                            for p in 0..k {
                                let av = a_for_b[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..m {
                                    db[p * m + j] += av * g[i * m + j];
                                }
                            }
                        }
                        db
                    }),
                ),
            ],
            self.requires_grad() || other.requires_grad(),
        ))
    }

    /// Adds a [m] vector to every row of a [n, m] tensor.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor, DiffError> {
        self.graph.same_graph(&bias.graph);
        if self.shape.len() != 2 || bias.len() != self.shape[1] {
            return Err(DiffError::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let b = bias.value();
        let out: Vec<f64> =
            self.value().iter().enumerate().map(|(i, v)| v + b[i % m]).collect();
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            vec![
                (self.id, Box::new(|g: &[f64]| g.to_vec()) as BackFn),
                (
                    bias.id,
                    Box::new(move |g: &[f64]| {
                        let mut db = vec![0.0; m];
                        for i in 0..n {
                            for j in 0..m {
                                db[j] += g[i * m + j];
                            }
                        }
                        db
                    }),
                ),
            ],
            self.requires_grad() || bias.requires_grad(),
        ))
    }

    /// Multiplies every row of a [n, m] tensor by a [m] vector.
    pub fn mul_row_broadcast(&self, scale: &Tensor) -> Result<Tensor, DiffError> {
        self.graph.same_graph(&scale.graph);
        if self.shape.len() != 2 || scale.len() != self.shape[1] {
            return Err(DiffError::ShapeMismatch {
                op: "mul_row_broadcast",
                left: self.shape.clone(),
                right: scale.shape.clone(),
            });
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let s = scale.value();
        let a = self.value();
        let out: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * s[i % m]).collect();
        let s_for_a = s;
        let a_for_s = a;
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            vec![
                (
                    self.id,
                    Box::new(move |g: &[f64]| {
                        g.iter().enumerate().map(|(i, g)| g * s_for_a[i % m]).collect()
                    }) as BackFn,
                ),
                (
                    scale.id,
                    Box::new(move |g: &[f64]| {
                        let mut ds = vec![0.0; m];
                        for i in 0..n {
                            for j in 0..m {
                                ds[j] += g[i * m + j] * a_for_s[i * m + j];
                            }
                        }
                        ds
                    }),
                ),
            ],
            self.requires_grad() || scale.requires_grad(),
        ))
    }

    /// xW + b for x: [n, cin], w: [cin, cout], b: [cout].
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
        self.matmul(w)?.add_row_broadcast(b)
    }

    /// Per-group, per-channel mean of rows of a [n, c] tensor.
    /// `group_of_row[r]` maps row r to its group in [0, n_groups).
    pub fn mean_groups(&self, group_of_row: &[usize], n_groups: usize) -> Result<Tensor, DiffError> {
        if self.shape.len() != 2 || group_of_row.len() != self.shape[0] {
            return Err(DiffError::Invalid {
                op: "mean_groups",
                msg: format!("expected [n,c] with {} row groups", group_of_row.len()),
            });
        }
        let (n, c) = (self.shape[0], self.shape[1]);
        let mut counts = vec![0usize; n_groups];
        for &g in group_of_row {
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(DiffError::EmptyGroup(empty));
        }
        let a = self.value();
        let mut out = vec![0.0; n_groups * c];
        for r in 0..n {
            let g = group_of_row[r];
            for j in 0..c {
                out[g * c + j] += a[r * c + j];
            }
        }
        for g in 0..n_groups {
            for j in 0..c {
                out[g * c + j] /= counts[g] as f64;
            }
        }
        let groups = group_of_row.to_vec();
        Ok(self.graph.push(
            out,
            vec![n_groups, c],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; n * c];
                    for r in 0..n {
                        let gi = groups[r];
                        let cnt = counts[gi] as f64;
                        for j in 0..c {
                            dx[r * c + j] = g[gi * c + j] / cnt;
                        }
                    }
                    dx
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }

    /// Row lookup: out[r] = self[index[r]] for a [g, c] tensor.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor, DiffError> {
        if self.shape.len() != 2 {
            return Err(DiffError::Invalid { op: "gather_rows", msg: "expected 2-d tensor".into() });
        }
        let (gn, c) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= gn) {
            return Err(DiffError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of range {gn}"),
            });
        }
        let a = self.value();
        let n = index.len();
        let mut out = vec![0.0; n * c];
        for (r, &src) in index.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&a[src * c..(src + 1) * c]);
        }
        let idx = index.to_vec();
        Ok(self.graph.push(
            out,
            vec![n, c],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; gn * c];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[r * c + j];
                        }
                    }
                    dx
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }

    /// Flat-index gather with scatter-add backward.
    pub fn gather_elems(&self, index: &[usize]) -> Result<Tensor, DiffError> {
        let n = self.len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(DiffError::Invalid {
                op: "gather_elems",
                msg: format!("index {bad} out of range {n}"),
            });
        }
        let a = self.value();
        let out: Vec<f64> = index.iter().map(|&i| a[i]).collect();
        let idx = index.to_vec();
        Ok(self.graph.push(
            out,
            vec![index.len()],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; n];
                    for (k, &i) in idx.iter().enumerate() {
                        dx[i] += g[k];
                    }
                    dx
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }

    /// Per-group, per-channel max over rows of a [p, c] tensor. The gradient
    /// routes to the argmax row; ties break to the first index.
    pub fn group_max_pool(&self, groups: &[Vec<usize>]) -> Result<Tensor, DiffError> {
        if self.shape.len() != 2 {
            return Err(DiffError::Invalid { op: "group_max_pool", msg: "expected 2-d tensor".into() });
        }
        let (p, c) = (self.shape[0], self.shape[1]);
        let a = self.value();
        let gcount = groups.len();
        let mut out = vec![0.0; gcount * c];
        let mut winners = vec![0usize; gcount * c];
        for (gi, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(DiffError::EmptyGroup(gi));
            }
            if let Some(&bad) = rows.iter().find(|&&r| r >= p) {
                return Err(DiffError::Invalid {
                    op: "group_max_pool",
                    msg: format!("row {bad} out of range {p}"),
                });
            }
            for j in 0..c {
                let mut best = a[rows[0] * c + j];
                let mut best_row = rows[0];
                for &r in &rows[1..] {
                    if a[r * c + j] > best {
                        best = a[r * c + j];
                        best_row = r;
                    }
                }
                out[gi * c + j] = best;
                winners[gi * c + j] = best_row;
            }
        }
        Ok(self.graph.push(
            out,
            vec![gcount, c],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; p * c];
                    for gi in 0..gcount {
                        for j in 0..c {
                            dx[winners[gi * c + j] * c + j] += g[gi * c + j];
                        }
                    }
                    dx
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }

    /// Mean over rows of -log softmax(logits)[label]; max-subtraction stabilized.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor, DiffError> {
        if self.shape.len() != 2 || self.shape[0] != labels.len() {
            return Err(DiffError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("logits {:?} vs {} labels", self.shape, labels.len()),
            });
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        for &l in labels {
            if l >= k {
                return Err(DiffError::LabelOutOfRange { label: l, classes: k });
            }
        }
        let a = self.value();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &a[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            loss -= probs[i * k + labels[i]].max(1e-300).ln();
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        Ok(self.graph.push(
            vec![loss],
            vec![1],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    let scale = g[0] / n as f64;
                    let mut dx = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        dx[i * k + l] -= 1.0;
                    }
                    for v in dx.iter_mut() {
                        *v *= scale;
                    }
                    dx
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }

    /// Mean binary cross-entropy with logits against constant 0/1 targets.
    pub fn bce_with_logits_mean(&self, targets: &[f64]) -> Result<Tensor, DiffError> {
        if self.len() != targets.len() {
            return Err(DiffError::Invalid {
                op: "bce_with_logits_mean",
                msg: format!("{} logits vs {} targets", self.len(), targets.len()),
            });
        }
        let z = self.value();
        let n = z.len().max(1) as f64;
        let mut loss = 0.0;
        for (zi, ti) in z.iter().zip(targets) {
            // max(z,0) - z t + ln(1 + e^{-|z|})
            loss += zi.max(0.0) - zi * ti + (1.0 + (-zi.abs()).exp()).ln();
        }
        loss /= n;
        let targets = targets.to_vec();
        Ok(self.graph.push(
            vec![loss],
            vec![1],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    z.iter()
                        .zip(&targets)
                        .map(|(zi, ti)| g[0] * (1.0 / (1.0 + (-zi).exp()) - ti) / n)
                        .collect()
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }

    /// Sum of smooth-L1 (Huber, beta=1) residuals against constant targets.
    pub fn smooth_l1_sum(&self, targets: &[f64]) -> Result<Tensor, DiffError> {
        if self.len() != targets.len() {
            return Err(DiffError::Invalid {
                op: "smooth_l1_sum",
                msg: format!("{} preds vs {} targets", self.len(), targets.len()),
            });
        }
        let a = self.value();
        let mut loss = 0.0;
        for (x, t) in a.iter().zip(targets) {
            let d = x - t;
            loss += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        let targets = targets.to_vec();
        Ok(self.graph.push(
            vec![loss],
            vec![1],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    a.iter()
                        .zip(&targets)
                        .map(|(x, t)| g[0] * (x - t).clamp(-1.0, 1.0))
                        .collect()
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }

    /// 2D cross-correlation: x [n, cin, h, w], kernel [cout, cin, k, k].
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor, DiffError> {
        self.graph.same_graph(&kernel.graph);
        if self.shape.len() != 4 || kernel.shape.len() != 4 || self.shape[1] != kernel.shape[1] {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                left: self.shape.clone(),
                right: kernel.shape.clone(),
            });
        }
        let (n, cin, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (cout, _, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(DiffError::Invalid {
                op: "conv2d",
                msg: format!("input {h}x{w} too small for kernel {kh}x{kw} with pad {pad}"),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let x = self.value();
        let k = kernel.value();
        let mut out = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for co in 0..cout {
                for ci in 0..cin {
                    let kbase = ((co * cin) + ci) * kh * kw;
                    let xbase = (ni * cin + ci) * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[xbase + iy as usize * w + ix as usize]
                                        * k[kbase + ky * kw + kx];
                                }
                            }
                            out[((ni * cout + co) * ho + oy) * wo + ox] += acc;
                        }
                    }
                }
            }
        }
        let k_for_x = k;
        let x_for_k = x;
        Ok(self.graph.push(
            out,
            vec![n, cout, ho, wo],
            vec![
                (
                    self.id,
                    Box::new(move |g: &[f64]| {
                        let mut dx = vec![0.0; n * cin * h * w];
                        for ni in 0..n {
                            for co in 0..cout {
                                for ci in 0..cin {
                                    let kbase = ((co * cin) + ci) * kh * kw;
                                    let xbase = (ni * cin + ci) * h * w;
                                    for oy in 0..ho {
                                        for ox in 0..wo {
                                            let gv = g[((ni * cout + co) * ho + oy) * wo + ox];
                                            if gv == 0.0 {
                                                continue;
                                            }
                                            for ky in 0..kh {
                                                let iy =
                                                    (oy * stride + ky) as isize - pad as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                for kx in 0..kw {
                                                    let ix = (ox * stride + kx) as isize
                                                        - pad as isize;
                                                    if ix < 0 || ix >= w as isize {
                                                        continue;
                                                    }
                                                    dx[xbase + iy as usize * w + ix as usize] +=
                                                        gv * k_for_x[kbase + ky * kw + kx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        dx
                    }) as BackFn,
                ),
                (
                    kernel.id,
                    Box::new(move |g: &[f64]| {
                        let mut dk = vec![0.0; cout * cin * kh * kw];
                        for ni in 0..n {
                            for co in 0..cout {
                                for ci in 0..cin {
                                    let kbase = ((co * cin) + ci) * kh * kw;
                                    let xbase = (ni * cin + ci) * h * w;
                                    for oy in 0..ho {
                                        for ox in 0..wo {
                                            let gv = g[((ni * cout + co) * ho + oy) * wo + ox];
                                            if gv == 0.0 {
                                                continue;
                                            }
                                            for ky in 0..kh {
                                                let iy =
                                                    (oy * stride + ky) as isize - pad as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                for kx in 0..kw {
                                                    let ix = (ox * stride + kx) as isize
                                                        - pad as isize;
                                                    if ix < 0 || ix >= w as isize {
                                                        continue;
                                                    }
                                                    dk[kbase + ky * kw + kx] += gv
                                                        * x_for_k
                                                            [xbase + iy as usize * w + ix as usize];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        dk
                    }),
                ),
            ],
            self.requires_grad() || kernel.requires_grad(),
        ))
    }

    /// Adds a per-channel bias to a [n, c, h, w] tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor, DiffError> {
        self.graph.same_graph(&bias.graph);
        if self.shape.len() != 4 || bias.len() != self.shape[1] {
            return Err(DiffError::ShapeMismatch {
                op: "add_channel_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        let b = bias.value();
        let mut out = self.value();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] += b[ci];
                }
            }
        }
        Ok(self.graph.push(
            out,
            self.shape.clone(),
            vec![
                (self.id, Box::new(|g: &[f64]| g.to_vec()) as BackFn),
                (
                    bias.id,
                    Box::new(move |g: &[f64]| {
                        let mut db = vec![0.0; c];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                for i in 0..hw {
                                    db[ci] += g[base + i];
                                }
                            }
                        }
                        db
                    }),
                ),
            ],
            self.requires_grad() || bias.requires_grad(),
        ))
    }

    /// Appends one constant channel (e.g. a range mask) to a [n, c, h, w]
    /// tensor. No gradient flows into the appended channel.
    pub fn concat_channel_const(&self, channel: &[f64]) -> Result<Tensor, DiffError> {
        if self.shape.len() != 4 || channel.len() != self.shape[2] * self.shape[3] {
            return Err(DiffError::Invalid {
                op: "concat_channel_const",
                msg: format!(
                    "input {:?} vs channel of {} cells",
                    self.shape,
                    channel.len()
                ),
            });
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let hw = h * w;
        let x = self.value();
        let mut out = Vec::with_capacity(n * (c + 1) * hw);
        for ni in 0..n {
            out.extend_from_slice(&x[ni * c * hw..(ni + 1) * c * hw]);
            out.extend_from_slice(channel);
        }
        Ok(self.graph.push(
            out,
            vec![n, c + 1, h, w],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        dx[ni * c * hw..(ni + 1) * c * hw]
                            .copy_from_slice(&g[ni * (c + 1) * hw..ni * (c + 1) * hw + c * hw]);
                    }
                    dx
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }

    /// Scatters voxel features [g, c] onto a BEV plane [1, c, h, w] combining
    /// voxels that share a cell by elementwise max. Empty cells stay zero; the
    /// gradient routes to the winning voxel (first on ties).
    pub fn scatter_max_bev(
        &self,
        cell_of_voxel: &[(usize, usize)],
        h: usize,
        w: usize,
    ) -> Result<Tensor, DiffError> {
        if self.shape.len() != 2 || cell_of_voxel.len() != self.shape[0] {
            return Err(DiffError::Invalid {
                op: "scatter_max_bev",
                msg: format!("{} voxel features vs {} cells", self.shape[0], cell_of_voxel.len()),
            });
        }
        let (gn, c) = (self.shape[0], self.shape[1]);
        let a = self.value();
        let mut out = vec![0.0; c * h * w];
        // winner[c * h * w]: usize::MAX marks an empty cell
        let mut winner = vec![usize::MAX; c * h * w];
        for v in 0..gn {
            let (ix, iy) = cell_of_voxel[v];
            if ix >= h || iy >= w {
                return Err(DiffError::Invalid {
                    op: "scatter_max_bev",
                    msg: format!("cell ({ix}, {iy}) outside {h}x{w} plane"),
                });
            }
            for j in 0..c {
                let o = j * h * w + ix * w + iy;
                if winner[o] == usize::MAX || a[v * c + j] > out[o] {
                    out[o] = a[v * c + j];
                    winner[o] = v;
                }
            }
        }
        Ok(self.graph.push(
            out,
            vec![1, c, h, w],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; gn * c];
                    for j in 0..c {
                        for cell in 0..h * w {
                            let o = j * h * w + cell;
                            if winner[o] != usize::MAX {
                                dx[winner[o] * c + j] += g[o];
                            }
                        }
                    }
                    dx
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }

    /// Bilinear crop-pool of an axis-aligned footprint on a [1, c, h, w] map.
    /// `center` and `half_size` are in continuous cell coordinates of this map
    /// (x along h, y along w). Returns a flat [n*n*c] feature.
    pub fn bilinear_roi(
        &self,
        center: (f64, f64),
        half_size: (f64, f64),
        n: usize,
    ) -> Result<Tensor, DiffError> {
        if self.shape.len() != 4 || self.shape[0] != 1 {
            return Err(DiffError::Invalid {
                op: "bilinear_roi",
                msg: format!("expected [1,c,h,w], got {:?}", self.shape),
            });
        }
        let (c, h, w) = (self.shape[1], self.shape[2], self.shape[3]);
        let x = self.value();
        let mut out = vec![0.0; n * n * c];
        // (out index, input index, weight) triples for the backward pass
        let mut taps: Vec<(usize, usize, f64)> = Vec::with_capacity(n * n * c * 4);
        for gi in 0..n {
            for gj in 0..n {
                let sx = center.0 - half_size.0 + (gi as f64 + 0.5) * (2.0 * half_size.0 / n as f64);
                let sy = center.1 - half_size.1 + (gj as f64 + 0.5) * (2.0 * half_size.1 / n as f64);
                // continuous coords relative to cell centers
                let fx = (sx - 0.5).clamp(0.0, (h - 1) as f64);
                let fy = (sy - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let y0 = fy.floor() as usize;
                let x1 = (x0 + 1).min(h - 1);
                let y1 = (y0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let wy = fy - y0 as f64;
                let corners = [
                    (x0, y0, (1.0 - wx) * (1.0 - wy)),
                    (x0, y1, (1.0 - wx) * wy),
                    (x1, y0, wx * (1.0 - wy)),
                    (x1, y1, wx * wy),
                ];
                for ci in 0..c {
                    let oi = (gi * n + gj) * c + ci;
                    for &(xi, yi, wt) in &corners {
                        if wt == 0.0 {
                            continue;
                        }
                        let ii = ci * h * w + xi * w + yi;
                        out[oi] += wt * x[ii];
                        taps.push((oi, ii, wt));
                    }
                }
            }
        }
        let in_len = c * h * w;
        Ok(self.graph.push(
            out,
            vec![n * n * c],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; in_len];
                    for &(oi, ii, wt) in &taps {
                        dx[ii] += g[oi] * wt;
                    }
                    dx
                }) as BackFn,
            )],
            self.requires_grad(),
        ))
    }
}

/// Stacks tensors along dim 0. Inputs may be [c] (treated as one row) or
/// [r, c]; all must share the column count.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor, DiffError> {
    assert!(!parts.is_empty(), "concat_rows: no inputs");
    let graph = parts[0].graph.clone();
    let cols = *parts[0].shape.last().unwrap();
    let mut total = 0;
    let mut offsets = Vec::with_capacity(parts.len());
    for p in parts {
        graph.same_graph(&p.graph);
        let (r, c) = match p.shape.len() {
            1 => (1, p.shape[0]),
            2 => (p.shape[0], p.shape[1]),
            _ => {
                return Err(DiffError::Invalid {
                    op: "concat_rows",
                    msg: format!("expected 1-d or 2-d input, got {:?}", p.shape),
                })
            }
        };
        if c != cols {
            return Err(DiffError::ShapeMismatch {
                op: "concat_rows",
                left: vec![cols],
                right: vec![c],
            });
        }
        offsets.push((total, r));
        total += r;
    }
    let mut values = Vec::with_capacity(total * cols);
    for p in parts {
        values.extend_from_slice(&p.value());
    }
    let mut parents: Vec<(usize, BackFn)> = Vec::with_capacity(parts.len());
    let mut requires = false;
    for (p, &(row0, rows)) in parts.iter().zip(&offsets) {
        requires |= p.requires_grad();
        parents.push((
            p.id,
            Box::new(move |g: &[f64]| g[row0 * cols..(row0 + rows) * cols].to_vec()) as BackFn,
        ));
    }
    Ok(graph.push(values, vec![total, cols], parents, requires))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g() -> Graph {
        Graph::new()
    }

    #[test]
    fn linear_identity_and_sum() {
        let gr = g();
        let x = gr.leaf(vec![1.0, 2.0], &[1, 2]);
        let w = gr.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = gr.constant(vec![0.0, 0.0], &[2]);
        let y = x.linear(&w, &b).unwrap();
        assert_eq!(y.value(), vec![1.0, 2.0]);

        let w2 = gr.constant(vec![1.0, 1.0], &[2, 1]);
        let b2 = gr.constant(vec![0.0], &[1]);
        let y2 = x.linear(&w2, &b2).unwrap();
        assert_eq!(y2.value(), vec![3.0]);
    }

    #[test]
    fn linear_shape_mismatch_reports_both_shapes() {
        let gr = g();
        let x = gr.leaf(vec![1.0, 2.0], &[1, 2]);
        let w = gr.constant(vec![1.0, 2.0, 3.0], &[3, 1]);
        let b = gr.constant(vec![0.0], &[1]);
        match x.linear(&w, &b) {
            Err(DiffError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![1, 2]);
                assert_eq!(right, vec![3, 1]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn relu_values() {
        let gr = g();
        let x = gr.leaf(vec![-1.0, 0.0, 2.0], &[3]);
        assert_eq!(x.relu().value(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let gr = g();
        let x = gr.leaf(vec![1.0, 2.0, 3.0], &[3]);
        x.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_matches_hand_derivative() {
        let gr = g();
        let x = gr.leaf(vec![1.0, 2.0], &[2]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let gr = g();
        let x = gr.leaf(vec![1.0, 2.0], &[2]);
        assert!(matches!(x.backward(), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let gr = g();
        let x = gr.leaf(vec![0.5, -1.5, 2.0], &[3]);
        let l1 = x.mul(&x).unwrap().sum();
        let l2 = x.relu().sum();
        let combined = l1.mul_scalar(2.0).add(&l2.mul_scalar(3.0)).unwrap();
        combined.backward().unwrap();
        let g_combined = x.grad();

        let gr2 = g();
        let x2 = gr2.leaf(vec![0.5, -1.5, 2.0], &[3]);
        let l1 = x2.mul(&x2).unwrap().sum();
        l1.backward().unwrap();
        let ga = x2.grad();
        let gr3 = g();
        let x3 = gr3.leaf(vec![0.5, -1.5, 2.0], &[3]);
        let l2 = x3.relu().sum();
        l2.backward().unwrap();
        let gb = x3.grad();
        for i in 0..3 {
            assert!((g_combined[i] - (2.0 * ga[i] + 3.0 * gb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let gr = g();
        let x = gr.leaf(vec![1.0, 2.0], &[2]);
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad(), vec![2.0, 2.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad(), vec![1.0, 1.0]);
    }

    #[test]
    fn stop_gradient_blocks_exactly_one_path() {
        let gr = g();
        let x = gr.leaf(vec![1.5, -0.5], &[2]);
        let sg = x.stop_gradient();
        assert_eq!(sg.value(), x.value());
        let y = x.add(&sg).unwrap().sum();
        y.backward().unwrap();
        // d(x + SG(x))/dx = 1, not 2
        assert_eq!(x.grad(), vec![1.0, 1.0]);

        let gr2 = g();
        let x2 = gr2.leaf(vec![1.5, -0.5], &[2]);
        x2.stop_gradient().sum().backward().unwrap();
        assert_eq!(x2.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_ce_symmetric_and_saturated() {
        let gr = g();
        let l = gr.leaf(vec![0.0, 0.0], &[1, 2]);
        let loss = l.softmax_cross_entropy(&[0]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);

        let l2 = gr.leaf(vec![100.0, 0.0], &[1, 2]);
        assert!(l2.softmax_cross_entropy(&[0]).unwrap().item() < 1e-10);

        let l3 = gr.leaf(vec![0.0, 0.0], &[1, 2]);
        assert!(matches!(
            l3.softmax_cross_entropy(&[2]),
            Err(DiffError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn softmax_ce_matches_direct_formula() {
        let gr = g();
        let vals = vec![0.3, -1.2, 0.7, 2.0, 0.1, 0.0, -0.4, 1.1, 0.9, -2.0, 0.2, 0.5];
        let labels = [2, 0, 3];
        let l = gr.leaf(vals.clone(), &[3, 4]);
        let loss = l.softmax_cross_entropy(&labels).unwrap().item();
        let mut expect = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let row = &vals[i * 4..(i + 1) * 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[lab].exp() / z).ln();
        }
        expect /= 3.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn group_max_pool_examples() {
        let gr = g();
        let x = gr.leaf(vec![1.0, 5.0, 3.0, 2.0], &[2, 2]);
        let out = x.group_max_pool(&[vec![0, 1]]).unwrap();
        assert_eq!(out.value(), vec![3.0, 5.0]);
        out.sum().backward().unwrap();
        // grad routes to argmax entries only
        assert_eq!(x.grad(), vec![0.0, 1.0, 1.0, 0.0]);

        let single = x.group_max_pool(&[vec![1]]).unwrap();
        assert_eq!(single.value(), vec![3.0, 2.0]);

        assert!(matches!(x.group_max_pool(&[vec![]]), Err(DiffError::EmptyGroup(0))));
    }

    #[test]
    fn conv2d_identity_and_hand_case() {
        let gr = g();
        // 1x1 identity kernel
        let x = gr.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let k = gr.constant(vec![1.0], &[1, 1, 1, 1]);
        assert_eq!(x.conv2d(&k, 1, 0).unwrap().value(), x.value());

        // 3x3 all-ones kernel on all-ones 3x3 input, pad 1: center is 9
        let x = gr.leaf(vec![1.0; 9], &[1, 1, 3, 3]);
        let k = gr.constant(vec![1.0; 9], &[1, 1, 3, 3]);
        let y = x.conv2d(&k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.value()[4], 9.0);
        assert_eq!(y.value()[0], 4.0);
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let gr = g();
        let x = gr.leaf(vec![0.0; 16], &[1, 2, 2, 4]);
        let k = gr.constant(vec![0.0; 9], &[1, 1, 3, 3]);
        assert!(matches!(x.conv2d(&k, 1, 1), Err(DiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn scatter_max_combines_by_elementwise_max() {
        let gr = g();
        // two voxels on the same cell, features [1,0] and [0,2] -> cell [1,2]
        let x = gr.leaf(vec![1.0, 0.0, 0.0, 2.0], &[2, 2]);
        let bev = x.scatter_max_bev(&[(1, 1), (1, 1)], 3, 3).unwrap();
        let v = bev.value();
        assert_eq!(v[0 * 9 + 4], 1.0);
        assert_eq!(v[1 * 9 + 4], 2.0);
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 2);
    }

    #[test]
    fn scatter_max_empty_grid_is_zero() {
        let gr = g();
        let x = gr.leaf(Vec::new(), &[0, 2]);
        let bev = x.scatter_max_bev(&[], 2, 2).unwrap();
        assert!(bev.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_rows_and_backward_slicing() {
        let gr = g();
        let a = gr.leaf(vec![1.0, 2.0], &[1, 2]);
        let b = gr.leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let c = concat_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        c.gather_elems(&[0, 3]).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad(), vec![1.0, 0.0]);
        assert_eq!(b.grad(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_groups_values() {
        let gr = g();
        let x = gr.leaf(vec![1.0, 3.0, 5.0, 7.0], &[4, 1]);
        let m = x.mean_groups(&[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.value(), vec![2.0, 6.0]);
        assert!(matches!(x.mean_groups(&[0, 0, 0, 0], 2), Err(DiffError::EmptyGroup(1))));
    }

    #[test]
    fn bilinear_roi_center_sample_and_linear_ramp() {
        let gr = g();
        // single sample exactly at the center of cell (1,1) reads that cell
        let mut vals = vec![0.0; 9];
        vals[4] = 7.0;
        let x = gr.leaf(vals, &[1, 1, 3, 3]);
        let roi = x.bilinear_roi((1.5, 1.5), (0.5, 0.5), 1).unwrap();
        assert_eq!(roi.value(), vec![7.0]);

        // bilinear interpolation reproduces a linear field exactly
        let (h, w) = (5usize, 6usize);
        let ramp: Vec<f64> = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                2.0 * r as f64 - 0.5 * c as f64 + 1.0
            })
            .collect();
        let x = gr.leaf(ramp, &[1, 1, h, w]);
        let n = 3;
        let (cx, cy, hx, hy) = (2.3, 3.1, 0.9, 1.2);
        let roi = x.bilinear_roi((cx, cy), (hx, hy), n).unwrap();
        let v = roi.value();
        for gi in 0..n {
            for gj in 0..n {
                let sx = cx - hx + (gi as f64 + 0.5) * (2.0 * hx / n as f64);
                let sy = cy - hy + (gj as f64 + 0.5) * (2.0 * hy / n as f64);
                let expect = 2.0 * (sx - 0.5) - 0.5 * (sy - 0.5) + 1.0;
                assert!((v[gi * n + gj] - expect).abs() < 1e-12);
            }
        }

        // gradient: each sample distributes unit weight over its corners
        roi.sum().backward().unwrap();
        let gsum: f64 = x.grad().iter().sum();
        assert!((gsum - (n * n) as f64).abs() < 1e-12);
    }
}
