//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every value in a forward pass is a `[rows, cols]` matrix (sequences are
//! `[time, channels]`, scalars are `[1, 1]`). A [`Graph`] records each op as
//! it is applied; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for the parameters of the one trainable [`ParamStore`] the graph
//! was built against. Weights from any other store enter as constants, which
//! is how frozen probes are wired into the training losses.

use std::collections::HashMap;
use std::fmt;

use ndarray::{s, Array2, ArrayView2, Axis, CowArray, Ix2, Zip};

use crate::real::Real;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name: parameter layouts are
    /// built by code, so a duplicate is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same layout, different float type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::c(x.to_f64().unwrap_or(f64::NAN))))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Zero-filled store with the same layout (optimizer moments, gradient sums).
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and little-endian f32 renderings of every value.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-parameter gradients produced by one backward pass.
pub type Gradients<F> = Vec<Option<Array2<F>>>;

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    Unfold {
        x: Var,
        kernel: usize,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MeanAll(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<F>,
    },
}

struct Node<'p, F: Real> {
    value: CowArray<'p, F, Ix2>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A tape of operations; lives for one forward/backward pass.
pub struct Graph<'p, F: Real> {
    nodes: Vec<Node<'p, F>>,
    trainable: Option<&'p ParamStore<F>>,
    bound: HashMap<(usize, ParamId), Var>,
    stops: StopGradients<F>,
}

/// What `detach` does with the values it cuts off. Recording and replaying
/// them lets finite differences see the same function the tape differentiates.
#[derive(Debug, Default)]
enum StopGradients<F: Real> {
    #[default]
    Pass,
    Record(Vec<Array2<F>>),
    Replay(Vec<Array2<F>>, usize),
}

impl<F: Real> fmt::Debug for Graph<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("bound", &self.bound.len())
            .finish()
    }
}

impl<'p, F: Real> Graph<'p, F> {
    /// Builds a tape whose gradients are taken with respect to `trainable`.
    pub fn new(trainable: Option<&'p ParamStore<F>>) -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            trainable,
            bound: HashMap::new(),
            stops: StopGradients::Pass,
        }
    }

    /// Starts keeping a copy of every detached value, in call order.
    pub fn record_detached(&mut self) {
        self.stops = StopGradients::Record(Vec::new());
    }

    /// Makes successive `detach` calls return `values` in order instead of
    /// their live inputs.
    pub fn replay_detached(&mut self, values: Vec<Array2<F>>) {
        self.stops = StopGradients::Replay(values, 0);
    }

    /// Values recorded since `record_detached`.
    pub fn take_detached(&mut self) -> Vec<Array2<F>> {
        match std::mem::take(&mut self.stops) {
            StopGradients::Record(v) => v,
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: CowArray<'p, F, Ix2>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(
            value.iter().all(|x| !x.is_nan()),
            "NaN produced by {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, F> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.nodes[v.0].value.dim();
        (d.0, d.1)
    }

    /// First element of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Binds a parameter tensor. Tensors from the trainable store become
    /// gradient-tracked leaves; tensors from any other store are constants.
    pub fn weight(&mut self, store: &'p ParamStore<F>, id: ParamId) -> Var {
        let key = (store as *const ParamStore<F> as usize, id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let tracked = self.trainable.is_some_and(|t| std::ptr::eq(t, store));
        let var = self.push(CowArray::from(store.get(id).view()), Op::Leaf, tracked);
        if tracked {
            self.nodes[var.0].param = Some(id);
        }
        self.bound.insert(key, var);
        var
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(CowArray::from(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'p Array2<F>) -> Var {
        self.push(CowArray::from(value.view()), Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = match &mut self.stops {
            StopGradients::Pass => self.nodes[v.0].value.to_owned(),
            StopGradients::Record(log) => {
                let value = self.nodes[v.0].value.to_owned();
                log.push(value.clone());
                value
            }
            StopGradients::Replay(values, next) => {
                let value = values[*next].clone();
                debug_assert_eq!(value.dim(), self.nodes[v.0].value.dim());
                *next += 1;
                value
            }
        };
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out.into(), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out.into(), Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = &self.value(a) + &self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out.into(), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = &self.value(a) - &self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out.into(), Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = &self.value(a) * &self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out.into(), Op::Mul(a, b), ng)
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width mismatch");
        let out = &self.value(a) + &self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out.into(), Op::AddRow(a, row), ng)
    }

    /// Subtracts a `[1, n]` row from every row of `a`.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "sub_row expects a single row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "sub_row width mismatch");
        let out = &self.value(a) - &self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out.into(), Op::SubRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::c(s);
        let out = self.value(a).mapv(|x| x * s);
        let ng = self.ng(a);
        self.push(out.into(), Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = F::c(s);
        let out = self.value(a).mapv(|x| x + s);
        let ng = self.ng(a);
        self.push(out.into(), Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        let ng = self.ng(a);
        self.push(out.into(), Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.abs());
        let ng = self.ng(a);
        self.push(out.into(), Op::Abs(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.sqrt());
        let ng = self.ng(a);
        self.push(out.into(), Op::Sqrt(a), ng)
    }

    /// Row-wise layer normalisation with affine `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = F::c(1e-5);
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n = F::c(cols as f64);
        let mut xhat = Array2::<F>::zeros((rows, cols));
        let mut rstd = Vec::with_capacity(rows);
        for (r, mut out) in xv.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = r.iter().copied().fold(F::zero(), |a, b| a + b) / n;
            let var = r
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(F::zero(), |a, b| a + b)
                / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            Zip::from(&mut out).and(&r).for_each(|o, &v| *o = (v - mean) * rs);
        }
        let out = &(&xhat * &self.value(gamma)) + &self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out.into(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out.into(), Op::SoftmaxRows(a), ng)
    }

    /// Output row `i` is row `idx[i]` of `src`.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let sv = self.value(src);
        let cols = sv.ncols();
        let mut out = Array2::<F>::zeros((idx.len(), cols));
        for (mut row, &i) in out.rows_mut().into_iter().zip(&idx) {
            row.assign(&sv.row(i));
        }
        let ng = self.ng(src);
        self.push(out.into(), Op::GatherRows(src, idx), ng)
    }

    /// Zero-padded "same" unfolding of a `[t, c]` sequence into `[t, kernel*c]`
    /// so that a 1-D convolution becomes one matrix product.
    pub fn unfold(&mut self, x: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "odd kernels only");
        let xv = self.value(x);
        let (t, c) = xv.dim();
        let pad = kernel / 2;
        let mut out = Array2::<F>::zeros((t, kernel * c));
        for j in 0..kernel {
            // out[i, j*c..] = x[i + j - pad]
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(t);
            if lo >= hi {
                continue;
            }
            out.slice_mut(s![lo..hi, j * c..(j + 1) * c])
                .assign(&xv.slice(s![lo + j - pad..hi + j - pad, ..]));
        }
        let ng = self.ng(x);
        self.push(out.into(), Op::Unfold { x, kernel }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(out.into(), Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(out.into(), Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out.into(), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Column means, `[t, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = F::c(v.nrows() as f64);
        let out = v.sum_axis(Axis(0)).mapv(|x| x / n).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out.into(), Op::MeanRows(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / F::c(v.len() as f64);
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), m).into(), Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let m = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), m).into(), Op::SumAll(a), ng)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len(), "one label per row");
        let probs = softmax_rows(lv.view());
        let n = F::c(labels.len() as f64);
        let mut total = F::zero();
        for (r, &y) in lv.rows().into_iter().zip(&labels) {
            let m = r.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = r.iter().map(|&z| (z - m).exp()).fold(F::zero(), |a, b| a + b).ln() + m;
            total += lse - r[y];
        }
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), total / n).into(),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
            ng,
        )
    }

    /// `mean(|a - b|)` as a scalar node.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// `mean((a - b)^2)` as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// `x · W + b` with `W: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Runs the backward pass from a scalar `loss` and returns gradients for
    /// every bound parameter of the trainable store (`None` when unused).
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let n_params = self.trainable.map_or(0, |t| t.len());
        let mut out: Gradients<F> = vec![None; n_params];
        if !self.ng(loss) {
            return out;
        }
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(pid) = node.param {
                out[pid.0] = Some(g);
                continue;
            }
            self.backprop_node(node, g, &mut grads);
        }
        out
    }

    fn backprop_node(&self, node: &Node<'p, F>, g: Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let acc = |grads: &mut [Option<Array2<F>>], v: Var, d: Array2<F>| {
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, g.dot(&self.value(*b)));
                }
                if self.ng(*b) {
                    acc(grads, *b, g.t().dot(&self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    acc(grads, *b, g.clone());
                }
                if self.ng(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    acc(grads, *b, g.mapv(|x| -x));
                }
                if self.ng(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(grads, *a, &g * &self.value(*b));
                }
                if self.ng(*b) {
                    acc(grads, *b, &g * &self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                if self.ng(*r) {
                    acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::SubRow(a, r) => {
                if self.ng(*r) {
                    acc(grads, *r, g.sum_axis(Axis(0)).mapv(|x| -x).insert_axis(Axis(0)));
                }
                if self.ng(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(grads, *a, g.mapv(|x| x * s));
            }
            Op::AddScalar(a) => acc(grads, *a, g),
            Op::Relu(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&self.value(*a))
                    .for_each(|d, &x| {
                        if x <= F::zero() {
                            *d = F::zero()
                        }
                    });
                acc(grads, *a, d);
            }
            Op::Abs(a) => {
                let mut d = g;
                Zip::from(&mut d).and(&self.value(*a)).for_each(|d, &x| {
                    *d = if x > F::zero() {
                        *d
                    } else if x < F::zero() {
                        -*d
                    } else {
                        F::zero()
                    }
                });
                acc(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let mut d = g;
                let two = F::c(2.0);
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d /= two * y);
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.ng(*beta) {
                    acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*gamma) {
                    acc(grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let gam = self.value(*gamma);
                    let dxhat = &g * &gam;
                    let n = F::c(xhat.ncols() as f64);
                    let mut dx = Array2::<F>::zeros(xhat.raw_dim());
                    for (((mut out, dh), xh), &rs) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .zip(rstd)
                    {
                        let m1 = dh.sum() / n;
                        let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).fold(F::zero(), |a, b| a + b) / n;
                        Zip::from(&mut out)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &h| *o = rs * (d - m1 - h * m2));
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = &g * y;
                for (mut dr, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = dr.sum();
                    Zip::from(&mut dr).and(&yr).for_each(|d, &y| *d -= y * s);
                }
                acc(grads, *a, d);
            }
            Op::GatherRows(src, idx) => {
                let (rows, cols) = self.shape(*src);
                let mut d = Array2::<F>::zeros((rows, cols));
                for (gr, &i) in g.rows().into_iter().zip(idx) {
                    let mut row = d.row_mut(i);
                    row += &gr;
                }
                acc(grads, *src, d);
            }
            Op::Unfold { x, kernel } => {
                let (t, c) = self.shape(*x);
                let pad = kernel / 2;
                let mut d = Array2::<F>::zeros((t, c));
                for j in 0..*kernel {
                    let lo = pad.saturating_sub(j);
                    let hi = (t + pad).saturating_sub(j).min(t);
                    if lo >= hi {
                        continue;
                    }
                    let mut dst = d.slice_mut(s![lo + j - pad..hi + j - pad, ..]);
                    dst += &g.slice(s![lo..hi, j * c..(j + 1) * c]);
                }
                acc(grads, *x, d);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Array2::<F>::zeros((rows, cols));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                acc(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Array2::<F>::zeros((rows, cols));
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        acc(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let n = F::c(rows as f64);
                let row = g.row(0).mapv(|x| x / n);
                let d = row.broadcast((rows, cols)).expect("broadcast").to_owned();
                acc(grads, *a, d);
            }
            Op::MeanAll(a) => {
                let (rows, cols) = self.shape(*a);
                let v = g[[0, 0]] / F::c((rows * cols) as f64);
                acc(grads, *a, Array2::from_elem((rows, cols), v));
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                acc(grads, *a, Array2::from_elem((rows, cols), g[[0, 0]]));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = F::c(labels.len() as f64);
                let scale = g[[0, 0]] / n;
                let mut d = probs.clone();
                for (mut r, &y) in d.rows_mut().into_iter().zip(labels) {
                    r[y] -= F::one();
                    r.mapv_inplace(|x| x * scale);
                }
                acc(grads, *logits, d);
            }
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<F: Real>(a: ArrayView2<'_, F>) -> Array2<F> {
    let mut out = a.to_owned();
    for mut r in out.rows_mut() {
        let m = r.iter().copied().fold(F::neg_infinity(), F::max);
        r.mapv_inplace(|x| (x - m).exp());
        let s = r.sum();
        r.mapv_inplace(|x| x / s);
    }
    out
}

/// Accumulates `src` into `dst` (slot-wise), allocating where `dst` is empty.
pub fn accumulate<F: Real>(dst: &mut Gradients<F>, src: Gradients<F>, weight: F) {
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(s) = s {
            match d {
                Some(d) => d.scaled_add(weight, &s),
                None => *d = Some(s.mapv(|x| x * weight)),
            }
        }
    }
}

/// Global L2 norm over all present gradient tensors.
pub fn global_norm<F: Real>(grads: &Gradients<F>) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        store: &ParamStore<f64>,
        id: ParamId,
        f: &dyn Fn(&ParamStore<f64>) -> f64,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(store.get(id).raw_dim());
        let mut s = store.clone();
        for idx in 0..out.len() {
            let (r, c) = (idx / out.ncols(), idx % out.ncols());
            let orig = s.get(id)[[r, c]];
            s.get_mut(id)[[r, c]] = orig + h;
            let up = f(&s);
            s.get_mut(id)[[r, c]] = orig - h;
            let dn = f(&s);
            s.get_mut(id)[[r, c]] = orig;
            out[[r, c]] = (up - dn) / (2.0 * h);
        }
        out
    }

    fn check(store: &ParamStore<f64>, build: &dyn for<'a> Fn(&mut Graph<'a, f64>, &'a ParamStore<f64>) -> Var) {
        let mut g = Graph::new(Some(store));
        let loss = build(&mut g, store);
        let grads = g.backward(loss);
        let f = |s: &ParamStore<f64>| {
            let mut g = Graph::new(None);
            let l = build(&mut g, s);
            g.scalar(l)
        };
        for id in store.ids() {
            let num = numeric_grad(store, id, &f);
            let ana = grads[id.0].clone().unwrap_or_else(|| Array2::zeros(num.raw_dim()));
            for (a, n) in ana.iter().zip(num.iter()) {
                assert!(
                    (a - n).abs() <= 1e-6 * (1.0 + n.abs()),
                    "{}: analytic {a} vs numeric {n}",
                    store.name(id)
                );
            }
        }
    }

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5], [-0.2, 0.9, 0.05], [0.6, -0.3, 1.4]]);
        s.add("w", array![[0.5, -0.1], [0.2, 0.8], [-0.7, 0.3]]);
        s.add("g", array![[1.2, 0.8, 0.9]]);
        s.add("b", array![[0.1, -0.2, 0.3]]);
        s
    }

    #[test]
    fn matmul_layernorm_softmax_chain() {
        let s = store();
        check(&s, &|g, s| {
            let x = g.weight(s, ParamId(0));
            let gam = g.weight(s, ParamId(2));
            let b = g.weight(s, ParamId(3));
            let w = g.weight(s, ParamId(1));
            let n = g.layer_norm(x, gam, b);
            let y = g.matmul(n, w);
            let att = g.matmul_nt(y, y);
            let p = g.softmax_rows(att);
            let z = g.matmul(p, x);
            let z = g.relu(z);
            let sq = g.mul(z, z);
            g.mean_all(sq)
        });
    }

    #[test]
    fn unfold_gather_slice_concat() {
        let s = store();
        check(&s, &|g, s| {
            let x = g.weight(s, ParamId(0));
            let u = g.unfold(x, 3);
            let gathered = g.gather_rows(u, vec![0, 0, 2, 3, 3, 3]);
            let a = g.slice_cols(gathered, 1, 4);
            let b = g.slice_rows(gathered, 2, 3);
            let b = g.slice_cols(b, 0, 2);
            let bm = g.mean_rows(b);
            let c = g.concat_cols(&[a, gathered]);
            let c = g.abs(c);
            let t = g.sum_all(c);
            let bm = g.sum_all(bm);
            let t = g.add(t, bm);
            g.scale(t, 0.5)
        });
    }

    #[test]
    fn cross_entropy_and_pooled_std() {
        let s = store();
        check(&s, &|g, s| {
            let x = g.weight(s, ParamId(0));
            let w = g.weight(s, ParamId(1));
            let logits = g.matmul(x, w);
            let ce = g.cross_entropy(logits, vec![1, 0, 1, 1]);
            let m = g.mean_rows(x);
            let c = g.sub_row(x, m);
            let sq = g.mul(c, c);
            let v = g.mean_rows(sq);
            let v = g.add_scalar(v, 1e-3);
            let sd = g.sqrt(v);
            let sd = g.sum_all(sd);
            g.add(ce, sd)
        });
    }

    #[test]
    fn unfold_matches_explicit_convolution() {
        let mut g = Graph::<f64>::new(None);
        let x = g.constant(array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]);
        let u = g.unfold(x, 3);
        let expected = array![
            [0.0, 0.0, 1.0, 10.0, 2.0, 20.0],
            [1.0, 10.0, 2.0, 20.0, 3.0, 30.0],
            [2.0, 20.0, 3.0, 30.0, 0.0, 0.0]
        ];
        assert_eq!(g.value(u), expected);
    }

    #[test]
    fn detach_blocks_gradient_and_foreign_store_is_constant() {
        let s = store();
        let other = store();
        let mut g = Graph::new(Some(&s));
        let x = g.weight(&s, ParamId(0));
        let w_foreign = g.weight(&other, ParamId(1));
        let xd = g.detach(x);
        let y = g.matmul(xd, w_foreign);
        let l = g.mean_all(y);
        let grads = g.backward(l);
        assert!(grads.iter().all(Option::is_none));
    }
}
