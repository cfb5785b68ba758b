//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]; a [`Var`] is a handle to
//! one recorded node. Parameters are bound by name from a [`ParamStore`], and
//! [`Tape::backward`] returns one gradient per stored parameter (zeros for
//! parameters the loss never touched).

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numcore::params::ParamStore;
use crate::numcore::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::numcore::tensor::Tensor;

/// Multiply-add equivalents charged per softmax entry (max-subtract,
/// exponentiate, normalize).
pub const SOFTMAX_MACS_PER_ENTRY: u64 = 3;

/// Query rows processed per block when attention probabilities are not kept.
const ATTN_QUERY_CHUNK: usize = 256;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    ScaleBy(usize, usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(T, T)>,
    },
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    GroupMean(usize, Vec<Vec<usize>>),
    Sum(usize),
    Pick(usize, usize),
    Entropy(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Detach,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// Frozen values for stop-gradient nodes.
///
/// A straight-through estimator treats detached values as constants. To check
/// such a graph against finite differences those constants must stay fixed at
/// the unperturbed point: record them on the base pass, then [`freeze`] and
/// replay them, in order, on every perturbed pass.
///
/// [`freeze`]: StopGradients::freeze
#[derive(Debug, Default)]
pub struct StopGradients<T> {
    values: RefCell<Vec<Tensor<T>>>,
    cursor: Cell<usize>,
    replay: Cell<bool>,
}

impl<T: Scalar> StopGradients<T> {
    pub fn recording() -> Rc<Self> {
        Rc::new(Self {
            values: RefCell::new(Vec::new()),
            cursor: Cell::new(0),
            replay: Cell::new(false),
        })
    }

    pub fn freeze(&self) {
        self.replay.set(true);
        self.cursor.set(0);
    }

    pub fn is_frozen(&self) -> bool {
        self.replay.get()
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rewind(&self) {
        self.cursor.set(0);
    }

    fn pass(&self, live: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.replay.get() {
            self.values.borrow_mut().push(live.clone());
            return Ok(live.clone());
        }
        let i = self.cursor.get();
        self.cursor.set(i + 1);
        let values = self.values.borrow();
        let frozen = values
            .get(i)
            .ok_or_else(|| Error::Contract(format!("stop-gradient replay exhausted at {i}")))?;
        if frozen.shape() != live.shape() {
            return Err(Error::shape("detach replay", frozen.shape(), live.shape()));
        }
        Ok(frozen.clone())
    }
}

/// Gradient map keyed by parameter name, in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new(grads: BTreeMap<String, Tensor<T>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn norm(&self, name: &str) -> f64 {
        self.get(name)
            .map(|g| g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }
}

/// Recorded computation graph for one forward pass.
pub struct Tape<'p, T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    store: Option<&'p ParamStore<T>>,
    bound: RefCell<HashMap<String, Var>>,
    grad_enabled: bool,
    stop: Option<Rc<StopGradients<T>>>,
    macs: Cell<u64>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            store: None,
            bound: RefCell::new(HashMap::new()),
            grad_enabled: true,
            stop: None,
            macs: Cell::new(0),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Forward-only mode: attention probabilities are not retained, so large
    /// attention runs in bounded memory. `backward` is unavailable.
    pub fn inference(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn with_stop_gradients(mut self, stop: Rc<StopGradients<T>>) -> Self {
        stop.rewind();
        self.stop = Some(stop);
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Multiply-adds executed by matrix products, attention and softmax so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn charge(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Bind a stored parameter. Binding the same name twice returns the same node.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Contract(format!("tape has no parameter store (wanted {name})")))?;
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(t, Op::Param(name.to_string()));
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    fn both(&self, a: Var, b: Var) -> (Rc<Tensor<T>>, Rc<Tensor<T>>) {
        let nodes = self.nodes.borrow();
        (Rc::clone(&nodes[a.0].value), Rc::clone(&nodes[b.0].value))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = self.both(a, b);
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::dense(av.data(), m, k),
            MatRef::dense(bv.data(), k, n),
            T::zero(),
            MatMut::dense(&mut out, m, n),
        );
        self.charge((m * k * n) as u64);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::shape("transpose", av.shape(), &[]));
        }
        Ok(self.push(av.transpose(), Op::Transpose(a.0)))
    }

    // ---- elementwise ------------------------------------------------------

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = self.both(a, b);
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = self.both(a, bias);
        let c = av.cols();
        if bv.numel() != c {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x = *x + b;
            }
        }
        Ok(self.push(Tensor::new(av.shape(), data)?, Op::AddRow(a.0, bias.0)))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a.0, c))
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = self.both(a, s);
        if sv.numel() != 1 {
            return Err(Error::shape("scale_by", av.shape(), sv.shape()));
        }
        let c = sv.item();
        Ok(self.push(av.map(|x| x * c), Op::ScaleBy(a.0, s.0)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a.0))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(Error::Numeric("softmax_rows: non-finite input".into()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(av.cols().max(1)) {
            softmax_in_place(row);
        }
        self.charge(SOFTMAX_MACS_PER_ENTRY * av.numel() as u64);
        Ok(self.push(Tensor::new(av.shape(), data)?, Op::SoftmaxRows(a.0)))
    }

    /// Normalizes each trailing-axis row to zero mean / unit variance, then
    /// applies `gamma`, `beta`.
    pub fn layernorm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = self.both(x, gamma);
        let bv = self.value(beta);
        let d = xv.cols();
        if d == 0 || gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layernorm", xv.shape(), gv.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layernorm eps must be positive".into()));
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let mut data = Vec::with_capacity(xv.numel());
        let mut stats = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = (var + eps).sqrt().recip();
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * rstd * gv.data()[j] + bv.data()[j]);
            }
            stats.push((mean, rstd));
        }
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                stats,
            },
        ))
    }

    // ---- structural -------------------------------------------------------

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&r| r >= av.rows()) {
            return Err(Error::shape("gather_rows", av.shape(), &[bad]));
        }
        Ok(self.push(av.gather_rows(idx), Op::GatherRows(a.0, idx.to_vec())))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let c = vals
            .first()
            .map(|v| v.cols())
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &vals {
            if v.cols() != c {
                return Err(Error::shape("concat_rows", &[rows, c], v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(&[rows, c], data)?, Op::ConcatRows(ids)))
    }

    /// One output row per group: the mean of the listed input rows.
    pub fn group_mean(&self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(groups.len() * c);
        for g in groups {
            if g.is_empty() || g.iter().any(|&r| r >= av.rows()) {
                return Err(Error::shape("group_mean", av.shape(), &[g.len()]));
            }
            let inv = T::of(g.len() as f64).recip();
            let mut acc = vec![T::zero(); c];
            for &r in g {
                for (s, &v) in acc.iter_mut().zip(av.row(r)) {
                    *s = *s + v;
                }
            }
            data.extend(acc.into_iter().map(|s| s * inv));
        }
        Ok(self.push(
            Tensor::new(&[groups.len(), c], data)?,
            Op::GroupMean(a.0, groups.to_vec()),
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    /// Single entry `(r, c)` of a matrix as a one-element tensor.
    pub fn pick(&self, a: Var, r: usize, c: usize) -> Result<Var> {
        let av = self.value(a);
        if r >= av.rows() || c >= av.cols() {
            return Err(Error::shape("pick", av.shape(), &[r, c]));
        }
        let idx = r * av.cols() + c;
        Ok(self.push(Tensor::scalar(av.data()[idx]), Op::Pick(a.0, idx)))
    }

    /// `Σ −p·ln p` over all entries, with `0·ln 0 = 0`.
    pub fn entropy(&self, p: Var) -> Var {
        let s = self
            .value(p)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { -v * v.ln() } else { T::zero() })
            .sum::<T>();
        self.push(Tensor::scalar(s), Op::Entropy(p.0))
    }

    /// Value copy that blocks gradient flow. Under a frozen
    /// [`StopGradients`] the recorded base-point value is returned instead.
    pub fn detach(&self, a: Var) -> Result<Var> {
        let live = self.value(a);
        let t = match &self.stop {
            Some(stop) => stop.pass(&live)?,
            None => (*live).clone(),
        };
        Ok(self.push(t, Op::Detach))
    }

    // ---- attention ----------------------------------------------------------

    /// Multi-head scaled dot-product attention over pre-projected inputs:
    /// head `h` uses column block `h·D/H .. (h+1)·D/H` of `q`, `k`, `v`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv) = self.both(q, k);
        let vv = self.value(v);
        let (nq, d) = (qv.rows(), qv.cols());
        let nk = kv.rows();
        if kv.cols() != d || vv.cols() != d || vv.rows() != nk {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if d == 0 || heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("width {d} not divisible into {heads} heads")));
        }
        if nk == 0 {
            return Err(Error::Contract("attention over an empty key set".into()));
        }
        let keep = self.grad_enabled;
        let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), nq, nk, d, heads, keep);
        self.charge(2 * (nq * nk * d) as u64 + SOFTMAX_MACS_PER_ENTRY * (heads * nq * nk) as u64);
        let out = Tensor::new(&[nq, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
        ))
    }

    /// Per-head attention probabilities `[heads·nq, nk]` retained by an
    /// [`attention`](Self::attention) node (empty in inference mode).
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        match &nodes[v.0].op {
            Op::Attention { probs, heads, k, .. } if !probs.is_empty() => {
                let nk = nodes[*k].value.rows();
                let rows = probs.len() / nk;
                debug_assert_eq!(rows % heads, 0);
                Tensor::new(&[rows, nk], probs.clone()).ok()
            }
            _ => None,
        }
    }

    // ---- reverse pass -------------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every stored parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let store = self
            .store
            .ok_or_else(|| Error::Contract("backward needs a parameter store".into()))?;
        let grads = self.reverse(loss)?;
        let nodes = self.nodes.borrow();
        let mut out = BTreeMap::new();
        for (name, t) in store.iter() {
            out.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        for (i, node) in nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads[i]) {
                let slot = out.get_mut(name).expect("bound parameter missing from store");
                for (s, &v) in slot.data_mut().iter_mut().zip(g) {
                    *s = *s + v;
                }
            }
        }
        Ok(Gradients::new(out))
    }

    /// Gradient of the scalar `loss` with respect to arbitrary nodes.
    pub fn grads_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let grads = self.reverse(loss)?;
        let nodes = self.nodes.borrow();
        wrt.iter()
            .map(|w| {
                let shape = nodes[w.0].value.shape();
                match grads.get(w.0).and_then(|g| g.as_ref()) {
                    Some(g) => Tensor::new(shape, g.clone()),
                    None => Ok(Tensor::zeros(shape)),
                }
            })
            .collect()
    }

    fn reverse(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }
}

fn acc<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], i: usize) -> &'g mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.numel()])
}

fn backprop<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Param(_) | Op::Detach => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            // dA = dC·Bᵀ
            gemm(
                T::one(),
                MatRef::dense(g, m, n),
                MatRef::dense(bv.data(), k, n).t(),
                T::one(),
                MatMut::dense(acc(grads, nodes, *a), m, k),
            );
            // dB = Aᵀ·dC
            gemm(
                T::one(),
                MatRef::dense(av.data(), m, k).t(),
                MatRef::dense(g, m, n),
                T::one(),
                MatMut::dense(acc(grads, nodes, *b), k, n),
            );
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            let ga = acc(grads, nodes, *a);
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = ga[j * r + i] + g[i * c + j];
                }
            }
        }
        Op::Add(a, b) => {
            add_into(acc(grads, nodes, *a), g);
            add_into(acc(grads, nodes, *b), g);
        }
        Op::Sub(a, b) => {
            add_into(acc(grads, nodes, *a), g);
            let gb = acc(grads, nodes, *b);
            for (s, &v) in gb.iter_mut().zip(g) {
                *s = *s - v;
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (Rc::clone(&nodes[*a].value), Rc::clone(&nodes[*b].value));
            let ga = acc(grads, nodes, *a);
            for ((s, &v), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                *s = *s + v * y;
            }
            let gb = acc(grads, nodes, *b);
            for ((s, &v), &x) in gb.iter_mut().zip(g).zip(av.data()) {
                *s = *s + v * x;
            }
        }
        Op::AddRow(a, bias) => {
            add_into(acc(grads, nodes, *a), g);
            let c = out.cols().max(1);
            let gb = acc(grads, nodes, *bias);
            for row in g.chunks(c) {
                add_into(gb, row);
            }
        }
        Op::Scale(a, c) => {
            let ga = acc(grads, nodes, *a);
            for (s, &v) in ga.iter_mut().zip(g) {
                *s = *s + v * *c;
            }
        }
        Op::ScaleBy(a, s) => {
            let av = Rc::clone(&nodes[*a].value);
            let c = nodes[*s].value.item();
            let ga = acc(grads, nodes, *a);
            for (x, &v) in ga.iter_mut().zip(g) {
                *x = *x + v * c;
            }
            let dot = g.iter().zip(av.data()).map(|(&v, &x)| v * x).sum::<T>();
            let gs = acc(grads, nodes, *s);
            gs[0] = gs[0] + dot;
        }
        Op::Gelu(a) => {
            let av = Rc::clone(&nodes[*a].value);
            let ga = acc(grads, nodes, *a);
            for ((s, &v), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                *s = *s + v * gelu_grad(x);
            }
        }
        Op::SoftmaxRows(a) => {
            let c = out.cols().max(1);
            let ga = acc(grads, nodes, *a);
            for ((gr, yr), sr) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                let dot = gr.iter().zip(yr).map(|(&u, &y)| u * y).sum::<T>();
                for ((s, &u), &y) in sr.iter_mut().zip(gr).zip(yr) {
                    *s = *s + y * (u - dot);
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, stats } => {
            let xv = Rc::clone(&nodes[*x].value);
            let gv = Rc::clone(&nodes[*gamma].value);
            let d = xv.cols();
            let dn = T::of(d as f64);
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = vec![T::zero(); xv.numel()];
            for (r, (&(mean, rstd), gr)) in stats.iter().zip(g.chunks(d)).enumerate() {
                let xr = &xv.data()[r * d..(r + 1) * d];
                let mut sum_gg = T::zero();
                let mut sum_ggx = T::zero();
                for j in 0..d {
                    let xhat = (xr[j] - mean) * rstd;
                    dgamma[j] = dgamma[j] + gr[j] * xhat;
                    dbeta[j] = dbeta[j] + gr[j];
                    let gg = gr[j] * gv.data()[j];
                    sum_gg = sum_gg + gg;
                    sum_ggx = sum_ggx + gg * xhat;
                }
                for j in 0..d {
                    let xhat = (xr[j] - mean) * rstd;
                    let gg = gr[j] * gv.data()[j];
                    dx[r * d + j] = rstd * (gg - sum_gg / dn - xhat * sum_ggx / dn);
                }
            }
            add_into(acc(grads, nodes, *x), &dx);
            add_into(acc(grads, nodes, *gamma), &dgamma);
            add_into(acc(grads, nodes, *beta), &dbeta);
        }
        Op::GatherRows(a, idx) => {
            let c = out.cols();
            let ga = acc(grads, nodes, *a);
            for (k, &r) in idx.iter().enumerate() {
                add_into(&mut ga[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                add_into(acc(grads, nodes, p), &g[off..off + n]);
                off += n;
            }
        }
        Op::GroupMean(a, groups) => {
            let c = out.cols();
            let ga = acc(grads, nodes, *a);
            for (k, grp) in groups.iter().enumerate() {
                let inv = T::of(grp.len() as f64).recip();
                for &r in grp {
                    for j in 0..c {
                        ga[r * c + j] = ga[r * c + j] + g[k * c + j] * inv;
                    }
                }
            }
        }
        Op::Sum(a) => {
            let ga = acc(grads, nodes, *a);
            for s in ga.iter_mut() {
                *s = *s + g[0];
            }
        }
        Op::Pick(a, idx) => {
            let ga = acc(grads, nodes, *a);
            ga[*idx] = ga[*idx] + g[0];
        }
        Op::Entropy(p) => {
            let pv = Rc::clone(&nodes[*p].value);
            let gp = acc(grads, nodes, *p);
            for (s, &v) in gp.iter_mut().zip(pv.data()) {
                if v > T::zero() {
                    *s = *s - g[0] * (v.ln() + T::one());
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (qv, kv, vv) = (
                Rc::clone(&nodes[*q].value),
                Rc::clone(&nodes[*k].value),
                Rc::clone(&nodes[*v].value),
            );
            let (nq, nk, d) = (qv.rows(), kv.rows(), qv.cols());
            let hd = d / heads;
            let scale = T::of(1.0 / (hd as f64).sqrt());
            let mut dq = vec![T::zero(); nq * d];
            let mut dk = vec![T::zero(); nk * d];
            let mut dv = vec![T::zero(); nk * d];
            let mut dp = vec![T::zero(); nq * nk];
            for h in 0..*heads {
                let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                let c0 = h * hd;
                let g_h = MatRef::cols_of(g, nq, d, c0, hd);
                // dV_h = Pᵀ·dO_h
                gemm(
                    T::one(),
                    MatRef::dense(p, nq, nk).t(),
                    g_h,
                    T::one(),
                    MatMut::cols_of(&mut dv, nk, d, c0, hd),
                );
                // dP = dO_h·V_hᵀ
                gemm(
                    T::one(),
                    g_h,
                    MatRef::cols_of(vv.data(), nk, d, c0, hd).t(),
                    T::zero(),
                    MatMut::dense(&mut dp, nq, nk),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the logit scale
                for (dr, pr) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                    let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pp) in dr.iter_mut().zip(pr) {
                        *x = pp * (*x - dot) * scale;
                    }
                }
                gemm(
                    T::one(),
                    MatRef::dense(&dp, nq, nk),
                    MatRef::cols_of(kv.data(), nk, d, c0, hd),
                    T::one(),
                    MatMut::cols_of(&mut dq, nq, d, c0, hd),
                );
                gemm(
                    T::one(),
                    MatRef::dense(&dp, nq, nk).t(),
                    MatRef::cols_of(qv.data(), nq, d, c0, hd),
                    T::one(),
                    MatMut::cols_of(&mut dk, nk, d, c0, hd),
                );
            }
            add_into(acc(grads, nodes, *q), &dq);
            add_into(acc(grads, nodes, *k), &dk);
            add_into(acc(grads, nodes, *v), &dv);
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Forward multi-head attention. With `keep` the full probability tensor
/// `[heads, nq, nk]` is returned; otherwise queries are processed in blocks.
#[allow(clippy::too_many_arguments)]
fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    keep: bool,
) -> (Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); nq * d];
    let mut probs = if keep {
        vec![T::zero(); heads * nq * nk]
    } else {
        Vec::new()
    };
    let chunk = if keep { nq.max(1) } else { ATTN_QUERY_CHUNK };
    let mut scratch = if keep {
        Vec::new()
    } else {
        vec![T::zero(); chunk.min(nq.max(1)) * nk]
    };
    for h in 0..heads {
        let c0 = h * hd;
        let mut r0 = 0;
        while r0 < nq {
            let rows = chunk.min(nq - r0);
            let s: &mut [T] = if keep {
                &mut probs[h * nq * nk..(h + 1) * nq * nk]
            } else {
                &mut scratch[..rows * nk]
            };
            let q_blk = MatRef {
                data: q,
                offset: r0 * d + c0,
                rows,
                cols: hd,
                row_stride: d,
                col_stride: 1,
            };
            gemm(
                scale,
                q_blk,
                MatRef::cols_of(k, nk, d, c0, hd).t(),
                T::zero(),
                MatMut::dense(s, rows, nk),
            );
            for row in s.chunks_mut(nk) {
                softmax_in_place(row);
            }
            gemm(
                T::one(),
                MatRef::dense(s, rows, nk),
                MatRef::cols_of(v, nk, d, c0, hd),
                T::zero(),
                MatMut {
                    data: &mut out,
                    offset: r0 * d + c0,
                    rows,
                    cols: hd,
                    row_stride: d,
                },
            );
            r0 += rows;
        }
    }
    (out, probs)
}
