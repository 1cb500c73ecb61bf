use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::hypmath::{artanh_clamped, RadialMap, ARTANH_CLAMP};

pub type Tensor = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ParamKind {
    Euclidean,
    /// Each row is a point on the Poincaré ball of curvature `c`.
    Ball {
        c: f64,
    },
}

/// Owns every trainable tensor. Graphs copy parameter values in as leaves.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Artanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    RowNorm(Var),
    Radial(Var, RadialMap),
    ConcatCols(Vec<Var>),
    Columns(Var, usize),
    Rows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    LogSoftmax(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A reverse-mode computation graph over 2-D tensors.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it in reverse.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape(t: &Tensor) -> (usize, usize) {
    (t.nrows(), t.ncols())
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums a broadcast gradient back down to `target`'s shape.
fn reduce_to(grad: Tensor, target: (usize, usize)) -> Tensor {
    let mut g = grad;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// Copies the value of `v` into a new leaf with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(&Tensor, &Tensor) -> Tensor, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcast_shape(sa, sb).is_none() {
            return Err(contract(format!("{name}: shapes {sa:?} and {sb:?} do not broadcast")));
        }
        let value = f(self.value(a), self.value(b));
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(contract(format!("matmul: {sa:?} x {sb:?}")));
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + k` elementwise.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::Offset(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        self.push(value, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `artanh` with its argument clamped to `±(1 − 1e−15)`.
    pub fn artanh(&mut self, a: Var) -> Var {
        self.unary(a, artanh_clamped, Op::Artanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Sum of all entries, shape `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, shape `r×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(a))
    }

    /// Per-column sums, shape `1×c`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumCols(a))
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.value(a).nrows().max(1) as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row Euclidean norms, shape `r×1`. The gradient at a zero row is 0.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.push(value, Op::RowNorm(a))
    }

    /// Applies a radial map to every row.
    pub fn radial(&mut self, a: Var, map: RadialMap) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let s = map.scale(row.dot(&row).sqrt());
            row.mapv_inplace(|x| x * s);
        }
        self.push(value, Op::Radial(a, map))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.shape(*p).0)
            .ok_or_else(|| contract("concat_cols: no inputs"))?;
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(contract("concat_cols: row counts differ"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start+len`.
    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.shape(a).1 {
            return Err(contract("columns: range out of bounds"));
        }
        let value = self.value(a).slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(self.push(value, Op::Columns(a, start)))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.shape(a).0;
        if idx.iter().any(|&i| i >= n) {
            return Err(contract("rows: index out of bounds"));
        }
        let value = self.value(a).select(Axis(0), idx);
        Ok(self.push(value, Op::Rows(a, idx.to_vec())))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.shape(*p).1)
            .ok_or_else(|| contract("stack_rows: no inputs"))?;
        if parts.iter().any(|p| self.shape(*p).1 != cols) {
            return Err(contract("stack_rows: column counts differ"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        Ok(self.push(value, Op::StackRows(parts.to_vec())))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.mapv(|x| (x - m).exp()).sum().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::LogSoftmax(a))
    }

    /// Reverse pass from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, contrib: Tensor| {
                let slot = &mut grads[v.0];
                match slot {
                    Some(existing) => *existing += &contrib,
                    None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    params.entry(*id).and_modify(|e| *e += &g).or_insert_with(|| g.clone());
                }
                Op::Add(a, b) => {
                    acc(*a, reduce_to(g.clone(), shape(val(*a))));
                    acc(*b, reduce_to(g.clone(), shape(val(*b))));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(g.clone(), shape(val(*a))));
                    acc(*b, reduce_to(-&g, shape(val(*b))));
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(*b);
                    let gb = &g * val(*a);
                    acc(*a, reduce_to(ga, shape(val(*a))));
                    acc(*b, reduce_to(gb, shape(val(*b))));
                }
                Op::Div(a, b) => {
                    let ga = &g / val(*b);
                    let gb = -(&g * &node.value) / val(*b);
                    acc(*a, reduce_to(ga, shape(val(*a))));
                    acc(*b, reduce_to(gb, shape(val(*b))));
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&val(*b).t()));
                    acc(*b, val(*a).t().dot(&g));
                }
                Op::Scale(a, k) => acc(*a, &g * *k),
                Op::Offset(a) => acc(*a, g.clone()),
                Op::Tanh(a) => acc(*a, &g * &node.value.mapv(|y| 1.0 - y * y)),
                Op::Relu(a) => acc(*a, &g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })),
                Op::Artanh(a) => acc(
                    *a,
                    &g * &val(*a).mapv(|x| {
                        if x.abs() > ARTANH_CLAMP {
                            0.0
                        } else {
                            1.0 / (1.0 - x * x)
                        }
                    }),
                ),
                Op::Exp(a) => acc(*a, &g * &node.value),
                Op::Ln(a) => acc(*a, &g / val(*a)),
                Op::Square(a) => acc(*a, &g * &(val(*a) * 2.0)),
                Op::Abs(a) => acc(*a, &g * &val(*a).mapv(f64::signum)),
                Op::Sum(a) => acc(*a, Array2::from_elem(shape(val(*a)), g[[0, 0]])),
                Op::SumRows(a) => {
                    let full = g.broadcast(shape(val(*a))).expect("r×1 broadcasts").to_owned();
                    acc(*a, full)
                }
                Op::SumCols(a) => {
                    let full = g.broadcast(shape(val(*a))).expect("1×c broadcasts").to_owned();
                    acc(*a, full)
                }
                Op::RowNorm(a) => {
                    let x = val(*a);
                    let mut out = x.clone();
                    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                        let n = node.value[[i, 0]];
                        let k = if n > 0.0 { g[[i, 0]] / n } else { 0.0 };
                        row.mapv_inplace(|v| v * k);
                    }
                    acc(*a, out)
                }
                Op::Radial(a, map) => {
                    let x = val(*a);
                    let mut out = g.clone();
                    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                        let xr = x.row(i);
                        let r = xr.dot(&xr).sqrt();
                        let s = map.scale(r);
                        let k = map.dscale_over_r(r) * xr.dot(&row);
                        row.mapv_inplace(|v| v * s);
                        row.scaled_add(k, &xr);
                    }
                    acc(*a, out)
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(*p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Columns(a, start) => {
                    let mut full = Array2::zeros(shape(val(*a)));
                    let w = g.ncols();
                    full.slice_mut(ndarray::s![.., *start..*start + w]).assign(&g);
                    acc(*a, full)
                }
                Op::Rows(a, idx) => {
                    let mut full = Array2::zeros(shape(val(*a)));
                    for (k, &i) in idx.iter().enumerate() {
                        let mut dst = full.row_mut(i);
                        dst += &g.row(k);
                    }
                    acc(*a, full)
                }
                Op::StackRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        acc(*p, g.slice(ndarray::s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::LogSoftmax(a) => {
                    let soft = node.value.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, &g - &(&soft * &gsum))
                }
            }
        }
        Ok(Gradients { params })
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Global L2 norm over every parameter gradient.
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[3.0]], ParamKind::Euclidean);
        let mut g = Graph::new();
        let v = g.param(&store, x);
        let y = g.square(v);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[1.0, 2.0]], ParamKind::Euclidean);
        let mut g = Graph::new();
        let v = g.param(&store, x);
        let sq = g.square(v);
        let y = g.sum(sq);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[2.0, 4.0]]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let v = g.constant(array![[1.0, 2.0]]);
        assert!(matches!(g.backward(v), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut g = Graph::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((4, 3)));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Array2::zeros((2, 1)));
        assert!(g.mul(a, c).is_ok());
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut store = ParamStore::new();
        let b = store.add("b", array![[1.0, -1.0]], ParamKind::Euclidean);
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let bv = g.param(&store, b);
        let y = g.mul(x, bv).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap(), &array![[9.0, 12.0]]);
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let y = g.log_softmax(x);
        for row in g.value(y).rows() {
            assert_abs_diff_eq!(row.mapv(f64::exp).sum(), 1.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(g.value(y)[[1, 0]], -(3f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn unreachable_params_have_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0]], ParamKind::Euclidean);
        let b = store.add("b", array![[1.0]], ParamKind::Euclidean);
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let _bv = g.param(&store, b);
        let y = g.square(av);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.len(), 1);
    }
}
