//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node to the [`Tape`] holding its forward value
//! and the indices of its inputs. [`Tape::backward`] walks the nodes in
//! reverse and accumulates adjoints; [`Tape::replay`] recomputes every
//! non-leaf value from the leaves with the same kernels used while
//! recording.
//!
//! ```
//! use spcon::autodiff::Tape;
//! use spcon::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y);
//! assert_eq!(tape.value(y).item(), 9.0);
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor, NORM_EPS};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Gather(Var, Arc<[Option<u32>]>, Vec<usize>),
    ConcatCols(Var, Var),
    Reshape(Var, Vec<usize>),
    NormalizeRows(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    /// Row-wise `log Σ_{a≠i} exp(x_ia)` of a square matrix.
    LseRowsOffDiag(Var),
    Sum(Var),
    WeightedSum(Var, Arc<Tensor>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`]; `None` for nodes the output does
/// not depend on.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints[v.0].as_ref()
    }
}

/// Result of [`grad`]: one gradient per requested parameter.
#[derive(Debug)]
pub struct GradReport {
    pub grads: Vec<Tensor>,
    /// Positions (into the requested list) of parameters the output does not
    /// depend on. Their gradient is reported as zeros.
    pub disconnected: Vec<usize>,
}

impl GradReport {
    pub fn is_fully_connected(&self) -> bool {
        self.disconnected.is_empty()
    }
}

/// Gradient of the scalar `output` with respect to each of `params`.
pub fn grad(tape: &Tape, output: Var, params: &[Var]) -> GradReport {
    let g = tape.backward(output);
    let mut disconnected = Vec::new();
    let grads = params
        .iter()
        .enumerate()
        .map(|(k, &p)| match g.get(p) {
            Some(t) => t.clone(),
            None => {
                disconnected.push(k);
                Tensor::zeros(tape.value(p).shape())
            }
        })
        .collect();
    GradReport {
        grads,
        disconnected,
    }
}

impl Tape {
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
        debug_assert!(value.data().iter().all(|v| v.is_finite()), "{op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param)
    }

    /// Registers a leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn record(&mut self, op: Op) -> Var {
        let value = eval(&op, |v| &self.nodes[v.0].value);
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).cols(), self.value(b).rows(), "matmul inner dims");
        self.record(Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).cols(), self.value(b).cols(), "matmul_nt inner dims");
        self.record(Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        self.record(Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.value(a).cols(), self.value(bias).len());
        self.record(Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.record(Op::Scale(a, s))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.record(Op::LeakyRelu(a, slope))
    }

    /// `out[k] = input[index[k]]`, or zero where the index is `None`.
    /// The output takes `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[Option<u32>]>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), shape.iter().product::<usize>());
        self.record(Op::Gather(a, index, shape.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).rows(), self.value(b).rows());
        self.record(Op::ConcatCols(a, b))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(self.value(a).len(), shape.iter().product::<usize>());
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    /// Scales every row to unit norm. Fails if a row norm is at or below
    /// [`NORM_EPS`].
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        for i in 0..x.rows() {
            let n = row_norm(x.row(i));
            if n <= NORM_EPS {
                return Err(Error::NormTooSmall { norm: n });
            }
        }
        Ok(self.record(Op::NormalizeRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.record(Op::LogSoftmaxRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.record(Op::SoftmaxRows(a))
    }

    pub fn lse_rows_off_diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows() == x.cols() && x.rows() >= 2, "square matrix with 2+ rows");
        self.record(Op::LseRowsOffDiag(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    /// `Σ a ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Arc<Tensor>) -> Var {
        assert_eq!(self.value(a).len(), weights.len());
        self.record(Op::WeightedSum(a, weights))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Recomputes every non-leaf node from the leaf values and returns the
    /// value of `output`.
    pub fn replay(&self, output: Var) -> Tensor {
        let mut values: Vec<Tensor> = Vec::with_capacity(output.0 + 1);
        for node in &self.nodes[..=output.0] {
            let v = match &node.op {
                Op::Param | Op::Constant => node.value.clone(),
                op => eval(op, |v| &values[v.0]),
            };
            values.push(v);
        }
        values.pop().expect("output node exists")
    }

    /// Adjoints of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Gradients { adjoints: adj }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let bt = transpose(bv.data(), k, n);
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), &bt, &mut da, m, n, k);
                let at = transpose(av.data(), m, k);
                let mut db = vec![0.0; k * n];
                matmul_into(&at, g.data(), &mut db, k, m, n);
                accumulate(adj, *a, av.shape(), da);
                accumulate(adj, *b, bv.shape(), db);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), bv.data(), &mut da, m, n, k);
                let gt = transpose(g.data(), m, n);
                let mut db = vec![0.0; n * k];
                matmul_into(&gt, av.data(), &mut db, n, m, k);
                accumulate(adj, *a, av.shape(), da);
                accumulate(adj, *b, bv.shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.shape(), g.data().to_vec());
                accumulate(adj, *b, g.shape(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.shape(), g.data().to_vec());
                accumulate(adj, *b, g.shape(), g.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let da = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate(adj, *a, av.shape(), da);
                accumulate(adj, *b, bv.shape(), db);
            }
            Op::AddBias(a, bias) => {
                let n = val(bias).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(adj, *a, g.shape(), g.data().to_vec());
                accumulate(adj, *bias, val(bias).shape(), db);
            }
            Op::Scale(a, s) => {
                accumulate(adj, *a, g.shape(), g.data().iter().map(|v| v * s).collect());
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                accumulate(adj, *a, x.shape(), d);
            }
            Op::Gather(a, index, _) => {
                let x = val(a);
                let mut d = vec![0.0; x.len()];
                for (gv, i) in g.data().iter().zip(index.iter()) {
                    if let Some(i) = i {
                        d[*i as usize] += gv;
                    }
                }
                accumulate(adj, *a, x.shape(), d);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(a).cols(), val(b).cols());
                let mut da = Vec::with_capacity(val(a).len());
                let mut db = Vec::with_capacity(val(b).len());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(adj, *a, val(a).shape(), da);
                accumulate(adj, *b, val(b).shape(), db);
            }
            Op::Reshape(a, _) => {
                accumulate(adj, *a, val(a).shape(), g.data().to_vec());
            }
            Op::NormalizeRows(a) => {
                let x = val(a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for i in 0..x.rows() {
                    let n = row_norm(x.row(i));
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let yg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = (gr[j] - y[j] * yg) / n;
                    }
                }
                accumulate(adj, *a, x.shape(), d);
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for i in 0..out.rows() {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        d[i * c + j] = gr[j] - out.data()[i * c + j].exp() * gs;
                    }
                }
                accumulate(adj, *a, out.shape(), d);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for i in 0..out.rows() {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let gy: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = y[j] * (gr[j] - gy);
                    }
                }
                accumulate(adj, *a, out.shape(), d);
            }
            Op::LseRowsOffDiag(a) => {
                let x = val(a);
                let m = x.rows();
                let mut d = vec![0.0; m * m];
                for i in 0..m {
                    let lse = out.data()[i];
                    for k in 0..m {
                        if k != i {
                            d[i * m + k] = g.data()[i] * (x.data()[i * m + k] - lse).exp();
                        }
                    }
                }
                accumulate(adj, *a, x.shape(), d);
            }
            Op::Sum(a) => {
                let x = val(a);
                accumulate(adj, *a, x.shape(), vec![g.item(); x.len()]);
            }
            Op::WeightedSum(a, w) => {
                let gv = g.item();
                let d = w.data().iter().map(|w| w * gv).collect();
                accumulate(adj, *a, val(a).shape(), d);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut adj[v.0] {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_raw(shape.to_vec(), delta)),
    }
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// Forward kernel shared by recording and replay.
fn eval<'a>(op: &Op, get: impl Fn(&Var) -> &'a Tensor) -> Tensor {
    match op {
        Op::Param | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (get(a), get(b));
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::from_raw(vec![m, n], out)
        }
        Op::MatMulNt(a, b) => {
            let (a, b) = (get(a), get(b));
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let bt = transpose(b.data(), n, k);
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), &bt, &mut out, m, k, n);
            Tensor::from_raw(vec![m, n], out)
        }
        Op::Add(a, b) => zip_with(get(a), get(b), |x, y| x + y),
        Op::Sub(a, b) => zip_with(get(a), get(b), |x, y| x - y),
        Op::Mul(a, b) => zip_with(get(a), get(b), |x, y| x * y),
        Op::AddBias(a, bias) => {
            let (a, bias) = (get(a), get(bias));
            let n = bias.len();
            let data = a
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(bias.data()).map(|(x, b)| x + b))
                .collect();
            Tensor::from_raw(a.shape().to_vec(), data)
        }
        Op::Scale(a, s) => get(a).map(|x| x * s),
        Op::LeakyRelu(a, slope) => get(a).map(|x| if x > 0.0 { x } else { x * slope }),
        Op::Gather(a, index, shape) => {
            let src = get(a).data();
            let data = index
                .iter()
                .map(|i| i.map_or(0.0, |i| src[i as usize]))
                .collect();
            Tensor::from_raw(shape.clone(), data)
        }
        Op::ConcatCols(a, b) => {
            let (a, b) = (get(a), get(b));
            let (ca, cb) = (a.cols(), b.cols());
            let mut data = Vec::with_capacity(a.len() + b.len());
            for i in 0..a.rows() {
                data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
                data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
            }
            Tensor::from_raw(vec![a.rows(), ca + cb], data)
        }
        Op::Reshape(a, shape) => Tensor::from_raw(shape.clone(), get(a).data().to_vec()),
        Op::NormalizeRows(a) => {
            let x = get(a);
            let c = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                let n = row_norm(row);
                row.iter_mut().for_each(|v| *v /= n);
            }
            Tensor::from_raw(x.shape().to_vec(), data)
        }
        Op::LogSoftmaxRows(a) => {
            let x = get(a);
            let c = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::from_raw(x.shape().to_vec(), data)
        }
        Op::SoftmaxRows(a) => {
            let x = get(a);
            let c = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - max).exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::from_raw(x.shape().to_vec(), data)
        }
        Op::LseRowsOffDiag(a) => {
            let x = get(a);
            let m = x.rows();
            let data = (0..m)
                .map(|i| {
                    let row = x.row(i);
                    crate::tensor::log_sum_exp(
                        row.iter()
                            .enumerate()
                            .filter(move |(k, _)| *k != i)
                            .map(|(_, v)| *v),
                    )
                })
                .collect();
            Tensor::from_raw(vec![m], data)
        }
        Op::Sum(a) => Tensor::scalar(get(a).data().iter().sum()),
        Op::WeightedSum(a, w) => {
            Tensor::scalar(get(a).data().iter().zip(w.data()).map(|(x, w)| x * w).sum())
        }
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_raw(a.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        let r = grad(&tape, y, &[x]);
        assert_eq!(r.grads[0].item(), 6.0);
        assert!(r.is_fully_connected());
    }

    #[test]
    fn constant_output_has_zero_gradient_and_is_flagged() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(7.0));
        let y = tape.scale(c, 2.0);
        let r = grad(&tape, y, &[x]);
        assert_eq!(r.grads[0].item(), 0.0);
        assert_eq!(r.disconnected, vec![0]);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let a = tape.param(rand_tensor(&mut rng, &[5, 4]));
        let b = tape.param(rand_tensor(&mut rng, &[4, 3]));
        let h = tape.matmul(a, b);
        let h = tape.leaky_relu(h, 0.01);
        let z = tape.normalize_rows(h).unwrap();
        let s = tape.matmul_nt(z, z);
        let l = tape.lse_rows_off_diag(s);
        let out = tape.sum(l);
        let replayed = tape.replay(out);
        assert_eq!(replayed.item().to_bits(), tape.value(out).item().to_bits());
    }

    #[test]
    fn normalize_rows_refuses_zero_row() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 3]));
        assert!(tape.normalize_rows(x).is_err());
    }

    /// Every primitive against central differences on random inputs.
    #[test]
    fn primitives_match_finite_differences() {
        let cfg = GradCheckConfig::default();
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let params = vec![
                rand_tensor(&mut rng, &[4, 3]),
                rand_tensor(&mut rng, &[3, 5]),
                rand_tensor(&mut rng, &[5]),
                rand_tensor(&mut rng, &[4, 5]),
            ];
            let weights = Arc::new(rand_tensor(&mut rng, &[4]));
            let mix = Arc::new(rand_tensor(&mut rng, &[4, 4]));
            let index: Arc<[Option<u32>]> =
                (0..30).map(|k| if k % 7 == 3 { None } else { Some((k * 5 % 20) as u32) }).collect();
            let report = check_gradients(&params, &cfg, |tape, p| {
                let h = tape.matmul(p[0], p[1]);
                let h = tape.add_bias(h, p[2]);
                let h = tape.leaky_relu(h, 0.01);
                let h2 = tape.mul(h, p[3]);
                let h = tape.sub(h2, p[3]);
                let h = tape.add(h, h2);
                let cat = tape.concat_cols(h, p[3]);
                let lsm = tape.log_softmax_rows(cat);
                let sm = tape.softmax_rows(h);
                let sm = tape.scale(sm, 1.7);
                let z = tape.normalize_rows(h)?;
                let s = tape.matmul_nt(z, z);
                let s = tape.scale(s, 2.0);
                let lse = tape.lse_rows_off_diag(s);
                let g = tape.gather(p[3], index.clone(), &[6, 5]);
                let g = tape.reshape(g, &[30]);
                let a = tape.weighted_sum(lse, weights.clone());
                let b = tape.weighted_sum(s, mix.clone());
                let c = tape.mean(lsm);
                let d = tape.mul(sm, sm);
                let d = tape.sum(d);
                let e = tape.mul(g, g);
                let e = tape.sum(e);
                let ab = tape.add(a, b);
                let cd = tape.sub(c, d);
                let t = tape.add(ab, cd);
                Ok(tape.add(t, e))
            })
            .unwrap();
            assert!(report.passed, "trial {trial}: max rel err {}", report.max_rel_error);
        }
    }
}
