//! Reverse-mode autodiff over an append-only operation tape.
//!
//! Every differentiable operation appends a node holding its output value
//! and whatever it needs for the backward pass. [`Tape::backward`] walks
//! the nodes in exact reverse order and accumulates (`+=`) gradients into
//! the inputs of each node.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::{gemm, ParamId, ParamStore, Result, Scalar, Tensor, TensorError, View, ViewMut};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    Transpose(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    AssembleRows {
        sources: Vec<(Var, usize)>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Conv1dStride2 {
        x: Var,
        kernel: Var,
        width: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    OuterSum(Var, Var),
    RowScale {
        x: Var,
        weights: Vec<F>,
    },
    ScalarMul {
        x: Var,
        s: Var,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
        total: F,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Operation tape. Single-threaded; independent tapes may live on
/// separate threads.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for every parameter leaf that was reached from the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
    }

    /// Accumulate parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for (id, g) in self.params() {
            let t = &mut store.get_mut(id).value;
            match &mut t.grad {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }
}

fn shape_err<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape whose leaves never require gradients (forward-only use).
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let value = store.value(id).clone();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        let v = Var(nodes.len() - 1);
        drop(nodes);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Head-averaged attention probabilities `[queries × keys]` of an
    /// attention node, or `None` if `v` is not one.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<F>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        let Op::Attention { q, k, heads, probs, .. } = &node.op else {
            return None;
        };
        let nq = nodes[q.0].value.rows();
        let nk = nodes[k.0].value.rows();
        let mut out = Tensor::zeros(nq, nk);
        let inv = F::one() / F::from_usize(*heads).unwrap();
        for h in 0..*heads {
            let block = &probs[h * nq * nk..(h + 1) * nq * nk];
            add_into(out.data_mut(), block);
        }
        out.data_mut().iter_mut().for_each(|x| *x *= inv);
        Some(out)
    }

    // ---- forward operations ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let out = ta.matmul(tb)?;
        drop(nodes);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn elementwise(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| *x * s).collect()).unwrap()
        };
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `x + 1·bias` with `bias` of shape `[1 × cols]` added to every row.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            let (_, c) = tx.dims2("add_bias")?;
            if tb.shape() != [1, c] {
                return Err(shape_err("add_bias", tx, tb));
            }
            let mut out = tx.clone();
            out.requires_grad = false;
            for row in out.data_mut().chunks_mut(c) {
                add_into(row, tb.data());
            }
            out
        };
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x·W + b`, the affine map used throughout the model.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.nodes.borrow()[a.0].value.transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let c = F::from_f64_lossy(GELU_C);
        let k = F::from_f64_lossy(GELU_A);
        let half = F::from_f64_lossy(0.5);
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let data = t
                .data()
                .iter()
                .map(|&x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()))
                .collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Per-row layer normalization with learned gain and shift of shape `[1 × cols]`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let (r, c) = tx.dims2("layer_norm")?;
            if tg.shape() != [1, c] {
                return Err(shape_err("layer_norm", tx, tg));
            }
            if tb.shape() != [1, c] {
                return Err(shape_err("layer_norm", tx, tb));
            }
            let n = F::from_usize(c).unwrap();
            let mut out = vec![F::zero(); r * c];
            let mut xhat = vec![F::zero(); r * c];
            let mut rstd = vec![F::zero(); r];
            for i in 0..r {
                let row = &tx.data()[i * c..(i + 1) * c];
                let mean = row.iter().copied().sum::<F>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                let rs = F::one() / (var + eps).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let xh = (row[j] - mean) * rs;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = xh * tg.data()[j] + tb.data()[j];
                }
            }
            (Tensor::matrix(r, c, out)?, xhat, rstd)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (_, c) = t.dims2("softmax")?;
            let mut out = t.clone();
            out.requires_grad = false;
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
            out
        };
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            let (rows, c) = t.dims2("embedding")?;
            let mut data = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::Index {
                        op: "embedding",
                        index: id,
                        size: rows,
                    });
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::matrix(ids.len(), c, data)?
        };
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Build a matrix whose row `i` is row `sources[i].1` of `sources[i].0`.
    pub fn assemble_rows(&self, sources: &[(Var, usize)]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let Some((first, _)) = sources.first() else {
                return Err(TensorError::Invalid("assemble_rows: no sources".into()));
            };
            let c = nodes[first.0].value.dims2("assemble_rows")?.1;
            let mut data = Vec::with_capacity(sources.len() * c);
            for (v, r) in sources {
                let t = &nodes[v.0].value;
                let (rows, cols) = t.dims2("assemble_rows")?;
                if cols != c {
                    return Err(shape_err("assemble_rows", &nodes[first.0].value, t));
                }
                if *r >= rows {
                    return Err(TensorError::Index {
                        op: "assemble_rows",
                        index: *r,
                        size: rows,
                    });
                }
                data.extend_from_slice(t.row(*r));
            }
            Tensor::matrix(sources.len(), c, data)?
        };
        let inputs: Vec<Var> = sources.iter().map(|s| s.0).collect();
        Ok(self.push(
            out,
            Op::AssembleRows {
                sources: sources.to_vec(),
            },
            &inputs,
        ))
    }

    /// Stack along the row (time) axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let Some(first) = parts.first() else {
                return Err(TensorError::Invalid("concat_rows: no inputs".into()));
            };
            let c = nodes[first.0].value.dims2("concat_rows")?.1;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                let (r, cc) = t.dims2("concat_rows")?;
                if cc != c {
                    return Err(shape_err("concat_rows", &nodes[first.0].value, t));
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, c, data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Stack along the column (feature) axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let Some(first) = parts.first() else {
                return Err(TensorError::Invalid("concat_cols: no inputs".into()));
            };
            let r = nodes[first.0].value.dims2("concat_cols")?.0;
            let mut widths = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                let (rr, c) = t.dims2("concat_cols")?;
                if rr != r {
                    return Err(shape_err("concat_cols", &nodes[first.0].value, t));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.0].value.data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::matrix(r, total, data)?
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (r, c) = t.dims2("slice_cols")?;
            if start + len > c {
                return Err(TensorError::Index {
                    op: "slice_cols",
                    index: start + len,
                    size: c,
                });
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
            }
            Tensor::matrix(r, len, data)?
        };
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Strided temporal convolution with same padding.
    ///
    /// `x` is `[2T × d_in]`, `kernel` is `[width·d_in × d_out]` with tap `j`
    /// occupying rows `j·d_in..(j+1)·d_in`. Output row `t` is centered on
    /// input row `2t`, giving `[T × d_out]`.
    pub fn conv1d_stride2(&self, x: Var, kernel: Var, width: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tk) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let (len, d_in) = tx.dims2("conv1d_stride2")?;
            let (kr, d_out) = tk.dims2("conv1d_stride2")?;
            if width % 2 == 0 {
                return Err(TensorError::EvenKernel { width });
            }
            if len % 2 != 0 {
                return Err(TensorError::OddLength { len });
            }
            if kr != width * d_in {
                return Err(shape_err("conv1d_stride2", tx, tk));
            }
            let cols = im2col(tx.data(), len, d_in, width);
            let t_out = len / 2;
            let mut out = Tensor::zeros(t_out, d_out);
            gemm(
                t_out,
                width * d_in,
                d_out,
                View::rows(&cols, width * d_in),
                View::rows(tk.data(), d_out),
                F::zero(),
                ViewMut::rows(out.data_mut(), d_out),
            );
            out
        };
        Ok(self.push(out, Op::Conv1dStride2 { x, kernel, width }, &[x, kernel]))
    }

    /// Multi-head scaled dot-product attention. `q` is `[Nq × d]`, `k` and
    /// `v` are `[Nk × d]`; `d` splits into `heads` equal slices. With
    /// `causal`, query `i` only sees keys `j ≤ i`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (nq, d) = tq.dims2("attention")?;
            let (nk, dk) = tk.dims2("attention")?;
            if dk != d {
                return Err(shape_err("attention", tq, tk));
            }
            if tv.shape() != tk.shape() {
                return Err(shape_err("attention", tk, tv));
            }
            if heads == 0 || d % heads != 0 {
                return Err(TensorError::Invalid(format!(
                    "attention: width {d} not divisible by {heads} heads"
                )));
            }
            if causal && nq != nk {
                return Err(shape_err("attention(causal)", tq, tk));
            }
            let dh = d / heads;
            let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
            let mut probs = vec![F::zero(); heads * nq * nk];
            let mut out = Tensor::zeros(nq, d);
            for h in 0..heads {
                let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
                gemm(
                    nq,
                    dh,
                    nk,
                    View::rows(tq.data(), d).at(h * dh),
                    View::transposed(tk.data(), d).at(h * dh),
                    F::zero(),
                    ViewMut::rows(p, nk),
                );
                for i in 0..nq {
                    let row = &mut p[i * nk..(i + 1) * nk];
                    row.iter_mut().for_each(|s| *s *= scale);
                    if causal {
                        row[i + 1..].iter_mut().for_each(|s| *s = F::neg_infinity());
                    }
                    softmax_in_place(row);
                }
                gemm(
                    nq,
                    nk,
                    dh,
                    View::rows(p, nk),
                    View::rows(tv.data(), d).at(h * dh),
                    F::zero(),
                    ViewMut::rows(out.data_mut(), d).at(h * dh),
                );
            }
            (out, probs)
        };
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// `out[n, i·|b| + j] = a[n, i] + b[n, j]`.
    pub fn outer_sum(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (n, u) = ta.dims2("outer_sum")?;
            let (n2, w) = tb.dims2("outer_sum")?;
            if n != n2 {
                return Err(shape_err("outer_sum", ta, tb));
            }
            let mut data = Vec::with_capacity(n * u * w);
            for r in 0..n {
                for i in 0..u {
                    let ai = ta.data()[r * u + i];
                    data.extend(tb.row(r).iter().map(|&bj| ai + bj));
                }
            }
            Tensor::matrix(n, u * w, data)?
        };
        Ok(self.push(out, Op::OuterSum(a, b), &[a, b]))
    }

    /// Multiply row `i` by the constant `weights[i]`.
    pub fn row_scale(&self, x: Var, weights: &[F]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (r, c) = t.dims2("row_scale")?;
            if weights.len() != r {
                return Err(TensorError::ShapeMismatch {
                    op: "row_scale",
                    left: t.shape().to_vec(),
                    right: vec![weights.len()],
                });
            }
            let mut out = t.clone();
            out.requires_grad = false;
            for (row, &w) in out.data_mut().chunks_mut(c).zip(weights) {
                row.iter_mut().for_each(|v| *v *= w);
            }
            out
        };
        Ok(self.push(
            out,
            Op::RowScale {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Multiply every element of `x` by the `[1 × 1]` variable `s`.
    pub fn scalar_mul(&self, x: Var, s: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, ts) = (&nodes[x.0].value, &nodes[s.0].value);
            if ts.len() != 1 {
                return Err(shape_err("scalar_mul", tx, ts));
            }
            let sv = ts.data()[0];
            Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| *v * sv).collect())?
        };
        Ok(self.push(out, Op::ScalarMul { x, s }, &[x, s]))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.data().iter().copied().sum::<F>();
        self.push(Tensor::full(1, 1, s), Op::SumAll(a), &[a])
    }

    /// Weighted mean of per-row cross-entropy:
    /// `Σ w_n·(−log softmax(logits_n)[t_n]) / Σ w_n`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let (loss, probs, total) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            let (n, c) = t.dims2("softmax_cross_entropy")?;
            if targets.len() != n || weights.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    left: t.shape().to_vec(),
                    right: vec![targets.len(), weights.len()],
                });
            }
            if let Some(&bad) = targets.iter().find(|&&x| x >= c) {
                return Err(TensorError::Index {
                    op: "softmax_cross_entropy",
                    index: bad,
                    size: c,
                });
            }
            if weights.iter().any(|w| *w < F::zero() || !w.is_finite()) {
                return Err(TensorError::Invalid(
                    "softmax_cross_entropy: weights must be finite and non-negative".into(),
                ));
            }
            let total = weights.iter().copied().sum::<F>();
            if total <= F::zero() {
                return Err(TensorError::Invalid(
                    "softmax_cross_entropy: total weight is zero".into(),
                ));
            }
            let mut probs = t.data().to_vec();
            let mut loss = F::zero();
            for i in 0..n {
                let row = &mut probs[i * c..(i + 1) * c];
                let lse = log_sum_exp(row);
                let nll = lse - row[targets[i]];
                loss += weights[i] * nll;
                row.iter_mut().for_each(|x| *x = (*x - lse).exp());
            }
            (loss / total, probs, total)
        };
        Ok(self.push(
            Tensor::full(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total,
            },
            &[logits],
        ))
    }

    // ---- backward ----

    /// Back-propagate from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one(); nodes[root.0].value.len()]);

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backward_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> =
            self.params.borrow().iter().map(|(p, v)| (*p, *v)).collect();
        params.sort_unstable();
        Gradients { grads, params }
    }
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

/// Numerically stable `log Σ exp(row)`.
pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln()
}

fn im2col<F: Scalar>(x: &[F], len: usize, d_in: usize, width: usize) -> Vec<F> {
    let t_out = len / 2;
    let pad = width / 2;
    let mut cols = vec![F::zero(); t_out * width * d_in];
    for t in 0..t_out {
        for j in 0..width {
            let src = (2 * t + j) as isize - pad as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let src = src as usize;
            let dst = t * width * d_in + j * d_in;
            cols[dst..dst + d_in].copy_from_slice(&x[src * d_in..(src + 1) * d_in]);
        }
    }
    cols
}

/// Get (allocating on first touch) the gradient buffer of `v`, or `None`
/// when `v` does not need one.
fn grad_buf<'a, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
}

fn backward_node<F: Scalar>(nodes: &[Node<F>], node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let val = |v: &Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(a).rows(), val(a).cols());
            let n = val(b).cols();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                // dA = dC · Bᵀ
                gemm(
                    m,
                    n,
                    k,
                    View::rows(g, n),
                    View::transposed(val(b).data(), n),
                    F::one(),
                    ViewMut::rows(ga, k),
                );
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                // dB = Aᵀ · dC
                gemm(
                    k,
                    m,
                    n,
                    View::transposed(val(a).data(), k),
                    View::rows(g, n),
                    F::one(),
                    ViewMut::rows(gb, n),
                );
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y * *s);
            }
        }
        Op::AddBias(x, b) => {
            let c = val(b).cols();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(a).rows(), val(a).cols());
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let c = F::from_f64_lossy(GELU_C);
            let k = F::from_f64_lossy(GELU_A);
            let half = F::from_f64_lossy(0.5);
            let three = F::from_f64_lossy(3.0);
            let xs = val(a).data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for i in 0..g.len() {
                    let x = xs[i];
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (F::one() + t)
                        + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x);
                    ga[i] += g[i] * d;
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (r, c) = (val(x).rows(), val(x).cols());
            let gam = val(gamma).data();
            if let Some(gg) = grad_buf(nodes, grads, *gamma) {
                for i in 0..r * c {
                    gg[i % c] += g[i] * xhat[i];
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *beta) {
                for i in 0..r * c {
                    gb[i % c] += g[i];
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let n = F::from_usize(c).unwrap();
                let mut dxhat = vec![F::zero(); c];
                for i in 0..r {
                    let mut mean_d = F::zero();
                    let mut mean_dx = F::zero();
                    for j in 0..c {
                        let d = g[i * c + j] * gam[j];
                        dxhat[j] = d;
                        mean_d += d;
                        mean_dx += d * xhat[i * c + j];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for j in 0..c {
                        gx[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let c = node.value.cols();
            let y = node.value.data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (i, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                    let dot: F = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for j in 0..c {
                        ga[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let c = val(table).cols();
            if let Some(gt) = grad_buf(nodes, grads, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
        }
        Op::AssembleRows { sources } => {
            let c = node.value.cols();
            for (i, (v, r)) in sources.iter().enumerate() {
                if let Some(gs) = grad_buf(nodes, grads, *v) {
                    add_into(&mut gs[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(p).len();
                if let Some(gp) = grad_buf(nodes, grads, *p) {
                    add_into(gp, &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let r = node.value.rows();
            let mut col = 0;
            for p in parts {
                let w = val(p).cols();
                if let Some(gp) = grad_buf(nodes, grads, *p) {
                    for i in 0..r {
                        add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
                    }
                }
                col += w;
            }
        }
        Op::SliceCols { x, start } => {
            let c = val(x).cols();
            let w = node.value.cols();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for i in 0..node.value.rows() {
                    add_into(&mut gx[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                }
            }
        }
        Op::Conv1dStride2 { x, kernel, width } => {
            let (len, d_in) = (val(x).rows(), val(x).cols());
            let d_out = val(kernel).cols();
            let t_out = len / 2;
            let kw = width * d_in;
            if let Some(gk) = grad_buf(nodes, grads, *kernel) {
                let cols = im2col(val(x).data(), len, d_in, *width);
                gemm(
                    kw,
                    t_out,
                    d_out,
                    View::transposed(&cols, kw),
                    View::rows(g, d_out),
                    F::one(),
                    ViewMut::rows(gk, d_out),
                );
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let mut dcols = vec![F::zero(); t_out * kw];
                gemm(
                    t_out,
                    d_out,
                    kw,
                    View::rows(g, d_out),
                    View::transposed(val(kernel).data(), d_out),
                    F::zero(),
                    ViewMut::rows(&mut dcols, kw),
                );
                let pad = width / 2;
                for t in 0..t_out {
                    for j in 0..*width {
                        let src = (2 * t + j) as isize - pad as isize;
                        if src < 0 || src as usize >= len {
                            continue;
                        }
                        let src = src as usize;
                        let off = t * kw + j * d_in;
                        add_into(&mut gx[src * d_in..(src + 1) * d_in], &dcols[off..off + d_in]);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (nq, d) = (val(q).rows(), val(q).cols());
            let nk = val(k).rows();
            let dh = d / heads;
            let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
            let mut ds = vec![F::zero(); nq * nk];
            for h in 0..*heads {
                let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                if let Some(gv) = grad_buf(nodes, grads, *v) {
                    // dV_h += Pᵀ · dO_h
                    gemm(
                        nk,
                        nq,
                        dh,
                        View::transposed(p, nk),
                        View::rows(g, d).at(h * dh),
                        F::one(),
                        ViewMut::rows(gv, d).at(h * dh),
                    );
                }
                // dP = dO_h · V_hᵀ
                gemm(
                    nq,
                    dh,
                    nk,
                    View::rows(g, d).at(h * dh),
                    View::transposed(val(v).data(), d).at(h * dh),
                    F::zero(),
                    ViewMut::rows(&mut ds, nk),
                );
                for i in 0..nq {
                    let pr = &p[i * nk..(i + 1) * nk];
                    let dr = &mut ds[i * nk..(i + 1) * nk];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                    for j in 0..nk {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if let Some(gq) = grad_buf(nodes, grads, *q) {
                    gemm(
                        nq,
                        nk,
                        dh,
                        View::rows(&ds, nk),
                        View::rows(val(k).data(), d).at(h * dh),
                        F::one(),
                        ViewMut::rows(gq, d).at(h * dh),
                    );
                }
                if let Some(gk) = grad_buf(nodes, grads, *k) {
                    gemm(
                        nk,
                        nq,
                        dh,
                        View::transposed(&ds, nk),
                        View::rows(val(q).data(), d).at(h * dh),
                        F::one(),
                        ViewMut::rows(gk, d).at(h * dh),
                    );
                }
            }
        }
        Op::OuterSum(a, b) => {
            let (n, u) = (val(a).rows(), val(a).cols());
            let w = val(b).cols();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for r in 0..n {
                    for i in 0..u {
                        let off = r * u * w + i * w;
                        ga[r * u + i] += g[off..off + w].iter().copied().sum::<F>();
                    }
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for r in 0..n {
                    for i in 0..u {
                        let off = r * u * w + i * w;
                        add_into(&mut gb[r * w..(r + 1) * w], &g[off..off + w]);
                    }
                }
            }
        }
        Op::RowScale { x, weights } => {
            let c = node.value.cols();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (i, &w) in weights.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[i * c + j] * w;
                    }
                }
            }
        }
        Op::ScalarMul { x, s } => {
            let sv = val(s).data()[0];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += *b * sv);
            }
            if let Some(gs) = grad_buf(nodes, grads, *s) {
                gs[0] += g.iter().zip(val(x).data()).map(|(a, b)| *a * *b).sum::<F>();
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            total,
        } => {
            let c = val(logits).cols();
            if let Some(gl) = grad_buf(nodes, grads, *logits) {
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let f = g[0] * w / *total;
                    if f == F::zero() {
                        continue;
                    }
                    for j in 0..c {
                        gl[i * c + j] += f * probs[i * c + j];
                    }
                    gl[i * c + t] -= f;
                }
            }
        }
    }
}
