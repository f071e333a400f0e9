//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] wraps a tensor plus the local backward rule that produced it.
//! Graphs are built per forward pass; [`backward`] walks the graph in
//! reverse topological order and accumulates gradients into every leaf
//! that requires them. Accumulation order is fixed by construction order,
//! so identical graphs give bit-identical gradients.

use crate::error::{AkvsrError, Result};
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct VarNode {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    grad: RefCell<Option<Tensor>>,
}

/// A node in the computation graph. Cloning is cheap (shared Rc).
#[derive(Clone)]
pub struct Var {
    node: Rc<VarNode>,
}

impl Var {
    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var {
            node: Rc::new(VarNode {
                value,
                parents: vec![],
                backward: None,
                needs_grad: requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    pub fn scalar_const(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let needs_grad = parents.iter().any(|p| p.node.needs_grad);
        Var {
            node: Rc::new(VarNode {
                value,
                parents,
                backward: if needs_grad { Some(backward) } else { None },
                needs_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.needs_grad
    }

    /// Gradient accumulated by the last [`backward`] call, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.node.grad.borrow().clone()
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Var) -> Result<Var> {
        let value = self.value().add(other.value())?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let value = self.value().sub(other.value())?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        ))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let value = self.value().zip(other.value(), |a, b| a * b)?;
        let a = self.value().clone();
        let b = other.value().clone();
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(g.zip(&b, |x, y| x * y).unwrap()),
                    Some(g.zip(&a, |x, y| x * y).unwrap()),
                ]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Var {
        Var::from_op(
            self.value().scale(s),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.scale(s))]),
        )
    }

    /// Adds a non-differentiable offset (masks, positional encodings).
    pub fn add_const(&self, c: &Tensor) -> Result<Var> {
        let value = self.value().zip(c, |a, b| a + b)?;
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.clone())]),
        ))
    }

    pub fn relu(&self) -> Var {
        let mask: Vec<f64> = self
            .value()
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let value = self.value().map(|v| v.max(0.0));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = g.clone();
                for (o, m) in out.data_mut().iter_mut().zip(&mask) {
                    *o *= m;
                }
                vec![Some(out)]
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let value = self.value().matmul(other.value())?;
        let a = self.value().clone();
        let b = other.value().clone();
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = g.matmul(&b.transpose()).unwrap();
                let db = a.transpose().matmul(g).unwrap();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn transpose(&self) -> Var {
        Var::from_op(
            self.value().transpose(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.transpose())]),
        )
    }

    // ---- normalizations ----

    /// Row-wise softmax of `x / scale`, computed with max subtraction.
    /// Entries of `-inf` act as masks and receive probability zero.
    pub fn softmax_rows(&self, scale: f64) -> Result<Var> {
        if scale <= 0.0 {
            return Err(AkvsrError::Parameter(format!(
                "softmax scale must be positive, got {scale}"
            )));
        }
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(AkvsrError::Dimension(format!(
                "softmax_rows expects a matrix, got {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = x.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            debug_assert!(mx.is_finite(), "softmax row with no finite entry");
            let mut denom = 0.0;
            for j in 0..n {
                let e = ((row[j] - mx) / scale).exp();
                out.set(i, j, e);
                denom += e;
            }
            for j in 0..n {
                let v = out.at(i, j) / denom;
                out.set(i, j, v);
            }
        }
        let y = out.clone();
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let (m, n) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g.at(i, j) * y.at(i, j);
                    }
                    for j in 0..n {
                        dx.set(i, j, y.at(i, j) * (g.at(i, j) - dot) / scale);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row-wise log-softmax (for CTC heads and decoder output distributions).
    pub fn log_softmax_rows(&self) -> Result<Var> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(AkvsrError::Dimension(format!(
                "log_softmax_rows expects a matrix, got {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = x.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| ((v - mx)).exp()).sum::<f64>().ln();
            for j in 0..n {
                out.set(i, j, row[j] - lse);
            }
        }
        let y = out.clone();
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let (m, n) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let gsum: f64 = (0..n).map(|j| g.at(i, j)).sum();
                    for j in 0..n {
                        dx.set(i, j, g.at(i, j) - y.at(i, j).exp() * gsum);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row-wise layer normalization: `(x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(AkvsrError::Parameter(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(AkvsrError::Dimension(format!(
                "layer_norm expects a matrix, got {:?}",
                x.shape()
            )));
        }
        let d = x.cols();
        if gamma.value().shape() != [d] || beta.value().shape() != [d] {
            return Err(AkvsrError::ShapeMismatch {
                context: "layer_norm gamma/beta".into(),
                lhs: gamma.value().shape().to_vec(),
                rhs: vec![d],
            });
        }
        let m = x.rows();
        let mut out = Tensor::zeros(&[m, d]);
        let mut xhat = Tensor::zeros(&[m, d]);
        let mut inv_std = vec![0.0; m];
        let gm = gamma.value().clone();
        for i in 0..m {
            let row = x.row(i);
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat.set(i, j, h);
                out.set(i, j, h * gm.data()[j] + beta.value().data()[j]);
            }
        }
        Ok(Var::from_op(
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let (m, d) = (xhat.rows(), xhat.cols());
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                let mut dx = Tensor::zeros(&[m, d]);
                for i in 0..m {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xhat = 0.0;
                    for j in 0..d {
                        let dh = g.at(i, j) * gm.data()[j];
                        mean_dh += dh;
                        mean_dh_xhat += dh * xhat.at(i, j);
                        dgamma.data_mut()[j] += g.at(i, j) * xhat.at(i, j);
                        dbeta.data_mut()[j] += g.at(i, j);
                    }
                    mean_dh /= d as f64;
                    mean_dh_xhat /= d as f64;
                    for j in 0..d {
                        let dh = g.at(i, j) * gm.data()[j];
                        dx.set(
                            i,
                            j,
                            inv_std[i] * (dh - mean_dh - xhat.at(i, j) * mean_dh_xhat),
                        );
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    // ---- reductions ----

    /// `log sum exp` over each row of a matrix, max-subtracted; returns a length-m vector.
    pub fn logsumexp_rows(&self) -> Result<Var> {
        let x = self.value();
        if x.shape().len() != 2 || x.cols() == 0 {
            return Err(AkvsrError::Dimension(format!(
                "logsumexp_rows needs a non-empty axis, got shape {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[m]);
        for i in 0..m {
            let row = x.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.data_mut()[i] = if mx.is_finite() {
                mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
            } else {
                mx
            };
        }
        let xc = x.clone();
        let vals = out.clone();
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let (m, n2) = (xc.rows(), n);
                let mut dx = Tensor::zeros(&[m, n2]);
                for i in 0..m {
                    let lse = vals.data()[i];
                    for j in 0..n2 {
                        let w = if lse.is_finite() {
                            (xc.at(i, j) - lse).exp()
                        } else {
                            0.0
                        };
                        dx.set(i, j, g.data()[i] * w);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn sum_all(&self) -> Var {
        let shape = self.value().shape().to_vec();
        Var::from_op(
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.scalar_value()))]),
        )
    }

    // ---- gathers and slices ----

    /// Row gather: output row i is `self[indices[i]]`. Gradients scatter-add
    /// back per row (memory lookup and token embedding share this rule).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let table = self.value();
        if table.shape().len() != 2 {
            return Err(AkvsrError::Dimension(format!(
                "gather_rows expects a matrix table, got {:?}",
                table.shape()
            )));
        }
        let (n, d) = (table.rows(), table.cols());
        for (frame, &ix) in indices.iter().enumerate() {
            if ix >= n {
                return Err(AkvsrError::IndexOutOfRange { frame, label: ix, n });
            }
        }
        let mut out = Tensor::zeros(&[indices.len(), d]);
        for (i, &ix) in indices.iter().enumerate() {
            for j in 0..d {
                out.set(i, j, table.at(ix, j));
            }
        }
        let idx = indices.to_vec();
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dt = Tensor::zeros(&[n, d]);
                for (i, &ix) in idx.iter().enumerate() {
                    for j in 0..d {
                        let v = dt.at(ix, j) + g.at(i, j);
                        dt.set(ix, j, v);
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    /// Picks one scalar entry of a matrix.
    pub fn index2(&self, i: usize, j: usize) -> Result<Var> {
        let x = self.value();
        if x.shape().len() != 2 || i >= x.rows() || j >= x.cols() {
            return Err(AkvsrError::Dimension(format!(
                "index2 ({i},{j}) out of shape {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        Ok(Var::from_op(
            Tensor::scalar(x.at(i, j)),
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&[m, n]);
                dx.set(i, j, g.scalar_value());
                vec![Some(dx)]
            }),
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let x = self.value();
        if x.shape().len() != 2 || start >= end || end > x.cols() {
            return Err(AkvsrError::Dimension(format!(
                "slice_cols [{start},{end}) invalid for shape {:?}",
                x.shape()
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        let w = end - start;
        let mut out = Tensor::zeros(&[m, w]);
        for i in 0..m {
            for j in 0..w {
                out.set(i, j, x.at(i, start + j));
            }
        }
        Ok(Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..w {
                        dx.set(i, start + j, g.at(i, j));
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AkvsrError::Dimension("concat_cols of nothing".into()));
        }
        let m = parts[0].value().rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.value().cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[m, total]);
        let mut off = 0;
        for p in parts {
            let x = p.value();
            if x.rows() != m {
                return Err(AkvsrError::ShapeMismatch {
                    context: "concat_cols".into(),
                    lhs: vec![m],
                    rhs: vec![x.rows()],
                });
            }
            for i in 0..m {
                for j in 0..x.cols() {
                    out.set(i, off + j, x.at(i, j));
                }
            }
            off += x.cols();
        }
        let ws = widths.clone();
        Ok(Var::from_op(
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(ws.len());
                let mut off = 0;
                for &w in &ws {
                    let mut dx = Tensor::zeros(&[m, w]);
                    for i in 0..m {
                        for j in 0..w {
                            dx.set(i, j, g.at(i, off + j));
                        }
                    }
                    grads.push(Some(dx));
                    off += w;
                }
                grads
            }),
        ))
    }

    /// Numerically stable `log(exp(a_1) + ... + exp(a_k))` over scalar vars.
    /// Parts at `-inf` are absorbing-neutral; an all`-inf` input stays `-inf`.
    pub fn logaddexp_many(parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AkvsrError::Dimension("logaddexp of nothing".into()));
        }
        let vals: Vec<f64> = parts
            .iter()
            .map(|p| {
                debug_assert!(p.value().is_scalar());
                p.value().scalar_value()
            })
            .collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total = if mx.is_finite() {
            mx + vals.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
        } else {
            mx
        };
        let vc = vals.clone();
        Ok(Var::from_op(
            Tensor::scalar(total),
            parts.to_vec(),
            Box::new(move |g| {
                let gs = g.scalar_value();
                vc.iter()
                    .map(|&v| {
                        let w = if total.is_finite() { (v - total).exp() } else { 0.0 };
                        Some(Tensor::scalar(gs * w))
                    })
                    .collect()
            }),
        ))
    }
}

/// Runs reverse-mode accumulation from a scalar root. Every reachable node
/// that requires gradients ends up with `grad` set; leaves that do not
/// require gradients (frozen parameters, constants) get no entry.
pub fn backward(root: &Var) -> Result<()> {
    if !root.value().is_scalar() {
        return Err(AkvsrError::Contract(format!(
            "backward root must be scalar, got shape {:?}",
            root.value().shape()
        )));
    }
    // Iterative DFS postorder; reversed, it visits each node before its parents.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashSet<*const VarNode> = HashSet::new();
    let mut stack: Vec<(Var, usize)> = vec![(root.clone(), 0)];
    visited.insert(Rc::as_ptr(&root.node));
    while let Some((node, child_ix)) = stack.pop() {
        if child_ix < node.node.parents.len() {
            let parent = node.node.parents[child_ix].clone();
            stack.push((node, child_ix + 1));
            if parent.node.needs_grad && visited.insert(Rc::as_ptr(&parent.node)) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }

    for v in &order {
        *v.node.grad.borrow_mut() = None;
    }
    *root.node.grad.borrow_mut() = Some(Tensor::ones(&[]));

    for v in order.iter().rev() {
        let grad_out = match v.node.grad.borrow().clone() {
            Some(g) => g,
            None => continue,
        };
        if let Some(back) = &v.node.backward {
            let parent_grads = back(&grad_out);
            debug_assert_eq!(parent_grads.len(), v.node.parents.len());
            for (parent, pg) in v.node.parents.iter().zip(parent_grads) {
                if !parent.node.needs_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), parent.value().shape());
                    let mut slot = parent.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&pg),
                        None => *slot = Some(pg),
                    }
                }
            }
        }
    }
    Ok(())
}

/// Report from [`grad_check`]: per-parameter max relative error between the
/// analytic gradient and central finite differences.
#[derive(Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub tol: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Central finite-difference verification of the analytic gradient of a
/// scalar-valued function of named parameter tensors.
pub fn grad_check(
    f: &dyn Fn(&[Var]) -> Result<Var>,
    params: &[(String, Tensor)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let leaves: Vec<Var> = params
        .iter()
        .map(|(_, t)| Var::leaf(t.clone(), true))
        .collect();
    let root = f(&leaves)?;
    backward(&root)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| Tensor::zeros(l.value().shape())))
        .collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let ls: Vec<Var> = tensors.iter().map(|t| Var::leaf(t.clone(), false)).collect();
        Ok(f(&ls)?.value().scalar_value())
    };

    let mut per_param = Vec::new();
    let mut failures = Vec::new();
    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut worst = 0.0_f64;
        for k in 0..base[pi].len() {
            let mut plus = base.clone();
            plus[pi].data_mut()[k] += h;
            let mut minus = base.clone();
            minus[pi].data_mut()[k] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[pi].data()[k];
            if a.is_nan() || numeric.is_nan() {
                failures.push(format!("{name}[{k}]: NaN gradient (analytic {a}, numeric {numeric})"));
                worst = f64::INFINITY;
                continue;
            }
            let e = rel_err(a, numeric);
            if e > worst {
                worst = e;
            }
            if e > tol {
                failures.push(format!(
                    "{name}[{k}]: analytic {a:.6e} vs numeric {numeric:.6e} (rel {e:.3e} > {tol:.1e})"
                ));
            }
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport { per_param, tol, failures })
}
