//! Reverse-mode differentiation over recorded graphs.
//!
//! `grads` walks the graph once in reverse topological order, expressing each
//! vector-Jacobian product with the same recorded ops used in the forward
//! pass. With `create_graph` the returned gradients are themselves
//! differentiable, which is what `hvp` and `mixed_vjp` exploit: both reduce a
//! second-order product to "backward, inner product with a constant vector,
//! backward again".

use super::ops::dot;
use super::{Node, Op, ParamSet, Result, Tensor, TensorError};
use std::collections::{HashMap, HashSet};

/// Gradient of a scalar `loss` with respect to `params`, detached from any
/// graph. Parameters that do not appear in the graph get zero gradients.
pub fn backward(loss: &Tensor, params: &ParamSet) -> Result<ParamSet> {
    let leaves: Vec<Tensor> = params.tensors().cloned().collect();
    let gs = grads(loss, &leaves, false)?;
    Ok(params.with_tensors(gs))
}

/// Gradients of a scalar `loss` with respect to `leaves`.
///
/// With `create_graph` the results stay connected, so they can be
/// differentiated again; otherwise all adjoint arithmetic runs on detached
/// values and no graph is built.
pub fn grads(loss: &Tensor, leaves: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if !loss.is_scalar() {
        return Err(TensorError::NotScalar {
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.is_connected() {
        return Err(TensorError::NotRecorded);
    }

    let order = topo_order(loss);
    let mut adjoints: HashMap<usize, Tensor> = HashMap::new();
    adjoints.insert(loss.ptr_id(), Tensor::filled(1, 1, 1.0));

    for t in order.iter().rev() {
        let Some(g) = adjoints.get(&t.ptr_id()).cloned() else {
            continue;
        };
        if let Some(Node::Op(op)) = &t.inner.node {
            propagate(op, t, &g, create_graph, &mut adjoints)?;
        }
    }

    leaves
        .iter()
        .map(|leaf| match adjoints.get(&leaf.ptr_id()) {
            Some(g) if create_graph => Ok(g.clone()),
            Some(g) => Ok(g.detach()),
            None => Ok(Tensor::zeros(leaf.rows(), leaf.cols())),
        })
        .collect()
}

/// Hessian-vector product `(d²loss/dp dpᵀ) · v` by double backward.
///
/// `loss_fn` is evaluated on a fresh leaf view of `params`; `v` is flat in
/// the parameter set's canonical (name-sorted) order.
pub fn hvp<F>(loss_fn: F, params: &ParamSet, v: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&ParamSet) -> Result<Tensor>,
{
    if v.len() != params.param_count() {
        return Err(TensorError::DimMismatch {
            expected: params.param_count(),
            got: v.len(),
        });
    }
    let leaves = params.to_leaves();
    let leaf_vec: Vec<Tensor> = leaves.tensors().cloned().collect();
    let loss = loss_fn(&leaves)?;
    if !loss.is_connected() {
        return Ok(vec![0.0; v.len()]);
    }
    let gs = grads(&loss, &leaf_vec, true)?;
    match grad_dot_vector(&gs, v)? {
        Some(s) => {
            let hs = grads(&s, &leaf_vec, false)?;
            Ok(flatten_tensors(&hs))
        }
        // Gradient is constant in the parameters: zero curvature.
        None => Ok(vec![0.0; v.len()]),
    }
}

/// `vᵀ · ∂²loss/∂θ ∂ω`: the gradient of `⟨∂loss/∂θ, v⟩` with respect to `ω`.
///
/// `v` is flat over `theta`; the result is flat over `omega`. Only the
/// explicit coupling recorded in the graph contributes.
pub fn mixed_vjp<F>(loss_fn: F, theta: &ParamSet, omega: &ParamSet, v: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&ParamSet, &ParamSet) -> Result<Tensor>,
{
    if v.len() != theta.param_count() {
        return Err(TensorError::DimMismatch {
            expected: theta.param_count(),
            got: v.len(),
        });
    }
    let theta_leaves = theta.to_leaves();
    let omega_leaves = omega.to_leaves();
    let theta_vec: Vec<Tensor> = theta_leaves.tensors().cloned().collect();
    let omega_vec: Vec<Tensor> = omega_leaves.tensors().cloned().collect();
    let loss = loss_fn(&theta_leaves, &omega_leaves)?;
    if !loss.is_connected() {
        return Ok(vec![0.0; omega.param_count()]);
    }
    let gs = grads(&loss, &theta_vec, true)?;
    match grad_dot_vector(&gs, v)? {
        Some(s) => {
            let go = grads(&s, &omega_vec, false)?;
            Ok(flatten_tensors(&go))
        }
        None => Ok(vec![0.0; omega.param_count()]),
    }
}

/// `Σ_i ⟨g_i, v_i⟩` with `v` constant; `None` when every term is constant
/// (nothing left to differentiate).
fn grad_dot_vector(gs: &[Tensor], v: &[f64]) -> Result<Option<Tensor>> {
    let mut s = Tensor::scalar(0.0)?;
    let mut offset = 0;
    for g in gs {
        let n = g.numel();
        let vc = Tensor::new(g.rows(), g.cols(), v[offset..offset + n].to_vec())?;
        s = s.add(&dot(g, &vc)?)?;
        offset += n;
    }
    Ok(s.is_connected().then_some(s))
}

fn flatten_tensors(ts: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ts.iter().map(Tensor::numel).sum());
    for t in ts {
        out.extend_from_slice(t.data());
    }
    out
}

fn op_parents(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::Transpose(x)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Ln(x)
        | Op::Clamp { x, .. }
        | Op::Neg(x)
        | Op::Scale(x, _)
        | Op::SumAll(x)
        | Op::MeanAll(x)
        | Op::SumRows(x)
        | Op::BroadcastRows(x)
        | Op::BroadcastScalar(x)
        | Op::SliceCols { x, .. }
        | Op::GatherRows { x, .. }
        | Op::ScatterRows { x, .. } => vec![x.clone()],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr_id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(Node::Op(op)) = &t.inner.node {
            for p in op_parents(op) {
                if p.is_connected() && !visited.contains(&p.ptr_id()) {
                    stack.push((p, false));
                }
            }
        }
    }
    order
}

/// Accumulates `contrib` into the adjoint of `parent`. Skips constants: they
/// are graph boundaries and never need gradients.
fn add_adjoint(adjoints: &mut HashMap<usize, Tensor>, parent: &Tensor, contrib: Tensor) -> Result<()> {
    if !parent.is_connected() {
        return Ok(());
    }
    let key = parent.ptr_id();
    let next = match adjoints.get(&key) {
        Some(prev) => prev.add(&contrib)?,
        None => contrib,
    };
    adjoints.insert(key, next);
    Ok(())
}

/// Reduces a full-shape gradient back to the right operand's shape for the
/// broadcast forms of the elementwise ops.
fn reduce_to(full: &Tensor, target: &Tensor) -> Result<Tensor> {
    if target.shape() == full.shape() {
        Ok(full.clone())
    } else if target.rows() == 1 && target.cols() == 1 {
        full.sum_all()
    } else {
        full.sum_rows()
    }
}

fn mask_of(x: &Tensor, pred: impl Fn(f64) -> bool) -> Tensor {
    let data = x.data().iter().map(|&v| if pred(v) { 1.0 } else { 0.0 }).collect();
    Tensor::from_parts(x.rows(), x.cols(), data, None)
}

fn propagate(
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    create_graph: bool,
    adjoints: &mut HashMap<usize, Tensor>,
) -> Result<()> {
    // With create_graph the VJP expressions must stay connected to the live
    // graph; without it they run on detached values so nothing is recorded.
    let cg = |t: &Tensor| if create_graph { t.clone() } else { t.detach() };
    let g = cg(g);

    match op {
        Op::Add(a, b) => {
            add_adjoint(adjoints, a, g.clone())?;
            add_adjoint(adjoints, b, reduce_to(&g, b)?)?;
        }
        Op::Sub(a, b) => {
            add_adjoint(adjoints, a, g.clone())?;
            add_adjoint(adjoints, b, reduce_to(&g, b)?.neg()?)?;
        }
        Op::Mul(a, b) => {
            add_adjoint(adjoints, a, g.mul(&cg(b))?)?;
            add_adjoint(adjoints, b, reduce_to(&g.mul(&cg(a))?, b)?)?;
        }
        Op::Div(a, b) => {
            let bv = cg(b);
            add_adjoint(adjoints, a, g.div(&bv)?)?;
            if b.is_connected() {
                let num = g.mul(&cg(a))?.div(&bv.mul(&bv)?)?;
                add_adjoint(adjoints, b, reduce_to(&num, b)?.neg()?)?;
            }
        }
        Op::Matmul(a, b) => {
            add_adjoint(adjoints, a, g.matmul(&cg(b).transpose()?)?)?;
            add_adjoint(adjoints, b, cg(a).transpose()?.matmul(&g)?)?;
        }
        Op::Transpose(x) => add_adjoint(adjoints, x, g.transpose()?)?,
        Op::Relu(x) => {
            add_adjoint(adjoints, x, g.mul(&mask_of(x, |v| v > 0.0))?)?;
        }
        Op::Sigmoid(x) => {
            let s = cg(out);
            let one_minus = Tensor::filled(s.rows(), s.cols(), 1.0).sub(&s)?;
            add_adjoint(adjoints, x, g.mul(&s)?.mul(&one_minus)?)?;
        }
        Op::Ln(x) => add_adjoint(adjoints, x, g.div(&cg(x))?)?,
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            add_adjoint(adjoints, x, g.mul(&mask_of(x, |v| v >= lo && v <= hi))?)?;
        }
        Op::Neg(x) => add_adjoint(adjoints, x, g.neg()?)?,
        Op::Scale(x, c) => add_adjoint(adjoints, x, g.scale(*c)?)?,
        Op::SumAll(x) => {
            add_adjoint(adjoints, x, g.broadcast_scalar(x.rows(), x.cols())?)?;
        }
        Op::MeanAll(x) => {
            let spread = g.broadcast_scalar(x.rows(), x.cols())?;
            add_adjoint(adjoints, x, spread.scale(1.0 / x.numel() as f64)?)?;
        }
        Op::SumRows(x) => add_adjoint(adjoints, x, g.broadcast_rows(x.rows())?)?,
        Op::BroadcastRows(x) => add_adjoint(adjoints, x, g.sum_rows()?)?,
        Op::BroadcastScalar(x) => add_adjoint(adjoints, x, g.sum_all()?)?,
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                add_adjoint(adjoints, p, g.slice_cols(offset, p.cols())?)?;
                offset += p.cols();
            }
        }
        Op::SliceCols { x, start, len } => {
            let mut padded = Vec::with_capacity(3);
            if *start > 0 {
                padded.push(Tensor::zeros(x.rows(), *start));
            }
            padded.push(g.clone());
            let tail = x.cols() - start - len;
            if tail > 0 {
                padded.push(Tensor::zeros(x.rows(), tail));
            }
            add_adjoint(adjoints, x, super::ops::concat_cols(&padded)?)?;
        }
        Op::GatherRows { x, idx } => {
            add_adjoint(adjoints, x, g.scatter_rows(idx, x.rows())?)?;
        }
        Op::ScatterRows { x, idx, .. } => {
            add_adjoint(adjoints, x, g.gather_rows(idx)?)?;
        }
    }
    Ok(())
}
