use std::collections::{HashMap, HashSet};

use crate::tensor::{with_grad_mode, Op, Tensor};

fn const_like(reference: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::constant(reference.value().mapv(f))
}

/// Gradients of `out` (seeded with ones) with respect to each parent of `node`.
fn backward_node(node: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
    let parents = &node.0.parents;
    let p = |i: usize| &parents[i];
    let shape = |i: usize| parents[i].shape().to_vec();
    match &node.0.op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(g.sum_to(&shape(0))), Some(g.sum_to(&shape(1)))],
        Op::Sub => vec![Some(g.sum_to(&shape(0))), Some(g.neg().sum_to(&shape(1)))],
        Op::Mul => vec![Some(g.mul(p(1)).sum_to(&shape(0))), Some(g.mul(p(0)).sum_to(&shape(1)))],
        Op::Div => {
            let ga = g.div(p(1)).sum_to(&shape(0));
            let gb = g.mul(p(0)).div(&p(1).square()).neg().sum_to(&shape(1));
            vec![Some(ga), Some(gb)]
        }
        Op::Neg => vec![Some(g.neg())],
        Op::Exp => vec![Some(g.mul(node))],
        Op::Log => vec![Some(g.div(p(0)))],
        Op::Sigmoid => vec![Some(g.mul(&node.mul(&node.neg().add_scalar(1.0))))],
        Op::Softplus => vec![Some(g.mul(&p(0).sigmoid()))],
        Op::Tanh => vec![Some(g.mul(&node.square().neg().add_scalar(1.0)))],
        Op::Sin => vec![Some(g.mul(&p(0).cos()))],
        Op::Cos => vec![Some(g.mul(&p(0).sin()).neg())],
        Op::Sqrt => vec![Some(g.div(node).scale(0.5))],
        Op::Abs => vec![Some(g.mul(&const_like(p(0), |x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })))],
        Op::Square => vec![Some(g.mul(p(0)).scale(2.0))],
        Op::LeakyRelu(s) => {
            let s = *s;
            vec![Some(g.mul(&const_like(p(0), |x| if x > 0.0 { 1.0 } else { s })))]
        }
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            vec![Some(g.mul(&const_like(p(0), |x| if x >= lo && x <= hi { 1.0 } else { 0.0 })))]
        }
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::MatMul => vec![Some(g.matmul(&p(1).t())), Some(p(0).t().matmul(g))],
        Op::Transpose => vec![Some(g.t())],
        Op::Reshape => vec![Some(g.reshape(&shape(0)))],
        Op::SumAll => vec![Some(g.broadcast_to(&shape(0)))],
        Op::SumAxis(axis, keepdim) => {
            let g = if *keepdim {
                g.clone()
            } else {
                let mut s = g.shape().to_vec();
                s.insert(*axis, 1);
                g.reshape(&s)
            };
            vec![Some(g.broadcast_to(&shape(0)))]
        }
        Op::BroadcastTo => vec![Some(g.sum_to(&shape(0)))],
        Op::SumTo => vec![Some(g.broadcast_to(&shape(0)))],
        Op::Spmm(s) => vec![Some(g.spmm(&s.transpose()))],
        Op::Narrow { axis, start } => vec![Some(g.pad(*axis, *start, shape(0)[*axis]))],
        Op::Pad { axis, before } => vec![Some(g.narrow(*axis, *before, shape(0)[*axis]))],
        Op::Concat { axis } => {
            let mut offset = 0;
            parents
                .iter()
                .map(|part| {
                    let n = part.shape()[*axis];
                    let gp = g.narrow(*axis, offset, n);
                    offset += n;
                    Some(gp)
                })
                .collect()
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children-pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for parent in &node.0.parents {
            if parent.requires_grad() && !visited.contains(&parent.id()) {
                stack.push((parent.clone(), false));
            }
        }
    }
    order
}

/// Reverse-mode gradients of the sum of `output` with respect to `inputs`.
///
/// With `create_graph` the returned gradients are themselves differentiable,
/// which is what gradient penalties need. Inputs that `output` does not depend
/// on receive zeros.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    let wanted: HashMap<u64, usize> = inputs.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
    let mut results: Vec<Option<Tensor>> = vec![None; inputs.len()];
    if output.requires_grad() {
        let order = topo_order(output);
        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        grads.insert(output.id(), Tensor::ones(output.shape()));
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else { continue };
            if let Some(&i) = wanted.get(&node.id()) {
                results[i] = Some(g.clone());
            }
            if node.0.parents.is_empty() {
                continue;
            }
            let parent_grads = with_grad_mode(create_graph, || backward_node(node, &g));
            with_grad_mode(create_graph, || {
                for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    let acc = match grads.remove(&parent.id()) {
                        Some(prev) => prev.add(&pg),
                        None => pg,
                    };
                    grads.insert(parent.id(), acc);
                }
            });
        }
    }
    results
        .into_iter()
        .zip(inputs)
        .map(|(g, t)| g.unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}
