use std::collections::HashMap;
use std::rc::Rc;

use super::array::{reduced_shape, Array};
use super::{Graph, Input, NodeRef, Op, Tensor};
use crate::error::{Error, Result};

/// Gradients returned by [`backward`], one per requested tensor and in the
/// same order. Every gradient has the shape of the tensor it belongs to.
#[derive(Clone, Debug)]
pub struct GradMap {
    entries: Vec<(Option<usize>, Tensor)>,
}

impl GradMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Gradient for a tensor that was in the `wrt` list.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        let id = t.node_id()?;
        self.entries
            .iter()
            .find(|(k, _)| *k == Some(id))
            .map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, g)| g)
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, g)| g).collect()
    }
}

impl std::ops::Index<usize> for GradMap {
    type Output = Tensor;

    fn index(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }
}

/// Reverse-mode gradients of a scalar `loss` with respect to each tensor in `wrt`.
///
/// Tensors that do not influence `loss` get a zero gradient. With
/// `create_graph`, each backward rule is recorded as graph operations and the
/// returned gradients are attached nodes that can be differentiated again.
pub fn backward(loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<GradMap> {
    if loss.value.numel() != 1 {
        return Err(Error::shape(
            "backward",
            format!("loss must be a scalar, got shape {:?}", loss.shape()),
        ));
    }
    let zeros = |t: &Tensor| Tensor::constant(Array::zeros(t.shape()));
    let Some(loss_node) = &loss.node else {
        return Ok(GradMap {
            entries: wrt.iter().map(|t| (t.node_id(), zeros(t))).collect(),
        });
    };
    let graph = loss_node.graph.clone();
    let end = loss_node.id;

    let mut targets: HashMap<usize, usize> = HashMap::new();
    for (i, t) in wrt.iter().enumerate() {
        if let Some(node) = &t.node {
            if !node.graph.same(&graph) {
                return Err(Error::InvalidArgument(
                    "backward target belongs to a different graph".into(),
                ));
            }
            targets.entry(node.id).or_insert(i);
        }
    }

    // Snapshot the recorded prefix; rules recorded with create_graph append
    // after `end` and are never revisited in this pass.
    let (ops, inputs, values): (Vec<Op>, Vec<Vec<Input>>, Vec<Rc<Array>>) = {
        let inner = graph.inner.borrow();
        let nodes = &inner.nodes[..=end];
        (
            nodes.iter().map(|n| n.op.clone()).collect(),
            nodes.iter().map(|n| n.inputs.clone()).collect(),
            nodes.iter().map(|n| Rc::clone(&n.value)).collect(),
        )
    };

    // A node needs a gradient only if some target lies upstream of it.
    let mut needs = vec![false; end + 1];
    for id in 0..=end {
        needs[id] = targets.contains_key(&id)
            || inputs[id]
                .iter()
                .any(|inp| inp.id.is_some_and(|j| needs[j]));
    }

    let as_tensor = |id: Option<usize>, value: &Rc<Array>| -> Tensor {
        match id {
            Some(id) if create_graph => Tensor {
                value: Rc::clone(value),
                node: Some(NodeRef {
                    graph: graph.clone(),
                    id,
                }),
            },
            _ => Tensor {
                value: Rc::clone(value),
                node: None,
            },
        }
    };

    let mut grads: Vec<Option<Tensor>> = vec![None; end + 1];
    let mut found: HashMap<usize, Tensor> = HashMap::new();
    grads[end] = Some(Tensor::constant(Array::full(loss.shape(), 1.0)));

    for id in (0..=end).rev() {
        let Some(g) = grads[id].take() else { continue };
        if targets.contains_key(&id) {
            found.insert(id, g.clone());
        }
        if !needs[id] {
            continue;
        }
        let ins: Vec<Tensor> = inputs[id]
            .iter()
            .map(|i| as_tensor(i.id, &i.value))
            .collect();
        let out = as_tensor(Some(id), &values[id]);
        for (k, inp) in inputs[id].iter().enumerate() {
            let Some(src) = inp.id else { continue };
            if !needs[src] {
                continue;
            }
            let contrib = input_grad(&ops[id], k, &g, &ins, &out)?;
            grads[src] = Some(match grads[src].take() {
                Some(acc) => acc.add(&contrib)?,
                None => contrib,
            });
        }
    }
    graph.inner.borrow_mut().generation += 1;

    let entries = wrt
        .iter()
        .map(|t| {
            let id = t.node_id();
            let g = id
                .and_then(|i| found.get(&i).cloned())
                .unwrap_or_else(|| zeros(t));
            (id, g)
        })
        .collect();
    Ok(GradMap { entries })
}

fn mask(values: &Array, keep: impl Fn(f64) -> f64) -> Tensor {
    Tensor::constant(values.map(keep))
}

/// Vector-Jacobian product of op output gradient `g` for operand `k`.
fn input_grad(op: &Op, k: usize, g: &Tensor, ins: &[Tensor], out: &Tensor) -> Result<Tensor> {
    let own = ins[k].shape().to_vec();
    Ok(match op {
        Op::Leaf => unreachable!("leaf nodes have no operands"),
        Op::Add => g.sum_to(&own)?,
        Op::Sub => {
            let r = g.sum_to(&own)?;
            if k == 0 {
                r
            } else {
                r.neg()
            }
        }
        Op::Mul => g.mul(&ins[1 - k])?.sum_to(&own)?,
        Op::Div => {
            if k == 0 {
                g.div(&ins[1])?.sum_to(&own)?
            } else {
                let denom = ins[1].mul(&ins[1])?;
                g.mul(&ins[0])?.div(&denom)?.neg().sum_to(&own)?
            }
        }
        Op::Neg => g.neg(),
        Op::Scale(c) => g.scale(*c),
        Op::MatMul => {
            if k == 0 {
                g.matmul(&ins[1].t()?)?
            } else {
                ins[0].t()?.matmul(g)?
            }
        }
        Op::Relu => g.mul(&mask(ins[0].value(), |v| if v > 0.0 { 1.0 } else { 0.0 }))?,
        Op::Softmax(axis) => {
            let dot = g.mul(out)?.sum(*axis, true)?;
            g.sub(&dot)?.mul(out)?
        }
        Op::Log => g.div(&ins[0])?,
        Op::Exp => g.mul(out)?,
        Op::Abs => g.mul(&mask(ins[0].value(), |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }))?,
        Op::Sqrt => g.div(out)?.scale(0.5),
        Op::ClampMin(floor) => {
            let floor = *floor;
            g.mul(&mask(
                ins[0].value(),
                |v| if v >= floor { 1.0 } else { 0.0 },
            ))?
        }
        Op::Sum { axis, keepdim } => {
            let g = if *keepdim {
                g.clone()
            } else {
                g.reshape(&reduced_shape(&own, *axis, true))?
            };
            g.expand(&own)?
        }
        Op::SumAll => g.expand(&own)?,
        Op::Reshape => g.reshape(&own)?,
        Op::Permute(perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            g.permute(&inverse)?
        }
        Op::Expand => g.sum_to(&own)?,
        Op::Concat(axis) => {
            let offset: usize = ins[..k].iter().map(|t| t.shape()[*axis]).sum();
            g.slice(*axis, offset, own[*axis])?
        }
        Op::Gather(index) => g.scatter_add(Rc::clone(index), &own)?,
        Op::ScatterAdd(index) => g.gather(Rc::clone(index), &own)?,
    })
}

impl Graph {
    pub(crate) fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}
