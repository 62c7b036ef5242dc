//! Dense `f64` tensors and the reverse-mode tape every model component is
//! written against.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{compare_gradients, finite_diff_check, GradCheckReport, ParamCheck};
pub use graph::{softmax_rows, Gradients, Graph, NodeId, EPS_NORM};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;

use crate::error::{Error, Result};

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(a, b)?;
    Ok(g.value(c).clone())
}

/// Per-channel mean over the spatial extent of an H×W×C tensor, on the tape.
pub fn avg_pool_spatial_node(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let (h, w, c) = g.value(x).dims3()?;
    let flat = g.reshape(x, &[h * w, c])?;
    g.mean_rows(flat)
}

pub fn avg_pool_spatial(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::dim(format!("avg_pool_spatial needs H×W×C, got {:?}", x.shape())));
    }
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let out = avg_pool_spatial_node(&mut g, xn)?;
    Ok(g.value(out).clone())
}

/// Unit-norm copy of a vector node.
pub fn l2_normalize_node(g: &mut Graph, z: NodeId) -> Result<NodeId> {
    let d = g.value(z).len();
    let row = g.reshape(z, &[1, d])?;
    let unit = g.normalize_rows(row)?;
    g.reshape(unit, &[d])
}

pub fn l2_normalize(z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let zn = g.constant(z.clone());
    let out = l2_normalize_node(&mut g, zn)?;
    Ok(g.value(out).clone())
}
