//! Frequency attention fusion: HH sub-band tokens query RGB tokens, the
//! attended values are projected back to image space and added to the
//! input as a residual, and a small head turns the fused image into a unit
//! contrastive embedding.
//!
//! Token grids: HH (half resolution) is cut into `p×p` patches and the image
//! into `2p×2p` patches, so both sides have `(H/2p)·(W/2p)` tokens and token
//! `t` of either side covers the same image region.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{avg_pool_spatial_node, l2_normalize_node, Graph, NodeId, Tensor};

/// Flat source index for every element of the token matrix of an h×w×c
/// tensor cut into `patch`×`patch` blocks.
pub fn token_index(h: usize, w: usize, c: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!("patch {patch} does not divide {h}×{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut idx = Vec::with_capacity(h * w * c);
    for bi in 0..gh {
        for bj in 0..gw {
            for di in 0..patch {
                for dj in 0..patch {
                    let (y, x) = (bi * patch + di, bj * patch + dj);
                    for ch in 0..c {
                        idx.push((y * w + x) * c + ch);
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn inverse(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (k, &src) in index.iter().enumerate() {
        inv[src] = k;
    }
    inv
}

pub fn tokenize_node(g: &mut Graph, x: NodeId, patch: usize) -> Result<NodeId> {
    let (h, w, c) = g.value(x).dims3()?;
    let idx = token_index(h, w, c, patch)?;
    let t = (h / patch) * (w / patch);
    g.gather(x, idx.into(), &[t, patch * patch * c])
}

pub fn detokenize_node(
    g: &mut Graph,
    tokens: NodeId,
    (h, w, c): (usize, usize, usize),
    patch: usize,
) -> Result<NodeId> {
    let idx = token_index(h, w, c, patch)?;
    if g.value(tokens).len() != idx.len() {
        return Err(Error::dim(format!(
            "detokenize: {:?} tokens cannot fill {h}×{w}×{c}",
            g.value(tokens).shape()
        )));
    }
    let inv: Rc<[usize]> = inverse(&idx).into();
    g.gather(tokens, inv, &[h, w, c])
}

/// Non-overlapping `patch`×`patch` tokens, flattened row-major, in row-major
/// block order.
pub fn tokenize(x: &Tensor, patch: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let t = tokenize_node(&mut g, xn, patch)?;
    Ok(g.value(t).clone())
}

pub fn detokenize(tokens: &Tensor, shape: (usize, usize, usize), patch: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let tn = g.constant(tokens.clone());
    let x = detokenize_node(&mut g, tn, shape, patch)?;
    Ok(g.value(x).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FafDims {
    /// HH patch size; the image side uses `2 * patch`.
    pub patch: usize,
    pub channels: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_h: usize,
    pub d_embed: usize,
}

impl Default for FafDims {
    fn default() -> Self {
        Self {
            patch: 4,
            channels: 3,
            d_k: 64,
            d_v: 64,
            d_h: 128,
            d_embed: 64,
        }
    }
}

impl FafDims {
    pub fn query_width(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn key_width(&self) -> usize {
        4 * self.query_width()
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("patch", self.patch),
            ("channels", self.channels),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_h", self.d_h),
            ("d_embed", self.d_embed),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be ≥ 1")));
        }
        Ok(())
    }
}

/// Trainable tensors of the fusion module and its contrastive head.
#[derive(Clone, Debug, PartialEq)]
pub struct FafParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Output projection back to `2p×2p×C` image patches.
    pub w_o: Tensor,
    pub mlp1: Tensor,
    pub mlp1_bias: Tensor,
    pub mlp2: Tensor,
    pub mlp2_bias: Tensor,
    pub dims: FafDims,
}

pub(crate) fn init_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let bound = 1.0 / (shape[0] as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// Bias of a layer with `fan_in` inputs, same bound as its weights.
pub(crate) fn init_bias<R: Rng + ?Sized>(fan_in: usize, len: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[len], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl FafParams {
    pub fn new<R: Rng + ?Sized>(dims: FafDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let (q, k) = (dims.query_width(), dims.key_width());
        let c = dims.channels;
        Ok(Self {
            w_q: init_uniform(&[q, dims.d_k], rng),
            w_k: init_uniform(&[k, dims.d_k], rng),
            w_v: init_uniform(&[k, dims.d_v], rng),
            w_o: init_uniform(&[dims.d_v, k], rng),
            mlp1: init_uniform(&[c, dims.d_h], rng),
            mlp1_bias: init_bias(c, dims.d_h, rng),
            mlp2: init_uniform(&[dims.d_h, dims.d_embed], rng),
            mlp2_bias: init_bias(dims.d_h, dims.d_embed, rng),
            dims,
        })
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("faf.w_q", &self.w_q),
            ("faf.w_k", &self.w_k),
            ("faf.w_v", &self.w_v),
            ("faf.w_o", &self.w_o),
            ("faf.mlp1", &self.mlp1),
            ("faf.mlp1_bias", &self.mlp1_bias),
            ("faf.mlp2", &self.mlp2),
            ("faf.mlp2_bias", &self.mlp2_bias),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("faf.w_q", &mut self.w_q),
            ("faf.w_k", &mut self.w_k),
            ("faf.w_v", &mut self.w_v),
            ("faf.w_o", &mut self.w_o),
            ("faf.mlp1", &mut self.mlp1),
            ("faf.mlp1_bias", &mut self.mlp1_bias),
            ("faf.mlp2", &mut self.mlp2),
            ("faf.mlp2_bias", &mut self.mlp2_bias),
        ]
    }

    /// Places every tensor on the tape, as gradient leaves if `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> FafNodes {
        let mut put = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        FafNodes {
            w_q: put(&self.w_q),
            w_k: put(&self.w_k),
            w_v: put(&self.w_v),
            w_o: put(&self.w_o),
            mlp1: put(&self.mlp1),
            mlp1_bias: put(&self.mlp1_bias),
            mlp2: put(&self.mlp2),
            mlp2_bias: put(&self.mlp2_bias),
            dims: self.dims,
        }
    }
}

/// Tape handles for [`FafParams`].
#[derive(Clone, Copy, Debug)]
pub struct FafNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub mlp1: NodeId,
    pub mlp1_bias: NodeId,
    pub mlp2: NodeId,
    pub mlp2_bias: NodeId,
    pub dims: FafDims,
}

impl FafNodes {
    pub fn ids(&self) -> [NodeId; 8] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.mlp1,
            self.mlp1_bias,
            self.mlp2,
            self.mlp2_bias,
        ]
    }
}

/// Handles of a fusion result on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FusedNodes {
    pub x_f: NodeId,
    pub attention: NodeId,
}

#[derive(Clone, Debug)]
pub struct FusedFeature {
    pub x_f: Tensor,
    pub attention: Tensor,
}

/// HH-guided cross-attention with residual projection, recorded on `g`.
pub fn cross_attend_node(g: &mut Graph, x_hh: NodeId, x_img: NodeId, p: &FafNodes) -> Result<FusedNodes> {
    let patch = p.dims.patch;
    let img_shape = g.value(x_img).dims3()?;
    let q_tokens = tokenize_node(g, x_hh, patch)?;
    let k_tokens = tokenize_node(g, x_img, 2 * patch)?;
    let (tq, tk) = (g.value(q_tokens).shape()[0], g.value(k_tokens).shape()[0]);
    if tq != tk {
        return Err(Error::dim(format!(
            "cross_attend: {tq} query tokens vs {tk} key tokens"
        )));
    }
    let d_k = g.value(p.w_q).shape()[1];
    if d_k == 0 {
        return Err(Error::Parameter("d_k must be ≥ 1".into()));
    }
    let q = g.matmul(q_tokens, p.w_q)?;
    let k = g.matmul(k_tokens, p.w_k)?;
    let v = g.matmul(k_tokens, p.w_v)?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let attention = g.softmax_rows(scores)?;
    let attended = g.matmul(attention, v)?;
    let projected = g.matmul(attended, p.w_o)?;
    let back = detokenize_node(g, projected, img_shape, 2 * patch)?;
    let x_f = g.add(back, x_img)?;
    Ok(FusedNodes { x_f, attention })
}

pub fn cross_attend(x_hh: &Tensor, x_img: &Tensor, params: &FafParams) -> Result<FusedFeature> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let hh = g.constant(x_hh.clone());
    let img = g.constant(x_img.clone());
    let fused = cross_attend_node(&mut g, hh, img, &p)?;
    Ok(FusedFeature {
        x_f: g.value(fused.x_f).clone(),
        attention: g.value(fused.attention).clone(),
    })
}

/// `normalize(mlp2(relu(mlp1(avgpool(x_f)))))` on the tape.
pub fn contrastive_embed_node(g: &mut Graph, x_f: NodeId, p: &FafNodes) -> Result<NodeId> {
    let pooled = avg_pool_spatial_node(g, x_f)?;
    let c = g.value(pooled).len();
    let row = g.reshape(pooled, &[1, c])?;
    let hidden = g.matmul(row, p.mlp1)?;
    let hidden = g.add_row(hidden, p.mlp1_bias)?;
    let hidden = g.relu(hidden);
    let out = g.matmul(hidden, p.mlp2)?;
    let out = g.add_row(out, p.mlp2_bias)?;
    let d = g.value(out).len();
    let out = g.reshape(out, &[d])?;
    l2_normalize_node(g, out)
}

pub fn contrastive_embed(x_f: &Tensor, params: &FafParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(x_f.clone());
    let z = contrastive_embed_node(&mut g, x, &p)?;
    Ok(g.value(z).clone())
}
