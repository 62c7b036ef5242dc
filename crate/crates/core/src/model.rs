//! The assembled pipeline: sub-band extraction, fusion, heads.

use sha2::{Digest, Sha256};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::faf::{contrastive_embed_node, cross_attend_node, FafDims, FafNodes, FafParams};
use crate::heads::{
    explain, heads_node, predicted_mask, BackboneDims, BackboneNodes, BackboneParams, Explanation, FrozenEncoder,
    HeadNodes, Verdict,
};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::wavelet::dwt2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Height and width of the (square) input images.
    pub image_size: usize,
    pub faf: FafDims,
    pub backbone: BackboneDims,
    /// Seeds parameter initialisation and the frozen encoder.
    pub seed: u64,
    /// `false` feeds the raw image to the heads, bypassing the fusion module.
    pub use_faf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            faf: FafDims::default(),
            backbone: BackboneDims::default(),
            seed: 0,
            use_faf: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.faf.validate()?;
        self.backbone.validate()?;
        let s = self.image_size;
        let fp = 2 * self.faf.patch;
        if s == 0 || s % 2 != 0 || s % fp != 0 || s % self.backbone.cell != 0 {
            return Err(Error::Parameter(format!(
                "image_size {s} must be even and divisible by {fp} (2·patch) and {} (cell)",
                self.backbone.cell
            )));
        }
        if self.faf.channels != self.backbone.channels {
            return Err(Error::Parameter("fusion and head channel counts differ".into()));
        }
        Ok(())
    }

    /// Stable `key=value` listing of every architectural field.
    pub fn canonical(&self) -> String {
        let f = &self.faf;
        let b = &self.backbone;
        format!(
            "image_size={}\npatch={}\nchannels={}\nd_k={}\nd_v={}\nd_h={}\nd_embed={}\ncell={}\nc_b={}\nd_b={}\nc_s={}\nc_u={}\nmodel_seed={}\nuse_faf={}\n",
            self.image_size, f.patch, f.channels, f.d_k, f.d_v, f.d_h, f.d_embed, b.cell, b.c_b, b.d_b, b.c_s, b.c_u,
            self.seed, self.use_faf
        )
    }

    pub fn hash(&self) -> u64 {
        hash64(self.canonical().as_bytes())
    }

    /// Inverse of [`canonical`](Self::canonical).
    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut c = ModelConfig::default();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad model config line {line:?}")))?;
            let num = || -> Result<usize> { v.parse().map_err(|_| Error::Data(format!("bad value for {k}: {v:?}"))) };
            match k {
                "image_size" => c.image_size = num()?,
                "patch" => c.faf.patch = num()?,
                "channels" => {
                    c.faf.channels = num()?;
                    c.backbone.channels = c.faf.channels;
                }
                "d_k" => c.faf.d_k = num()?,
                "d_v" => c.faf.d_v = num()?,
                "d_h" => c.faf.d_h = num()?,
                "d_embed" => c.faf.d_embed = num()?,
                "cell" => c.backbone.cell = num()?,
                "c_b" => c.backbone.c_b = num()?,
                "d_b" => c.backbone.d_b = num()?,
                "c_s" => c.backbone.c_s = num()?,
                "c_u" => c.backbone.c_u = num()?,
                "model_seed" => c.seed = v.parse().map_err(|_| Error::Data(format!("bad model_seed {v:?}")))?,
                "use_faf" => c.use_faf = v.parse().map_err(|_| Error::Data(format!("bad use_faf {v:?}")))?,
                other => return Err(Error::Data(format!("unknown model config key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// First eight bytes of SHA-256, little-endian.
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub faf: FafParams,
    pub backbone: BackboneParams,
    pub frozen: FrozenEncoder,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelNodes {
    pub faf: FafNodes,
    pub head: BackboneNodes,
}

impl ModelNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = self.faf.ids().to_vec();
        ids.extend(self.head.ids());
        ids
    }
}

/// Tape handles for one sample's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SampleNodes {
    pub x_f: NodeId,
    pub attention: Option<NodeId>,
    pub embedding: NodeId,
    pub heads: HeadNodes,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub det_logits: Tensor,
    pub verdict: Verdict,
    pub mask_logits: Tensor,
    pub mask: Vec<bool>,
    pub explanation: Explanation,
    pub attention: Option<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let faf = FafParams::new(config.faf, &mut rng)?;
        let backbone = BackboneParams::new(config.backbone, &mut rng)?;
        let frozen = FrozenEncoder::from_seed(config.backbone, config.seed)?;
        Ok(Self {
            config,
            faf,
            backbone,
            frozen,
        })
    }

    /// Every trainable tensor, in a fixed order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<_> = self.faf.named().into_iter().collect();
        out.extend(self.backbone.named());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<_> = self.faf.named_mut().into_iter().collect();
        out.extend(self.backbone.named_mut());
        out
    }

    /// Overwrites every trainable tensor, in [`named_params`](Self::named_params) order.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.named_params_mut();
        if slots.len() != values.len() {
            return Err(Error::Data(format!("{} tensors for {} parameters", values.len(), slots.len())));
        }
        for ((name, slot), v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::dim(format!("{name}: expected {:?}, got {:?}", slot.shape(), v.shape())));
            }
            **slot = v.clone();
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelNodes {
        ModelNodes {
            faf: self.faf.bind(g, trainable),
            head: self.backbone.bind(g, trainable),
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        let expected = [s, s, self.config.faf.channels];
        if image.shape() != expected {
            return Err(Error::dim(format!(
                "model expects {expected:?} images, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Fused feature `x_f` and the attention map; with fusion disabled
    /// `x_f` is the image itself.
    pub fn fuse_node(&self, g: &mut Graph, nodes: &ModelNodes, image: &Tensor) -> Result<(NodeId, Option<NodeId>)> {
        self.check_image(image)?;
        let img = g.constant(image.clone());
        if !self.config.use_faf {
            return Ok((img, None));
        }
        let hh = g.constant(dwt2(image)?.hh);
        let fused = cross_attend_node(g, hh, img, &nodes.faf)?;
        Ok((fused.x_f, Some(fused.attention)))
    }

    /// Contrastive embedding of one image.
    pub fn embed_node(&self, g: &mut Graph, nodes: &ModelNodes, image: &Tensor) -> Result<NodeId> {
        let (x_f, _) = self.fuse_node(g, nodes, image)?;
        contrastive_embed_node(g, x_f, &nodes.faf)
    }

    /// Records the full forward pass of one image on `g`.
    pub fn forward_node(&self, g: &mut Graph, nodes: &ModelNodes, image: &Tensor) -> Result<SampleNodes> {
        let (x_f, attention) = self.fuse_node(g, nodes, image)?;
        let embedding = contrastive_embed_node(g, x_f, &nodes.faf)?;
        let enc = self.frozen.features(image)?;
        let heads = heads_node(g, x_f, &enc, &nodes.head, &self.config.backbone)?;
        Ok(SampleNodes {
            x_f,
            attention,
            embedding,
            heads,
        })
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g, false);
        let out = self.forward_node(&mut g, &nodes, image)?;
        let det_logits = g.value(out.heads.det_logits).clone();
        let verdict = Verdict::from_logits(det_logits.data());
        let mask_logits = g.value(out.heads.mask_logits).clone();
        let mask = predicted_mask(&mask_logits);
        let s = self.config.image_size;
        let explanation = explain(verdict, &mask, (s, s), g.value(out.heads.slot_logits));
        Ok(Prediction {
            det_logits,
            verdict,
            mask_logits,
            mask,
            explanation,
            attention: out.attention.map(|a| g.value(a).clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            faf: FafDims {
                patch: 2,
                channels: 3,
                d_k: 4,
                d_v: 4,
                d_h: 6,
                d_embed: 4,
            },
            backbone: BackboneDims {
                cell: 4,
                channels: 3,
                c_b: 5,
                d_b: 5,
                c_s: 3,
                c_u: 4,
            },
            seed: 9,
            use_faf: true,
        }
    }

    #[test]
    fn canonical_round_trip() {
        let c = tiny_config();
        assert_eq!(ModelConfig::from_canonical(&c.canonical()).unwrap(), c);
        assert!(ModelConfig::from_canonical("bogus=1").is_err());
    }

    #[test]
    fn config_rejects_misaligned_size() {
        let c = ModelConfig {
            image_size: 10,
            ..tiny_config()
        };
        assert!(matches!(Model::new(c), Err(Error::Parameter(_))));
    }

    #[test]
    fn prediction_shapes() {
        let m = Model::new(tiny_config()).unwrap();
        let img = Tensor::from_fn(&[8, 8, 3], |i| (i % 7) as f64 / 7.0);
        let p = m.predict(&img).unwrap();
        assert_eq!(p.mask_logits.shape(), &[8, 8]);
        assert_eq!(p.mask.len(), 64);
        assert!(p.det_logits.is_finite());
        assert!(m.predict(&Tensor::zeros(&[16, 16, 3])).is_err());
    }
}
