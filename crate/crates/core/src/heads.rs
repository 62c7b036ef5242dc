//! Detection, segmentation and explanation heads on top of the fused image.
//!
//! A small trainable trunk embeds `cell×cell` patches of `x_f`, mixes them
//! with a global context term, and pools two embeddings: one for the
//! verdict classifier and explanation slots, one that is projected into a
//! modulation vector for the decoder. The decoder combines that vector with
//! features from a fixed random encoder of the raw image and with the trunk
//! grid, then upsamples each grid cell to its `cell×cell` pixels.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::faf::{detokenize_node, init_bias, init_uniform, tokenize, tokenize_node};
use crate::numerics::{Graph, NodeId, Tensor};

/// Number of classes in the verdict, region and cue slots.
pub const SLOT_SIZES: [usize; 3] = [2, 6, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Authentic,
    Tampered,
}

impl Verdict {
    /// Argmax of `[authentic, tampered]` logits; equal logits read as authentic.
    pub fn from_logits(logits: &[f64]) -> Verdict {
        if logits[1] > logits[0] {
            Verdict::Tampered
        } else {
            Verdict::Authentic
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Authentic => "authentic",
            Verdict::Tampered => "tampered",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "authentic" => Ok(Verdict::Authentic),
            "tampered" => Ok(Verdict::Tampered),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    NorthWest,
    NorthEast,
    SouthWest,
    SouthEast,
    Center,
    None,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::NorthWest,
        Region::NorthEast,
        Region::SouthWest,
        Region::SouthEast,
        Region::Center,
        Region::None,
    ];

    fn phrase(self) -> &'static str {
        match self {
            Region::NorthWest => "upper left",
            Region::NorthEast => "upper right",
            Region::SouthWest => "lower left",
            Region::SouthEast => "lower right",
            Region::Center => "central",
            Region::None => "",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cue {
    HhEnergyAnomaly,
    BoundaryDiscontinuity,
    TextureMismatch,
    None,
}

impl Cue {
    pub const ALL: [Cue; 4] = [
        Cue::HhEnergyAnomaly,
        Cue::BoundaryDiscontinuity,
        Cue::TextureMismatch,
        Cue::None,
    ];

    fn phrase(self) -> &'static str {
        match self {
            Cue::HhEnergyAnomaly => "an energy anomaly",
            Cue::BoundaryDiscontinuity => "a boundary discontinuity",
            Cue::TextureMismatch => "a texture mismatch",
            Cue::None => "no distinct cue",
        }
    }
}

const AUTHENTIC_TEXT: &str = "No tampering detected; sub-band energy is consistent.";

/// Slot-template explanation: a spatial clause and a frequency clause.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Explanation {
    verdict: Verdict,
    region: Region,
    cue: Cue,
}

impl Explanation {
    pub fn authentic() -> Self {
        Self {
            verdict: Verdict::Authentic,
            region: Region::None,
            cue: Cue::None,
        }
    }

    pub fn new(verdict: Verdict, region: Region, cue: Cue) -> Result<Self> {
        if verdict == Verdict::Authentic && (region != Region::None || cue != Cue::None) {
            return Err(Error::Data(format!(
                "authentic explanation cannot carry region {region:?} / cue {cue:?}"
            )));
        }
        Ok(Self { verdict, region, cue })
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn cue(&self) -> Cue {
        self.cue
    }

    /// Class index of each slot, in [`SLOT_SIZES`] order.
    pub fn slot_indices(&self) -> [usize; 3] {
        let r = Region::ALL.iter().position(|&r| r == self.region).unwrap_or(5);
        let c = Cue::ALL.iter().position(|&c| c == self.cue).unwrap_or(3);
        [self.verdict.index(), r, c]
    }

    pub fn render(&self) -> String {
        if self.verdict == Verdict::Authentic {
            return AUTHENTIC_TEXT.to_string();
        }
        let spatial = match self.region {
            Region::None => "Tampering detected with no localized region.".to_string(),
            r => format!("Tampering detected in the {} region.", r.phrase()),
        };
        format!("{spatial} The HH sub-band shows {}.", self.cue.phrase())
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text == AUTHENTIC_TEXT {
            return Ok(Self::authentic());
        }
        let unknown = || Error::Data(format!("unrecognised explanation {text:?}"));
        for region in Region::ALL {
            for cue in Cue::ALL {
                let e = Explanation {
                    verdict: Verdict::Tampered,
                    region,
                    cue,
                };
                if e.render() == text {
                    return Ok(e);
                }
            }
        }
        Err(unknown())
    }
}

impl fmt::Display for Explanation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Quadrant (or the central box) holding most of the true pixels of an
/// `h×w` mask. The central box `[h/4, 3h/4)×[w/4, 3w/4)` wins only when it
/// holds strictly more than every quadrant; quadrant ties go to the first
/// of NW, NE, SW, SE.
pub fn dominant_region(mask: &[bool], h: usize, w: usize) -> Region {
    let mut quad = [0usize; 4];
    let mut center = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let q = (y >= h / 2) as usize * 2 + (x >= w / 2) as usize;
            quad[q] += 1;
            if y >= h / 4 && y < 3 * h / 4 && x >= w / 4 && x < 3 * w / 4 {
                center += 1;
            }
        }
    }
    let (best, &count) = quad
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|(_, &c)| c)
        .expect("four quadrants");
    if count == 0 {
        return Region::None;
    }
    // `max_by_key` returns the last maximum, hence the reversed scan.
    if center > count {
        return Region::Center;
    }
    [Region::NorthWest, Region::NorthEast, Region::SouthWest, Region::SouthEast][best]
}

/// Mask decision: a pixel is tampered iff `sigmoid(logit) > 0.5`.
pub fn predicted_mask(logits: &Tensor) -> Vec<bool> {
    logits.data().iter().map(|&v| v > 0.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneDims {
    /// Side of the pixel cell that becomes one grid position.
    pub cell: usize,
    pub channels: usize,
    pub c_b: usize,
    pub d_b: usize,
    pub c_s: usize,
    pub c_u: usize,
}

impl Default for BackboneDims {
    fn default() -> Self {
        Self {
            cell: 8,
            channels: 3,
            c_b: 32,
            d_b: 32,
            c_s: 16,
            c_u: 32,
        }
    }
}

impl BackboneDims {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("cell", self.cell),
            ("channels", self.channels),
            ("c_b", self.c_b),
            ("d_b", self.d_b),
            ("c_s", self.c_s),
            ("c_u", self.c_u),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be ≥ 1")));
        }
        Ok(())
    }

    fn patch_width(&self) -> usize {
        self.cell * self.cell * self.channels
    }
}

macro_rules! param_block {
    ($(#[$meta:meta])* $name:ident, $nodes:ident, $prefix:literal, [$($field:ident),+ $(,)?]) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $(pub $field: Tensor,)+
            pub dims: BackboneDims,
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $nodes {
            $(pub $field: NodeId,)+
        }

        impl $name {
            pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
                vec![$((concat!($prefix, stringify!($field)), &self.$field),)+]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
                vec![$((concat!($prefix, stringify!($field)), &mut self.$field),)+]
            }

            pub fn bind(&self, g: &mut Graph, trainable: bool) -> $nodes {
                let mut put = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                $nodes { $($field: put(&self.$field),)+ }
            }
        }

        impl $nodes {
            pub fn ids(&self) -> Vec<NodeId> {
                vec![$(self.$field,)+]
            }
        }
    };
}

param_block!(
    /// Trainable trunk, classifier, slot head, modulation MLP and decoder.
    BackboneParams,
    BackboneNodes,
    "head.",
    [
        trunk1, trunk1_bias, trunk2, trunk2_bias, trunk_mix, cls_w, cls_b, seg_w, seg_b, phi, phi_bias,
        slots_w, slots_b, gamma, gamma_bias, dec_f, dec_g, dec_bias, dec_up, dec_up_bias,
    ]
);

param_block!(
    /// Fixed random patch encoder of the raw image. Never trained.
    FrozenEncoder,
    FrozenNodes,
    "frozen.",
    [enc1, enc1_bias, enc2, enc2_bias]
);

impl BackboneParams {
    pub fn new<R: rand::Rng + ?Sized>(dims: BackboneDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let pw = dims.patch_width();
        let slots: usize = SLOT_SIZES.iter().sum();
        let cc = dims.cell * dims.cell;
        Ok(Self {
            trunk1: init_uniform(&[pw, dims.c_b], rng),
            trunk1_bias: init_bias(pw, dims.c_b, rng),
            trunk2: init_uniform(&[dims.c_b, dims.c_b], rng),
            trunk2_bias: init_bias(dims.c_b, dims.c_b, rng),
            trunk_mix: init_uniform(&[dims.c_b, dims.c_b], rng),
            cls_w: init_uniform(&[dims.c_b, dims.d_b], rng),
            cls_b: init_bias(dims.c_b, dims.d_b, rng),
            seg_w: init_uniform(&[dims.c_b, dims.d_b], rng),
            seg_b: init_bias(dims.c_b, dims.d_b, rng),
            phi: init_uniform(&[dims.d_b, 2], rng),
            phi_bias: init_bias(dims.d_b, 2, rng),
            slots_w: init_uniform(&[dims.d_b, slots], rng),
            slots_b: init_bias(dims.d_b, slots, rng),
            gamma: init_uniform(&[dims.d_b, dims.c_s], rng),
            gamma_bias: init_bias(dims.d_b, dims.c_s, rng),
            dec_f: init_uniform(&[dims.c_s, dims.c_u], rng),
            dec_g: init_uniform(&[dims.c_b, dims.c_u], rng),
            dec_bias: init_bias(dims.c_s + dims.c_b, dims.c_u, rng),
            dec_up: init_uniform(&[dims.c_u, cc], rng),
            dec_up_bias: init_bias(dims.c_u, cc, rng),
            dims,
        })
    }
}

impl FrozenEncoder {
    /// Weights are a pure function of `seed`.
    pub fn from_seed(dims: BackboneDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5e_c0de);
        let pw = dims.patch_width();
        Ok(Self {
            enc1: init_uniform(&[pw, dims.c_s], &mut rng),
            enc1_bias: init_bias(pw, dims.c_s, &mut rng),
            enc2: init_uniform(&[dims.c_s, dims.c_s], &mut rng),
            enc2_bias: init_bias(dims.c_s, dims.c_s, &mut rng),
            dims,
        })
    }

    /// `G²×c_s` features of an image, computed off the tape.
    pub fn features(&self, x_img: &Tensor) -> Result<Tensor> {
        let tokens = tokenize(x_img, self.dims.cell)?;
        let mut g = Graph::new();
        let n = self.bind(&mut g, false);
        let t = g.constant(tokens);
        let h = g.matmul(t, n.enc1)?;
        let h = g.add_row(h, n.enc1_bias)?;
        let h = g.relu(h);
        let h = g.matmul(h, n.enc2)?;
        let h = g.add_row(h, n.enc2_bias)?;
        let h = g.relu(h);
        Ok(g.value(h).clone())
    }
}

/// Tape handles of one sample's head outputs.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    /// `[authentic, tampered]`.
    pub det_logits: NodeId,
    /// H×W.
    pub mask_logits: NodeId,
    /// Concatenated verdict/region/cue logits.
    pub slot_logits: NodeId,
}

fn vec_matmul(g: &mut Graph, v: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
    let n = g.value(v).len();
    let row = g.reshape(v, &[1, n])?;
    let out = g.matmul(row, w)?;
    let out = g.add_row(out, bias)?;
    let m = g.value(out).len();
    g.reshape(out, &[m])
}

/// Runs trunk and heads for one fused image. `enc_features` are the frozen
/// encoder's features of the raw image; they enter the tape as a constant.
pub fn heads_node(g: &mut Graph, x_f: NodeId, enc_features: &Tensor, p: &BackboneNodes, dims: &BackboneDims) -> Result<HeadNodes> {
    let (h, w, _) = g.value(x_f).dims3()?;
    let tokens = tokenize_node(g, x_f, dims.cell)?;
    let grid_cells = g.value(tokens).shape()[0];
    if enc_features.shape() != [grid_cells, dims.c_s] {
        return Err(Error::dim(format!(
            "encoder features {:?} do not match a {grid_cells}-cell grid with {} channels",
            enc_features.shape(),
            dims.c_s
        )));
    }

    let f1 = g.matmul(tokens, p.trunk1)?;
    let f1 = g.add_row(f1, p.trunk1_bias)?;
    let f1 = g.relu(f1);
    let context = g.mean_rows(f1)?;
    let context = vec_matmul(g, context, p.trunk_mix, p.trunk2_bias)?;
    let f2 = g.matmul(f1, p.trunk2)?;
    let f2 = g.add_row(f2, context)?;
    let grid = g.relu(f2);

    let pooled = g.mean_rows(grid)?;
    let h_cls = vec_matmul(g, pooled, p.cls_w, p.cls_b)?;
    let h_cls = g.relu(h_cls);
    let h_seg = vec_matmul(g, pooled, p.seg_w, p.seg_b)?;
    let h_seg = g.relu(h_seg);

    let det_logits = vec_matmul(g, h_cls, p.phi, p.phi_bias)?;
    let slot_logits = vec_matmul(g, h_cls, p.slots_w, p.slots_b)?;

    let modulation = vec_matmul(g, h_seg, p.gamma, p.gamma_bias)?;
    let f = g.constant(enc_features.clone());
    let modulated = g.mul_row(f, modulation)?;
    let u = g.matmul(modulated, p.dec_f)?;
    let ug = g.matmul(grid, p.dec_g)?;
    let u = g.add(u, ug)?;
    let u = g.add_row(u, p.dec_bias)?;
    let u = g.relu(u);
    let cells = g.matmul(u, p.dec_up)?;
    let cells = g.add_row(cells, p.dec_up_bias)?;
    let mask = detokenize_node(g, cells, (h, w, 1), dims.cell)?;
    let mask_logits = g.reshape(mask, &[h, w])?;

    Ok(HeadNodes {
        det_logits,
        mask_logits,
        slot_logits,
    })
}

/// Verdict from detection logits.
pub fn detect(det_logits: &Tensor) -> (Tensor, Verdict) {
    (det_logits.clone(), Verdict::from_logits(det_logits.data()))
}

/// Explanation from the verdict, the predicted mask and the slot logits.
/// The cue is the best of the three non-`none` cue logits.
pub fn explain(verdict: Verdict, mask: &[bool], (h, w): (usize, usize), slot_logits: &Tensor) -> Explanation {
    if verdict == Verdict::Authentic {
        return Explanation::authentic();
    }
    let region = dominant_region(mask, h, w);
    let cue_offset = SLOT_SIZES[0] + SLOT_SIZES[1];
    let cue_logits = &slot_logits.data()[cue_offset..cue_offset + 3];
    let mut best = 0;
    for (i, &v) in cue_logits.iter().enumerate() {
        if v > cue_logits[best] {
            best = i;
        }
    }
    Explanation {
        verdict,
        region,
        cue: Cue::ALL[best],
    }
}
