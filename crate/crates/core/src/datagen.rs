//! Procedural forgery dataset: textured authentic images, copy-move and
//! splicing manipulations with pixel-exact masks and slot explanations.
//!
//! Authentic images carry a faint periodic sensor trace `a_c·(-1)^(x+y)` per
//! channel, the kind of colour-filter-array residue real cameras leave. Both
//! manipulations move content by an odd total offset, so the trace inside
//! the forged region is out of phase with the rest of the image.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{dominant_region, Cue, Explanation, Verdict};
use crate::model::hash64;
use crate::numerics::Tensor;
use crate::pnm;
use crate::wavelet::{dwt2, hh_energy_map};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tsv";
/// Declared bounds on the tampered fraction of a mask.
pub const MASK_AREA_BOUNDS: (f64, f64) = (0.02, 0.40);
pub const PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Manipulation {
    None,
    CopyMove,
    Splicing,
}

impl Manipulation {
    pub fn as_str(self) -> &'static str {
        match self {
            Manipulation::None => "none",
            Manipulation::CopyMove => "copy-move",
            Manipulation::Splicing => "splicing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Manipulation::None),
            "copy-move" => Ok(Manipulation::CopyMove),
            "splicing" => Ok(Manipulation::Splicing),
            _ => Err(Error::Data(format!("unknown manipulation {s:?}"))),
        }
    }
}

impl fmt::Display for Manipulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// H×W×3, values on the 8-bit grid `k/255`.
    pub image: Tensor,
    pub label: Verdict,
    pub mask: Vec<bool>,
    pub manipulation: Manipulation,
    pub explanation: Explanation,
    pub seed: u64,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Label, mask, manipulation and explanation agree.
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image.dims3()?;
        if c != 3 || self.mask.len() != h * w {
            return Err(Error::Data(format!(
                "{}: image {:?} with a {}-pixel mask",
                self.id,
                self.image.shape(),
                self.mask.len()
            )));
        }
        let area = self.mask_area();
        let authentic = self.label == Verdict::Authentic;
        if authentic != (area == 0) || authentic != (self.manipulation == Manipulation::None) {
            return Err(Error::Data(format!(
                "{}: label {} inconsistent with {area} mask pixels and manipulation {}",
                self.id, self.label, self.manipulation
            )));
        }
        if self.explanation.verdict() != self.label {
            return Err(Error::Data(format!("{}: explanation verdict differs from label", self.id)));
        }
        if !authentic {
            let frac = area as f64 / (h * w) as f64;
            if frac < MASK_AREA_BOUNDS.0 || frac > MASK_AREA_BOUNDS.1 {
                return Err(Error::Data(format!("{}: mask covers {frac:.4} of the image", self.id)));
            }
        }
        Ok(())
    }
}

/// Knobs of the procedural generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Region side lengths, as fractions of the image height.
    pub region_min_frac: f64,
    pub region_max_frac: f64,
    /// Per-channel sensor trace amplitude range.
    pub trace_min: f64,
    pub trace_max: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            region_min_frac: 3.0 / 16.0,
            region_max_frac: 0.5,
            trace_min: 0.003,
            trace_max: 0.006,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.region_min_frac, self.region_max_frac);
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Parameter(format!("region fractions need 0 < {lo} ≤ {hi} ≤ 1")));
        }
        if !(self.trace_min >= 0.0 && self.trace_min <= self.trace_max && self.trace_max <= 0.1) {
            return Err(Error::Parameter(format!(
                "trace amplitudes need 0 ≤ {} ≤ {} ≤ 0.1",
                self.trace_min, self.trace_max
            )));
        }
        Ok(())
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Parameter(format!("image size {h}×{w} must be even and ≥ 32")));
    }
    Ok(())
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn smoothstep(edge: f64, d: f64) -> f64 {
    // 1 inside (d < -edge), 0 outside (d > edge).
    let t = ((edge - d) / (2.0 * edge)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Authentic textured image: colour gradient, low-frequency waves, a few
/// soft-edged shapes, the sensor trace, then 8-bit quantisation.
pub fn render_texture(seed: u64, h: usize, w: usize, cfg: &GeneratorConfig) -> Result<Tensor> {
    check_size(h, w)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)));

    struct Wave {
        ky: f64,
        kx: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let period = rng.gen_range(12.0..40.0);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / period;
            Wave {
                ky: k * theta.sin(),
                kx: k * theta.cos(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: std::array::from_fn(|_| rng.gen_range(0.02..0.07)),
            }
        })
        .collect();

    struct Shape {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        disc: bool,
        color: [f64; 3],
        opacity: f64,
    }
    let n_shapes = rng.gen_range(2..=4);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|i| {
            let color = if i == 0 {
                // One shape contrasts strongly with the base colour.
                std::array::from_fn(|c| if base[c] < 0.5 { rng.gen_range(0.85..0.95) } else { rng.gen_range(0.05..0.15) })
            } else {
                std::array::from_fn(|_| rng.gen_range(0.05..0.95))
            };
            Shape {
                cy: rng.gen_range(0.1..0.9) * hf,
                cx: rng.gen_range(0.1..0.9) * wf,
                ry: rng.gen_range(0.08..0.25) * hf,
                rx: rng.gen_range(0.08..0.25) * wf,
                disc: rng.gen_bool(0.5),
                color,
                opacity: if i == 0 { 1.0 } else { rng.gen_range(0.5..1.0) },
            }
        })
        .collect();

    let trace: [f64; 3] = std::array::from_fn(|_| {
        if cfg.trace_max > cfg.trace_min {
            rng.gen_range(cfg.trace_min..cfg.trace_max)
        } else {
            cfg.trace_min
        }
    });

    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v: [f64; 3] = std::array::from_fn(|c| base[c] + grad[c].0 * (py / hf - 0.5) + grad[c].1 * (px / wf - 0.5));
            for wave in &waves {
                let s = (wave.ky * py + wave.kx * px + wave.phase).sin();
                for c in 0..3 {
                    v[c] += wave.amp[c] * s;
                }
            }
            for s in &shapes {
                let (dy, dx) = ((py - s.cy) / s.ry, (px - s.cx) / s.rx);
                // Signed distance in pixels, approximately.
                let d = if s.disc {
                    ((dy * dy + dx * dx).sqrt() - 1.0) * s.ry.min(s.rx)
                } else {
                    (dy.abs() - 1.0).max(dx.abs() - 1.0) * s.ry.min(s.rx)
                };
                let a = s.opacity * smoothstep(1.5, d);
                for c in 0..3 {
                    v[c] = (1.0 - a) * v[c] + a * s.color[c];
                }
            }
            let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            for c in 0..3 {
                let base = v[c].clamp(0.05, 0.95);
                data[(y * w + x) * 3 + c] = quantize(base + sign * trace[c]);
            }
        }
    }
    Tensor::new(&[h, w, 3], data)
}

/// A rasterised region: a rotated rectangle or ellipse inside its bounding box.
#[derive(Clone, Debug, PartialEq)]
struct RegionShape {
    h: usize,
    w: usize,
    inside: Vec<bool>,
}

impl RegionShape {
    fn random(rng: &mut ChaCha8Rng, img_h: usize, cfg: &GeneratorConfig) -> Self {
        let lo = (cfg.region_min_frac * img_h as f64).max(1.0);
        let hi = (cfg.region_max_frac * img_h as f64).max(lo);
        let side = |rng: &mut ChaCha8Rng| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let (a, b) = (side(rng) / 2.0, side(rng) / 2.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let ellipse = rng.gen_bool(0.5);
        let (s, c) = theta.sin_cos();
        let half_h = if ellipse {
            (a * a * s * s + b * b * c * c).sqrt()
        } else {
            a * s.abs() + b * c.abs()
        };
        let half_w = if ellipse {
            (a * a * c * c + b * b * s * s).sqrt()
        } else {
            a * c.abs() + b * s.abs()
        };
        let h = (2.0 * half_h).ceil() as usize;
        let w = (2.0 * half_w).ceil() as usize;
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let mut inside = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                inside[y * w + x] = if ellipse {
                    (u / a).powi(2) + (v / b).powi(2) <= 1.0
                } else {
                    u.abs() <= a && v.abs() <= b
                };
            }
        }
        Self { h, w, inside }
    }

    fn area(&self) -> usize {
        self.inside.iter().filter(|&&v| v).count()
    }
}

fn area_ok(area: usize, h: usize, w: usize) -> bool {
    let frac = area as f64 / (h * w) as f64;
    (MASK_AREA_BOUNDS.0..=MASK_AREA_BOUNDS.1).contains(&frac)
}

fn require_authentic(s: &Sample, role: &str) -> Result<()> {
    if s.manipulation != Manipulation::None {
        return Err(Error::Data(format!("{role} {} is not authentic", s.id)));
    }
    Ok(())
}

fn tampered_explanation(mask: &[bool], h: usize, w: usize, cue: Cue) -> Result<Explanation> {
    Explanation::new(Verdict::Tampered, dominant_region(mask, h, w), cue)
}

/// Procedural generator bound to one configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn authentic(&self, seed: u64, h: usize, w: usize) -> Result<Sample> {
        let image = render_texture(seed, h, w, &self.config)?;
        Ok(Sample {
            id: format!("auth-{seed:016x}"),
            image,
            label: Verdict::Authentic,
            mask: vec![false; h * w],
            manipulation: Manipulation::None,
            explanation: Explanation::authentic(),
            seed,
        })
    }

    /// Copies a region of `src` to a non-overlapping destination.
    pub fn copy_move(&self, src: &Sample, seed: u64) -> Result<Sample> {
        require_authentic(src, "copy-move source")?;
        let (h, w) = (src.height(), src.width());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..PLACEMENT_TRIES {
            let r = RegionShape::random(&mut rng, h, &self.config);
            if r.h >= h || r.w >= w {
                continue;
            }
            let sy = rng.gen_range(0..=h - r.h);
            let sx = rng.gen_range(0..=w - r.w);
            let dy = rng.gen_range(0..=h - r.h);
            let dx = rng.gen_range(0..=w - r.w);
            let disjoint = sy + r.h <= dy || dy + r.h <= sy || sx + r.w <= dx || dx + r.w <= sx;
            if !disjoint || (sy + sx + dy + dx) % 2 == 0 || !area_ok(r.area(), h, w) {
                continue;
            }
            let mut image = src.image.clone();
            let mut mask = vec![false; h * w];
            let px = src.image.data();
            let out = image.data_mut();
            for y in 0..r.h {
                for x in 0..r.w {
                    if !r.inside[y * r.w + x] {
                        continue;
                    }
                    let to = (dy + y) * w + dx + x;
                    let from = (sy + y) * w + sx + x;
                    out[to * 3..to * 3 + 3].copy_from_slice(&px[from * 3..from * 3 + 3]);
                    mask[to] = true;
                }
            }
            return Ok(Sample {
                id: format!("{}-cm", src.id),
                image,
                label: Verdict::Tampered,
                explanation: tampered_explanation(&mask, h, w, Cue::TextureMismatch)?,
                mask,
                manipulation: Manipulation::CopyMove,
                seed: src.seed,
            });
        }
        Err(Error::Placement(format!(
            "no non-overlapping copy-move placement in {h}×{w} after {PLACEMENT_TRIES} tries"
        )))
    }

    /// Pastes a region of `donor` into `src` through a Gaussian-feathered
    /// alpha of width `blend_sigma` (0 is a hard paste).
    pub fn splice(&self, src: &Sample, donor: &Sample, seed: u64, blend_sigma: f64) -> Result<Sample> {
        require_authentic(src, "splice target")?;
        require_authentic(donor, "splice donor")?;
        if src.image.shape() != donor.image.shape() {
            return Err(Error::dim(format!(
                "splice target {:?} and donor {:?} differ",
                src.image.shape(),
                donor.image.shape()
            )));
        }
        if !(blend_sigma >= 0.0) || !blend_sigma.is_finite() {
            return Err(Error::Parameter(format!("blend_sigma must be finite and ≥ 0, got {blend_sigma}")));
        }
        let (h, w) = (src.height(), src.width());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..PLACEMENT_TRIES {
            let r = RegionShape::random(&mut rng, h, &self.config);
            if r.h >= h || r.w >= w {
                continue;
            }
            let sy = rng.gen_range(0..=h - r.h);
            let sx = rng.gen_range(0..=w - r.w);
            let dy = rng.gen_range(0..=h - r.h);
            let dx = rng.gen_range(0..=w - r.w);
            if (sy + sx + dy + dx) % 2 == 0 {
                continue;
            }
            let mut region = vec![0.0; h * w];
            for y in 0..r.h {
                for x in 0..r.w {
                    if r.inside[y * r.w + x] {
                        region[(dy + y) * w + dx + x] = 1.0;
                    }
                }
            }
            let alpha = gaussian_blur(&region, h, w, blend_sigma);
            let mask: Vec<bool> = alpha.iter().map(|&a| a > 0.5).collect();
            if !area_ok(mask.iter().filter(|&&m| m).count(), h, w) {
                continue;
            }
            let (oy, ox) = (sy as isize - dy as isize, sx as isize - dx as isize);
            let mut image = src.image.clone();
            let out = image.data_mut();
            let dp = donor.image.data();
            for y in 0..h {
                for x in 0..w {
                    let a = alpha[y * w + x];
                    if a == 0.0 {
                        continue;
                    }
                    // Donor pixel that lands here; clamped at the donor border.
                    let fy = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                    let fx = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                    for c in 0..3 {
                        let i = (y * w + x) * 3 + c;
                        let d = dp[(fy * w + fx) * 3 + c];
                        out[i] = quantize((1.0 - a) * out[i] + a * d);
                    }
                }
            }
            return Ok(Sample {
                id: format!("{}-sp", src.id),
                image,
                label: Verdict::Tampered,
                explanation: tampered_explanation(&mask, h, w, Cue::BoundaryDiscontinuity)?,
                mask,
                manipulation: Manipulation::Splicing,
                seed: src.seed,
            });
        }
        Err(Error::Placement(format!(
            "no splice placement in {h}×{w} satisfying the mask-area bounds after {PLACEMENT_TRIES} tries"
        )))
    }

    /// Regenerates the sample of the given kind from its seed.
    pub fn generate(&self, kind: Manipulation, seed: u64, size: usize, blend_sigma: f64) -> Result<Sample> {
        let src = self.authentic(seed, size, size)?;
        match kind {
            Manipulation::None => Ok(src),
            Manipulation::CopyMove => self.copy_move(&src, derive_seed(seed, "copy-move")),
            Manipulation::Splicing => {
                let donor = self.authentic(derive_seed(seed, "donor"), size, size)?;
                self.splice(&src, &donor, derive_seed(seed, "splice"), blend_sigma)
            }
        }
    }
}

pub fn gen_authentic(seed: u64, h: usize, w: usize) -> Result<Sample> {
    Generator::default().authentic(seed, h, w)
}

pub fn apply_copy_move(src: &Sample, seed: u64) -> Result<Sample> {
    Generator::default().copy_move(src, seed)
}

pub fn apply_splice(src: &Sample, donor: &Sample, seed: u64, blend_sigma: f64) -> Result<Sample> {
    Generator::default().splice(src, donor, seed, blend_sigma)
}

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    hash64(&bytes)
}

/// Separable Gaussian blur with radius `ceil(3σ)` and zero padding.
/// `sigma = 0` returns the input.
pub fn gaussian_blur(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return values.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let o = t as isize - r;
                    let (yy, xx) = if horizontal { (y, x + o) } else { (y + o, x) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += kv * src[yy as usize * w + xx as usize];
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    };
    pass(&pass(values, true), false)
}

/// Pixels whose 4-neighbourhood crosses the mask edge (both sides).
pub fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let m = mask[y * w + x];
            let differs = (y > 0 && mask[(y - 1) * w + x] != m)
                || (y + 1 < h && mask[(y + 1) * w + x] != m)
                || (x > 0 && mask[y * w + x - 1] != m)
                || (x + 1 < w && mask[y * w + x + 1] != m);
            if differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// Mean of the 3×3 HH energy map at the sub-band positions of `pixels`.
pub fn mean_hh_energy_at(image: &Tensor, pixels: &[(usize, usize)]) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::Data("no pixels to average over".into()));
    }
    let energy = hh_energy_map(&dwt2(image)?, 3)?;
    let w2 = energy.shape()[1];
    let total: f64 = pixels.iter().map(|&(y, x)| energy.data()[(y / 2) * w2 + x / 2]).sum();
    Ok(total / pixels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Data(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatagenConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub authentic_fraction: f64,
    /// Share of tampered samples that are copy-move; rounded up.
    pub copy_move_share: f64,
    pub blend_sigma: f64,
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_train: 200,
            n_eval: 50,
            authentic_fraction: 0.5,
            copy_move_share: 0.5,
            blend_sigma: 1.0,
            seed: 0,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub authentic: usize,
    pub copy_move: usize,
    pub splicing: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.authentic + self.copy_move + self.splicing
    }

    fn add(&mut self, kind: Manipulation) {
        match kind {
            Manipulation::None => self.authentic += 1,
            Manipulation::CopyMove => self.copy_move += 1,
            Manipulation::Splicing => self.splicing += 1,
        }
    }
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} samples ({} authentic, {} copy-move, {} splicing)",
            self.total(),
            self.authentic,
            self.copy_move,
            self.splicing
        )
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        check_size(self.image_size, self.image_size)?;
        if self.image_size > 256 {
            return Err(Error::Parameter(format!("image_size {} exceeds 256", self.image_size)));
        }
        if self.n_train + self.n_eval == 0 {
            return Err(Error::Parameter("dataset would be empty".into()));
        }
        for (name, v) in [
            ("authentic_fraction", self.authentic_fraction),
            ("copy_move_share", self.copy_move_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.blend_sigma >= 0.0 && self.blend_sigma <= 8.0) {
            return Err(Error::Parameter(format!("blend_sigma must lie in [0, 8], got {}", self.blend_sigma)));
        }
        self.generator.validate()
    }

    pub fn canonical(&self) -> String {
        let g = &self.generator;
        format!(
            "image_size={}\nn_train={}\nn_eval={}\nauthentic_fraction={}\ncopy_move_share={}\nblend_sigma={}\ndata_seed={}\nregion_min_frac={}\nregion_max_frac={}\ntrace_min={}\ntrace_max={}\n",
            self.image_size,
            self.n_train,
            self.n_eval,
            self.authentic_fraction,
            self.copy_move_share,
            self.blend_sigma,
            self.seed,
            g.region_min_frac,
            g.region_max_frac,
            g.trace_min,
            g.trace_max
        )
    }

    pub fn hash(&self) -> u64 {
        hash64(self.canonical().as_bytes())
    }

    /// Class counts of one split of `n` samples.
    pub fn split_counts(&self, n: usize) -> ClassCounts {
        let authentic = (n as f64 * self.authentic_fraction).round() as usize;
        let tampered = n - authentic.min(n);
        let copy_move = ((tampered as f64 * self.copy_move_share).ceil() as usize).min(tampered);
        ClassCounts {
            authentic: authentic.min(n),
            copy_move,
            splicing: tampered - copy_move,
        }
    }

    fn sample_seed(&self, split: Split, index: usize) -> u64 {
        derive_seed(self.seed, &format!("{}:{index}", split.as_str()))
    }

    /// Every `(split, sample)` pair, in manifest order.
    pub fn samples(&self) -> Result<Vec<(Split, Sample)>> {
        self.validate()?;
        let gen = Generator::new(self.generator)?;
        let mut out = Vec::with_capacity(self.n_train + self.n_eval);
        let mut seen = HashSet::new();
        for (split, n) in [(Split::Train, self.n_train), (Split::Eval, self.n_eval)] {
            let counts = self.split_counts(n);
            let mut kinds: Vec<Manipulation> = std::iter::repeat(Manipulation::None)
                .take(counts.authentic)
                .chain(std::iter::repeat(Manipulation::CopyMove).take(counts.copy_move))
                .chain(std::iter::repeat(Manipulation::Splicing).take(counts.splicing))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, split.as_str()));
            rand::seq::SliceRandom::shuffle(kinds.as_mut_slice(), &mut rng);
            for (i, kind) in kinds.into_iter().enumerate() {
                let seed = self.sample_seed(split, i);
                if !seen.insert(seed) {
                    return Err(Error::Data(format!("seed collision at {} sample {i}", split.as_str())));
                }
                let mut s = gen.generate(kind, seed, self.image_size, self.blend_sigma)?;
                s.id = format!("{}-{i:04}", split.as_str());
                s.validate()?;
                out.push((split, s));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    /// Relative to the manifest directory.
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub label: Verdict,
    pub manipulation: Manipulation,
    pub seed: u64,
    pub explanation_text: String,
}

/// Line-oriented manifest. Layout:
///
/// ```text
/// version<TAB>1
/// config_hash<TAB><16 hex digits>
/// counts<TAB>authentic=<n><TAB>copy-move=<n><TAB>splicing=<n>
/// id<TAB>split<TAB>image<TAB>mask<TAB>label<TAB>manipulation<TAB>seed<TAB>explanation
/// <one record per line, same field order>
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub config_hash: u64,
    pub counts: ClassCounts,
    pub records: Vec<ManifestRecord>,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

const RECORD_HEADER: &str = "id\tsplit\timage\tmask\tlabel\tmanipulation\tseed\texplanation";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "version\t{}\nconfig_hash\t{:016x}\ncounts\tauthentic={}\tcopy-move={}\tsplicing={}\n{RECORD_HEADER}\n",
            self.version, self.config_hash, self.counts.authentic, self.counts.copy_move, self.counts.splicing
        );
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.split.as_str(),
                r.image_path.display(),
                r.mask_path.display(),
                r.label,
                r.manipulation,
                r.seed,
                r.explanation_text
            ));
        }
        s
    }

    pub fn hash(&self) -> u64 {
        hash64(self.to_text().as_bytes())
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Data(format!("manifest line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        let mut field = |name: &str| -> Result<(usize, Vec<String>)> {
            let (i, line) = lines.next().ok_or_else(|| Error::Data(format!("manifest ends before {name}")))?;
            let parts: Vec<String> = line.split('\t').map(str::to_string).collect();
            if parts[0] != name {
                return Err(bad(i, format!("expected {name:?}, got {:?}", parts[0])));
            }
            Ok((i, parts))
        };
        let (i, v) = field("version")?;
        let version: u32 = v
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(i, "bad version".into()))?;
        if version != MANIFEST_VERSION {
            return Err(Error::Version(format!(
                "manifest version {version}, this build reads {MANIFEST_VERSION}"
            )));
        }
        let (i, h) = field("config_hash")?;
        let config_hash = h
            .get(1)
            .and_then(|s| u64::from_str_radix(s, 16).ok())
            .ok_or_else(|| bad(i, "bad config hash".into()))?;
        let (i, c) = field("counts")?;
        let mut counts = ClassCounts::default();
        for part in &c[1..] {
            let (k, v) = part.split_once('=').ok_or_else(|| bad(i, format!("bad count {part:?}")))?;
            let v: usize = v.parse().map_err(|_| bad(i, format!("bad count {part:?}")))?;
            match k {
                "authentic" => counts.authentic = v,
                "copy-move" => counts.copy_move = v,
                "splicing" => counts.splicing = v,
                _ => return Err(bad(i, format!("unknown class {k:?}"))),
            }
        }
        let (i, header) = field("id")?;
        if header.join("\t") != RECORD_HEADER {
            return Err(bad(i, "unexpected record header".into()));
        }
        let mut records = Vec::new();
        let mut seen = ClassCounts::default();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(bad(i, format!("expected 8 fields, got {}", f.len())));
            }
            let r = ManifestRecord {
                id: f[0].to_string(),
                split: Split::parse(f[1])?,
                image_path: PathBuf::from(f[2]),
                mask_path: PathBuf::from(f[3]),
                label: Verdict::parse(f[4])?,
                manipulation: Manipulation::parse(f[5])?,
                seed: f[6].parse().map_err(|_| bad(i, format!("bad seed {:?}", f[6])))?,
                explanation_text: f[7].to_string(),
            };
            seen.add(r.manipulation);
            records.push(r);
        }
        if seen != counts {
            return Err(Error::Data(format!(
                "manifest header counts {counts:?} disagree with records {seen:?}"
            )));
        }
        Ok(Self {
            version,
            config_hash,
            counts,
            records,
            root: root.to_path_buf(),
        })
    }

    /// Reads `path`, or `path/manifest.tsv` when `path` is a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_record(&self, r: &ManifestRecord) -> Result<Sample> {
        let image = pnm::read_ppm(&self.root.join(&r.image_path))?;
        let (h, w, mask) = pnm::read_mask(&self.root.join(&r.mask_path))?;
        if image.shape()[..2] != [h, w] {
            return Err(Error::Data(format!("{}: mask {h}×{w} does not match image {:?}", r.id, image.shape())));
        }
        let explanation = Explanation::parse(&r.explanation_text)?;
        let s = Sample {
            id: r.id.clone(),
            image,
            label: r.label,
            mask,
            manipulation: r.manipulation,
            explanation,
            seed: r.seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// Loads and validates every sample of a split.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.records_in(split).map(|r| self.load_record(r)).collect()
    }
}

/// Generates the dataset and writes images, masks, explanation texts and
/// the manifest under `out_dir`.
pub fn build_dataset(config: &DatagenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = config.samples()?;
    for sub in ["images", "masks", "texts"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut counts = ClassCounts::default();
    for (split, s) in &samples {
        let image_path = PathBuf::from(format!("images/{}.ppm", s.id));
        let mask_path = PathBuf::from(format!("masks/{}.pgm", s.id));
        let text = s.explanation.render();
        pnm::write_ppm(&out_dir.join(&image_path), &s.image)?;
        pnm::write_mask(&out_dir.join(&mask_path), &s.mask, s.height(), s.width())?;
        pnm::write_file(&out_dir.join(format!("texts/{}.txt", s.id)), format!("{text}\n").as_bytes())?;
        counts.add(s.manipulation);
        records.push(ManifestRecord {
            id: s.id.clone(),
            split: *split,
            image_path,
            mask_path,
            label: s.label,
            manipulation: s.manipulation,
            seed: s.seed,
            explanation_text: text,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config_hash: config.hash(),
        counts,
        records,
        root: out_dir.to_path_buf(),
    };
    pnm::write_file(&out_dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    Ok(manifest)
}
