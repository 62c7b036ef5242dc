//! Flat `key=value` configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tamperscope::datagen::{DatagenConfig, GeneratorConfig};
use tamperscope::faf::FafDims;
use tamperscope::heads::BackboneDims;
use tamperscope::model::ModelConfig;
use tamperscope::objectives::LossWeights;
use tamperscope::trainer::{OptimizerKind, TrainConfig};

use crate::CliError;

/// Every accepted key with its help text, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("image_size", "height and width of generated images"),
    ("n_train", "training samples"),
    ("n_eval", "evaluation samples"),
    ("authentic_fraction", "fraction of authentic samples per split"),
    ("copy_move_share", "share of tampered samples that are copy-move"),
    ("blend_sigma", "splice feathering sigma in pixels"),
    ("seed", "dataset seed"),
    ("region_min_frac", "smallest region side as a fraction of the image"),
    ("region_max_frac", "largest region side as a fraction of the image"),
    ("trace_min", "smallest sensor-trace amplitude"),
    ("trace_max", "largest sensor-trace amplitude"),
    ("epochs", "training epochs (>= 1)"),
    ("batch_size", "samples per optimiser step"),
    ("learning_rate", "optimiser step size"),
    ("train_seed", "seed for shuffling and augmentation"),
    ("lambda_c", "contrastive loss weight"),
    ("lambda_bce", "mask BCE weight"),
    ("lambda_dice", "mask Dice weight"),
    ("tau", "InfoNCE temperature"),
    ("optimizer", "adam or sgd"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("checkpoint_every", "write step-N.ckpt every N steps (0 = only final)"),
    ("max_grad_norm", "clip the global gradient norm (0 = off)"),
    ("two_view", "use augmented second views as contrastive positives"),
    ("model_seed", "parameter initialisation seed"),
    ("use_faf", "route the image through the frequency fusion module"),
    ("patch", "HH token patch size"),
    ("d_k", "attention key width"),
    ("d_v", "attention value width"),
    ("d_h", "contrastive MLP hidden width"),
    ("d_embed", "contrastive embedding width"),
    ("cell", "head cell size"),
    ("c_b", "trunk channels"),
    ("d_b", "pooled trunk width"),
    ("c_s", "decoder skip channels"),
    ("c_u", "decoder channels"),
    ("out", "output directory"),
    ("data", "dataset directory or manifest"),
    ("checkpoint", "checkpoint file"),
    ("image", "input P6 image"),
    ("report", "evaluation report directory"),
    ("split", "dataset split to evaluate (train or eval)"),
    ("window", "HH energy window (odd)"),
];

pub const ECHO_FILE: &str = "effective.conf";

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<&'static str, String>,
}

fn key_of(k: &str) -> Option<&'static str> {
    KEYS.iter().map(|(k, _)| *k).find(|x| *x == k)
}

impl Default for CliConfig {
    fn default() -> Self {
        let d = DatagenConfig::default();
        let g = d.generator;
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        let defaults: [(&str, String); KEYS.len()] = [
            ("image_size", d.image_size.to_string()),
            ("n_train", d.n_train.to_string()),
            ("n_eval", d.n_eval.to_string()),
            ("authentic_fraction", d.authentic_fraction.to_string()),
            ("copy_move_share", d.copy_move_share.to_string()),
            ("blend_sigma", d.blend_sigma.to_string()),
            ("seed", d.seed.to_string()),
            ("region_min_frac", g.region_min_frac.to_string()),
            ("region_max_frac", g.region_max_frac.to_string()),
            ("trace_min", g.trace_min.to_string()),
            ("trace_max", g.trace_max.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("train_seed", t.seed.to_string()),
            ("lambda_c", t.weights.lambda_c.to_string()),
            ("lambda_bce", t.weights.lambda_bce.to_string()),
            ("lambda_dice", t.weights.lambda_dice.to_string()),
            ("tau", t.weights.tau.to_string()),
            ("optimizer", t.optimizer.as_str().to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("max_grad_norm", t.max_grad_norm.to_string()),
            ("two_view", t.two_view.to_string()),
            ("model_seed", m.seed.to_string()),
            ("use_faf", m.use_faf.to_string()),
            ("patch", m.faf.patch.to_string()),
            ("d_k", m.faf.d_k.to_string()),
            ("d_v", m.faf.d_v.to_string()),
            ("d_h", m.faf.d_h.to_string()),
            ("d_embed", m.faf.d_embed.to_string()),
            ("cell", m.backbone.cell.to_string()),
            ("c_b", m.backbone.c_b.to_string()),
            ("d_b", m.backbone.d_b.to_string()),
            ("c_s", m.backbone.c_s.to_string()),
            ("c_u", m.backbone.c_u.to_string()),
            ("out", String::new()),
            ("data", String::new()),
            ("checkpoint", String::new()),
            ("image", String::new()),
            ("report", String::new()),
            ("split", "eval".to_string()),
            ("window", "3".to_string()),
        ];
        let values = defaults
            .into_iter()
            .map(|(k, v)| (key_of(k).expect("default for a listed key"), v))
            .collect();
        Self { values }
    }
}

impl CliConfig {
    /// Applies a config file: one `key=value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{source}:{}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Config(format!("{source}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let k = key_of(key).ok_or_else(|| format!("unknown key {key:?}"))?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| CliError::Config(format!("bad value for {key}: {v:?} ({e})")))
    }

    /// A path-valued key that the command needs.
    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        match self.raw(key) {
            "" => Err(CliError::Config(format!("--{key} is required"))),
            v => Ok(PathBuf::from(v)),
        }
    }

    pub fn datagen(&self) -> Result<DatagenConfig, CliError> {
        let c = DatagenConfig {
            image_size: self.get("image_size")?,
            n_train: self.get("n_train")?,
            n_eval: self.get("n_eval")?,
            authentic_fraction: self.get("authentic_fraction")?,
            copy_move_share: self.get("copy_move_share")?,
            blend_sigma: self.get("blend_sigma")?,
            seed: self.get("seed")?,
            generator: GeneratorConfig {
                region_min_frac: self.get("region_min_frac")?,
                region_max_frac: self.get("region_max_frac")?,
                trace_min: self.get("trace_min")?,
                trace_max: self.get("trace_max")?,
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let c = TrainConfig {
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            learning_rate: self.get("learning_rate")?,
            seed: self.get("train_seed")?,
            weights: LossWeights {
                lambda_c: self.get("lambda_c")?,
                lambda_bce: self.get("lambda_bce")?,
                lambda_dice: self.get("lambda_dice")?,
                tau: self.get("tau")?,
            },
            optimizer: OptimizerKind::parse(self.raw("optimizer"))?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            adam_eps: self.get("adam_eps")?,
            checkpoint_every: self.get("checkpoint_every")?,
            max_grad_norm: self.get("max_grad_norm")?,
            two_view: self.get("two_view")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn model(&self, image_size: usize) -> Result<ModelConfig, CliError> {
        let channels = 3;
        let c = ModelConfig {
            image_size,
            faf: FafDims {
                patch: self.get("patch")?,
                channels,
                d_k: self.get("d_k")?,
                d_v: self.get("d_v")?,
                d_h: self.get("d_h")?,
                d_embed: self.get("d_embed")?,
            },
            backbone: BackboneDims {
                cell: self.get("cell")?,
                channels,
                c_b: self.get("c_b")?,
                d_b: self.get("d_b")?,
                c_s: self.get("c_s")?,
                c_u: self.get("c_u")?,
            },
            seed: self.get("model_seed")?,
            use_faf: self.get("use_faf")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Every key in [`KEYS`] order; feeding it back as `--config` reproduces the run.
    pub fn to_text(&self, command: &str) -> String {
        let mut out = format!("# effective configuration of `tamperscope {command}`\n");
        for (k, _) in KEYS {
            out.push_str(&format!("{k}={}\n", self.raw(k)));
        }
        out
    }

    pub fn echo(&self, command: &str, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_text(command)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
