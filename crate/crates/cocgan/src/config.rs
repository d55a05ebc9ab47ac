//! Run configuration: line-oriented `key=value` config files with CLI-flag
//! overrides, validated against the model invariants, and echoed into the
//! run manifest.

use crate::error::Error;
use crate::model::{ModelConfig, Role};
use crate::train::{ClipMode, GanMode, TrainConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything a training run needs, with the reference defaults
/// (lr 2e-4, batch 256, one cluster center per stage, seed-width 128).
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: GanMode,
    pub conditional: bool,
    pub lr: f64,
    pub lr_min: f64,
    pub lr_horizon: Option<usize>,
    pub batch: usize,
    pub epochs: usize,
    pub n_critic: usize,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub opt_eps: f64,
    pub rms_decay: f64,
    pub saturating_g_loss: bool,
    pub seed: u64,
    pub sample_every: usize,
    pub checkpoint_every: usize,
    pub channels: usize,
    pub n_classes: usize,
    /// Per-stage cluster-center overrides (must stay perfect squares).
    pub centers: [usize; 3],
    pub data_images: Option<PathBuf>,
    pub data_labels: Option<PathBuf>,
    /// Synthetic blob dataset size (alternative to IDX paths).
    pub blobs: Option<usize>,
    /// Use only the first N samples.
    pub subset: Option<usize>,
    pub out: Option<PathBuf>,
    pub png: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: GanMode::Vanilla,
            conditional: false,
            lr: 2e-4,
            lr_min: 0.0,
            lr_horizon: None,
            batch: 256,
            epochs: 50,
            n_critic: 5,
            clip: 0.01,
            clip_mode: ClipMode::Weights,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            opt_eps: 1e-8,
            rms_decay: 0.99,
            saturating_g_loss: false,
            seed: 0,
            sample_every: 1,
            checkpoint_every: 0,
            channels: 1,
            n_classes: 10,
            centers: [1, 1, 1],
            data_images: None,
            data_labels: None,
            blobs: None,
            subset: None,
            out: None,
            png: false,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    /// Apply one `key=value` assignment. `location` names the source (file
    /// line or flag) for error messages.
    pub fn set(&mut self, key: &str, value: &str, location: &str) -> Result<(), Error> {
        let bad = |what: &str| Error::Config(format!("{location}: {what} (key {key:?}, value {value:?})"));
        macro_rules! num {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad("unparsable value"))?
            };
        }
        match key {
            "mode" => {
                self.mode = match value {
                    "vanilla" => GanMode::Vanilla,
                    "wgan" => GanMode::Wgan,
                    _ => return Err(bad("mode must be vanilla or wgan")),
                }
            }
            "conditional" => self.conditional = parse_bool(value).ok_or_else(|| bad("expected true/false"))?,
            "lr" => self.lr = num!(f64),
            "lr_min" => self.lr_min = num!(f64),
            "lr_horizon" => self.lr_horizon = Some(num!(usize)),
            "batch" => self.batch = num!(usize),
            "epochs" => self.epochs = num!(usize),
            "n_critic" => self.n_critic = num!(usize),
            "clip" => self.clip = num!(f64),
            "clip_mode" => {
                self.clip_mode = match value {
                    "weights" => ClipMode::Weights,
                    "gradnorm" => ClipMode::GradNorm,
                    _ => return Err(bad("clip_mode must be weights or gradnorm")),
                }
            }
            "adam_beta1" => self.adam_beta1 = num!(f64),
            "adam_beta2" => self.adam_beta2 = num!(f64),
            "opt_eps" => self.opt_eps = num!(f64),
            "rms_decay" => self.rms_decay = num!(f64),
            "saturating_g_loss" => {
                self.saturating_g_loss = parse_bool(value).ok_or_else(|| bad("expected true/false"))?
            }
            "seed" => self.seed = num!(u64),
            "sample_every" => self.sample_every = num!(usize),
            "checkpoint_every" => self.checkpoint_every = num!(usize),
            "channels" => self.channels = num!(usize),
            "n_classes" => self.n_classes = num!(usize),
            "centers_s1" => self.centers[0] = num!(usize),
            "centers_s2" => self.centers[1] = num!(usize),
            "centers_s3" => self.centers[2] = num!(usize),
            "data_images" => self.data_images = Some(PathBuf::from(value)),
            "data_labels" => self.data_labels = Some(PathBuf::from(value)),
            "blobs" => self.blobs = Some(num!(usize)),
            "subset" => self.subset = Some(num!(usize)),
            "out" => self.out = Some(PathBuf::from(value)),
            "png" => self.png = parse_bool(value).ok_or_else(|| bad("expected true/false"))?,
            _ => return Err(Error::Config(format!("{location}: unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a config file: one `key=value` per line, `#` comments, blank
    /// lines ignored. Errors carry the line number.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    i + 1
                )));
            };
            self.set(key.trim(), value.trim(), &format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Build the validated model descriptions this run will train.
    pub fn model_configs(&self) -> Result<(ModelConfig, ModelConfig), Error> {
        let mut gen = ModelConfig::generator(self.channels);
        let mut disc = ModelConfig::discriminator(self.channels, self.mode == GanMode::Wgan);
        if self.conditional {
            gen = gen.conditional(self.n_classes);
            disc = disc.conditional(self.n_classes);
        }
        for (i, &c) in self.centers.iter().enumerate() {
            gen.stages[i].centers = c;
            disc.stages[i].centers = c;
        }
        gen.validate()?;
        disc.validate()?;
        Ok((gen, disc))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            conditional: self.conditional,
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            n_critic: self.n_critic,
            clip: self.clip,
            clip_mode: self.clip_mode,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            opt_eps: self.opt_eps,
            rms_decay: self.rms_decay,
            seed: self.seed,
            lr_min: self.lr_min,
            lr_horizon: self.lr_horizon,
            saturating_g_loss: self.saturating_g_loss,
            sample_every: self.sample_every,
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// Validate everything that can fail before any filesystem writes.
    pub fn validate(&self) -> Result<(), Error> {
        self.train_config().validate()?;
        self.model_configs()?;
        match (&self.data_images, &self.data_labels, self.blobs) {
            (Some(_), Some(_), None) | (None, None, Some(_)) => Ok(()),
            (None, None, None) => Err(Error::Config(
                "no dataset: give data_images+data_labels or blobs=N".into(),
            )),
            _ => Err(Error::Config(
                "give either data_images+data_labels or blobs=N, not a mixture".into(),
            )),
        }
    }

    /// The effective configuration as manifest text; parsing this text back
    /// reproduces the run.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# cocgan run manifest (version {})", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "mode={}", match self.mode { GanMode::Vanilla => "vanilla", GanMode::Wgan => "wgan" });
        let _ = writeln!(s, "conditional={}", self.conditional);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "lr_min={}", self.lr_min);
        if let Some(h) = self.lr_horizon {
            let _ = writeln!(s, "lr_horizon={h}");
        }
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "n_critic={}", self.n_critic);
        let _ = writeln!(s, "clip={}", self.clip);
        let _ = writeln!(s, "clip_mode={}", match self.clip_mode { ClipMode::Weights => "weights", ClipMode::GradNorm => "gradnorm" });
        let _ = writeln!(s, "adam_beta1={}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2={}", self.adam_beta2);
        let _ = writeln!(s, "opt_eps={}", self.opt_eps);
        let _ = writeln!(s, "rms_decay={}", self.rms_decay);
        let _ = writeln!(s, "saturating_g_loss={}", self.saturating_g_loss);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "sample_every={}", self.sample_every);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "n_classes={}", self.n_classes);
        let _ = writeln!(s, "centers_s1={}", self.centers[0]);
        let _ = writeln!(s, "centers_s2={}", self.centers[1]);
        let _ = writeln!(s, "centers_s3={}", self.centers[2]);
        if let Some(p) = &self.data_images {
            let _ = writeln!(s, "data_images={}", p.display());
        }
        if let Some(p) = &self.data_labels {
            let _ = writeln!(s, "data_labels={}", p.display());
        }
        if let Some(n) = self.blobs {
            let _ = writeln!(s, "blobs={n}");
        }
        if let Some(n) = self.subset {
            let _ = writeln!(s, "subset={n}");
        }
        if let Some(p) = &self.out {
            let _ = writeln!(s, "out={}", p.display());
        }
        let _ = writeln!(s, "png={}", self.png);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_keeps_reference_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# nothing here\n\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&p).unwrap();
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.batch, 256);
        assert_eq!(cfg.centers, [1, 1, 1]);
        assert_eq!(cfg.epochs, 50);
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "lr = 1e-3\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&p).unwrap();
        assert_eq!(cfg.lr, 1e-3);
        cfg.set("lr", "2e-4", "flag --lr").unwrap();
        assert_eq!(cfg.lr, 2e-4);
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "lr=1e-3\nnot_a_key=1\n").unwrap();
        let mut cfg = RunConfig::default();
        let err = cfg.apply_file(&p).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
        assert!(err.to_string().contains("not_a_key"), "{err}");
    }

    #[test]
    fn unparsable_value_reports_location() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("batch", "many", "test:1").unwrap_err();
        assert!(err.to_string().contains("test:1"), "{err}");
    }

    #[test]
    fn non_square_centers_rejected() {
        let mut cfg = RunConfig::default();
        cfg.set("centers_s1", "3", "flag").unwrap();
        cfg.blobs = Some(64);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("perfect square"), "{err}");
    }

    #[test]
    fn manifest_round_trips_through_parser() {
        let mut cfg = RunConfig::default();
        cfg.set("mode", "wgan", "t").unwrap();
        cfg.set("lr", "0.00035", "t").unwrap();
        cfg.set("blobs", "640", "t").unwrap();
        cfg.set("centers_s1", "4", "t").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cfg");
        std::fs::write(&p, cfg.manifest()).unwrap();
        let mut back = RunConfig::default();
        back.apply_file(&p).unwrap();
        assert_eq!(back.lr, 0.00035);
        assert_eq!(back.mode, GanMode::Wgan);
        assert_eq!(back.blobs, Some(640));
        assert_eq!(back.centers, [4, 1, 1]);
    }

    #[test]
    fn dataset_source_is_required() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_configs_honor_role() {
        let cfg = RunConfig::default();
        let (g, d) = cfg.model_configs().unwrap();
        assert_eq!(g.role, Role::Generator);
        assert_eq!(d.role, Role::Discriminator);
    }
}
