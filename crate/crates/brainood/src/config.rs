//! Run configuration: one TOML file covering the generator, trainer, split
//! policy, and paths, plus the command-line overrides that win over it.
//!
//! Every section is optional and every field has a default, but unknown keys
//! anywhere in the file are rejected — a typo fails loudly instead of
//! silently running with defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use brainood_core::braindata::SyntheticConfig;
use brainood_core::trainer::TrainConfig;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Dataset manifest (JSON); matrices resolve relative to it.
    pub manifest: PathBuf,
    /// Split-plan file (JSON).
    pub splits: PathBuf,
    /// Directory for checkpoints, results, and interpretation artifacts.
    pub output_dir: PathBuf,
    /// Checkpoint consumed by `eval` and `interpret`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            manifest: PathBuf::from("data/manifest.json"),
            splits: PathBuf::from("data/splits.json"),
            output_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// train : val : test proportions.
    pub ratio: (usize, usize, usize),
    /// Held-out sites, one fold each. Defaults to every site in the
    /// manifest, in sorted order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_sites: Option<Vec<String>>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            ratio: (8, 1, 1),
            ood_sites: None,
        }
    }
}

/// Which subjects feed the interpretation score map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectSelection {
    /// Test split of the configured fold.
    Test,
    /// Every subject in the manifest.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    pub top_k: usize,
    pub subjects: SubjectSelection,
}

impl Default for InterpretSection {
    fn default() -> Self {
        InterpretSection {
            top_k: 10,
            subjects: SubjectSelection::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Fold index used by `train`, `eval`, and `interpret`.
    pub fold: usize,
    /// Fraction of strongest |connectivity| pairs kept as graph edges.
    pub sparsify_fraction: f64,
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub split: SplitSection,
    pub paths: PathsSection,
    pub interpret: InterpretSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fold: 0,
            sparsify_fraction: 0.2,
            synthetic: SyntheticConfig::default(),
            train: TrainConfig::default(),
            split: SplitSection::default(),
            paths: PathsSection::default(),
            interpret: InterpretSection::default(),
        }
    }
}

impl RunConfig {
    /// Read a TOML config, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Err(e) = self.train.check() {
            bail!("[train] {e}");
        }
        if let Err(e) = self.synthetic.check() {
            bail!("[synthetic] {e}");
        }
        if !(self.sparsify_fraction > 0.0 && self.sparsify_fraction <= 1.0) {
            bail!(
                "sparsify_fraction = {} outside (0, 1]",
                self.sparsify_fraction
            );
        }
        if self.interpret.top_k == 0 {
            bail!("[interpret] top_k must be at least 1");
        }
        Ok(())
    }
}

/// `--ablate` values: each switches one model component off (or swaps in a
/// raw input), reproducing the ablation table rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    #[value(name = "no-mask")]
    NoMask,
    #[value(name = "no-sampler")]
    NoSampler,
    #[value(name = "no-entropy")]
    NoEntropy,
    #[value(name = "no-recon")]
    NoRecon,
    #[value(name = "no-align")]
    NoAlign,
    #[value(name = "use-raw-X", alias = "use-raw-x")]
    UseRawX,
    #[value(name = "use-raw-A", alias = "use-raw-a")]
    UseRawA,
}

/// Sampling mode for `eval`: deterministic soft scores, or k hard
/// subgraph draws averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Soft,
    Hard,
}

/// Command-line values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ablate: Vec<Ablation>,
}

impl RunConfig {
    /// Fold the command-line overrides in: the seed feeds both the generator
    /// and the trainer, `--out` moves the artifact directory, and each
    /// `--ablate` flips its component flag.
    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.train.seed = seed;
            self.synthetic.seed = seed;
        }
        if let Some(out) = &ov.out {
            self.paths.output_dir = out.clone();
        }
        for a in &ov.ablate {
            let f = &mut self.train.flags;
            match a {
                Ablation::NoMask => f.use_mask = false,
                Ablation::NoSampler => f.use_sampler = false,
                Ablation::NoEntropy => f.use_entropy = false,
                Ablation::NoRecon => f.use_recon = false,
                Ablation::NoAlign => f.use_align = false,
                Ablation::UseRawX => f.raw_x = true,
                Ablation::UseRawA => f.raw_a = true,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_load_without_a_file() {
        let cfg = RunConfig::load(None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.sparsify_fraction, 0.2);
        assert_eq!(cfg.split.ratio, (8, 1, 1));
        assert_eq!(cfg.train.lambda3, 0.5);
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
fold = 2

[train]
epochs = 7
seed = 99

[synthetic]
sites = 3

[paths]
output_dir = "elsewhere"
"#,
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.fold, 2);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.train.batch_size, 64, "untouched fields keep defaults");
        assert_eq!(cfg.synthetic.sites, 3);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.paths.manifest, PathBuf::from("data/manifest.json"));
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_level() {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in [
            ("top.toml", "frobnicate = 1\n"),
            ("train.toml", "[train]\nlearning_rate = 0.1\n"),
            ("flags.toml", "[train.flags]\nuse_masks = false\n"),
            ("synth.toml", "[synthetic]\nnum_sites = 4\n"),
        ] {
            let path = dir.path().join(name);
            std::fs::write(&path, text).unwrap();
            let err = RunConfig::load(Some(&path)).unwrap_err();
            let msg = format!("{err:#}");
            assert!(
                msg.contains("unknown field"),
                "{name}: expected unknown-field error, got: {msg}"
            );
        }
    }

    #[test]
    fn bad_values_are_rejected_with_section_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[train]\ntau = 0.0\n").unwrap();
        let msg = format!("{:#}", RunConfig::load(Some(&path)).unwrap_err());
        assert!(msg.contains("[train]") && msg.contains("tau"), "{msg}");

        std::fs::write(&path, "sparsify_fraction = 0.0\n").unwrap();
        let msg = format!("{:#}", RunConfig::load(Some(&path)).unwrap_err());
        assert!(msg.contains("sparsify_fraction"), "{msg}");
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::default();
        let ov = Overrides {
            seed: Some(7),
            out: Some(PathBuf::from("run7")),
            ablate: vec![Ablation::NoMask, Ablation::NoSampler, Ablation::UseRawA],
        };
        cfg.apply(&ov);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.synthetic.seed, 7);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("run7"));
        assert!(!cfg.train.flags.use_mask);
        assert!(!cfg.train.flags.use_sampler);
        assert!(cfg.train.flags.raw_a);
        assert!(cfg.train.flags.use_recon, "untouched flags stay on");
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
