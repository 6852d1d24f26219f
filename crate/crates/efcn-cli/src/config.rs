//! Run configuration: one TOML file drives every subcommand.
//!
//! Unknown keys are rejected everywhere, so typos fail loudly instead of
//! silently falling back to defaults. Every section except `[frame]` has
//! sensible defaults; commands that need a section validate it on use.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use efcn::backbone::ArchDesc;
use efcn::data::SynthConfig;
use efcn::training::{Optimizer, TrainConfig};
use efcn::{ActList, ClassSet, Error, Frame, Result};

/// Top-level configuration file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for dataset generation, parameter init and batch shuffling.
    #[serde(default)]
    pub seed: u64,
    pub frame: FrameSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub acts: ActsSection,
    #[serde(default)]
    pub decision: DecisionSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSection {
    /// Class names; the first is conventionally the background.
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Architecture name: `toy`, `toy-skip` or `micro`.
    pub architecture: String,
    /// Number of evidential prototypes.
    pub prototypes: usize,
    /// Input image channels.
    pub in_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: "toy".into(),
            prototypes: 15,
            in_channels: 3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActsSection {
    /// Which sets may be assigned, as comma-separated categories:
    /// `singletons`, `pairs`, `triples`, `omega`. Singletons and Ω are
    /// always included.
    pub sets: String,
}

impl Default for ActsSection {
    fn default() -> Self {
        ActsSection {
            sets: "singletons,pairs,omega".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionSection {
    /// Tolerance to imprecision; 0.5 forces precise decisions, larger
    /// values make cautious multi-class assignments more attractive.
    pub gamma: f64,
}

impl Default for DecisionSection {
    fn default() -> Self {
        DecisionSection { gamma: 0.8 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `sgd` or `sgd-momentum`.
    pub optimizer: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 8,
            optimizer: "sgd-momentum".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Calibration bin count.
    pub bins: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { bins: 10 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub boundary_width: usize,
    pub noise_sigma: f64,
    /// Probability that an image contains one extra shape of a class
    /// outside the frame (labeled with the unknown sentinel).
    pub unknown_rate: f64,
    pub min_radius: usize,
    pub max_radius: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            count: d.count,
            height: d.height,
            width: d.width,
            boundary_width: d.boundary_width,
            noise_sigma: d.noise_sigma,
            unknown_rate: d.unknown_rate,
            min_radius: d.min_radius,
            max_radius: d.max_radius,
            min_shapes: d.min_shapes,
            max_shapes: d.max_shapes,
            train_fraction: d.train_fraction,
            val_fraction: d.val_fraction,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Dataset directory (written by `synth`, read by the rest).
    pub dataset: Option<PathBuf>,
    /// Model checkpoint file.
    pub checkpoint: Option<PathBuf>,
    /// Training-history CSV.
    pub history: Option<PathBuf>,
    /// Output directory for predictions and reports.
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.frame()?;
        if !(0.5..=1.0).contains(&self.decision.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0.5, 1], got {}",
                self.decision.gamma
            )));
        }
        if self.metrics.bins == 0 {
            return Err(Error::Config("metrics.bins must be positive".into()));
        }
        self.arch()?;
        self.optimizer()?;
        Ok(())
    }

    pub fn frame(&self) -> Result<Frame> {
        Frame::new(self.frame.classes.clone())
    }

    pub fn arch(&self) -> Result<ArchDesc> {
        match self.model.architecture.as_str() {
            "toy" => Ok(ArchDesc::toy()),
            "toy-skip" => Ok(ArchDesc::toy_skip()),
            "micro" => Ok(ArchDesc::micro()),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected toy, toy-skip or micro)"
            ))),
        }
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        match self.training.optimizer.as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "sgd-momentum" => Ok(Optimizer::SgdMomentum),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected sgd or sgd-momentum)"
            ))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            learning_rate: self.training.learning_rate,
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            gamma: self.decision.gamma,
            seed: self.seed,
            optimizer: self.optimizer()?,
        })
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            count: self.synth.count,
            height: self.synth.height,
            width: self.synth.width,
            seed: self.seed,
            boundary_width: self.synth.boundary_width,
            noise_sigma: self.synth.noise_sigma,
            unknown_rate: self.synth.unknown_rate,
            min_radius: self.synth.min_radius,
            max_radius: self.synth.max_radius,
            min_shapes: self.synth.min_shapes,
            max_shapes: self.synth.max_shapes,
            train_fraction: self.synth.train_fraction,
            val_fraction: self.synth.val_fraction,
        }
    }

    /// Act list per the configured policy.
    pub fn act_list(&self, frame: &Frame) -> Result<ActList> {
        build_act_list(frame, &self.acts.sets)
    }
}

/// Expands an act-category spec (`singletons,pairs,omega`, ...) into the
/// concrete sets of a frame. Singletons and Ω are always present.
pub fn build_act_list(frame: &Frame, spec: &str) -> Result<ActList> {
    let m = frame.class_count();
    let mut extras: Vec<ClassSet> = Vec::new();
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match token {
            "singletons" | "omega" => {} // always included by construction
            "pairs" => {
                for a in 0..m {
                    for b in a + 1..m {
                        extras.push(ClassSet::from_indices(&[a, b]));
                    }
                }
            }
            "triples" => {
                for a in 0..m {
                    for b in a + 1..m {
                        for c in b + 1..m {
                            extras.push(ClassSet::from_indices(&[a, b, c]));
                        }
                    }
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown act category {other:?} (expected singletons, pairs, triples, omega)"
                )))
            }
        }
    }
    ActList::build(frame, &extras)
}
