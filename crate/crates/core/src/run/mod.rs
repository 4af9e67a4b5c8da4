//! File-based pipeline: configuration, output layout and the stage commands
//! behind the `prunecam` binary.

mod chart;
mod commands;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use chart::{line_chart, Series};
pub use commands::{
    calib_set, calibrate, explain, prune, report, road_eval, run_all, sample_per_class, synth_data, train, ImageMaps, MapRecord, MapsFile,
    Written,
};

use crate::cam::CamMethod;
use crate::calib::{CalibConfig, FitConfig, HeadKind};
use crate::data::{SynthSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::NetConfig;
use crate::prune::PruneSchedule;
use crate::road::RoadConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every stage's own seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub cv: CvConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub prune: PruneSchedule,
    pub road: RoadSection,
    pub calibration: CalibSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            cv: CvConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            prune: PruneSchedule::default(),
            road: RoadSection::default(),
            calibration: CalibSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing dataset root; when unset, `synth-data` writes `<out_dir>/data`.
    pub path: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Size of the held-out external set used for calibration.
    pub external_per_class: [usize; NUM_CLASSES],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synth: SynthSpec::default(),
            external_per_class: [99; NUM_CLASSES],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadSection {
    /// Pruning steps whose best-fold model is explained and scored.
    pub steps: Vec<usize>,
    pub methods: Vec<String>,
    /// Images sampled per class for explanation and scoring.
    pub per_class: usize,
    pub thresholds: Vec<f64>,
    pub sigma: f64,
    pub tolerance: f64,
    /// Hook unit; defaults to the last residual block.
    pub target: Option<String>,
}

impl Default for RoadSection {
    fn default() -> Self {
        let r = RoadConfig::default();
        Self {
            steps: vec![0],
            methods: CamMethod::ALL.iter().map(|m| m.name().to_string()).collect(),
            per_class: 16,
            thresholds: r.thresholds,
            sigma: r.sigma,
            tolerance: r.tolerance,
            target: None,
        }
    }
}

impl RoadSection {
    pub fn methods(&self) -> Result<Vec<CamMethod>> {
        self.methods.iter().map(|m| CamMethod::parse(m)).collect()
    }

    pub fn road_config(&self, seed: u64) -> RoadConfig {
        RoadConfig {
            thresholds: self.thresholds.clone(),
            sigma: self.sigma,
            tolerance: self.tolerance,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    /// Pruning step whose best-fold model is calibrated.
    pub step: usize,
    pub head: HeadKind,
    pub hidden: usize,
    pub val_frac: f64,
    pub repeats: usize,
    pub fit: FitConfig,
}

impl Default for CalibSection {
    fn default() -> Self {
        let c = CalibConfig::default();
        Self {
            step: 0,
            head: c.head,
            hidden: c.hidden,
            val_frac: c.val_frac,
            repeats: c.repeats,
            fit: c.fit,
        }
    }
}

impl CalibSection {
    pub fn calib_config(&self) -> CalibConfig {
        CalibConfig {
            head: self.head,
            hidden: self.hidden,
            val_frac: self.val_frac,
            repeats: self.repeats,
            fit: self.fit.clone(),
        }
    }
}

impl RunConfig {
    /// Parses JSON text; the CLI parses TOML into the same structure.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with the master seed pushed into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.synth.seed = c.seed;
        c.train.seed = c.seed;
        c.prune.fine_tune.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |key: &str, e: Error| match e {
            Error::Config(m) => Error::Config(format!("{key}: {m}")),
            other => other,
        };
        self.net.validate().map_err(|e| ctx("net", e))?;
        self.train.validate().map_err(|e| ctx("train", e))?;
        self.prune.validate().map_err(|e| ctx("prune", e))?;
        self.data.synth.validate().map_err(|e| ctx("data.synth", e))?;
        self.calibration.calib_config().validate().map_err(|e| ctx("calibration", e))?;
        self.road.road_config(0).validate().map_err(|e| ctx("road", e))?;
        self.road.methods().map_err(|e| ctx("road.methods", e))?;
        if self.data.path.is_none() && self.data.synth.image_size != self.net.input_size {
            return Err(Error::Config(format!(
                "data.synth.image_size ({}) must equal net.input_size ({})",
                self.data.synth.image_size, self.net.input_size
            )));
        }
        if self.cv.folds < 2 {
            return Err(Error::Config(format!("cv.folds: need at least 2, got {}", self.cv.folds)));
        }
        if self.road.per_class == 0 {
            return Err(Error::Config("road.per_class must be at least 1".into()));
        }
        for &s in self.road.steps.iter().chain([&self.calibration.step]) {
            if s > self.prune.num_steps {
                return Err(Error::Config(format!(
                    "step {s} requested but prune.num_steps is {}",
                    self.prune.num_steps
                )));
            }
        }
        Ok(())
    }
}

/// Where every artifact lives under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    data: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
            data: cfg.data.path.clone().unwrap_or_else(|| cfg.out_dir.join("data")),
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data
    }

    pub fn fold_plan(&self) -> PathBuf {
        self.root.join("train/folds.json")
    }

    pub fn fold_checkpoint(&self, fold: usize) -> PathBuf {
        self.root.join(format!("checkpoints/train/fold_{fold:02}.ckpt"))
    }

    pub fn step_checkpoint(&self, step: usize) -> PathBuf {
        self.root.join(format!("checkpoints/step_{step:02}.ckpt"))
    }

    pub fn step_report(&self, step: usize) -> PathBuf {
        self.root.join(format!("steps/step_{step:02}.json"))
    }

    pub fn epoch_log(&self, step: usize, fold: usize) -> PathBuf {
        self.root.join(format!("logs/step_{step:02}_fold_{fold:02}.csv"))
    }

    pub fn maps(&self, step: usize) -> PathBuf {
        self.root.join(format!("explain/step_{step:02}.json"))
    }

    pub fn road_scores(&self) -> PathBuf {
        self.root.join("road/scores.csv")
    }

    pub fn road_per_class(&self) -> PathBuf {
        self.root.join("road/per_class.csv")
    }

    pub fn calibration(&self, name: &str) -> PathBuf {
        self.root.join("calibration").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("report").join(name)
    }
}

/// Fails with [`Error::MissingArtifact`] unless `path` exists.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}
