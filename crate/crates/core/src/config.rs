//! Run configuration: built-in defaults, overridden by a TOML file, then by
//! command-line flags.
//!
//! Every section is optional in the file; missing keys keep their defaults.
//!
//! ```toml
//! seed = 3                 # optional; reseeds data, model and training
//! granularities = "GHUL"
//!
//! [data]
//! num_ids = 20
//! samples_per_id = 10
//!
//! [train]
//! stage1_epochs = 30
//! mask_source = "predicted"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::CalibPolicy;
use crate::image_encoder::ImageConfig;
use crate::synth_data::GenConfig;
use crate::text_encoder::{GranularitySet, TextConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, derives every component seed from this one.
    pub seed: Option<u64>,
    pub granularities: GranularitySet,
    /// Root directory holding the data, labels and per-command run folders.
    pub out: PathBuf,
    pub data: GenConfig,
    pub calibration: CalibPolicy,
    pub image: ImageConfig,
    pub text: TextConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            granularities: GranularitySet::all(),
            out: PathBuf::from("work"),
            data: GenConfig::default(),
            calibration: CalibPolicy::default(),
            image: ImageConfig::default(),
            text: TextConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overridden by the file at `path`, when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Seed used for prompt initialization.
    pub fn prompt_seed(&self) -> u64 {
        self.train.seed.wrapping_add(2)
    }

    /// Applies the master seed, copies shared sizes into every section and
    /// validates the result. Idempotent.
    pub fn finalize(mut self) -> Result<Self> {
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train.seed = s;
            self.image.seed = s.wrapping_add(1);
        }
        self.image.height = self.data.image_height;
        self.image.width = self.data.image_width;
        self.image.patch = self.data.patch_size;
        self.image.num_classes = self.data.num_ids;
        if self.text.embed_dim != self.image.embed_dim {
            return Err(Error::Config(format!(
                "text.embed_dim ({}) must equal image.embed_dim ({})",
                self.text.embed_dim, self.image.embed_dim
            )));
        }
        self.data.validate()?;
        self.calibration.validate()?;
        self.image.validate()?;
        self.train.validate()?;
        if self.text.heads == 0 || !self.text.width.is_multiple_of(self.text.heads) {
            return Err(Error::Config("text width must be divisible by its head count".into()));
        }
        if self.train.ids_per_batch > self.data.num_ids {
            return Err(Error::Config(format!(
                "{} identities per batch but only {} identities",
                self.train.ids_per_batch, self.data.num_ids
            )));
        }
        Ok(self)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.out.join("labels")
    }

    pub fn labels_path(&self) -> PathBuf {
        self.labels_dir().join("labels.jsonl")
    }

    pub fn stage_dir(&self, stage: u8) -> PathBuf {
        self.out.join(format!("stage{stage}"))
    }

    /// Per-epoch state of an unfinished stage, removed once the stage completes.
    pub fn partial_dir(&self, stage: u8) -> PathBuf {
        self.out.join(format!("stage{stage}.partial"))
    }

    pub fn checkpoint_path(&self, stage: u8) -> PathBuf {
        self.stage_dir(stage).join("checkpoint.bin")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.out.join("masks")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_encoder::MaskMode;

    #[test]
    fn file_overrides_defaults() {
        let cfg = RunConfig::from_toml("granularities = \"G\"\n[train]\nstage1_epochs = 3\nmask_source = \"stripe\"\n").unwrap();
        assert_eq!(cfg.train.stage1_epochs, 3);
        assert_eq!(cfg.train.mask_source, MaskMode::Stripe);
        assert_eq!(cfg.train.stage2_epochs, TrainConfig::default().stage2_epochs);
        assert_eq!(cfg.granularities, GranularitySet::global_only());
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("granularities = \"Q\"\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default().finalize().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn finalize_syncs_and_seeds() {
        let mut cfg = RunConfig { seed: Some(7), ..Default::default() };
        cfg.data.num_ids = 12;
        let cfg = cfg.finalize().unwrap();
        assert_eq!((cfg.data.seed, cfg.train.seed, cfg.image.seed), (7, 7, 8));
        assert_eq!(cfg.image.num_classes, 12);
        let mut bad = RunConfig::default();
        bad.data.image_height = 60;
        assert!(bad.finalize().is_err());
    }
}
