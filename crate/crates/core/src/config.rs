//! Run configuration, loaded from TOML. Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acp::RatioBounds;
use crate::baselines::SchemeConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Idx,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    // idx
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// Use only the first `n` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    // synthetic
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    /// `[C, H, W]` of synthetic samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
}

impl DataConfig {
    pub fn idx(
        train_images: impl Into<PathBuf>,
        train_labels: impl Into<PathBuf>,
        test_images: impl Into<PathBuf>,
        test_labels: impl Into<PathBuf>,
    ) -> Self {
        DataConfig {
            source: DataSource::Idx,
            train_images: Some(train_images.into()),
            train_labels: Some(train_labels.into()),
            test_images: Some(test_images.into()),
            test_labels: Some(test_labels.into()),
            ..Self::empty(DataSource::Idx)
        }
    }

    pub fn synthetic(
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dims: [usize; 3],
    ) -> Self {
        DataConfig {
            classes: Some(classes),
            per_class: Some(per_class),
            test_per_class: Some(test_per_class),
            dims: Some(dims),
            ..Self::empty(DataSource::Synthetic)
        }
    }

    fn empty(source: DataSource) -> Self {
        DataConfig {
            source,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_subset: None,
            test_subset: None,
            classes: None,
            per_class: None,
            test_per_class: None,
            dims: None,
            separation: None,
            data_seed: None,
        }
    }

    fn idx_paths(&self) -> Result<[&Path; 4]> {
        fn get<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
            p.as_deref().ok_or_else(|| {
                Error::Config(format!("data.{key} is required for source = \"idx\""))
            })
        }
        Ok([
            get(&self.train_images, "train_images")?,
            get(&self.train_labels, "train_labels")?,
            get(&self.test_images, "test_images")?,
            get(&self.test_labels, "test_labels")?,
        ])
    }

    fn synthetic_params(&self) -> Result<(usize, usize, usize, [usize; 3])> {
        let need = |v: Option<usize>, key: &str| {
            v.ok_or_else(|| {
                Error::Config(format!("data.{key} is required for source = \"synthetic\""))
            })
        };
        Ok((
            need(self.classes, "classes")?,
            need(self.per_class, "per_class")?,
            need(self.test_per_class, "test_per_class")?,
            self.dims.ok_or_else(|| {
                Error::Config("data.dims is required for source = \"synthetic\"".into())
            })?,
        ))
    }

    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.source {
            DataSource::Idx => {
                let [ti, tl, vi, vl] = self.idx_paths()?;
                (data::load_idx(ti, tl)?, data::load_idx(vi, vl)?)
            }
            DataSource::Synthetic => {
                let (k, per, test_per, dims) = self.synthetic_params()?;
                let sep = self.separation.unwrap_or(6.0);
                let seed = self.data_seed.unwrap_or(0);
                (
                    data::synth_blobs_with_separation(k, per, dims, sep, seed)?,
                    data::synth_blobs_with_separation(
                        k,
                        test_per,
                        dims,
                        sep,
                        seed.wrapping_add(1),
                    )?,
                )
            }
        };
        let train = match self.train_subset {
            Some(n) => train.head(n)?,
            None => train,
        };
        let mut test = match self.test_subset {
            Some(n) => test.head(n)?,
            None => test,
        };
        if train.sample_shape() != test.sample_shape() {
            return Err(Error::Data("train and test sample shapes differ".into()));
        }
        test.num_classes = test.num_classes.max(train.num_classes);
        let mut train = train;
        train.num_classes = test.num_classes;
        Ok((train, test))
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    Dirichlet,
}

fn default_beta() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub num_clients: usize,
}

fn default_eval_batch() -> usize {
    500
}

/// What the server receives for test batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPath {
    /// The scheme's own cut-layer compression; pruning schemes reuse the most
    /// recent training mask.
    #[default]
    Compressed,
    /// Full smashed data.
    Uncompressed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    /// Iterations each client runs per round.
    pub batches_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub eval_path: EvalPath,
}

impl TrainingConfig {
    /// Iterations each client runs over the whole experiment.
    pub fn total_iterations(&self) -> usize {
        self.rounds * self.batches_per_round
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Per-iteration pruning decisions (`decisions.csv`).
    #[serde(default)]
    pub decision_log: bool,
    /// Per-round channel scores (`scores.csv`).
    #[serde(default)]
    pub score_dump: bool,
    /// Final parameters per scheme and seed.
    #[serde(default)]
    pub checkpoint: bool,
    /// Length-prefixed message traces per scheme and seed.
    #[serde(default)]
    pub trace: bool,
    /// Client index lists per seed.
    #[serde(default)]
    pub partition: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub training: TrainingConfig,
    /// Defaults to [`ModelSpec::desk_default`] for the dataset's class count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub bounds: RatioBounds,
    pub schemes: Vec<SchemeConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses TOML; relative data paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.data.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }

    pub fn sgd(&self) -> Result<SgdConfig> {
        SgdConfig::new(self.training.learning_rate, self.training.batch_size)
    }

    pub fn model_spec(&self, num_classes: usize) -> ModelSpec {
        self.model
            .clone()
            .unwrap_or_else(|| ModelSpec::desk_default(num_classes))
    }

    /// Checks every invariant that does not require loading data, plus file existence.
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.sgd()?;
        let t = &self.training;
        if t.rounds == 0 || t.batches_per_round == 0 {
            return Err(Error::Config(
                "T = rounds * batches_per_round must be at least 1".into(),
            ));
        }
        if t.seeds.is_empty() {
            return Err(Error::Config(
                "training.seeds must list at least one seed".into(),
            ));
        }
        if t.eval_batch_size == 0 {
            return Err(Error::Config(
                "training.eval_batch_size must be at least 1".into(),
            ));
        }
        if self.partition.num_clients == 0 {
            return Err(Error::Config(
                "partition.num_clients must be at least 1".into(),
            ));
        }
        if self.partition.num_clients > u16::MAX as usize {
            return Err(Error::Config(
                "partition.num_clients does not fit a u16 client id".into(),
            ));
        }
        if self.partition.scheme == PartitionScheme::Dirichlet
            && !(self.partition.beta > 0.0 && self.partition.beta.is_finite())
        {
            return Err(Error::Config(format!(
                "partition.beta must be positive, got {}",
                self.partition.beta
            )));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config(
                "at least one [[schemes]] entry is required".into(),
            ));
        }
        let mut labels = std::collections::BTreeSet::new();
        for s in &self.schemes {
            s.validate()?;
            if !labels.insert(s.label()) {
                return Err(Error::Config(format!(
                    "duplicate scheme label `{}`; set `name` to disambiguate",
                    s.label()
                )));
            }
        }
        if let Some(model) = &self.model {
            if model.cut == 0 || model.cut >= model.layers.len() {
                return Err(Error::Config(format!(
                    "model.cut = {} must split {} layers into two non-empty halves",
                    model.cut,
                    model.layers.len()
                )));
            }
        }
        match self.data.source {
            DataSource::Idx => {
                for p in self.data.idx_paths()? {
                    if !p.is_file() {
                        return Err(Error::Config(format!(
                            "data file {} does not exist",
                            p.display()
                        )));
                    }
                }
            }
            DataSource::Synthetic => {
                let (k, per, test_per, dims) = self.data.synthetic_params()?;
                if k < 2 || per == 0 || test_per == 0 || dims.contains(&0) {
                    return Err(Error::Config(
                        "synthetic data needs classes >= 2 and non-zero sizes".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
[data]
source = "synthetic"
classes = 3
per_class = 20
test_per_class = 10
dims = [1, 4, 4]

[partition]
scheme = "iid"
num_clients = 2

[training]
rounds = 2
batches_per_round = 3
batch_size = 8
learning_rate = 0.01
seeds = [1]

[[schemes]]
kind = "acp_sl"
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = RunConfig::from_toml_str(SYNTH, Path::new(".")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.bounds, RatioBounds::default());
        assert_eq!(cfg.training.total_iterations(), 6);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string(), Path::new(".")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = SYNTH.replace("rounds = 2", "rounds = 2\nepochs = 4");
        assert!(RunConfig::from_toml_str(&text, Path::new(".")).is_err());
        let text = SYNTH.replace("kind = \"acp_sl\"", "kind = \"acp_sl\"\nratio = 0.5");
        assert!(RunConfig::from_toml_str(&text, Path::new(".")).is_err());
    }

    #[test]
    fn inverted_bounds_name_the_invariant() {
        let text = format!("{SYNTH}\n[bounds]\np_min = 0.8\np_base = 0.7\np_max = 0.6\n");
        let cfg = RunConfig::from_toml_str(&text, Path::new(".")).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("RatioBounds"), "{err}");
    }

    #[test]
    fn missing_idx_files_fail_validation() {
        let text = r#"
[data]
source = "idx"
train_images = "nope-images"
train_labels = "nope-labels"
test_images = "nope-images"
test_labels = "nope-labels"

[partition]
scheme = "dirichlet"
num_clients = 5

[training]
rounds = 1
batches_per_round = 1
batch_size = 4
learning_rate = 0.1
seeds = [1]

[[schemes]]
kind = "standard"
"#;
        let cfg = RunConfig::from_toml_str(text, Path::new("/nonexistent")).unwrap();
        assert_eq!(
            cfg.data.train_images.as_deref(),
            Some(Path::new("/nonexistent/nope-images"))
        );
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_rounds_rejected() {
        let text = SYNTH.replace("rounds = 2", "rounds = 0");
        let cfg = RunConfig::from_toml_str(&text, Path::new(".")).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn duplicate_scheme_labels_rejected() {
        let text = format!("{SYNTH}\n[[schemes]]\nkind = \"acp_sl\"\n");
        let cfg = RunConfig::from_toml_str(&text, Path::new(".")).unwrap();
        assert!(cfg.validate().is_err());
    }
}
