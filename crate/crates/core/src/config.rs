//! TOML run configuration with field-level validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_image_dataset, split_meta, Augment, Dataset, GaussianMixture, ImageFormat, Normalization,
};
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::losses::MetaTarget;
use crate::meta::{InnerLoopConfig, Mode};
use crate::nn::{ClassifierSpec, ConvSpec, MetaNetConfig, DEFAULT_META_HIDDEN};
use crate::optim::{AdamConfig, SgdConfig};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Generated Gaussian mixture.
    #[default]
    Gaussian,
    /// Datasets previously written with `Dataset::save`.
    File,
    RawBinary,
    PngDir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Seed for data generation and the meta split; the run seed when unset.
    pub seed: Option<u64>,
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub separation: f64,
    pub spread: f64,
    pub meta_per_class: usize,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub image: Option<ImageFormat>,
    pub normalization: Normalization,
    pub augment: Augment,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Gaussian,
            seed: None,
            classes: 10,
            dim: 32,
            train_per_class: 500,
            eval_per_class: 100,
            separation: 3.0,
            spread: 0.3,
            meta_per_class: 10,
            train_path: None,
            eval_path: None,
            image: None,
            normalization: Normalization::default(),
            augment: Augment::None,
        }
    }
}

/// Training stream, meta set and evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub meta: Dataset,
    pub eval: Dataset,
}

impl Splits {
    /// Train and meta samples together, as used for teacher pre-training.
    pub fn full_train(&self) -> Result<Dataset> {
        let mut order: Vec<(u64, usize, bool)> = self
            .train
            .ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i, false))
            .chain(self.meta.ids().iter().enumerate().map(|(i, &id)| (id, i, true)))
            .collect();
        order.sort_unstable();
        let cols = self.train.feature_dim();
        let mut data = Vec::with_capacity(order.len() * cols);
        let mut labels = Vec::with_capacity(order.len());
        let mut ids = Vec::with_capacity(order.len());
        for (id, i, from_meta) in order {
            let src = if from_meta { &self.meta } else { &self.train };
            data.extend_from_slice(src.features().row(i));
            labels.push(src.labels()[i]);
            ids.push(id);
        }
        Dataset::with_ids(
            crate::autodiff::Tensor::new(vec![ids.len(), cols], data)?,
            labels,
            ids,
            self.train.class_count(),
            self.train.sample_shape().to_vec(),
        )
    }
}

impl DataConfig {
    fn required_path<'a>(&self, p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::config(format!("data.{field}"), "required for this data source"))
    }

    fn image_format(&self) -> Result<&ImageFormat> {
        self.image
            .as_ref()
            .ok_or_else(|| Error::config("data.image", "required for image sources"))
    }

    pub fn validate(&self) -> Result<()> {
        match self.source {
            DataSource::Gaussian => {
                if self.classes < 2 {
                    return Err(Error::config("data.classes", "need at least two classes"));
                }
                if self.dim == 0 {
                    return Err(Error::config("data.dim", "must be positive"));
                }
                if self.train_per_class == 0 || self.eval_per_class == 0 {
                    return Err(Error::config("data.train_per_class", "sample counts must be positive"));
                }
                if self.meta_per_class >= self.train_per_class {
                    return Err(Error::config(
                        "data.meta_per_class",
                        "must leave training samples in every class",
                    ));
                }
                if !(self.separation > 0.0 && self.separation.is_finite()) {
                    return Err(Error::config("data.separation", "must be positive"));
                }
                if !(self.spread >= 0.0 && self.spread.is_finite()) {
                    return Err(Error::config("data.spread", "must be non-negative"));
                }
            }
            DataSource::File => {
                self.required_path(&self.train_path, "train_path")?;
                self.required_path(&self.eval_path, "eval_path")?;
            }
            DataSource::RawBinary | DataSource::PngDir => {
                self.required_path(&self.train_path, "train_path")?;
                self.required_path(&self.eval_path, "eval_path")?;
                let f = self.image_format()?;
                f.validate()?;
                self.normalization.validate(f.channels)?;
            }
        }
        if let Augment::Flip = self.augment {
            if !matches!(self.source, DataSource::RawBinary | DataSource::PngDir) {
                return Err(Error::config("data.augment", "flip needs image samples"));
            }
        }
        Ok(())
    }

    /// Loads or generates the data and holds out the meta set.
    pub fn load(&self, run_seed: u64) -> Result<Splits> {
        let seed = self.seed.unwrap_or(run_seed);
        let (full, eval) = match self.source {
            DataSource::Gaussian => {
                let mix = GaussianMixture::new(self.classes, self.dim, self.separation, self.spread, seed)?;
                (
                    mix.sample(self.train_per_class, &mut stream(seed, "data.train"))?,
                    mix.sample(self.eval_per_class, &mut stream(seed, "data.eval"))?,
                )
            }
            DataSource::File => (
                Dataset::load(self.required_path(&self.train_path, "train_path")?)?,
                Dataset::load(self.required_path(&self.eval_path, "eval_path")?)?,
            ),
            DataSource::RawBinary | DataSource::PngDir => {
                let tag = if self.source == DataSource::RawBinary { "raw-binary" } else { "png-dir" };
                let f = self.image_format()?;
                (
                    load_image_dataset(self.required_path(&self.train_path, "train_path")?, tag, f, &self.normalization)?,
                    load_image_dataset(self.required_path(&self.eval_path, "eval_path")?, tag, f, &self.normalization)?,
                )
            }
        };
        if full.class_count() != eval.class_count() || full.sample_shape() != eval.sample_shape() {
            return Err(Error::config("data.eval_path", "evaluation data does not match the training data"));
        }
        self.augment.validate(full.sample_shape())?;
        let (train, meta) = split_meta(&full, self.meta_per_class, seed)?;
        Ok(Splits { train, meta, eval })
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.train_path, &mut self.eval_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Layer widths and feature tap of a classifier; input and class counts come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub feature_tap: usize,
    /// Convolution filters applied before the hidden layers; image data only.
    #[serde(default)]
    pub conv_filters: Option<Vec<usize>>,
}

impl ModelConfig {
    pub fn spec(&self, sample_shape: &[usize], classes: usize, field: &str) -> Result<ClassifierSpec> {
        let input_dim = sample_shape.iter().product();
        let conv = match &self.conv_filters {
            None => None,
            Some(filters) => match *sample_shape {
                [channels, height, width] => Some(ConvSpec {
                    channels,
                    height,
                    width,
                    filters: filters.clone(),
                }),
                _ => return Err(Error::config(format!("{field}.conv_filters"), "needs image data")),
            },
        };
        let spec = ClassifierSpec {
            input_dim,
            hidden_dims: self.hidden.clone(),
            class_count: classes,
            feature_tap: self.feature_tap,
            conv,
        };
        spec.validate().map_err(|e| match e {
            Error::Config { field: f, message } => Error::config(format!("{field}.{f}"), message),
            other => other,
        })?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub feature_tap: usize,
    #[serde(default)]
    pub conv_filters: Option<Vec<usize>>,
    /// Pre-training epochs; the run's `epochs` when unset.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub optimizer: SgdConfig,
}

impl TeacherConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden.clone(),
            feature_tap: self.feature_tap,
            conv_filters: self.conv_filters.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Weights lie in `[1 - range, 1 + range]`.
    pub range: f64,
    pub hidden: usize,
    pub interval: usize,
    pub pseudo_lr: Option<f64>,
    pub target: MetaTarget,
    pub optimizer: AdamConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            range: 0.5,
            hidden: DEFAULT_META_HIDDEN,
            interval: 100,
            pseudo_lr: None,
            target: MetaTarget::TrueClass,
            optimizer: AdamConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn net(&self, classes: usize) -> MetaNetConfig {
        MetaNetConfig {
            class_count: classes,
            hidden: self.hidden,
            range: self.range,
        }
    }

    pub fn inner(&self) -> InnerLoopConfig {
        InnerLoopConfig {
            interval: self.interval,
            optimizer: self.optimizer.clone(),
            pseudo_lr: self.pseudo_lr,
            target: self.target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.range) {
            return Err(Error::config("meta.range", "must lie in [0, 1]"));
        }
        if self.hidden == 0 {
            return Err(Error::config("meta.hidden", "must be positive"));
        }
        self.inner().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: ModelConfig,
    pub optimizer: SgdConfig,
    pub meta: MetaConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Hkd,
            epochs: 60,
            batch_size: 64,
            temperature: 1.0,
            out_dir: None,
            data: DataConfig::default(),
            teacher: TeacherConfig {
                hidden: vec![256, 256],
                feature_tap: 1,
                conv_filters: None,
                epochs: Some(30),
                optimizer: SgdConfig::default(),
            },
            student: ModelConfig {
                hidden: vec![32],
                feature_tap: 0,
                conv_filters: None,
            },
            optimizer: SgdConfig::default(),
            meta: MetaConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    let field = e
        .span()
        .map(|s| format!("bytes {}..{}", s.start, s.end))
        .unwrap_or_else(|| "document".to_string());
    Error::config(field, e.message().to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`; returns the config and the verbatim text.
    /// Relative data paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.data.resolve_paths(dir);
        }
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        self.data.validate()?;
        self.optimizer.validate("optimizer")?;
        self.teacher.optimizer.validate("teacher.optimizer")?;
        self.meta.validate()?;
        self.ensemble.validate()?;
        if self.data.source == DataSource::Gaussian {
            let shape = [self.data.dim];
            self.teacher.model().spec(&shape, self.data.classes, "teacher")?;
            self.student.spec(&shape, self.data.classes, "student")?;
        }
        Ok(())
    }

    pub fn teacher_epochs(&self) -> usize {
        self.teacher.epochs.unwrap_or(self.epochs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_toy_setting() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.epochs, 60);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.meta.interval, 100);
        assert_eq!(cfg.meta.range, 0.5);
        assert_eq!(cfg.ensemble, EnsembleConfig::default());
        assert_eq!(cfg.optimizer.lr, 0.05);
        assert_eq!(cfg.optimizer.weight_decay, 5e-4);
        assert_eq!(cfg.meta.optimizer.lr, 1e-3);
    }

    #[test]
    fn parses_sections_and_round_trips() {
        let text = r#"
            seed = 7
            mode = "un-dy"
            epochs = 3
            [data]
            classes = 3
            dim = 4
            train_per_class = 20
            eval_per_class = 5
            meta_per_class = 2
            augment = { kind = "jitter", std = 0.05 }
            [teacher]
            hidden = [16, 16]
            feature_tap = 1
            [student]
            hidden = [4]
            [optimizer]
            milestones = [2]
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.mode, Mode::UnDy);
        assert_eq!(cfg.data.augment, Augment::Jitter { std: 0.05 });
        assert_eq!(cfg.optimizer.milestones, vec![2]);
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn field_level_errors() {
        let err = RunConfig::from_toml_str("batch_size = 0").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "batch_size"), "{err}");
        let err = RunConfig::from_toml_str("[optimizer]\nlr = -1.0").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "optimizer.lr"), "{err}");
        let err = RunConfig::from_toml_str("[student]\nhidden = [8]\nfeature_tap = 3").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "student.feature_tap"), "{err}");
        let err = RunConfig::from_toml_str("mode = \"fancy\"").unwrap_err();
        assert!(err.to_string().contains("fancy"), "{err}");
        assert!(RunConfig::from_toml_str("unknown_key = 1").is_err());
        let err = RunConfig::from_toml_str("[data]\nsource = \"raw-binary\"").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "data.train_path"), "{err}");
    }

    #[test]
    fn gaussian_splits_are_disjoint() {
        let cfg = RunConfig::from_toml_str(
            "[data]\nclasses = 3\ndim = 4\ntrain_per_class = 20\neval_per_class = 5\nmeta_per_class = 2",
        )
        .unwrap();
        let s = cfg.data.load(1).unwrap();
        assert_eq!(s.meta.len(), 6);
        assert_eq!(s.train.len(), 54);
        assert_eq!(s.eval.len(), 15);
        let full = s.full_train().unwrap();
        assert_eq!(full.ids(), (0..60).collect::<Vec<u64>>().as_slice());
    }
}
