//! Run configuration: one TOML file holding model, training, data and
//! output settings, with dotted-key overrides from the command line.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dsafdet::data::synthetic::{generate, SyntheticSpec};
use dsafdet::data::{open_split, AnnotationFormat, Dataset};
use dsafdet::model::{Ablation, ModelConfig, MAX_STRIDE};
use dsafdet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// File name of the resolved configuration written next to run outputs.
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; see the README for the expected layouts.
    pub root: Option<PathBuf>,
    pub format: AnnotationFormat,
    pub train_split: String,
    /// Empty disables validation during training.
    pub val_split: String,
    /// Generates colored-rectangle images in memory instead of reading
    /// `root`. Every split is the same generated set.
    pub synthetic: Option<SyntheticSpec>,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            format: AnnotationFormat::YoloTxt,
            train_split: "train".into(),
            val_split: "val".into(),
            synthetic: None,
            synthetic_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            precision: Precision::F32,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Command-line settings layered over the file, in order of precedence.
#[derive(Clone, Debug, Default)]
pub struct Layers {
    pub overrides: Vec<String>,
    pub ablation: Option<Ablation>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `section.key=value` to a parsed file.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override {spec:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("override {spec:?} has an empty key segment")));
    }
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("override {spec:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `layers` and
    /// validates the result.
    pub fn load(path: Option<&Path>, layers: &Layers) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("reading config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::usage(format!("parsing config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in &layers.overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg = RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        if let Some(a) = layers.ablation {
            cfg.model = cfg.model.with_ablation(a);
        }
        if let Some(s) = layers.seed {
            cfg.train.seed = s;
        }
        if let Some(o) = &layers.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.train.lr > 0.0) {
            return Err(CliError::usage(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        if !(self.train.input_size as usize).is_multiple_of(MAX_STRIDE) {
            return Err(CliError::usage(format!(
                "train.input_size must be a multiple of {MAX_STRIDE}, got {}",
                self.train.input_size
            )));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
            if s.num_classes != self.model.num_classes {
                return Err(CliError::usage(format!(
                    "data.synthetic.num_classes {} differs from model.num_classes {}",
                    s.num_classes, self.model.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::usage(format!("creating {}: {e}", self.out.display())))?;
        let path = self.out.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::usage(format!("writing {}: {e}", path.display())))?;
        Ok(path)
    }

    /// Opens a split at the configured input size and checks its classes
    /// against the model.
    pub fn open_data(&self, split: &str) -> Result<Arc<Dataset>, CliError> {
        let ds = match (&self.data.synthetic, &self.data.root) {
            (Some(spec), _) => {
                let (index, images) = generate(spec, self.data.synthetic_seed);
                Dataset::from_memory(index, images, self.train.input_size)
            }
            (None, Some(root)) => open_split(root, split, self.data.format, self.train.input_size)?,
            (None, None) => return Err(CliError::usage("no dataset configured: set data.root or data.synthetic")),
        };
        if ds.index.num_classes() != self.model.num_classes {
            return Err(CliError::usage(format!(
                "dataset split {split:?} has {} classes but model.num_classes is {}",
                ds.index.num_classes(),
                self.model.num_classes
            )));
        }
        if ds.is_empty() {
            return Err(CliError::usage(format!("dataset split {split:?} has no images")));
        }
        Ok(Arc::new(ds))
    }

    /// Split used when evaluating without an explicit choice.
    pub fn eval_split(&self) -> &str {
        if self.data.val_split.is_empty() {
            &self.data.train_split
        } else {
            &self.data.val_split
        }
    }

    /// Class names without reading image files: generated names, the
    /// dataset's names when it is reachable, or numbered placeholders.
    pub fn class_names(&self) -> Vec<String> {
        if self.data.synthetic.is_some() {
            return dsafdet::data::synthetic::class_names(self.model.num_classes);
        }
        if let Some(root) = &self.data.root {
            if let Ok(idx) = dsafdet::data::load_split(root, &self.data.train_split, self.data.format) {
                if idx.num_classes() == self.model.num_classes {
                    return idx.class_names;
                }
            }
        }
        (0..self.model.num_classes).map(|i| format!("class{i}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_scalars_and_create_tables() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.lr=0.01").unwrap();
        apply_override(&mut t, "train.augment.enabled=false").unwrap();
        apply_override(&mut t, "data.root=/tmp/x").unwrap();
        apply_override(&mut t, "model.stage_channels=[8, 8, 16, 16, 16]").unwrap();
        assert_eq!(t["train"]["lr"].as_float(), Some(0.01));
        assert_eq!(t["train"]["augment"]["enabled"].as_bool(), Some(false));
        assert_eq!(t["data"]["root"].as_str(), Some("/tmp/x"));
        assert_eq!(t["model"]["stage_channels"].as_array().unwrap().len(), 5);
        assert!(apply_override(&mut t, "train.lr").is_err());
        assert!(apply_override(&mut t, "train..lr=1").is_err());
        assert!(apply_override(&mut t, "train.lr.x=1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let layers = Layers {
            overrides: vec!["train.learning_rate=0.1".into()],
            ..Layers::default()
        };
        let err = RunConfig::load(None, &layers).unwrap_err();
        assert_eq!(err.code, crate::EXIT_USAGE);
        assert!(err.msg.contains("learning_rate"), "{}", err.msg);
    }

    #[test]
    fn flags_take_precedence() {
        let layers = Layers {
            overrides: vec!["train.seed=3".into(), "out=\"a\"".into()],
            ablation: Some(Ablation::NoSd),
            seed: Some(9),
            out: Some("b".into()),
        };
        let cfg = RunConfig::load(None, &layers).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.out, PathBuf::from("b"));
        assert_eq!(cfg.model.ablation(), Ablation::NoSd);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.data.synthetic = Some(SyntheticSpec {
            num_classes: 6,
            ..SyntheticSpec::default()
        });
        cfg.train.workers = Some(2);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let plain = RunConfig::default();
        assert_eq!(toml::from_str::<RunConfig>(&plain.to_toml()).unwrap(), plain);
    }

    #[test]
    fn non_positive_learning_rate_is_rejected() {
        for lr in ["0", "-0.1"] {
            let layers = Layers {
                overrides: vec![format!("train.lr={lr}")],
                ..Layers::default()
            };
            assert_eq!(RunConfig::load(None, &layers).unwrap_err().code, crate::EXIT_USAGE);
        }
    }
}
