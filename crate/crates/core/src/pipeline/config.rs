use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::synth::{SynthConfig, ANCHOR};
use crate::error::{Error, Result};
use crate::extractor::{ConvBlock, NetworkSpec, PenultimateActivation, TrainConfig};
use crate::tabular::{Algorithm, ParamSpace, PredictorSet, SearchOptions};

/// External inputs. When all are absent the `synth` stage provides them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub cohort: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub raster: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { n_train: 800, n_test: 175 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SepConfig {
    pub anchor_variable: String,
    pub anchor_category: String,
    pub histogram_bins: usize,
}

impl Default for SepConfig {
    fn default() -> Self {
        SepConfig { anchor_variable: ANCHOR.0.into(), anchor_category: ANCHOR.1.into(), histogram_bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub clip_low: f64,
    pub clip_high: f64,
    pub buffer_small_m: f64,
    pub buffer_large_m: f64,
    /// Side of the square network input.
    pub image_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { clip_low: 1.0, clip_high: 99.0, buffer_small_m: 25.0, buffer_large_m: 100.0, image_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub conv: Vec<ConvBlock>,
    pub dense: Vec<usize>,
    pub penultimate: PenultimateActivation,
    pub train: TrainConfig,
    /// Add random 90 degree turns when augmenting satellite crops.
    pub satellite_right_angles: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        let net = NetworkSpec::default();
        ExtractorConfig {
            conv: net.conv,
            dense: net.dense,
            penultimate: net.penultimate,
            train: TrainConfig::default(),
            satellite_right_angles: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffTheShelfConfig {
    pub enabled: bool,
    pub conv: Vec<usize>,
    pub width: usize,
    pub algorithm: Algorithm,
}

impl Default for OffTheShelfConfig {
    fn default() -> Self {
        OffTheShelfConfig { enabled: false, conv: vec![8, 16, 32], width: 512, algorithm: Algorithm::RandomForest }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub space: ParamSpace,
    pub n_iter: usize,
    pub k_folds: usize,
}

impl SearchConfig {
    pub fn options(&self, select_features: bool) -> SearchOptions {
        SearchOptions { n_iter: self.n_iter, k_folds: self.k_folds, select_features }
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        let o = SearchOptions::default();
        SearchConfig { space: ParamSpace::default(), n_iter: o.n_iter, k_folds: o.k_folds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub predictor_sets: Vec<PredictorSet>,
    pub algorithms: Vec<Algorithm>,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig { predictor_sets: PredictorSet::FIXED.to_vec(), algorithms: Algorithm::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapConfig {
    /// Explain this algorithm's complete model instead of the most accurate
    /// tree-based one.
    pub algorithm: Option<Algorithm>,
    /// Split whose ranking picks the reduced set's indoor type.
    pub ranking_split: Split,
    pub top_bottom_split: Split,
    pub top_n: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig { algorithm: None, ranking_split: Split::Train, top_bottom_split: Split::Test, top_n: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceConfig {
    pub algorithm: Algorithm,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        ReduceConfig { algorithm: Algorithm::RandomForest }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub inputs: InputPaths,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub sep: SepConfig,
    pub preprocess: PreprocessConfig,
    pub extractor: ExtractorConfig,
    pub offtheshelf: OffTheShelfConfig,
    pub search: SearchConfig,
    pub models: ModelsConfig,
    pub shap: ShapConfig,
    pub reduce: ReduceConfig,
}

const KEYS: &[&str] = &[
    "output_dir", "seed", "inputs", "synth", "split", "sep", "preprocess", "extractor", "offtheshelf", "search",
    "models", "shap", "reduce",
];

fn section<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, default: T, errors: &mut Vec<String>) -> T {
    match obj.get(key) {
        None => default,
        Some(v) => serde_json::from_value(v.clone()).unwrap_or_else(|e| {
            errors.push(format!("{key}: {e}"));
            default
        }),
    }
}

impl PipelineConfig {
    /// Defaults everywhere except the two required keys.
    pub fn new(output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        PipelineConfig {
            output_dir: output_dir.into(),
            seed,
            inputs: InputPaths::default(),
            synth: SynthConfig::default(),
            split: SplitConfig::default(),
            sep: SepConfig::default(),
            preprocess: PreprocessConfig::default(),
            extractor: ExtractorConfig::default(),
            offtheshelf: OffTheShelfConfig::default(),
            search: SearchConfig::default(),
            models: ModelsConfig::default(),
            shap: ShapConfig::default(),
            reduce: ReduceConfig::default(),
        }
    }

    /// Parse a JSON document, reporting every problem found. Relative input
    /// paths and `output_dir` resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
        let Value::Object(obj) = value else {
            return Err(Error::Config(vec!["top level must be a JSON object".into()]));
        };
        let mut errors = Vec::new();
        for key in obj.keys() {
            if !KEYS.contains(&key.as_str()) {
                errors.push(format!("unknown key `{key}`"));
            }
        }
        let output_dir = match obj.get("output_dir") {
            Some(Value::String(s)) if !s.is_empty() => base.join(s),
            Some(_) => {
                errors.push("output_dir must be a non-empty string".into());
                PathBuf::new()
            }
            None => {
                errors.push("output_dir is required".into());
                PathBuf::new()
            }
        };
        let seed = match obj.get("seed") {
            Some(v) => v.as_u64().unwrap_or_else(|| {
                errors.push(format!("seed must be a non-negative integer, got {v}"));
                0
            }),
            None => {
                errors.push("seed is required".into());
                0
            }
        };
        let mut cfg = PipelineConfig::new(output_dir, seed);
        cfg.inputs = section(&obj, "inputs", cfg.inputs, &mut errors);
        cfg.synth = section(&obj, "synth", cfg.synth, &mut errors);
        cfg.split = section(&obj, "split", cfg.split, &mut errors);
        cfg.sep = section(&obj, "sep", cfg.sep, &mut errors);
        cfg.preprocess = section(&obj, "preprocess", cfg.preprocess, &mut errors);
        cfg.extractor = section(&obj, "extractor", cfg.extractor, &mut errors);
        cfg.offtheshelf = section(&obj, "offtheshelf", cfg.offtheshelf, &mut errors);
        cfg.search = section(&obj, "search", cfg.search, &mut errors);
        cfg.models = section(&obj, "models", cfg.models, &mut errors);
        cfg.shap = section(&obj, "shap", cfg.shap, &mut errors);
        cfg.reduce = section(&obj, "reduce", cfg.reduce, &mut errors);
        for p in [&mut cfg.inputs.cohort, &mut cfg.inputs.manifest, &mut cfg.inputs.raster].into_iter().flatten() {
            *p = base.join(&*p);
        }
        errors.extend(cfg.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn uses_synthetic_inputs(&self) -> bool {
        self.inputs.cohort.is_none()
    }

    pub fn network_spec(&self, seed: u64) -> NetworkSpec {
        NetworkSpec {
            height: self.preprocess.image_size,
            width: self.preprocess.image_size,
            conv: self.extractor.conv.clone(),
            dense: self.extractor.dense.clone(),
            penultimate: self.extractor.penultimate,
            seed,
        }
    }

    /// Semantic checks beyond the schema.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let i = &self.inputs;
        match (&i.cohort, &i.manifest, &i.raster) {
            (None, None, None) => {
                if let Err(Error::Config(e)) = self.synth.validate() {
                    out.extend(e.into_iter().map(|m| format!("synth: {m}")));
                }
            }
            (Some(_), Some(_), Some(_)) => {}
            _ => out.push("inputs: give all of cohort, manifest and raster, or none".into()),
        }
        for (name, p) in [("cohort", &i.cohort), ("manifest", &i.manifest), ("raster", &i.raster)] {
            if let Some(p) = p {
                if !p.is_file() {
                    out.push(format!("inputs.{name}: {} does not exist", p.display()));
                }
            }
        }
        let cohort_size = match &i.cohort {
            None => Some(self.synth.n_households),
            Some(p) => csv::Reader::from_path(p).ok().map(|mut r| r.records().count()),
        };
        let s = &self.split;
        if s.n_train < 2 {
            out.push("split.n_train must be at least 2".into());
        }
        if let Some(n) = cohort_size {
            if s.n_train + s.n_test > n {
                out.push(format!("split: {} + {} households exceed the cohort of {n}", s.n_train, s.n_test));
            }
        }
        if self.sep.histogram_bins == 0 {
            out.push("sep.histogram_bins must be positive".into());
        }
        let p = &self.preprocess;
        if !(0.0 <= p.clip_low && p.clip_low < p.clip_high && p.clip_high <= 100.0) {
            out.push(format!("preprocess: need 0 <= clip_low < clip_high <= 100, got {} and {}", p.clip_low, p.clip_high));
        }
        if !(p.buffer_small_m > 0.0 && p.buffer_large_m > 0.0) {
            out.push("preprocess: buffers must be positive".into());
        }
        if p.image_size < 4 {
            out.push("preprocess.image_size must be at least 4".into());
        } else if let Err(e) = self.network_spec(0).layers() {
            out.push(format!("extractor: {e}"));
        }
        let t = &self.extractor.train;
        if t.epochs == 0 || t.batch_size == 0 {
            out.push("extractor.train: epochs and batch_size must be positive".into());
        }
        if !(t.learning_rate > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            out.push("extractor.train: need learning_rate > 0 and momentum in [0, 1)".into());
        }
        if self.offtheshelf.enabled && (self.offtheshelf.width == 0 || !self.offtheshelf.algorithm.is_tree_based()) {
            out.push("offtheshelf: width must be positive and the algorithm tree-based".into());
        }
        out.extend(self.search.space.problems().into_iter().map(|m| format!("search.space: {m}")));
        if self.search.n_iter == 0 || self.search.k_folds < 2 {
            out.push("search: need n_iter >= 1 and k_folds >= 2".into());
        }
        if self.models.predictor_sets.is_empty() || self.models.algorithms.is_empty() {
            out.push("models: predictor_sets and algorithms must be non-empty".into());
        }
        if !self.models.predictor_sets.contains(&PredictorSet::Complete)
            || !self.models.algorithms.iter().any(|a| a.is_tree_based())
        {
            out.push("models: explanation needs the complete set and a tree-based algorithm".into());
        }
        if let Some(a) = self.shap.algorithm {
            if !a.is_tree_based() || !self.models.algorithms.contains(&a) {
                out.push(format!("shap.algorithm: `{a}` must be a fitted tree-based algorithm"));
            }
        }
        if self.shap.top_n == 0 {
            out.push("shap.top_n must be positive".into());
        }
        out
    }
}

/// Read and validate a configuration file.
pub fn validate_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PipelineConfig::from_json(&text, path.parent().unwrap_or(Path::new(".")))
}
