//! Experiment configuration: an INI file with sections, overridable from the command line.
//!
//! ```ini
//! [experiment]
//! seeds = 0, 1, 2
//! lambda = 0, 1, 2          ; grid for `sweep` and `geometry`; `auto` = max‖x‖ + 1
//! output_dir = runs/demo
//!
//! [arch]
//! hidden = 256, 256
//! activation = htanh        ; relu | htanh | sign
//! binary = false            ; sign(W) in hidden layers
//! batch_norm = true
//! binary_output = false
//!
//! [data]
//! source = blobs            ; blobs | idx
//! classes = 10
//! dim = 8
//! embed_dim = 784
//! per_class = 300
//! spread = 0.5
//! radius = 3
//! clusters = 5
//! seed = 7
//! val_fraction = 0.25
//! standardize = false
//!
//! [init]
//! weights = he              ; he | glorot | unit-norm-rows
//! lambda = 0                ; λ used by `train`
//! apply_bias_to = hidden    ; hidden | all
//! bias_target = bn-shift    ; linear | bn-shift
//!
//! [optim]
//! lr = 0.01
//! momentum = 0.9
//! epochs = 5
//! batch_size = 32
//! clip_binary = true
//! schedule = constant       ; constant | step:FACTOR:EVERY
//!
//! [audit]
//! every = 0
//! all_layers = false
//!
//! [gradcheck]
//! probes = 200
//! batch_size = 8
//! threshold = 1e-5
//! ```
//!
//! Unknown sections or keys are rejected. Relative IDX paths resolve against
//! the config file's directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::activations::ActivationKind;
use crate::data::{self, BlobsSpec, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::init::{BiasScope, BiasTarget, InitConfig, WeightScheme};
use crate::network::ArchSpec;
use crate::train::{AuditConfig, LrSchedule, OptimizerConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "BIASGEOM_OUT";
pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    pub binary: bool,
    pub batch_norm: bool,
    pub binary_output: bool,
    /// Checked against the dataset when given.
    pub input: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            activation: ActivationKind::HTanh,
            binary: false,
            batch_norm: true,
            binary_output: false,
            input: None,
        }
    }
}

impl ArchConfig {
    /// Named presets selecting the activation family: `relu`, `htanh`, `binary`.
    pub fn with_preset(&self, name: &str) -> Result<ArchConfig> {
        let mut out = self.clone();
        match name.trim().to_ascii_lowercase().as_str() {
            "relu" => {
                out.activation = ActivationKind::ReLU;
                out.binary = false;
            }
            "htanh" => {
                out.activation = ActivationKind::HTanh;
                out.binary = false;
            }
            "binary" | "bnn" => {
                out.activation = ActivationKind::SignSTE;
                out.binary = true;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown architecture preset `{other}`"
                )))
            }
        }
        Ok(out)
    }

    pub fn build(&self, input: usize, classes: usize) -> Result<ArchSpec> {
        if let Some(expected) = self.input {
            if expected != input {
                return Err(Error::config(format!(
                    "architecture input {expected} does not match dataset features {input}"
                )));
            }
        }
        let mut arch = ArchSpec::mlp(
            input,
            &self.hidden,
            classes,
            self.activation,
            self.binary,
            self.batch_norm,
        );
        arch.binary_output = self.binary_output;
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs(BlobsSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Separate validation files; otherwise the training files are split.
        val: Option<(PathBuf, PathBuf)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub val_fraction: f64,
    pub standardize: bool,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let mut blobs = BlobsSpec::new(4, 2, 200, 0.5, 0);
        blobs.clusters_per_class = 1;
        Self {
            source: DataSource::Blobs(blobs),
            val_fraction: 0.25,
            standardize: true,
            split_seed: 0,
        }
    }
}

impl DataConfig {
    /// Loads or generates the data and returns `(train, val)`; standardization
    /// statistics come from the training split only.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, val) = match &self.source {
            DataSource::Blobs(spec) => {
                spec.generate()?.split(self.val_fraction, self.split_seed)?
            }
            DataSource::Idx {
                images,
                labels,
                val,
            } => {
                let train = data::load_idx(images, labels)?;
                match val {
                    Some((vi, vl)) => {
                        let mut val = data::load_idx(vi, vl)?;
                        let classes = train.n_classes.max(val.n_classes);
                        val.n_classes = classes;
                        let mut train = train;
                        train.n_classes = classes;
                        (train, val)
                    }
                    None => train.split(self.val_fraction, self.split_seed)?,
                }
            }
        };
        if self.standardize {
            let s = Standardizer::fit(&train);
            Ok((s.apply(&train), s.apply(&val)))
        } else {
            Ok((train, val))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSpec {
    Value(f64),
    /// `max ‖x‖ + 1` over the training inputs.
    MaxNormPlusOne,
}

impl LambdaSpec {
    pub fn resolve(self, train: &Dataset) -> f64 {
        match self {
            LambdaSpec::Value(v) => v,
            LambdaSpec::MaxNormPlusOne => train.max_norm() + 1.0,
        }
    }
}

impl FromStr for LambdaSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LambdaSpec::MaxNormPlusOne);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::config(format!("invalid lambda `{s}`")))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be non-negative, got {s}"
            )));
        }
        Ok(LambdaSpec::Value(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSettings {
    pub probes: usize,
    pub batch_size: usize,
    pub threshold: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            probes: 200,
            batch_size: 8,
            threshold: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub init: InitConfig,
    pub optim: OptimizerConfig,
    pub audit: AuditConfig,
    pub gradcheck: GradcheckSettings,
    pub lambda_grid: Vec<LambdaSpec>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            data: DataConfig::default(),
            init: InitConfig {
                bias_target: BiasTarget::BatchNormShift,
                ..InitConfig::default()
            },
            optim: OptimizerConfig::default(),
            audit: AuditConfig::default(),
            gradcheck: GradcheckSettings::default(),
            lambda_grid: vec![LambdaSpec::Value(0.0)],
            seeds: vec![0],
            output_dir: None,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub lambdas: Vec<LambdaSpec>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub arch: Option<String>,
}

struct Section<'a> {
    name: &'static str,
    values: HashMap<&'a str, &'a str>,
}

impl<'a> Section<'a> {
    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.values.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => {
                raw.trim().parse().map(Some).map_err(|_| {
                    Error::config(format!("[{}] {key}: cannot parse `{raw}`", self.name))
                })
            }
        }
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| {
                        Error::config(format!("[{}] {key}: cannot parse `{s}`", self.name))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn finish(self) -> Result<()> {
        let mut keys: Vec<&&str> = self.values.keys().collect();
        keys.sort();
        match keys.first() {
            Some(k) => Err(Error::config(format!("[{}] unknown key `{k}`", self.name))),
            None => Ok(()),
        }
    }
}

fn parse_bool(raw: &str) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(Error::config(format!("invalid boolean `{other}`"))),
    }
}

fn parse_schedule(raw: &str) -> Result<LrSchedule> {
    let raw = raw.trim();
    if raw.eq_ignore_ascii_case("constant") {
        return Ok(LrSchedule::Constant);
    }
    let parts: Vec<&str> = raw.split(':').collect();
    if let ["step", factor, every] = parts.as_slice() {
        let factor = factor
            .parse()
            .map_err(|_| Error::config(format!("invalid decay factor in `{raw}`")))?;
        let every = every
            .parse()
            .map_err(|_| Error::config(format!("invalid decay period in `{raw}`")))?;
        return Ok(LrSchedule::StepDecay { factor, every });
    }
    Err(Error::config(format!(
        "invalid schedule `{raw}` (constant | step:FACTOR:EVERY)"
    )))
}

const SECTIONS: [&str; 8] = [
    "experiment",
    "arch",
    "data",
    "init",
    "optim",
    "audit",
    "gradcheck",
    "",
];

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    /// Parses INI text; `base_dir` anchors relative file paths.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for (name, props) in ini.iter() {
            let name = name.unwrap_or("");
            if !SECTIONS.contains(&name) {
                return Err(Error::config(format!("unknown section [{name}]")));
            }
            if name.is_empty() && !props.is_empty() {
                return Err(Error::config("keys must appear inside a section"));
            }
        }
        let section = |name: &'static str| Section {
            name,
            values: ini
                .section(Some(name))
                .map(|p| p.iter().collect())
                .unwrap_or_default(),
        };
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p.trim());
            match base_dir {
                Some(base) if p.is_relative() => base.join(p),
                _ => p,
            }
        };

        let mut cfg = ExperimentConfig::default();

        let mut s = section("experiment");
        if let Some(seeds) = s.list("seeds")? {
            cfg.seeds = seeds;
        }
        if let Some(grid) = s.list("lambda")? {
            cfg.lambda_grid = grid;
        }
        if let Some(dir) = s.take("output_dir") {
            cfg.output_dir = Some(PathBuf::from(dir.trim()));
        }
        s.finish()?;

        let mut s = section("arch");
        if let Some(hidden) = s.list("hidden")? {
            cfg.arch.hidden = hidden;
        }
        if let Some(a) = s.take("activation") {
            cfg.arch.activation = a.parse()?;
        }
        if let Some(b) = s.take("binary") {
            cfg.arch.binary = parse_bool(b)?;
        }
        if let Some(b) = s.take("batch_norm") {
            cfg.arch.batch_norm = parse_bool(b)?;
        }
        if let Some(b) = s.take("binary_output") {
            cfg.arch.binary_output = parse_bool(b)?;
        }
        cfg.arch.input = s.parse("input")?;
        s.finish()?;

        let mut s = section("data");
        let source = s
            .take("source")
            .unwrap_or("blobs")
            .trim()
            .to_ascii_lowercase();
        cfg.data.source = match source.as_str() {
            "blobs" => {
                let DataSource::Blobs(mut spec) = DataConfig::default().source else {
                    unreachable!()
                };
                spec.n_classes = s.parse("classes")?.unwrap_or(spec.n_classes);
                spec.dim = s.parse("dim")?.unwrap_or(spec.dim);
                spec.per_class = s.parse("per_class")?.unwrap_or(spec.per_class);
                spec.spread = s.parse("spread")?.unwrap_or(spec.spread);
                spec.radius = s.parse("radius")?.unwrap_or(spec.radius);
                spec.clusters_per_class = s.parse("clusters")?.unwrap_or(spec.clusters_per_class);
                spec.embed_dim = s.parse("embed_dim")?;
                spec.seed = s.parse("seed")?.unwrap_or(spec.seed);
                DataSource::Blobs(spec)
            }
            "idx" => {
                let images = s
                    .take("images")
                    .ok_or_else(|| Error::config("[data] idx source needs `images`"))?;
                let labels = s
                    .take("labels")
                    .ok_or_else(|| Error::config("[data] idx source needs `labels`"))?;
                let val = match (s.take("val_images"), s.take("val_labels")) {
                    (Some(i), Some(l)) => Some((resolve(i), resolve(l))),
                    (None, None) => None,
                    _ => return Err(Error::config("[data] give both val_images and val_labels")),
                };
                DataSource::Idx {
                    images: resolve(images),
                    labels: resolve(labels),
                    val,
                }
            }
            other => return Err(Error::config(format!("[data] unknown source `{other}`"))),
        };
        cfg.data.val_fraction = s.parse("val_fraction")?.unwrap_or(cfg.data.val_fraction);
        if let Some(b) = s.take("standardize") {
            cfg.data.standardize = parse_bool(b)?;
        }
        cfg.data.split_seed = s.parse("split_seed")?.unwrap_or(cfg.data.split_seed);
        s.finish()?;

        let mut s = section("init");
        if let Some(w) = s.take("weights") {
            cfg.init.weight_scheme = w.parse::<WeightScheme>()?;
        }
        if let Some(l) = s.take("lambda") {
            match l.parse::<LambdaSpec>()? {
                LambdaSpec::Value(v) => cfg.init.bias_lambda = v,
                LambdaSpec::MaxNormPlusOne => {
                    return Err(Error::config("[init] lambda must be a number"));
                }
            }
        }
        if let Some(a) = s.take("apply_bias_to") {
            cfg.init.apply_bias_to = a.parse::<BiasScope>()?;
        }
        if let Some(t) = s.take("bias_target") {
            cfg.init.bias_target = t.parse::<BiasTarget>()?;
        }
        s.finish()?;

        let mut s = section("optim");
        cfg.optim.learning_rate = s.parse("lr")?.unwrap_or(cfg.optim.learning_rate);
        cfg.optim.momentum = s.parse("momentum")?.unwrap_or(cfg.optim.momentum);
        cfg.optim.epochs = s.parse("epochs")?.unwrap_or(cfg.optim.epochs);
        cfg.optim.batch_size = s.parse("batch_size")?.unwrap_or(cfg.optim.batch_size);
        if let Some(b) = s.take("clip_binary") {
            cfg.optim.clip_binary_weights = parse_bool(b)?;
        }
        if let Some(sched) = s.take("schedule") {
            cfg.optim.lr_schedule = parse_schedule(sched)?;
        }
        s.finish()?;

        let mut s = section("audit");
        cfg.audit.every = s.parse("every")?.unwrap_or(0);
        if let Some(b) = s.take("all_layers") {
            cfg.audit.all_layers = parse_bool(b)?;
        }
        s.finish()?;

        let mut s = section("gradcheck");
        cfg.gradcheck.probes = s.parse("probes")?.unwrap_or(cfg.gradcheck.probes);
        cfg.gradcheck.batch_size = s.parse("batch_size")?.unwrap_or(cfg.gradcheck.batch_size);
        cfg.gradcheck.threshold = s.parse("threshold")?.unwrap_or(cfg.gradcheck.threshold);
        s.finish()?;

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if !o.lambdas.is_empty() {
            self.lambda_grid = o.lambdas.clone();
        }
        if let Some(out) = &o.out {
            self.output_dir = Some(out.clone());
        }
        if let Some(e) = o.epochs {
            self.optim.epochs = e;
        }
        if let Some(a) = &o.arch {
            self.arch = self.arch.with_preset(a)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.arch.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        self.init
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        self.optim.validate()?;
        if self.gradcheck.probes == 0 {
            return Err(Error::config("gradcheck needs at least one probe"));
        }
        Ok(())
    }

    /// `--out`, then the config file, then `$BIASGEOM_OUT`, then `runs`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = "
[experiment]
seeds = 3, 4
lambda = 0, 2.5, auto
output_dir = out/x

[arch]
hidden = 16, 8
activation = sign
binary = true
batch_norm = true

[data]
source = blobs
classes = 3
dim = 4
embed_dim = 10
per_class = 20
spread = 0.3
clusters = 2
seed = 9
val_fraction = 0.2
standardize = false

[init]
weights = unit-norm-rows
lambda = 1.5
apply_bias_to = all
bias_target = linear

[optim]
lr = 0.05
momentum = 0.5
epochs = 7
batch_size = 16
clip_binary = false
schedule = step:0.5:3

[audit]
every = 2
all_layers = true

[gradcheck]
probes = 20
";

    #[test]
    fn parses_every_section() {
        let cfg = ExperimentConfig::parse(FULL, None).unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(
            cfg.lambda_grid,
            vec![
                LambdaSpec::Value(0.0),
                LambdaSpec::Value(2.5),
                LambdaSpec::MaxNormPlusOne
            ]
        );
        assert_eq!(cfg.arch.hidden, vec![16, 8]);
        assert_eq!(cfg.arch.activation, ActivationKind::SignSTE);
        assert!(cfg.arch.binary);
        let DataSource::Blobs(spec) = &cfg.data.source else {
            panic!()
        };
        assert_eq!(spec.embed_dim, Some(10));
        assert_eq!(spec.clusters_per_class, 2);
        assert_eq!(cfg.init.weight_scheme, WeightScheme::UnitNormRows);
        assert_eq!(cfg.init.bias_lambda, 1.5);
        assert_eq!(cfg.init.apply_bias_to, BiasScope::AllLayers);
        assert_eq!(cfg.init.bias_target, BiasTarget::Linear);
        assert_eq!(
            cfg.optim.lr_schedule,
            LrSchedule::StepDecay {
                factor: 0.5,
                every: 3
            }
        );
        assert!(!cfg.optim.clip_binary_weights);
        assert_eq!(
            cfg.audit,
            AuditConfig {
                every: 2,
                all_layers: true
            }
        );
        assert_eq!(cfg.gradcheck.probes, 20);
        let (train, val) = cfg.data.load().unwrap();
        assert_eq!(train.features(), 10);
        assert_eq!(train.len() + val.len(), 60);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::parse("[arch]\nwidth = 3\n", None).is_err());
        assert!(ExperimentConfig::parse("[bogus]\n", None).is_err());
        assert!(ExperimentConfig::parse("[optim]\nlr = fast\n", None).is_err());
        assert!(ExperimentConfig::parse("[optim]\nbatch_size = 1\n", None).is_err());
        assert!(ExperimentConfig::parse("[init]\nlambda = -1\n", None).is_err());
        assert!(ExperimentConfig::parse("[experiment]\nlambda = 1, -2\n", None).is_err());
        assert!(ExperimentConfig::parse("stray = 1\n", None).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::parse(FULL, None).unwrap();
        cfg.apply(&Overrides {
            seeds: vec![11],
            lambdas: vec![LambdaSpec::Value(1.0)],
            out: Some(PathBuf::from("elsewhere")),
            epochs: Some(2),
            arch: Some("relu".into()),
        })
        .unwrap();
        assert_eq!(cfg.seeds, vec![11]);
        assert_eq!(cfg.lambda_grid, vec![LambdaSpec::Value(1.0)]);
        assert_eq!(cfg.resolved_output_dir(), PathBuf::from("elsewhere"));
        assert_eq!(cfg.optim.epochs, 2);
        assert_eq!(cfg.arch.activation, ActivationKind::ReLU);
        assert!(!cfg.arch.binary);
        assert!(cfg
            .apply(&Overrides {
                arch: Some("gelu".into()),
                ..Overrides::default()
            })
            .is_err());
    }

    #[test]
    fn idx_paths_resolve_against_config_dir() {
        let text = "[data]\nsource = idx\nimages = a.idx\nlabels = /abs/b.idx\n";
        let cfg = ExperimentConfig::parse(text, Some(Path::new("/cfg"))).unwrap();
        let DataSource::Idx {
            images,
            labels,
            val,
        } = cfg.data.source
        else {
            panic!()
        };
        assert_eq!(images, PathBuf::from("/cfg/a.idx"));
        assert_eq!(labels, PathBuf::from("/abs/b.idx"));
        assert!(val.is_none());
    }

    #[test]
    fn arch_input_must_match_data() {
        let arch = ArchConfig {
            input: Some(5),
            ..ArchConfig::default()
        };
        assert!(arch.build(4, 2).is_err());
        assert_eq!(arch.build(5, 2).unwrap().input, 5);
    }
}
