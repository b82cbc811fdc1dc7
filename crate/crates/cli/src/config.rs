//! Run configuration: defaults, then the config file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use roarnet_core::eval::{ApMode, DesyncConfig, EvalConfig, MatchMetric};
use roarnet_core::kitti::Difficulty;
use roarnet_core::mono::{ConfigurationSet, ScatterParams};
use roarnet_core::pipeline::{DetectorConfig, OracleConfig, PipelineMode, Thresholds};
use toml::{Table, Value};

pub const DATASET_ROOT_ENV: &str = "ROARNET_DATASET_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub split: String,
    pub scatter_s: f64,
    pub scatter_m: f64,
    pub thresholds: Thresholds,
    pub oracle: OracleConfig,
    pub mode: PipelineMode,
    pub configurations: ConfigurationSet,
    pub eval: EvalConfig,
    /// Shift applied to every frame before detection, if any.
    pub desync: Option<DesyncConfig>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: None,
            split: "val".into(),
            scatter_s: ScatterParams::default().s(),
            scatter_m: ScatterParams::default().m(),
            thresholds: Thresholds::default(),
            oracle: OracleConfig::default(),
            mode: PipelineMode::default(),
            configurations: ConfigurationSet::default(),
            eval: EvalConfig::default(),
            desync: None,
            output_dir: PathBuf::from("roarnet-out"),
            seed: 0,
            jobs: None,
        }
    }
}

/// Values given on the command line; `None` leaves the file or default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset_root: Option<PathBuf>,
    pub split: Option<String>,
    pub scatter_s: Option<f64>,
    pub scatter_m: Option<f64>,
    pub objectness: Option<f64>,
    pub nms_bev: Option<f64>,
    pub dims_noise: Option<f64>,
    pub yaw_noise: Option<f64>,
    pub center_noise: Option<f64>,
    pub box2d_noise: Option<f64>,
    pub mode: Option<PipelineMode>,
    pub difficulty: Option<Difficulty>,
    pub iou_threshold: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

fn ap_mode_name(m: ApMode) -> &'static str {
    match m {
        ApMode::R11 => "r11",
        ApMode::R40 => "r40",
    }
}

fn metric_name(m: MatchMetric) -> &'static str {
    match m {
        MatchMetric::Iou3d => "iou_3d",
        MatchMetric::IouBev => "iou_bev",
    }
}

fn configurations_name(c: ConfigurationSet) -> &'static str {
    match c {
        ConfigurationSet::Full => "full",
        ConfigurationSet::Reduced => "reduced",
    }
}

fn number(v: &Value, key: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => bail!("`{key}` must be a number"),
    }
}

fn integer(v: &Value, key: &str) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => bail!("`{key}` must be a non-negative integer"),
    }
}

fn text<'a>(v: &'a Value, key: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| anyhow!("`{key}` must be a string"))
}

impl RunConfig {
    /// Reads a config file. Unknown sections or keys are errors.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn from_toml(source: &str) -> Result<Self> {
        let table: Table = source.parse()?;
        let mut cfg = RunConfig::default();
        for (section, body) in &table {
            let body = body
                .as_table()
                .ok_or_else(|| anyhow!("top-level `{section}` must be a [section]"))?;
            for (key, v) in body {
                cfg.set(section, key, v)?;
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &Value) -> Result<()> {
        let name = format!("{section}.{key}");
        let k = name.as_str();
        match (section, key) {
            ("run", "seed") => self.seed = integer(v, k)?,
            ("run", "output_dir") => self.output_dir = text(v, k)?.into(),
            ("run", "jobs") => self.jobs = Some(integer(v, k)? as usize),
            ("dataset", "root") => self.dataset_root = Some(text(v, k)?.into()),
            ("dataset", "split") => self.split = text(v, k)?.to_string(),
            ("scatter", "s") => self.scatter_s = number(v, k)?,
            ("scatter", "m") => self.scatter_m = number(v, k)?,
            ("thresholds", "objectness") => self.thresholds.objectness = number(v, k)?,
            ("thresholds", "nms_bev") => self.thresholds.nms_bev = number(v, k)?,
            ("pipeline", "mode") => self.mode = text(v, k)?.parse()?,
            ("pipeline", "configurations") => {
                self.configurations = match text(v, k)? {
                    "full" => ConfigurationSet::Full,
                    "reduced" => ConfigurationSet::Reduced,
                    other => bail!("`{k}`: expected full or reduced, found {other:?}"),
                }
            }
            ("oracle", "dims_noise_sigma") => self.oracle.dims_noise_sigma = number(v, k)?,
            ("oracle", "yaw_noise_sigma") => self.oracle.yaw_noise_sigma = number(v, k)?,
            ("oracle", "center_noise_sigma") => self.oracle.center_noise_sigma = number(v, k)?,
            ("oracle", "box2d_noise_sigma") => self.oracle.box2d_noise_sigma = number(v, k)?,
            ("eval", "iou_threshold") => self.eval.iou_threshold = number(v, k)?,
            ("eval", "difficulty") => self.eval.difficulty = text(v, k)?.parse().map_err(|e: String| anyhow!(e))?,
            ("eval", "ap_mode") => {
                self.eval.ap_mode = match text(v, k)? {
                    "r11" => ApMode::R11,
                    "r40" => ApMode::R40,
                    other => bail!("`{k}`: expected r11 or r40, found {other:?}"),
                }
            }
            ("eval", "match_metric") => {
                self.eval.match_metric = match text(v, k)? {
                    "iou_3d" => MatchMetric::Iou3d,
                    "iou_bev" => MatchMetric::IouBev,
                    other => bail!("`{k}`: expected iou_3d or iou_bev, found {other:?}"),
                }
            }
            ("desync", "max_xy") => self.desync.get_or_insert_with(DesyncConfig::default).max_xy = number(v, k)?,
            ("desync", "max_z_vertical") => {
                self.desync.get_or_insert_with(DesyncConfig::default).max_z_vertical = number(v, k)?
            }
            _ => bail!("unknown config key `{k}`"),
        }
        Ok(())
    }

    /// Applies flags, then falls back to the environment for the dataset root.
    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! take {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = o.$src.clone() {
                    self.$($dst)+ = v;
                }
            };
        }
        if o.dataset_root.is_some() {
            self.dataset_root = o.dataset_root.clone();
        }
        take!(split => split);
        take!(scatter_s => scatter_s);
        take!(scatter_m => scatter_m);
        take!(objectness => thresholds.objectness);
        take!(nms_bev => thresholds.nms_bev);
        take!(dims_noise => oracle.dims_noise_sigma);
        take!(yaw_noise => oracle.yaw_noise_sigma);
        take!(center_noise => oracle.center_noise_sigma);
        take!(box2d_noise => oracle.box2d_noise_sigma);
        take!(mode => mode);
        take!(difficulty => eval.difficulty);
        take!(iou_threshold => eval.iou_threshold);
        take!(output_dir => output_dir);
        take!(seed => seed);
        if o.jobs.is_some() {
            self.jobs = o.jobs;
        }
        if self.dataset_root.is_none() {
            self.dataset_root = std::env::var_os(DATASET_ROOT_ENV).map(PathBuf::from);
        }
        self.oracle.rng_seed = self.seed;
        if let Some(d) = self.desync.as_mut() {
            d.rng_seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scatter()?;
        self.oracle.validate()?;
        let t = &self.thresholds;
        if !(0.0..=1.0).contains(&t.objectness) || !(0.0..=1.0).contains(&t.nms_bev) {
            bail!("thresholds must lie in [0, 1]");
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            bail!("eval.iou_threshold must lie in (0, 1]");
        }
        if let Some(d) = &self.desync {
            if !(d.max_xy >= 0.0 && d.max_z_vertical >= 0.0) {
                bail!("desync bounds must be non-negative");
            }
        }
        if self.jobs == Some(0) {
            bail!("jobs must be positive");
        }
        Ok(())
    }

    pub fn scatter(&self) -> Result<ScatterParams> {
        Ok(ScatterParams::with_s(self.scatter_s, self.scatter_m)?)
    }

    pub fn detector(&self) -> Result<DetectorConfig> {
        let mut d = DetectorConfig {
            scatter: self.scatter()?,
            mode: self.mode,
            thresholds: self.thresholds,
            seed: self.seed,
            ..DetectorConfig::default()
        };
        d.solver.configurations = self.configurations;
        Ok(d)
    }

    pub fn dataset_root(&self) -> Result<&Path> {
        self.dataset_root
            .as_deref()
            .ok_or_else(|| anyhow!("no dataset root: pass --dataset-root or set {DATASET_ROOT_ENV}"))
    }

    /// The same format [`RunConfig::from_toml`] reads.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        let mut section = |name: &str, entries: Vec<(&str, Value)>| {
            root.insert(
                name.into(),
                Value::Table(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()),
            );
        };
        let mut run = vec![
            ("seed", Value::Integer(self.seed as i64)),
            ("output_dir", Value::String(self.output_dir.display().to_string())),
        ];
        if let Some(j) = self.jobs {
            run.push(("jobs", Value::Integer(j as i64)));
        }
        section("run", run);
        let mut dataset = vec![("split", Value::String(self.split.clone()))];
        if let Some(r) = &self.dataset_root {
            dataset.push(("root", Value::String(r.display().to_string())));
        }
        section("dataset", dataset);
        section(
            "scatter",
            vec![("s", Value::Float(self.scatter_s)), ("m", Value::Float(self.scatter_m))],
        );
        section(
            "thresholds",
            vec![
                ("objectness", Value::Float(self.thresholds.objectness)),
                ("nms_bev", Value::Float(self.thresholds.nms_bev)),
            ],
        );
        section(
            "pipeline",
            vec![
                ("mode", Value::String(self.mode.as_str().into())),
                ("configurations", Value::String(configurations_name(self.configurations).into())),
            ],
        );
        let o = &self.oracle;
        section(
            "oracle",
            vec![
                ("dims_noise_sigma", Value::Float(o.dims_noise_sigma)),
                ("yaw_noise_sigma", Value::Float(o.yaw_noise_sigma)),
                ("center_noise_sigma", Value::Float(o.center_noise_sigma)),
                ("box2d_noise_sigma", Value::Float(o.box2d_noise_sigma)),
            ],
        );
        section(
            "eval",
            vec![
                ("iou_threshold", Value::Float(self.eval.iou_threshold)),
                ("difficulty", Value::String(self.eval.difficulty.as_str().into())),
                ("ap_mode", Value::String(ap_mode_name(self.eval.ap_mode).into())),
                ("match_metric", Value::String(metric_name(self.eval.match_metric).into())),
            ],
        );
        if let Some(d) = &self.desync {
            section(
                "desync",
                vec![
                    ("max_xy", Value::Float(d.max_xy)),
                    ("max_z_vertical", Value::Float(d.max_z_vertical)),
                ],
            );
        }
        toml::to_string(&root).expect("plain tables serialize")
    }
}
