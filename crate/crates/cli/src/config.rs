//! Run configuration files and flag overrides.
//!
//! Every stochastic component draws its seed from the global `seed` through a
//! named substream, so each stage is reproducible on its own.

use std::fs;
use std::path::{Path, PathBuf};

use hessquant::model::{zoo, DataSpec, Dataset, Model, ModelSpec, TrainConfig};
use hessquant::planner::{BitMenu, OrderingMode};
use hessquant::quant::{FinetuneConfig, RangePolicy};
use hessquant::rng;
use hessquant::trace::{ProbeConfig, ProbeDistribution};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSource,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub trace: TraceSection,
    pub plan: PlanSection,
    /// Quantization-aware fine-tuning after planning; skipped when absent.
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    /// Bit widths for hidden-layer activations (one per hidden layer).
    #[serde(default)]
    pub activation_bits: Option<Vec<u32>>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Zoo(String),
    Mlp(ModelSpec),
    /// Start from a saved checkpoint (relative to the config file).
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Zoo(String),
    Synthetic(DataSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_tol: f64,
    pub newton_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            epochs: d.epochs,
            batch_size: d.batch_size,
            grad_tol: d.grad_tol,
            newton_steps: d.newton_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Random Rayleigh-quotient probes of the full Hessian.
    pub probe_dirs: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { probe_dirs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    /// Sub-sampled batch `N_B` for weight traces; defaults to min(N, 256).
    pub batch_size: Option<usize>,
    pub probes: ProbeSection,
    /// Inputs for activation traces; none are computed when absent.
    pub activation_inputs: Option<usize>,
    pub threads: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            batch_size: None,
            probes: ProbeSection::default(),
            activation_inputs: None,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub distribution: ProbeDistribution,
    pub max_probes: usize,
    pub rel_tol: Option<f64>,
    pub min_probes: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        Self {
            distribution: d.distribution,
            max_probes: d.max_probes,
            rel_tol: d.rel_tol,
            min_probes: d.min_probes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub bits: Vec<u32>,
    /// Size budget in bytes of weight payload.
    #[serde(default)]
    pub target_bytes: Option<u64>,
    /// Alternative budget: compression ratio against 32-bit weights.
    #[serde(default)]
    pub target_compression: Option<f64>,
    #[serde(default)]
    pub ordering: OrderingMode,
    #[serde(default)]
    pub range_policy: RangePolicy,
    /// Cap on enumerated assignments.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            batch_size: d.batch_size,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub bits: Option<Vec<u32>>,
    pub target_bytes: Option<u64>,
    pub probes: Option<usize>,
    pub probe_dist: Option<ProbeDistribution>,
}

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "HESSQUANT_OUT";

/// A validated configuration with paths resolved.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    /// Directory of the config file; relative input paths resolve against it.
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| hessquant::Error::json(origin, text, &e).into())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.trace.threads = t;
        }
        if let Some(b) = &o.bits {
            self.plan.bits = b.clone();
        }
        if let Some(t) = o.target_bytes {
            self.plan.target_bytes = Some(t);
            self.plan.target_compression = None;
        }
        if let Some(m) = o.probes {
            // An explicit probe count means exactly that many probes.
            self.trace.probes.max_probes = m;
            self.trace.probes.rel_tol = None;
        }
        if let Some(d) = o.probe_dist {
            self.trace.probes.distribution = d;
        }
    }

    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.experiment.is_empty() {
            return bad("experiment name must not be empty".into());
        }
        match &self.model {
            ModelSource::Zoo(name) => {
                zoo(name)?;
            }
            ModelSource::Mlp(_) => {}
            ModelSource::Checkpoint(p) => {
                let path = base_dir.join(p);
                if !path.is_file() {
                    return bad(format!("model checkpoint `{}` does not exist", path.display()));
                }
            }
        }
        if let DataSource::Zoo(name) = &self.data {
            zoo(name)?;
        }
        BitMenu::new(self.plan.bits.clone())?;
        match (self.plan.target_bytes, self.plan.target_compression) {
            (Some(_), Some(_)) => return bad("set only one of plan.target_bytes and plan.target_compression".into()),
            (None, None) => return bad("plan needs target_bytes or target_compression".into()),
            (None, Some(r)) if !(r >= 1.0 && r.is_finite()) => {
                return bad(format!("target_compression {r} must be at least 1"))
            }
            _ => {}
        }
        self.probe_config()?.validate()?;
        if let Some(bits) = &self.activation_bits {
            if bits.iter().any(|&b| !(1..=32).contains(&b)) {
                return bad(format!("activation bits {bits:?} must lie in 1..=32"));
            }
        }
        if self.verify.probe_dirs == 0 {
            return bad("verify.probe_dirs must be at least 1".into());
        }
        Ok(())
    }

    pub fn seed_for(&self, component: &str) -> u64 {
        rng::substream(self.seed, component)
    }

    pub fn initial_model(&self, base_dir: &Path) -> Result<Model> {
        Ok(match &self.model {
            ModelSource::Zoo(name) => zoo(name)?.0.build(self.seed_for("model-init"))?,
            ModelSource::Mlp(spec) => spec.build(self.seed_for("model-init"))?,
            ModelSource::Checkpoint(p) => hessquant::model::load_checkpoint(&base_dir.join(p))?,
        })
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let spec = match &self.data {
            DataSource::Zoo(name) => zoo(name)?.1,
            DataSource::Synthetic(spec) => spec.clone(),
        };
        Ok(spec.generate(self.seed_for("data"))?)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed_for("train"),
            grad_tol: t.grad_tol,
            newton_steps: t.newton_steps,
        }
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let p = &self.trace.probes;
        Ok(ProbeConfig {
            distribution: p.distribution,
            max_probes: p.max_probes,
            rel_tol: p.rel_tol,
            min_probes: p.min_probes,
            seed: self.seed_for("trace"),
            threads: self.trace.threads,
        })
    }

    pub fn finetune_config(&self) -> Option<FinetuneConfig> {
        self.finetune.as_ref().map(|f| FinetuneConfig {
            epochs: f.epochs,
            learning_rate: f.learning_rate,
            momentum: f.momentum,
            batch_size: f.batch_size,
            seed: self.seed_for("finetune"),
            range_policy: self.plan.range_policy,
        })
    }

    pub fn menu(&self) -> Result<BitMenu> {
        Ok(BitMenu::new(self.plan.bits.clone())?)
    }

    /// The size budget in bytes given the model's full-precision size.
    pub fn target_bytes(&self, full_precision_bytes: u64) -> u64 {
        match (self.plan.target_bytes, self.plan.target_compression) {
            (Some(t), _) => t,
            (None, Some(r)) => (full_precision_bytes as f64 / r).floor() as u64,
            (None, None) => unreachable!("validated"),
        }
    }
}

impl Run {
    /// Loads `path`, applies flag overrides and the output-directory
    /// environment variable, and validates the result.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut config = RunConfig::load(path)?;
        config.apply(overrides);
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate(&base_dir)?;
        let out_dir = match (std::env::var_os(OUT_ENV), &overrides.out) {
            (Some(env), _) if !env.is_empty() => PathBuf::from(env),
            (_, Some(flag)) => flag.clone(),
            _ => base_dir.join(&config.out_dir),
        };
        Ok(Self {
            config,
            out_dir,
            base_dir,
        })
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "experiment": "t",
        "model": {"zoo": "blobs-mlp"},
        "data": {"zoo": "blobs-mlp"},
        "plan": {"bits": [2, 4, 8], "target_bytes": 300}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(MINIMAL, Path::new("c.json")).unwrap();
        c.validate(Path::new(".")).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.trace.threads, 1);
        assert_eq!(c.out_dir, PathBuf::from("out"));
        assert!(c.finetune.is_none());
        assert_eq!(c.target_bytes(2496), 300);
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::parse(MINIMAL, Path::new("c.json")).unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            threads: Some(4),
            bits: Some(vec![3, 6]),
            target_bytes: Some(100),
            probes: Some(12),
            probe_dist: Some(ProbeDistribution::Gaussian),
            ..Default::default()
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.plan.bits, vec![3, 6]);
        let p = c.probe_config().unwrap();
        assert_eq!((p.max_probes, p.rel_tol, p.threads), (12, None, 4));
        assert_eq!(p.distribution, ProbeDistribution::Gaussian);
        assert_eq!(p.seed, rng::substream(9, "trace"));
    }

    #[test]
    fn seeds_differ_per_component() {
        let c = RunConfig::parse(MINIMAL, Path::new("c.json")).unwrap();
        assert_ne!(c.seed_for("train"), c.seed_for("trace"));
    }

    #[test]
    fn invalid_configs_are_located_or_named() {
        match RunConfig::parse("{\"experiment\": \"x\", \"bogus\": 1}", Path::new("c.json")) {
            Err(CliError::Core(hessquant::Error::Parse { line, .. })) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        let mut c = RunConfig::parse(MINIMAL, Path::new("c.json")).unwrap();
        c.plan.target_compression = Some(4.0);
        assert!(c.validate(Path::new(".")).is_err());
        c.plan.target_bytes = None;
        assert!(c.validate(Path::new(".")).is_ok());
        assert_eq!(c.target_bytes(2496), 624);
        c.model = ModelSource::Checkpoint("missing.json".into());
        assert!(matches!(c.validate(Path::new(".")), Err(CliError::Config(_))));
        c.model = ModelSource::Zoo("nope".into());
        assert!(c.validate(Path::new(".")).is_err());
    }
}
