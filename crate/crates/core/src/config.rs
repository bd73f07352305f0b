//! TOML run configuration with `[kernel]`, `[schedule]`, `[train]` and `[sample]` sections.
//!
//! Unknown keys are rejected. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{TimeSampling, TrainConfig};
use crate::kernel::ScheduleKind;
use crate::sampler::GenSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub k: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default)]
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub corpus: PathBuf,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub seq_len: usize,
    pub d_model: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub t_sampling: TimeSampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    #[default]
    Ancestral,
    Confidence,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "confidence" => Ok(Self::Confidence),
            other => Err(Error::Config(format!(
                "unknown sampling mode {other:?} (expected ancestral or confidence)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default)]
    pub mode: SampleMode,
    pub steps: usize,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Explicit confidence-decoding budgets; the even split is used when absent.
    #[serde(default)]
    pub topk_absorb: Option<Vec<usize>>,
    #[serde(default)]
    pub topk_uniform: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: KernelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub sample: SampleSection,
}

impl RunConfig {
    /// Parses and validates; parse errors carry line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file and resolves `train.corpus` against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if config.train.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                config.train.corpus = dir.join(&config.train.corpus);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("{key}: {msg}")));
        if !(0.0..=1.0).contains(&self.kernel.k) {
            return bad(
                "kernel.k",
                &format!("must lie in [0, 1], got {}", self.kernel.k),
            );
        }
        self.train_config().validate()?;
        if self.sample.steps == 0 {
            return bad("sample.steps", "must be at least 1");
        }
        if self.sample.n == 0 {
            return bad("sample.n", "must be at least 1");
        }
        if self.sample.topk_absorb.is_some() || self.sample.topk_uniform.is_some() {
            self.gen_schedule()
                .map_err(|e| Error::Config(format!("sample.topk_absorb: {e}")))?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            k: self.kernel.k,
            schedule: self.schedule.kind,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            momentum: t.momentum,
            seq_len: t.seq_len,
            d_model: t.d_model,
            seed: t.seed,
            t_sampling: t.t_sampling,
        }
    }

    /// Confidence-decoding budgets for `sample.steps` steps over `train.seq_len` tokens.
    pub fn gen_schedule(&self) -> Result<GenSchedule> {
        let (len, steps, k) = (self.train.seq_len, self.sample.steps, self.kernel.k);
        let even = GenSchedule::even(len, steps, k)?;
        let absorb = self.sample.topk_absorb.clone().unwrap_or(even.topk_absorb);
        let uniform = match &self.sample.topk_uniform {
            Some(u) => u.clone(),
            None => absorb
                .iter()
                .map(|&a| (k * a as f64).round() as usize)
                .collect(),
        };
        GenSchedule::new(absorb, uniform, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = r#"
[kernel]
k = 0.1

[schedule]
kind = "linear"

[train]
corpus = "corpus.txt"
steps = 2000
batch = 32
lr = 0.01
seq_len = 64
d_model = 64
seed = 7

[sample]
mode = "confidence"
steps = 32
n = 100
"#;

    #[test]
    fn parses_demo() {
        let c = RunConfig::from_toml(DEMO).unwrap();
        assert_eq!(c.kernel.k, 0.1);
        assert_eq!(c.sample.mode, SampleMode::Confidence);
        assert_eq!(c.train.t_sampling, TimeSampling::Stratified);
        let tc = c.train_config();
        assert_eq!((tc.steps, tc.batch, tc.seed), (2000, 32, 7));
        let g = c.gen_schedule().unwrap();
        assert_eq!(g.topk_absorb, vec![2; 32]);
        assert_eq!(g.topk_uniform, vec![0; 32]);
    }

    #[test]
    fn out_of_range_k_names_key() {
        let text = DEMO.replace("k = 0.1", "k = 1.5");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("kernel.k"), "{err}");
    }

    #[test]
    fn train_errors_name_key() {
        let text = DEMO.replace("lr = 0.01", "lr = -1.0");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("train.lr"), "{err}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = DEMO.replace("batch = 32", "batch = 32\nbatchsize = 4");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("batchsize"), "{err}");
        assert!(err.contains("line 12"), "{err}");
    }

    #[test]
    fn explicit_schedule_is_checked() {
        let text = DEMO.replace("n = 100", "n = 100\ntopk_absorb = [1, 2]");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("sample.topk_absorb"), "{err}");
    }

    #[test]
    fn load_resolves_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, DEMO).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.train.corpus, dir.path().join("corpus.txt"));
        assert!(RunConfig::load(&dir.path().join("nope.toml")).is_err());
    }

    #[test]
    fn mode_from_str() {
        assert_eq!(
            "ancestral".parse::<SampleMode>().unwrap(),
            SampleMode::Ancestral
        );
        assert!("greedy".parse::<SampleMode>().is_err());
    }
}
