use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cmcd::corpus::EpisodeSpec;
use cmcd::losses::LossWeights;
use cmcd::train::TrainConfig;
use serde::Deserialize;

/// Flat JSON settings shared by every subcommand. Relative paths resolve
/// against the directory holding the config file.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub threads: Option<usize>,

    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,

    // training
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub model_dim: Option<usize>,
    pub snr_db: Option<[f64; 2]>,
    pub eval_interval: Option<usize>,
    pub lambda_dn: Option<f64>,
    pub lambda_mm: Option<f64>,
    pub focal_gamma: Option<f64>,
    pub focal_alpha: Option<f64>,
    pub switch_fraction: Option<f64>,
    pub diagonal_width: Option<f64>,

    // build-corpus
    pub alignments: Option<PathBuf>,
    pub audio_root: Option<PathBuf>,
    #[serde(default)]
    pub noise: Vec<PathBuf>,
    pub eval_fraction: Option<f64>,
    pub episode_rounds: Option<usize>,
    pub hard_threshold: Option<usize>,

    // synth-corpus
    pub n_keywords: Option<usize>,
    pub n_samples_per: Option<usize>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.rebase(&base);
        Ok(cfg)
    }

    /// Loads `path` if given, else an empty config.
    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Config::default()), Config::load)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                *v = base.join(&*v);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.out);
        fix(&mut self.dictionary);
        fix(&mut self.alignments);
        fix(&mut self.audio_root);
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let l = LossWeights::default();
        let cfg = TrainConfig {
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            seed: self.seed.unwrap_or(d.seed),
            model_dim: self.model_dim.unwrap_or(d.model_dim),
            loss: LossWeights {
                lambda_dn: self.lambda_dn.unwrap_or(l.lambda_dn),
                lambda_mm: self.lambda_mm.unwrap_or(l.lambda_mm),
                focal_gamma: self.focal_gamma.unwrap_or(l.focal_gamma),
                focal_alpha: self.focal_alpha.unwrap_or(l.focal_alpha),
                switch_fraction: self.switch_fraction.unwrap_or(l.switch_fraction),
                diagonal_width: self.diagonal_width.unwrap_or(l.diagonal_width),
            },
            snr_db: self.snr_db.unwrap_or(d.snr_db),
            eval_interval: self.eval_interval.unwrap_or(d.eval_interval),
            threads: self.threads.unwrap_or(d.threads),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn episode_spec(&self) -> Result<EpisodeSpec> {
        let mut spec = EpisodeSpec::default();
        if let Some(t) = self.hard_threshold {
            if t == 0 {
                bail!("hard_threshold must be at least 1");
            }
            spec.hard_threshold = t;
        }
        Ok(spec)
    }
}

/// A path from a flag, else from the config, else an error naming the key.
pub fn require(flag: Option<PathBuf>, from_config: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    match flag.or_else(|| from_config.clone()) {
        Some(p) => Ok(p),
        None => bail!(
            "missing required setting `{key}` (flag --{} or config key)",
            key.replace('_', "-")
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<Config>(r#"{"steps": 3, "stepz": 4}"#).unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn overrides_reach_train_config() {
        let cfg: Config = serde_json::from_str(r#"{"steps": 3, "lambda_mm": 0, "seed": 9}"#).unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!((t.steps, t.seed, t.loss.lambda_mm, t.loss.lambda_dn), (3, 9, 0.0, 0.5));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg: Config = serde_json::from_str(r#"{"learning_rate": -1}"#).unwrap();
        assert!(cfg.train_config().is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"corpus": "data/toy", "out": "/abs/run"}"#).unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.corpus.unwrap(), dir.path().join("data/toy"));
        assert_eq!(cfg.out.unwrap(), PathBuf::from("/abs/run"));
    }
}
