//! Flat `key = value` run configuration. Precedence, lowest first:
//! built-in defaults, config file, environment, command-line overrides.

use std::collections::BTreeMap;

use planlens::blocksworld::{GenConfig, Level};
use planlens::interp_flow::{FlowConfig, FlowTarget};
use planlens::interp_probe::{FeaturePosition, OptimSettings, ProbeConfig, ProbeOptimizer};
use planlens::model::{AttnGradPoint, LensNorm, ModelConfig};
use planlens::training::{AnalysisSetConfig, TrainConfig};

use crate::CliError;

pub const ENV_RUN_ROOT: &str = "PLANLENS_RUN_ROOT";
pub const ENV_THREADS: &str = "PLANLENS_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub analysis: AnalysisSetConfig,
    pub lens: LensNorm,
    pub flow: FlowConfig,
    pub probe: ProbeConfig,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenConfig {
                budget_per_cell: Some(30_000),
                ..GenConfig::default()
            },
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            model_seed: 0,
            train: TrainConfig {
                epochs: 12,
                learning_rate: 1.5e-3,
                warmup_steps: 200,
                eval_every: 1,
                ..TrainConfig::default()
            },
            analysis: AnalysisSetConfig::default(),
            lens: LensNorm::Raw,
            flow: FlowConfig::default(),
            probe: ProbeConfig::default(),
            threads: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

fn parse_optimizer(key: &str, value: &str) -> Result<ProbeOptimizer, CliError> {
    match value {
        "gd" => Ok(ProbeOptimizer::Gd),
        "adam" => Ok(ProbeOptimizer::Adam),
        _ => Err(CliError::Config(format!("`{key}` must be gd or adam"))),
    }
}

fn optimizer_name(o: ProbeOptimizer) -> &'static str {
    match o {
        ProbeOptimizer::Gd => "gd",
        ProbeOptimizer::Adam => "adam",
    }
}

pub fn parse_colors(value: &str) -> Result<Vec<usize>, CliError> {
    let colors: Vec<usize> = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse::<usize>("colors", s.trim()))
        .collect::<Result<_, _>>()?;
    if colors.is_empty() || colors.iter().any(|c| !(4..=6).contains(c)) {
        return Err(CliError::Config(format!(
            "colors must be a non-empty subset of 4,5,6, got `{value}`"
        )));
    }
    Ok(colors)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "seed" => self.gen.seed = parse(key, v)?,
            "colors" => self.gen.colors = parse_colors(v)?,
            "max_steps" => self.gen.max_steps = parse(key, v)?,
            "budget_per_cell" => {
                self.gen.budget_per_cell = if v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "allow_table" => self.gen.allow_table = parse_bool(key, v)?,
            "split_train" => self.gen.split_ratio.0 = parse(key, v)?,
            "split_test" => self.gen.split_ratio.1 = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "model_seed" => self.model_seed = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "min_lr_ratio" => self.train.min_lr_ratio = parse(key, v)?,
            "warmup_steps" => self.train.warmup_steps = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train_seed" => self.train.seed = parse(key, v)?,
            "eval_every" => self.train.eval_every = parse(key, v)?,
            "analysis_size" => self.analysis.size = parse(key, v)?,
            "analysis_seed" => self.analysis.seed = parse(key, v)?,
            "analysis_level" => {
                self.analysis.level = Level::parse(v)
                    .ok_or_else(|| CliError::Config(format!("unknown level `{v}`")))?
            }
            "analysis_colors" => self.analysis.num_colors = parse(key, v)?,
            "analysis_colors_only" => self.analysis.colors_only = parse_bool(key, v)?,
            "lens" => {
                self.lens = match v {
                    "raw" => LensNorm::Raw,
                    "normalized" => LensNorm::Normalized,
                    _ => return Err(CliError::Config("`lens` must be raw or normalized".into())),
                }
            }
            "flow_target" => {
                self.flow.target = match v {
                    "gold" => FlowTarget::Gold,
                    "argmax" => FlowTarget::Argmax,
                    _ => {
                        return Err(CliError::Config(
                            "`flow_target` must be gold or argmax".into(),
                        ))
                    }
                }
            }
            "grad_point" => {
                self.flow.point = match v {
                    "post" => AttnGradPoint::PostSoftmax,
                    "pre" => AttnGradPoint::PreSoftmax,
                    _ => return Err(CliError::Config("`grad_point` must be post or pre".into())),
                }
            }
            "probe_feature" => {
                self.probe.feature = match v {
                    "last" => FeaturePosition::Last,
                    "mean" => FeaturePosition::Mean,
                    _ => {
                        return Err(CliError::Config(
                            "`probe_feature` must be last or mean".into(),
                        ))
                    }
                }
            }
            "probe_epochs" => self.probe.epochs = parse(key, v)?,
            "probe_weight_decay" => self.probe.weight_decay = parse(key, v)?,
            "probe_linear_optimizer" => self.probe.linear.optimizer = parse_optimizer(key, v)?,
            "probe_linear_lr" => self.probe.linear.learning_rate = parse(key, v)?,
            "probe_nonlinear_optimizer" => {
                self.probe.nonlinear.optimizer = parse_optimizer(key, v)?
            }
            "probe_nonlinear_lr" => self.probe.nonlinear.learning_rate = parse(key, v)?,
            "probe_hidden" => self.probe.hidden = parse(key, v)?,
            "probe_train_fraction" => self.probe.train_fraction = parse(key, v)?,
            "probe_seed" => self.probe.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(ENV_THREADS) {
            self.set("threads", &v)?;
        }
        Ok(())
    }

    /// Every key with its effective value, sorted.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.gen.seed.to_string());
        put(
            "colors",
            self.gen
                .colors
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("max_steps", self.gen.max_steps.to_string());
        put(
            "budget_per_cell",
            self.gen
                .budget_per_cell
                .map_or("none".into(), |b| b.to_string()),
        );
        put("allow_table", self.gen.allow_table.to_string());
        put("split_train", self.gen.split_ratio.0.to_string());
        put("split_test", self.gen.split_ratio.1.to_string());
        put("n_layers", self.n_layers.to_string());
        put("n_heads", self.n_heads.to_string());
        put("d_model", self.d_model.to_string());
        put("d_ff", self.d_ff.to_string());
        put("model_seed", self.model_seed.to_string());
        put("epochs", self.train.epochs.to_string());
        put("batch_size", self.train.batch_size.to_string());
        put("learning_rate", self.train.learning_rate.to_string());
        put("min_lr_ratio", self.train.min_lr_ratio.to_string());
        put("warmup_steps", self.train.warmup_steps.to_string());
        put("weight_decay", self.train.weight_decay.to_string());
        put("grad_clip", self.train.grad_clip.to_string());
        put("train_seed", self.train.seed.to_string());
        put("eval_every", self.train.eval_every.to_string());
        put("analysis_size", self.analysis.size.to_string());
        put("analysis_seed", self.analysis.seed.to_string());
        put("analysis_level", self.analysis.level.to_string());
        put("analysis_colors", self.analysis.num_colors.to_string());
        put(
            "analysis_colors_only",
            self.analysis.colors_only.to_string(),
        );
        put(
            "lens",
            match self.lens {
                LensNorm::Raw => "raw".into(),
                LensNorm::Normalized => "normalized".into(),
            },
        );
        put(
            "flow_target",
            match self.flow.target {
                FlowTarget::Gold => "gold".into(),
                FlowTarget::Argmax => "argmax".into(),
            },
        );
        put(
            "grad_point",
            match self.flow.point {
                AttnGradPoint::PostSoftmax => "post".into(),
                AttnGradPoint::PreSoftmax => "pre".into(),
            },
        );
        put(
            "probe_feature",
            match self.probe.feature {
                FeaturePosition::Last => "last".into(),
                FeaturePosition::Mean => "mean".into(),
            },
        );
        put("probe_epochs", self.probe.epochs.to_string());
        put("probe_weight_decay", self.probe.weight_decay.to_string());
        let OptimSettings {
            optimizer: lo,
            learning_rate: llr,
        } = self.probe.linear;
        let OptimSettings {
            optimizer: no,
            learning_rate: nlr,
        } = self.probe.nonlinear;
        put("probe_linear_optimizer", optimizer_name(lo).into());
        put("probe_linear_lr", llr.to_string());
        put("probe_nonlinear_optimizer", optimizer_name(no).into());
        put("probe_nonlinear_lr", nlr.to_string());
        put("probe_hidden", self.probe.hidden.to_string());
        put(
            "probe_train_fraction",
            self.probe.train_fraction.to_string(),
        );
        put("probe_seed", self.probe.seed.to_string());
        put("threads", self.threads.to_string());
        m
    }

    pub fn to_file_contents(&self) -> String {
        self.snapshot()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn model_config(&self, vocab_size: usize, max_seq: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_seq,
            seed: self.model_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("epochs", "3").unwrap();
        cfg.set("flow_target", "argmax").unwrap();
        cfg.set("budget_per_cell", "none").unwrap();
        let mut back = RunConfig::default();
        back.apply_file(&cfg.to_file_contents()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(CliError::Config(_))));
        assert!(matches!(
            cfg.set("epochs", "many"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            cfg.apply_file("epochs 3"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(parse_colors("3,4"), Err(CliError::Config(_))));
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut cfg = RunConfig::default();
        cfg.apply_file("# header\n\nepochs = 2 # short run\n")
            .unwrap();
        assert_eq!(cfg.train.epochs, 2);
    }
}
