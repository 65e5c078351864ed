//! Run configuration: one TOML document plus `key=value` overrides.

use std::path::{Path, PathBuf};

use diffeeg::balance::BalanceConfig;
use diffeeg::classifiers::ClassifierConfig;
use diffeeg::dataset::DatasetSpec;
use diffeeg::diffusion::TrainOptions;
use diffeeg::evaluation::AlarmPolicy;
use diffeeg::network::EpsNetConfig;
use diffeeg::schedule::ScheduleConfig;
use diffeeg::signal::SyntheticProfile;
use diffeeg::Error;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schedule: ScheduleConfig,
    pub net: EpsNetConfig,
    pub train: TrainOptions,
    pub balance: BalanceConfig,
    pub clf: ClassifierConfig,
    pub dataset: DatasetSpec,
    pub policy: AlarmPolicy,
    pub eval: EvalConfig,
    pub generate: GenerateConfig,
    pub synth: SynthConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Folds run concurrently.
    pub jobs: usize,
    /// Classifier families to evaluate; empty means `clf.arch` alone.
    pub archs: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { jobs: 1, archs: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub count: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { count: 16 }
    }
}

/// Synthetic recording layout: `seizures` onsets spaced `spacing_s` apart
/// starting at `first_onset_s`, followed by `tail_s` of seizure-free signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seizures: usize,
    pub first_onset_s: f64,
    pub spacing_s: f64,
    pub tail_s: f64,
    pub profile: SyntheticProfile,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seizures: 3, first_onset_s: 1200.0, spacing_s: 2700.0, tail_s: 1800.0, profile: SyntheticProfile::default() }
    }
}

impl SynthConfig {
    pub fn onsets(&self) -> Vec<f64> {
        (0..self.seizures).map(|i| self.first_onset_s + i as f64 * self.spacing_s).collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.first_onset_s + self.seizures.saturating_sub(1) as f64 * self.spacing_s + self.tail_s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Network initialisation.
    pub init: u64,
    pub generate: u64,
    /// Balancing and classifier training inside cross-validation.
    pub cv: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub annotations: PathBuf,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub samples: PathBuf,
    pub classifier: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data/segments.eegs".into(),
            annotations: "data/annotations.csv".into(),
            checkpoint: "out/diffusion.ckpt".into(),
            trace: "out/diffusion_trace.csv".into(),
            samples: "out/samples.eegs".into(),
            classifier: "out/classifier.ckpt".into(),
            report: "out/report.csv".into(),
        }
    }
}

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(msg.to_string())
}

/// Parse an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(root: &mut Table, key: &str, value: Value) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed config key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| config_err(format!("`{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, Value), Error> {
    let (k, v) = s.split_once('=').ok_or_else(|| config_err(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Load the file (if any), apply overrides in order, then validate.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Config, Error> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_key(&mut table, k, v.clone())?;
    }
    let cfg: Config = Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.message()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl Config {
    pub fn validate(&self) -> Result<(), Error> {
        self.schedule.build()?;
        self.net.validate()?;
        self.train.validate()?;
        self.balance.validate()?;
        self.clf.validate()?;
        self.dataset.validate()?;
        self.policy.validate()?;
        self.synth.profile.validate()?;
        if self.eval.jobs == 0 {
            return Err(config_err("eval.jobs must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Every config key with its default, one `key = value` per line.
pub fn key_listing() -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            leaf => out.push(format!("  {prefix} = {leaf}")),
        }
    }
    let mut out = Vec::new();
    walk("", &Value::try_from(Config::default()).expect("config serialises"), &mut out);
    out.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed() {
        let cfg = resolve(
            None,
            &[
                parse_override("net.upsample_t=[4, 8]").unwrap(),
                parse_override("clf.arch=mlp").unwrap(),
                parse_override("train.lr=0.002").unwrap(),
                parse_override("balance.method = sliding_window").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.net.upsample_t, [4, 8]);
        assert_eq!(cfg.clf.arch, diffeeg::classifiers::Arch::Mlp);
        assert_eq!(cfg.train.lr, 0.002);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(resolve(None, &[parse_override("net.width=3").unwrap()]).is_err());
        assert!(resolve(None, &[parse_override("nonsense=1").unwrap()]).is_err());
        assert!(parse_override("no-equals").is_err());
        assert!(resolve(None, &[parse_override("net.channels.x=1").unwrap()]).is_err());
    }

    #[test]
    fn later_overrides_win() {
        let o = [parse_override("train.iters=5").unwrap(), parse_override("train.iters=7").unwrap()];
        assert_eq!(resolve(None, &o).unwrap().train.iters, 7);
    }

    #[test]
    fn listing_covers_every_section() {
        let keys = key_listing();
        for k in ["schedule.steps", "net.upsample_t", "train.iters", "balance.method", "clf.scales", "dataset.preictal_minutes",
            "policy.refractory_s", "eval.jobs", "generate.count", "synth.profile.seed", "seeds.cv", "paths.report"]
        {
            assert!(keys.contains(&format!("  {k} = ")), "{k} missing");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = resolve(None, &[parse_override("seeds.cv=9").unwrap()]).unwrap();
        let back: Config = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
