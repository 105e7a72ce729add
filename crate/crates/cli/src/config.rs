//! Effective configuration: built-in defaults, then the `--config` file, then
//! `--set` overrides, then the dedicated flags. Every layer is merged as JSON
//! and the result deserialized once, so an unknown key anywhere is an error.

use std::path::PathBuf;

use edgevad::eval::{Unit, VerdictRule};
use edgevad::extractor::ExtractorConfig;
use edgevad::graph::OptimizeFlags;
use edgevad::pipeline::PipelineConfig;
use edgevad::rtfm::{RtfmConfig, SyntheticConfig, TrainConfig};
use edgevad::source::VideoSource;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    FullScale,
}

impl Scale {
    fn extractor(self) -> ExtractorConfig {
        match self {
            Scale::Desk => ExtractorConfig::desk(),
            Scale::FullScale => ExtractorConfig::full_scale(),
        }
    }

    fn head(self) -> RtfmConfig {
        match self {
            Scale::Desk => RtfmConfig::desk(),
            Scale::FullScale => RtfmConfig::full_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// ScoreRecord JSON Lines to score.
    pub records: Option<PathBuf>,
    /// `source,start_frame,end_frame` CSV.
    pub labels: Option<PathBuf>,
    pub unit: Unit,
    /// `any-alert` or `run-N`.
    pub verdict: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            records: None,
            labels: None,
            unit: Unit::Snippet,
            verdict: VerdictRule::AnyAlert.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Resident-memory sampling period.
    pub period_ms: u64,
    /// Report label; defaults to the extractor name.
    pub label: Option<String>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            period_ms: 20,
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Drives extractor and head initialization and training order.
    pub seed: u64,
    /// Preset the `extractor` and `head` sections start from.
    pub scale: Scale,
    pub video: VideoSource,
    pub extractor: ExtractorConfig,
    pub head: RtfmConfig,
    /// Trained head parameters (`.bin` with its `.json` manifest); a seeded
    /// random head is used when absent.
    pub head_params: Option<PathBuf>,
    pub optimize: OptimizeFlags,
    pub pipeline: PipelineConfig,
    /// `train.seed` always equals `seed`.
    pub train: TrainConfig,
    /// Synthetic feature videos for `train`; `dataset.seed` picks the data.
    pub dataset: SyntheticConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Settings {
    fn defaults(scale: Scale) -> Settings {
        Settings {
            seed: 0,
            scale,
            video: VideoSource::default(),
            extractor: scale.extractor(),
            head: scale.head(),
            head_params: None,
            optimize: OptimizeFlags::default(),
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            dataset: SyntheticConfig::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }

    /// Goes through text so `f32` fields echo in their shortest form.
    pub fn to_json(&self) -> Value {
        let text = serde_json::to_string(self).expect("settings serialize");
        serde_json::from_str(&text).expect("settings reparse")
    }

    pub fn verdict(&self) -> Result<VerdictRule, CliError> {
        self.eval
            .verdict
            .parse()
            .map_err(|e| CliError::Config(format!("eval.verdict: {e}")))
    }
}

/// Command-line layers on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `key.path=value`; the value is JSON when it parses as JSON, else a string.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub no_fuse: bool,
    pub no_fp16: bool,
    pub no_memplan: bool,
}

fn parse_set(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {s:?}")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set: malformed key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

/// Objects merge key by key. Tagged objects whose `kind` changes are replaced
/// whole, so switching a video source does not inherit the old variant's fields.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o))
            if b.get("kind").is_none() || o.get("kind").is_none_or(|k| Some(k) == b.get("kind")) =>
        {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut at = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = at.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "--set {}: {} is not an object",
                path.join("."),
                path[..i].join(".")
            ))
        })?;
        if i + 1 == path.len() {
            match obj.get_mut(seg) {
                Some(slot) => merge(slot, value),
                None => {
                    obj.insert(seg.clone(), value);
                }
            }
            return Ok(());
        }
        at = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn get_path<'v>(v: &'v Value, path: &[&str]) -> Option<&'v Value> {
    path.iter().try_fold(v, |at, seg| at.get(seg))
}

/// Resolves the effective settings. `file` is the parsed `--config` contents.
pub fn resolve(file: Option<Value>, over: &Overrides) -> Result<Settings, CliError> {
    if file.as_ref().is_some_and(|f| !f.is_object()) {
        return Err(CliError::Config("config file must hold a JSON object".into()));
    }
    let sets = over.set.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>, _>>()?;

    // The scale picks the presets the rest is merged onto, so find it first.
    let scale_value = sets
        .iter()
        .rev()
        .find(|(p, _)| p.len() == 1 && p[0] == "scale")
        .map(|(_, v)| v.clone())
        .or_else(|| file.as_ref().and_then(|f| f.get("scale").cloned()));
    let scale: Scale = match scale_value {
        Some(v) => serde_json::from_value(v).map_err(|e| CliError::Config(format!("scale: {e}")))?,
        None => Scale::default(),
    };

    let mut v = Settings::defaults(scale).to_json();
    let mut explicit_train_seed = None;
    if let Some(f) = file {
        explicit_train_seed = get_path(&f, &["train", "seed"]).cloned();
        merge(&mut v, f);
    }
    for (path, value) in sets {
        if path == ["train", "seed"] {
            explicit_train_seed = Some(value.clone());
        }
        set_path(&mut v, &path, value)?;
    }
    if let Some(ts) = explicit_train_seed {
        if Some(&ts) != v.get("seed") {
            return Err(CliError::Config(format!(
                "train.seed ({ts}) differs from seed ({}); set seed instead",
                v["seed"]
            )));
        }
    }
    if let Some(seed) = over.seed {
        v["seed"] = seed.into();
    }
    v["train"]["seed"] = v["seed"].clone();
    for (off, key) in [
        (over.no_fuse, "fuse"),
        (over.no_fp16, "fp16"),
        (over.no_memplan, "memplan"),
    ] {
        if off {
            v["optimize"][key] = false.into();
        }
    }

    let settings: Settings = serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))?;
    validate(&settings)?;
    Ok(settings)
}

fn validate(s: &Settings) -> Result<(), CliError> {
    let cfg = |what: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{what}: {e}"));
    s.extractor.validate().map_err(|e| cfg("extractor", &e))?;
    s.head.validate().map_err(|e| cfg("head", &e))?;
    s.pipeline.validate().map_err(|e| cfg("pipeline", &e))?;
    s.train.validate().map_err(|e| cfg("train", &e))?;
    if let VideoSource::Synthetic(v) = &s.video {
        v.validate().map_err(|e| cfg("video", &e))?;
    }
    s.verdict()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sets(list: &[&str]) -> Overrides {
        Overrides {
            set: list.iter().map(|s| s.to_string()).collect(),
            ..Overrides::default()
        }
    }

    #[test]
    fn defaults_are_desk_with_seed_zero() {
        let s = resolve(None, &Overrides::default()).unwrap();
        assert_eq!(s.seed, 0);
        assert_eq!(s.extractor, ExtractorConfig::desk());
        assert_eq!(s.optimize, OptimizeFlags::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        for bad in [
            "sed=1",
            "pipeline.treshold=0.5",
            "optimize.fusion=false",
            "extractor.input.depth=2",
        ] {
            assert!(
                matches!(resolve(None, &sets(&[bad])), Err(CliError::Config(_))),
                "{bad}"
            );
        }
        let file = json!({ "video": { "kind": "synthetic", "frame": 4 } });
        assert!(resolve(Some(file), &Overrides::default()).is_err());
    }

    #[test]
    fn layers_apply_in_order() {
        let file = json!({ "seed": 3, "pipeline": { "threshold": 0.5 }, "video": { "kind": "raw", "path": "a.rgb" } });
        let over = Overrides {
            set: vec!["pipeline.threshold=0.6".into(), "pipeline.preprocess.snippets=8".into()],
            seed: Some(9),
            no_fp16: true,
            ..Overrides::default()
        };
        let s = resolve(Some(file), &over).unwrap();
        assert_eq!((s.seed, s.train.seed), (9, 9));
        assert_eq!(s.pipeline.threshold, 0.6);
        assert_eq!(s.pipeline.preprocess.snippets, 8);
        assert_eq!(s.pipeline.preprocess.crop, 224);
        assert!(s.optimize.fuse && !s.optimize.fp16);
        assert!(matches!(s.video, VideoSource::Raw { sidecar: None, .. }));
    }

    #[test]
    fn scale_switches_presets_and_echo_round_trips() {
        let s = resolve(None, &sets(&["scale=full_scale"])).unwrap();
        assert_eq!(s.head, RtfmConfig::full_scale());
        let echoed = s.to_json();
        assert_eq!(resolve(Some(echoed), &Overrides::default()).unwrap(), s);
    }

    #[test]
    fn conflicting_train_seed_is_rejected() {
        assert!(resolve(None, &sets(&["seed=2", "train.seed=5"])).is_err());
        assert!(resolve(None, &sets(&["seed=2", "train.seed=2"])).is_ok());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            "pipeline.capacity=0",
            "eval.verdict=run-0",
            "scale=huge",
            "video.anomaly=[9,2]",
            "seed",
        ] {
            assert!(
                matches!(resolve(None, &sets(&[bad])), Err(CliError::Config(_))),
                "{bad}"
            );
        }
    }
}
