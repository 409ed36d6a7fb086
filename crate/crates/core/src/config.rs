//! Pipeline configuration: a sparse user-facing form, a validated form with
//! every default filled, and a `key = value` text format for config files.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Resolution, DEFAULT_K, DEFAULT_STEPS, MAX_STEPS};

pub const DEFAULT_WINDOW_LEN: usize = 64;
pub const DEFAULT_STRIDE: usize = 32;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_IDLE_GAP_WINDOWS: usize = 3;
pub const DEFAULT_STAGE_DEADLINE_MS: u64 = 30_000;
pub const DEFAULT_TURN_BUDGET_MS: u64 = 120_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("resolution {width}x{height} is not one of the supported sizes")]
    InvalidResolution { width: u32, height: u32 },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("confidence threshold {0} outside [0,1]")]
    InvalidThreshold(f64),
    #[error("invalid value for {key}: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Backend URL per stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEndpoints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recognize: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesize: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<String>,
}

impl StageEndpoints {
    pub fn is_empty(&self) -> bool {
        self.recognize.is_none()
            && self.synthesize.is_none()
            && self.caption.is_none()
            && self.embed.is_none()
            && self.image_features.is_none()
    }

    /// Five consecutive ports on one host, in protocol stage order.
    pub fn consecutive(host: &str, port_base: u16) -> Self {
        let url = |off: u16| Some(format!("http://{host}:{}", port_base + off));
        Self {
            recognize: url(0),
            synthesize: url(1),
            caption: url(2),
            embed: url(3),
            image_features: url(4),
        }
    }
}

/// User-supplied configuration; unset fields take defaults on validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_gap_windows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_concurrency: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_deadline_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_budget_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "StageEndpoints::is_empty")]
    pub endpoints: StageEndpoints,
}

/// Fully-populated configuration whose invariants hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedConfig {
    pub window_len: usize,
    pub stride: usize,
    pub confidence_threshold: f64,
    pub k: u32,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub idle_gap_windows: usize,
    /// Bound on in-flight caption and embedding calls; defaults to `k`.
    pub caption_concurrency: usize,
    pub stage_deadline_ms: u64,
    pub turn_budget_ms: u64,
    pub endpoints: StageEndpoints,
}

impl ValidatedConfig {
    pub fn resolution(&self) -> Resolution {
        Resolution::from_dims(self.width, self.height).expect("validated")
    }
}

impl From<&ValidatedConfig> for PipelineConfig {
    fn from(v: &ValidatedConfig) -> Self {
        Self {
            window_len: Some(v.window_len),
            stride: Some(v.stride),
            confidence_threshold: Some(v.confidence_threshold),
            k: Some(v.k),
            steps: Some(v.steps),
            width: Some(v.width),
            height: Some(v.height),
            seed: Some(v.seed),
            idle_gap_windows: Some(v.idle_gap_windows),
            caption_concurrency: Some(v.caption_concurrency),
            stage_deadline_ms: Some(v.stage_deadline_ms),
            turn_budget_ms: Some(v.turn_budget_ms),
            endpoints: v.endpoints.clone(),
        }
    }
}

impl Default for ValidatedConfig {
    fn default() -> Self {
        validate(&PipelineConfig::default()).expect("defaults are valid")
    }
}

/// Fills defaults and checks invariants.
pub fn validate(config: &PipelineConfig) -> Result<ValidatedConfig, ConfigError> {
    let window_len = config.window_len.unwrap_or(DEFAULT_WINDOW_LEN);
    let stride = config.stride.unwrap_or(DEFAULT_STRIDE.min(window_len));
    if window_len == 0 {
        return Err(ConfigError::InvalidWindow("window_len must be at least 1".into()));
    }
    if stride == 0 {
        return Err(ConfigError::InvalidWindow("stride must be at least 1".into()));
    }
    if stride > window_len {
        return Err(ConfigError::InvalidWindow(format!("stride {stride} exceeds window_len {window_len}")));
    }

    let confidence_threshold = config.confidence_threshold.unwrap_or(DEFAULT_CONFIDENCE_THRESHOLD);
    if !(0.0..=1.0).contains(&confidence_threshold) {
        return Err(ConfigError::InvalidThreshold(confidence_threshold));
    }

    let default_res = Resolution::default();
    let width = config.width.unwrap_or(default_res.width());
    let height = config.height.unwrap_or(default_res.height());
    Resolution::from_dims(width, height).map_err(|_| ConfigError::InvalidResolution { width, height })?;

    let k = config.k.unwrap_or(DEFAULT_K);
    if k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    let steps = config.steps.unwrap_or(DEFAULT_STEPS);
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(invalid("steps", &format!("must be in [1, {MAX_STEPS}]")));
    }
    let caption_concurrency = config.caption_concurrency.unwrap_or(k as usize);
    if caption_concurrency == 0 {
        return Err(invalid("caption_concurrency", "must be at least 1"));
    }
    let idle_gap_windows = config.idle_gap_windows.unwrap_or(DEFAULT_IDLE_GAP_WINDOWS);
    if idle_gap_windows == 0 {
        return Err(invalid("idle_gap_windows", "must be at least 1"));
    }

    Ok(ValidatedConfig {
        window_len,
        stride,
        confidence_threshold,
        k,
        steps,
        width,
        height,
        seed: config.seed.unwrap_or(0),
        idle_gap_windows,
        caption_concurrency,
        stage_deadline_ms: config.stage_deadline_ms.unwrap_or(DEFAULT_STAGE_DEADLINE_MS),
        turn_budget_ms: config.turn_budget_ms.unwrap_or(DEFAULT_TURN_BUDGET_MS),
        endpoints: config.endpoints.clone(),
    })
}

fn invalid(key: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), reason: reason.into() }
}

impl PipelineConfig {
    /// Overlays every field set in `other` onto `self`.
    pub fn merged(mut self, other: &PipelineConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(
            window_len,
            stride,
            confidence_threshold,
            k,
            steps,
            width,
            height,
            seed,
            idle_gap_windows,
            caption_concurrency,
            stage_deadline_ms,
            turn_budget_ms
        );
        let (e, o) = (&mut self.endpoints, &other.endpoints);
        macro_rules! take_ep {
            ($($f:ident),*) => { $( if o.$f.is_some() { e.$f = o.$f.clone(); } )* };
        }
        take_ep!(recognize, synthesize, caption, embed, image_features);
        self
    }

    /// Renders the set fields in the config-file format.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { let _ = writeln!(out, "{} = {}", stringify!($f), v); } )* };
        }
        emit!(
            window_len,
            stride,
            confidence_threshold,
            k,
            steps,
            width,
            height,
            seed,
            idle_gap_windows,
            caption_concurrency,
            stage_deadline_ms,
            turn_budget_ms
        );
        let e = &self.endpoints;
        for (name, v) in [
            ("recognize", &e.recognize),
            ("synthesize", &e.synthesize),
            ("caption", &e.caption),
            ("embed", &e.embed),
            ("image_features", &e.image_features),
        ] {
            if let Some(url) = v {
                let _ = writeln!(out, "endpoint.{name} = {url}");
            }
        }
        out
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| ConfigError::Parse { line, reason: format!("{key}: {e}") })
}

/// Config file format: one `key = value` per line, `#` starts a comment,
/// blank lines ignored. Endpoint keys are `endpoint.<stage>`.
impl FromStr for PipelineConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse { line, reason: format!("expected key = value, got {content:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "window_len" => cfg.window_len = Some(parse_value(line, key, value)?),
                "stride" => cfg.stride = Some(parse_value(line, key, value)?),
                "confidence_threshold" | "tau" => cfg.confidence_threshold = Some(parse_value(line, key, value)?),
                "k" => cfg.k = Some(parse_value(line, key, value)?),
                "steps" => cfg.steps = Some(parse_value(line, key, value)?),
                "width" => cfg.width = Some(parse_value(line, key, value)?),
                "height" => cfg.height = Some(parse_value(line, key, value)?),
                "resolution" => {
                    let r: Resolution = value
                        .parse()
                        .map_err(|_| ConfigError::Parse { line, reason: format!("bad resolution {value:?}") })?;
                    cfg.width = Some(r.width());
                    cfg.height = Some(r.height());
                }
                "seed" => cfg.seed = Some(parse_value(line, key, value)?),
                "idle_gap_windows" => cfg.idle_gap_windows = Some(parse_value(line, key, value)?),
                "caption_concurrency" => cfg.caption_concurrency = Some(parse_value(line, key, value)?),
                "stage_deadline_ms" => cfg.stage_deadline_ms = Some(parse_value(line, key, value)?),
                "turn_budget_ms" => cfg.turn_budget_ms = Some(parse_value(line, key, value)?),
                "endpoint.recognize" => cfg.endpoints.recognize = Some(value.to_string()),
                "endpoint.synthesize" => cfg.endpoints.synthesize = Some(value.to_string()),
                "endpoint.caption" => cfg.endpoints.caption = Some(value.to_string()),
                "endpoint.embed" => cfg.endpoints.embed = Some(value.to_string()),
                "endpoint.image_features" => cfg.endpoints.image_features = Some(value.to_string()),
                other => return Err(ConfigError::Parse { line, reason: format!("unknown key {other:?}") }),
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_filled() {
        let v = validate(&PipelineConfig::default()).unwrap();
        assert_eq!(v.steps, 20);
        assert_eq!(v.k, 8);
        assert_eq!((v.width, v.height), (512, 512));
        assert_eq!((v.window_len, v.stride), (64, 32));
        assert_eq!(v.confidence_threshold, 0.5);
        assert_eq!(v.caption_concurrency, 8);
        assert_eq!(v.idle_gap_windows, 3);
    }

    #[test]
    fn zero_stride_is_invalid_window() {
        let cfg = PipelineConfig { stride: Some(0), ..Default::default() };
        assert!(matches!(validate(&cfg), Err(ConfigError::InvalidWindow(_))));
    }

    #[test]
    fn stride_above_window_is_invalid() {
        let cfg = PipelineConfig { window_len: Some(8), stride: Some(9), ..Default::default() };
        assert!(matches!(validate(&cfg), Err(ConfigError::InvalidWindow(_))));
    }

    #[test]
    fn short_window_clamps_default_stride() {
        let cfg = PipelineConfig { window_len: Some(16), ..Default::default() };
        assert_eq!(validate(&cfg).unwrap().stride, 16);
    }

    #[test]
    fn threshold_and_resolution_checked() {
        let cfg = PipelineConfig { confidence_threshold: Some(1.5), ..Default::default() };
        assert!(matches!(validate(&cfg), Err(ConfigError::InvalidThreshold(_))));
        let cfg = PipelineConfig { width: Some(500), height: Some(500), ..Default::default() };
        assert!(matches!(validate(&cfg), Err(ConfigError::InvalidResolution { width: 500, height: 500 })));
    }

    #[test]
    fn kv_format_round_trips() {
        let text = "# comment\nwindow_len = 16\nstride = 8 # trailing\nk=2\nresolution = 384x384\nseed = 7\nendpoint.embed = http://127.0.0.1:9003\n";
        let cfg: PipelineConfig = text.parse().unwrap();
        assert_eq!(cfg.window_len, Some(16));
        assert_eq!(cfg.stride, Some(8));
        assert_eq!((cfg.width, cfg.height), (Some(384), Some(384)));
        assert_eq!(cfg.endpoints.embed.as_deref(), Some("http://127.0.0.1:9003"));
        let again: PipelineConfig = cfg.to_kv_string().parse().unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn kv_rejects_unknown_keys() {
        assert!(matches!("bogus = 1".parse::<PipelineConfig>(), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!("k = many".parse::<PipelineConfig>(), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn merge_overlays_set_fields() {
        let base = PipelineConfig { k: Some(4), seed: Some(1), ..Default::default() };
        let over = PipelineConfig { steps: Some(15), seed: Some(2), ..Default::default() };
        let m = base.merged(&over);
        assert_eq!((m.k, m.steps, m.seed), (Some(4), Some(15), Some(2)));
    }
}
