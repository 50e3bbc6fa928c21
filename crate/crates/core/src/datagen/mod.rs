//! Synthetic PMU event records and feature extraction.
//!
//! Each event class is rendered from a signal template whose amplitude at
//! every PMU is set by a per-(class, PMU) gain, standing in for the
//! electrical distance between the event and the meter.

mod dataset;
mod features;
mod signal;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{
    build_dataset, event_id, event_rng, feature_config_digest, render_event, write_streams_csv,
    Dataset, Manifest, SplitIds, FEATURES_FILE, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION,
};
pub use features::{extract_features, FeatureLayout, FeatureVector};
pub use signal::{
    add_noise, baseline, cap_dip_samples, generate_event, reconfiguration_samples, EventParams,
    EventWindow, PmuStream, CHANNELS,
};

pub const CLASS_COUNT: usize = 13;
pub const PMU_COUNT: usize = 4;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("{field}: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("{per_class} experiments per class cannot fill a training quota of {quota}")]
    InsufficientData { per_class: usize, quota: usize },
    #[error("feature window does not fit: {0}")]
    Window(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn invalid(field: &str, message: impl Into<String>) -> DatagenError {
    DatagenError::InvalidConfig {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CapSwitch,
    OltcSwitch,
    LoadChange,
    Reconfiguration,
}

/// Event class 1–13: 1–4 capacitor switching, 5–8 OLTC switching, 9 load
/// change, 10–13 reconfiguration; the position within a kind is the
/// location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct EventClass(u8);

impl EventClass {
    pub fn new(id: u8) -> Result<Self, DatagenError> {
        if (1..=CLASS_COUNT as u8).contains(&id) {
            Ok(Self(id))
        } else {
            Err(invalid("class", format!("class id {id} outside 1..=13")))
        }
    }

    pub fn all() -> impl Iterator<Item = EventClass> {
        (1..=CLASS_COUNT as u8).map(EventClass)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// Zero-based position in the 13-class list.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn kind(self) -> EventKind {
        match self.0 {
            1..=4 => EventKind::CapSwitch,
            5..=8 => EventKind::OltcSwitch,
            9 => EventKind::LoadChange,
            _ => EventKind::Reconfiguration,
        }
    }

    /// Location 1–4, or `None` for the load change class.
    pub fn location(self) -> Option<u8> {
        match self.0 {
            1..=8 => Some((self.0 - 1) % 4 + 1),
            9 => None,
            _ => Some(self.0 - 9),
        }
    }
}

impl TryFrom<u8> for EventClass {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        EventClass::new(v).map_err(|e| e.to_string())
    }
}

impl From<EventClass> for u8 {
    fn from(c: EventClass) -> u8 {
        c.0
    }
}

/// Per-channel template response `[|v|, δ_v, |i|, δ_i]`. Magnitude entries
/// are relative changes, angle entries are degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelResponse {
    /// Applied during the transient part of the template.
    pub transient: [f64; 4],
    /// Applied after the transient for persistent events.
    pub level: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSet {
    pub cap_switch: ChannelResponse,
    pub oltc_switch: ChannelResponse,
    /// Level response per 10 % of load change.
    pub load_change: ChannelResponse,
    pub reconfiguration: ChannelResponse,
}

impl ResponseSet {
    pub fn get(&self, kind: EventKind) -> &ChannelResponse {
        match kind {
            EventKind::CapSwitch => &self.cap_switch,
            EventKind::OltcSwitch => &self.oltc_switch,
            EventKind::LoadChange => &self.load_change,
            EventKind::Reconfiguration => &self.reconfiguration,
        }
    }
}

impl Default for ResponseSet {
    fn default() -> Self {
        let r = |transient, level| ChannelResponse { transient, level };
        Self {
            cap_switch: r([-0.04, 1.0, 0.25, 8.0], [0.0; 4]),
            oltc_switch: r([0.09, 0.9, 0.24, 6.0], [0.0; 4]),
            load_change: r([0.0; 4], [-0.016, -0.8, 0.2, -3.0]),
            reconfiguration: r([-0.05, 2.0, -0.3, 10.0], [0.012, -1.2, 0.12, -5.0]),
        }
    }
}

/// Default gains: rows are classes 1–13, columns PMUs 1–4. Within a kind the
/// gain decays geometrically with the distance between the event location
/// and the PMU index; OLTC and load-change rows decay slowly, so those
/// classes are harder to tell apart.
pub fn default_gain_table() -> Vec<Vec<f64>> {
    let row = |peak: f64, decay: f64, loc: usize| -> Vec<f64> {
        (1..=PMU_COUNT)
            .map(|p| peak * decay.powi((p as i32 - loc as i32).abs()))
            .collect()
    };
    let mut t = Vec::with_capacity(CLASS_COUNT);
    for loc in 1..=4 {
        t.push(row(1.0, 0.45, loc));
    }
    for loc in 1..=4 {
        t.push(row(1.0, 0.8, loc));
    }
    t.push(vec![0.7, 0.8, 0.9, 0.8]);
    for loc in 1..=4 {
        t.push(row(1.0, 0.5, loc));
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Loading levels in percent.
    pub loading_levels: Vec<f64>,
    /// Load change steps in percent for class 9.
    pub load_change_percents: Vec<f64>,
    pub experiments_per_class: usize,
    /// Events per class drawn into the training split.
    pub training_per_class: usize,
    /// Variance of the relative Gaussian measurement noise.
    pub noise_variance: f64,
    /// PMU indices 1–4 that report.
    pub active_pmus: Vec<u8>,
    /// Samples per second.
    pub reporting_rate: u32,
    /// Half-width of the uniform multiplicative loading jitter applied once
    /// the grid has been used up.
    pub grid_jitter: f64,
    pub gain_table: Vec<Vec<f64>>,
    pub responses: ResponseSet,
    pub layout: FeatureLayout,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            loading_levels: (5..=14).map(|k| k as f64 * 10.0).collect(),
            load_change_percents: vec![
                -25.0, -20.0, -15.0, -10.0, -5.0, 5.0, 10.0, 15.0, 20.0, 25.0,
            ],
            experiments_per_class: 910,
            training_per_class: 100,
            noise_variance: 0.0,
            active_pmus: vec![1, 2, 3, 4],
            reporting_rate: 60,
            grid_jitter: 0.02,
            gain_table: default_gain_table(),
            responses: ResponseSet::default(),
            layout: FeatureLayout::default(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.loading_levels.is_empty()
            || self
                .loading_levels
                .iter()
                .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(invalid(
                "loading_levels",
                "must be a non-empty list of positive percentages",
            ));
        }
        if self.load_change_percents.is_empty()
            || self.load_change_percents.iter().any(|v| !v.is_finite())
        {
            return Err(invalid(
                "load_change_percents",
                "must be a non-empty list of finite percentages",
            ));
        }
        if self.experiments_per_class == 0 {
            return Err(invalid("experiments_per_class", "must be ≥ 1"));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(invalid("noise_variance", "must be a finite value ≥ 0"));
        }
        if self.active_pmus.is_empty() {
            return Err(invalid("active_pmus", "must not be empty"));
        }
        let mut seen = [false; PMU_COUNT];
        for &p in &self.active_pmus {
            if !(1..=PMU_COUNT as u8).contains(&p) {
                return Err(invalid(
                    "active_pmus",
                    format!("PMU index {p} outside 1..=4"),
                ));
            }
            if std::mem::replace(&mut seen[p as usize - 1], true) {
                return Err(invalid(
                    "active_pmus",
                    format!("PMU index {p} listed twice"),
                ));
            }
        }
        if self.reporting_rate != 60 && self.reporting_rate != 120 {
            return Err(invalid("reporting_rate", "must be 60 or 120"));
        }
        if !(0.0..1.0).contains(&self.grid_jitter) {
            return Err(invalid("grid_jitter", "must lie in [0, 1)"));
        }
        if self.gain_table.len() != CLASS_COUNT
            || self.gain_table.iter().any(|r| r.len() != PMU_COUNT)
        {
            return Err(invalid("gain_table", "must be a 13 × 4 matrix"));
        }
        if self.gain_table.iter().flatten().any(|g| !g.is_finite()) {
            return Err(invalid("gain_table", "all gains must be finite"));
        }
        for i in 0..CLASS_COUNT {
            for j in i + 1..CLASS_COUNT {
                if self.gain_table[i] == self.gain_table[j] {
                    return Err(invalid(
                        "gain_table",
                        format!("rows for classes {} and {} coincide", i + 1, j + 1),
                    ));
                }
            }
        }
        let responses = [
            &self.responses.cap_switch,
            &self.responses.oltc_switch,
            &self.responses.load_change,
            &self.responses.reconfiguration,
        ];
        if responses
            .iter()
            .any(|r| r.transient.iter().chain(&r.level).any(|v| !v.is_finite()))
        {
            return Err(invalid("responses", "all responses must be finite"));
        }
        self.layout.check(self.reporting_rate)?;
        Ok(())
    }

    /// PMU indices in ascending order.
    pub fn sorted_pmus(&self) -> Vec<u8> {
        let mut p = self.active_pmus.clone();
        p.sort_unstable();
        p
    }

    pub fn feature_len(&self) -> usize {
        self.layout.len(self.active_pmus.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_mapping() {
        let kinds: Vec<EventKind> = EventClass::all().map(|c| c.kind()).collect();
        assert!(kinds[..4].iter().all(|k| *k == EventKind::CapSwitch));
        assert!(kinds[4..8].iter().all(|k| *k == EventKind::OltcSwitch));
        assert_eq!(kinds[8], EventKind::LoadChange);
        assert!(kinds[9..].iter().all(|k| *k == EventKind::Reconfiguration));
        assert_eq!(EventClass::new(6).unwrap().location(), Some(2));
        assert_eq!(EventClass::new(9).unwrap().location(), None);
        assert_eq!(EventClass::new(13).unwrap().location(), Some(4));
        assert!(EventClass::new(0).is_err());
        assert!(EventClass::new(14).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        ScenarioConfig::default().validate().unwrap();
        assert_eq!(ScenarioConfig::default().loading_levels.len(), 10);
    }

    #[test]
    fn default_gain_rows_are_distinct() {
        let t = default_gain_table();
        for i in 0..CLASS_COUNT {
            for j in i + 1..CLASS_COUNT {
                assert_ne!(t[i], t[j]);
            }
        }
    }

    #[test]
    fn negative_noise_rejected_with_field_name() {
        let cfg = ScenarioConfig {
            noise_variance: -0.1,
            ..Default::default()
        };
        match cfg.validate() {
            Err(DatagenError::InvalidConfig { field, .. }) => assert_eq!(field, "noise_variance"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_gain_rows_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.gain_table[1] = cfg.gain_table[0].clone();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = ScenarioConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioConfig>(&s).unwrap(), cfg);
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
