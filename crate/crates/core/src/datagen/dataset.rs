use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    add_noise, extract_features, generate_event, DatagenError, EventClass, EventKind, EventParams,
    FeatureLayout, FeatureVector, PmuStream, ScenarioConfig, CHANNELS,
};
use crate::digest::{bytes_digest, json_digest};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const FEATURES_FILE: &str = "features.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Independent RNG stream for one event.
pub fn event_rng(seed: u64, class: EventClass, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class.id() as u64) << 32) + index as u64);
    rng
}

pub fn event_id(class: EventClass, index: usize) -> String {
    format!("c{:02}-e{:04}", class.id(), index)
}

/// Operating point of experiment `index` of `class`, cycling the grid and
/// jittering the loading once the grid is exhausted.
fn grid_point<R: Rng>(
    config: &ScenarioConfig,
    class: EventClass,
    index: usize,
    rng: &mut R,
) -> EventParams {
    let levels = &config.loading_levels;
    let l = levels.len();
    let (pct, grid) = if class.kind() == EventKind::LoadChange {
        let p = &config.load_change_percents;
        (p[(index / l) % p.len()], l * p.len())
    } else {
        (0.0, l)
    };
    let mut loading = levels[index % l];
    if index >= grid && config.grid_jitter > 0.0 {
        loading *= 1.0 + rng.random_range(-config.grid_jitter..=config.grid_jitter);
    }
    EventParams {
        loading,
        change_percent: pct,
    }
}

/// Noise-free and noisy stream of one experiment.
pub fn render_event(
    config: &ScenarioConfig,
    class: EventClass,
    index: usize,
) -> (PmuStream, PmuStream) {
    let mut rng = event_rng(config.seed, class, index);
    let params = grid_point(config, class, index, &mut rng);
    let clean = generate_event(class, params, &mut rng, config);
    let noisy = add_noise(&clean, config.noise_variance, &mut rng);
    (clean, noisy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitIds {
    pub train_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

/// Sidecar describing a features file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: ScenarioConfig,
    pub config_digest: String,
    /// Identifies the feature encoding; models record it to refuse
    /// incompatible datasets.
    pub feature_config_digest: String,
    pub feature_count: usize,
    pub features_digest: String,
    pub split: SplitIds,
    pub gain_table: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct FeatureConfig<'a> {
    layout: &'a FeatureLayout,
    active_pmus: Vec<u8>,
    reporting_rate: u32,
}

/// Digest of the parts of a scenario that fix the feature encoding.
pub fn feature_config_digest(config: &ScenarioConfig) -> String {
    json_digest(&FeatureConfig {
        layout: &config.layout,
        active_pmus: config.sorted_pmus(),
        reporting_rate: config.reporting_rate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub train: Vec<FeatureVector>,
    pub eval: Vec<FeatureVector>,
}

/// Generates every experiment of every class and splits each class into
/// `training_per_class` training events (random pick) and the rest for
/// evaluation.
pub fn build_dataset(config: &ScenarioConfig) -> Result<Dataset, DatagenError> {
    config.validate()?;
    let per_class = config.experiments_per_class;
    let quota = config.training_per_class;
    if per_class < quota {
        return Err(DatagenError::InsufficientData { per_class, quota });
    }
    let jobs: Vec<(EventClass, usize)> = EventClass::all()
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    let features: Vec<FeatureVector> = jobs
        .par_iter()
        .map(|&(class, i)| {
            let (_, noisy) = render_event(config, class, i);
            let mut f = extract_features(&noisy, &config.layout)?;
            f.event_id = event_id(class, i);
            Ok(f)
        })
        .collect::<Result<_, DatagenError>>()?;

    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::with_capacity(quota * EventClass::all().count());
    let mut eval = Vec::with_capacity(features.len() - train.capacity());
    for block in features.chunks(per_class) {
        let mut order: Vec<usize> = (0..per_class).collect();
        order.shuffle(&mut split_rng);
        let mut chosen = vec![false; per_class];
        for &i in &order[..quota] {
            chosen[i] = true;
        }
        for (f, c) in block.iter().zip(chosen) {
            if c {
                train.push(f.clone());
            } else {
                eval.push(f.clone());
            }
        }
    }
    Ok(Dataset {
        config: config.clone(),
        train,
        eval,
    })
}

fn class_index(id: &str) -> Option<(u8, usize)> {
    let (c, e) = id.strip_prefix('c')?.split_once("-e")?;
    Some((c.parse().ok()?, e.parse().ok()?))
}

impl Dataset {
    pub fn feature_count(&self) -> usize {
        self.config.feature_len()
    }

    pub fn feature_config_digest(&self) -> String {
        feature_config_digest(&self.config)
    }

    /// All rows ordered by class then experiment index.
    fn rows(&self) -> Vec<&FeatureVector> {
        let mut rows: Vec<&FeatureVector> = self.train.iter().chain(&self.eval).collect();
        rows.sort_by_key(|f| class_index(&f.event_id));
        rows
    }

    pub fn features_csv(&self) -> Result<Vec<u8>, DatagenError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let n = self.feature_count();
        let mut header = vec!["event_id".to_string(), "class".to_string()];
        header.extend((0..n).map(|i| format!("f_{i}")));
        w.write_record(&header)?;
        for f in self.rows() {
            let mut rec = vec![f.event_id.clone(), f.class.id().to_string()];
            rec.extend(f.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| DatagenError::Io(e.into_error()))
    }

    pub fn manifest(&self, features_csv: &[u8]) -> Manifest {
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config: self.config.clone(),
            config_digest: json_digest(&self.config),
            feature_config_digest: self.feature_config_digest(),
            feature_count: self.feature_count(),
            features_digest: bytes_digest(features_csv),
            split: SplitIds {
                train_ids: self.train.iter().map(|f| f.event_id.clone()).collect(),
                eval_ids: self.eval.iter().map(|f| f.event_id.clone()).collect(),
            },
            gain_table: self.config.gain_table.clone(),
        }
    }

    /// Writes `features.csv` and `manifest.json` into `dir` and returns the
    /// manifest.
    pub fn write(&self, dir: &Path) -> Result<Manifest, DatagenError> {
        fs::create_dir_all(dir)?;
        let csv = self.features_csv()?;
        let manifest = self.manifest(&csv);
        fs::write(dir.join(FEATURES_FILE), &csv)?;
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(manifest)
    }

    /// Loads a dataset directory, checking digests and the split.
    pub fn read(dir: &Path) -> Result<(Dataset, Manifest), DatagenError> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(DatagenError::Format(format!(
                "unsupported manifest schema {}",
                manifest.schema_version
            )));
        }
        manifest.config.validate()?;
        if manifest.config_digest != json_digest(&manifest.config) {
            return Err(DatagenError::Format(
                "manifest config digest mismatch".into(),
            ));
        }
        let bytes = fs::read(dir.join(FEATURES_FILE))?;
        if bytes_digest(&bytes) != manifest.features_digest {
            return Err(DatagenError::Format("features file digest mismatch".into()));
        }
        let n = manifest.config.feature_len();
        let layout = manifest.config.layout;
        let pmu_count = manifest.config.active_pmus.len();
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        if rdr.headers()?.len() != n + 2 {
            return Err(DatagenError::Format(format!(
                "expected {} feature columns",
                n
            )));
        }
        let mut by_id = std::collections::HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = rec[0].to_string();
            let class_id: u8 = rec[1]
                .parse()
                .map_err(|_| DatagenError::Format(format!("bad class in row {id}")))?;
            let values = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| DatagenError::Format(format!("bad value in row {id}")))?;
            let f = FeatureVector {
                event_id: id.clone(),
                class: EventClass::new(class_id)?,
                pmu_count,
                layout,
                values,
            };
            by_id.insert(id, f);
        }
        let take =
            |ids: &[String], by_id: &mut std::collections::HashMap<String, FeatureVector>| {
                ids.iter()
                    .map(|id| {
                        by_id.remove(id).ok_or_else(|| {
                            DatagenError::Format(format!("split id {id} missing or repeated"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            };
        let train = take(&manifest.split.train_ids, &mut by_id)?;
        let eval = take(&manifest.split.eval_ids, &mut by_id)?;
        if !by_id.is_empty() {
            return Err(DatagenError::Format(
                "features file has rows outside the split".into(),
            ));
        }
        Ok((
            Dataset {
                config: manifest.config.clone(),
                train,
                eval,
            },
            manifest,
        ))
    }
}

/// Writes raw streams as `event_id,pmu,channel,sample,value` rows.
pub fn write_streams_csv<W: Write>(
    out: W,
    streams: &[(String, PmuStream)],
) -> Result<(), DatagenError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["event_id", "pmu", "channel", "sample", "value"])?;
    for (id, s) in streams {
        for (p, chans) in s.pmus.iter().zip(&s.channels) {
            for (c, ch) in chans.iter().enumerate() {
                for (t, v) in ch.iter().enumerate() {
                    w.write_record([
                        id.as_str(),
                        &p.to_string(),
                        CHANNELS[c],
                        &t.to_string(),
                        &v.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
