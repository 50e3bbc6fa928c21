use serde::{Deserialize, Serialize};

use super::{DatagenError, EventClass, PmuStream};

/// Feature window lengths and channel selection.
///
/// Per PMU the vector holds the raw `|i|` and `δ_i` windows (plus `|v|` and
/// `δ_v` when `raw_voltage` is set), each `w_pre + w_dur` long, followed by
/// consecutive differences of `|v|`, `δ_v`, `|i|`, `δ_i` over the same
/// window. PMUs are concatenated in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureLayout {
    pub w_pre: usize,
    pub w_dur: usize,
    pub raw_voltage: bool,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            w_pre: 10,
            w_dur: 10,
            raw_voltage: false,
        }
    }
}

impl FeatureLayout {
    fn window(&self) -> usize {
        self.w_pre + self.w_dur
    }

    fn raw_channels(&self) -> &'static [usize] {
        if self.raw_voltage {
            &[0, 1, 2, 3]
        } else {
            &[2, 3]
        }
    }

    pub fn per_pmu(&self) -> usize {
        self.raw_channels().len() * self.window() + 4 * (self.window() - 1)
    }

    pub fn len(&self, pmu_count: usize) -> usize {
        pmu_count * self.per_pmu()
    }

    /// Checks that the windows fit inside every event the generator can
    /// emit at `rate`.
    pub(crate) fn check(&self, rate: u32) -> Result<(), DatagenError> {
        let len = rate as usize;
        if self.w_dur == 0 || self.w_pre == 0 {
            return Err(DatagenError::Window("w_pre and w_dur must be ≥ 1".into()));
        }
        if self.w_pre > len / 4 {
            return Err(DatagenError::Window(format!(
                "w_pre {} exceeds the earliest onset {}",
                self.w_pre,
                len / 4
            )));
        }
        if self.w_dur > len / 3 + 1 {
            return Err(DatagenError::Window(format!(
                "w_dur {} exceeds the event span {}",
                self.w_dur,
                len / 3 + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub event_id: String,
    pub class: EventClass,
    pub pmu_count: usize,
    pub layout: FeatureLayout,
    pub values: Vec<f64>,
}

/// Builds the feature vector of one stream.
pub fn extract_features(
    stream: &PmuStream,
    layout: &FeatureLayout,
) -> Result<FeatureVector, DatagenError> {
    let w = stream.window;
    if w.event_start < layout.w_pre || w.event_start - layout.w_pre < w.pre_start {
        return Err(DatagenError::Window(format!(
            "pre-event window of {} samples starts before sample {}",
            layout.w_pre, w.pre_start
        )));
    }
    if w.event_start + layout.w_dur > w.event_end + 1 || w.event_end >= stream.duration() {
        return Err(DatagenError::Window(format!(
            "during-event window of {} samples passes the event end {}",
            layout.w_dur, w.event_end
        )));
    }
    let lo = w.event_start - layout.w_pre;
    let hi = w.event_start + layout.w_dur;
    let mut values = Vec::with_capacity(layout.len(stream.pmus.len()));
    for pmu in &stream.channels {
        for &c in layout.raw_channels() {
            values.extend_from_slice(&pmu[c][lo..hi]);
        }
        for ch in pmu.iter() {
            values.extend(ch[lo..hi].windows(2).map(|p| p[1] - p[0]));
        }
    }
    Ok(FeatureVector {
        event_id: String::new(),
        class: stream.class,
        pmu_count: stream.pmus.len(),
        layout: *layout,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::EventWindow;

    fn flat_stream(pmus: usize, consts: [f64; 4]) -> PmuStream {
        PmuStream {
            class: EventClass::new(1).unwrap(),
            pmus: (1..=pmus as u8).collect(),
            channels: (0..pmus)
                .map(|_| std::array::from_fn(|c| vec![consts[c]; 60]))
                .collect(),
            reporting_rate: 60,
            window: EventWindow {
                pre_start: 0,
                event_start: 20,
                event_end: 40,
            },
        }
    }

    #[test]
    fn layout_length_formula() {
        let l = FeatureLayout::default();
        assert_eq!(l.len(4), 464);
        assert_eq!(l.len(1), 116);
        let v = FeatureLayout {
            raw_voltage: true,
            ..l
        };
        assert_eq!(v.len(2), 2 * (4 * 20 + 4 * 19));
        for w_pre in 1..=5 {
            for w_dur in 1..=5 {
                for p in 1..=4 {
                    let l = FeatureLayout {
                        w_pre,
                        w_dur,
                        raw_voltage: false,
                    };
                    let n = w_pre + w_dur;
                    assert_eq!(l.len(p), p * (2 * n + 4 * (n - 1)));
                }
            }
        }
    }

    #[test]
    fn constant_stream_features() {
        let s = flat_stream(4, [1.0, -3.0, 0.5, -28.0]);
        let f = extract_features(&s, &FeatureLayout::default()).unwrap();
        assert_eq!(f.values.len(), 464);
        for p in 0..4 {
            let block = &f.values[p * 116..(p + 1) * 116];
            assert!(block[..20].iter().all(|v| *v == 0.5));
            assert!(block[20..40].iter().all(|v| *v == -28.0));
            assert!(block[40..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn unit_current_step_gives_single_difference() {
        let mut s = flat_stream(1, [1.0, 0.0, 0.5, 0.0]);
        for t in 20..60 {
            s.channels[0][2][t] += 1.0;
        }
        let f = extract_features(&s, &FeatureLayout::default()).unwrap();
        // Δ|i| occupies entries 40 + 2·19 .. 40 + 3·19.
        let di = &f.values[40 + 38..40 + 57];
        let nonzero: Vec<f64> = f.values[40..]
            .iter()
            .copied()
            .filter(|v| *v != 0.0)
            .collect();
        assert_eq!(nonzero, vec![1.0]);
        assert_eq!(di[9], 1.0);
    }

    #[test]
    fn window_outside_stream_rejected() {
        let mut s = flat_stream(1, [1.0; 4]);
        s.window.event_start = 5;
        assert!(matches!(
            extract_features(&s, &FeatureLayout::default()),
            Err(DatagenError::Window(_))
        ));
        let mut s = flat_stream(1, [1.0; 4]);
        s.window.event_end = 25;
        assert!(extract_features(&s, &FeatureLayout::default()).is_err());
    }
}
