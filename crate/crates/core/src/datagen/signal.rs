use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EventClass, EventKind, ScenarioConfig};

/// Channel order inside a stream: `|v|` (pu), `δ_v` (deg), `|i|` (pu), `δ_i` (deg).
pub const CHANNELS: [&str; 4] = ["v_mag", "v_ang", "i_mag", "i_ang"];

const BASE_CURRENT: [f64; 4] = [0.8, 0.6, 0.45, 0.3];
const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventWindow {
    pub pre_start: usize,
    pub event_start: usize,
    /// Last sample considered part of the event.
    pub event_end: usize,
}

/// One second of four-channel phasor samples from each reporting PMU.
#[derive(Debug, Clone, PartialEq)]
pub struct PmuStream {
    pub class: EventClass,
    /// PMU indices (1–4) in ascending order.
    pub pmus: Vec<u8>,
    /// `channels[k][c][t]`: PMU `pmus[k]`, channel `c` (see [`CHANNELS`]), sample `t`.
    pub channels: Vec<[Vec<f64>; 4]>,
    pub reporting_rate: u32,
    pub window: EventWindow,
}

impl PmuStream {
    pub fn duration(&self) -> usize {
        self.channels.first().map_or(0, |c| c[0].len())
    }
}

/// Operating point of one experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventParams {
    /// Loading level in percent of the average load.
    pub loading: f64,
    /// Load step in percent; only used by the load change class.
    pub change_percent: f64,
}

/// Steady-state `[|v|, δ_v, |i|, δ_i]` at a PMU for a loading level.
pub fn baseline(pmu: u8, loading: f64) -> [f64; 4] {
    let l = loading / 100.0;
    let p = pmu as f64;
    let v_ang = -(1.5 + 0.5 * p) * l;
    [
        1.0 - 0.01 * p * l,
        v_ang,
        BASE_CURRENT[pmu as usize - 1] * l,
        v_ang - 25.0,
    ]
}

/// Capacitor switching lasts one cycle (16.67 ms).
pub fn cap_dip_samples(rate: u32) -> usize {
    ((0.01667 * rate as f64).round() as usize).max(1)
}

/// Recloser operation lasts five cycles (83 ms).
pub fn reconfiguration_samples(rate: u32) -> usize {
    ((0.083 * rate as f64).round() as usize).max(1)
}

/// Transient and persistent template multipliers at every sample.
fn template<R: Rng + ?Sized>(
    kind: EventKind,
    params: EventParams,
    rate: u32,
    start: usize,
    len: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let mut transient = vec![0.0; len];
    let mut level = vec![0.0; len];
    match kind {
        EventKind::CapSwitch => {
            let end = (start + cap_dip_samples(rate)).min(len);
            transient[start..end].fill(1.0);
        }
        EventKind::OltcSwitch => {
            let secs: f64 = rng.random_range(0.030..=0.200);
            let hold = ((secs * rate as f64).round() as usize).max(1);
            let end = (start + hold).min(len);
            transient[start..end].fill(1.0);
        }
        EventKind::LoadChange => {
            level[start..].fill(params.change_percent / 10.0);
        }
        EventKind::Reconfiguration => {
            let end = (start + reconfiguration_samples(rate)).min(len);
            transient[start..end].fill(1.0);
            level[end..].fill(1.0);
        }
    }
    (transient, level)
}

/// Renders one event at the given operating point. Randomness covers the
/// event onset and, for OLTC events, the hold time.
pub fn generate_event<R: Rng + ?Sized>(
    class: EventClass,
    params: EventParams,
    rng: &mut R,
    config: &ScenarioConfig,
) -> PmuStream {
    let rate = config.reporting_rate;
    let len = rate as usize;
    let start = rng.random_range(len / 4..=len / 2);
    let window = EventWindow {
        pre_start: 0,
        event_start: start,
        event_end: (len - 1).min(start + len / 3),
    };
    let kind = class.kind();
    let (transient, level) = template(kind, params, rate, start, len, rng);
    let response = config.responses.get(kind);
    let l = params.loading / 100.0;
    let pmus = config.sorted_pmus();
    let channels = pmus
        .iter()
        .map(|&p| {
            let base = baseline(p, params.loading);
            let amp = config.gain_table[class.index()][p as usize - 1] * l;
            std::array::from_fn(|c| {
                (0..len)
                    .map(|t| {
                        let d = amp
                            * (transient[t] * response.transient[c] + level[t] * response.level[c]);
                        if c % 2 == 0 {
                            base[c] * (1.0 + d)
                        } else {
                            base[c] + d
                        }
                    })
                    .collect()
            })
        })
        .collect();
    PmuStream {
        class,
        pmus,
        channels,
        reporting_rate: rate,
        window,
    }
}

/// Multiplies every sample by `1 + ε`, `ε ~ N(0, variance)`. Magnitudes are
/// floored at a small positive value.
pub fn add_noise<R: Rng + ?Sized>(stream: &PmuStream, variance: f64, rng: &mut R) -> PmuStream {
    let mut out = stream.clone();
    if variance == 0.0 {
        return out;
    }
    let sd = variance.sqrt();
    for pmu in &mut out.channels {
        for (c, ch) in pmu.iter_mut().enumerate() {
            for v in ch.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v *= 1.0 + sd * e;
                if c % 2 == 0 {
                    *v = v.max(MAGNITUDE_FLOOR);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn class(id: u8) -> EventClass {
        EventClass::new(id).unwrap()
    }

    fn params(loading: f64, pct: f64) -> EventParams {
        EventParams {
            loading,
            change_percent: pct,
        }
    }

    #[test]
    fn sample_counts() {
        // round(0.01667·60) = 1, round(0.01667·120) = 2, round(0.083·60) = 5, round(0.083·120) = 10.
        assert_eq!(cap_dip_samples(60), 1);
        assert_eq!(cap_dip_samples(120), 2);
        assert_eq!(reconfiguration_samples(60), 5);
        assert_eq!(reconfiguration_samples(120), 10);
    }

    #[test]
    fn zero_load_change_is_flat() {
        let cfg = ScenarioConfig::default();
        let s = generate_event(
            class(9),
            params(80.0, 0.0),
            &mut ChaCha8Rng::seed_from_u64(1),
            &cfg,
        );
        for (k, &p) in s.pmus.iter().enumerate() {
            let b = baseline(p, 80.0);
            for c in 0..4 {
                assert!(s.channels[k][c].iter().all(|v| *v == b[c]));
            }
        }
    }

    #[test]
    fn cap_dip_lasts_one_sample_at_60() {
        let cfg = ScenarioConfig::default();
        let s = generate_event(
            class(2),
            params(100.0, 0.0),
            &mut ChaCha8Rng::seed_from_u64(3),
            &cfg,
        );
        let v = &s.channels[1][0];
        let base = baseline(2, 100.0)[0];
        let changed: Vec<usize> = (0..v.len()).filter(|&t| v[t] != base).collect();
        assert_eq!(changed, vec![s.window.event_start]);
        assert!(v[s.window.event_start] < base);
    }

    #[test]
    fn reconfiguration_transition_then_shift_at_120() {
        let cfg = ScenarioConfig {
            reporting_rate: 120,
            ..Default::default()
        };
        let s = generate_event(
            class(11),
            params(100.0, 0.0),
            &mut ChaCha8Rng::seed_from_u64(5),
            &cfg,
        );
        let v = &s.channels[0][0];
        let start = s.window.event_start;
        let trans = v[start];
        assert!((start..start + 10).all(|t| v[t] == trans));
        let shifted = v[start + 10];
        assert_ne!(shifted, trans);
        assert!(v[start + 10..].iter().all(|x| *x == shifted));
        assert_ne!(shifted, v[0]);
    }

    #[test]
    fn oltc_returns_to_baseline() {
        let cfg = ScenarioConfig::default();
        for seed in 0..20 {
            let s = generate_event(
                class(6),
                params(90.0, 0.0),
                &mut ChaCha8Rng::seed_from_u64(seed),
                &cfg,
            );
            let v = &s.channels[1][2];
            let start = s.window.event_start;
            let held = v.iter().filter(|x| **x != v[0]).count();
            assert!((2..=12).contains(&held), "hold {held}");
            assert!(v[start..start + held].iter().all(|x| *x != v[0]));
            assert_eq!(*v.last().unwrap(), v[0]);
        }
    }

    #[test]
    fn window_invariants() {
        let cfg = ScenarioConfig::default();
        for seed in 0..50 {
            let s = generate_event(
                class(1),
                params(50.0, 0.0),
                &mut ChaCha8Rng::seed_from_u64(seed),
                &cfg,
            );
            let w = s.window;
            assert!(w.event_start > w.pre_start);
            assert!((15..=30).contains(&w.event_start));
            assert_eq!(w.event_end, w.event_start + 20);
            assert_eq!(s.duration(), 60);
            assert!(s.channels.iter().all(|p| p.iter().all(|c| c.len() == 60)));
        }
    }

    #[test]
    fn magnitudes_positive() {
        let cfg = ScenarioConfig::default();
        for id in 1..=13 {
            let s = generate_event(
                class(id),
                params(140.0, 25.0),
                &mut ChaCha8Rng::seed_from_u64(id as u64),
                &cfg,
            );
            let n = add_noise(&s, 0.05, &mut ChaCha8Rng::seed_from_u64(0));
            for p in &n.channels {
                assert!(p[0].iter().chain(&p[2]).all(|v| *v > 0.0));
            }
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let cfg = ScenarioConfig::default();
        let s = generate_event(
            class(4),
            params(70.0, 0.0),
            &mut ChaCha8Rng::seed_from_u64(0),
            &cfg,
        );
        assert_eq!(add_noise(&s, 0.0, &mut ChaCha8Rng::seed_from_u64(1)), s);
    }

    #[test]
    fn noise_variance_statistics() {
        let cfg = ScenarioConfig::default();
        let s = generate_event(
            class(10),
            params(100.0, 0.0),
            &mut ChaCha8Rng::seed_from_u64(0),
            &cfg,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rel = Vec::new();
        while rel.len() < 100_000 {
            let n = add_noise(&s, 0.05, &mut rng);
            for (pn, pc) in n.channels.iter().zip(&s.channels) {
                for c in [0, 2] {
                    rel.extend(pn[c].iter().zip(&pc[c]).map(|(a, b)| (a - b) / b));
                }
            }
        }
        let m = rel.iter().sum::<f64>() / rel.len() as f64;
        let var = rel.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (rel.len() - 1) as f64;
        assert!((var - 0.05).abs() < 0.05 * 0.05, "variance {var}");
    }

    #[test]
    fn noise_reproducible() {
        let cfg = ScenarioConfig::default();
        let s = generate_event(
            class(7),
            params(60.0, 0.0),
            &mut ChaCha8Rng::seed_from_u64(0),
            &cfg,
        );
        let a = add_noise(&s, 0.01, &mut ChaCha8Rng::seed_from_u64(9));
        let b = add_noise(&s, 0.01, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
