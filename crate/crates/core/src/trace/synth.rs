//! Synthetic SpO2 trace generator.
//!
//! Each case is an AR(1) noise process around a per-case baseline, with
//! randomly timed desaturation events layered on top. An event descends
//! exponentially from the baseline to a drawn nadir depth, then recovers
//! exponentially back. Overlapping events combine by taking the deepest
//! deviation. Values are clipped to the reportable SpO2 range, quantized to
//! two decimals, and thinned by a per-minute missingness draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SpO2Trace, TraceError, SPO2_MAX, SPO2_MIN};

/// Autocorrelation of the minute-to-minute noise process.
const AR_COEFF: f64 = 0.85;
/// Recovery is slower than descent by this factor.
const RECOVERY_FACTOR: f64 = 2.0;
/// An event stops contributing once its deviation decays below this.
const DEVIATION_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of cases to generate.
    pub n_cases: usize,
    /// Inclusive range of case durations, in minutes.
    pub duration_minutes: (usize, usize),
    /// Inclusive range the per-case resting baseline is drawn from.
    pub baseline_spo2: (f64, f64),
    /// Expected desaturation onsets per case-hour.
    pub event_rate_per_hour: f64,
    /// Inclusive range of event nadir values.
    pub event_depth: (f64, f64),
    /// Half-life of the exponential descent, in minutes.
    pub event_halflife_minutes: f64,
    /// Standard deviation of AR(1) innovations.
    pub noise_std: f64,
    /// Probability that any given minute's reading is missing.
    pub missing_rate: f64,
    /// Master seed; every case derives its own stream from it.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 200,
            duration_minutes: (120, 300),
            baseline_spo2: (96.0, 99.0),
            // Rate and descent speed are calibrated together: the rate puts
            // labeled prevalence near the 1.7% hypoxemia share seen in
            // practice, and the half-life leaves a visible minutes-long
            // descent before a trace crosses the exclusion threshold, so
            // warnings are learnable at all.
            event_rate_per_hour: 0.58,
            event_depth: (80.0, 94.5),
            event_halflife_minutes: 6.0,
            noise_std: 0.25,
            missing_rate: 0.02,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        let err = |field: &'static str, reason: String| Err(TraceError::Config { field, reason });
        if self.n_cases == 0 {
            return err("n_cases", "must be at least 1".into());
        }
        let (dlo, dhi) = self.duration_minutes;
        if dlo == 0 || dlo > dhi {
            return err(
                "duration_minutes",
                format!("({dlo}, {dhi}) is not a nonempty positive range"),
            );
        }
        let (blo, bhi) = self.baseline_spo2;
        if !blo.is_finite() || !bhi.is_finite() || blo > bhi || blo < SPO2_MIN || bhi > SPO2_MAX {
            return err(
                "baseline_spo2",
                format!("({blo}, {bhi}) must be an ordered range within [{SPO2_MIN}, {SPO2_MAX}]"),
            );
        }
        if !self.event_rate_per_hour.is_finite()
            || self.event_rate_per_hour < 0.0
            || self.event_rate_per_hour > 60.0
        {
            return err(
                "event_rate_per_hour",
                format!("{} must be in [0, 60]", self.event_rate_per_hour),
            );
        }
        let (elo, ehi) = self.event_depth;
        if !elo.is_finite() || !ehi.is_finite() || elo > ehi || elo < SPO2_MIN || ehi > SPO2_MAX {
            return err(
                "event_depth",
                format!("({elo}, {ehi}) must be an ordered range within [{SPO2_MIN}, {SPO2_MAX}]"),
            );
        }
        if !(self.event_halflife_minutes.is_finite() && self.event_halflife_minutes > 0.0) {
            return err(
                "event_halflife_minutes",
                format!("{} must be positive", self.event_halflife_minutes),
            );
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return err("noise_std", format!("{} must be nonnegative", self.noise_std));
        }
        if !(self.missing_rate.is_finite() && (0.0..1.0).contains(&self.missing_rate)) {
            return err(
                "missing_rate",
                format!("{} must be in [0, 1)", self.missing_rate),
            );
        }
        Ok(())
    }
}

/// A desaturation event as drawn by the generator, before clipping or noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthEvent {
    /// Minute the event begins: the pre-oxygenation shelf when one is
    /// present, otherwise the descent itself.
    pub onset: usize,
    /// Minute the full drawn depth is reached (always at least two minutes
    /// after onset, though it may fall past the end of a short case).
    pub nadir_minute: usize,
    /// SpO2 value the event descends to.
    pub depth: f64,
}

struct ActiveEvent {
    onset: usize,
    /// Minutes of pre-oxygenation shelf before the descent (0 when absent).
    prelude_len: usize,
    descent_len: usize,
    halflife: f64,
    /// Deviation from baseline at the nadir (nonpositive).
    full_drop: f64,
    /// Height of the pre-oxygenation shelf above baseline (0 when absent).
    prelude_amp: f64,
}

impl ActiveEvent {
    /// Deviation contributed at absolute minute `t`, or `None` once decayed
    /// past the floor.
    fn deviation_at(&self, t: usize) -> Option<f64> {
        debug_assert!(t >= self.onset);
        let since_onset = t - self.onset;
        if since_onset < self.prelude_len {
            return Some(self.prelude_amp);
        }
        let dt = (since_onset - self.prelude_len) as f64;
        let len = self.descent_len as f64;
        let dev = if dt <= len {
            // Normalized so the drawn depth is hit exactly at the nadir,
            // descending from wherever the shelf left the trace.
            let shape = 1.0 - (-dt / self.halflife).exp2();
            let shape_at_nadir = 1.0 - (-len / self.halflife).exp2();
            self.prelude_amp + (self.full_drop - self.prelude_amp) * shape / shape_at_nadir
        } else {
            let rec = self.halflife * RECOVERY_FACTOR;
            self.full_drop * (-(dt - len) / rec).exp2()
        };
        (dev.abs() >= DEVIATION_FLOOR || dt <= len).then_some(dev)
    }
}

/// Generates one case, returning the trace together with the drawn events.
///
/// `case_index` selects an independent random stream under the config's
/// master seed, so cases can be produced in any order or in isolation.
pub fn simulate_case(
    cfg: &SynthConfig,
    case_index: usize,
) -> Result<(SpO2Trace, Vec<SynthEvent>), TraceError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(case_index as u64);

    let duration = rng.gen_range(cfg.duration_minutes.0..=cfg.duration_minutes.1);
    let baseline = rng.gen_range(cfg.baseline_spo2.0..=cfg.baseline_spo2.1);
    let p_onset = cfg.event_rate_per_hour / 60.0;

    let mut events = Vec::new();
    let mut active: Vec<ActiveEvent> = Vec::new();
    let mut ar = 0.0;
    let mut samples = Vec::with_capacity(duration);
    for t in 0..duration {
        let eps: f64 = rng.sample(StandardNormal);
        ar = AR_COEFF * ar + cfg.noise_std * eps;

        if rng.gen::<f64>() < p_onset {
            let depth = rng.gen_range(cfg.event_depth.0..=cfg.event_depth.1);
            // Severity shapes the dynamics: shallow dips happen abruptly
            // (probe artifacts, position changes) while deep desaturations
            // build gradually (progressive deterioration), so an early
            // descent's danger depends jointly on its level and its shape.
            let (lo, hi) = cfg.event_depth;
            let shallowness = if hi > lo { (depth - lo) / (hi - lo) } else { 0.5 };
            let speed = 1.8 - 1.45 * shallowness;
            let halflife = cfg.event_halflife_minutes * speed * rng.gen_range(0.85..=1.18);
            let descent_len = ((2.0 * halflife).ceil() as usize).max(2);
            events.push(SynthEvent {
                onset: t,
                nadir_minute: t + descent_len,
                depth,
            });
            active.push(ActiveEvent {
                onset: t,
                descent_len,
                halflife,
                full_drop: (depth - baseline).min(0.0),
            });
        }

        let mut event_dev = 0.0_f64;
        active.retain(|ev| match ev.deviation_at(t) {
            Some(dev) => {
                event_dev = event_dev.min(dev);
                true
            }
            None => false,
        });

        let value = (baseline + ar + event_dev).clamp(SPO2_MIN, SPO2_MAX);
        let quantized = (value * 100.0).round() / 100.0;
        let missing = rng.gen::<f64>() < cfg.missing_rate;
        samples.push((!missing).then_some(quantized));
    }

    let trace = SpO2Trace::new(format!("case{case_index:05}"), samples)?;
    Ok((trace, events))
}

/// Generates the full configured cohort.
pub fn generate_synthetic_cases(cfg: &SynthConfig) -> Result<Vec<SpO2Trace>, TraceError> {
    cfg.validate()?;
    (0..cfg.n_cases)
        .map(|i| simulate_case(cfg, i).map(|(trace, _)| trace))
        .collect()
}
