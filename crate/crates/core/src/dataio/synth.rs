//! Synthetic stand-in data: white-noise background, a chirp class and a
//! sine-Gaussian class, each seen by two detectors.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, BACKGROUND, DETECTORS, SAMPLE_LEN, SIGNAL};
use crate::error::{Error, Result};
use crate::seed;

/// Sampling rate the time axis is expressed in, Hz.
pub const SAMPLE_RATE: f64 = 4096.0;
const NYQUIST: f64 = SAMPLE_RATE / 2.0;

pub const BACKGROUND_CLASS: &str = "background";
pub const BBH_CLASS: &str = "bbh";
pub const SGLF_CLASS: &str = "sglf";

/// Second-detector view of an injection: scaled by `ratio` and delayed by
/// `shift` samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorTransform {
    pub ratio: (f64, f64),
    pub shift: (i32, i32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub background_count: usize,
    pub bbh_count: usize,
    pub sglf_count: usize,
    pub noise_std: f64,
    /// Chirp start and end frequency ranges, Hz.
    pub bbh_f_start: (f64, f64),
    pub bbh_f_end: (f64, f64),
    /// Exponent of the rising envelope `(t / T)^p`.
    pub bbh_envelope_power: f64,
    pub bbh_amplitude: (f64, f64),
    pub sglf_frequency: (f64, f64),
    /// Gaussian width, seconds.
    pub sglf_width: (f64, f64),
    /// Gaussian center, seconds from window start.
    pub sglf_center: (f64, f64),
    pub sglf_amplitude: (f64, f64),
    pub detector2: DetectorTransform,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            background_count: 1000,
            bbh_count: 1000,
            sglf_count: 1000,
            noise_std: 1.0,
            bbh_f_start: (40.0, 100.0),
            bbh_f_end: (200.0, 500.0),
            bbh_envelope_power: 2.0,
            bbh_amplitude: (1.25, 4.5),
            sglf_frequency: (40.0, 150.0),
            sglf_width: (0.004, 0.012),
            sglf_center: (0.015, 0.034),
            sglf_amplitude: (1.0, 3.5),
            detector2: DetectorTransform {
                ratio: (0.6, 1.0),
                shift: (-10, 10),
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn with_counts(mut self, per_class: usize) -> Self {
        self.background_count = per_class;
        self.bbh_count = per_class;
        self.sglf_count = per_class;
        self
    }

    /// All injections switched off.
    pub fn without_injections(mut self) -> Self {
        self.bbh_amplitude = (0.0, 0.0);
        self.sglf_amplitude = (0.0, 0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let window = SAMPLE_LEN as f64 / SAMPLE_RATE;
        let range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max) {
                return Err(Error::Config(format!(
                    "{name} = ({lo}, {hi}) must satisfy {min} <= lo <= hi <= {max}"
                )));
            }
            Ok(())
        };
        let positive_freq = |name: &str, r: (f64, f64)| -> Result<()> {
            range(name, r, 0.0, NYQUIST)?;
            if r.0 <= 0.0 || r.1 >= NYQUIST {
                return Err(Error::Config(format!(
                    "{name} must lie strictly between 0 and {NYQUIST} Hz"
                )));
            }
            Ok(())
        };
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std = {} must be >= 0", self.noise_std)));
        }
        positive_freq("bbh_f_start", self.bbh_f_start)?;
        positive_freq("bbh_f_end", self.bbh_f_end)?;
        positive_freq("sglf_frequency", self.sglf_frequency)?;
        range("bbh_amplitude", self.bbh_amplitude, 0.0, f64::MAX)?;
        range("sglf_amplitude", self.sglf_amplitude, 0.0, f64::MAX)?;
        range("sglf_width", self.sglf_width, f64::MIN_POSITIVE, f64::MAX)?;
        range("sglf_center", self.sglf_center, 0.0, window)?;
        range("detector2_ratio", self.detector2.ratio, f64::MIN, f64::MAX)?;
        if !(self.bbh_envelope_power.is_finite() && self.bbh_envelope_power >= 0.0) {
            return Err(Error::Config("bbh_envelope_power must be >= 0".into()));
        }
        let (s0, s1) = self.detector2.shift;
        if s0 > s1 || s0.unsigned_abs() as usize >= SAMPLE_LEN || s1.unsigned_abs() as usize >= SAMPLE_LEN {
            return Err(Error::Config(format!(
                "detector2_shift = ({s0}, {s1}) must be ordered and shorter than the window"
            )));
        }
        Ok(())
    }
}

/// Drawn parameters of one chirp injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BbhParams {
    pub amplitude: f64,
    pub f_start: f64,
    pub f_end: f64,
    pub envelope_power: f64,
    pub phase: f64,
    pub ratio: f64,
    pub shift: i32,
}

/// Drawn parameters of one sine-Gaussian injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SglfParams {
    pub amplitude: f64,
    pub frequency: f64,
    pub width: f64,
    pub center: f64,
    pub phase: f64,
    pub ratio: f64,
    pub shift: i32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Injection {
    None,
    Bbh(BbhParams),
    Sglf(SglfParams),
}

impl BbhParams {
    /// `a(t) sin(2 pi (f0 t + k t^2 / 2) + phase)` with `a(t) = A ((i+1)/L)^p`.
    pub fn strain(&self, i: usize) -> f64 {
        let t = i as f64 / SAMPLE_RATE;
        let duration = SAMPLE_LEN as f64 / SAMPLE_RATE;
        let k = (self.f_end - self.f_start) / duration;
        let env = ((i + 1) as f64 / SAMPLE_LEN as f64).powf(self.envelope_power);
        self.amplitude * env * (2.0 * PI * (self.f_start * t + 0.5 * k * t * t) + self.phase).sin()
    }
}

impl SglfParams {
    /// `A sin(2 pi f t + phase) exp(-(t - t0)^2 / (2 tau^2))`.
    pub fn strain(&self, i: usize) -> f64 {
        let t = i as f64 / SAMPLE_RATE;
        let g = (-(t - self.center).powi(2) / (2.0 * self.width * self.width)).exp();
        self.amplitude * (2.0 * PI * self.frequency * t + self.phase).sin() * g
    }
}

impl Injection {
    /// Injected value at step `i` of `detector`, zero outside the window
    /// after the second detector's shift.
    pub fn at(&self, i: usize, detector: usize) -> f64 {
        let (ratio, shift) = match self {
            Injection::None => return 0.0,
            Injection::Bbh(p) => (p.ratio, p.shift),
            Injection::Sglf(p) => (p.ratio, p.shift),
        };
        let (scale, j) = if detector == 0 {
            (1.0, i as i64)
        } else {
            (ratio, i as i64 - shift as i64)
        };
        if j < 0 || j >= SAMPLE_LEN as i64 {
            return 0.0;
        }
        let j = j as usize;
        scale
            * match self {
                Injection::Bbh(p) => p.strain(j),
                Injection::Sglf(p) => p.strain(j),
                Injection::None => 0.0,
            }
    }

    /// Noiseless `200 x 2` template.
    pub fn template(&self) -> Vec<f64> {
        (0..SAMPLE_LEN)
            .flat_map(|i| (0..DETECTORS).map(move |d| (i, d)))
            .map(|(i, d)| self.at(i, d))
            .collect()
    }
}

/// Generated data with the injection parameters of every sample.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub dataset: LabeledDataset,
    pub injections: Vec<Injection>,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Background, chirp and sine-Gaussian samples in that order. Every sample
/// draws from its own stream derived from `(seed, class, index)`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticSet> {
    config.validate()?;
    let mut dataset = LabeledDataset::new();
    dataset.seed = Some(config.seed);
    let mut injections = Vec::new();
    let classes = [
        (BACKGROUND_CLASS, BACKGROUND, config.background_count),
        (BBH_CLASS, SIGNAL, config.bbh_count),
        (SGLF_CLASS, SIGNAL, config.sglf_count),
    ];
    let mut row = vec![0.0f32; SAMPLE_LEN * DETECTORS];
    for (name, label, count) in classes {
        let id = dataset.add_class(name, label)?;
        let class_seed = seed::derive(config.seed, name);
        for i in 0..count {
            let mut rng = seed::rng(seed::indexed(class_seed, i as u64));
            let injection = draw_injection(config, name, &mut rng);
            for (k, v) in row.iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                *v = (config.noise_std * noise + injection.at(k / DETECTORS, k % DETECTORS)) as f32;
            }
            dataset.push(id, &row)?;
            injections.push(injection);
        }
    }
    Ok(SyntheticSet {
        dataset,
        injections,
    })
}

fn draw_injection<R: Rng>(config: &SynthConfig, class: &str, rng: &mut R) -> Injection {
    let detector2 = |rng: &mut R| {
        let (s0, s1) = config.detector2.shift;
        (uniform(rng, config.detector2.ratio), rng.random_range(s0..=s1))
    };
    match class {
        BBH_CLASS => {
            let amplitude = uniform(rng, config.bbh_amplitude);
            let f_start = uniform(rng, config.bbh_f_start);
            let f_end = uniform(rng, config.bbh_f_end);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (ratio, shift) = detector2(rng);
            Injection::Bbh(BbhParams {
                amplitude,
                f_start,
                f_end,
                envelope_power: config.bbh_envelope_power,
                phase,
                ratio,
                shift,
            })
        }
        SGLF_CLASS => {
            let amplitude = uniform(rng, config.sglf_amplitude);
            let frequency = uniform(rng, config.sglf_frequency);
            let width = uniform(rng, config.sglf_width);
            let center = uniform(rng, config.sglf_center);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (ratio, shift) = detector2(rng);
            Injection::Sglf(SglfParams {
                amplitude,
                frequency,
                width,
                center,
                phase,
                ratio,
                shift,
            })
        }
        _ => Injection::None,
    }
}
