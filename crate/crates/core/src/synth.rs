//! Seeded multi-domain bearing vibration generator.
//!
//! A localized race defect produces one impact per ball pass. Each impact
//! excites a structural resonance that rings down exponentially, so a fault
//! signal is an impulse train at the ball-pass frequency convolved with a
//! damped resonance, shaped by the machine's transfer path and buried in
//! sensor noise. Inner-race defects rotate with the shaft and pass in and
//! out of the load zone, which amplitude-modulates their impacts at the
//! shaft rate; outer-race defects are stationary.
//!
//! Domains differ in shaft speed, bearing geometry (ball-pass ratios),
//! resonance, damping, transfer tilt and noise, which is the kind of shift
//! separating real test rigs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FaultLabel, SignalSegment};
use crate::error::{Error, Result};
use crate::rng;
use crate::signal::{self, TARGET_RATE_HZ};

/// Frequency at which the transfer tilt has unit gain.
const TILT_REFERENCE_HZ: f64 = 1000.0;
/// Ring-down is truncated once the envelope drops below this.
const RING_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub name: String,
    /// Shaft rotation frequency in Hz.
    pub shaft_hz: f64,
    /// Inner-race ball-pass frequency as a multiple of `shaft_hz`.
    pub bpfi_ratio: f64,
    /// Outer-race ball-pass frequency as a multiple of `shaft_hz`.
    pub bpfo_ratio: f64,
    /// Carrier frequency of the excited resonance in Hz.
    pub resonance_hz: f64,
    /// Exponential ring-down rate in 1/s; `inf` gives bare impulses.
    pub decay: f64,
    /// Signal-to-noise ratio in dB; `inf` (or `null` in JSON) disables noise.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    /// Spectral tilt exponent: bins are scaled by `(f / 1 kHz)^transfer_gain`.
    pub transfer_gain: f64,
    pub seed: u64,
    /// Standard deviation of impact timing jitter as a fraction of the period.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Depth of the shaft-rate amplitude modulation of inner-race impacts.
    #[serde(default = "default_modulation")]
    pub inner_modulation: f64,
    /// Half-width of the per-segment shaft speed range as a fraction of
    /// `shaft_hz`; each segment runs at `shaft_hz * U(1 - s, 1 + s)`.
    #[serde(default)]
    pub speed_spread: f64,
}

fn default_jitter() -> f64 {
    0.01
}

fn default_modulation() -> f64 {
    0.5
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("domain {}: {m}", self.name)));
        if self.name.is_empty() {
            return Err(Error::config("domain name must be non-empty"));
        }
        if !(self.shaft_hz > 0.0 && self.shaft_hz.is_finite()) {
            return fail(format!("shaft_hz {} must be positive", self.shaft_hz));
        }
        if !(self.bpfi_ratio > self.bpfo_ratio && self.bpfo_ratio > 1.0) {
            return fail(format!(
                "need bpfi_ratio > bpfo_ratio > 1, got {} and {}",
                self.bpfi_ratio, self.bpfo_ratio
            ));
        }
        if !(self.resonance_hz > 0.0 && self.resonance_hz < TARGET_RATE_HZ / 2.0) {
            return fail(format!("resonance_hz {} must lie in (0, 12800)", self.resonance_hz));
        }
        if !(self.decay > 0.0) {
            return fail(format!("decay {} must be positive", self.decay));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return fail("snr_db must be a number or +inf".to_string());
        }
        if !self.transfer_gain.is_finite() {
            return fail("transfer_gain must be finite".to_string());
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return fail(format!("jitter {} must lie in [0, 0.5)", self.jitter));
        }
        if !(0.0..1.0).contains(&self.inner_modulation) {
            return fail(format!("inner_modulation {} must lie in [0, 1)", self.inner_modulation));
        }
        if !(0.0..0.5).contains(&self.speed_spread) {
            return fail(format!("speed_spread {} must lie in [0, 0.5)", self.speed_spread));
        }
        if self.fault_hz(FaultLabel::Inner) * (1.0 + self.speed_spread) >= TARGET_RATE_HZ / 2.0 {
            return fail("fault frequency above Nyquist".to_string());
        }
        Ok(())
    }

    pub fn fault_hz(&self, label: FaultLabel) -> f64 {
        match label {
            FaultLabel::Inner => self.shaft_hz * self.bpfi_ratio,
            FaultLabel::Outer => self.shaft_hz * self.bpfo_ratio,
        }
    }

    /// Impulse repetition period in whole samples.
    pub fn period_samples(&self, label: FaultLabel) -> usize {
        libm::round(TARGET_RATE_HZ / self.fault_hz(label)).max(1.0) as usize
    }
}

/// Damped resonance impulse response `e^{-decay t} cos(2 pi f_r t)`, which
/// tends to a unit impulse as `decay -> inf`.
fn ring_kernel(spec: &SyntheticDomainSpec, max_len: usize) -> Vec<f64> {
    if spec.decay.is_infinite() {
        return vec![1.0];
    }
    let dt = 1.0 / TARGET_RATE_HZ;
    let n = (libm::ceil(libm::log(1.0 / RING_FLOOR) / (spec.decay * dt)) as usize).clamp(1, max_len);
    (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            libm::exp(-spec.decay * t) * libm::cos(2.0 * PI * spec.resonance_hz * t)
        })
        .collect()
}

/// Scales every spectral bin by `(f / f_ref)^gain` (DC bin left alone).
fn apply_tilt(x: &mut [f64], gain: f64) -> Result<()> {
    if gain == 0.0 {
        return Ok(());
    }
    let n = x.len();
    let mut spec = signal::fft(x)?;
    for k in 1..n {
        let bin = k.min(n - k);
        let f = bin as f64 * TARGET_RATE_HZ / n as f64;
        let g = libm::pow(f / TILT_REFERENCE_HZ, gain);
        spec.re[k] *= g;
        spec.im[k] *= g;
    }
    let back = signal::ifft(&spec)?;
    x.copy_from_slice(&back.re);
    Ok(())
}

/// Raw (un-normalized) waveform before noise.
fn clean_waveform<R: Rng + ?Sized>(spec: &SyntheticDomainSpec, label: FaultLabel, window: usize, rng: &mut R) -> Vec<f64> {
    let period = spec.period_samples(label);
    let kernel = ring_kernel(spec, window);
    let mut x = vec![0.0; window];
    let start = rng.random_range(0..period);
    let mph = rng.random_range(0.0..2.0 * PI);
    let jitter_sd = spec.jitter * period as f64;
    let mut j = 0usize;
    loop {
        let nominal = (start + j * period) as f64;
        if nominal >= window as f64 {
            break;
        }
        let jit = if jitter_sd > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            jitter_sd * z
        } else {
            0.0
        };
        j += 1;
        let pos = libm::round(nominal + jit);
        if pos < 0.0 || pos >= window as f64 {
            continue;
        }
        let pos = pos as usize;
        let amp = match label {
            FaultLabel::Inner => {
                let t = pos as f64 / TARGET_RATE_HZ;
                1.0 + spec.inner_modulation * libm::cos(2.0 * PI * spec.shaft_hz * t + mph)
            }
            FaultLabel::Outer => 1.0,
        };
        for (k, h) in kernel.iter().enumerate() {
            let Some(slot) = x.get_mut(pos + k) else { break };
            *slot += amp * h;
        }
    }
    x
}

/// One z-scored segment of `window` samples at 25.6 kHz.
pub fn synth_segment<R: Rng + ?Sized>(
    spec: &SyntheticDomainSpec,
    label: FaultLabel,
    window: usize,
    rng: &mut R,
) -> Result<SignalSegment> {
    spec.validate()?;
    if window == 0 {
        return Err(Error::config("window must be positive"));
    }
    let mut x = if spec.speed_spread > 0.0 {
        let mut at_speed = spec.clone();
        at_speed.shaft_hz *= rng.random_range(1.0 - spec.speed_spread..=1.0 + spec.speed_spread);
        clean_waveform(&at_speed, label, window, rng)
    } else {
        clean_waveform(spec, label, window, rng)
    };
    if spec.transfer_gain != 0.0 {
        apply_tilt(&mut x, spec.transfer_gain)?;
    }
    if spec.snr_db.is_finite() {
        let power = x.iter().map(|v| v * v).sum::<f64>() / window as f64;
        let sigma = libm::sqrt(power / libm::pow(10.0, spec.snr_db / 10.0));
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise: {e}")))?;
            for v in &mut x {
                *v += noise.sample(rng);
            }
        }
    }
    Ok(SignalSegment {
        samples: signal::zscore(&x),
        sample_rate: TARGET_RATE_HZ,
        label,
        domain: spec.name.clone(),
    })
}

/// Balanced domain of `2 * n_per_class` segments, alternating inner and
/// outer, drawn from the `data` stream of `derive(run_seed, spec.seed)`.
pub fn synth_domain(spec: &SyntheticDomainSpec, n_per_class: usize, window: usize, run_seed: u64) -> Result<Vec<SignalSegment>> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    let mut rng = rng::stream(rng::derive_indexed(run_seed, spec.seed), "data");
    let mut out = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for label in FaultLabel::ALL {
            out.push(synth_segment(spec, label, window, &mut rng)?);
        }
    }
    Ok(out)
}

fn domain(
    name: &str,
    shaft_hz: f64,
    ratios: (f64, f64),
    resonance_hz: f64,
    decay: f64,
    snr_db: f64,
    transfer_gain: f64,
    seed: u64,
) -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        name: name.to_string(),
        shaft_hz,
        bpfi_ratio: ratios.0,
        bpfo_ratio: ratios.1,
        resonance_hz,
        decay,
        snr_db,
        transfer_gain,
        seed,
        jitter: default_jitter(),
        inner_modulation: default_modulation(),
        speed_spread: 0.0,
    }
}

/// The five default domains `synthA..synthE`. They share the fault kinematics
/// and differ in transmission path (resonance, ring-down, spectral tilt) and
/// noise level.
pub fn default_domains() -> Vec<SyntheticDomainSpec> {
    vec![
        domain("synthA", 30.0, (5.4, 3.3), 3000.0, 800.0, 10.0, 0.0, 11),
        domain("synthB", 30.0, (5.4, 3.3), 4500.0, 1200.0, 6.0, 0.3, 12),
        domain("synthC", 30.0, (5.4, 3.3), 2200.0, 600.0, 8.0, -0.3, 13),
        domain("synthD", 30.0, (5.4, 3.3), 6000.0, 1500.0, 4.0, 0.5, 14),
        domain("synthE", 30.0, (5.4, 3.3), 3500.0, 1000.0, 12.0, -0.5, 15),
    ]
}

/// Five near-identical, high-SNR domains in which the fault classes are easy
/// to separate everywhere.
pub fn separable_domains() -> Vec<SyntheticDomainSpec> {
    ["sepA", "sepB", "sepC", "sepD", "sepE"]
        .iter()
        .enumerate()
        .map(|(i, n)| domain(n, 30.0, (5.4, 3.6), 3000.0, 1000.0, 40.0, 0.0, 100 + i as u64))
        .collect()
}

/// Envelope-spectrum classifier that knows the domain's kinematics: squares
/// the signal, then compares spectral energy at the first harmonics of the
/// inner and outer ball-pass frequencies.
pub fn oracle_classify(samples: &[f64], spec: &SyntheticDomainSpec) -> Result<FaultLabel> {
    let env: Vec<f64> = samples.iter().map(|v| v * v).collect();
    let mean = env.iter().sum::<f64>() / env.len() as f64;
    let centered: Vec<f64> = env.iter().map(|v| v - mean).collect();
    let mag = signal::magnitude_spectrum(&centered)?;
    let res = TARGET_RATE_HZ / samples.len() as f64;
    let score = |label: FaultLabel| -> f64 {
        let f = TARGET_RATE_HZ / spec.period_samples(label) as f64;
        (1..=3)
            .map(|h| {
                let c = libm::round(h as f64 * f / res) as usize;
                (c.saturating_sub(1)..=c + 1).filter_map(|k| mag.get(k)).fold(0.0f64, |m, v| m.max(*v))
            })
            .sum()
    };
    Ok(if score(FaultLabel::Inner) >= score(FaultLabel::Outer) {
        FaultLabel::Inner
    } else {
        FaultLabel::Outer
    })
}
