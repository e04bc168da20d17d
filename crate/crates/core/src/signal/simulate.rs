//! Received-signal model `r = h ⊗ x + n`, where `x` is a QPSK burst passed
//! through an emitter's hardware impairment chain.
//!
//! The impairment chain is a stand-in for real device fingerprints:
//! IQ imbalance → carrier frequency offset → phase-noise random walk →
//! cubic power-amplifier compression. Each parameter is drawn once per
//! emitter from a stratified uniform design so that emitters never collide.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::pools::{DatasetPools, PoolSplit};
use super::IqRecord;
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// Half-widths (or maxima) of the per-emitter parameter draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpairmentRanges {
    /// Gain imbalance drawn from `[0, v]` dB.
    pub gain_imbalance_db: f64,
    /// Phase imbalance drawn from `[0, v]` radians.
    pub phase_imbalance_rad: f64,
    /// Frequency offset drawn from `[-v, v]` cycles per sample.
    pub carrier_freq_offset: f64,
    /// Phase-noise step deviation drawn from `[0, v]` radians.
    pub phase_noise_std: f64,
    /// Cubic coefficient drawn from `[0, v]`.
    pub pa_cubic_coeff: f64,
}

impl Default for ImpairmentRanges {
    fn default() -> Self {
        Self {
            gain_imbalance_db: 3.0,
            phase_imbalance_rad: 15f64.to_radians(),
            carrier_freq_offset: 1e-4,
            phase_noise_std: 0.01,
            pa_cubic_coeff: 0.2,
        }
    }
}

/// Hardware impairments of one transmitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitterProfile {
    pub emitter_id: usize,
    pub iq_gain_imbalance: f64,
    pub iq_phase_imbalance: f64,
    pub carrier_freq_offset: f64,
    pub phase_noise_std: f64,
    pub pa_cubic_coeff: f64,
}

impl EmitterProfile {
    /// An emitter with no impairments at all.
    pub fn ideal(emitter_id: usize) -> Self {
        Self {
            emitter_id,
            iq_gain_imbalance: 0.0,
            iq_phase_imbalance: 0.0,
            carrier_freq_offset: 0.0,
            phase_noise_std: 0.0,
            pa_cubic_coeff: 0.0,
        }
    }

    /// Draws `count` profiles. Each parameter range is cut into `count`
    /// strata, strata are shuffled across emitters and a value is drawn
    /// uniformly inside each.
    pub fn draw_set<R: Rng + ?Sized>(count: usize, ranges: &ImpairmentRanges, rng: &mut R) -> Vec<Self> {
        let mut column = |lo: f64, hi: f64| -> Vec<f64> {
            let mut strata: Vec<usize> = (0..count).collect();
            strata.shuffle(rng);
            let width = (hi - lo) / count as f64;
            strata
                .into_iter()
                .map(|s| lo + width * (s as f64 + rng.random::<f64>()))
                .collect()
        };
        let gain = column(0.0, ranges.gain_imbalance_db);
        let phase = column(0.0, ranges.phase_imbalance_rad);
        let cfo = column(-ranges.carrier_freq_offset, ranges.carrier_freq_offset);
        let pn = column(0.0, ranges.phase_noise_std);
        let cubic = column(0.0, ranges.pa_cubic_coeff);
        (0..count)
            .map(|i| Self {
                emitter_id: i,
                iq_gain_imbalance: gain[i],
                iq_phase_imbalance: phase[i],
                carrier_freq_offset: cfo[i],
                phase_noise_std: pn[i],
                pa_cubic_coeff: cubic[i],
            })
            .collect()
    }

    /// Runs a clean baseband signal through the impairment chain.
    pub fn impair<R: Rng + ?Sized>(&self, payload: &[Complex64], rng: &mut R) -> Vec<Complex64> {
        let g = 10f64.powf(self.iq_gain_imbalance / 20.0);
        let (sin_phi, cos_phi) = self.iq_phase_imbalance.sin_cos();
        let mut walk = 0.0;
        payload
            .iter()
            .enumerate()
            .map(|(l, x)| {
                let y = Complex64::new(x.re, g * (sin_phi * x.re + cos_phi * x.im));
                let step: f64 = rng.sample(StandardNormal);
                walk += self.phase_noise_std * step;
                let phase = 2.0 * PI * self.carrier_freq_offset * l as f64 + walk;
                let y = y * Complex64::from_polar(1.0, phase);
                y * (1.0 - self.pa_cubic_coeff * y.norm_sqr())
            })
            .collect()
    }
}

/// Propagation channel: FIR taps followed by complex AWGN.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub taps: Vec<Complex64>,
    /// Signal-to-noise ratio in dB; `f64::INFINITY` disables noise.
    pub snr_db: f64,
}

impl ChannelConfig {
    pub fn flat(snr_db: f64) -> Self {
        Self {
            taps: vec![Complex64::new(1.0, 0.0)],
            snr_db,
        }
    }

    /// Unit-energy three-tap channel with a dominant direct path.
    pub fn random_multipath<R: Rng + ?Sized>(snr_db: f64, rng: &mut R) -> Self {
        let mut taps = vec![Complex64::new(1.0, 0.0)];
        for _ in 0..2 {
            let mag = rng.random_range(0.1..0.4);
            let phase = rng.random_range(-PI..PI);
            taps.push(Complex64::from_polar(mag, phase));
        }
        let energy: f64 = taps.iter().map(|t| t.norm_sqr()).sum::<f64>().sqrt();
        taps.iter_mut().for_each(|t| *t /= energy);
        Self { taps, snr_db }
    }

    fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::config("channel needs at least one tap"));
        }
        if self.snr_db.is_nan() {
            return Err(Error::config("channel SNR is NaN"));
        }
        Ok(())
    }

    /// Valid-mode convolution; `signal` must hold `len + taps - 1` samples.
    pub fn convolve(&self, signal: &[Complex64]) -> Vec<Complex64> {
        let t = self.taps.len();
        (0..=signal.len() - t)
            .map(|l| {
                self.taps
                    .iter()
                    .enumerate()
                    .map(|(k, h)| h * signal[l + t - 1 - k])
                    .sum()
            })
            .collect()
    }

    /// Adds circularly symmetric Gaussian noise scaled to the measured signal
    /// power. Returns the noise variance σ².
    pub fn add_noise<R: Rng + ?Sized>(&self, signal: &mut [Complex64], rng: &mut R) -> f64 {
        if self.snr_db == f64::INFINITY || signal.is_empty() {
            return 0.0;
        }
        let power = signal.iter().map(|s| s.norm_sqr()).sum::<f64>() / signal.len() as f64;
        let variance = power / 10f64.powf(self.snr_db / 10.0);
        let sd = (variance / 2.0).sqrt();
        for s in signal.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *s += Complex64::new(sd * re, sd * im);
        }
        variance
    }
}

/// Generation settings for a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub num_emitters: usize,
    pub per_emitter: usize,
    pub length: usize,
    pub samples_per_symbol: usize,
    pub sample_rate: f64,
    pub channel: ChannelConfig,
    pub ranges: ImpairmentRanges,
}

impl SimulationConfig {
    pub fn new(num_emitters: usize, per_emitter: usize, length: usize, channel: ChannelConfig) -> Self {
        Self {
            num_emitters,
            per_emitter,
            length,
            samples_per_symbol: 4,
            sample_rate: 1e6,
            channel,
            ranges: ImpairmentRanges::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_emitters < 2 {
            return Err(Error::config(format!("need at least 2 emitters, got {}", self.num_emitters)));
        }
        if self.per_emitter < 1 {
            return Err(Error::config("need at least one record per emitter"));
        }
        if self.length < 64 {
            return Err(Error::config(format!("record length {} below minimum 64", self.length)));
        }
        if self.samples_per_symbol == 0 {
            return Err(Error::config("samples per symbol must be positive"));
        }
        self.channel.validate()
    }
}

/// Random QPSK symbols with linear interpolation between symbol centres.
pub fn qpsk_payload<R: Rng + ?Sized>(len: usize, samples_per_symbol: usize, rng: &mut R) -> Vec<Complex64> {
    let sps = samples_per_symbol;
    let symbols: Vec<Complex64> = (0..len / sps + 2)
        .map(|_| {
            let re = if rng.random::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            let im = if rng.random::<bool>() { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
            Complex64::new(re, im)
        })
        .collect();
    (0..len)
        .map(|n| {
            let (s, frac) = (n / sps, (n % sps) as f64 / sps as f64);
            symbols[s] * (1.0 - frac) + symbols[s + 1] * frac
        })
        .collect()
}

/// Every intermediate of one simulated burst.
#[derive(Debug, Clone)]
pub struct Burst {
    /// Clean pulse-shaped QPSK, `length + taps - 1` samples.
    pub payload: Vec<Complex64>,
    /// Payload after the emitter's impairments.
    pub transmitted: Vec<Complex64>,
    /// Channel output before noise, `length` samples.
    pub noise_free: Vec<Complex64>,
    /// `noise_free` plus AWGN.
    pub received: Vec<Complex64>,
    pub noise_variance: f64,
}

pub fn simulate_burst<R: Rng + ?Sized>(
    profile: &EmitterProfile,
    channel: &ChannelConfig,
    length: usize,
    samples_per_symbol: usize,
    rng: &mut R,
) -> Burst {
    let payload = qpsk_payload(length + channel.taps.len() - 1, samples_per_symbol, rng);
    let transmitted = profile.impair(&payload, rng);
    let noise_free = channel.convolve(&transmitted);
    let mut received = noise_free.clone();
    let noise_variance = channel.add_noise(&mut received, rng);
    Burst {
        payload,
        transmitted,
        noise_free,
        received,
        noise_variance,
    }
}

/// Generates labeled records, emitter-major. Samples are rounded to `f32`
/// precision so a generated dataset survives the file format bit-exactly.
pub fn generate_records(config: &SimulationConfig, seed: u64) -> Result<(Vec<IqRecord>, Vec<EmitterProfile>)> {
    config.validate()?;
    let mut rng = stream_rng(seed, stream::SIMULATION, 0);
    let profiles = EmitterProfile::draw_set(config.num_emitters, &config.ranges, &mut rng);
    let mut records = Vec::with_capacity(config.num_emitters * config.per_emitter);
    for profile in &profiles {
        for _ in 0..config.per_emitter {
            let burst = simulate_burst(profile, &config.channel, config.length, config.samples_per_symbol, &mut rng);
            let samples = burst
                .received
                .iter()
                .map(|s| Complex64::new(s.re as f32 as f64, s.im as f32 as f64))
                .collect();
            records.push(IqRecord::new(samples, Some(profile.emitter_id)));
        }
    }
    Ok((records, profiles))
}

/// Generates records and splits them into labeled / unlabeled / test pools.
pub fn generate_dataset(
    config: &SimulationConfig,
    split: &PoolSplit,
    seed: u64,
) -> Result<(DatasetPools, Vec<EmitterProfile>)> {
    let (records, profiles) = generate_records(config, seed)?;
    let pools = DatasetPools::split(records, split, seed)?;
    Ok((pools, profiles))
}
