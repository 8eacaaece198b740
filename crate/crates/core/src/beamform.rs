//! Weighted delay-and-sum beamforming driven by GCC-PHAT delay estimates.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::MultichannelAudio;
use crate::error::{Error, Result};

/// Per-block integer delays of every channel relative to channel 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TdoaTrack {
    /// `[blocks][channels]`, positive when the channel lags the reference.
    pub delays: Vec<Vec<i64>>,
    /// `[blocks][channels]`, in `[0, 1]`; the reference entry is 1.
    pub confidence: Vec<Vec<f64>>,
    pub block_len: usize,
    pub block_len_sec: f64,
}

impl TdoaTrack {
    /// A track holding the same delays everywhere with full confidence.
    pub fn constant(delays: &[i64], num_samples: usize, block_len: usize) -> Self {
        let blocks = (num_samples / block_len.max(1)).max(1);
        Self {
            delays: vec![delays.to_vec(); blocks],
            confidence: vec![vec![1.0; delays.len()]; blocks],
            block_len: block_len.max(1),
            block_len_sec: 0.0,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.delays.len()
    }

    fn block_of(&self, sample: usize) -> usize {
        (sample / self.block_len).min(self.num_blocks() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdoaConfig {
    pub block_len_sec: f64,
    pub max_delay_sec: f64,
    pub confidence_threshold: f64,
}

impl Default for TdoaConfig {
    fn default() -> Self {
        Self {
            block_len_sec: 0.5,
            max_delay_sec: 0.03,
            confidence_threshold: 0.1,
        }
    }
}

/// Phase-transform cross-correlation peak of `other` against `reference`.
///
/// Returns the lag in `[-max_delay, max_delay]` at which `other` best matches
/// a delayed copy of `reference`, and the peak height of the PHAT
/// correlation, which is bounded by 1 (reached for identical signals).
pub fn gcc_phat(reference: &[f64], other: &[f64], max_delay: usize) -> Result<(i64, f64)> {
    if reference.len() != other.len() {
        return Err(Error::shape("gcc_phat blocks must have equal length"));
    }
    let n = reference.len();
    if n == 0 {
        return Ok((0, 0.0));
    }
    let m = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);

    let pad = |x: &[f64]| {
        let mut v: Vec<Complex64> = x.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        v.resize(m, Complex64::default());
        v
    };
    let mut xr = pad(reference);
    let mut xo = pad(other);
    fwd.process(&mut xr);
    fwd.process(&mut xo);

    let mut active = 0usize;
    let mut cross: Vec<Complex64> = xo
        .iter()
        .zip(&xr)
        .map(|(o, r)| {
            let c = o * r.conj();
            let mag = c.norm();
            if mag > 1e-20 {
                active += 1;
                c / mag
            } else {
                Complex64::default()
            }
        })
        .collect();
    if active == 0 {
        return Ok((0, 0.0));
    }
    inv.process(&mut cross);

    let max_delay = max_delay.min(n - 1) as i64;
    let corr = |lag: i64| cross[lag.rem_euclid(m as i64) as usize].re / active as f64;
    let mut best = (0i64, corr(0));
    for k in 1..=max_delay {
        for lag in [-k, k] {
            let v = corr(lag);
            if v > best.1 {
                best = (lag, v);
            }
        }
    }
    Ok((best.0, best.1.clamp(0.0, 1.0)))
}

fn median3(a: i64, b: i64, c: i64) -> i64 {
    a.max(b).min(a.min(b).max(c))
}

/// Block-wise GCC-PHAT delays of every channel against channel 0.
///
/// Blocks below the confidence threshold inherit the previous block's delay
/// (or the next confident one at the start), then each channel's delay
/// sequence is median filtered over three blocks.
pub fn track_tdoa(audio: &MultichannelAudio, config: &TdoaConfig) -> Result<TdoaTrack> {
    if audio.num_channels() < 2 {
        return Err(Error::invalid("delay tracking needs at least two channels"));
    }
    let sr = audio.sample_rate() as f64;
    let block_len = (config.block_len_sec * sr).round().max(1.0) as usize;
    let n = audio.num_samples();
    let blocks = n / block_len;
    if blocks == 0 {
        return Err(Error::invalid(format!(
            "audio of {n} samples is shorter than one {block_len}-sample block"
        )));
    }
    let max_delay = (config.max_delay_sec * sr).round().max(0.0) as usize;
    let channels = audio.num_channels();

    let mut raw = vec![vec![0i64; channels]; blocks];
    let mut confidence = vec![vec![1.0; channels]; blocks];
    for b in 0..blocks {
        let start = b * block_len;
        let end = if b + 1 == blocks {
            n
        } else {
            start + block_len
        };
        let reference = &audio.channel(0)[start..end];
        for c in 1..channels {
            let (d, conf) = gcc_phat(reference, &audio.channel(c)[start..end], max_delay)?;
            raw[b][c] = d;
            confidence[b][c] = conf;
        }
    }

    let mut delays = raw.clone();
    for c in 1..channels {
        let good: Vec<bool> = (0..blocks)
            .map(|b| confidence[b][c] >= config.confidence_threshold)
            .collect();
        let first_good = good.iter().position(|&g| g).map_or(0, |b| raw[b][c]);
        let mut held = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let d = if good[b] {
                raw[b][c]
            } else if b == 0 {
                first_good
            } else {
                held[b - 1]
            };
            held.push(d);
        }
        for b in 0..blocks {
            let prev = held[b.saturating_sub(1)];
            let next = held[(b + 1).min(blocks - 1)];
            delays[b][c] = median3(prev, held[b], next);
        }
    }

    Ok(TdoaTrack {
        delays,
        confidence,
        block_len,
        block_len_sec: config.block_len_sec,
    })
}

/// Channel weights proportional to average block confidence, summing to 1.
///
/// The reference channel is credited with the best average confidence among
/// the other channels, since its own correlation is trivially perfect.
pub fn channel_weights(track: &TdoaTrack, channels: usize) -> Vec<f64> {
    if channels == 1 {
        return vec![1.0];
    }
    let blocks = track.num_blocks().max(1) as f64;
    let mut raw: Vec<f64> = (0..channels)
        .map(|c| track.confidence.iter().map(|row| row[c]).sum::<f64>() / blocks)
        .collect();
    raw[0] = raw[1..].iter().cloned().fold(0.0, f64::max);
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return vec![1.0 / channels as f64; channels];
    }
    raw.iter().map(|w| w / total).collect()
}

/// Aligns each channel by its tracked delay and forms the weighted sum.
pub fn delay_and_sum(audio: &MultichannelAudio, track: &TdoaTrack) -> Result<MultichannelAudio> {
    let channels = audio.num_channels();
    if track.num_blocks() == 0 || track.delays.iter().any(|row| row.len() != channels) {
        return Err(Error::shape("delay track does not match the channel count"));
    }
    let n = audio.num_samples();
    let weights = channel_weights(track, channels);
    let mut out = vec![0.0; n];
    for (c, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let x = audio.channel(c);
        for (t, o) in out.iter_mut().enumerate() {
            let d = track.delays[track.block_of(t)][c];
            let idx = t as i64 + d;
            if idx >= 0 && (idx as usize) < n {
                *o += w * x[idx as usize];
            }
        }
    }
    MultichannelAudio::mono(out, audio.sample_rate())
}

/// Tracks delays and beamforms; single-channel input is returned unchanged.
pub fn beamform(audio: &MultichannelAudio, config: &TdoaConfig) -> Result<MultichannelAudio> {
    if audio.num_channels() == 1 {
        return Ok(audio.clone());
    }
    let track = track_tdoa(audio, config)?;
    delay_and_sum(audio, &track)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn white(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn shifted(x: &[f64], d: i64) -> Vec<f64> {
        (0..x.len() as i64)
            .map(|t| {
                let i = t - d;
                if i >= 0 && (i as usize) < x.len() {
                    x[i as usize]
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn recovers_constructed_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = white(4000, &mut rng);
        let (d, conf) = gcc_phat(&x, &shifted(&x, 5), 50).unwrap();
        assert_eq!(d, 5);
        assert!(conf > 0.9);
        let (d, _) = gcc_phat(&x, &shifted(&x, -12), 50).unwrap();
        assert_eq!(d, -12);
    }

    #[test]
    fn identical_signals_full_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = white(1000, &mut rng);
        let (d, conf) = gcc_phat(&x, &x, 30).unwrap();
        assert_eq!(d, 0);
        assert!((conf - 1.0).abs() < 1e-9);
    }

    #[test]
    fn silent_blocks() {
        assert_eq!(gcc_phat(&[0.0; 64], &[0.0; 64], 10).unwrap(), (0, 0.0));
        assert!(gcc_phat(&[0.0; 64], &[0.0; 63], 10).is_err());
    }

    #[test]
    fn independent_noise_low_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mean: f64 = (0..100)
            .map(|_| {
                let a = white(8000, &mut rng);
                let b = white(8000, &mut rng);
                gcc_phat(&a, &b, 480).unwrap().1
            })
            .sum::<f64>()
            / 100.0;
        assert!(mean < 0.2, "mean confidence {mean}");
    }

    fn two_channel(x: &[f64], delays: &[i64]) -> MultichannelAudio {
        MultichannelAudio::new(delays.iter().map(|&d| shifted(x, d)).collect(), 16000).unwrap()
    }

    #[test]
    fn constant_delay_track() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = white(16000 * 3, &mut rng);
        let track = track_tdoa(&two_channel(&x, &[0, 7]), &TdoaConfig::default()).unwrap();
        assert_eq!(track.num_blocks(), 6);
        assert!(track.delays.iter().all(|row| row == &vec![0, 7]));
    }

    #[test]
    fn switching_delay_is_followed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 16000 * 5;
        let x = white(n, &mut rng);
        let half = n / 2;
        let other: Vec<f64> = (0..n)
            .map(|t| {
                let d: i64 = if t < half { 7 } else { -7 };
                let i = t as i64 - d;
                if i >= 0 && (i as usize) < n {
                    x[i as usize]
                } else {
                    0.0
                }
            })
            .collect();
        let audio = MultichannelAudio::new(vec![x, other], 16000).unwrap();
        let track = track_tdoa(&audio, &TdoaConfig::default()).unwrap();
        let change_block = half / track.block_len;
        for (b, row) in track.delays.iter().enumerate() {
            if b + 2 <= change_block {
                assert_eq!(row[1], 7, "block {b}");
            }
            if b >= change_block + 2 {
                assert_eq!(row[1], -7, "block {b}");
            }
        }
    }

    #[test]
    fn single_block_and_too_short() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = white(9000, &mut rng);
        let track = track_tdoa(&two_channel(&x, &[0, 3]), &TdoaConfig::default()).unwrap();
        assert_eq!(track.num_blocks(), 1);
        let short = two_channel(&x[..1000], &[0, 3]);
        assert!(track_tdoa(&short, &TdoaConfig::default()).is_err());
        let mono = MultichannelAudio::mono(x, 16000).unwrap();
        assert!(track_tdoa(&mono, &TdoaConfig::default()).is_err());
    }

    #[test]
    fn identical_channels_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = white(8000, &mut rng);
        let audio = MultichannelAudio::new(vec![x.clone(); 3], 16000).unwrap();
        let track = TdoaTrack::constant(&[0, 0, 0], 8000, 8000);
        let y = delay_and_sum(&audio, &track).unwrap();
        for (a, b) in x.iter().zip(y.channel(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = channel_weights(&track, 3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let mut track = TdoaTrack::constant(&[0, 0], 100, 100);
        track.confidence = vec![vec![0.0, 0.0]];
        assert_eq!(channel_weights(&track, 2), vec![0.5, 0.5]);
    }

    #[test]
    fn dead_channel_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 16000 * 2;
        let s = white(n, &mut rng);
        let mut chans: Vec<Vec<f64>> = [0i64, 3, -4]
            .iter()
            .map(|&d| {
                shifted(&s, d)
                    .iter()
                    .map(|v| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        v + 0.3 * e
                    })
                    .collect()
            })
            .collect();
        let live = MultichannelAudio::new(chans.clone(), 16000).unwrap();
        chans.push(vec![0.0; n]);
        let with_dead = MultichannelAudio::new(chans, 16000).unwrap();
        let cfg = TdoaConfig::default();
        let track = track_tdoa(&with_dead, &cfg).unwrap();
        let w = channel_weights(&track, 4);
        assert!(w[3].abs() < 1e-9);
        let a = delay_and_sum(&with_dead, &track).unwrap();
        let b = beamform(&live, &cfg).unwrap();
        let rms = (a
            .channel(0)
            .iter()
            .zip(b.channel(0))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        assert!(rms < 1e-3, "rms {rms}");
    }
}
