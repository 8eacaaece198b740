//! Online multichannel weighted-prediction-error dereverberation.
//!
//! Each frequency bin runs an independent exponentially weighted recursive
//! least-squares filter that predicts the late reverberation of the current
//! frame from a delayed stack of past frames and subtracts it.

use std::collections::VecDeque;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::audio::{istft, stft, MultichannelAudio, Spectrogram, StftConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WpeConfig {
    /// Filter length in frames.
    pub taps: usize,
    /// Prediction delay in frames.
    pub delay: usize,
    /// Forgetting factor of the recursive estimate.
    pub alpha: f64,
    /// Past frames averaged into the power estimate (0 = current frame only).
    pub psd_context: usize,
    /// The inverse correlation matrix starts at `I / delta`.
    pub delta: f64,
    pub power_floor: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self {
            taps: 10,
            delay: 3,
            alpha: 0.9999,
            psd_context: 0,
            delta: 1.0,
            power_floor: 1e-10,
        }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps < 1 {
            return Err(Error::invalid("wpe taps must be >= 1"));
        }
        if self.delay < 1 {
            return Err(Error::invalid("wpe delay must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("wpe alpha must lie in (0, 1)"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::invalid("wpe delta must be positive"));
        }
        Ok(())
    }
}

const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone)]
struct BinState {
    channels: usize,
    /// `(taps*channels)^2`, row-major.
    inv_cov: Vec<Complex64>,
    /// `(taps*channels) x channels`, row-major.
    filter: Vec<Complex64>,
    /// Most recent frame at the back.
    history: VecDeque<Vec<Complex64>>,
    powers: VecDeque<f64>,
}

impl BinState {
    fn new(config: &WpeConfig, channels: usize) -> Self {
        let dk = config.taps * channels;
        let mut inv_cov = vec![Complex64::default(); dk * dk];
        for i in 0..dk {
            inv_cov[i * dk + i] = Complex64::new(1.0 / config.delta, 0.0);
        }
        Self {
            channels,
            inv_cov,
            filter: vec![Complex64::default(); dk * channels],
            history: VecDeque::with_capacity(config.taps + config.delay + 1),
            powers: VecDeque::with_capacity(config.psd_context + 1),
        }
    }

    fn stacked_window(&self, config: &WpeConfig) -> Vec<Complex64> {
        let d = self.channels;
        let mut window = vec![Complex64::default(); config.taps * d];
        let len = self.history.len();
        for tap in 0..config.taps {
            // history.back() is frame t-1, so frame t-delay-tap sits `delay+tap` from the end.
            let back = config.delay + tap;
            if back <= len {
                let frame = &self.history[len - back];
                window[tap * d..(tap + 1) * d].copy_from_slice(frame);
            }
        }
        window
    }

    fn step(&mut self, config: &WpeConfig, observed: &[Complex64]) -> Vec<Complex64> {
        let d = self.channels;
        let dk = config.taps * d;
        let window = self.stacked_window(config);

        let mut out = observed.to_vec();
        for (c, o) in out.iter_mut().enumerate() {
            let mut pred = Complex64::default();
            for i in 0..dk {
                pred += self.filter[i * d + c].conj() * window[i];
            }
            *o -= pred;
        }

        let inst = observed.iter().map(|y| y.norm_sqr()).sum::<f64>() / d as f64;
        self.powers.push_back(inst);
        while self.powers.len() > config.psd_context + 1 {
            self.powers.pop_front();
        }
        let power =
            (self.powers.iter().sum::<f64>() / self.powers.len() as f64).max(config.power_floor);

        let has_context = window.iter().any(|w| w.norm_sqr() > 0.0);
        if has_context {
            let mut nominator = vec![Complex64::default(); dk];
            for (i, n) in nominator.iter_mut().enumerate() {
                let row = &self.inv_cov[i * dk..(i + 1) * dk];
                *n = row.iter().zip(&window).map(|(a, b)| a * b).sum();
            }
            let quad: f64 = window
                .iter()
                .zip(&nominator)
                .map(|(w, n)| (w.conj() * n).re)
                .sum();
            let denominator = config.alpha * power + quad;
            if denominator.is_finite() && denominator >= MIN_DENOMINATOR {
                let gain: Vec<Complex64> = nominator.iter().map(|n| n / denominator).collect();
                let inv_alpha = 1.0 / config.alpha;
                for i in 0..dk {
                    for j in 0..dk {
                        let v = self.inv_cov[i * dk + j] - gain[i] * nominator[j].conj();
                        self.inv_cov[i * dk + j] = v * inv_alpha;
                    }
                }
                for i in 0..dk {
                    for c in 0..d {
                        self.filter[i * d + c] += gain[i] * out[c].conj();
                    }
                }
            }
        }

        self.history.push_back(observed.to_vec());
        while self.history.len() > config.taps + config.delay {
            self.history.pop_front();
        }
        out
    }
}

/// Per-frequency recursive filter state.
#[derive(Debug, Clone)]
pub struct WpeState {
    config: WpeConfig,
    channels: usize,
    bins: Vec<BinState>,
}

pub fn wpe_init(config: WpeConfig, channels: usize, freqs: usize) -> Result<WpeState> {
    config.validate()?;
    if channels == 0 || freqs == 0 {
        return Err(Error::invalid("wpe needs at least one channel and bin"));
    }
    Ok(WpeState {
        config,
        channels,
        bins: (0..freqs)
            .map(|_| BinState::new(&config, channels))
            .collect(),
    })
}

impl WpeState {
    pub fn config(&self) -> &WpeConfig {
        &self.config
    }

    pub fn num_freqs(&self) -> usize {
        self.bins.len()
    }

    /// `(freqs, taps*channels, taps*channels)`
    pub fn inv_cov_shape(&self) -> (usize, usize, usize) {
        let dk = self.config.taps * self.channels;
        (self.bins.len(), dk, dk)
    }

    /// `(freqs, taps*channels, channels)`
    pub fn filter_shape(&self) -> (usize, usize, usize) {
        (
            self.bins.len(),
            self.config.taps * self.channels,
            self.channels,
        )
    }

    pub fn inverse_correlation(&self, freq: usize) -> &[Complex64] {
        &self.bins[freq].inv_cov
    }

    pub fn filter(&self, freq: usize) -> &[Complex64] {
        &self.bins[freq].filter
    }

    pub fn buffered_frames(&self) -> usize {
        self.bins.first().map_or(0, |b| b.history.len())
    }

    pub fn reset(&mut self) {
        for b in &mut self.bins {
            *b = BinState::new(&self.config, self.channels);
        }
    }
}

/// Dereverberates one `[channels, freqs]` frame and updates the state.
pub fn wpe_step(state: &mut WpeState, frame: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let (channels, freqs) = frame.dim();
    if channels != state.channels || freqs != state.bins.len() {
        return Err(Error::shape(format!(
            "frame is {channels}x{freqs}, state expects {}x{}",
            state.channels,
            state.bins.len()
        )));
    }
    if frame.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("wpe input frame"));
    }
    let config = state.config;
    let mut out = Array2::zeros((channels, freqs));
    for (f, bin) in state.bins.iter_mut().enumerate() {
        let observed: Vec<Complex64> = frame.column(f).to_vec();
        let y = bin.step(&config, &observed);
        for c in 0..channels {
            out[[c, f]] = y[c];
        }
    }
    Ok(out)
}

/// Runs the recursion over a whole spectrogram; bins are processed in parallel.
pub fn wpe_spectrogram(spec: &Spectrogram, config: WpeConfig) -> Result<Spectrogram> {
    config.validate()?;
    if spec
        .bins
        .iter()
        .any(|c| !c.re.is_finite() || !c.im.is_finite())
    {
        return Err(Error::NonFinite("wpe input spectrogram"));
    }
    let (channels, frames, freqs) = spec.bins.dim();
    let per_bin: Vec<Vec<Complex64>> = (0..freqs)
        .into_par_iter()
        .map(|f| {
            let mut state = BinState::new(&config, channels);
            let mut out = Vec::with_capacity(frames * channels);
            for t in 0..frames {
                let observed: Vec<Complex64> =
                    (0..channels).map(|c| spec.bins[[c, t, f]]).collect();
                out.extend(state.step(&config, &observed));
            }
            out
        })
        .collect();
    let mut bins = Array3::zeros((channels, frames, freqs));
    for (f, values) in per_bin.iter().enumerate() {
        for t in 0..frames {
            for c in 0..channels {
                bins[[c, t, f]] = values[t * channels + c];
            }
        }
    }
    Ok(Spectrogram {
        bins,
        ..spec.clone()
    })
}

pub fn wpe_process(audio: &MultichannelAudio, config: WpeConfig) -> Result<MultichannelAudio> {
    let stft_config = StftConfig::enhancement(audio.sample_rate());
    let spec = stft(audio, stft_config)?;
    let out = wpe_spectrogram(&spec, config)?;
    istft(&out, stft_config.window)
}
