//! Audio carriers, WAV I/O, STFT/iSTFT and log-mel features.
//!
//! All analysis uses periodic windows. The STFT pads `fft_size - frame_shift`
//! zeros in front of the signal and enough zeros behind it that every input
//! sample is covered by the full set of overlapping frames, so the
//! overlap-add inverse reconstructs the input exactly (up to rounding).

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Sample-domain signal, one `Vec` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelAudio {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl MultichannelAudio {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if channels.is_empty() {
            return Err(Error::Empty("audio has no channels"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::shape("all channels must have equal length"));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("audio samples"));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_sec(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Picks a subset of channels, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let chans = indices
            .iter()
            .map(|&i| {
                self.channels
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("channel {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(chans, self.sample_rate)
    }

    /// Samples `[start, end)` of every channel; the range is clipped to the signal.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.num_samples());
        let start = start.min(end);
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c[start..end].to_vec())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Concatenates the channels of several recordings with equal length and rate.
    pub fn stack(parts: &[MultichannelAudio]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or(Error::Empty("no recordings to stack"))?;
        if parts
            .iter()
            .any(|p| p.sample_rate != first.sample_rate || p.num_samples() != first.num_samples())
        {
            return Err(Error::shape(
                "stacked recordings must share sample rate and length",
            ));
        }
        let channels = parts.iter().flat_map(|p| p.channels.clone()).collect();
        Self::new(channels, first.sample_rate)
    }
}

/// Reads a 16-bit PCM or 32-bit float WAV file, scaling samples to [-1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<MultichannelAudio> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported wav layout".into()),
        other => Error::MalformedWav(other.to_string()),
    })?;
    let spec = reader.spec();
    let num_channels = spec.channels as usize;
    if num_channels == 0 {
        return Err(Error::MalformedWav("zero channels".into()));
    }
    let expected = reader.len() as usize;

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            collect_samples(path, expected, reader.into_samples::<i16>(), |s| {
                s as f64 / 32768.0
            })?
        }
        (hound::SampleFormat::Float, 32) => {
            collect_samples(path, expected, reader.into_samples::<f32>(), |s| s as f64)?
        }
        (format, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{format:?} with {bits} bits per sample"
            )))
        }
    };
    if !interleaved.len().is_multiple_of(num_channels) {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            got: interleaved.len(),
        });
    }

    let frames = interleaved.len() / num_channels;
    let mut channels = vec![Vec::with_capacity(frames); num_channels];
    for frame in interleaved.chunks_exact(num_channels) {
        for (c, &s) in frame.iter().enumerate() {
            channels[c].push(s);
        }
    }
    MultichannelAudio::new(channels, spec.sample_rate)
}

fn collect_samples<S, I>(
    path: &Path,
    expected: usize,
    samples: I,
    scale: impl Fn(S) -> f64,
) -> Result<Vec<f64>>
where
    I: Iterator<Item = hound::Result<S>>,
{
    let mut out = Vec::with_capacity(expected);
    for s in samples {
        match s {
            Ok(v) => out.push(scale(v)),
            // The header was valid, so a failed read means the data chunk ends early.
            Err(hound::Error::IoError(_)) => {
                return Err(Error::TruncatedPayload {
                    path: path.to_path_buf(),
                    expected,
                    got: out.len(),
                })
            }
            Err(e) => return Err(Error::MalformedWav(e.to_string())),
        }
    }
    if out.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            got: out.len(),
        });
    }
    Ok(out)
}

/// Writes interleaved 16-bit PCM, clipping at ±1.
pub fn write_wav(path: impl AsRef<Path>, audio: &MultichannelAudio) -> Result<()> {
    let spec = hound::WavSpec {
        channels: audio.num_channels() as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for n in 0..audio.num_samples() {
        for ch in &audio.channels {
            writer
                .write_sample(quantize_i16(ch[n]))
                .map_err(map_hound)?;
        }
    }
    writer.finalize().map_err(map_hound)
}

/// Writes interleaved 32-bit float samples without clipping.
pub fn write_wav_f32(path: impl AsRef<Path>, audio: &MultichannelAudio) -> Result<()> {
    let spec = hound::WavSpec {
        channels: audio.num_channels() as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for n in 0..audio.num_samples() {
        for ch in &audio.channels {
            writer.write_sample(ch[n] as f32).map_err(map_hound)?;
        }
    }
    writer.finalize().map_err(map_hound)
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::MalformedWav(other.to_string()),
    }
}

fn quantize_i16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    SqrtHann,
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                match self {
                    Window::SqrtHann => hann.sqrt(),
                    Window::Hann => hann,
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub frame_shift: usize,
    pub window: Window,
}

impl StftConfig {
    /// 64 ms frames with 75% overlap (1024/256 at 16 kHz).
    pub fn enhancement(sample_rate: u32) -> Self {
        let fft_size = (0.064 * sample_rate as f64).round().max(2.0) as usize;
        let fft_size = fft_size.next_power_of_two();
        Self {
            fft_size,
            frame_shift: fft_size / 4,
            window: Window::SqrtHann,
        }
    }

    /// 10 ms hop with a power-of-two frame of at least 25 ms (512/160 at 16 kHz).
    pub fn features(sample_rate: u32) -> Self {
        let fft_size = ((0.025 * sample_rate as f64).ceil() as usize).next_power_of_two();
        Self {
            fft_size,
            frame_shift: ((0.01 * sample_rate as f64).round() as usize).max(1),
            window: Window::Hann,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(Error::invalid("fft_size must be a power of two"));
        }
        if self.frame_shift == 0 || self.frame_shift > self.fft_size {
            return Err(Error::invalid("frame_shift must be in (0, fft_size]"));
        }
        Ok(())
    }

    fn front_pad(&self) -> usize {
        self.fft_size - self.frame_shift
    }

    /// Number of STFT frames for a signal of `num_samples` samples.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples == 0 {
            0
        } else {
            (num_samples - 1 + self.front_pad()) / self.frame_shift + 1
        }
    }
}

/// Complex one-sided STFT, `[channels, frames, freqs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: Array3<Complex64>,
    pub fft_size: usize,
    pub frame_shift: usize,
    pub sample_rate: u32,
    /// Length of the analysed signal, used to trim the inverse transform.
    pub num_samples: usize,
}

impl Spectrogram {
    pub fn num_channels(&self) -> usize {
        self.bins.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.bins.shape()[1]
    }

    pub fn num_freqs(&self) -> usize {
        self.bins.shape()[2]
    }

    /// Time in seconds at the centre of frame `t`.
    pub fn frame_center_sec(&self, t: usize) -> f64 {
        let center =
            (t * self.frame_shift) as f64 + self.frame_shift as f64 - self.fft_size as f64 / 2.0;
        center / self.sample_rate as f64
    }

    /// Index of the frame whose centre is nearest to `sec` (clipped to the valid range).
    pub fn frame_at(&self, sec: f64) -> usize {
        let offset = self.fft_size as f64 / 2.0 - self.frame_shift as f64;
        let t = ((sec * self.sample_rate as f64 + offset) / self.frame_shift as f64).round();
        (t.max(0.0) as usize).min(self.num_frames().saturating_sub(1))
    }
}

pub fn stft(audio: &MultichannelAudio, config: StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    let n = audio.num_samples();
    if n == 0 {
        return Err(Error::Empty("cannot transform empty audio"));
    }
    let fft_size = config.fft_size;
    let shift = config.frame_shift;
    let pad = config.front_pad();
    let frames = config.num_frames(n);
    let freqs = fft_size / 2 + 1;
    let window = config.window.coefficients(fft_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);

    let mut bins = Array3::<Complex64>::zeros((audio.num_channels(), frames, freqs));
    let mut buf = vec![Complex64::default(); fft_size];
    for (c, signal) in audio.channels.iter().enumerate() {
        for t in 0..frames {
            let start = (t * shift) as isize - pad as isize;
            for (i, (slot, w)) in buf.iter_mut().zip(&window).enumerate() {
                let idx = start + i as isize;
                let x = if idx >= 0 && (idx as usize) < n {
                    signal[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex64::new(x * w, 0.0);
            }
            fft.process(&mut buf);
            for f in 0..freqs {
                bins[[c, t, f]] = buf[f];
            }
        }
    }
    Ok(Spectrogram {
        bins,
        fft_size,
        frame_shift: shift,
        sample_rate: audio.sample_rate,
        num_samples: n,
    })
}

/// Weighted overlap-add inverse of [`stft`], normalised by the squared-window sum.
pub fn istft(spec: &Spectrogram, window: Window) -> Result<MultichannelAudio> {
    let frames = spec.num_frames();
    if frames == 0 {
        return Err(Error::Empty("spectrogram has no frames"));
    }
    let fft_size = spec.fft_size;
    let shift = spec.frame_shift;
    if spec.num_freqs() != fft_size / 2 + 1 {
        return Err(Error::shape("frequency count does not match fft_size"));
    }
    let pad = fft_size - shift;
    let win = window.coefficients(fft_size);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(fft_size);
    let padded_len = (frames - 1) * shift + fft_size;

    let mut norm = vec![0.0; padded_len];
    for t in 0..frames {
        for (i, w) in win.iter().enumerate() {
            norm[t * shift + i] += w * w;
        }
    }

    let mut channels = Vec::with_capacity(spec.num_channels());
    let mut buf = vec![Complex64::default(); fft_size];
    for c in 0..spec.num_channels() {
        let mut acc = vec![0.0; padded_len];
        for t in 0..frames {
            for f in 0..fft_size {
                buf[f] = if f <= fft_size / 2 {
                    spec.bins[[c, t, f]]
                } else {
                    spec.bins[[c, t, fft_size - f]].conj()
                };
            }
            // The DC and Nyquist bins of a real signal are real.
            buf[0].im = 0.0;
            buf[fft_size / 2].im = 0.0;
            ifft.process(&mut buf);
            for (i, w) in win.iter().enumerate() {
                acc[t * shift + i] += buf[i].re / fft_size as f64 * w;
            }
        }
        let out: Vec<f64> = (0..spec.num_samples)
            .map(|n| {
                let idx = n + pad;
                if idx < padded_len && norm[idx] > 1e-10 {
                    acc[idx] / norm[idx]
                } else {
                    0.0
                }
            })
            .collect();
        channels.push(out);
    }
    MultichannelAudio::new(channels, spec.sample_rate)
}

/// Real-valued feature rows, one per 10 ms (or other) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Array2<f64>,
    pub frame_shift_sec: f64,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Rows `[start, end)`, clipped.
    pub fn window(&self, start: usize, end: usize) -> FeatureMatrix {
        let end = end.min(self.num_frames());
        let start = start.min(end);
        FeatureMatrix {
            rows: self.rows.slice(ndarray::s![start..end, ..]).to_owned(),
            frame_shift_sec: self.frame_shift_sec,
        }
    }
}

pub const MEL_FLOOR: f64 = 1e-10;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-style filters over the one-sided spectrum, `[num_mels, fft/2+1]`.
pub fn mel_filterbank(num_mels: usize, fft_size: usize, sample_rate: u32) -> Array2<f64> {
    let freqs = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let lo = hz_to_mel(20.0f64.min(nyquist / 2.0));
    let hi = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..num_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (num_mels + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((num_mels, freqs));
    for m in 0..num_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..freqs {
            let hz = k as f64 * sample_rate as f64 / fft_size as f64;
            let w = if hz > left && hz <= center {
                (hz - left) / (center - left)
            } else if hz > center && hz < right {
                (right - hz) / (right - center)
            } else {
                0.0
            };
            bank[[m, k]] = w;
        }
        // Narrow low-frequency filters can fall between FFT bins; give them the nearest bin.
        if bank.row(m).iter().all(|&w| w == 0.0) {
            let k =
                ((center * fft_size as f64 / sample_rate as f64).round() as usize).min(freqs - 1);
            bank[[m, k]] = 1.0;
        }
    }
    bank
}

/// Log-mel energies of a single-channel signal.
///
/// Frame `t` is centred on the middle of the interval
/// `[t * frame_shift, (t + 1) * frame_shift)`, so features line up with a
/// plain 10 ms time grid.
pub fn logmel(
    audio: &MultichannelAudio,
    num_mels: usize,
    fft_size: usize,
    frame_shift: usize,
) -> Result<FeatureMatrix> {
    if num_mels < 1 {
        return Err(Error::invalid("num_mels must be at least 1"));
    }
    if audio.num_channels() != 1 {
        return Err(Error::invalid("logmel expects a single channel"));
    }
    if !fft_size.is_power_of_two() || frame_shift == 0 {
        return Err(Error::invalid("bad fft_size / frame_shift"));
    }
    let signal = audio.channel(0);
    let n = signal.len();
    let frames = n.div_ceil(frame_shift);
    let freqs = fft_size / 2 + 1;
    let window = Window::Hann.coefficients(fft_size);
    let bank = mel_filterbank(num_mels, fft_size, audio.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);

    let mut rows = Array2::zeros((frames, num_mels));
    let mut buf = vec![Complex64::default(); fft_size];
    let mut power = vec![0.0; freqs];
    for t in 0..frames {
        let center = (t * frame_shift + frame_shift / 2) as isize;
        let start = center - (fft_size / 2) as isize;
        for (i, (slot, w)) in buf.iter_mut().zip(&window).enumerate() {
            let idx = start + i as isize;
            let x = if idx >= 0 && (idx as usize) < n {
                signal[idx as usize]
            } else {
                0.0
            };
            *slot = Complex64::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for m in 0..num_mels {
            let e: f64 = bank.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            rows[[t, m]] = e.max(MEL_FLOOR).ln();
        }
    }
    Ok(FeatureMatrix {
        rows,
        frame_shift_sec: frame_shift as f64 / audio.sample_rate as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn rejects_ragged_channels() {
        assert!(MultichannelAudio::new(vec![vec![0.0; 3], vec![0.0; 2]], 16000).is_err());
        assert!(MultichannelAudio::new(vec![vec![0.0; 3]], 0).is_err());
        assert!(MultichannelAudio::new(vec![vec![f64::NAN]], 16000).is_err());
    }

    #[test]
    fn wav_header_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let audio = MultichannelAudio::mono(noise(160, 1), 16000).unwrap();
        write_wav(&path, &audio).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.num_channels(), 1);
        assert_eq!(back.num_samples(), 160);
        assert_eq!(back.sample_rate(), 16000);
        for (a, b) in audio.channel(0).iter().zip(back.channel(0)) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn wav_saturates_and_interleaves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let audio = MultichannelAudio::new(vec![vec![2.0, 0.0], vec![-3.0, 0.5]], 8000).unwrap();
        write_wav(&path, &audio).unwrap();
        let mut reader = hound::WavReader::open(&path).unwrap();
        assert_eq!(reader.spec().channels, 2);
        let raw: Vec<i16> = reader.samples::<i16>().map(|s| s.unwrap()).collect();
        assert_eq!(raw, vec![32767, -32767, 0, 16384]);
    }

    #[test]
    fn wav_zero_signal_and_empty_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_wav(
            &path,
            &MultichannelAudio::mono(vec![0.0; 50], 16000).unwrap(),
        )
        .unwrap();
        let mut reader = hound::WavReader::open(&path).unwrap();
        assert!(reader.samples::<i16>().all(|s| s.unwrap() == 0));

        let empty = dir.path().join("e.wav");
        write_wav(&empty, &MultichannelAudio::mono(vec![], 16000).unwrap()).unwrap();
        let audio = read_wav(&empty).unwrap();
        assert_eq!(audio.num_samples(), 0);
    }

    #[test]
    fn wav_float_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for s in [0.25f32, -0.5, 1.0] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(read_wav(&path).unwrap().channel(0), &[0.25, -0.5, 1.0]);
    }

    #[test]
    fn wav_error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_wav(dir.path().join("nope.wav")),
            Err(Error::MissingFile(_))
        ));

        let path = dir.path().join("i8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(Error::UnsupportedEncoding(_))
        ));

        let full = dir.path().join("full.wav");
        write_wav(
            &full,
            &MultichannelAudio::mono(noise(100, 2), 16000).unwrap(),
        )
        .unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.wav");
        std::fs::write(&cut, &bytes[..bytes.len() - 51]).unwrap();
        assert!(matches!(
            read_wav(&cut),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn stft_frame_count_and_shape() {
        let cfg = StftConfig {
            fft_size: 512,
            frame_shift: 128,
            window: Window::SqrtHann,
        };
        let audio = MultichannelAudio::mono(noise(1000, 3), 16000).unwrap();
        let spec = stft(&audio, cfg).unwrap();
        assert_eq!(spec.num_freqs(), 257);
        assert_eq!(spec.num_frames(), cfg.num_frames(1000));
        assert!(stft(&MultichannelAudio::mono(vec![], 16000).unwrap(), cfg).is_err());
        let bad = StftConfig {
            fft_size: 500,
            ..cfg
        };
        assert!(stft(&audio, bad).is_err());
    }

    #[test]
    fn stft_pure_tone_concentrates_in_bin() {
        let fft_size = 256;
        let bin: usize = 8;
        let signal: Vec<f64> = (0..4096)
            .map(|n| (2.0 * PI * bin as f64 * n as f64 / fft_size as f64).sin())
            .collect();
        let cfg = StftConfig {
            fft_size,
            frame_shift: fft_size,
            window: Window::Rectangular,
        };
        let spec = stft(&MultichannelAudio::mono(signal, 16000).unwrap(), cfg).unwrap();
        // Frame 1 lies entirely inside the signal.
        let row = spec.bins.slice(ndarray::s![0, 1, ..]);
        let total: f64 = row.iter().map(|c| c.norm_sqr()).sum();
        assert!(row[bin].norm_sqr() / total > 0.99);
    }

    #[test]
    fn stft_of_zeros_is_zero() {
        let cfg = StftConfig::enhancement(16000);
        let spec = stft(
            &MultichannelAudio::mono(vec![0.0; 5000], 16000).unwrap(),
            cfg,
        )
        .unwrap();
        assert!(spec.bins.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn istft_requires_frames() {
        let spec = Spectrogram {
            bins: Array3::zeros((1, 0, 257)),
            fft_size: 512,
            frame_shift: 256,
            sample_rate: 16000,
            num_samples: 0,
        };
        assert!(istft(&spec, Window::SqrtHann).is_err());
    }

    #[test]
    fn frame_time_mapping_is_consistent() {
        let cfg = StftConfig::enhancement(16000);
        let audio = MultichannelAudio::mono(vec![0.0; 16000], 16000).unwrap();
        let spec = stft(&audio, cfg).unwrap();
        for t in [0usize, 5, 20, 50] {
            assert_eq!(spec.frame_at(spec.frame_center_sec(t)), t);
        }
    }

    #[test]
    fn logmel_floor_and_gain() {
        let z = MultichannelAudio::mono(vec![0.0; 1600], 16000).unwrap();
        let f = logmel(&z, 40, 512, 160).unwrap();
        assert_eq!(f.num_frames(), 10);
        assert!(f.rows.iter().all(|&v| v == MEL_FLOOR.ln()));
        assert!(logmel(&z, 0, 512, 160).is_err());
        let stereo = MultichannelAudio::new(vec![vec![0.0; 10]; 2], 16000).unwrap();
        assert!(logmel(&stereo, 40, 512, 160).is_err());
    }

    #[test]
    fn logmel_tone_dominates_low_bands() {
        let sr = 16000;
        let tone: Vec<f64> = (0..16000)
            .map(|n| 0.5 * (2.0 * PI * 300.0 * n as f64 / sr as f64).sin())
            .collect();
        let white = noise(16000, 9);
        let ft = logmel(&MultichannelAudio::mono(tone, sr).unwrap(), 40, 512, 160).unwrap();
        let fw = logmel(&MultichannelAudio::mono(white, sr).unwrap(), 40, 512, 160).unwrap();
        let bank = mel_filterbank(40, 512, sr);
        // Independent check: the band whose filter peaks nearest 300 Hz.
        let k300 = (300.0 * 512.0 / sr as f64).round() as usize;
        let expected = (0..40)
            .max_by(|&a, &b| bank[[a, k300]].partial_cmp(&bank[[b, k300]]).unwrap())
            .unwrap();
        let argmax = |row: ndarray::ArrayView1<f64>| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let t = 50;
        let tone_band = argmax(ft.rows.row(t));
        assert!(
            tone_band.abs_diff(expected) <= 1,
            "{tone_band} vs {expected}"
        );
        assert!(argmax(fw.rows.row(t)) > tone_band);
    }
}
