//! Synthetic multi-array meeting scenes with known ground truth.
//!
//! The "speakers" are spectral, not real voices: a pulse train at a
//! speaker-specific pitch plus breath noise, shaped by a cascade of
//! speaker-specific formant resonators and chopped into syllables. They are
//! distinct enough for embeddings, SAD and separation to be exercised, and
//! every ground-truth quantity (dry sources, impulse responses, noise,
//! activity) is known exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::MultichannelAudio;
use crate::error::{Error, Result};
use crate::metrics::{Rttm, RttmRecord};
use crate::reseg::OverlapMask;
use crate::segments::{Segment, SegmentList};

const SPEED_OF_SOUND: f64 = 343.0;
const MIC_RADIUS: f64 = 0.05;
const ROOM: [f64; 2] = [7.0, 6.0];
const ROOM_HEIGHT: f64 = 3.0;
const EARLY_SEC: f64 = 0.05;
const PEAK_LIMIT: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub num_speakers: usize,
    pub num_arrays: usize,
    pub channels_per_array: usize,
    pub duration_sec: f64,
    pub overlap_ratio: f64,
    pub snr_db: f64,
    pub reverb_t60_sec: f64,
    pub seed: u64,
    pub sample_rate: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_speakers: 4,
            num_arrays: 2,
            channels_per_array: 4,
            duration_sec: 60.0,
            overlap_ratio: 0.0,
            snr_db: 20.0,
            reverb_t60_sec: 0.0,
            seed: 0,
            sample_rate: 16000,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.num_speakers) {
            return Err(Error::invalid("num_speakers must be between 1 and 4"));
        }
        if self.num_arrays == 0 || self.channels_per_array == 0 {
            return Err(Error::invalid("need at least one array with one channel"));
        }
        if !(self.duration_sec >= 2.0 && self.duration_sec.is_finite()) {
            return Err(Error::invalid("duration must be at least 2 s"));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(Error::invalid("overlap_ratio must lie in [0, 1)"));
        }
        if self.overlap_ratio > 0.0 && self.num_speakers < 2 {
            return Err(Error::invalid("overlap needs at least two speakers"));
        }
        if !(self.reverb_t60_sec >= 0.0 && self.reverb_t60_sec.is_finite()) {
            return Err(Error::invalid("reverb_t60_sec must be non-negative"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::invalid("snr_db must be finite"));
        }
        if self.sample_rate < 8000 {
            return Err(Error::invalid("sample rate must be at least 8 kHz"));
        }
        Ok(())
    }

    pub fn recording_id(&self) -> String {
        format!("scene{}", self.seed)
    }
}

/// Spectral identity of a synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub formants: Vec<(f64, f64)>,
    pub breath: f64,
}

/// Voices within one scene differ by at least this much in log pitch and
/// log formant frequency (Euclidean over f0 and the first three formants).
const MIN_VOICE_DISTANCE: f64 = 0.3;

impl Voice {
    fn distance(&self, other: &Voice) -> f64 {
        let mut d = (self.f0 / other.f0).ln().powi(2);
        for (a, b) in self.formants.iter().zip(&other.formants).take(3) {
            d += (a.0 / b.0).ln().powi(2);
        }
        d.sqrt()
    }

    /// Draws voices one by one, redrawing any that sits too close to an earlier one.
    fn distinct(count: usize, rng: &mut ChaCha8Rng) -> Vec<Self> {
        let mut voices: Vec<Voice> = Vec::with_capacity(count);
        while voices.len() < count {
            let v = Self::random(rng);
            if voices.iter().all(|w| w.distance(&v) >= MIN_VOICE_DISTANCE) {
                voices.push(v);
            }
        }
        voices
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        let f0 = rng.gen_range(90.0..260.0);
        let ranges = [
            (250.0, 900.0),
            (900.0, 2300.0),
            (2000.0, 3300.0),
            (3300.0, 4500.0),
        ];
        let formants = ranges
            .iter()
            .map(|&(lo, hi)| (rng.gen_range(lo..hi), rng.gen_range(60.0..180.0)))
            .collect();
        Self {
            f0,
            formants,
            breath: rng.gen_range(0.02..0.15),
        }
    }
}

fn speaker_label(s: usize) -> String {
    format!("S{s}")
}

/// Per-microphone impulse response: integer-delay direct path plus an
/// optional exponentially decaying noise tail starting right after it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub delay: usize,
    pub gain: f64,
    pub tail: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    pub center: [f64; 2],
    pub mics: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct SceneTruth {
    pub spec: SceneSpec,
    pub reference: Rttm,
    pub voices: Vec<Voice>,
    pub speaker_positions: Vec<[f64; 2]>,
    pub arrays: Vec<ArrayGeometry>,
    /// Dry source signals, one per speaker.
    pub sources: Vec<Vec<f64>>,
    /// `rirs[array][speaker][channel]`
    pub rirs: Vec<Vec<Vec<ImpulseResponse>>>,
    pub noise_std: Vec<f64>,
    /// Global factor applied to all images and noise to keep peaks below full scale.
    pub scale: f64,
}

impl SceneTruth {
    pub fn num_samples(&self) -> usize {
        self.sources.first().map_or(0, Vec::len)
    }

    pub fn segments(&self) -> SegmentList {
        self.reference.segments(&self.spec.recording_id())
    }

    pub fn speaker_labels(&self) -> Vec<String> {
        (0..self.spec.num_speakers).map(speaker_label).collect()
    }

    /// Union of all speech.
    pub fn speech(&self, frame_shift: f64) -> SegmentList {
        self.segments().union("speech", frame_shift)
    }

    pub fn oracle_overlap(&self, num_frames: usize, frame_shift: f64) -> OverlapMask {
        OverlapMask::from_reference(&self.segments(), num_frames, frame_shift)
    }

    /// Fraction of speech time with more than one active speaker.
    pub fn overlap_fraction(&self) -> f64 {
        let h = 0.01;
        let segs = self.segments();
        let n = crate::segments::frames_for(segs.end_time(), h);
        let mut counts = vec![0usize; n];
        for label in segs.labels() {
            for (c, m) in counts
                .iter_mut()
                .zip(segs.with_label(&label).frame_mask(n, h))
            {
                *c += usize::from(m);
            }
        }
        let speech = counts.iter().filter(|&&c| c > 0).count();
        let overlap = counts.iter().filter(|&&c| c > 1).count();
        overlap as f64 / speech.max(1) as f64
    }

    fn render(&self, array: usize, speaker: usize, early_only: bool) -> Vec<Vec<f64>> {
        let src = &self.sources[speaker];
        let early_taps = (EARLY_SEC * self.spec.sample_rate as f64) as usize;
        self.rirs[array][speaker]
            .iter()
            .map(|rir| {
                let n = src.len();
                let mut out = vec![0.0; n];
                for i in rir.delay..n {
                    out[i] = rir.gain * src[i - rir.delay] * self.scale;
                }
                let tail: &[f64] = if early_only {
                    &rir.tail[..rir.tail.len().min(early_taps)]
                } else {
                    &rir.tail
                };
                if !tail.is_empty() {
                    let conv = fft_convolve(src, tail);
                    for i in rir.delay + 1..n {
                        out[i] += conv[i - rir.delay - 1] * self.scale;
                    }
                }
                out
            })
            .collect()
    }

    /// Reverberant image of one speaker at every channel of an array.
    pub fn image(&self, array: usize, speaker: usize) -> MultichannelAudio {
        MultichannelAudio::new(self.render(array, speaker, false), self.spec.sample_rate)
            .expect("rendered channels share one length")
    }

    /// Direct path plus the first 50 ms of reverberation.
    pub fn early_image(&self, array: usize, speaker: usize) -> MultichannelAudio {
        MultichannelAudio::new(self.render(array, speaker, true), self.spec.sample_rate)
            .expect("rendered channels share one length")
    }

    /// Sum of all speaker images at an array, without noise.
    pub fn speech_image(&self, array: usize) -> MultichannelAudio {
        let mut acc = vec![vec![0.0; self.num_samples()]; self.spec.channels_per_array];
        for s in 0..self.spec.num_speakers {
            for (a, ch) in acc.iter_mut().zip(self.render(array, s, false)) {
                for (x, y) in a.iter_mut().zip(ch) {
                    *x += y;
                }
            }
        }
        MultichannelAudio::new(acc, self.spec.sample_rate).expect("valid channels")
    }

    /// The additive noise of an array, regenerated from the scene seed.
    pub fn noise(&self, array: usize) -> MultichannelAudio {
        let mut rng = stream(self.spec.seed, 100 + array as u64);
        let std = self.noise_std[array] * self.scale;
        let channels = (0..self.spec.channels_per_array)
            .map(|_| {
                (0..self.num_samples())
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        MultichannelAudio::new(channels, self.spec.sample_rate).expect("valid channels")
    }

    /// Per-channel delay of a speaker relative to channel 0, in samples.
    pub fn tdoa(&self, array: usize, speaker: usize) -> Vec<i64> {
        let rirs = &self.rirs[array][speaker];
        rirs.iter()
            .map(|r| r.delay as i64 - rirs[0].delay as i64)
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub(crate) fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(n, Complex64::default());
    let mut b: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(n, Complex64::default());
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.iter().take(x.len()).map(|v| v.re / n as f64).collect()
}

/// Utterances `(speaker, onset, duration)` with Poisson gaps and an
/// overlap controller that steers the running overlap fraction to the target.
/// A new utterance only ever overlaps the one that currently holds the floor,
/// so at most two speakers are active at once.
fn schedule(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, f64, f64)> {
    let gap = Exp::new(1.0 / 0.6).expect("positive rate");
    let r = spec.overlap_ratio;
    let mut utts = Vec::new();
    let (mut speech, mut overlap) = (0.0f64, 0.0f64);
    let (mut last_end, mut prev_end, mut last_onset) = (rng.gen_range(0.0..0.8), 0.0f64, 0.0f64);
    let mut holder: Option<usize> = None;
    loop {
        let dur: f64 = rng.gen_range(1.2..4.0);
        let speaker = match holder {
            Some(h) if spec.num_speakers > 1 => {
                let k = rng.gen_range(0..spec.num_speakers - 1);
                k + usize::from(k >= h)
            }
            _ => rng.gen_range(0..spec.num_speakers),
        };
        let mut o = 0.0;
        if r > 0.0 && holder.is_some() {
            let want = (r * (speech + dur) - overlap) / (1.0 + r);
            let room = last_end - prev_end.max(last_onset);
            o = want.min(0.8 * dur).min(room);
        }
        let onset = if o > 0.05 {
            last_end - o
        } else {
            o = 0.0;
            last_end + gap.sample(rng)
        };
        if onset + 0.5 > spec.duration_sec {
            break;
        }
        let dur = dur.min(spec.duration_sec - onset);
        speech += dur - o;
        overlap += o;
        prev_end = last_end;
        last_end = onset + dur;
        last_onset = onset;
        holder = Some(speaker);
        utts.push((speaker, onset, dur));
    }
    utts
}

fn resonate(x: &mut [f64], freq: f64, bandwidth: f64, sr: f64) {
    let r = (-std::f64::consts::PI * bandwidth / sr).exp();
    let theta = 2.0 * std::f64::consts::PI * freq / sr;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let gain = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = gain * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Syllable-chopped utterance of one voice, unit RMS over voiced samples.
fn synthesize(voice: &Voice, samples: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; samples];
    let mut pos = 0usize;
    while pos < samples {
        let syl = ((rng.gen_range(0.12..0.32) * sr) as usize).min(samples - pos);
        // Pitch glides across the syllable, as intonation does in speech, so
        // harmonics are only predictable over a few tens of milliseconds.
        let start = voice.f0 * rng.gen_range(0.85..1.15);
        let end = start * rng.gen_range(0.75..1.3);
        let amp = rng.gen_range(0.5..1.0);
        let mut seg = vec![0.0; syl];
        let mut next = rng.gen_range(0.0..sr / start);
        for (i, v) in seg.iter_mut().enumerate() {
            if i as f64 >= next {
                *v += 1.0;
                let pitch = start + (end - start) * i as f64 / syl as f64;
                next += sr / pitch * rng.gen_range(0.98..1.02);
            }
            *v += voice.breath * Distribution::<f64>::sample(&StandardNormal, rng);
        }
        for &(f, b) in &voice.formants {
            let f = (f * rng.gen_range(0.92..1.08)).min(0.45 * sr);
            resonate(&mut seg, f, b, sr);
        }
        let rms = (seg.iter().map(|v| v * v).sum::<f64>() / syl.max(1) as f64).sqrt();
        for (i, v) in seg.iter().enumerate() {
            let w = (std::f64::consts::PI * (i as f64 + 0.5) / syl as f64).sin();
            out[pos + i] = amp * w * v / rms.max(1e-12);
        }
        pos += syl + (rng.gen_range(0.01..0.05) * sr) as usize;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / samples.max(1) as f64).sqrt();
    out.iter().map(|v| v / rms.max(1e-12)).collect()
}

fn random_position(rng: &mut ChaCha8Rng, margin: f64) -> [f64; 2] {
    [
        rng.gen_range(margin..ROOM[0] - margin),
        rng.gen_range(margin..ROOM[1] - margin),
    ]
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Renders a scene deterministically from its spec.
pub fn simulate_scene(spec: &SceneSpec) -> Result<(Vec<MultichannelAudio>, SceneTruth)> {
    spec.validate()?;
    let sr = spec.sample_rate as f64;
    let n = (spec.duration_sec * sr).round() as usize;

    let mut geo = stream(spec.seed, 1);
    let arrays: Vec<ArrayGeometry> = (0..spec.num_arrays)
        .map(|_| {
            let center = random_position(&mut geo, 0.5);
            let phase = geo.gen_range(0.0..std::f64::consts::TAU);
            let mics = (0..spec.channels_per_array)
                .map(|c| {
                    if spec.channels_per_array == 1 {
                        return center;
                    }
                    let a =
                        phase + std::f64::consts::TAU * c as f64 / spec.channels_per_array as f64;
                    [
                        center[0] + MIC_RADIUS * a.cos(),
                        center[1] + MIC_RADIUS * a.sin(),
                    ]
                })
                .collect();
            ArrayGeometry { center, mics }
        })
        .collect();
    let mut speaker_positions = Vec::with_capacity(spec.num_speakers);
    while speaker_positions.len() < spec.num_speakers {
        let p = random_position(&mut geo, 0.5);
        if arrays.iter().all(|a| distance(a.center, p) >= 1.0)
            && speaker_positions.iter().all(|&q| distance(q, p) >= 0.8)
        {
            speaker_positions.push(p);
        }
    }

    let mut voice_rng = stream(spec.seed, 2);
    let voices = Voice::distinct(spec.num_speakers, &mut voice_rng);

    let mut sched_rng = stream(spec.seed, 3);
    let utts = schedule(spec, &mut sched_rng);
    let mut sources = vec![vec![0.0; n]; spec.num_speakers];
    let mut records = Vec::with_capacity(utts.len());
    for &(s, onset, dur) in &utts {
        let start = (onset * sr).round() as usize;
        let len = ((dur * sr).round() as usize).min(n - start);
        let wave = synthesize(&voices[s], len, sr, &mut voice_rng);
        sources[s][start..start + len].copy_from_slice(&wave);
        records.push(RttmRecord {
            recording_id: spec.recording_id(),
            onset: start as f64 / sr,
            duration: len as f64 / sr,
            speaker: speaker_label(s),
        });
    }
    records.sort_by(|a, b| a.onset.total_cmp(&b.onset));

    let mut rir_rng = stream(spec.seed, 4);
    let tail_len = (spec.reverb_t60_sec * sr) as usize;
    let rirs: Vec<Vec<Vec<ImpulseResponse>>> = arrays
        .iter()
        .map(|arr| {
            speaker_positions
                .iter()
                .map(|&p| {
                    arr.mics
                        .iter()
                        .map(|&m| {
                            let d = distance(m, p);
                            let gain = 1.0 / d;
                            let decay = 6.908 / (spec.reverb_t60_sec.max(1e-9) * sr);
                            let mut tail: Vec<f64> = (0..tail_len)
                                .map(|i| {
                                    let e: f64 = StandardNormal.sample(&mut rir_rng);
                                    e * (-decay * i as f64).exp()
                                })
                                .collect();
                            let energy: f64 = tail.iter().map(|v| v * v).sum();
                            if energy > 0.0 {
                                // Diffuse energy does not depend on distance; it equals the
                                // direct energy at the critical distance.
                                let volume = ROOM[0] * ROOM[1] * ROOM_HEIGHT;
                                let critical = 0.057 * (volume / spec.reverb_t60_sec).sqrt();
                                let target = 1.0 / (critical * critical);
                                let k = (target / energy).sqrt();
                                tail.iter_mut().for_each(|v| *v *= k);
                            }
                            ImpulseResponse {
                                delay: (d / SPEED_OF_SOUND * sr).round() as usize,
                                gain,
                                tail,
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut truth = SceneTruth {
        spec: *spec,
        reference: Rttm { records },
        voices,
        speaker_positions,
        arrays,
        sources,
        rirs,
        noise_std: vec![0.0; spec.num_arrays],
        scale: 1.0,
    };

    let active = truth.speech(1.0 / sr).frame_mask(n, 1.0 / sr);
    let active_count = active.iter().filter(|&&a| a).count().max(1);
    let images: Vec<MultichannelAudio> = (0..spec.num_arrays)
        .map(|a| truth.speech_image(a))
        .collect();
    for (a, img) in images.iter().enumerate() {
        let power: f64 = img
            .channels()
            .iter()
            .map(|ch| {
                ch.iter()
                    .zip(&active)
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (active_count * spec.channels_per_array) as f64;
        truth.noise_std[a] = (power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
    }
    let mixtures: Vec<Vec<Vec<f64>>> = images
        .iter()
        .enumerate()
        .map(|(a, img)| {
            let noise = truth.noise(a);
            img.channels()
                .iter()
                .zip(noise.channels())
                .map(|(s, v)| s.iter().zip(v).map(|(x, y)| x + y).collect())
                .collect()
        })
        .collect();
    let peak = mixtures
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PEAK_LIMIT / peak } else { 1.0 };
    truth.scale = scale;
    let audio = mixtures
        .into_iter()
        .map(|chs| {
            let chs = chs
                .into_iter()
                .map(|c| c.into_iter().map(|v| v * scale).collect())
                .collect();
            MultichannelAudio::new(chs, spec.sample_rate)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((audio, truth))
}

/// Segment list of a scene's reference, for convenience in tests and tools.
pub fn reference_segments(truth: &SceneTruth) -> SegmentList {
    truth.segments()
}

/// Utterances of one speaker in the reference.
pub fn utterances_of(truth: &SceneTruth, speaker: &str) -> Vec<Segment> {
    truth.segments().with_label(speaker).into_vec()
}
