//! Guided source separation: a complex angular central Gaussian mixture per
//! frequency bin whose time-varying weights are tied across frequency and
//! constrained by known speaker activity, followed by mask-based MVDR.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::audio::{istft, stft, MultichannelAudio, Spectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::segments::{Segment, SegmentList};

pub const DEFAULT_CONTEXT_SEC: f64 = 20.0;
pub const DEFAULT_EM_ITERATIONS: usize = 20;
const SEGMENT_TOL: f64 = 1e-9;

/// Frame centres `first_center_sec + t * shift_sec`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGrid {
    pub num_frames: usize,
    pub first_center_sec: f64,
    pub shift_sec: f64,
}

impl FrameGrid {
    pub fn of(spec: &Spectrogram) -> Self {
        Self {
            num_frames: spec.num_frames(),
            first_center_sec: spec.frame_center_sec(0),
            shift_sec: spec.frame_shift as f64 / spec.sample_rate as f64,
        }
    }

    pub fn center(&self, t: usize) -> f64 {
        self.first_center_sec + t as f64 * self.shift_sec
    }

    pub fn offset(self, sec: f64) -> Self {
        Self {
            first_center_sec: self.first_center_sec + sec,
            ..self
        }
    }
}

/// Which classes may be active on each frame. The last class is noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityPattern {
    /// `[classes, frames]`
    pub active: Array2<bool>,
    /// Speaker label of every class except the trailing noise class.
    pub speakers: Vec<String>,
    pub target: usize,
    /// Processed region `[start, end)` in seconds.
    pub region: (f64, f64),
}

impl ActivityPattern {
    pub fn num_classes(&self) -> usize {
        self.active.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.active.ncols()
    }

    pub fn noise_class(&self) -> usize {
        self.num_classes() - 1
    }
}

/// The utterance extended by `context_sec` on both sides, clipped to the recording.
pub fn gss_region(utterance: &Segment, context_sec: f64, recording_sec: f64) -> (f64, f64) {
    (
        (utterance.onset - context_sec).max(0.0),
        (utterance.end() + context_sec).min(recording_sec),
    )
}

/// Builds the activity pattern used to guide the mixture for one utterance.
///
/// Classes are the target speaker plus every other speaker active somewhere
/// on the grid, then noise. A speaker class is active on frames whose centre
/// lies inside one of that speaker's segments; noise is always active.
pub fn build_activity(
    segments: &SegmentList,
    utterance: &Segment,
    context_sec: f64,
    recording_sec: f64,
    grid: FrameGrid,
) -> Result<ActivityPattern> {
    let present = segments.iter().any(|s| {
        s.label == utterance.label
            && (s.onset - utterance.onset).abs() < SEGMENT_TOL
            && (s.duration - utterance.duration).abs() < SEGMENT_TOL
    });
    if !present {
        return Err(Error::invalid(format!(
            "utterance of `{}` at {:.2} s is not in the segment list",
            utterance.label, utterance.onset
        )));
    }
    let region = gss_region(utterance, context_sec, recording_sec);
    let mut rows: Vec<(String, Vec<bool>)> = Vec::new();
    for label in segments.labels() {
        let segs = segments.with_label(&label);
        let row: Vec<bool> = (0..grid.num_frames)
            .map(|t| {
                let c = grid.center(t);
                segs.iter().any(|s| c >= s.onset && c < s.end())
            })
            .collect();
        if label == utterance.label || row.iter().any(|&a| a) {
            rows.push((label, row));
        }
    }
    let target = rows
        .iter()
        .position(|(l, _)| *l == utterance.label)
        .expect("target label is present");
    let classes = rows.len() + 1;
    let mut active = Array2::from_elem((classes, grid.num_frames), true);
    for (k, (_, row)) in rows.iter().enumerate() {
        for (t, &a) in row.iter().enumerate() {
            active[[k, t]] = a;
        }
    }
    Ok(ActivityPattern {
        active,
        speakers: rows.into_iter().map(|(l, _)| l).collect(),
        target,
        region,
    })
}

/// Mixture parameters: shape matrices per bin and class, and frame weights.
#[derive(Debug, Clone)]
pub struct CacgmmParams {
    /// `shape[f][k]`, Hermitian positive definite with trace `D`.
    pub shape: Vec<Vec<DMatrix<Complex64>>>,
    /// `[frames, classes]`, shared by all bins.
    pub pi: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfMask {
    /// `[classes, frames, freqs]`
    pub gamma: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct CacgmmResult {
    pub params: CacgmmParams,
    pub mask: TfMask,
    /// Total log-likelihood before each update and after the last one.
    pub log_likelihood: Vec<f64>,
}

/// Inverse and log-determinant of a Hermitian positive definite matrix.
struct Inverse {
    inv: Vec<Complex64>,
    log_det: f64,
}

fn hermitian_inverse(b: &DMatrix<Complex64>) -> Result<Inverse> {
    let d = b.nrows();
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("shape matrix lost positive definiteness"))?;
    let log_det = 2.0 * (0..d).map(|i| chol.l_dirty()[(i, i)].re.ln()).sum::<f64>();
    let inv = chol.inverse();
    Ok(Inverse {
        inv: (0..d * d).map(|i| inv[(i / d, i % d)]).collect(),
        log_det,
    })
}

fn quad_form(inv: &[Complex64], z: &[Complex64]) -> f64 {
    let d = z.len();
    let mut acc = Complex64::default();
    for i in 0..d {
        let row = &inv[i * d..(i + 1) * d];
        let mut s = Complex64::default();
        for j in 0..d {
            s += row[j] * z[j];
        }
        acc += z[i].conj() * s;
    }
    acc.re.max(1e-300)
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

struct BinUpdate {
    /// `[frames, classes]`
    gamma: Array2<f64>,
    log_likelihood: f64,
    shape: Option<Vec<DMatrix<Complex64>>>,
}

/// One E-step for bin `f`, optionally followed by the shape-matrix M-step.
fn update_bin(
    z: &Array2<Complex64>,
    valid: &[bool],
    shape: &[DMatrix<Complex64>],
    pi: &Array2<f64>,
    activity: &ActivityPattern,
    m_step: bool,
) -> Result<BinUpdate> {
    let (frames, d) = z.dim();
    let classes = shape.len();
    let inverses = shape
        .iter()
        .map(hermitian_inverse)
        .collect::<Result<Vec<_>>>()?;
    let norm_const = ln_factorial(d - 1) - (2.0 * std::f64::consts::PI.powi(d as i32)).ln();
    let mut gamma = Array2::zeros((frames, classes));
    let mut quad = Array2::zeros((frames, classes));
    let mut ll = 0.0;
    let mut logw = vec![0.0; classes];
    for t in 0..frames {
        if !valid[t] {
            for k in 0..classes {
                gamma[[t, k]] = pi[[t, k]];
            }
            continue;
        }
        let zt = z.row(t);
        let zt = zt.as_slice().expect("row-major rows are contiguous");
        let mut max = f64::NEG_INFINITY;
        for k in 0..classes {
            if activity.active[[k, t]] && pi[[t, k]] > 0.0 {
                let q = quad_form(&inverses[k].inv, zt);
                quad[[t, k]] = q;
                logw[k] = pi[[t, k]].ln() + norm_const - inverses[k].log_det - d as f64 * q.ln();
                max = max.max(logw[k]);
            } else {
                logw[k] = f64::NEG_INFINITY;
            }
        }
        let sum: f64 = logw.iter().map(|&l| (l - max).exp()).sum();
        ll += max + sum.ln();
        for k in 0..classes {
            gamma[[t, k]] = (logw[k] - max).exp() / sum;
        }
    }

    let shape = if m_step {
        let mut out = Vec::with_capacity(classes);
        for (k, old) in shape.iter().enumerate() {
            let mut acc = vec![Complex64::default(); d * d];
            let mut weight = 0.0;
            for t in (0..frames).filter(|&t| valid[t]) {
                let g = gamma[[t, k]];
                if g <= 0.0 {
                    continue;
                }
                weight += g;
                let scale = g / quad[[t, k]];
                let zt = z.row(t);
                for i in 0..d {
                    let zi = zt[i] * scale;
                    for j in 0..d {
                        acc[i * d + j] += zi * zt[j].conj();
                    }
                }
            }
            if weight <= 1e-300 {
                out.push(old.clone());
                continue;
            }
            let mut b = DMatrix::from_fn(d, d, |i, j| {
                0.5 * (acc[i * d + j] + acc[j * d + i].conj()) * (d as f64 / weight)
            });
            let trace: f64 = (0..d).map(|i| b[(i, i)].re).sum();
            if !(trace > 0.0 && trace.is_finite()) {
                out.push(old.clone());
                continue;
            }
            b *= Complex64::new(d as f64 / trace, 0.0);
            for i in 0..d {
                b[(i, i)] += 1e-10;
            }
            out.push(b);
        }
        Some(out)
    } else {
        None
    };
    Ok(BinUpdate {
        gamma,
        log_likelihood: ll,
        shape,
    })
}

/// Unit-normalised observation vectors for one bin, `[frames, D]`, and
/// which frames carry any energy.
fn normalised_bin(spec: &Spectrogram, f: usize) -> (Array2<Complex64>, Vec<bool>) {
    let (d, frames) = (spec.num_channels(), spec.num_frames());
    let mut z = Array2::zeros((frames, d));
    let mut valid = vec![false; frames];
    for t in 0..frames {
        let norm = (0..d)
            .map(|c| spec.bins[[c, t, f]].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if norm > 1e-150 {
            valid[t] = true;
            for c in 0..d {
                z[[t, c]] = spec.bins[[c, t, f]] / norm;
            }
        }
    }
    (z, valid)
}

fn initial_pi(activity: &ActivityPattern) -> Array2<f64> {
    let (classes, frames) = activity.active.dim();
    let mut pi = Array2::zeros((frames, classes));
    for t in 0..frames {
        let n = (0..classes).filter(|&k| activity.active[[k, t]]).count() as f64;
        for k in (0..classes).filter(|&k| activity.active[[k, t]]) {
            pi[[t, k]] = 1.0 / n;
        }
    }
    pi
}

/// Trace-normalised covariance of `z` weighted by the initial class weights.
fn initial_speaker_shape(
    z: &Array2<Complex64>,
    valid: &[bool],
    weights: ndarray::ArrayView1<f64>,
) -> DMatrix<Complex64> {
    let d = z.ncols();
    let mut acc = DMatrix::<Complex64>::zeros(d, d);
    for t in (0..z.nrows()).filter(|&t| valid[t] && weights[t] > 0.0) {
        for i in 0..d {
            let zi = z[[t, i]] * weights[t];
            for j in 0..d {
                acc[(i, j)] += zi * z[[t, j]].conj();
            }
        }
    }
    let trace: f64 = (0..d).map(|i| acc[(i, i)].re).sum();
    if !(trace > 0.0 && trace.is_finite()) {
        return DMatrix::identity(d, d);
    }
    let mut b = (&acc + acc.adjoint()) * Complex64::new(0.5 * d as f64 / trace, 0.0);
    for i in 0..d {
        b[(i, i)] += 1e-10;
    }
    b
}

/// Activity-guided CACGMM EM over all bins of a stacked multichannel spectrogram.
///
/// Weights start uniform over the active classes. The noise class starts
/// with an identity shape matrix and every speaker class with the
/// covariance of the observations weighted by its initial weights, so that
/// classes sharing the same activity do not start at a symmetric fixed
/// point. After `iterations` EM updates a final E-step produces masks
/// consistent with the returned parameters.
pub fn cacgmm_em(
    spec: &Spectrogram,
    activity: &ActivityPattern,
    iterations: usize,
) -> Result<CacgmmResult> {
    let d = spec.num_channels();
    if d < 2 {
        return Err(Error::invalid(
            "mixture estimation needs at least 2 channels",
        ));
    }
    if iterations == 0 {
        return Err(Error::invalid("at least one EM iteration is required"));
    }
    if activity.num_frames() != spec.num_frames() {
        return Err(Error::shape(format!(
            "activity has {} frames, spectrogram {}",
            activity.num_frames(),
            spec.num_frames()
        )));
    }
    if spec
        .bins
        .iter()
        .any(|c| !c.re.is_finite() || !c.im.is_finite())
    {
        return Err(Error::NonFinite("spectrogram"));
    }
    let (classes, frames, freqs) = (activity.num_classes(), spec.num_frames(), spec.num_freqs());
    let mut pi = initial_pi(activity);
    let noise = activity.noise_class();
    let observations: Vec<(Array2<Complex64>, Vec<bool>)> = (0..freqs)
        .into_par_iter()
        .map(|f| normalised_bin(spec, f))
        .collect();
    let mut shape: Vec<Vec<DMatrix<Complex64>>> = observations
        .par_iter()
        .map(|(z, valid)| {
            (0..classes)
                .map(|k| {
                    if k == noise {
                        DMatrix::identity(d, d)
                    } else {
                        initial_speaker_shape(z, valid, pi.column(k))
                    }
                })
                .collect()
        })
        .collect();
    let mut log_likelihood = Vec::with_capacity(iterations + 1);
    let mut gamma = Array3::zeros((classes, frames, freqs));

    for it in 0..=iterations {
        let m_step = it < iterations;
        let updates = (0..freqs)
            .into_par_iter()
            .map(|f| {
                let (z, valid) = &observations[f];
                update_bin(z, valid, &shape[f], &pi, activity, m_step)
            })
            .collect::<Result<Vec<_>>>()?;
        log_likelihood.push(updates.iter().map(|u| u.log_likelihood).sum());
        let mut pi_sum = Array2::<f64>::zeros((frames, classes));
        for (f, u) in updates.into_iter().enumerate() {
            for t in 0..frames {
                for k in 0..classes {
                    gamma[[k, t, f]] = u.gamma[[t, k]];
                    pi_sum[[t, k]] += u.gamma[[t, k]];
                }
            }
            if let Some(s) = u.shape {
                shape[f] = s;
            }
        }
        if m_step {
            for t in 0..frames {
                let total: f64 = (0..classes)
                    .filter(|&k| activity.active[[k, t]])
                    .map(|k| pi_sum[[t, k]])
                    .sum();
                for k in 0..classes {
                    pi[[t, k]] = if activity.active[[k, t]] && total > 0.0 {
                        pi_sum[[t, k]] / total
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(CacgmmResult {
        params: CacgmmParams { shape, pi },
        mask: TfMask { gamma },
        log_likelihood,
    })
}

#[derive(Debug, Clone)]
pub struct MvdrOutput {
    pub spec: Spectrogram,
    /// True when some bin had no usable target statistics and fell back
    /// to the masked reference channel.
    pub fallback: bool,
    pub fallback_bins: usize,
}

fn spatial_covariance(
    spec: &Spectrogram,
    f: usize,
    mask: &Array2<f64>,
) -> Option<DMatrix<Complex64>> {
    let d = spec.num_channels();
    let mut phi = DMatrix::zeros(d, d);
    let mut weight = 0.0;
    for t in 0..spec.num_frames() {
        let g = mask[[t, f]];
        if g <= 0.0 {
            continue;
        }
        weight += g;
        for i in 0..d {
            let xi = spec.bins[[i, t, f]] * g;
            for j in 0..d {
                phi[(i, j)] += xi * spec.bins[[j, t, f]].conj();
            }
        }
    }
    (weight > 1e-300).then(|| phi / Complex64::new(weight, 0.0))
}

/// Souden-style MVDR from target and interference masks, `[frames, freqs]`.
///
/// Diagonal loading of `1e-6 * (tr Phi_n + tr Phi_t) / D` keeps the filter
/// invariant to the overall input scale.
pub fn mvdr_extract(
    spec: &Spectrogram,
    target_mask: &Array2<f64>,
    interference_mask: &Array2<f64>,
    ref_channel: usize,
) -> Result<MvdrOutput> {
    let (d, frames, freqs) = (spec.num_channels(), spec.num_frames(), spec.num_freqs());
    let expected = (frames, freqs);
    if target_mask.dim() != expected || interference_mask.dim() != expected {
        return Err(Error::shape(
            "masks must be [frames, freqs] of the spectrogram",
        ));
    }
    if ref_channel >= d {
        return Err(Error::invalid(format!(
            "reference channel {ref_channel} out of range"
        )));
    }
    let per_bin: Vec<(Vec<Complex64>, bool)> = (0..freqs)
        .into_par_iter()
        .map(|f| {
            let fallback = || -> (Vec<Complex64>, bool) {
                let y = (0..frames)
                    .map(|t| spec.bins[[ref_channel, t, f]] * target_mask[[t, f]])
                    .collect();
                (y, true)
            };
            let (Some(phi_t), Some(mut phi_n)) = (
                spatial_covariance(spec, f, target_mask),
                spatial_covariance(spec, f, interference_mask),
            ) else {
                return fallback();
            };
            let tr = |m: &DMatrix<Complex64>| (0..d).map(|i| m[(i, i)].re).sum::<f64>();
            let load = 1e-6 * (tr(&phi_n) + tr(&phi_t)) / d as f64;
            if !(load > 0.0 && load.is_finite()) {
                return fallback();
            }
            for i in 0..d {
                phi_n[(i, i)] += load;
            }
            let Some(chol) = phi_n.cholesky() else {
                return fallback();
            };
            let ratio = chol.solve(&phi_t);
            let trace: Complex64 = (0..d).map(|i| ratio[(i, i)]).sum();
            if !(trace.norm() > 1e-300 && trace.norm().is_finite()) {
                return fallback();
            }
            let w: Vec<Complex64> = (0..d).map(|i| ratio[(i, ref_channel)] / trace).collect();
            let y = (0..frames)
                .map(|t| (0..d).map(|i| w[i].conj() * spec.bins[[i, t, f]]).sum())
                .collect();
            (y, false)
        })
        .collect();
    let mut bins = Array3::zeros((1, frames, freqs));
    let mut fallback_bins = 0;
    for (f, (y, fb)) in per_bin.into_iter().enumerate() {
        fallback_bins += usize::from(fb);
        for (t, v) in y.into_iter().enumerate() {
            bins[[0, t, f]] = v;
        }
    }
    Ok(MvdrOutput {
        spec: Spectrogram {
            bins,
            fft_size: spec.fft_size,
            frame_shift: spec.frame_shift,
            sample_rate: spec.sample_rate,
            num_samples: spec.num_samples,
        },
        fallback: fallback_bins > 0,
        fallback_bins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GssConfig {
    pub context_sec: f64,
    pub iterations: usize,
    /// Defaults to the enhancement STFT for the sample rate.
    pub stft: Option<StftConfig>,
}

impl Default for GssConfig {
    fn default() -> Self {
        Self {
            context_sec: DEFAULT_CONTEXT_SEC,
            iterations: DEFAULT_EM_ITERATIONS,
            stft: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GssOutput {
    /// Mono enhanced utterance.
    pub audio: MultichannelAudio,
    pub ref_channel: usize,
    pub fallback: bool,
    pub region: (f64, f64),
    pub log_likelihood: Vec<f64>,
}

/// Enhances one utterance from all channels of all arrays.
pub fn gss_enhance(
    per_array: &[MultichannelAudio],
    segments: &SegmentList,
    utterance: &Segment,
    config: &GssConfig,
) -> Result<GssOutput> {
    let stacked = MultichannelAudio::stack(per_array)?;
    let region = prepare(&stacked, segments, utterance, config)?;
    let em = cacgmm_em(&region.spec, &region.activity, config.iterations)?;
    finish(&region, &em, utterance)
}

/// Enhances every segment in `segments`, in order.
///
/// Utterances whose processed region and activity pattern coincide (common
/// when recordings are shorter than the context) share one mixture estimate;
/// the result is identical to calling [`gss_enhance`] per utterance.
pub fn gss_enhance_all(
    per_array: &[MultichannelAudio],
    segments: &SegmentList,
    config: &GssConfig,
) -> Result<Vec<GssOutput>> {
    gss_enhance_many(per_array, segments, segments.as_slice(), config)
}

/// Enhances each of `targets` (utterances taken from `segments`), sharing
/// mixture estimates between consecutive targets as [`gss_enhance_all`] does.
pub fn gss_enhance_many(
    per_array: &[MultichannelAudio],
    segments: &SegmentList,
    targets: &[Segment],
    config: &GssConfig,
) -> Result<Vec<GssOutput>> {
    let stacked = MultichannelAudio::stack(per_array)?;
    let mut last: Option<(Region, CacgmmResult)> = None;
    let mut outputs = Vec::with_capacity(targets.len());
    for utt in targets {
        let region = prepare(&stacked, segments, utt, config)?;
        let reuse = matches!(&last, Some((r, _)) if r.bounds == region.bounds
            && r.activity.active == region.activity.active
            && r.activity.speakers == region.activity.speakers);
        if !reuse {
            let em = cacgmm_em(&region.spec, &region.activity, config.iterations)?;
            last = Some((region, em));
        } else if let Some((r, _)) = last.as_mut() {
            r.activity.target = region.activity.target;
        }
        let (r, em) = last.as_ref().expect("filled above");
        outputs.push(finish(r, em, utt)?);
    }
    Ok(outputs)
}

struct Region {
    /// Sample range of the processed region.
    bounds: (usize, usize),
    seconds: (f64, f64),
    spec: Spectrogram,
    activity: ActivityPattern,
    stft: StftConfig,
}

fn prepare(
    stacked: &MultichannelAudio,
    segments: &SegmentList,
    utterance: &Segment,
    config: &GssConfig,
) -> Result<Region> {
    let sr = stacked.sample_rate() as f64;
    let duration = stacked.duration_sec();
    if utterance.onset >= duration || utterance.end() > duration + 1e-6 {
        return Err(Error::invalid(
            "utterance extends past the end of the recording",
        ));
    }
    let seconds = gss_region(utterance, config.context_sec, duration);
    let start = (seconds.0 * sr).round() as usize;
    let end = ((seconds.1 * sr).round() as usize).min(stacked.num_samples());
    let stft_cfg = config
        .stft
        .unwrap_or_else(|| StftConfig::enhancement(stacked.sample_rate()));
    let spec = stft(&stacked.slice(start, end), stft_cfg)?;
    let grid = FrameGrid::of(&spec).offset(start as f64 / sr);
    let activity = build_activity(segments, utterance, config.context_sec, duration, grid)?;
    Ok(Region {
        bounds: (start, end),
        seconds,
        spec,
        activity,
        stft: stft_cfg,
    })
}

fn finish(region: &Region, em: &CacgmmResult, utterance: &Segment) -> Result<GssOutput> {
    let spec = &region.spec;
    let target = region.activity.target;
    let target_mask = em
        .mask
        .gamma
        .index_axis(ndarray::Axis(0), target)
        .to_owned();
    let interference = target_mask.mapv(|g| 1.0 - g);
    let ref_channel = (0..spec.num_channels())
        .map(|c| {
            let energy: f64 = spec
                .bins
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .zip(target_mask.iter())
                .map(|(x, g)| g * x.norm_sqr())
                .sum();
            (c, energy)
        })
        .fold((0, f64::NEG_INFINITY), |best, (c, e)| {
            if e > best.1 {
                (c, e)
            } else {
                best
            }
        })
        .0;
    let out = mvdr_extract(spec, &target_mask, &interference, ref_channel)?;
    let wave = istft(&out.spec, region.stft.window)?;
    let sr = spec.sample_rate as f64;
    let start = region.bounds.0;
    let u0 = ((utterance.onset * sr).round() as usize).saturating_sub(start);
    let u1 =
        (((utterance.end() * sr).round() as usize).saturating_sub(start)).min(wave.num_samples());
    Ok(GssOutput {
        audio: wave.slice(u0, u1),
        ref_channel,
        fallback: out.fallback,
        region: region.seconds,
        log_likelihood: em.log_likelihood.clone(),
    })
}
