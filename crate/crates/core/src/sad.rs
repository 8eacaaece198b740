//! Speech activity detection: frame posteriors, multi-array posterior fusion
//! and duration-constrained Viterbi smoothing.

use std::str::FromStr;

use ndarray::Array2;

use crate::audio::{logmel, FeatureMatrix, MultichannelAudio, StftConfig};
use crate::error::{Error, Result};
use crate::segments::{from_frame_mask, SegmentList};

/// Output classes of a frame classifier, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SadClass {
    Silence = 0,
    Speech = 1,
    Garbage = 2,
}

impl SadClass {
    pub const ALL: [SadClass; 3] = [SadClass::Silence, SadClass::Speech, SadClass::Garbage];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const NUM_CLASSES: usize = 3;

/// Per-frame class probabilities, `[frames, 3]`, rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosteriors {
    probs: Array2<f64>,
    frame_shift_sec: f64,
}

impl FramePosteriors {
    pub fn new(probs: Array2<f64>, frame_shift_sec: f64) -> Result<Self> {
        if probs.ncols() != NUM_CLASSES {
            return Err(Error::shape(format!(
                "posteriors need {NUM_CLASSES} columns, got {}",
                probs.ncols()
            )));
        }
        if !(frame_shift_sec > 0.0) {
            return Err(Error::invalid("frame shift must be positive"));
        }
        for (t, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!(
                    "frame {t}: probability outside [0, 1]"
                )));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("frame {t}: row sums to {sum}")));
            }
        }
        Ok(Self {
            probs,
            frame_shift_sec,
        })
    }

    /// Builds posteriors from a speech probability per frame (garbage = 0).
    pub fn from_speech_probs(speech: &[f64], frame_shift_sec: f64) -> Result<Self> {
        let probs = Array2::from_shape_fn((speech.len(), NUM_CLASSES), |(t, c)| match c {
            0 => 1.0 - speech[t],
            1 => speech[t],
            _ => 0.0,
        });
        Self::new(probs, frame_shift_sec)
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn num_frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn frame_shift_sec(&self) -> f64 {
        self.frame_shift_sec
    }

    pub fn speech(&self, t: usize) -> f64 {
        self.probs[[t, SadClass::Speech.index()]]
    }
}

/// Anything that turns features into frame posteriors.
pub trait PosteriorSource {
    fn posteriors(&self, features: &FeatureMatrix) -> Result<FramePosteriors>;
}

/// Unsupervised two-component Gaussian mixture over per-frame log-energy and
/// log spectral flatness; the louder component is speech.
#[derive(Debug, Clone, Copy)]
pub struct ReferencePosteriors {
    pub iterations: usize,
    pub smoothing_frames: usize,
}

impl Default for ReferencePosteriors {
    fn default() -> Self {
        Self {
            iterations: 50,
            smoothing_frames: 5,
        }
    }
}

impl PosteriorSource for ReferencePosteriors {
    fn posteriors(&self, features: &FeatureMatrix) -> Result<FramePosteriors> {
        let frames = features.num_frames();
        if frames < 2 {
            return Err(Error::invalid(
                "reference posteriors need at least 2 frames",
            ));
        }
        let (energy, flatness) = energy_and_flatness(features);
        let speech = match standardize(&energy) {
            None => vec![0.5; frames],
            Some(e) => {
                let f = standardize(&flatness).unwrap_or_else(|| vec![0.0; frames]);
                let raw = two_component_em(&e, &f, self.iterations);
                moving_average(&raw, self.smoothing_frames)
            }
        };
        FramePosteriors::from_speech_probs(&speech, features.frame_shift_sec)
    }
}

pub fn reference_posteriors(features: &FeatureMatrix) -> Result<FramePosteriors> {
    ReferencePosteriors::default().posteriors(features)
}

/// Log total energy and log spectral flatness of log-mel rows.
pub fn energy_and_flatness(features: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    features
        .rows
        .rows()
        .into_iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_energy = max + sum_exp.ln();
            let log_mean = log_energy - (row.len() as f64).ln();
            let log_geo = row.mean().unwrap_or(0.0);
            (log_energy, log_geo - log_mean)
        })
        .unzip()
}

fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var < 1e-12 {
        return None;
    }
    let sd = var.sqrt();
    Some(x.iter().map(|v| (v - mean) / sd).collect())
}

/// Diagonal-covariance 2-D GMM with two components; returns the posterior
/// of the component with higher mean energy.
fn two_component_em(energy: &[f64], flatness: &[f64], iterations: usize) -> Vec<f64> {
    const VAR_FLOOR: f64 = 1e-3;
    let n = energy.len();
    let mut sorted = energy.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| sorted[((n - 1) as f64 * q).round() as usize];

    let mut weight = [0.5f64, 0.5];
    let mut mean = [[quantile(0.1), 0.0], [quantile(0.9), 0.0]];
    let mut var = [[1.0, 1.0], [1.0, 1.0]];
    let mut resp = vec![[0.5, 0.5]; n];

    let log_gauss = |x: [f64; 2], m: [f64; 2], v: [f64; 2]| -> f64 {
        (0..2)
            .map(|d| -0.5 * ((x[d] - m[d]).powi(2) / v[d] + v[d].ln()))
            .sum()
    };
    for _ in 0..iterations {
        for t in 0..n {
            let x = [energy[t], flatness[t]];
            let l0 = weight[0].ln() + log_gauss(x, mean[0], var[0]);
            let l1 = weight[1].ln() + log_gauss(x, mean[1], var[1]);
            let m = l0.max(l1);
            let (a, b) = ((l0 - m).exp(), (l1 - m).exp());
            resp[t] = [a / (a + b), b / (a + b)];
        }
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum::<f64>().max(1e-10);
            weight[k] = (nk / n as f64).clamp(1e-6, 1.0 - 1e-6);
            for d in 0..2 {
                let col = |t: usize| if d == 0 { energy[t] } else { flatness[t] };
                let mu = (0..n).map(|t| resp[t][k] * col(t)).sum::<f64>() / nk;
                let v = (0..n)
                    .map(|t| resp[t][k] * (col(t) - mu).powi(2))
                    .sum::<f64>()
                    / nk;
                mean[k][d] = mu;
                var[k][d] = v.max(VAR_FLOOR);
            }
        }
    }
    let speech = if mean[1][0] >= mean[0][0] { 1 } else { 0 };
    resp.iter().map(|r| r[speech]).collect()
}

fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..x.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Mean,
    Max,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Fusion::Mean),
            "max" => Ok(Fusion::Max),
            other => Err(Error::invalid(format!("unknown fusion `{other}`"))),
        }
    }
}

/// Element-wise fusion across arrays, before row renormalisation.
pub fn fuse_unnormalized(per_array: &[FramePosteriors], criterion: Fusion) -> Result<Array2<f64>> {
    let first = per_array
        .first()
        .ok_or(Error::Empty("no posteriors to fuse"))?;
    for p in per_array {
        if p.num_frames() != first.num_frames() {
            return Err(Error::shape(format!(
                "frame counts differ: {} vs {}",
                p.num_frames(),
                first.num_frames()
            )));
        }
        if (p.frame_shift_sec - first.frame_shift_sec).abs() > 1e-12 {
            return Err(Error::shape("frame shifts differ"));
        }
    }
    let mut fused = first.probs.clone();
    for p in &per_array[1..] {
        match criterion {
            Fusion::Mean => fused += &p.probs,
            Fusion::Max => fused.zip_mut_with(&p.probs, |a, &b| *a = a.max(b)),
        }
    }
    if criterion == Fusion::Mean {
        fused /= per_array.len() as f64;
    }
    Ok(fused)
}

pub fn fuse_posteriors(
    per_array: &[FramePosteriors],
    criterion: Fusion,
) -> Result<FramePosteriors> {
    let mut fused = fuse_unnormalized(per_array, criterion)?;
    for mut row in fused.rows_mut() {
        let sum: f64 = row.sum();
        if sum > 0.0 {
            row /= sum;
        } else {
            row.fill(1.0 / NUM_CLASSES as f64);
        }
    }
    FramePosteriors::new(fused, per_array[0].frame_shift_sec)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SadHmmConfig {
    pub min_speech_sec: f64,
    pub min_silence_sec: f64,
    pub max_speech_sec: f64,
    pub speech_prior: f64,
}

impl Default for SadHmmConfig {
    fn default() -> Self {
        Self {
            min_speech_sec: 0.3,
            min_silence_sec: 0.3,
            max_speech_sec: 20.0,
            speech_prior: 0.5,
        }
    }
}

impl SadHmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_speech_sec > 0.0 && self.min_silence_sec > 0.0 && self.max_speech_sec > 0.0) {
            return Err(Error::invalid("SAD durations must be positive"));
        }
        if self.min_speech_sec > self.max_speech_sec {
            return Err(Error::invalid("min_speech_sec exceeds max_speech_sec"));
        }
        if !(self.speech_prior > 0.0 && self.speech_prior < 1.0) {
            return Err(Error::invalid("speech_prior must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `(min_speech, min_silence, max_speech)` in frames.
    pub fn frame_limits(&self, frame_shift: f64) -> (usize, usize, usize) {
        let min_sp = ((self.min_speech_sec / frame_shift - 1e-9).ceil() as usize).max(1);
        let min_sil = ((self.min_silence_sec / frame_shift - 1e-9).ceil() as usize).max(1);
        let max_sp = ((self.max_speech_sec / frame_shift + 1e-9).floor() as usize).max(min_sp);
        (min_sp, min_sil, max_sp)
    }
}

fn safe_ln(p: f64) -> f64 {
    p.max(1e-300).ln()
}

/// Most likely speech/non-speech labelling subject to the duration limits.
///
/// Silence states form a chain of `min_silence` states whose last state
/// loops; speech states form a chain of `max_speech` states that may exit to
/// silence only after `min_speech` frames. Allowed transitions carry no
/// cost, emissions are posteriors divided by class priors, and garbage
/// counts as silence. Leading and trailing silence may be arbitrarily short.
pub fn viterbi_labels(post: &FramePosteriors, config: &SadHmmConfig) -> Result<Vec<bool>> {
    config.validate()?;
    let frames = post.num_frames();
    if frames == 0 {
        return Ok(Vec::new());
    }
    let (min_sp, min_sil, max_sp) = config.frame_limits(post.frame_shift_sec);
    if frames < min_sp {
        let mean = (0..frames).map(|t| post.speech(t)).sum::<f64>() / frames as f64;
        return Ok(vec![mean > 0.5; frames]);
    }

    let p = &post.probs;
    let emit_sil: Vec<f64> = (0..frames)
        .map(|t| safe_ln((p[[t, 0]] + p[[t, 2]]) / (1.0 - config.speech_prior)))
        .collect();
    let emit_sp: Vec<f64> = (0..frames)
        .map(|t| safe_ln(p[[t, 1]] / config.speech_prior))
        .collect();

    let m = min_sil;
    let big_m = max_sp;
    let neg = f64::NEG_INFINITY;
    let mut sil = vec![neg; m];
    let mut sp = vec![neg; big_m];
    sil[m - 1] = emit_sil[0];
    sp[0] = emit_sp[0];

    // Backpointers for the only states with more than one predecessor.
    // `exit_from[t]`: speech state entering silence state 0 (-1 = self loop when m == 1).
    // `loop_kept[t]`: last silence state came from itself.
    let mut exit_from = vec![-1i32; frames];
    let mut loop_kept = vec![true; frames];

    let mut new_sil = vec![neg; m];
    let mut new_sp = vec![neg; big_m];
    for t in 1..frames {
        let mut exit = (neg, -1i32);
        for j in (min_sp - 1)..big_m {
            if sp[j] > exit.0 {
                exit = (sp[j], j as i32);
            }
        }
        if m == 1 {
            if sil[0] >= exit.0 {
                new_sil[0] = sil[0];
                exit_from[t] = -1;
            } else {
                new_sil[0] = exit.0;
                exit_from[t] = exit.1;
            }
        } else {
            new_sil[0] = exit.0;
            exit_from[t] = exit.1;
            for i in 1..m - 1 {
                new_sil[i] = sil[i - 1];
            }
            if sil[m - 1] >= sil[m - 2] {
                new_sil[m - 1] = sil[m - 1];
                loop_kept[t] = true;
            } else {
                new_sil[m - 1] = sil[m - 2];
                loop_kept[t] = false;
            }
        }
        new_sp[0] = sil[m - 1];
        new_sp[1..big_m].copy_from_slice(&sp[..big_m - 1]);

        for v in new_sil.iter_mut() {
            *v += emit_sil[t];
        }
        for v in new_sp.iter_mut() {
            *v += emit_sp[t];
        }
        std::mem::swap(&mut sil, &mut new_sil);
        std::mem::swap(&mut sp, &mut new_sp);
    }

    #[derive(Clone, Copy)]
    enum State {
        Sil(usize),
        Sp(usize),
    }
    let mut best = (neg, State::Sil(m - 1));
    for (i, &v) in sil.iter().enumerate() {
        if v > best.0 {
            best = (v, State::Sil(i));
        }
    }
    for j in (min_sp - 1)..big_m {
        if sp[j] > best.0 {
            best = (sp[j], State::Sp(j));
        }
    }

    let mut labels = vec![false; frames];
    let mut state = best.1;
    for t in (0..frames).rev() {
        labels[t] = matches!(state, State::Sp(_));
        if t == 0 {
            break;
        }
        state = match state {
            State::Sp(0) => State::Sil(m - 1),
            State::Sp(j) => State::Sp(j - 1),
            State::Sil(0) if m == 1 => {
                if exit_from[t] < 0 {
                    State::Sil(0)
                } else {
                    State::Sp(exit_from[t] as usize)
                }
            }
            State::Sil(0) => State::Sp(exit_from[t] as usize),
            State::Sil(i) if i == m - 1 => {
                if loop_kept[t] {
                    State::Sil(m - 1)
                } else {
                    State::Sil(m - 2)
                }
            }
            State::Sil(i) => State::Sil(i - 1),
        };
    }
    Ok(labels)
}

/// Viterbi smoothing followed by merging of speech frames into segments.
pub fn viterbi_smooth(post: &FramePosteriors, config: &SadHmmConfig) -> Result<SegmentList> {
    let labels = viterbi_labels(post, config)?;
    Ok(from_frame_mask(&labels, post.frame_shift_sec, "speech"))
}

/// 40-dimensional log-mel features on a 10 ms grid, from the first channel.
pub fn sad_features(audio: &MultichannelAudio) -> Result<FeatureMatrix> {
    let cfg = StftConfig::features(audio.sample_rate());
    let mono = audio.select(&[0])?;
    logmel(&mono, 40, cfg.fft_size, cfg.frame_shift)
}

/// Posteriors per array, fused, then smoothed into speech segments.
pub fn detect_speech(
    per_array: &[MultichannelAudio],
    source: &dyn PosteriorSource,
    fusion: Fusion,
    config: &SadHmmConfig,
) -> Result<SegmentList> {
    let posts = per_array
        .iter()
        .map(|a| source.posteriors(&sad_features(a)?))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_posteriors(&posts, fusion)?;
    viterbi_smooth(&fused, config)
}

/// Fraction of reference speech time not covered by `hyp` (both as segment lists).
pub fn missed_speech(reference: &SegmentList, hyp: &SegmentList, frame_shift: f64) -> f64 {
    let frames = crate::segments::frames_for(reference.end_time().max(hyp.end_time()), frame_shift);
    let r = reference.frame_mask(frames, frame_shift);
    let h = hyp.frame_mask(frames, frame_shift);
    let total = r.iter().filter(|&&x| x).count();
    if total == 0 {
        return 0.0;
    }
    let missed = r.iter().zip(&h).filter(|(&a, &b)| a && !b).count();
    missed as f64 / total as f64
}

/// False-alarm time relative to reference speech time.
pub fn false_alarm(reference: &SegmentList, hyp: &SegmentList, frame_shift: f64) -> f64 {
    let frames = crate::segments::frames_for(reference.end_time().max(hyp.end_time()), frame_shift);
    let r = reference.frame_mask(frames, frame_shift);
    let h = hyp.frame_mask(frames, frame_shift);
    let total = r.iter().filter(|&&x| x).count().max(1);
    let fa = r.iter().zip(&h).filter(|(&a, &b)| !a && b).count();
    fa as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(speech: &[f64]) -> FramePosteriors {
        FramePosteriors::from_speech_probs(speech, 0.01).unwrap()
    }

    #[test]
    fn posterior_validation() {
        assert!(FramePosteriors::new(Array2::zeros((2, 2)), 0.01).is_err());
        assert!(FramePosteriors::new(Array2::from_elem((2, 3), 0.5), 0.01).is_err());
        assert!(FramePosteriors::new(Array2::from_elem((2, 3), 1.0 / 3.0), 0.01).is_ok());
    }

    #[test]
    fn max_fusion_worked_example() {
        let a = FramePosteriors::new(
            Array2::from_shape_vec((1, 3), vec![0.2, 0.7, 0.1]).unwrap(),
            0.01,
        )
        .unwrap();
        let b = FramePosteriors::new(
            Array2::from_shape_vec((1, 3), vec![0.6, 0.3, 0.1]).unwrap(),
            0.01,
        )
        .unwrap();
        let fused = fuse_posteriors(&[a, b], Fusion::Max).unwrap();
        let row = fused.probs().row(0);
        for (got, want) in row.iter().zip([0.4286, 0.5, 0.0714]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn fusion_errors() {
        assert!(fuse_posteriors(&[], Fusion::Max).is_err());
        assert!(fuse_posteriors(&[post(&[0.5; 3]), post(&[0.5; 4])], Fusion::Mean).is_err());
        assert_eq!("max".parse::<Fusion>().unwrap(), Fusion::Max);
        assert!("median".parse::<Fusion>().is_err());
    }

    #[test]
    fn unambiguous_evidence_single_segment() {
        let speech: Vec<f64> = (0..500)
            .map(|t| if (100..300).contains(&t) { 0.99 } else { 0.01 })
            .collect();
        let segs = viterbi_smooth(&post(&speech), &SadHmmConfig::default()).unwrap();
        assert_eq!(segs.len(), 1);
        let s = &segs.as_slice()[0];
        assert!((s.onset - 1.0).abs() <= 0.01 + 1e-9);
        assert!((s.end() - 3.0).abs() <= 0.01 + 1e-9);
    }

    #[test]
    fn short_recordings() {
        let cfg = SadHmmConfig::default();
        let segs = viterbi_smooth(&post(&[0.8; 10]), &cfg).unwrap();
        assert_eq!(segs.len(), 1);
        assert!((segs.as_slice()[0].duration - 0.1).abs() < 1e-9);
        assert!(viterbi_smooth(&post(&[0.2; 10]), &cfg).unwrap().is_empty());
    }

    #[test]
    fn max_duration_forces_exit() {
        let cfg = SadHmmConfig {
            max_speech_sec: 1.0,
            ..Default::default()
        };
        let segs = viterbi_smooth(&post(&[0.99; 500]), &cfg).unwrap();
        assert!(segs.len() > 1);
        for s in &segs {
            assert!(s.duration <= 1.0 + 1e-9);
            assert!(s.duration >= 0.3 - 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        let bad = SadHmmConfig {
            min_speech_sec: 2.0,
            max_speech_sec: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(viterbi_smooth(&post(&[0.5; 5]), &bad).is_err());
    }

    #[test]
    fn degenerate_features_are_uniform() {
        let f = FeatureMatrix {
            rows: Array2::from_elem((50, 40), -23.0),
            frame_shift_sec: 0.01,
        };
        let p = reference_posteriors(&f).unwrap();
        assert!(p
            .probs()
            .rows()
            .into_iter()
            .all(|r| r[0] == 0.5 && r[1] == 0.5));
        let tiny = FeatureMatrix {
            rows: Array2::zeros((1, 40)),
            frame_shift_sec: 0.01,
        };
        assert!(reference_posteriors(&tiny).is_err());
    }
}
