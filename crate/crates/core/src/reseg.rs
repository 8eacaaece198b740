//! Overlap-aware second pass: per-frame speaker posteriors (the Q matrix)
//! refined by a VB-HMM, then one or two speakers per frame.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::sad::{energy_and_flatness, PosteriorSource, ReferencePosteriors};
use crate::segments::{from_frame_mask, Segment, SegmentList};

#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    /// `[frames, speakers]`; speech rows sum to one, other rows are zero.
    pub q: Array2<f64>,
    pub speakers: Vec<String>,
    pub frame_shift_sec: f64,
}

impl QMatrix {
    pub fn num_frames(&self) -> usize {
        self.q.nrows()
    }

    pub fn num_speakers(&self) -> usize {
        self.q.ncols()
    }

    /// Rows with non-zero mass.
    pub fn speech_frames(&self) -> Vec<usize> {
        (0..self.num_frames())
            .filter(|&t| self.q.row(t).sum() > 0.0)
            .collect()
    }

    /// Index of the most probable speaker per frame, lower index on ties.
    pub fn argmax(&self) -> Vec<Option<usize>> {
        self.q
            .rows()
            .into_iter()
            .map(|row| {
                if row.sum() <= 0.0 {
                    return None;
                }
                let mut best = 0;
                for (s, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = s;
                    }
                }
                Some(best)
            })
            .collect()
    }
}

/// One-hot Q rows from a first-pass segmentation.
///
/// Overlapping segments with different labels are split at the middle of
/// their overlap. Frames outside every segment get zero rows.
pub fn init_q(
    first_pass: &SegmentList,
    num_frames: usize,
    speakers: &[String],
    frame_shift_sec: f64,
) -> Result<QMatrix> {
    if speakers.is_empty() {
        return Err(Error::Empty("speakers"));
    }
    let mut spans: Vec<(f64, f64, usize)> = Vec::with_capacity(first_pass.len());
    for s in first_pass {
        let idx = speakers
            .iter()
            .position(|l| *l == s.label)
            .ok_or_else(|| Error::invalid(format!("label `{}` is not a known speaker", s.label)))?;
        spans.push((s.onset, s.end(), idx));
    }
    for i in 1..spans.len() {
        for j in 0..i {
            let (a, b) = (spans[j], spans[i]);
            if a.2 != b.2 && b.0 < a.1 && a.0 < b.1 {
                let mid = 0.5 * (a.0.max(b.0) + a.1.min(b.1));
                spans[j].1 = a.1.min(mid);
                spans[i].0 = b.0.max(mid);
            }
        }
    }
    let mut q = Array2::zeros((num_frames, speakers.len()));
    for &(on, end, idx) in &spans {
        if end <= on {
            continue;
        }
        let (start, stop) = Segment::new(on, end - on, "").frame_range(frame_shift_sec);
        for t in start..stop.min(num_frames) {
            q.row_mut(t).fill(0.0);
            q[[t, idx]] = 1.0;
        }
    }
    Ok(QMatrix {
        q,
        speakers: speakers.to_vec(),
        frame_shift_sec,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VbConfig {
    pub subspace_dim: usize,
    pub loop_prob: f64,
    pub downsample: usize,
    pub num_iters: usize,
    pub acoustic_scale: f64,
}

impl Default for VbConfig {
    fn default() -> Self {
        Self {
            subspace_dim: 16,
            loop_prob: 0.99,
            downsample: 25,
            num_iters: 1,
            acoustic_scale: 0.1,
        }
    }
}

impl VbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.loop_prob) {
            return Err(Error::invalid("loop_prob must lie in [0, 1)"));
        }
        if self.num_iters == 0 || self.downsample == 0 || self.subspace_dim == 0 {
            return Err(Error::invalid(
                "num_iters, downsample and subspace_dim must be positive",
            ));
        }
        if !(self.acoustic_scale > 0.0 && self.acoustic_scale.is_finite()) {
            return Err(Error::invalid("acoustic_scale must be positive"));
        }
        Ok(())
    }
}

const VAR_FLOOR: f64 = 1e-4;

/// Speech-frame features whitened by the residual variance, with the
/// loading matrix expressed in the same whitened space.
struct Whitened {
    rho: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Per-frame `-0.5 * (|rho|^2 + D ln 2pi + ln|Sigma|)`.
    base: DVector<f64>,
}

fn whiten(x: &DMatrix<f64>, rank: usize) -> Whitened {
    let (n, d) = x.shape();
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |t, k| x[(t, k)] - mean[k]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let r = rank.min(d);
    let mut v = DMatrix::zeros(d, r);
    for (c, &k) in order.iter().take(r).enumerate() {
        let scale = eig.eigenvalues[k].max(0.0).sqrt();
        v.set_column(c, &(eig.eigenvectors.column(k) * scale));
    }
    let explained = &v * v.transpose();
    let sigma: Vec<f64> = (0..d)
        .map(|k| (cov[(k, k)] - explained[(k, k)]).max(VAR_FLOOR * cov[(k, k)].max(VAR_FLOOR)))
        .collect();
    let inv_sd: Vec<f64> = sigma.iter().map(|s| 1.0 / s.sqrt()).collect();
    let rho = DMatrix::from_fn(n, d, |t, k| centred[(t, k)] * inv_sd[k]);
    let v = DMatrix::from_fn(d, r, |k, c| v[(k, c)] * inv_sd[k]);
    let log_det: f64 = sigma.iter().map(|s| s.ln()).sum();
    let constant = d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det;
    let base = DVector::from_fn(n, |t, _| -0.5 * (rho.row(t).norm_squared() + constant));
    Whitened { rho, v, base }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior state occupancies of an ergodic HMM with uniform start.
fn forward_backward(loglik: &[Vec<f64>], loop_prob: f64) -> Vec<Vec<f64>> {
    let n = loglik.len();
    let s = loglik[0].len();
    let stay = loop_prob.ln();
    let cross = if s > 1 {
        ((1.0 - loop_prob) / (s - 1) as f64).ln()
    } else {
        f64::NEG_INFINITY
    };
    let trans = |i: usize, j: usize| if i == j { stay } else { cross };
    let mut alpha = vec![vec![0.0; s]; n];
    let start = -(s as f64).ln();
    for k in 0..s {
        alpha[0][k] = start + loglik[0][k];
    }
    let mut terms = vec![0.0; s];
    for t in 1..n {
        for j in 0..s {
            for i in 0..s {
                terms[i] = alpha[t - 1][i] + trans(i, j);
            }
            alpha[t][j] = log_sum_exp(&terms) + loglik[t][j];
        }
    }
    let mut beta = vec![vec![0.0; s]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        for i in 0..s {
            for j in 0..s {
                terms[j] = trans(i, j) + loglik[t + 1][j] + beta[t + 1][j];
            }
            beta[t][i] = log_sum_exp(&terms);
        }
    }
    (0..n)
        .map(|t| {
            let lp: Vec<f64> = (0..s).map(|k| alpha[t][k] + beta[t][k]).collect();
            let z = log_sum_exp(&lp);
            lp.iter().map(|v| (v - z).exp()).collect()
        })
        .collect()
}

/// Refines Q with a VB-HMM: one state per speaker, speaker means `V y_s` in
/// a principal subspace of the recording's own features, shared diagonal
/// residual covariance, and forward-backward over blocks of `downsample`
/// speech frames.
pub fn vb_resegment(features: &FeatureMatrix, q0: &QMatrix, config: &VbConfig) -> Result<QMatrix> {
    config.validate()?;
    if features.num_frames() != q0.num_frames() {
        return Err(Error::shape(format!(
            "{} feature frames but Q has {}",
            features.num_frames(),
            q0.num_frames()
        )));
    }
    if q0.num_speakers() == 0 {
        return Err(Error::Empty("speakers"));
    }
    if features.rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    let speech = q0.speech_frames();
    if speech.is_empty() {
        return Err(Error::Empty("speech frames"));
    }
    let s = q0.num_speakers();
    let x = DMatrix::from_fn(speech.len(), features.dim(), |i, k| {
        features.rows[[speech[i], k]]
    });
    let w = whiten(&x, config.subspace_dim);
    let r = w.v.ncols();
    let vtv = w.v.transpose() * &w.v;
    let proj = &w.rho * &w.v;
    let fa = config.acoustic_scale;

    let mut gamma = DMatrix::from_fn(speech.len(), s, |i, k| {
        let row = q0.q.row(speech[i]);
        row[k] / row.sum()
    });
    for _ in 0..config.num_iters {
        let mut loglik = DMatrix::zeros(speech.len(), s);
        for k in 0..s {
            let occupancy = gamma.column(k).sum();
            let precision = DMatrix::identity(r, r) + &vtv * (fa * occupancy);
            let chol = precision.cholesky().ok_or_else(|| {
                Error::invalid("speaker posterior precision is not positive definite")
            })?;
            let stats = proj.transpose() * gamma.column(k);
            let a = chol.solve(&stats) * fa;
            let cov = chol.inverse();
            let penalty = 0.5 * (&vtv * (cov + &a * a.transpose())).trace();
            let shift = &proj * &a;
            for i in 0..speech.len() {
                loglik[(i, k)] = fa * (w.base[i] + shift[i] - penalty);
            }
        }
        let blocks: Vec<Vec<f64>> = (0..speech.len())
            .step_by(config.downsample)
            .map(|b| {
                let end = (b + config.downsample).min(speech.len());
                (0..s)
                    .map(|k| (b..end).map(|i| loglik[(i, k)]).sum())
                    .collect()
            })
            .collect();
        let post = forward_backward(&blocks, config.loop_prob);
        gamma = DMatrix::from_fn(speech.len(), s, |i, k| post[i / config.downsample][k]);
    }

    let mut q = Array2::zeros(q0.q.dim());
    for (i, &t) in speech.iter().enumerate() {
        let total: f64 = gamma.row(i).sum();
        for k in 0..s {
            q[[t, k]] = gamma[(i, k)] / total;
        }
    }
    Ok(QMatrix {
        q,
        speakers: q0.speakers.clone(),
        frame_shift_sec: q0.frame_shift_sec,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMask {
    pub flags: Vec<bool>,
    pub frame_shift_sec: f64,
}

impl OverlapMask {
    /// Frames covered by any of the given spans.
    pub fn from_spans(spans: &SegmentList, num_frames: usize, frame_shift_sec: f64) -> Self {
        Self {
            flags: spans.frame_mask(num_frames, frame_shift_sec),
            frame_shift_sec,
        }
    }

    /// Frames where more than one reference speaker is active.
    pub fn from_reference(
        reference: &SegmentList,
        num_frames: usize,
        frame_shift_sec: f64,
    ) -> Self {
        let mut counts = vec![0usize; num_frames];
        for label in reference.labels() {
            let mask = reference
                .with_label(&label)
                .frame_mask(num_frames, frame_shift_sec);
            for (c, m) in counts.iter_mut().zip(mask) {
                *c += usize::from(m);
            }
        }
        Self {
            flags: counts.iter().map(|&c| c > 1).collect(),
            frame_shift_sec,
        }
    }

    /// Overlap runs as `onset duration` spans.
    pub fn to_spans(&self) -> SegmentList {
        from_frame_mask(&self.flags, self.frame_shift_sec, "overlap")
    }
}

/// Source of per-frame overlap decisions for a recording's features.
pub trait OverlapDetector {
    fn detect(&self, features: &FeatureMatrix) -> Result<OverlapMask>;
}

/// Overlap taken from known spans (for example simulator ground truth).
#[derive(Debug, Clone)]
pub struct OracleOverlap {
    pub spans: SegmentList,
}

impl OverlapDetector for OracleOverlap {
    fn detect(&self, features: &FeatureMatrix) -> Result<OverlapMask> {
        Ok(OverlapMask::from_spans(
            &self.spans,
            features.num_frames(),
            features.frame_shift_sec,
        ))
    }
}

/// Flags confident speech frames with an unusually flat spectrum.
///
/// This is a weak stand-in for a trained detector and is meant for
/// demonstration only.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicOverlap {
    pub speech_threshold: f64,
    /// Log ratio of geometric to arithmetic mean band energy.
    pub flatness_threshold: f64,
}

impl Default for HeuristicOverlap {
    fn default() -> Self {
        Self {
            speech_threshold: 0.9,
            flatness_threshold: -1.0,
        }
    }
}

impl OverlapDetector for HeuristicOverlap {
    fn detect(&self, features: &FeatureMatrix) -> Result<OverlapMask> {
        let post = ReferencePosteriors::default().posteriors(features)?;
        let (_, flatness) = energy_and_flatness(features);
        let flags = (0..features.num_frames())
            .map(|t| {
                post.speech(t) > self.speech_threshold && flatness[t] > self.flatness_threshold
            })
            .collect();
        Ok(OverlapMask {
            flags,
            frame_shift_sec: features.frame_shift_sec,
        })
    }
}

/// Speech frames go to their most likely speaker, overlap frames to the
/// two most likely. Ties resolve to the lower speaker index.
pub fn assign_speakers(
    q: &QMatrix,
    overlap: &OverlapMask,
    speech: &SegmentList,
) -> Result<SegmentList> {
    let n = q.num_frames();
    if overlap.flags.len() != n {
        return Err(Error::shape(format!(
            "overlap mask has {} frames, Q has {n}",
            overlap.flags.len()
        )));
    }
    let is_speech = speech.frame_mask(n, q.frame_shift_sec);
    let s = q.num_speakers();
    let mut masks = vec![vec![false; n]; s];
    for t in (0..n).filter(|&t| is_speech[t]) {
        let row = q.q.row(t);
        if row.sum() <= 0.0 {
            continue;
        }
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let take = if overlap.flags[t] { 2.min(s) } else { 1 };
        for &k in &order[..take] {
            masks[k][t] = true;
        }
    }
    let mut segs = Vec::new();
    for (k, mask) in masks.iter().enumerate() {
        segs.extend(from_frame_mask(mask, q.frame_shift_sec, &q.speakers[k]).into_vec());
    }
    SegmentList::new(segs)
}

pub const MIN_SEGMENT_SEC: f64 = 0.2;

/// Drops segments shorter than `min_dur_sec`.
pub fn filter_short(segments: &SegmentList, min_dur_sec: f64) -> SegmentList {
    let kept = segments
        .iter()
        .filter(|s| s.duration >= min_dur_sec - 1e-9)
        .cloned()
        .collect();
    SegmentList::new(kept).expect("subset of a valid list")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResegConfig {
    pub vb: VbConfig,
    pub min_segment_sec: f64,
}

impl Default for ResegConfig {
    fn default() -> Self {
        Self {
            vb: VbConfig::default(),
            min_segment_sec: MIN_SEGMENT_SEC,
        }
    }
}

/// Initial Q from the first pass, VB refinement, overlap assignment, then
/// removal of short segments.
pub fn resegment(
    features: &FeatureMatrix,
    first_pass: &SegmentList,
    speech: &SegmentList,
    overlap: &OverlapMask,
    config: &ResegConfig,
) -> Result<SegmentList> {
    let speakers = first_pass.labels();
    if speakers.is_empty() {
        return Ok(SegmentList::empty());
    }
    let q0 = init_q(
        first_pass,
        features.num_frames(),
        &speakers,
        features.frame_shift_sec,
    )?;
    let q = vb_resegment(features, &q0, &config.vb)?;
    let assigned = assign_speakers(&q, overlap, speech)?;
    Ok(filter_short(&assigned, config.min_segment_sec))
}
