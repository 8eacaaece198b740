//! Speaker embeddings for subsegment windows.

use crate::audio::{logmel, FeatureMatrix, MultichannelAudio, StftConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub onset: f64,
    pub duration: f64,
    pub array_id: usize,
}

/// Maps a recording to frame features and a window of frames to a vector.
pub trait EmbeddingExtractor: Sync {
    fn dim(&self) -> usize;
    fn features(&self, audio: &MultichannelAudio) -> Result<FeatureMatrix>;
    fn extract(&self, window: &FeatureMatrix) -> Result<Vec<f64>>;
}

pub const REFERENCE_MELS: usize = 24;
pub const MIN_EMBEDDING_FRAMES: usize = 10;

/// Mean and standard deviation of 24 log-mel bands, scaled to unit length.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceExtractor;

impl EmbeddingExtractor for ReferenceExtractor {
    fn dim(&self) -> usize {
        2 * REFERENCE_MELS
    }

    fn features(&self, audio: &MultichannelAudio) -> Result<FeatureMatrix> {
        let cfg = StftConfig::features(audio.sample_rate());
        logmel(
            &audio.select(&[0])?,
            REFERENCE_MELS,
            cfg.fft_size,
            cfg.frame_shift,
        )
    }

    fn extract(&self, window: &FeatureMatrix) -> Result<Vec<f64>> {
        reference_embedding(window)
    }
}

pub fn reference_embedding(window: &FeatureMatrix) -> Result<Vec<f64>> {
    let n = window.num_frames();
    if n < MIN_EMBEDDING_FRAMES {
        return Err(Error::invalid(format!(
            "embedding window has {n} frames, need at least {MIN_EMBEDDING_FRAMES}"
        )));
    }
    let dim = window.dim();
    let mut v = vec![0.0; 2 * dim];
    for (d, col) in window.rows.columns().into_iter().enumerate() {
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        v[d] = mean;
        v[dim + d] = var.sqrt();
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("embedding features"));
    }
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn constant_features_have_zero_spread() {
        let f = FeatureMatrix {
            rows: Array2::from_elem((20, REFERENCE_MELS), 3.0),
            frame_shift_sec: 0.01,
        };
        let e = reference_embedding(&f).unwrap();
        assert_eq!(e.len(), 48);
        assert!(e[REFERENCE_MELS..].iter().all(|&x| x == 0.0));
        let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_window_rejected() {
        let f = FeatureMatrix {
            rows: Array2::zeros((9, REFERENCE_MELS)),
            frame_shift_sec: 0.01,
        };
        assert!(reference_embedding(&f).is_err());
    }
}
