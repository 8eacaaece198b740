//! First-pass diarization: overlapping windows inside speech, one embedding
//! per window and array, PLDA similarity fused across arrays, then AHC.

mod ahc;
mod embedding;
mod plda;

pub use ahc::{ahc_cluster, fuse_plda_scores, plda_score_matrix, AhcStop, SimilarityMatrix};
pub use embedding::{
    cosine, reference_embedding, Embedding, EmbeddingExtractor, ReferenceExtractor,
    MIN_EMBEDDING_FRAMES, REFERENCE_MELS,
};
pub use plda::{plda_train, PldaModel};

use rayon::prelude::*;

use crate::audio::{FeatureMatrix, MultichannelAudio};
use crate::error::{Error, Result};
use crate::sad::Fusion;
use crate::segments::{from_frame_labels, SegmentList};

pub const LABEL_FRAME_SEC: f64 = 0.01;
pub const MIN_WINDOW_SEC: f64 = 0.5;
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsegmentWindow {
    pub onset: f64,
    pub duration: f64,
    /// Index of the speech segment containing the window.
    pub segment: usize,
}

impl SubsegmentWindow {
    pub fn center(&self) -> f64 {
        self.onset + 0.5 * self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsegmentGrid {
    pub window_sec: f64,
    pub stride_sec: f64,
    pub speech: SegmentList,
    pub windows: Vec<SubsegmentWindow>,
}

/// Cuts `window_sec` windows every `stride_sec` inside each speech segment.
///
/// When full windows do not reach the end of a segment, one shortened window
/// starting at the next stride position covers the rest, provided it is at
/// least 0.5 s long. Segments shorter than that get no window.
pub fn cut_subsegments(
    speech: &SegmentList,
    window_sec: f64,
    stride_sec: f64,
) -> Result<SubsegmentGrid> {
    if !(window_sec > 0.0 && stride_sec > 0.0 && stride_sec <= window_sec) {
        return Err(Error::invalid("need 0 < stride <= window"));
    }
    let mut windows = Vec::new();
    for (idx, seg) in speech.iter().enumerate() {
        let mut k = 0usize;
        let mut covered = seg.onset;
        loop {
            let offset = k as f64 * stride_sec;
            if offset + window_sec > seg.duration + EPS {
                break;
            }
            windows.push(SubsegmentWindow {
                onset: seg.onset + offset,
                duration: window_sec,
                segment: idx,
            });
            covered = seg.onset + offset + window_sec;
            k += 1;
        }
        let start = seg.onset + k as f64 * stride_sec;
        let rest = seg.end() - start;
        if covered < seg.end() - EPS && rest >= MIN_WINDOW_SEC - EPS {
            windows.push(SubsegmentWindow {
                onset: start,
                duration: rest,
                segment: idx,
            });
        }
    }
    Ok(SubsegmentGrid {
        window_sec,
        stride_sec,
        speech: speech.clone(),
        windows,
    })
}

pub fn speaker_label(cluster: usize) -> String {
    format!("spk{cluster}")
}

/// Labels every 10 ms speech frame with the cluster of the window whose
/// centre is nearest, preferring windows of the same speech segment, and
/// merges runs into segments. Equidistant windows resolve to the earlier one.
pub fn windows_to_segments(labels: &[usize], grid: &SubsegmentGrid) -> Result<SegmentList> {
    if labels.len() != grid.windows.len() {
        return Err(Error::shape(format!(
            "{} labels for {} windows",
            labels.len(),
            grid.windows.len()
        )));
    }
    if grid.windows.is_empty() {
        return Ok(SegmentList::empty());
    }
    let names: Vec<String> = labels.iter().map(|&l| speaker_label(l)).collect();
    let frames = crate::segments::frames_for(grid.speech.end_time(), LABEL_FRAME_SEC);
    let mut frame_labels: Vec<Option<&str>> = vec![None; frames];
    for (idx, seg) in grid.speech.iter().enumerate() {
        let own: Vec<usize> = (0..grid.windows.len())
            .filter(|&w| grid.windows[w].segment == idx)
            .collect();
        let candidates: Vec<usize> = if own.is_empty() {
            (0..grid.windows.len()).collect()
        } else {
            own
        };
        let (start, end) = seg.frame_range(LABEL_FRAME_SEC);
        for (t, slot) in frame_labels
            .iter_mut()
            .enumerate()
            .take(end.min(frames))
            .skip(start)
        {
            let c = (t as f64 + 0.5) * LABEL_FRAME_SEC;
            let mut best = candidates[0];
            for &w in &candidates[1..] {
                if (grid.windows[w].center() - c).abs() < (grid.windows[best].center() - c).abs() {
                    best = w;
                }
            }
            *slot = Some(names[best].as_str());
        }
    }
    Ok(from_frame_labels(&frame_labels, LABEL_FRAME_SEC))
}

/// Embeddings of every grid window for one recording.
pub fn extract_embeddings(
    extractor: &dyn EmbeddingExtractor,
    features: &FeatureMatrix,
    grid: &SubsegmentGrid,
    array_id: usize,
) -> Result<Vec<Embedding>> {
    let h = features.frame_shift_sec;
    grid.windows
        .par_iter()
        .map(|w| {
            let start = (w.onset / h).round() as usize;
            let end = ((w.onset + w.duration) / h).round() as usize;
            let vector = extractor.extract(&features.window(start, end))?;
            Ok(Embedding {
                vector,
                onset: w.onset,
                duration: w.duration,
                array_id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstPassConfig {
    pub window_sec: f64,
    pub stride_sec: f64,
    pub fusion: Fusion,
    pub stop: AhcStop,
}

impl Default for FirstPassConfig {
    fn default() -> Self {
        Self {
            window_sec: 1.5,
            stride_sec: 0.25,
            fusion: Fusion::Max,
            stop: AhcStop::NumClusters(4),
        }
    }
}

/// Per-array similarity matrices over the grid windows.
pub fn array_similarities(
    per_array: &[MultichannelAudio],
    grid: &SubsegmentGrid,
    extractor: &dyn EmbeddingExtractor,
    plda: &PldaModel,
) -> Result<Vec<SimilarityMatrix>> {
    per_array
        .iter()
        .enumerate()
        .map(|(a, audio)| {
            let feats = extractor.features(audio)?;
            let embs = extract_embeddings(extractor, &feats, grid, a)?;
            let vectors: Vec<Vec<f64>> = embs.into_iter().map(|e| e.vector).collect();
            plda_score_matrix(plda, &vectors)
        })
        .collect()
}

/// Speaker-labelled segments for one recording seen by one or more arrays.
pub fn first_pass(
    per_array: &[MultichannelAudio],
    speech: &SegmentList,
    extractor: &dyn EmbeddingExtractor,
    plda: &PldaModel,
    config: &FirstPassConfig,
) -> Result<SegmentList> {
    if per_array.is_empty() {
        return Err(Error::Empty("arrays"));
    }
    let grid = cut_subsegments(speech, config.window_sec, config.stride_sec)?;
    if grid.windows.is_empty() {
        return Ok(SegmentList::empty());
    }
    let sims = array_similarities(per_array, &grid, extractor, plda)?;
    let fused = fuse_plda_scores(&sims, config.fusion)?;
    let labels = ahc_cluster(&fused, config.stop);
    windows_to_segments(&labels, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segments::Segment;

    fn speech(segs: &[(f64, f64)]) -> SegmentList {
        SegmentList::new(
            segs.iter()
                .map(|&(o, d)| Segment::new(o, d, "speech"))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn three_second_segment_gets_seven_windows() {
        let g = cut_subsegments(&speech(&[(2.0, 3.0)]), 1.5, 0.25).unwrap();
        assert_eq!(g.windows.len(), 7);
        for (k, w) in g.windows.iter().enumerate() {
            assert!((w.onset - 2.0 - 0.25 * k as f64).abs() < 1e-12);
            assert_eq!(w.duration, 1.5);
        }
    }

    #[test]
    fn short_and_coarse_segments() {
        let g = cut_subsegments(&speech(&[(0.0, 1.0)]), 1.5, 0.25).unwrap();
        assert_eq!(g.windows.len(), 1);
        assert_eq!(g.windows[0].duration, 1.0);
        assert_eq!(
            cut_subsegments(&speech(&[(0.0, 3.0)]), 1.5, 0.75)
                .unwrap()
                .windows
                .len(),
            3
        );
        assert!(cut_subsegments(&speech(&[(0.0, 0.4)]), 1.5, 0.25)
            .unwrap()
            .windows
            .is_empty());
        assert!(cut_subsegments(&speech(&[(0.0, 3.0)]), 1.0, 1.5).is_err());
    }

    #[test]
    fn remainder_window_stays_inside() {
        let g = cut_subsegments(&speech(&[(1.0, 3.1)]), 1.5, 0.75).unwrap();
        let last = g.windows.last().unwrap();
        assert!((last.onset - 3.25).abs() < 1e-12);
        assert!((last.onset + last.duration - 4.1).abs() < 1e-12);
        for w in &g.windows {
            assert!(w.onset >= 1.0 - 1e-12 && w.onset + w.duration <= 4.1 + 1e-9);
        }
    }

    #[test]
    fn single_label_reproduces_speech() {
        let sp = speech(&[(0.5, 2.0), (3.0, 4.0)]);
        let g = cut_subsegments(&sp, 1.5, 0.25).unwrap();
        let out = windows_to_segments(&vec![0; g.windows.len()], &g).unwrap();
        assert_eq!(out.len(), 2);
        for (a, b) in out.iter().zip(sp.iter()) {
            assert!((a.onset - b.onset).abs() < 1e-9 && (a.end() - b.end()).abs() < 1e-9);
            assert_eq!(a.label, "spk0");
        }
    }

    #[test]
    fn label_switch_at_midpoint_of_centres() {
        let sp = speech(&[(0.0, 3.0)]);
        let g = cut_subsegments(&sp, 1.5, 0.25).unwrap();
        let labels: Vec<usize> = (0..g.windows.len()).map(|k| usize::from(k >= 4)).collect();
        let out = windows_to_segments(&labels, &g).unwrap();
        let mid = 0.5 * (g.windows[3].center() + g.windows[4].center());
        let boundary = out.iter().find(|s| s.label == "spk1").unwrap().onset;
        assert!((boundary - mid).abs() <= 0.01 + 1e-9);
    }

    #[test]
    fn label_count_must_match() {
        let g = cut_subsegments(&speech(&[(0.0, 3.0)]), 1.5, 0.25).unwrap();
        assert!(windows_to_segments(&[0], &g).is_err());
    }
}
