//! Labelled time segments and the frame grid they are rasterised onto.
//!
//! Frame `t` of a grid with shift `h` covers `[t*h, (t+1)*h)`; a frame belongs
//! to a segment when its centre does.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub onset: f64,
    pub duration: f64,
    pub label: String,
}

impl Segment {
    pub fn new(onset: f64, duration: f64, label: impl Into<String>) -> Self {
        Self {
            onset,
            duration,
            label: label.into(),
        }
    }

    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }

    /// Frames whose centre lies inside the segment, as a half-open range.
    pub fn frame_range(&self, frame_shift: f64) -> (usize, usize) {
        let start = (self.onset / frame_shift - 0.5).ceil().max(0.0) as usize;
        let end = (self.end() / frame_shift - 0.5).ceil().max(0.0) as usize;
        (start, end.max(start))
    }
}

/// Segments sorted by onset (then label). Segments with different labels may overlap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentList {
    segments: Vec<Segment>,
}

impl SegmentList {
    pub fn new(mut segments: Vec<Segment>) -> Result<Self> {
        for s in &segments {
            if !(s.onset.is_finite() && s.duration.is_finite()) || s.onset < 0.0 {
                return Err(Error::invalid(format!("bad segment onset {}", s.onset)));
            }
            if s.duration <= 0.0 {
                return Err(Error::invalid(format!(
                    "segment at {} has non-positive duration",
                    s.onset
                )));
            }
        }
        segments.sort_by(|a, b| {
            a.onset
                .total_cmp(&b.onset)
                .then_with(|| a.label.cmp(&b.label))
        });
        Ok(Self { segments })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Segment> {
        self.segments.iter()
    }

    pub fn as_slice(&self) -> &[Segment] {
        &self.segments
    }

    pub fn into_vec(self) -> Vec<Segment> {
        self.segments
    }

    pub fn end_time(&self) -> f64 {
        self.segments.iter().map(Segment::end).fold(0.0, f64::max)
    }

    /// Distinct labels in lexicographic order.
    pub fn labels(&self) -> Vec<String> {
        self.segments
            .iter()
            .map(|s| s.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn with_label(&self, label: &str) -> SegmentList {
        SegmentList {
            segments: self
                .segments
                .iter()
                .filter(|s| s.label == label)
                .cloned()
                .collect(),
        }
    }

    /// Every segment relabelled to `label`, with overlaps merged.
    pub fn union(&self, label: &str, frame_shift: f64) -> SegmentList {
        let frames = frames_for(self.end_time(), frame_shift);
        from_frame_mask(&self.frame_mask(frames, frame_shift), frame_shift, label)
    }

    /// Frames covered by any segment.
    pub fn frame_mask(&self, num_frames: usize, frame_shift: f64) -> Vec<bool> {
        let mut mask = vec![false; num_frames];
        for s in &self.segments {
            let (a, b) = s.frame_range(frame_shift);
            for m in mask.iter_mut().take(b.min(num_frames)).skip(a) {
                *m = true;
            }
        }
        mask
    }

    /// Number of segments covering each frame.
    pub fn frame_counts(&self, num_frames: usize, frame_shift: f64) -> Vec<usize> {
        let mut counts = vec![0usize; num_frames];
        for s in &self.segments {
            let (a, b) = s.frame_range(frame_shift);
            for c in counts.iter_mut().take(b.min(num_frames)).skip(a) {
                *c += 1;
            }
        }
        counts
    }

    /// Reads `onset duration label` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<SegmentList> {
        let mut segs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!(
                        "expected `onset duration [label]`, got {} fields",
                        fields.len()
                    ),
                });
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("not a number: {s}"),
                })
            };
            let label = fields.get(2).copied().unwrap_or("speech");
            segs.push(Segment::new(num(fields[0])?, num(fields[1])?, label));
        }
        SegmentList::new(segs)
    }

    /// `onset duration label` per line, two decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            let _ = writeln!(out, "{:.2} {:.2} {}", s.onset, s.duration, s.label);
        }
        out
    }
}

impl<'a> IntoIterator for &'a SegmentList {
    type Item = &'a Segment;
    type IntoIter = std::slice::Iter<'a, Segment>;
    fn into_iter(self) -> Self::IntoIter {
        self.segments.iter()
    }
}

/// Frames needed to cover `duration_sec`.
pub fn frames_for(duration_sec: f64, frame_shift: f64) -> usize {
    (duration_sec / frame_shift - 1e-9).ceil().max(0.0) as usize
}

/// Merges runs of `true` frames into segments labelled `label`.
pub fn from_frame_mask(mask: &[bool], frame_shift: f64, label: &str) -> SegmentList {
    let labels: Vec<Option<&str>> = mask.iter().map(|&m| m.then_some(label)).collect();
    from_frame_labels(&labels, frame_shift)
}

/// Merges runs of equal labels into segments; `None` frames are gaps.
pub fn from_frame_labels(labels: &[Option<&str>], frame_shift: f64) -> SegmentList {
    let mut segs = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        match labels[t] {
            None => t += 1,
            Some(l) => {
                let start = t;
                while t < labels.len() && labels[t] == Some(l) {
                    t += 1;
                }
                segs.push(Segment::new(
                    start as f64 * frame_shift,
                    (t - start) as f64 * frame_shift,
                    l,
                ));
            }
        }
    }
    SegmentList { segments: segs }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_segments() {
        assert!(SegmentList::new(vec![Segment::new(-1.0, 1.0, "a")]).is_err());
        assert!(SegmentList::new(vec![Segment::new(1.0, 0.0, "a")]).is_err());
    }

    #[test]
    fn sorted_on_construction() {
        let l = SegmentList::new(vec![
            Segment::new(2.0, 1.0, "b"),
            Segment::new(1.0, 1.0, "a"),
        ])
        .unwrap();
        assert_eq!(l.as_slice()[0].label, "a");
        assert_eq!(l.labels(), vec!["a", "b"]);
    }

    #[test]
    fn frame_round_trip() {
        let l = SegmentList::new(vec![Segment::new(1.0, 2.0, "x")]).unwrap();
        let mask = l.frame_mask(400, 0.01);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 200);
        assert!(mask[100] && !mask[99] && mask[299] && !mask[300]);
        let back = from_frame_mask(&mask, 0.01, "x");
        assert_eq!(back.len(), 1);
        assert!((back.as_slice()[0].onset - 1.0).abs() < 1e-9);
        assert!((back.as_slice()[0].duration - 2.0).abs() < 1e-9);
    }

    #[test]
    fn text_format() {
        let l = SegmentList::parse("0.5 1.25 speech\n# c\n\n3 1\n").unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l.to_text(), "0.50 1.25 speech\n3.00 1.00 speech\n");
        assert!(matches!(
            SegmentList::parse("1 x speech"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
