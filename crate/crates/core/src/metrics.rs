//! RTTM reading/writing and diarization scoring (DER, JER).
//!
//! Scoring discretises time on a 10 ms grid. Reference and hypothesis
//! speakers are matched one-to-one so as to maximise the jointly active
//! time, which is the mapping that minimises DER.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use pathfinding::prelude::{kuhn_munkres, Matrix};

use crate::error::{Error, Result};
use crate::segments::{frames_for, Segment, SegmentList};

pub const SCORING_FRAME_SEC: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct RttmRecord {
    pub recording_id: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rttm {
    pub records: Vec<RttmRecord>,
}

impl Rttm {
    pub fn from_segments(recording_id: &str, segments: &SegmentList) -> Self {
        Self {
            records: segments
                .iter()
                .map(|s| RttmRecord {
                    recording_id: recording_id.to_string(),
                    onset: s.onset,
                    duration: s.duration,
                    speaker: s.label.clone(),
                })
                .collect(),
        }
    }

    pub fn recordings(&self) -> BTreeSet<String> {
        self.records
            .iter()
            .map(|r| r.recording_id.clone())
            .collect()
    }

    /// Segments of one recording, labelled by speaker.
    pub fn segments(&self, recording_id: &str) -> SegmentList {
        let segs = self
            .records
            .iter()
            .filter(|r| r.recording_id == recording_id)
            .map(|r| Segment::new(r.onset, r.duration, r.speaker.clone()))
            .collect();
        SegmentList::new(segs).expect("records are validated on construction")
    }
}

/// Parses `SPEAKER` lines of a NIST RTTM file; other record types are skipped.
pub fn parse_rttm(text: &str) -> Result<Rttm> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0] != "SPEAKER" {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        if fields.len() != 10 {
            return Err(err(format!("expected 10 fields, got {}", fields.len())));
        }
        let onset: f64 = fields[3]
            .parse()
            .map_err(|_| err(format!("bad onset `{}`", fields[3])))?;
        let duration: f64 = fields[4]
            .parse()
            .map_err(|_| err(format!("bad duration `{}`", fields[4])))?;
        if !onset.is_finite() || !duration.is_finite() || onset < 0.0 || duration < 0.0 {
            return Err(err(
                "onset and duration must be finite and non-negative".into()
            ));
        }
        if duration == 0.0 {
            continue;
        }
        records.push(RttmRecord {
            recording_id: fields[1].to_string(),
            onset,
            duration,
            speaker: fields[7].to_string(),
        });
    }
    Ok(Rttm { records })
}

pub fn emit_rttm(rttm: &Rttm) -> String {
    let mut out = String::new();
    for r in &rttm.records {
        let _ = writeln!(
            out,
            "SPEAKER {} 1 {:.2} {:.2} <NA> <NA> {} <NA> <NA>",
            r.recording_id, r.onset, r.duration, r.speaker
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiarScore {
    pub missed_speech: f64,
    pub false_alarm: f64,
    pub speaker_error: f64,
    pub der: f64,
    pub jer: f64,
    /// `(recording, reference speaker, hypothesis speaker)`
    pub mapping: Vec<(String, String, String)>,
    /// Scored reference speaker time in seconds.
    pub scored_speech_sec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringOptions {
    pub collar_sec: f64,
    pub score_overlap: bool,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            collar_sec: 0.0,
            score_overlap: true,
        }
    }
}

/// Frame-level activity of every speaker in one recording.
struct Activity {
    speakers: Vec<String>,
    active: Vec<Vec<bool>>,
}

fn activity(segments: &SegmentList, frames: usize) -> Activity {
    let speakers = segments.labels();
    let active = speakers
        .iter()
        .map(|s| segments.with_label(s).frame_mask(frames, SCORING_FRAME_SEC))
        .collect();
    Activity { speakers, active }
}

/// Frames excluded by the collar around reference boundaries.
fn collar_mask(reference: &SegmentList, frames: usize, collar: f64) -> Vec<bool> {
    let mut excluded = vec![false; frames];
    if collar <= 0.0 {
        return excluded;
    }
    for s in reference {
        for b in [s.onset, s.end()] {
            let lo = ((b - collar) / SCORING_FRAME_SEC - 0.5).floor().max(0.0) as usize;
            let hi = (((b + collar) / SCORING_FRAME_SEC).ceil() as usize).min(frames);
            for (t, e) in excluded.iter_mut().enumerate().take(hi).skip(lo) {
                let center = (t as f64 + 0.5) * SCORING_FRAME_SEC;
                if (center - b).abs() < collar {
                    *e = true;
                }
            }
        }
    }
    excluded
}

fn assignment_value(weights: &[Vec<i128>], rows: &[usize], cols: &[usize]) -> i128 {
    if rows.is_empty() || cols.is_empty() {
        return 0;
    }
    let n = rows.len().max(cols.len());
    let mut m = Matrix::new(n, n, 0i128);
    for (a, &r) in rows.iter().enumerate() {
        for (b, &c) in cols.iter().enumerate() {
            m[(a, b)] = weights[r][c];
        }
    }
    kuhn_munkres(&m).0
}

/// Maximum-weight one-to-one mapping; among optimal mappings, each reference
/// speaker (in order) takes the first hypothesis speaker that keeps the
/// optimum, with "unmapped" last. Pairs with zero weight are never mapped.
pub fn optimal_mapping(weights: &[Vec<i128>]) -> Vec<Option<usize>> {
    let num_ref = weights.len();
    let num_hyp = weights.first().map_or(0, Vec::len);
    let mut free_rows: Vec<usize> = (0..num_ref).collect();
    let mut free_cols: Vec<usize> = (0..num_hyp).collect();
    let mut target = assignment_value(weights, &free_rows, &free_cols);
    let mut mapping = vec![None; num_ref];
    for i in 0..num_ref {
        free_rows.retain(|&r| r != i);
        let mut chosen = None;
        for &j in &free_cols {
            if weights[i][j] <= 0 {
                continue;
            }
            let rest: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            let value = weights[i][j] + assignment_value(weights, &free_rows, &rest);
            if value == target {
                chosen = Some(j);
                break;
            }
        }
        if let Some(j) = chosen {
            target -= weights[i][j];
            free_cols.retain(|&c| c != j);
            mapping[i] = Some(j);
        }
    }
    mapping
}

const JACCARD_BITS: u32 = 53;

fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    inter as f64 / union.max(1) as f64
}

#[derive(Default)]
struct Tally {
    missed: u64,
    false_alarm: u64,
    confusion: u64,
    total: u64,
    jer_sum: f64,
    jer_count: usize,
}

fn score_recording(
    recording: &str,
    reference: &SegmentList,
    hyp: &SegmentList,
    options: &ScoringOptions,
    tally: &mut Tally,
    mapping_out: &mut Vec<(String, String, String)>,
) {
    let frames = frames_for(reference.end_time().max(hyp.end_time()), SCORING_FRAME_SEC);
    let r = activity(reference, frames);
    let h = activity(hyp, frames);
    let excluded = collar_mask(reference, frames, options.collar_sec);
    let scored: Vec<bool> = (0..frames)
        .map(|t| {
            let n_ref = r.active.iter().filter(|a| a[t]).count();
            !excluded[t] && (options.score_overlap || n_ref <= 1)
        })
        .collect();

    // Scored overlap decides the mapping; among equally good mappings the
    // one with the larger summed Jaccard index wins, which keeps JER
    // independent of how hypothesis speakers are named.
    let weights: Vec<Vec<i128>> = r
        .active
        .iter()
        .map(|ra| {
            h.active
                .iter()
                .map(|ha| {
                    let overlap =
                        (0..frames).filter(|&t| scored[t] && ra[t] && ha[t]).count() as i128;
                    if overlap == 0 {
                        return 0;
                    }
                    (overlap << JACCARD_BITS)
                        + (jaccard(ra, ha) * (1u64 << JACCARD_BITS) as f64).round() as i128
                })
                .collect()
        })
        .collect();
    let mapping = optimal_mapping(&weights);
    for (i, m) in mapping.iter().enumerate() {
        if let Some(j) = m {
            mapping_out.push((
                recording.to_string(),
                r.speakers[i].clone(),
                h.speakers[*j].clone(),
            ));
        }
    }

    for t in (0..frames).filter(|&t| scored[t]) {
        let n_ref = r.active.iter().filter(|a| a[t]).count() as u64;
        let n_hyp = h.active.iter().filter(|a| a[t]).count() as u64;
        let n_correct = mapping
            .iter()
            .enumerate()
            .filter(|(i, m)| r.active[*i][t] && m.is_some_and(|j| h.active[j][t]))
            .count() as u64;
        tally.missed += n_ref.saturating_sub(n_hyp);
        tally.false_alarm += n_hyp.saturating_sub(n_ref);
        tally.confusion += n_ref.min(n_hyp) - n_correct;
        tally.total += n_ref;
    }

    for (i, ra) in r.active.iter().enumerate() {
        let jer = match mapping[i] {
            None => 1.0,
            Some(j) => 1.0 - jaccard(ra, &h.active[j]),
        };
        tally.jer_sum += jer;
        tally.jer_count += 1;
    }
}

/// Diarization error rate with its components, plus JER under the same mapping.
///
/// Error fractions are relative to scored reference speaker time; when there
/// is none, they are relative to a single frame so that any hypothesis
/// speech still registers as error.
pub fn compute_der(reference: &Rttm, hyp: &Rttm, options: &ScoringOptions) -> Result<DiarScore> {
    let ref_recs = reference.recordings();
    if let Some(unknown) = hyp.recordings().difference(&ref_recs).next() {
        return Err(Error::UnknownRecording(unknown.clone()));
    }
    let mut tally = Tally::default();
    let mut mapping = Vec::new();
    for rec in &ref_recs {
        score_recording(
            rec,
            &reference.segments(rec),
            &hyp.segments(rec),
            options,
            &mut tally,
            &mut mapping,
        );
    }
    let denom = tally.total.max(1) as f64;
    let missed_speech = tally.missed as f64 / denom;
    let false_alarm = tally.false_alarm as f64 / denom;
    let speaker_error = tally.confusion as f64 / denom;
    Ok(DiarScore {
        missed_speech,
        false_alarm,
        speaker_error,
        der: (tally.missed + tally.false_alarm + tally.confusion) as f64 / denom,
        jer: if tally.jer_count == 0 {
            0.0
        } else {
            tally.jer_sum / tally.jer_count as f64
        },
        mapping,
        scored_speech_sec: tally.total as f64 * SCORING_FRAME_SEC,
    })
}

pub fn compute_jer(reference: &Rttm, hyp: &Rttm) -> Result<f64> {
    Ok(compute_der(reference, hyp, &ScoringOptions::default())?.jer)
}

/// Speakers per recording, for callers that need a stable order.
pub fn speakers_by_recording(rttm: &Rttm) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in &rttm.records {
        out.entry(r.recording_id.clone())
            .or_default()
            .insert(r.speaker.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rttm(lines: &[(&str, f64, f64, &str)]) -> Rttm {
        Rttm {
            records: lines
                .iter()
                .map(|&(rec, on, dur, spk)| RttmRecord {
                    recording_id: rec.into(),
                    onset: on,
                    duration: dur,
                    speaker: spk.into(),
                })
                .collect(),
        }
    }

    #[test]
    fn parses_speaker_line() {
        let r = parse_rttm("SPEAKER rec 1 10.00 2.50 <NA> <NA> spk1 <NA> <NA>\n").unwrap();
        assert_eq!(
            r.records,
            vec![RttmRecord {
                recording_id: "rec".into(),
                onset: 10.0,
                duration: 2.5,
                speaker: "spk1".into()
            }]
        );
        assert!(parse_rttm("").unwrap().records.is_empty());
        let mixed = "SPKR-INFO rec 1 <NA> <NA> <NA> unknown spk1 <NA> <NA>\n\
                     SPEAKER rec 1 0.00 1.00 <NA> <NA> a <NA> <NA>\n";
        assert_eq!(parse_rttm(mixed).unwrap().records.len(), 1);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let bad = "SPEAKER rec 1 0.00 1.00 <NA> <NA> a <NA> <NA>\nSPEAKER rec 1 x 1.0 <NA> <NA> a <NA> <NA>\n";
        assert!(matches!(parse_rttm(bad), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(
            parse_rttm("SPEAKER rec 1 0.0 1.0 a"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn canonical_round_trip() {
        let text = "SPEAKER rec 1 0.50 1.25 <NA> <NA> a <NA> <NA>\n\
                    SPEAKER rec 1 2.00 3.00 <NA> <NA> b <NA> <NA>\n";
        assert_eq!(emit_rttm(&parse_rttm(text).unwrap()), text);
    }

    #[test]
    fn permuted_labels_score_zero() {
        let r = rttm(&[("r", 0.0, 5.0, "A"), ("r", 5.0, 5.0, "B")]);
        let h = rttm(&[("r", 0.0, 5.0, "y"), ("r", 5.0, 5.0, "x")]);
        let s = compute_der(&r, &h, &ScoringOptions::default()).unwrap();
        assert_eq!(s.der, 0.0);
        assert_eq!(s.jer, 0.0);
    }

    #[test]
    fn partial_coverage_is_missed_speech() {
        let r = rttm(&[("r", 0.0, 10.0, "A")]);
        let h = rttm(&[("r", 0.0, 8.0, "X")]);
        let s = compute_der(&r, &h, &ScoringOptions::default()).unwrap();
        assert!((s.missed_speech - 0.2).abs() < 1e-12);
        assert_eq!(s.false_alarm, 0.0);
        assert_eq!(s.speaker_error, 0.0);
        assert!((s.der - 0.2).abs() < 1e-12);
    }

    #[test]
    fn jer_examples() {
        let r = rttm(&[("r", 0.0, 10.0, "A")]);
        assert_eq!(compute_jer(&r, &r).unwrap(), 0.0);
        let far = rttm(&[("r", 20.0, 10.0, "X")]);
        assert_eq!(compute_jer(&r, &far).unwrap(), 1.0);
        let half = rttm(&[("r", 5.0, 10.0, "X")]);
        assert!((compute_jer(&r, &half).unwrap() - (1.0 - 5.0 / 15.0)).abs() < 1e-4);
    }

    #[test]
    fn unknown_recording_rejected() {
        let r = rttm(&[("r", 0.0, 1.0, "A")]);
        let h = rttm(&[("q", 0.0, 1.0, "A")]);
        assert!(matches!(
            compute_der(&r, &h, &ScoringOptions::default()),
            Err(Error::UnknownRecording(_))
        ));
    }

    #[test]
    fn collar_removes_boundary_frames() {
        let r = rttm(&[("r", 1.0, 2.0, "A")]);
        let h = rttm(&[("r", 1.2, 1.6, "X")]);
        let strict = compute_der(&r, &h, &ScoringOptions::default()).unwrap();
        assert!(strict.der > 0.0);
        let loose = compute_der(
            &r,
            &h,
            &ScoringOptions {
                collar_sec: 0.25,
                score_overlap: true,
            },
        )
        .unwrap();
        assert_eq!(loose.der, 0.0);
    }

    #[test]
    fn overlap_can_be_ignored() {
        let r = rttm(&[("r", 0.0, 4.0, "A"), ("r", 2.0, 4.0, "B")]);
        let h = rttm(&[("r", 0.0, 3.0, "x"), ("r", 3.0, 3.0, "y")]);
        let with = compute_der(&r, &h, &ScoringOptions::default()).unwrap();
        let without = compute_der(
            &r,
            &h,
            &ScoringOptions {
                collar_sec: 0.0,
                score_overlap: false,
            },
        )
        .unwrap();
        assert!(with.der > 0.0);
        assert_eq!(without.der, 0.0);
    }

    #[test]
    fn mapping_tie_break_is_lexicographic() {
        // Two equally good mappings; the first reference speaker takes hyp 0.
        let w = vec![vec![5, 5], vec![5, 5]];
        assert_eq!(optimal_mapping(&w), vec![Some(0), Some(1)]);
        let w = vec![vec![0, 3], vec![0, 0]];
        assert_eq!(optimal_mapping(&w), vec![Some(1), None]);
    }
}
