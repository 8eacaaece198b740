//! Stage orchestration: WPE, beamforming, SAD, first-pass diarization,
//! overlap-aware resegmentation and GSS, each cached by content hash.

use std::path::{Path, PathBuf};

use crate::audio::{read_wav, write_wav, write_wav_f32, MultichannelAudio};
use crate::beamform::beamform;
use crate::diarize::{first_pass, PldaModel, ReferenceExtractor};
use crate::error::{Error, Result};
use crate::gss::gss_enhance_all;
use crate::harness::cache::{hash_audio, hash_bytes, hash_text, stage_key, StageCache};
use crate::harness::config::{OverlapSource, PipelineConfig, Track};
use crate::harness::training::train_synthetic_plda;
use crate::metrics::{compute_der, emit_rttm, parse_rttm, DiarScore, Rttm, ScoringOptions};
use crate::reseg::{resegment, HeuristicOverlap, OverlapDetector, OverlapMask};
use crate::sad::{detect_speech, sad_features, ReferencePosteriors};
use crate::segments::SegmentList;
use crate::wpe::wpe_process;

#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub recording_id: String,
    pub arrays: Vec<MultichannelAudio>,
    /// Oracle speech segments with speaker labels (required for track 1).
    pub oracle_segments: Option<SegmentList>,
    /// Reference used for scoring and for the oracle overlap detector.
    pub reference: Option<SegmentList>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRun {
    pub stage: &'static str,
    pub key: String,
    pub cached: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub stages: Vec<StageRun>,
    pub segments: SegmentList,
    pub rttm_path: PathBuf,
    pub enhanced: Vec<PathBuf>,
    pub score: Option<DiarScore>,
}

impl PipelineReport {
    pub fn ran(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s.stage == stage)
    }
}

struct Runner<'a> {
    cache: &'a StageCache,
    runs: Vec<StageRun>,
}

impl Runner<'_> {
    /// Returns the entry directory and the key, which doubles as the digest
    /// of the outputs for downstream keys.
    fn stage(
        &mut self,
        stage: &'static str,
        params: &str,
        inputs: &[String],
        produce: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<(PathBuf, String)> {
        let key = stage_key(stage, params, inputs);
        let (dir, cached) = match self.cache.lookup(stage, &key) {
            Some(dir) => (dir, true),
            None => (self.cache.fill(stage, &key, produce)?, false),
        };
        self.runs.push(StageRun {
            stage,
            key: key.clone(),
            cached,
        });
        Ok((dir, key))
    }
}

fn read_arrays(dir: &Path, count: usize) -> Result<Vec<MultichannelAudio>> {
    (0..count)
        .map(|a| read_wav(dir.join(format!("array{a}.wav"))))
        .collect()
}

fn read_segments(path: &Path, recording_id: &str) -> Result<SegmentList> {
    Ok(parse_rttm(&std::fs::read_to_string(path)?)?.segments(recording_id))
}

fn write_segments(path: &Path, recording_id: &str, segs: &SegmentList) -> Result<()> {
    std::fs::write(path, emit_rttm(&Rttm::from_segments(recording_id, segs)))?;
    Ok(())
}

/// `<speaker>-<onset ms>-<end ms>.wav`, the name of one enhanced utterance.
pub fn utterance_file_name(label: &str, onset: f64, end: f64) -> String {
    format!(
        "{label}-{}-{}.wav",
        (onset * 1000.0).round() as u64,
        (end * 1000.0).round() as u64
    )
}

fn utterance_name(recording_id: &str, label: &str, onset: f64, end: f64) -> String {
    format!("{recording_id}-{}", utterance_file_name(label, onset, end))
}

/// Runs the configured pipeline on one recording, writing the final RTTM,
/// enhanced utterances and (when a reference is given) scores to `out_dir`.
pub fn run_pipeline(
    config: &PipelineConfig,
    inputs: &PipelineInputs,
    out_dir: &Path,
    cache: &StageCache,
) -> Result<PipelineReport> {
    config.validate()?;
    if inputs.arrays.is_empty() {
        return Err(Error::MissingInput("at least one array recording".into()));
    }
    if config.track == Track::Oracle && inputs.oracle_segments.is_none() {
        return Err(Error::MissingInput("track1 needs oracle segments".into()));
    }
    if config.track == Track::Full
        && config.reseg_enabled
        && config.overlap == OverlapSource::Oracle
        && inputs.reference.is_none()
    {
        return Err(Error::MissingInput(
            "oracle overlap needs a reference".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let rec = inputs.recording_id.as_str();
    let num_arrays = inputs.arrays.len();
    let mut runner = Runner {
        cache,
        runs: Vec::new(),
    };
    let input_hashes: Vec<String> = inputs.arrays.iter().map(hash_audio).collect();

    let (dereverbed, wpe_key) = if config.wpe_enabled {
        let (dir, key) = runner.stage("wpe", &format!("{:?}", config.wpe), &input_hashes, |d| {
            for (a, audio) in inputs.arrays.iter().enumerate() {
                write_wav_f32(
                    d.join(format!("array{a}.wav")),
                    &wpe_process(audio, config.wpe)?,
                )?;
            }
            Ok(())
        })?;
        (read_arrays(&dir, num_arrays)?, vec![key])
    } else {
        (inputs.arrays.clone(), input_hashes)
    };

    let segments = match config.track {
        Track::Oracle => inputs.oracle_segments.clone().expect("checked above"),
        Track::Full => diarize_stages(config, inputs, &dereverbed, &wpe_key, &mut runner)?,
    };
    let seg_text = emit_rttm(&Rttm::from_segments(rec, &segments));

    let mut enhanced = Vec::new();
    if config.gss_enabled && !segments.is_empty() {
        let params = format!("{:?} {:?}", config.gss.context_sec, config.gss.iterations);
        let mut gss_inputs = wpe_key.clone();
        gss_inputs.push(hash_text(&seg_text));
        let (dir, _) = runner.stage("gss", &params, &gss_inputs, |d| {
            let outputs = gss_enhance_all(&dereverbed, &segments, &config.gss)?;
            for (utt, out) in segments.iter().zip(outputs) {
                write_wav_f32(
                    d.join(utterance_name(rec, &utt.label, utt.onset, utt.end())),
                    &out.audio,
                )?;
            }
            Ok(())
        })?;
        let target = out_dir.join("enhanced");
        std::fs::create_dir_all(&target)?;
        for utt in &segments {
            let name = utterance_name(rec, &utt.label, utt.onset, utt.end());
            let audio = read_wav(dir.join(&name))?;
            let path = target.join(&name);
            write_wav(&path, &audio)?;
            enhanced.push(path);
        }
    }

    let rttm_path = out_dir.join(format!("{rec}.rttm"));
    std::fs::write(&rttm_path, &seg_text)?;
    let score = match &inputs.reference {
        Some(reference) => {
            let options = ScoringOptions {
                collar_sec: config.score_collar_sec,
                score_overlap: true,
            };
            let s = compute_der(
                &Rttm::from_segments(rec, reference),
                &Rttm::from_segments(rec, &segments),
                &options,
            )?;
            std::fs::write(out_dir.join("scores.txt"), format_score(&s))?;
            Some(s)
        }
        None => None,
    };
    Ok(PipelineReport {
        stages: runner.runs,
        segments,
        rttm_path,
        enhanced,
        score,
    })
}

/// `DER MS FA SE JER` as percentages.
pub fn format_score(s: &DiarScore) -> String {
    format!(
        "DER {:.2}\nMS {:.2}\nFA {:.2}\nSE {:.2}\nJER {:.2}\n",
        100.0 * s.der,
        100.0 * s.missed_speech,
        100.0 * s.false_alarm,
        100.0 * s.speaker_error,
        100.0 * s.jer
    )
}

fn load_plda(config: &PipelineConfig, runner: &mut Runner) -> Result<(PldaModel, String)> {
    if let Some(path) = &config.plda_path {
        let model = PldaModel::load(path)?;
        let bytes = std::fs::read(path)?;
        return Ok((model, hash_bytes(&bytes)));
    }
    let params = format!("synthetic {}", config.plda_train_scenes);
    let (dir, key) = runner.stage("plda", &params, &[], |d| {
        train_synthetic_plda(&ReferenceExtractor, config.plda_train_scenes)?
            .save(d.join("plda.bin"))
    })?;
    Ok((PldaModel::load(dir.join("plda.bin"))?, key))
}

fn diarize_stages(
    config: &PipelineConfig,
    inputs: &PipelineInputs,
    dereverbed: &[MultichannelAudio],
    wpe_key: &[String],
    runner: &mut Runner,
) -> Result<SegmentList> {
    let rec = inputs.recording_id.as_str();
    let num_arrays = dereverbed.len();
    let (beamformed, bf_key) = if config.beamform_enabled {
        let (dir, key) = runner.stage(
            "beamform",
            &format!("{:?}", config.beamform),
            wpe_key,
            |d| {
                for (a, audio) in dereverbed.iter().enumerate() {
                    write_wav_f32(
                        d.join(format!("array{a}.wav")),
                        &beamform(audio, &config.beamform)?,
                    )?;
                }
                Ok(())
            },
        )?;
        (read_arrays(&dir, num_arrays)?, key)
    } else {
        let mono = dereverbed
            .iter()
            .map(|a| a.select(&[0]))
            .collect::<Result<Vec<_>>>()?;
        (mono, stage_key("channel0", "", wpe_key))
    };

    let sad_params = format!("{:?} {:?}", config.sad_fusion, config.sad);
    let (dir, sad_key) = runner.stage("sad", &sad_params, std::slice::from_ref(&bf_key), |d| {
        let speech = detect_speech(
            &beamformed,
            &ReferencePosteriors::default(),
            config.sad_fusion,
            &config.sad,
        )?;
        std::fs::write(d.join("speech.txt"), speech.to_text())?;
        Ok(())
    })?;
    let speech = SegmentList::parse(&std::fs::read_to_string(dir.join("speech.txt"))?)?;

    let (plda, plda_key) = load_plda(config, runner)?;
    let fp_params = format!("{:?}", config.first_pass);
    let (dir, fp_key) = runner.stage(
        "diarize",
        &fp_params,
        &[bf_key.clone(), sad_key, plda_key],
        |d| {
            let segs = first_pass(
                &beamformed,
                &speech,
                &ReferenceExtractor,
                &plda,
                &config.first_pass,
            )?;
            write_segments(&d.join("first_pass.rttm"), rec, &segs)
        },
    )?;
    let first = read_segments(&dir.join("first_pass.rttm"), rec)?;
    if !config.reseg_enabled {
        return Ok(first);
    }

    let mut reseg_inputs = vec![bf_key, fp_key];
    if config.overlap == OverlapSource::Oracle {
        let reference = inputs.reference.as_ref().expect("checked by run_pipeline");
        reseg_inputs.push(hash_text(&reference.to_text()));
    }
    let params = format!("{:?} {:?}", config.reseg, config.overlap);
    let (dir, _) = runner.stage("reseg", &params, &reseg_inputs, |d| {
        let feats = sad_features(&beamformed[0])?;
        let n = feats.num_frames();
        let h = feats.frame_shift_sec;
        let overlap = match config.overlap {
            OverlapSource::Oracle => {
                OverlapMask::from_reference(inputs.reference.as_ref().expect("checked"), n, h)
            }
            OverlapSource::Heuristic => HeuristicOverlap::default().detect(&feats)?,
            OverlapSource::Off => OverlapMask {
                flags: vec![false; n],
                frame_shift_sec: h,
            },
        };
        let speech_union = first.union("speech", h);
        let segs = resegment(&feats, &first, &speech_union, &overlap, &config.reseg)?;
        write_segments(&d.join("reseg.rttm"), rec, &segs)
    })?;
    read_segments(&dir.join("reseg.rttm"), rec)
}
