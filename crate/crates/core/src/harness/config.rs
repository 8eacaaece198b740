//! Flat `stage.param = value` pipeline configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::beamform::TdoaConfig;
use crate::diarize::{AhcStop, FirstPassConfig};
use crate::error::{Error, Result};
use crate::gss::GssConfig;
use crate::reseg::ResegConfig;
use crate::sad::{Fusion, SadHmmConfig};
use crate::wpe::WpeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    /// Oracle speech segments and speaker labels; only enhancement runs.
    Oracle,
    /// Full diarization from audio.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapSource {
    Oracle,
    Heuristic,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub track: Track,
    pub wpe_enabled: bool,
    pub wpe: WpeConfig,
    pub beamform_enabled: bool,
    pub beamform: TdoaConfig,
    pub sad_fusion: Fusion,
    pub sad: SadHmmConfig,
    pub first_pass: FirstPassConfig,
    pub plda_path: Option<PathBuf>,
    pub plda_train_scenes: usize,
    pub reseg_enabled: bool,
    pub overlap: OverlapSource,
    pub reseg: ResegConfig,
    pub gss_enabled: bool,
    pub gss: GssConfig,
    pub score_collar_sec: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            track: Track::Full,
            wpe_enabled: true,
            wpe: WpeConfig::default(),
            beamform_enabled: true,
            beamform: TdoaConfig::default(),
            sad_fusion: Fusion::Max,
            sad: SadHmmConfig::default(),
            first_pass: FirstPassConfig::default(),
            plda_path: None,
            plda_train_scenes: 12,
            reseg_enabled: true,
            overlap: OverlapSource::Heuristic,
            reseg: ResegConfig::default(),
            gss_enabled: true,
            gss: GssConfig::default(),
            score_collar_sec: 0.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "pipeline.track",
    "wpe.enabled",
    "wpe.taps",
    "wpe.delay",
    "wpe.alpha",
    "wpe.psd_context",
    "beamform.enabled",
    "beamform.block_sec",
    "beamform.max_delay_sec",
    "beamform.confidence_threshold",
    "sad.fusion",
    "sad.min_speech_sec",
    "sad.min_silence_sec",
    "sad.max_speech_sec",
    "sad.speech_prior",
    "diarize.window_sec",
    "diarize.stride_sec",
    "diarize.fusion",
    "diarize.num_speakers",
    "diarize.threshold",
    "diarize.plda",
    "diarize.plda_train_scenes",
    "reseg.enabled",
    "reseg.overlap",
    "reseg.subspace_dim",
    "reseg.loop_prob",
    "reseg.downsample",
    "reseg.iterations",
    "reseg.acoustic_scale",
    "reseg.min_segment_sec",
    "gss.enabled",
    "gss.context_sec",
    "gss.iterations",
    "score.collar_sec",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value `{raw}` for {key}")))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, raw) = content.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line}: expected `stage.param = value`"))
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
            }
            cfg.set(line, key, raw)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, line: usize, key: &str, raw: &str) -> Result<()> {
        match key {
            "pipeline.track" => {
                self.track = match raw {
                    "track1" => Track::Oracle,
                    "track2" => Track::Full,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {line}: track must be track1 or track2"
                        )))
                    }
                }
            }
            "wpe.enabled" => self.wpe_enabled = value(line, key, raw)?,
            "wpe.taps" => self.wpe.taps = value(line, key, raw)?,
            "wpe.delay" => self.wpe.delay = value(line, key, raw)?,
            "wpe.alpha" => self.wpe.alpha = value(line, key, raw)?,
            "wpe.psd_context" => self.wpe.psd_context = value(line, key, raw)?,
            "beamform.enabled" => self.beamform_enabled = value(line, key, raw)?,
            "beamform.block_sec" => self.beamform.block_len_sec = value(line, key, raw)?,
            "beamform.max_delay_sec" => self.beamform.max_delay_sec = value(line, key, raw)?,
            "beamform.confidence_threshold" => {
                self.beamform.confidence_threshold = value(line, key, raw)?
            }
            "sad.fusion" => self.sad_fusion = value(line, key, raw)?,
            "sad.min_speech_sec" => self.sad.min_speech_sec = value(line, key, raw)?,
            "sad.min_silence_sec" => self.sad.min_silence_sec = value(line, key, raw)?,
            "sad.max_speech_sec" => self.sad.max_speech_sec = value(line, key, raw)?,
            "sad.speech_prior" => self.sad.speech_prior = value(line, key, raw)?,
            "diarize.window_sec" => self.first_pass.window_sec = value(line, key, raw)?,
            "diarize.stride_sec" => self.first_pass.stride_sec = value(line, key, raw)?,
            "diarize.fusion" => self.first_pass.fusion = value(line, key, raw)?,
            "diarize.num_speakers" => {
                self.first_pass.stop = AhcStop::NumClusters(value(line, key, raw)?)
            }
            "diarize.threshold" => {
                self.first_pass.stop = AhcStop::Threshold(value(line, key, raw)?)
            }
            "diarize.plda" => self.plda_path = Some(PathBuf::from(raw)),
            "diarize.plda_train_scenes" => self.plda_train_scenes = value(line, key, raw)?,
            "reseg.enabled" => self.reseg_enabled = value(line, key, raw)?,
            "reseg.overlap" => {
                self.overlap = match raw {
                    "oracle" => OverlapSource::Oracle,
                    "heuristic" => OverlapSource::Heuristic,
                    "off" => OverlapSource::Off,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {line}: overlap must be oracle, heuristic or off"
                        )))
                    }
                }
            }
            "reseg.subspace_dim" => self.reseg.vb.subspace_dim = value(line, key, raw)?,
            "reseg.loop_prob" => self.reseg.vb.loop_prob = value(line, key, raw)?,
            "reseg.downsample" => self.reseg.vb.downsample = value(line, key, raw)?,
            "reseg.iterations" => self.reseg.vb.num_iters = value(line, key, raw)?,
            "reseg.acoustic_scale" => self.reseg.vb.acoustic_scale = value(line, key, raw)?,
            "reseg.min_segment_sec" => self.reseg.min_segment_sec = value(line, key, raw)?,
            "gss.enabled" => self.gss_enabled = value(line, key, raw)?,
            "gss.context_sec" => self.gss.context_sec = value(line, key, raw)?,
            "gss.iterations" => self.gss.iterations = value(line, key, raw)?,
            "score.collar_sec" => self.score_collar_sec = value(line, key, raw)?,
            _ => unreachable!("key list and setter are kept in sync"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.wpe.validate().map_err(wrap)?;
        self.sad.validate().map_err(wrap)?;
        self.reseg.vb.validate().map_err(wrap)?;
        let fp = &self.first_pass;
        if !(fp.window_sec > 0.0 && fp.stride_sec > 0.0 && fp.stride_sec <= fp.window_sec) {
            return Err(Error::Config(
                "diarize: need 0 < stride_sec <= window_sec".into(),
            ));
        }
        if let AhcStop::NumClusters(0) = fp.stop {
            return Err(Error::Config(
                "diarize.num_speakers must be positive".into(),
            ));
        }
        if !(self.beamform.block_len_sec > 0.0 && self.beamform.max_delay_sec >= 0.0) {
            return Err(Error::Config("beamform: block_sec must be positive".into()));
        }
        if !(self.gss.context_sec >= 0.0) || self.gss.iterations == 0 {
            return Err(Error::Config(
                "gss: need context_sec >= 0 and iterations >= 1".into(),
            ));
        }
        if !(self.score_collar_sec >= 0.0) || !(self.reseg.min_segment_sec >= 0.0) {
            return Err(Error::Config(
                "collar and minimum segment duration must be non-negative".into(),
            ));
        }
        if self.plda_path.is_none() && self.plda_train_scenes < 1 {
            return Err(Error::Config(
                "diarize.plda_train_scenes must be positive without a PLDA file".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(
            PipelineConfig::parse("# nothing\n\n").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn values_are_applied() {
        let cfg = PipelineConfig::parse(
            "pipeline.track = track1\nwpe.taps = 5 # shorter\ndiarize.threshold = 0.5\nreseg.overlap = oracle\n",
        )
        .unwrap();
        assert_eq!(cfg.track, Track::Oracle);
        assert_eq!(cfg.wpe.taps, 5);
        assert_eq!(cfg.first_pass.stop, AhcStop::Threshold(0.5));
        assert_eq!(cfg.overlap, OverlapSource::Oracle);
    }

    #[test]
    fn schema_violations_are_rejected() {
        for text in [
            "wpe.tap = 3",
            "wpe.taps = three",
            "wpe.taps 3",
            "wpe.taps = 3\nwpe.taps = 4",
            "wpe.alpha = 1.5",
            "diarize.num_speakers = 0",
            "pipeline.track = track3",
        ] {
            assert!(
                matches!(PipelineConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
