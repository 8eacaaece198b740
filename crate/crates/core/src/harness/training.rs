//! PLDA training data drawn from simulated speakers.

use crate::audio::MultichannelAudio;
use crate::diarize::{
    cut_subsegments, extract_embeddings, plda_train, EmbeddingExtractor, PldaModel,
};
use crate::error::Result;
use crate::harness::simulate::{simulate_scene, SceneSpec, SceneTruth};

/// Training scenes use seeds from here upwards, away from evaluation seeds.
pub const TRAINING_SEED_BASE: u64 = 1_000_000;

/// Scene used to draw PLDA training speakers.
pub fn training_scene(index: usize) -> SceneSpec {
    SceneSpec {
        num_speakers: 4,
        num_arrays: 1,
        channels_per_array: 1,
        duration_sec: 40.0,
        overlap_ratio: 0.0,
        snr_db: 20.0,
        reverb_t60_sec: 0.0,
        seed: TRAINING_SEED_BASE + index as u64,
        sample_rate: 16000,
    }
}

/// Embeddings of every `window_sec` window (stride `stride_sec`) inside each
/// speaker's utterances, grouped by speaker.
pub fn speaker_embeddings(
    audio: &MultichannelAudio,
    truth: &SceneTruth,
    extractor: &dyn EmbeddingExtractor,
    window_sec: f64,
    stride_sec: f64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let feats = extractor.features(audio)?;
    let segments = truth.segments();
    truth
        .speaker_labels()
        .iter()
        .map(|label| {
            let grid = cut_subsegments(&segments.with_label(label), window_sec, stride_sec)?;
            Ok(extract_embeddings(extractor, &feats, &grid, 0)?
                .into_iter()
                .map(|e| e.vector)
                .collect())
        })
        .collect()
}

/// PLDA trained on the speakers of `num_scenes` training scenes, using the
/// first channel of the first array.
pub fn train_synthetic_plda(
    extractor: &dyn EmbeddingExtractor,
    num_scenes: usize,
) -> Result<PldaModel> {
    let mut groups = Vec::new();
    for i in 0..num_scenes {
        let (audio, truth) = simulate_scene(&training_scene(i))?;
        let mono = audio[0].select(&[0])?;
        for g in speaker_embeddings(&mono, &truth, extractor, 1.5, 0.75)? {
            if g.len() >= 2 {
                groups.push(g);
            }
        }
    }
    plda_train(&groups)
}
