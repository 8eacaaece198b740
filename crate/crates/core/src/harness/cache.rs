//! Content-addressed storage of stage outputs.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::audio::MultichannelAudio;
use crate::error::Result;

/// Environment variable naming the cache root.
pub const CACHE_ENV: &str = "FARFIELD_CACHE_DIR";

/// Digest of an audio signal: sample rate, shape and every sample's bits.
pub fn hash_audio(audio: &MultichannelAudio) -> String {
    let mut h = Sha256::new();
    h.update(audio.sample_rate().to_le_bytes());
    h.update((audio.num_channels() as u64).to_le_bytes());
    h.update((audio.num_samples() as u64).to_le_bytes());
    for ch in audio.channels() {
        for v in ch {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_text(text: &str) -> String {
    hash_bytes(text.as_bytes())
}

/// Key of one stage run: stage name, its parameters and its input digests.
pub fn stage_key(stage: &str, params: &str, inputs: &[String]) -> String {
    let mut h = Sha256::new();
    for part in std::iter::once(stage)
        .chain(std::iter::once(params))
        .chain(inputs.iter().map(String::as_str))
    {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct StageCache {
    root: PathBuf,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Cache rooted at `$FARFIELD_CACHE_DIR`, or `fallback` when unset.
    pub fn from_env(fallback: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Self::new(PathBuf::from(dir)),
            _ => Self::new(fallback),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(key)
    }

    /// The entry directory if a completed entry exists.
    pub fn lookup(&self, stage: &str, key: &str) -> Option<PathBuf> {
        let dir = self.entry(stage, key);
        dir.join(".complete").exists().then_some(dir)
    }

    /// Runs `produce` into a fresh directory and publishes it atomically
    /// under the key, so readers never see a partial entry.
    pub fn fill(
        &self,
        stage: &str,
        key: &str,
        produce: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<PathBuf> {
        let dir = self.entry(stage, key);
        let parent = dir.parent().expect("entry has a stage directory");
        std::fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{key}.{}.tmp", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        produce(&tmp)?;
        std::fs::write(tmp.join(".complete"), key)?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::rename(&tmp, &dir)?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_depend_on_every_part() {
        let base = stage_key("wpe", "taps=10", &["a".into()]);
        assert_eq!(base, stage_key("wpe", "taps=10", &["a".into()]));
        assert_ne!(base, stage_key("sad", "taps=10", &["a".into()]));
        assert_ne!(base, stage_key("wpe", "taps=11", &["a".into()]));
        assert_ne!(base, stage_key("wpe", "taps=10", &["b".into()]));
        assert_ne!(stage_key("ab", "c", &[]), stage_key("a", "bc", &[]));
    }

    #[test]
    fn audio_hash_sees_single_sample_change() {
        let a = MultichannelAudio::mono(vec![0.0, 1.0, 2.0], 16000).unwrap();
        let b = MultichannelAudio::mono(vec![0.0, 1.0, 2.0 + 1e-12], 16000).unwrap();
        assert_ne!(hash_audio(&a), hash_audio(&b));
    }

    #[test]
    fn fill_then_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let cache = StageCache::new(dir.path());
        assert!(cache.lookup("sad", "k").is_none());
        let entry = cache
            .fill("sad", "k", |d| Ok(std::fs::write(d.join("out.txt"), "x")?))
            .unwrap();
        assert_eq!(cache.lookup("sad", "k"), Some(entry.clone()));
        assert_eq!(std::fs::read_to_string(entry.join("out.txt")).unwrap(), "x");
    }
}
