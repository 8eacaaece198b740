pub mod audio;
pub mod beamform;
pub mod diarize;
pub mod error;
pub mod gss;
pub mod harness;
pub mod metrics;
pub mod reseg;
pub mod sad;
pub mod segments;
pub mod wpe;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/audio.md")]
    pub mod audio {}
    #[doc = include_str!("../../../book/src/wpe.md")]
    pub mod wpe {}
    #[doc = include_str!("../../../book/src/beamform.md")]
    pub mod beamform {}
    #[doc = include_str!("../../../book/src/sad.md")]
    pub mod sad {}
    #[doc = include_str!("../../../book/src/diarize.md")]
    pub mod diarize {}
    #[doc = include_str!("../../../book/src/reseg.md")]
    pub mod reseg {}
    #[doc = include_str!("../../../book/src/gss.md")]
    pub mod gss {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    pub mod scoring {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub mod pipeline {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    pub mod acceptance {}
}
