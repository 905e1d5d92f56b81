//! Synthetic correlated multimodal corpus, augmentation and corpus files.

pub mod augment;
pub mod corpus;
pub mod synth;

use crate::encoders::{AudioWave, TokenSeq, VideoClip};

pub use augment::{add_audio_noise, augment, flip_horizontal, temporal_jitter, AugmentConfig, ColorJitter};
pub use corpus::{read_corpus, write_corpus};
pub use synth::{generate, generate_sample, WorldSpec};

/// One video / audio / narration triple. Absent modalities are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub video: Option<VideoClip>,
    pub audio: Option<AudioWave>,
    /// Candidate narrations `P(x)`; `None` when text is missing.
    pub text: Option<Vec<TokenSeq>>,
    /// The class-consistent narration, kept for retrieval evaluation.
    pub aligned: TokenSeq,
    pub label: usize,
}

impl MultimodalSample {
    pub fn has_video(&self) -> bool {
        self.video.is_some()
    }

    pub fn has_audio(&self) -> bool {
        self.audio.is_some()
    }

    pub fn has_text(&self) -> bool {
        self.text.as_ref().map_or(false, |t| !t.is_empty())
    }

    pub fn modality_count(&self) -> usize {
        self.has_video() as usize + self.has_audio() as usize + self.has_text() as usize
    }
}
