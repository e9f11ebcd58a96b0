use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a sequence position holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    System,
    Video,
    Audio,
    Subtitle,
    Question,
    Answer,
    /// Injected belief token (never produced by the template itself).
    Belief,
    Pad,
}

impl Role {
    pub fn is_audiovisual(self) -> bool {
        matches!(self, Role::Video | Role::Audio)
    }

    pub fn short(self) -> &'static str {
        match self {
            Role::System => "sys",
            Role::Video => "vid",
            Role::Audio => "aud",
            Role::Subtitle => "sub",
            Role::Question => "qst",
            Role::Answer => "ans",
            Role::Belief => "blf",
            Role::Pad => "pad",
        }
    }
}

/// Global token-id layout of the toy vocabulary.
///
/// Sentinels come first, then the video codebook, audio codebook, transcript
/// words and finally one answer token per affect class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabLayout {
    pub av_codebook: usize,
    pub text_words: usize,
    pub classes: usize,
}

impl VocabLayout {
    pub const PAD: usize = 0;
    pub const SYSTEM: [usize; 2] = [1, 2];
    pub const QUESTION: [usize; 2] = [3, 4];
    pub const EOS: usize = 5;
    const SENTINELS: usize = 6;

    pub fn size(&self) -> usize {
        Self::SENTINELS + 2 * self.av_codebook + self.text_words + self.classes
    }

    pub fn video(&self, code: u32) -> usize {
        Self::SENTINELS + code as usize
    }

    pub fn audio(&self, code: u32) -> usize {
        Self::SENTINELS + self.av_codebook + code as usize
    }

    pub fn word(&self, w: u32) -> usize {
        Self::SENTINELS + 2 * self.av_codebook + w as usize
    }

    pub fn class(&self, k: usize) -> usize {
        Self::SENTINELS + 2 * self.av_codebook + self.text_words + k
    }

    /// Number of template tokens added around the content.
    pub fn sentinel_count(with_answer: bool) -> usize {
        Self::SYSTEM.len() + Self::QUESTION.len() + usize::from(with_answer)
    }
}

/// A templated token sequence with a role tag per position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The contiguous region carrying `role`, if present.
    pub fn region(&self, role: Role) -> Option<Range<usize>> {
        let start = self.roles.iter().position(|r| *r == role)?;
        let end = self.roles.iter().rposition(|r| *r == role)? + 1;
        Some(start..end)
    }

    pub fn positions(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    }

    /// Copy without the answer region (the observable prefix).
    pub fn prefix(&self) -> TokenSequence {
        let end = self.region(Role::Answer).map_or(self.len(), |r| r.start);
        TokenSequence {
            tokens: self.tokens[..end].to_vec(),
            roles: self.roles[..end].to_vec(),
        }
    }

    /// Copy with a different answer class.
    pub fn with_answer(&self, layout: &VocabLayout, class: usize) -> TokenSequence {
        let mut seq = self.prefix();
        seq.tokens.extend([layout.class(class), VocabLayout::EOS]);
        seq.roles.extend([Role::Answer, Role::Answer]);
        seq
    }

    /// Checks the ordering contract: one contiguous region per role, in
    /// system, video, audio, subtitle, question, answer order.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.roles.len() {
            return Err(Error::Contract("token/role length mismatch".into()));
        }
        let mut seen: Vec<Role> = Vec::new();
        for r in &self.roles {
            match seen.last() {
                Some(last) if last == r => {}
                Some(last) if last > r => {
                    return Err(Error::Contract(format!("role {r:?} after {last:?}")));
                }
                _ => {
                    if seen.contains(r) {
                        return Err(Error::Contract(format!("role {r:?} is not contiguous")));
                    }
                    seen.push(*r);
                }
            }
        }
        Ok(())
    }
}

/// Per-role content for one templated sequence; codes are local to each role.
#[derive(Clone, Debug, Default)]
pub struct TemplateInput<'a> {
    pub video: &'a [u32],
    pub audio: &'a [u32],
    pub subtitle: &'a [u32],
    /// Target class; `None` builds the prompt without an answer region.
    pub answer: Option<usize>,
}

/// Lay the parts out as system, video, audio, subtitle, question, answer.
/// Empty audiovisual parts are omitted (modality absent).
pub fn assemble_template(
    layout: &VocabLayout,
    input: &TemplateInput<'_>,
    max_seq_len: usize,
) -> Result<TokenSequence> {
    if input.subtitle.is_empty() {
        return Err(Error::Contract("subtitle region is empty".into()));
    }
    let mut tokens = Vec::new();
    let mut roles = Vec::new();
    let mut push = |ids: &mut dyn Iterator<Item = usize>, role: Role| {
        for id in ids {
            tokens.push(id);
            roles.push(role);
        }
    };
    push(&mut VocabLayout::SYSTEM.into_iter(), Role::System);
    push(&mut input.video.iter().map(|&c| layout.video(c)), Role::Video);
    push(&mut input.audio.iter().map(|&c| layout.audio(c)), Role::Audio);
    push(&mut input.subtitle.iter().map(|&w| layout.word(w)), Role::Subtitle);
    push(&mut VocabLayout::QUESTION.into_iter(), Role::Question);
    if let Some(k) = input.answer {
        if k >= layout.classes {
            return Err(Error::Contract(format!("answer class {k} out of range")));
        }
        push(
            &mut [layout.class(k), VocabLayout::EOS].into_iter(),
            Role::Answer,
        );
    }
    if tokens.len() > max_seq_len {
        return Err(Error::SequenceOverflow {
            len: tokens.len(),
            max: max_seq_len,
        });
    }
    Ok(TokenSequence { tokens, roles })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAYOUT: VocabLayout = VocabLayout {
        av_codebook: 8,
        text_words: 4,
        classes: 3,
    };

    #[test]
    fn length_is_content_plus_sentinels() {
        let seq = assemble_template(
            &LAYOUT,
            &TemplateInput {
                video: &[1, 2, 3],
                audio: &[4, 5],
                subtitle: &[0, 1, 2, 3],
                answer: Some(1),
            },
            64,
        )
        .unwrap();
        // content 3 + 2 + 4, answer class token 1, plus 2 system, 2 question, EOS
        assert_eq!(seq.len(), 10 + VocabLayout::sentinel_count(true));
        seq.validate().unwrap();
        assert_eq!(seq.region(Role::Audio), Some(5..7));
        assert_eq!(seq.region(Role::Answer), Some(13..15));
    }

    #[test]
    fn absent_audio_keeps_order() {
        let seq = assemble_template(
            &LAYOUT,
            &TemplateInput {
                video: &[1, 2],
                audio: &[],
                subtitle: &[0],
                answer: Some(0),
            },
            64,
        )
        .unwrap();
        assert!(seq.region(Role::Audio).is_none());
        seq.validate().unwrap();
    }

    #[test]
    fn overflow_is_reported() {
        let err = assemble_template(
            &LAYOUT,
            &TemplateInput {
                video: &[0; 20],
                audio: &[0; 20],
                subtitle: &[0],
                answer: Some(0),
            },
            16,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SequenceOverflow { len: 47, max: 16 }));
    }

    #[test]
    fn validate_rejects_out_of_order_roles() {
        let seq = TokenSequence {
            tokens: vec![0, 0, 0],
            roles: vec![Role::Audio, Role::Video, Role::Answer],
        };
        assert!(seq.validate().is_err());
    }

    #[test]
    fn with_answer_swaps_class_token() {
        let input = TemplateInput {
            video: &[1],
            audio: &[2],
            subtitle: &[0],
            answer: Some(0),
        };
        let seq = assemble_template(&LAYOUT, &input, 64).unwrap();
        let other = seq.with_answer(&LAYOUT, 2);
        assert_eq!(other.len(), seq.len());
        assert_eq!(other.tokens[other.len() - 2], LAYOUT.class(2));
    }
}
