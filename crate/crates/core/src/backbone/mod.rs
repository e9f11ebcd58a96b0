//! Toy multimodal "thinker": templated token sequences, a causal transformer
//! with LoRA on the attention projections, and the masked LM loss.

mod checkpoint;
mod lora;
mod loss;
mod template;
mod thinker;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_HEADER};
pub use lora::{apply_lora, LoraAdapter, Projection};
pub use loss::{lm_cross_entropy, shift_labels, LmLoss};
pub use template::{assemble_template, Role, TemplateInput, TokenSequence, VocabLayout};
pub use thinker::{thinker_forward, HiddenStates, Thinker, ThinkerConfig, EMBED_STD};
