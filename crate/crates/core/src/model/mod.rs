//! Micro vision transformer: patch embedding, CLS token, positional table,
//! pre-norm transformer blocks, and a projection head applied to every token.
//! Also the temperature-sharpened student/teacher output distributions and the
//! teacher centering vector.

mod dist;
mod params;
mod vit;

pub use dist::{student_dist, teacher_dist, teacher_probs, update_center, Center};
pub use params::{ModelConfig, ModelParams, ParamSpec};
pub use vit::{encode, forward, patchify, pos_interp_matrix, EncodeOutput};
