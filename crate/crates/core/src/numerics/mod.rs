//! Dense linear algebra, attention, Adam, sphere projection and gradient checks.

mod adam;
mod attention;
mod gradcheck;
pub mod par;
mod sphere;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{attention_backward, attention_forward, attention_forward_cached, AttentionCache};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use sphere::{normalize_rows, project_to_sphere};
pub use tensor::{dot, norm, Tensor2};
