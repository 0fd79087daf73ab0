//! Context-disentangled augmentation of annotated scenes.

mod corpus;
mod cutout;
mod edit;
mod poisson;

pub use corpus::{augment_split, edit_seed, AugmentConfig, AugmentReport};
pub use cutout::{count_varying_cutout, removal_count, required_gap, CutoutConfig, CutoutVariant, GapRule};
pub use edit::{
    opponent, placement_ok, recolor_object, relocate_object, relocate_object_at, rewrite_expression, BlendTrace,
    EditKind, Relocation, MAX_RELOCATION_IOU, RELOCATION_ATTEMPTS,
};
pub use poisson::{poisson_blend, Blend, FloatImage, PoissonConfig};
