//! Toy-scale neural building blocks with hand-written forward and backward
//! passes: dense 4-d tensors, convolutions, instance normalization, the
//! guidance-queried attention block, the doubly-conditioned SPADE block,
//! and the adversarial / feature-matching / perceptual losses, plus a
//! small end-to-end training demo and a finite-difference audit.
//!
//! Everything is f64 and single-threaded; these blocks exist to be
//! verifiable, not fast.

pub mod attention;
pub mod demo;
pub mod gradcheck;
pub mod losses;
pub mod ops;
pub mod spade;
pub mod tensor;

pub use attention::{attention_backward, attention_forward, AttentionBlock, AttentionGrads, Warp};
pub use demo::{demo_train, DemoConfig, DemoReport, DemoStep, PerceptualAnchor};
pub use gradcheck::{run_gradient_checks, GradCheckEntry, GradCheckReport};
pub use losses::{
    feature_matching_loss, gan_loss, perceptual_loss, total_objective, FeatureExtractor,
    LossParts, LossWeights,
};
pub use ops::{instance_norm, instance_norm_backward, Conv2d, ConvGrads};
pub use spade::{
    multi_spade_backward, multi_spade_forward, MultiSpadeBlock, MultiSpadeGrads, SpadeSubBlock,
};
pub use tensor::Tensor4;
