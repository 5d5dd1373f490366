//! Differentiable LiDAR re-simulation on range-view images.
//!
//! A driving scene is represented as a set of anchors carrying learnable
//! feature vectors. Small MLPs decode each anchor into a view-conditioned
//! Gaussian primitive (position offset, covariance, intensity, ray-drop
//! probability, opacity). Primitives are splatted onto the range-view
//! raster through a micro cross-section projection and alpha-composited
//! per pixel into depth / intensity / ray-drop channels. The whole forward
//! pass is differentiated by hand so the field can be fit to recorded (or
//! synthetic) scans with a first-order optimizer, then re-rendered from
//! novel poses and sensor configurations.

pub mod cli;
pub mod dynamics;
pub mod field;
pub mod grad;
pub mod metrics;
pub mod oracle;
pub mod pose;
pub mod rangeview;
pub mod splat;
pub mod train;

mod error;

pub use error::{Error, Result};

// Code blocks in the guide double as doc-tests so the book cannot drift
// from the API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(range_view, "../../../book/src/range-view.md");
    chapter!(neural_field, "../../../book/src/neural-field.md");
    chapter!(beam_splatting, "../../../book/src/beam-splatting.md");
    chapter!(gradients, "../../../book/src/gradients.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(dynamic_instances, "../../../book/src/dynamic-instances.md");
    chapter!(synthetic_scenes, "../../../book/src/synthetic-scenes.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli_guide, "../../../book/src/cli.md");
}
