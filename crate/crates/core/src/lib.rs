//! Few-shot medical image segmentation with region-enhanced prototypes.
//!
//! A support image and mask are encoded, the support foreground is split
//! into Voronoi regions, and each region yields a prototype. A stack of
//! transformer blocks filters and rectifies those prototypes against a
//! query prototype that is re-estimated after every block; the query is
//! segmented by cosine similarity to the mean rectified prototype.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod debias;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod exec;
pub mod imageops;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod prototypes;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use exec::Exec;
