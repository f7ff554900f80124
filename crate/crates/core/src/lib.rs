//! Weakly supervised segmentation of unwanted items on a sorting conveyor,
//! learned from images taken before and after a human removal step.

pub mod acceptance;
pub mod bgremoval;
pub mod classifier;
pub mod dataio;
pub mod error;
pub mod evalreport;
pub mod flow;
pub mod formats;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod regions;
pub mod saliency;
pub mod scenegen;
pub mod segtrain;
pub mod util;

pub use error::{Error, Result};
