pub mod duration;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod json;
pub mod mfcc;
pub mod msar;
pub mod pipeline;
pub mod preprocess;
pub mod signal_io;
pub mod slds;
pub mod synth;

pub use error::{Error, Result};
