//! Motion-coded visual messaging over event-camera streams.
//!
//! A sender encodes a short flight command as a sequence of motion
//! primitives. The receiver frames the event stream, segments it into
//! actions, classifies each action with a spiking network and decodes the
//! resulting symbol sequence.

pub mod codec;
pub mod dataset;
pub mod error;
pub mod event;
pub mod imsr;
pub mod par;
pub mod segmentation;
pub mod snn;
pub mod synthgen;

pub use error::{Error, Result};
