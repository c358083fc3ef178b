//! Library side of the `pseg` binary: command implementations and the
//! finite-difference self-check suite (kept as a library so integration
//! tests drive them in-process).

pub mod gradcheck;
pub mod ops;
pub mod palette;
