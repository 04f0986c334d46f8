//! Speaker-attributed multi-talker speech recognition.

pub mod cli;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod model;
pub mod sot;
pub mod stno;
pub mod tensor;
pub mod train;
pub mod vocab;
