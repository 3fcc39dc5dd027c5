pub mod error;
pub mod io;
pub mod prompts;
pub mod rng;
pub mod tensor;
