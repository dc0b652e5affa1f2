//! Compiler, instrumentation passes and simulated protection-key machine
//! for partitioned `.pml` programs.

pub mod gen;
pub mod instrument;
pub mod lang;
pub mod machine;
pub mod pipeline;
pub mod policy;
