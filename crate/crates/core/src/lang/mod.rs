pub mod analysis;
pub mod ast;
pub mod dump;
pub mod ir;
pub mod lower;
pub mod parser;
