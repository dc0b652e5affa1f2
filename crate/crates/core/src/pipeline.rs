//! Source-to-machine convenience entry points.

use thiserror::Error;

use crate::instrument::{instrument, Build, InstrumentError};
use crate::lang::ast::SourceProgram;
use crate::lang::ir::IRModule;
use crate::lang::lower::{lower_to_ir, LowerError};
use crate::lang::parser::{parse_program, ParseError};
use crate::machine::{init, InitError, MachineState};
use crate::policy::{validate_policy, Backend, Policy, ValidationReport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error("policy rejected:\n{0}")]
    Policy(ValidationReport),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Init(#[from] InitError),
}

#[derive(Debug, Clone)]
pub struct Compiled {
    pub program: SourceProgram,
    pub ir: IRModule,
    pub policy: Policy,
}

/// Parse, lower and validate against the MPK backend.
pub fn compile(source: &str) -> Result<Compiled, CompileError> {
    compile_program(parse_program(source)?)
}

/// Lower and validate an already parsed program.
pub fn compile_program(program: SourceProgram) -> Result<Compiled, CompileError> {
    let (ir, policy) = lower_to_ir(&program)?;
    let report = validate_policy(&policy, &ir.program_index(), Backend::Mpk);
    if !report.is_valid() {
        return Err(CompileError::Policy(report));
    }
    Ok(Compiled { program, ir, policy })
}

/// Compile and instrument.
pub fn build(source: &str) -> Result<(Compiled, Build), CompileError> {
    build_compiled(compile(source)?)
}

/// Instrument a compiled program.
pub fn build_compiled(compiled: Compiled) -> Result<(Compiled, Build), CompileError> {
    let build = instrument(&compiled.ir, &compiled.policy)?;
    Ok((compiled, build))
}

/// A freshly initialised machine with the module's globals loaded.
pub fn machine(compiled: &Compiled, build: &Build) -> Result<MachineState, CompileError> {
    let mut state = init(&build.layout, &compiled.policy, &build.module.keys)?;
    state.load_image(&build.module.ir);
    Ok(state)
}
