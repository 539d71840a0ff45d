//! Numerical self-checks: the finite-difference gradient suite and the
//! golden-fixture runner.

pub mod golden;
mod suite;

pub use golden::{check_dir, check_fixture, CaseReport};
pub use suite::{end_to_end, op_suite, EndToEndCheck, OpCheck, END_TO_END_STEP, STEP};
