//! Speculative semantics for a small register IR, with checkers for
//! speculative non-interference and validators for dead-code elimination and
//! register allocation.

pub mod ir;
pub mod sem;
pub mod security;
pub mod dataflow;
pub mod liveness;
pub mod snippy;
pub mod regalloc;
pub mod poison;
