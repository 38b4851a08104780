//! Return-address protection for RV32 microcontrollers built from debug
//! triggers and a trusted shadow stack.

pub mod isa;
pub mod layout;
pub mod machine;
pub mod program;
pub mod scanner;
pub mod triggers;
