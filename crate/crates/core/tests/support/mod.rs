//! Checks shared by the crate's tests and the acceptance run.
#![allow(dead_code)]

pub mod gradcheck;
pub mod pretrain;
pub mod sanity;
pub mod share;
