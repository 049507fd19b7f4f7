#![allow(dead_code)]

pub mod coverage;
pub mod gradcheck;
pub mod idx_ref;
pub mod joint;
