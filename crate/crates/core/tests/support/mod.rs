#![allow(dead_code)]

pub mod dual_oracle;
pub mod gaussian;
