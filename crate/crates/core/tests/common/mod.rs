#![allow(dead_code)]

pub mod diffusion;
pub mod oracles;
