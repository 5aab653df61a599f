#![allow(dead_code, clippy::needless_range_loop)]

pub mod gradients;
pub mod retina_cases;
pub mod synthetic;
