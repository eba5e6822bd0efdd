pub mod calibrate;
pub mod diagnose;
pub mod evaluate;
pub mod select;
pub mod synth;
