// Each integration test binary compiles this module separately and
// uses only a slice of it, so unused-item lints are expected noise.
#![allow(dead_code)]

pub mod oracles;
