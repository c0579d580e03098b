//! Reference implementations shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod oracles;
pub mod s_measure;
