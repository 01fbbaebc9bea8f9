#![allow(dead_code)]

pub mod gradcases;
pub mod stats;
