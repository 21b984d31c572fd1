#![allow(dead_code)]

pub mod feb;
pub mod primitives;
