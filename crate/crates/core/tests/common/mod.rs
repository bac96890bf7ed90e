#![allow(dead_code)]

pub mod catalog;
pub mod composites;
pub mod oracles;
