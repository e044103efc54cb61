#![allow(dead_code)]

pub mod gradcheck;
pub mod ks;
pub mod oracle;
