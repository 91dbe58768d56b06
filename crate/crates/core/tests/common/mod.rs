#![allow(dead_code)]

pub mod desk;
pub mod grad;
pub mod oracle;
