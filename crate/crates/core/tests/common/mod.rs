#![allow(dead_code)]

pub mod dense_qp;
pub mod planar;
