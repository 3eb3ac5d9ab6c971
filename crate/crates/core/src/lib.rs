extern crate openblas_src;

pub mod basis;
pub mod h2_synth;
pub mod lpi;
pub mod pi_op;
pub mod pie_model;
pub mod poly;
pub mod quadrature;
pub mod sdp;
pub mod spectral_sim;
