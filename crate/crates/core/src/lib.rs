pub mod attack;
pub mod autodiff;
pub mod cli;
pub mod dataio;
pub mod ensemble;
pub mod erosion;
pub mod evaluation;
pub mod experiment;
pub mod network;
