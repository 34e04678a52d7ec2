pub mod blocksworld;
pub mod figures;
pub mod interp_flow;
pub mod interp_probe;
pub mod model;
pub mod textgen;
pub mod training;
