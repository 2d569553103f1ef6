//! Knowledge graph embeddings over modules: entities carry a scalar and a
//! vector part, relations act by scaling and rotation.

pub mod algebra;
pub mod cli;
pub mod data;
pub mod eval;
pub mod model;
pub mod train;
