pub mod analysis;
pub mod conjugate;
pub mod domain;
pub mod error;
pub mod export;
pub mod geom;
pub mod mesh;
pub mod solver;
pub mod sparse;
