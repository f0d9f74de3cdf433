pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod packets;
pub mod parametrix;
pub mod quad;
pub mod reference;
pub mod spline;
pub mod symbols;
pub mod tent;
pub mod transform;
pub mod vec3;
