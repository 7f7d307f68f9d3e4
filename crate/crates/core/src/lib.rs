pub mod geometry;
pub mod grid;
pub mod net;
pub mod shapes;
pub mod prior;
pub mod field;
pub mod tracker;
pub mod map;
pub mod mesh;
pub mod bench;
pub mod engine;
