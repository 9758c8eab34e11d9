pub mod ahe;
pub mod bench;
pub mod engine;
pub mod fixtures;
pub mod model;
pub mod protocol;
pub mod trainer;
