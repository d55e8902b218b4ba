pub mod files;
pub mod live;
pub mod runner;
pub mod wire;
