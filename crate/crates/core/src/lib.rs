pub mod classify;
pub mod datagen;
pub mod digest;
pub mod network;
pub mod qgs;
pub mod training;
