pub mod io;
pub mod pyramid;
pub mod segmentation;
pub mod filtering;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod datagen;
pub mod experiment;
