pub mod datasets;
pub mod explain;
pub mod models;
pub mod preprocess;
pub mod tensor;
pub mod training;
