pub mod attribute;
pub mod demo;
pub mod evals;
pub mod gen;
pub mod randomize;
pub mod train;
