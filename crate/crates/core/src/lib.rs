pub mod batching;
pub mod builtins;
pub mod config;
pub mod criterion;
pub mod data;
pub mod eval;
pub mod exec;
pub mod generator;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod search;
pub mod task;
pub mod tensor;
pub mod trainer;
