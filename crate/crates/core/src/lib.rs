pub mod ckb;
pub mod cpn;
pub mod data;
pub mod dataset;
pub mod eval;
pub mod events;
pub mod features;
pub mod graph;
pub mod numerics;
pub mod pipeline;
pub mod training;
