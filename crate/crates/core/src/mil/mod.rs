//! Multiple-instance learning: bags, pooling heads, the segment model and
//! its training loop.

pub mod bag;
pub mod model;
pub mod pooling;
pub mod train;
