pub mod census;
pub mod frag;
pub mod growth;
pub mod gw;
pub mod harness;
pub mod mb;
pub mod metrics;
pub mod partitions;
pub mod rng;
