pub mod detector;
pub mod eval;
pub mod events;
pub mod experiment;
pub mod kademlia;
pub mod netsim;
pub mod nn;
pub mod pipeline;
