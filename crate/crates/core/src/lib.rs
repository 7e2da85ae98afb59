pub mod client;
pub mod cluster;
pub mod codec;
pub mod gatekeeper;
pub mod graph;
pub mod harness;
pub mod messages;
pub mod model;
pub mod oracle;
pub mod program;
pub mod runtime;
pub mod services;
pub mod shard;
pub mod store;
pub mod timestamp;
pub mod wire;
