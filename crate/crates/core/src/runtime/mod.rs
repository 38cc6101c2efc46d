//! Wire protocol plus the coordinator and client state machines.

pub mod client;
pub mod protocol;
pub mod server;
