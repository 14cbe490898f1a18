//! Client side of the model bridge plus a loopback fixture server.
//!
//! See `PROTOCOL.md` for the wire format.

pub mod client;
pub mod fixture;
pub mod wire;

pub use client::{BridgeClient, BridgeEndpoint, BridgeError, RemoteCodec, RemoteDenoiser};
pub use wire::Capabilities;
