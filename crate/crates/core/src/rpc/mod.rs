//! Wire protocol and transports.
//!
//! One binary framing shared by an in-process loopback transport and a
//! TCP transport. Every frame is `length (u32 BE, counts opcode onward) |
//! opcode (u8) | request id (u64 BE) | opcode-specific fields`. Replies
//! reuse the request's opcode and echo its request id; errors travel as
//! opcode 127 with a stable code and message. Concurrent calls over one
//! connection are multiplexed by request id, so replies may arrive out of
//! order.
//!
//! The loopback transport pushes every message through the same
//! encode/decode path as TCP, so the two transports are byte-equivalent
//! by construction.

mod server;
mod transport;
mod wire;

pub use server::TcpServer;
pub use transport::{loopback_addr, register_loopback, LoopbackGuard, Rpc};
pub use wire::{
    decode_reply, decode_request, encode_reply, encode_request, read_frame, request_id_of,
    Reply, Request, UpdateKind, MAX_FRAME,
};

/// A role reachable over the protocol: one handler for every opcode the
/// role supports; unknown opcodes come back as ERROR replies.
pub trait Service: Send + Sync {
    fn handle(&self, req: Request) -> Reply;
}
