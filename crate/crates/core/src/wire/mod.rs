//! Message framing, typed messages, and the two interchangeable transports
//! (in-process channels and TCP). Layouts are specified in `docs/wire.md`.

pub mod frame;
pub mod msg;
pub mod tcp;
pub mod transport;

pub use frame::{decode_frame, encode_frame, Frame, FrameBuilder, MsgType};
pub use msg::Message;
pub use transport::{call, call_idempotent, inproc_pair, DelayLine, Endpoint, InProcEndpoint, Inbox, Reply, ReplyTo, Request, Responder};
