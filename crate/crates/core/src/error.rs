use thiserror::Error;

/// Errors shared by every service and the client.
///
/// Each variant maps to a stable wire code so errors survive an RPC hop
/// unchanged; see [`Error::code`] and [`Error::from_wire`].
#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Write-once violation: the key already holds a different payload.
    #[error("conflict: key already holds a different payload")]
    Conflict,
    /// No object stored under the requested key.
    #[error("not found")]
    NotFound,
    /// A bounded wait expired before the condition held.
    #[error("timed out")]
    Timeout,
    /// The page store's configured capacity would be exceeded.
    #[error("store full")]
    StoreFull,
    /// Requested extent exceeds the stored object.
    #[error("extent out of stored range")]
    Range,
    /// The provider registry is empty.
    #[error("no providers registered")]
    NoProviders,
    /// Report for an address that never registered.
    #[error("unknown provider")]
    UnknownProvider,
    #[error("unknown blob")]
    UnknownBlob,
    #[error("unknown version")]
    UnknownVersion,
    /// The version exists but has not been published yet.
    #[error("version not published")]
    NotPublished,
    /// Write offset beyond the end of the previous snapshot.
    #[error("offset beyond end of previous snapshot")]
    OffsetBeyondEnd,
    /// Read range exceeds the snapshot size.
    #[error("read out of bounds")]
    OutOfBounds,
    /// Page size is not a power of two (or exceeds the frame limit).
    #[error("bad page size")]
    BadPsize,
    /// Undecodable bytes on the wire or in a stored node.
    #[error("malformed: {0}")]
    Malformed(String),
    /// Transport-level failure (connect, reset, ...).
    #[error("connection: {0}")]
    Connection(String),
    /// Internal protocol violation; indicates a bug, not a user error.
    #[error("protocol violation: {0}")]
    Protocol(String),
    /// Peer does not understand the opcode.
    #[error("unsupported opcode")]
    Unsupported,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable wire code for ERROR frames.
    pub fn code(&self) -> u8 {
        match self {
            Error::Conflict => 1,
            Error::NotFound => 2,
            Error::Timeout => 3,
            Error::StoreFull => 4,
            Error::Range => 5,
            Error::NoProviders => 6,
            Error::UnknownProvider => 7,
            Error::UnknownBlob => 8,
            Error::UnknownVersion => 9,
            Error::NotPublished => 10,
            Error::OffsetBeyondEnd => 11,
            Error::OutOfBounds => 12,
            Error::BadPsize => 13,
            Error::Malformed(_) => 14,
            Error::Connection(_) => 15,
            Error::Protocol(_) => 16,
            Error::Unsupported => 17,
        }
    }

    /// Reconstruct an error from an ERROR frame's code and message.
    pub fn from_wire(code: u8, message: &str) -> Error {
        match code {
            1 => Error::Conflict,
            2 => Error::NotFound,
            3 => Error::Timeout,
            4 => Error::StoreFull,
            5 => Error::Range,
            6 => Error::NoProviders,
            7 => Error::UnknownProvider,
            8 => Error::UnknownBlob,
            9 => Error::UnknownVersion,
            10 => Error::NotPublished,
            11 => Error::OffsetBeyondEnd,
            12 => Error::OutOfBounds,
            13 => Error::BadPsize,
            14 => Error::Malformed(message.to_string()),
            15 => Error::Connection(message.to_string()),
            16 => Error::Protocol(message.to_string()),
            17 => Error::Unsupported,
            other => Error::Protocol(format!("unknown error code {other}: {message}")),
        }
    }

    /// Message carried alongside the code in ERROR frames.
    pub fn wire_message(&self) -> String {
        match self {
            Error::Malformed(m) | Error::Connection(m) | Error::Protocol(m) => m.clone(),
            _ => String::new(),
        }
    }
}
