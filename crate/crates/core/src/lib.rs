//! Versioned blob storage over striped, immutable pages.
//!
//! A blob is a byte sequence with a full snapshot history. Every update
//! (write or append) produces a new immutable snapshot version; unmodified
//! pages and metadata subtrees are shared with older versions. Metadata is
//! a per-version segment tree over page ranges, stored as write-once nodes
//! in a statically partitioned set of metadata stores. A central version
//! manager assigns versions, tracks update ranges and publishes snapshots
//! in strict version order.
//!
//! The crate is organized by role:
//!
//! - [`range`] / [`id`]: identifiers and the page/range arithmetic every
//!   other module is built on.
//! - [`pagestore`]: data providers holding immutable page objects.
//! - [`metastore`]: metadata providers holding write-once tree nodes,
//!   plus the static key-to-store placement.
//! - [`allocator`]: the provider manager balancing page placement.
//! - [`versioner`]: the version manager (total order, publication,
//!   branches).
//! - [`segtree`]: the metadata tree engine (read/build/border logic).
//! - [`client`]: the public blob API composing all services.
//! - [`rpc`]: the wire protocol and the loopback/TCP transports.

pub mod allocator;
pub mod client;
pub mod error;
pub mod id;
pub mod metastore;
pub mod pagestore;
pub mod par;
pub mod range;
pub mod rpc;
pub mod segtree;
pub mod versioner;

pub use error::{Error, Result};
pub use id::{BlobId, PageId, Version};
pub use range::{ByteRange, NodePos, Side};
