//! Identifier types.
//!
//! Blob and page ids are 128-bit random values; uniqueness by entropy,
//! no coordination. Versions are plain integers assigned consecutively
//! per blob by the version manager, with 0 denoting the empty snapshot.

use std::fmt;

use crate::error::{Error, Result};

/// Snapshot version number. Version 0 is the empty snapshot every blob
/// starts with; updates are assigned 1, 2, 3, ... in total order.
pub type Version = u64;

/// Sentinel used on the wire (and in node encodings) for "no version".
pub const VERSION_NONE: u64 = u64::MAX;

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub u128);

        impl $name {
            pub fn random() -> Self {
                Self(rand::random::<u128>())
            }

            pub fn to_hex(self) -> String {
                format!("{:032x}", self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self> {
                if s.len() != 32 {
                    return Err(Error::Malformed(format!(
                        "expected 32 hex chars, got {}",
                        s.len()
                    )));
                }
                u128::from_str_radix(s, 16)
                    .map(Self)
                    .map_err(|e| Error::Malformed(format!("bad id: {e}")))
            }

            pub fn to_bytes(self) -> [u8; 16] {
                self.0.to_be_bytes()
            }

            pub fn from_bytes(b: [u8; 16]) -> Self {
                Self(u128::from_be_bytes(b))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:032x}", self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                // Short prefix keeps assertion output readable.
                write!(f, concat!(stringify!($name), "({:.8})"), self.to_hex())
            }
        }
    };
}

id_type! {
    /// Globally unique blob identifier.
    BlobId
}

id_type! {
    /// Globally unique identifier of one stored page object. Never reused.
    PageId
}
