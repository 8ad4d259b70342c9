//! Frame codec: fixed field orders per opcode, big-endian integers,
//! u32-length-prefixed byte strings, u16-length-prefixed address strings.

use std::io::Read;

use crate::error::{Error, Result};
use crate::id::{BlobId, PageId, Version, VERSION_NONE};
use crate::metastore::NodeKey;
use crate::versioner::{BlobInfo, BranchChain, ChainLink, ConcurrentUpdate, WriteTicket};
use crate::ByteRange;

/// Hard cap on one frame's payload (opcode + id + fields). Pages larger
/// than this are rejected at blob-creation time.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

pub const OP_PUT_PAGE: u8 = 1;
pub const OP_GET_PAGE: u8 = 2;
pub const OP_USAGE: u8 = 3;
pub const OP_PUT_NODE: u8 = 4;
pub const OP_GET_NODE: u8 = 5;
pub const OP_REGISTER: u8 = 6;
pub const OP_ALLOCATE: u8 = 7;
pub const OP_REPORT: u8 = 8;
pub const OP_CREATE_BLOB: u8 = 9;
pub const OP_ASSIGN_VERSION: u8 = 10;
pub const OP_NOTIFY_SUCCESS: u8 = 11;
pub const OP_GET_RECENT: u8 = 12;
pub const OP_GET_SIZE: u8 = 13;
pub const OP_WAIT_PUBLISHED: u8 = 14;
pub const OP_BRANCH: u8 = 15;
pub const OP_BLOB_INFO: u8 = 16;
pub const OP_ERROR: u8 = 127;

/// Whether an update replaces a given range or extends the blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Write,
    Append,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    PutPage { pid: PageId, bytes: Vec<u8> },
    GetPage { pid: PageId, offset: u64, len: u64 },
    Usage,
    PutNode { key: NodeKey, node: Vec<u8> },
    GetNode { key: NodeKey },
    Register { addr: String },
    Allocate { n: u32 },
    Report { addr: String, pages: u64 },
    CreateBlob { psize: u64 },
    AssignVersion { blob: BlobId, kind: UpdateKind, offset: u64, size: u64 },
    NotifySuccess { blob: BlobId, version: Version },
    GetRecent { blob: BlobId },
    GetSize { blob: BlobId, version: Version },
    WaitPublished { blob: BlobId, version: Version, timeout_ms: u64 },
    Branch { blob: BlobId, version: Version },
    BlobInfo { blob: BlobId },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    PutPage,
    GetPage { bytes: Vec<u8> },
    Usage { pages: u64, bytes: u64 },
    PutNode,
    GetNode { node: Vec<u8> },
    Register,
    Allocate { providers: Vec<String> },
    Report,
    CreateBlob { blob: BlobId },
    AssignVersion { ticket: WriteTicket },
    NotifySuccess,
    GetRecent { version: Version },
    GetSize { size: u64 },
    WaitPublished,
    Branch { blob: BlobId },
    BlobInfo { info: BlobInfo },
    Error { code: u8, message: String },
}

impl Reply {
    pub fn from_error(e: &Error) -> Reply {
        Reply::Error {
            code: e.code(),
            message: e.wire_message(),
        }
    }

    /// Convert a reply that was not the expected success variant into an
    /// error: ERROR replies map back to their original error, anything
    /// else is a protocol violation.
    pub fn into_unexpected(self, context: &str) -> Error {
        match self {
            Reply::Error { code, message } => Error::from_wire(code, &message),
            other => Error::Protocol(format!("unexpected reply to {context}: {other:?}")),
        }
    }
}

fn malformed(what: &str) -> Error {
    Error::Malformed(format!("frame decode: {what}"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(malformed("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob_id(&mut self) -> Result<BlobId> {
        Ok(BlobId::from_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn page_id(&mut self) -> Result<PageId> {
        Ok(PageId::from_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn node_key(&mut self) -> Result<NodeKey> {
        NodeKey::from_bytes(self.take(40)?.try_into().unwrap())
    }

    fn bytes_u32(&mut self) -> Result<Vec<u8>> {
        let len = self.u32()? as usize;
        if len > MAX_FRAME {
            return Err(malformed("byte string exceeds frame limit"));
        }
        Ok(self.take(len)?.to_vec())
    }

    fn str_u16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        std::str::from_utf8(raw)
            .map(str::to_string)
            .map_err(|_| malformed("string not utf-8"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(())
    }
}

fn put_bytes_u32(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

fn put_str_u16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn frame(opcode: u8, request_id: u64, fields: Vec<u8>) -> Vec<u8> {
    let payload_len = 1 + 8 + fields.len();
    let mut out = Vec::with_capacity(4 + payload_len);
    out.extend_from_slice(&(payload_len as u32).to_be_bytes());
    out.push(opcode);
    out.extend_from_slice(&request_id.to_be_bytes());
    out.extend_from_slice(&fields);
    out
}

/// Encode a request as a complete frame (length prefix included).
pub fn encode_request(request_id: u64, req: &Request) -> Vec<u8> {
    let mut f = Vec::new();
    let opcode = match req {
        Request::PutPage { pid, bytes } => {
            f.extend_from_slice(&pid.to_bytes());
            put_bytes_u32(&mut f, bytes);
            OP_PUT_PAGE
        }
        Request::GetPage { pid, offset, len } => {
            f.extend_from_slice(&pid.to_bytes());
            f.extend_from_slice(&offset.to_be_bytes());
            f.extend_from_slice(&len.to_be_bytes());
            OP_GET_PAGE
        }
        Request::Usage => OP_USAGE,
        Request::PutNode { key, node } => {
            f.extend_from_slice(&key.to_bytes());
            put_bytes_u32(&mut f, node);
            OP_PUT_NODE
        }
        Request::GetNode { key } => {
            f.extend_from_slice(&key.to_bytes());
            OP_GET_NODE
        }
        Request::Register { addr } => {
            put_str_u16(&mut f, addr);
            OP_REGISTER
        }
        Request::Allocate { n } => {
            f.extend_from_slice(&n.to_be_bytes());
            OP_ALLOCATE
        }
        Request::Report { addr, pages } => {
            put_str_u16(&mut f, addr);
            f.extend_from_slice(&pages.to_be_bytes());
            OP_REPORT
        }
        Request::CreateBlob { psize } => {
            f.extend_from_slice(&psize.to_be_bytes());
            OP_CREATE_BLOB
        }
        Request::AssignVersion {
            blob,
            kind,
            offset,
            size,
        } => {
            f.extend_from_slice(&blob.to_bytes());
            f.push(match kind {
                UpdateKind::Write => 0,
                UpdateKind::Append => 1,
            });
            f.extend_from_slice(&offset.to_be_bytes());
            f.extend_from_slice(&size.to_be_bytes());
            OP_ASSIGN_VERSION
        }
        Request::NotifySuccess { blob, version } => {
            f.extend_from_slice(&blob.to_bytes());
            f.extend_from_slice(&version.to_be_bytes());
            OP_NOTIFY_SUCCESS
        }
        Request::GetRecent { blob } => {
            f.extend_from_slice(&blob.to_bytes());
            OP_GET_RECENT
        }
        Request::GetSize { blob, version } => {
            f.extend_from_slice(&blob.to_bytes());
            f.extend_from_slice(&version.to_be_bytes());
            OP_GET_SIZE
        }
        Request::WaitPublished {
            blob,
            version,
            timeout_ms,
        } => {
            f.extend_from_slice(&blob.to_bytes());
            f.extend_from_slice(&version.to_be_bytes());
            f.extend_from_slice(&timeout_ms.to_be_bytes());
            OP_WAIT_PUBLISHED
        }
        Request::Branch { blob, version } => {
            f.extend_from_slice(&blob.to_bytes());
            f.extend_from_slice(&version.to_be_bytes());
            OP_BRANCH
        }
        Request::BlobInfo { blob } => {
            f.extend_from_slice(&blob.to_bytes());
            OP_BLOB_INFO
        }
    };
    frame(opcode, request_id, f)
}

/// Decode a request payload (everything after the length prefix).
pub fn decode_request(payload: &[u8]) -> Result<(u64, Request)> {
    let mut r = Reader::new(payload);
    let opcode = r.u8()?;
    let id = r.u64()?;
    let req = match opcode {
        OP_PUT_PAGE => Request::PutPage {
            pid: r.page_id()?,
            bytes: r.bytes_u32()?,
        },
        OP_GET_PAGE => Request::GetPage {
            pid: r.page_id()?,
            offset: r.u64()?,
            len: r.u64()?,
        },
        OP_USAGE => Request::Usage,
        OP_PUT_NODE => Request::PutNode {
            key: r.node_key()?,
            node: r.bytes_u32()?,
        },
        OP_GET_NODE => Request::GetNode { key: r.node_key()? },
        OP_REGISTER => Request::Register { addr: r.str_u16()? },
        OP_ALLOCATE => Request::Allocate { n: r.u32()? },
        OP_REPORT => Request::Report {
            addr: r.str_u16()?,
            pages: r.u64()?,
        },
        OP_CREATE_BLOB => Request::CreateBlob { psize: r.u64()? },
        OP_ASSIGN_VERSION => Request::AssignVersion {
            blob: r.blob_id()?,
            kind: match r.u8()? {
                0 => UpdateKind::Write,
                1 => UpdateKind::Append,
                k => return Err(malformed(&format!("bad update kind {k}"))),
            },
            offset: r.u64()?,
            size: r.u64()?,
        },
        OP_NOTIFY_SUCCESS => Request::NotifySuccess {
            blob: r.blob_id()?,
            version: r.u64()?,
        },
        OP_GET_RECENT => Request::GetRecent { blob: r.blob_id()? },
        OP_GET_SIZE => Request::GetSize {
            blob: r.blob_id()?,
            version: r.u64()?,
        },
        OP_WAIT_PUBLISHED => Request::WaitPublished {
            blob: r.blob_id()?,
            version: r.u64()?,
            timeout_ms: r.u64()?,
        },
        OP_BRANCH => Request::Branch {
            blob: r.blob_id()?,
            version: r.u64()?,
        },
        OP_BLOB_INFO => Request::BlobInfo { blob: r.blob_id()? },
        _ => return Err(Error::Unsupported),
    };
    r.finish()?;
    Ok((id, req))
}

/// Encode a reply as a complete frame. Replies reuse the request opcode.
pub fn encode_reply(request_id: u64, rep: &Reply) -> Vec<u8> {
    let mut f = Vec::new();
    let opcode = match rep {
        Reply::PutPage => OP_PUT_PAGE,
        Reply::GetPage { bytes } => {
            put_bytes_u32(&mut f, bytes);
            OP_GET_PAGE
        }
        Reply::Usage { pages, bytes } => {
            f.extend_from_slice(&pages.to_be_bytes());
            f.extend_from_slice(&bytes.to_be_bytes());
            OP_USAGE
        }
        Reply::PutNode => OP_PUT_NODE,
        Reply::GetNode { node } => {
            put_bytes_u32(&mut f, node);
            OP_GET_NODE
        }
        Reply::Register => OP_REGISTER,
        Reply::Allocate { providers } => {
            f.extend_from_slice(&(providers.len() as u32).to_be_bytes());
            for p in providers {
                put_str_u16(&mut f, p);
            }
            OP_ALLOCATE
        }
        Reply::Report => OP_REPORT,
        Reply::CreateBlob { blob } => {
            f.extend_from_slice(&blob.to_bytes());
            OP_CREATE_BLOB
        }
        Reply::AssignVersion { ticket } => {
            f.extend_from_slice(&ticket.vw.to_be_bytes());
            f.extend_from_slice(&ticket.effective_offset.to_be_bytes());
            f.extend_from_slice(&ticket.prev_size.to_be_bytes());
            f.extend_from_slice(&ticket.vp.to_be_bytes());
            f.extend_from_slice(&ticket.vp_size.to_be_bytes());
            f.extend_from_slice(&(ticket.concurrent.len() as u16).to_be_bytes());
            for c in &ticket.concurrent {
                f.extend_from_slice(&c.version.to_be_bytes());
                f.extend_from_slice(&c.range.offset.to_be_bytes());
                f.extend_from_slice(&c.range.size.to_be_bytes());
                f.extend_from_slice(&c.root_pages.to_be_bytes());
            }
            OP_ASSIGN_VERSION
        }
        Reply::NotifySuccess => OP_NOTIFY_SUCCESS,
        Reply::GetRecent { version } => {
            f.extend_from_slice(&version.to_be_bytes());
            OP_GET_RECENT
        }
        Reply::GetSize { size } => {
            f.extend_from_slice(&size.to_be_bytes());
            OP_GET_SIZE
        }
        Reply::WaitPublished => OP_WAIT_PUBLISHED,
        Reply::Branch { blob } => {
            f.extend_from_slice(&blob.to_bytes());
            OP_BRANCH
        }
        Reply::BlobInfo { info } => {
            f.extend_from_slice(&info.psize.to_be_bytes());
            f.extend_from_slice(&(info.chain.links().len() as u16).to_be_bytes());
            for link in info.chain.links() {
                f.extend_from_slice(&link.blob.to_bytes());
                f.extend_from_slice(&link.fork.unwrap_or(VERSION_NONE).to_be_bytes());
            }
            OP_BLOB_INFO
        }
        Reply::Error { code, message } => {
            f.push(*code);
            put_str_u16(&mut f, message);
            OP_ERROR
        }
    };
    frame(opcode, request_id, f)
}

/// Decode a reply payload (everything after the length prefix).
pub fn decode_reply(payload: &[u8]) -> Result<(u64, Reply)> {
    let mut r = Reader::new(payload);
    let opcode = r.u8()?;
    let id = r.u64()?;
    let rep = match opcode {
        OP_PUT_PAGE => Reply::PutPage,
        OP_GET_PAGE => Reply::GetPage {
            bytes: r.bytes_u32()?,
        },
        OP_USAGE => Reply::Usage {
            pages: r.u64()?,
            bytes: r.u64()?,
        },
        OP_PUT_NODE => Reply::PutNode,
        OP_GET_NODE => Reply::GetNode {
            node: r.bytes_u32()?,
        },
        OP_REGISTER => Reply::Register,
        OP_ALLOCATE => {
            let n = r.u32()? as usize;
            if n > MAX_FRAME / 2 {
                return Err(malformed("allocate count"));
            }
            let mut providers = Vec::with_capacity(n.min(4096));
            for _ in 0..n {
                providers.push(r.str_u16()?);
            }
            Reply::Allocate { providers }
        }
        OP_REPORT => Reply::Report,
        OP_CREATE_BLOB => Reply::CreateBlob { blob: r.blob_id()? },
        OP_ASSIGN_VERSION => {
            let vw = r.u64()?;
            let effective_offset = r.u64()?;
            let prev_size = r.u64()?;
            let vp = r.u64()?;
            let vp_size = r.u64()?;
            let n = r.u16()? as usize;
            let mut concurrent = Vec::with_capacity(n);
            for _ in 0..n {
                concurrent.push(ConcurrentUpdate {
                    version: r.u64()?,
                    range: ByteRange::new(r.u64()?, r.u64()?),
                    root_pages: r.u64()?,
                });
            }
            Reply::AssignVersion {
                ticket: WriteTicket {
                    vw,
                    effective_offset,
                    prev_size,
                    vp,
                    vp_size,
                    concurrent,
                },
            }
        }
        OP_NOTIFY_SUCCESS => Reply::NotifySuccess,
        OP_GET_RECENT => Reply::GetRecent { version: r.u64()? },
        OP_GET_SIZE => Reply::GetSize { size: r.u64()? },
        OP_WAIT_PUBLISHED => Reply::WaitPublished,
        OP_BRANCH => Reply::Branch { blob: r.blob_id()? },
        OP_BLOB_INFO => {
            let psize = r.u64()?;
            let n = r.u16()? as usize;
            let mut links = Vec::with_capacity(n);
            for _ in 0..n {
                let blob = r.blob_id()?;
                let fork = r.u64()?;
                links.push(ChainLink {
                    blob,
                    fork: (fork != VERSION_NONE).then_some(fork),
                });
            }
            Reply::BlobInfo {
                info: BlobInfo {
                    psize,
                    chain: BranchChain::new(links)?,
                },
            }
        }
        OP_ERROR => Reply::Error {
            code: r.u8()?,
            message: r.str_u16()?,
        },
        t => return Err(malformed(&format!("unknown reply opcode {t}"))),
    };
    r.finish()?;
    Ok((id, rep))
}

/// Best-effort request id extraction from a payload, used to echo ids on
/// frames that fail to decode.
pub fn request_id_of(payload: &[u8]) -> Option<u64> {
    if payload.len() < 9 {
        return None;
    }
    Some(u64::from_be_bytes(payload[1..9].try_into().unwrap()))
}

/// Read one frame's payload from a stream. An error here means the stream
/// is unusable (framing lost or peer gone) and must be closed.
pub fn read_frame(stream: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf) as usize;
    if len < 1 || len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame length {len} out of bounds"),
        ));
    }
    let mut payload = vec![0u8; len];
    stream.read_exact(&mut payload)?;
    Ok(payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::range::NodePos;
    use rand::{Rng, SeedableRng};

    fn sample_requests() -> Vec<Request> {
        vec![
            Request::PutPage {
                pid: PageId(1),
                bytes: vec![1, 2, 3],
            },
            Request::GetPage {
                pid: PageId(2),
                offset: 100,
                len: 24,
            },
            Request::Usage,
            Request::PutNode {
                key: NodeKey::new(BlobId(3), 1, NodePos::new(0, 2)),
                node: vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 255, 255, 255, 255, 255, 255, 255, 255],
            },
            Request::GetNode {
                key: NodeKey::new(BlobId(3), 7, NodePos::new(4, 4)),
            },
            Request::Register {
                addr: "127.0.0.1:9000".into(),
            },
            Request::Allocate { n: 12 },
            Request::Report {
                addr: "mem:p0".into(),
                pages: 42,
            },
            Request::CreateBlob { psize: 65536 },
            Request::AssignVersion {
                blob: BlobId(9),
                kind: UpdateKind::Append,
                offset: 0,
                size: 4096,
            },
            Request::NotifySuccess {
                blob: BlobId(9),
                version: 3,
            },
            Request::GetRecent { blob: BlobId(9) },
            Request::GetSize {
                blob: BlobId(9),
                version: 2,
            },
            Request::WaitPublished {
                blob: BlobId(9),
                version: 5,
                timeout_ms: 0,
            },
            Request::Branch {
                blob: BlobId(9),
                version: 2,
            },
            Request::BlobInfo { blob: BlobId(9) },
        ]
    }

    fn sample_replies() -> Vec<Reply> {
        vec![
            Reply::PutPage,
            Reply::GetPage { bytes: vec![9; 77] },
            Reply::Usage {
                pages: 3,
                bytes: 3072,
            },
            Reply::PutNode,
            Reply::GetNode {
                node: vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 255, 255, 255, 255, 255, 255, 255, 255],
            },
            Reply::Register,
            Reply::Allocate {
                providers: vec!["a".into(), "b".into(), "a".into()],
            },
            Reply::Report,
            Reply::CreateBlob { blob: BlobId(11) },
            Reply::AssignVersion {
                ticket: WriteTicket {
                    vw: 4,
                    effective_offset: 1024,
                    prev_size: 8192,
                    vp: 1,
                    vp_size: 4096,
                    concurrent: vec![
                        ConcurrentUpdate {
                            version: 2,
                            range: ByteRange::new(0, 2048),
                            root_pages: 8,
                        },
                        ConcurrentUpdate {
                            version: 3,
                            range: ByteRange::new(4096, 4096),
                            root_pages: 8,
                        },
                    ],
                },
            },
            Reply::NotifySuccess,
            Reply::GetRecent { version: 17 },
            Reply::GetSize { size: 123456 },
            Reply::WaitPublished,
            Reply::Branch { blob: BlobId(12) },
            Reply::BlobInfo {
                info: BlobInfo {
                    psize: 1024,
                    chain: BranchChain::new(vec![
                        ChainLink {
                            blob: BlobId(13),
                            fork: Some(2),
                        },
                        ChainLink {
                            blob: BlobId(14),
                            fork: None,
                        },
                    ])
                    .unwrap(),
                },
            },
            Reply::Error {
                code: 2,
                message: String::new(),
            },
        ]
    }

    #[test]
    fn request_round_trip() {
        for (i, req) in sample_requests().into_iter().enumerate() {
            let id = 1000 + i as u64;
            let framed = encode_request(id, &req);
            let (got_id, got) = decode_request(&framed[4..]).unwrap();
            assert_eq!(got_id, id);
            assert_eq!(got, req);
        }
    }

    #[test]
    fn reply_round_trip() {
        for (i, rep) in sample_replies().into_iter().enumerate() {
            let id = 2000 + i as u64;
            let framed = encode_reply(id, &rep);
            let (got_id, got) = decode_reply(&framed[4..]).unwrap();
            assert_eq!(got_id, id);
            assert_eq!(got, rep);
        }
    }

    #[test]
    fn truncated_frames_are_malformed() {
        for req in sample_requests() {
            let framed = encode_request(1, &req);
            let payload = &framed[4..];
            for cut in 0..payload.len() {
                let res = decode_request(&payload[..cut]);
                assert!(res.is_err(), "truncated {req:?} at {cut} decoded");
            }
        }
    }

    #[test]
    fn unknown_opcode_is_unsupported() {
        let mut payload = vec![99u8];
        payload.extend_from_slice(&7u64.to_be_bytes());
        assert_eq!(decode_request(&payload), Err(Error::Unsupported));
    }

    #[test]
    fn fuzzed_frames_never_panic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xf00d);
        for _ in 0..10_000 {
            let len = rng.gen_range(0..512);
            let mut payload = vec![0u8; len];
            rng.fill(payload.as_mut_slice());
            // bias half of the frames toward valid opcodes
            if len > 0 && rng.gen_bool(0.5) {
                payload[0] = rng.gen_range(0..20);
            }
            let _ = decode_request(&payload);
            let _ = decode_reply(&payload);
        }
    }

    #[test]
    fn request_id_recoverable() {
        let framed = encode_request(0xdead_beef, &Request::Usage);
        assert_eq!(request_id_of(&framed[4..]), Some(0xdead_beef));
        assert_eq!(request_id_of(&[1, 2]), None);
    }
}
