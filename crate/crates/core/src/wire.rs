//! Length-prefixed frame codec.
//!
//! Requests are arrays of bulk strings:
//!
//! ```text
//! *<n>\r\n
//! $<len>\r\n<bytes>\r\n      (n times)
//! ```
//!
//! Replies are one of `+OK\r\n`, `:<int>\r\n`, `-ERR <msg>\r\n`, or an array
//! frame in the request format. Frames carry no sequence numbers: replies
//! are matched to requests purely by order, which is what makes pipelining
//! work.

use std::io::{self, BufRead, Read, Write};

use thiserror::Error;

/// Largest bulk string the codec will buffer. Commands apply their own,
/// smaller payload limits on top.
pub const MAX_BULK_LEN: usize = 16 * 1024 * 1024;
pub const MAX_ARRAY_LEN: usize = 1 << 20;
const MAX_HEADER_LINE: u64 = 64;

#[derive(Debug, Error)]
pub enum FrameError {
    /// The stream is still aligned on a line boundary; the peer may continue.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The stream can no longer be resynchronized.
    #[error("fatal protocol error: {0}")]
    Fatal(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Ok,
    Int(i64),
    Err(String),
    Array(Vec<Vec<u8>>),
}

impl Reply {
    pub fn err(msg: impl Into<String>) -> Self {
        Reply::Err(msg.into())
    }
}

/// Reads one `\r\n`-terminated header line. `Ok(None)` on clean EOF.
fn read_header<R: BufRead>(r: &mut R, buf: &mut Vec<u8>) -> Result<Option<()>, FrameError> {
    buf.clear();
    let n = Read::take(&mut *r, MAX_HEADER_LINE).read_until(b'\n', buf)?;
    if n == 0 {
        return Ok(None);
    }
    if !buf.ends_with(b"\r\n") {
        if buf.last() == Some(&b'\n') {
            return Err(FrameError::Protocol("header line must end with CRLF".into()));
        }
        if (n as u64) < MAX_HEADER_LINE {
            return Err(FrameError::Io(io::ErrorKind::UnexpectedEof.into()));
        }
        return Err(FrameError::Fatal("header line too long".into()));
    }
    buf.truncate(buf.len() - 2);
    Ok(Some(()))
}

fn parse_len(line: &[u8], prefix: u8, what: &str, max: usize) -> Result<usize, FrameError> {
    if line.first() != Some(&prefix) {
        return Err(FrameError::Protocol(format!("expected {what} header `{}`", prefix as char)));
    }
    let n: usize = std::str::from_utf8(&line[1..])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| FrameError::Protocol(format!("invalid {what} length")))?;
    if n > max {
        return Err(FrameError::Fatal(format!("{what} length {n} exceeds {max}")));
    }
    Ok(n)
}

fn read_bulk_strings(r: &mut impl BufRead, n: usize, line: &mut Vec<u8>) -> Result<Vec<Vec<u8>>, FrameError> {
    let mut items = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        if read_header(r, line)?.is_none() {
            return Err(FrameError::Io(io::ErrorKind::UnexpectedEof.into()));
        }
        let len = parse_len(line, b'$', "bulk", MAX_BULK_LEN)?;
        let mut data = vec![0u8; len + 2];
        r.read_exact(&mut data)?;
        if &data[len..] != b"\r\n" {
            return Err(FrameError::Fatal("bulk string not terminated by CRLF".into()));
        }
        data.truncate(len);
        items.push(data);
    }
    Ok(items)
}

/// Reads one request frame. `Ok(None)` on clean EOF before a frame starts.
pub fn read_request(r: &mut impl BufRead) -> Result<Option<Vec<Vec<u8>>>, FrameError> {
    let mut line = Vec::with_capacity(MAX_HEADER_LINE as usize);
    if read_header(r, &mut line)?.is_none() {
        return Ok(None);
    }
    let n = parse_len(&line, b'*', "array", MAX_ARRAY_LEN)?;
    read_bulk_strings(r, n, &mut line).map(Some)
}

pub fn encode_request<A: AsRef<[u8]>>(args: &[A], out: &mut Vec<u8>) {
    out.extend_from_slice(format!("*{}\r\n", args.len()).as_bytes());
    for a in args {
        encode_bulk(a.as_ref(), out);
    }
}

fn encode_bulk(a: &[u8], out: &mut Vec<u8>) {
    out.push(b'$');
    out.extend_from_slice(a.len().to_string().as_bytes());
    out.extend_from_slice(b"\r\n");
    out.extend_from_slice(a);
    out.extend_from_slice(b"\r\n");
}

pub fn encode_reply(reply: &Reply, out: &mut Vec<u8>) {
    match reply {
        Reply::Ok => out.extend_from_slice(b"+OK\r\n"),
        Reply::Int(i) => {
            out.push(b':');
            out.extend_from_slice(i.to_string().as_bytes());
            out.extend_from_slice(b"\r\n");
        }
        Reply::Err(msg) => {
            out.extend_from_slice(b"-ERR ");
            // Error text is a single line.
            out.extend(msg.bytes().map(|b| if b == b'\r' || b == b'\n' { b' ' } else { b }));
            out.extend_from_slice(b"\r\n");
        }
        Reply::Array(items) => encode_request(items, out),
    }
}

pub fn write_reply(w: &mut impl Write, reply: &Reply) -> io::Result<()> {
    let mut buf = Vec::new();
    encode_reply(reply, &mut buf);
    w.write_all(&buf)
}

/// Reads one reply frame.
pub fn read_reply(r: &mut impl BufRead) -> Result<Reply, FrameError> {
    let mut line = Vec::with_capacity(MAX_HEADER_LINE as usize);
    // Error replies may carry longer messages than the header limit allows.
    line.clear();
    let n = r.read_until(b'\n', &mut line)?;
    if n == 0 {
        return Err(FrameError::Io(io::ErrorKind::UnexpectedEof.into()));
    }
    if !line.ends_with(b"\r\n") {
        return Err(FrameError::Fatal("reply line must end with CRLF".into()));
    }
    line.truncate(line.len() - 2);
    match line.first() {
        Some(b'+') if &line[1..] == b"OK" => Ok(Reply::Ok),
        Some(b':') => std::str::from_utf8(&line[1..])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(Reply::Int)
            .ok_or_else(|| FrameError::Fatal("invalid integer reply".into())),
        Some(b'-') => {
            let text = String::from_utf8_lossy(&line[1..]).into_owned();
            Ok(Reply::Err(text.strip_prefix("ERR ").map(str::to_owned).unwrap_or(text)))
        }
        Some(b'*') => {
            let n = parse_len(&line, b'*', "array", MAX_ARRAY_LEN)?;
            read_bulk_strings(r, n, &mut line).map(Reply::Array)
        }
        _ => Err(FrameError::Fatal(format!("unexpected reply line {:?}", String::from_utf8_lossy(&line)))),
    }
}
