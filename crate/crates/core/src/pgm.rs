//! Binary PGM (P5) reader and writer, maxval 255.
//!
//! The writer emits the canonical minimal header with no comments; the
//! reader tolerates `#` comments and arbitrary whitespace between header
//! tokens. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::image::GrayImage;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("pgm: {0} at byte {1}")]
    Malformed(String, usize),
    #[error("pgm: maxval {0} unsupported (only 255) at byte {1}")]
    BadMaxval(u64, usize),
    #[error("pgm: payload truncated, expected {expected} bytes, found {found} (payload starts at byte {offset})")]
    Truncated {
        expected: usize,
        found: usize,
        offset: usize,
    },
    #[error("pgm: io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("pgm: {0}")]
    Image(#[from] crate::image::ImageError),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self) -> Result<u64, PgmError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(PgmError::Malformed(
                "expected decimal number".to_string(),
                start,
            ));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse::<u64>()
            .map_err(|_| PgmError::Malformed("number out of range".to_string(), start))
    }
}

/// Parses a P5 document from bytes.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(PgmError::Malformed("missing P5 magic".to_string(), 0));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.read_number()? as usize;
    let height = cur.read_number()? as usize;
    let maxval_pos = {
        cur.skip_whitespace_and_comments();
        cur.pos
    };
    let maxval = {
        let mut c = Cursor {
            bytes,
            pos: maxval_pos,
        };
        let v = c.read_number()?;
        cur.pos = c.pos;
        v
    };
    if maxval != 255 {
        return Err(PgmError::BadMaxval(maxval, maxval_pos));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(PgmError::Malformed(
            "expected single whitespace before payload".to_string(),
            cur.pos,
        ));
    }
    cur.pos += 1;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| PgmError::Malformed("dimension overflow".to_string(), 2))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            found: payload.len(),
            offset: cur.pos,
        });
    }
    if payload.len() > expected {
        return Err(PgmError::Malformed(
            format!("trailing {} bytes after payload", payload.len() - expected),
            cur.pos + expected,
        ));
    }
    Ok(GrayImage::new(width, height, payload.to_vec())?)
}

/// Canonical P5 byte encoding.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.pixels().len() + 20);
    write!(out, "P5\n{} {}\n255\n", img.width(), img.height()).expect("vec write");
    out.extend_from_slice(img.pixels());
    out
}

pub fn load_pgm(path: &Path) -> Result<GrayImage, PgmError> {
    parse_pgm(&fs::read(path)?)
}

pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<(), PgmError> {
    Ok(fs::write(path, encode_pgm(img))?)
}
