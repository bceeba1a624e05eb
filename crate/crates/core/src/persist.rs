//! Flat text format shared by models and twists.
//!
//! ```text
//! tsmc-flat 1
//! kind tabular
//! vocab 2
//! order 2
//! generation 0
//! params 6
//! -0.6931471805599453
//! ...
//! ```
//!
//! Parameters are written in Rust's shortest round-trip float notation, so a
//! save/load cycle is bit-exact.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

const MAGIC: &str = "tsmc-flat 1";

/// Ordered `key value` header lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_owned(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Parse(format!("missing header field {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Parse(format!("bad value {raw:?} for header field {key:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatFile {
    pub kind: String,
    pub header: Header,
    pub params: Vec<f64>,
}

impl FlatFile {
    pub fn new(kind: &str, header: Header, params: Vec<f64>) -> Self {
        Self {
            kind: kind.to_owned(),
            header,
            params,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "kind {}", self.kind)?;
        for (k, v) in &self.header.entries {
            writeln!(w, "{k} {v}")?;
        }
        writeln!(w, "params {}", self.params.len())?;
        for p in &self.params {
            writeln!(w, "{p:?}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of file".into()))?
                .map_err(Error::from)
        };
        if next()?.trim() != MAGIC {
            return Err(Error::Parse("not a tsmc flat file".into()));
        }
        let kind_line = next()?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::Parse("missing kind line".into()))?
            .trim()
            .to_owned();
        let mut header = Header::new();
        let count = loop {
            let line = next()?;
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("malformed header line {line:?}")))?;
            if k == "params" {
                break v
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse("bad parameter count".into()))?;
            }
            header.push(k, v.trim());
        };
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?;
            params.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad parameter {line:?}")))?,
            );
        }
        Ok(Self { kind, header, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn params_round_trip_bit_exact(params in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..50)) {
            let mut h = Header::new();
            h.push("vocab", 3);
            let f = FlatFile::new("twist", h, params);
            let mut buf = Vec::new();
            f.write(&mut buf).unwrap();
            let back = FlatFile::read(&buf[..]).unwrap();
            prop_assert_eq!(back.params.len(), f.params.len());
            for (a, b) in back.params.iter().zip(&f.params) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.header, f.header);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(FlatFile::read(&b"hello\n"[..]).is_err());
        assert!(FlatFile::read(&b"tsmc-flat 1\nkind x\nparams 2\n1.0\n"[..]).is_err());
    }
}
