//! Shared helpers for the JSON document formats.
//!
//! Every floating-point number is written as a decimal with 17 significant
//! digits, which round-trips any finite `f64` exactly.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

fn number(x: f64) -> serde_json::Number {
    // arbitrary_precision keeps the literal digits.
    serde_json::Number::from_str(&format!("{x:.16e}")).expect("finite f64 formats as a JSON number")
}

pub fn ser_f64<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if !x.is_finite() {
        return Err(serde::ser::Error::custom("non-finite number"));
    }
    number(*x).serialize(s)
}

pub fn ser_vec<S: Serializer>(xs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(xs.len()))?;
    for x in xs {
        if !x.is_finite() {
            return Err(serde::ser::Error::custom("non-finite number"));
        }
        seq.serialize_element(&number(*x))?;
    }
    seq.end()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).map_err(|e| Error::schema(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e))
}

pub(crate) fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::schema(
            path,
            format!("unsupported format_version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

/// Serializes a document to a string using the 17-digit number encoding.
pub fn to_string<T: Serialize>(doc: &T) -> Result<String> {
    serde_json::to_string_pretty(doc).map_err(|e| Error::InvalidParameter(e.to_string()))
}
