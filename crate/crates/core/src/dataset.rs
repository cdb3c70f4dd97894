//! JSON Lines episode files, one episode per line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};

use crate::error::{Error, Result};
use crate::synthgen::ObservationSequence;

/// Compact JSON with every float written to 17 significant digits.
struct FullPrecision;

impl Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if !value.is_finite() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("cannot serialize non-finite value {value}"),
            ));
        }
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes `value` as one compact line using the full-precision float format.
pub fn to_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(&mut buf, FullPrecision);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Io(io::Error::new(io::ErrorKind::InvalidData, e)))?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

pub fn write_dataset_to<W: Write>(episodes: &[ObservationSequence], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for ep in episodes {
        out.write_all(to_line(ep)?.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(episodes: &[ObservationSequence], path: &Path) -> Result<()> {
    write_dataset_to(episodes, File::create(path)?)
}

/// Reads episodes; blank lines are skipped. Errors carry 1-based line numbers.
pub fn read_dataset_from<R: BufRead>(input: R) -> Result<Vec<ObservationSequence>> {
    let mut episodes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: ObservationSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        ep.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        episodes.push(ep);
    }
    Ok(episodes)
}

pub fn read_dataset(path: &Path) -> Result<Vec<ObservationSequence>> {
    read_dataset_from(BufReader::new(File::open(path)?))
}
