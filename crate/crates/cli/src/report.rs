use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::Formatter;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Compact JSON whose floats always carry 17 significant digits, so equal
/// values always print as equal text.
struct FixedFloats;

impl Formatter for FixedFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{}", fmt_f64(value))
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn fmt_f64(value: f64) -> String {
    format!("{value:.16e}")
}

pub fn to_json(value: &impl Serialize) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloats);
    value
        .serialize(&mut ser)
        .map_err(|e| CliError::Io(format!("serializing report: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

/// Writes to `path`, or stdout when absent.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, bytes)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", p.display()))),
        None => io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::Io(format!("writing stdout: {e}"))),
    }
}

/// SHA-256 of the canonical JSON text of the effective config.
pub fn config_hash(config: &impl Serialize) -> Result<String, CliError> {
    let digest = Sha256::digest(to_json(config)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub const CSV_VERSION_LINE: &str = "# geomlens-sweep v1";

/// CSV with the version comment line, a header and numeric rows.
pub fn to_csv(header: &[&str], rows: &[Vec<f64>]) -> Result<Vec<u8>, CliError> {
    let mut out = format!("{CSV_VERSION_LINE}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let io_err = |e: csv::Error| CliError::Io(format!("writing csv: {e}"));
        w.write_record(header).map_err(io_err)?;
        for row in rows {
            w.write_record(row.iter().map(|v| fmt_f64(*v)))
                .map_err(io_err)?;
        }
        w.flush()
            .map_err(|e| CliError::Io(format!("writing csv: {e}")))?;
    }
    Ok(out)
}
