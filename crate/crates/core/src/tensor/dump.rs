//! Tensor dump format: a flat little-endian value stream plus a text
//! manifest with one `name shape dtype offset` line per tensor. Shapes are
//! written as `AxB`, offsets in bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Scalar, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct DumpEntry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
}

fn io_err(path: &Path, e: std::io::Error) -> TensorError {
    TensorError::Invalid(format!("{}: {e}", path.display()))
}

/// Write `entries` to `bin` (values) and `manifest` (text index).
pub fn write_dump<F: Scalar>(
    bin: &Path,
    manifest: &Path,
    entries: &[(&str, &Tensor<F>)],
) -> Result<(), TensorError> {
    let mut bytes = Vec::new();
    let mut text = String::new();
    for (name, t) in entries {
        if name.contains(char::is_whitespace) {
            return Err(TensorError::Invalid(format!(
                "tensor name {name:?} contains whitespace"
            )));
        }
        let shape = t
            .shape()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("x");
        text.push_str(&format!("{name} {shape} {} {}\n", F::DTYPE, bytes.len()));
        for v in t.data() {
            v.write_le(&mut bytes);
        }
    }
    fs::File::create(bin)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| io_err(bin, e))?;
    fs::write(manifest, text).map_err(|e| io_err(manifest, e))?;
    Ok(())
}

/// Read a dump written by [`write_dump`]. The manifest dtype must match `F`.
pub fn read_dump<F: Scalar>(bin: &Path, manifest: &Path) -> Result<Vec<DumpEntry<F>>, TensorError> {
    let bytes = fs::read(bin).map_err(|e| io_err(bin, e))?;
    let text = fs::read_to_string(manifest).map_err(|e| io_err(manifest, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| {
            TensorError::Invalid(format!(
                "{}:{}: {msg}: {line:?}",
                manifest.display(),
                lineno + 1
            ))
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, dtype, offset] = fields.as_slice() else {
            return Err(bad("expected `name shape dtype offset`"));
        };
        if *dtype != F::DTYPE {
            return Err(bad(&format!("dtype {dtype} but reader expects {}", F::DTYPE)));
        }
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| bad("malformed shape"))?;
        let offset: usize = offset.parse().map_err(|_| bad("malformed offset"))?;
        let count: usize = shape.iter().product();
        let end = offset + count * F::BYTES;
        if end > bytes.len() {
            return Err(bad("tensor extends past end of value stream"));
        }
        let data = bytes[offset..end]
            .chunks_exact(F::BYTES)
            .map(F::read_le)
            .collect();
        out.push(DumpEntry {
            name: (*name).to_string(),
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(out)
}
