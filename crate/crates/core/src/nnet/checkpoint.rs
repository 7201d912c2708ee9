//! Flat-text model checkpoints.
//!
//! ```text
//! cabb-mlp 1
//! sealed 0
//! activation relu
//! layers 3
//! layer <out> <in>
//! <out lines of <in> weights>
//! <one line of <out> biases>
//! ...
//! ```
//!
//! Floats use the shortest representation that parses back to the same bits.

use std::fmt::Write as _;
use std::path::Path;

use super::model::{Activation, Dense, MlpModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &str = "cabb-mlp";
const VERSION: u32 = 1;

pub(crate) fn encode(model: &MlpModel, sealed: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "sealed {}", u8::from(sealed));
    let _ = writeln!(out, "activation {}", model.activation().name());
    let _ = writeln!(out, "layers {}", model.layers().len());
    for layer in model.layers() {
        let _ = writeln!(out, "layer {} {}", layer.out_dim(), layer.in_dim());
        for row in layer.weights().iter_rows() {
            push_floats(&mut out, row);
        }
        push_floats(&mut out, layer.bias());
    }
    out
}

fn push_floats(out: &mut String, xs: &[f64]) {
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{x:?}");
    }
    out.push('\n');
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => Ok((i + 1, l.trim())),
            None => Err(Error::Parse {
                line: 0,
                message: "unexpected end of checkpoint".into(),
            }),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, text) = self.next()?;
        let mut parts = text.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::Parse {
                line,
                message: format!("expected `{key}`"),
            });
        }
        Ok((line, parts.collect()))
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let (line, text) = self.next()?;
        let vals = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("bad float `{t}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != expected {
            return Err(Error::Parse {
                line,
                message: format!("expected {expected} values, found {}", vals.len()),
            });
        }
        Ok(vals)
    }
}

fn parse_usize(line: usize, tok: Option<&&str>) -> Result<usize> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
        line,
        message: "expected an unsigned integer".into(),
    })
}

/// Decodes a checkpoint, returning the model and its sealed flag.
pub(crate) fn decode(text: &str) -> Result<(MlpModel, bool)> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (line, header) = lines.keyed(MAGIC)?;
    if header.first().and_then(|v| v.parse::<u32>().ok()) != Some(VERSION) {
        return Err(Error::Parse {
            line,
            message: format!("unsupported checkpoint version {header:?}"),
        });
    }
    let (line, sealed) = lines.keyed("sealed")?;
    let sealed = match sealed.first() {
        Some(&"0") => false,
        Some(&"1") => true,
        _ => {
            return Err(Error::Parse {
                line,
                message: "sealed flag must be 0 or 1".into(),
            })
        }
    };
    let (line, act) = lines.keyed("activation")?;
    let activation = act
        .first()
        .and_then(|a| Activation::from_name(a))
        .ok_or_else(|| Error::Parse {
            line,
            message: "unknown activation".into(),
        })?;
    let (line, count) = lines.keyed("layers")?;
    let count = parse_usize(line, count.first())?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, dims) = lines.keyed("layer")?;
        let out_dim = parse_usize(line, dims.first())?;
        let in_dim = parse_usize(line, dims.get(1))?;
        let mut weights = Vec::with_capacity(out_dim * in_dim);
        for _ in 0..out_dim {
            weights.extend(lines.floats(in_dim)?);
        }
        let bias = lines.floats(out_dim)?;
        layers.push(Dense::new(Matrix::from_vec(out_dim, in_dim, weights)?, bias)?);
    }
    Ok((MlpModel::from_layers(layers, activation)?, sealed))
}

impl MlpModel {
    pub fn to_checkpoint_string(&self) -> String {
        encode(self, false)
    }

    /// Parses an unsealed checkpoint. Sealed (black-box) checkpoints are refused.
    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let (model, sealed) = decode(text)?;
        if sealed {
            return Err(Error::Contract(
                "checkpoint is sealed and can only be opened as a black-box predictor".into(),
            ));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}
