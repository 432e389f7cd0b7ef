//! Token and parameter files.
//!
//! Tokens are stored as JSON `{"n": .., "d": .., "data": [[..], ..]}` or as
//! headerless CSV with one token per line. Parameters are JSON with one
//! entry per head, matrices stored as lists of rows.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Affine, HeadParams, Projection, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFile {
    pub n: usize,
    pub d: usize,
    pub data: Vec<Vec<f64>>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|row| row.len() != c) {
        return Err(Error::shape(format!(
            "{what}: row {i} has {} entries, row 0 has {c}",
            rows[i].len()
        )));
    }
    Array2::from_shape_vec((r, c), rows.concat()).map_err(|e| Error::shape(format!("{what}: {e}")))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

impl TokenFile {
    pub fn from_sequence(seq: &TokenSequence) -> Self {
        Self {
            n: seq.n(),
            d: seq.d(),
            data: rows(seq.data()),
        }
    }

    pub fn into_sequence(self) -> Result<TokenSequence> {
        let m = matrix(&self.data, "tokens")?;
        if m.nrows() != self.n || (self.n > 0 && m.ncols() != self.d) {
            return Err(Error::shape(format!(
                "header says {}x{}, data is {}x{}",
                self.n,
                self.d,
                m.nrows(),
                m.ncols()
            )));
        }
        TokenSequence::new(m)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Internal(format!("{}: {e}", path.display())))
}

pub fn parse_tokens_json(text: &str) -> Result<TokenSequence> {
    let file: TokenFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("token JSON: {e}")))?;
    file.into_sequence()
}

pub fn parse_tokens_csv(text: &str) -> Result<TokenSequence> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::shape(format!("token CSV: {e}")),
            _ => Error::Parse(format!("token CSV: {e}")),
        })?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("token CSV line {}: {f:?}: {e}", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        data.push(row);
    }
    TokenSequence::new(matrix(&data, "tokens")?)
}

/// Reads tokens, as CSV when the extension is `.csv` and JSON otherwise.
pub fn read_tokens(path: &Path) -> Result<TokenSequence> {
    let text = read(path)?;
    if is_csv(path) {
        parse_tokens_csv(&text)
    } else {
        parse_tokens_json(&text)
    }
}

pub fn tokens_to_json(seq: &TokenSequence) -> String {
    serde_json::to_string(&TokenFile::from_sequence(seq)).expect("token file serializes")
}

pub fn tokens_to_csv(seq: &TokenSequence) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in seq.data().outer_iter() {
        w.write_record(row.iter().map(|x| x.to_string()))
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
}

/// Writes tokens in the format chosen by the extension, as in [`read_tokens`].
pub fn write_tokens(path: &Path, seq: &TokenSequence) -> Result<()> {
    let text = if is_csv(path) {
        tokens_to_csv(seq)
    } else {
        tokens_to_json(seq) + "\n"
    };
    write(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineFile {
    pub matrix: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProjectionFile {
    Linear {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Mlp1 {
        hidden_weight: Vec<Vec<f64>>,
        hidden_bias: Vec<f64>,
        output_weight: Vec<Vec<f64>>,
        output_bias: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    pub query: AffineFile,
    pub key: AffineFile,
    pub value: AffineFile,
    pub mixer: Vec<Vec<f64>>,
    pub projection: ProjectionFile,
    #[serde(default)]
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub heads: Vec<HeadFile>,
}

impl AffineFile {
    fn from_affine(a: &Affine) -> Self {
        Self {
            matrix: rows(&a.matrix),
            bias: a.bias.to_vec(),
        }
    }

    fn into_affine(self, what: &str) -> Result<Affine> {
        Affine::new(matrix(&self.matrix, what)?, Array1::from(self.bias))
    }
}

impl ProjectionFile {
    fn from_projection(p: &Projection) -> Self {
        match p {
            Projection::Linear { weight, bias } => ProjectionFile::Linear {
                weight: rows(weight),
                bias: bias.to_vec(),
            },
            Projection::Mlp1 {
                hidden_weight,
                hidden_bias,
                output_weight,
                output_bias,
            } => ProjectionFile::Mlp1 {
                hidden_weight: rows(hidden_weight),
                hidden_bias: hidden_bias.to_vec(),
                output_weight: rows(output_weight),
                output_bias: output_bias.to_vec(),
            },
        }
    }

    fn into_projection(self) -> Result<Projection> {
        Ok(match self {
            ProjectionFile::Linear { weight, bias } => Projection::Linear {
                weight: matrix(&weight, "projection weight")?,
                bias: Array1::from(bias),
            },
            ProjectionFile::Mlp1 {
                hidden_weight,
                hidden_bias,
                output_weight,
                output_bias,
            } => Projection::Mlp1 {
                hidden_weight: matrix(&hidden_weight, "projection hidden weight")?,
                hidden_bias: Array1::from(hidden_bias),
                output_weight: matrix(&output_weight, "projection output weight")?,
                output_bias: Array1::from(output_bias),
            },
        })
    }
}

impl ParamsFile {
    pub fn from_heads(heads: &[HeadParams]) -> Self {
        Self {
            heads: heads
                .iter()
                .map(|h| HeadFile {
                    query: AffineFile::from_affine(&h.query),
                    key: AffineFile::from_affine(&h.key),
                    value: AffineFile::from_affine(&h.value),
                    mixer: rows(&h.mixer),
                    projection: ProjectionFile::from_projection(&h.projection),
                    slot: h.slot,
                })
                .collect(),
        }
    }

    /// Converts to heads, validating each against token dimension `d`.
    pub fn into_heads(self, d: usize) -> Result<Vec<HeadParams>> {
        if self.heads.is_empty() {
            return Err(Error::EmptyInput("parameter heads"));
        }
        self.heads
            .into_iter()
            .map(|h| {
                let head = HeadParams {
                    query: h.query.into_affine("query map")?,
                    key: h.key.into_affine("key map")?,
                    value: h.value.into_affine("value map")?,
                    mixer: matrix(&h.mixer, "mixer")?,
                    projection: h.projection.into_projection()?,
                    slot: h.slot,
                };
                head.validate(d)?;
                Ok(head)
            })
            .collect()
    }
}

pub fn parse_params(text: &str) -> Result<ParamsFile> {
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("parameter JSON: {e}")))
}

pub fn read_params(path: &Path, d: usize) -> Result<Vec<HeadParams>> {
    parse_params(&read(path)?)?.into_heads(d)
}

pub fn write_params(path: &Path, heads: &[HeadParams]) -> Result<()> {
    let text =
        serde_json::to_string_pretty(&ParamsFile::from_heads(heads)).expect("params serialize");
    write(path, (text + "\n").as_bytes())
}

/// Writes any serializable report as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    write(path, (text + "\n").as_bytes())
}
