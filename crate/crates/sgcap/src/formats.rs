//! On-disk feature formats: SGAF binary matrices and text word vectors.

use std::fs;
use std::path::Path;

use sgcap_core::features::WordVectorTable;
use sgcap_core::Tensor;

use crate::io::write_atomic;

pub const SGAF_MAGIC: &[u8; 4] = b"SGAF";
pub const SGAF_VERSION: u32 = 1;
const SGAF_HEADER: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"SGAF\"")]
    Magic { path: String, found: [u8; 4] },
    #[error("{path}: unsupported version {found}")]
    Version { path: String, found: u32 },
    #[error("{path}: at byte {offset}: {detail}")]
    Binary { path: String, offset: usize, detail: String },
    #[error("{path}:{line}: {detail}")]
    Text { path: String, line: usize, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Row-major `f32` matrix as stored in an SGAF file. Zero rows are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn from_tensor(t: &Tensor) -> Self {
        FeatureMatrix {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> sgcap_core::Result<Tensor> {
        Tensor::matrix(self.rows, self.cols, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SGAF_HEADER + 4 * self.data.len());
        out.extend_from_slice(SGAF_MAGIC);
        out.extend_from_slice(&SGAF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an SGAF image; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, FormatError> {
        let binary = |offset, detail: String| FormatError::Binary {
            path: path.into(),
            offset,
            detail,
        };
        if bytes.len() < SGAF_HEADER {
            return Err(binary(bytes.len(), format!("truncated header ({} of {SGAF_HEADER} bytes)", bytes.len())));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if &magic != SGAF_MAGIC {
            return Err(FormatError::Magic {
                path: path.into(),
                found: magic,
            });
        }
        if word(4) != SGAF_VERSION {
            return Err(FormatError::Version {
                path: path.into(),
                found: word(4),
            });
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        let n = rows.checked_mul(cols).ok_or_else(|| binary(8, format!("{rows} x {cols} overflows")))?;
        let expected = n.checked_mul(4).and_then(|b| b.checked_add(SGAF_HEADER));
        if expected != Some(bytes.len()) {
            return Err(binary(
                SGAF_HEADER,
                format!("{rows} x {cols} floats need {} payload bytes, found {}", 4 * n, bytes.len() - SGAF_HEADER),
            ));
        }
        let data: Vec<f32> = bytes[SGAF_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(binary(SGAF_HEADER + 4 * i, format!("non-finite value at row {}, column {}", i / cols.max(1), i % cols.max(1))));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }
}

pub fn read_sgaf(path: &Path) -> Result<FeatureMatrix, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    FeatureMatrix::from_bytes(&bytes, &path.display().to_string())
}

pub fn write_sgaf(path: &Path, m: &FeatureMatrix) -> anyhow::Result<()> {
    write_atomic(path, &m.to_bytes())
}

/// Parses `word v1 … vd` lines. The width is fixed by the first entry;
/// blank lines are skipped.
pub fn parse_word_vectors(text: &str, path: &str) -> Result<WordVectorTable, FormatError> {
    let mut table: Option<WordVectorTable> = None;
    for (i, line) in text.lines().enumerate() {
        let err = |detail: String| FormatError::Text {
            path: path.into(),
            line: i + 1,
            detail,
        };
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let vector = fields
            .enumerate()
            .map(|(k, f)| f.parse::<f64>().map_err(|_| err(format!("component {} is not a number: {f:?}", k + 1))))
            .collect::<Result<Vec<f64>, _>>()?;
        if vector.is_empty() {
            return Err(err(format!("word {word:?} has no vector")));
        }
        let t = table.get_or_insert_with(|| WordVectorTable::new(vector.len()));
        if vector.len() != t.dim() {
            return Err(err(format!("vector width {} differs from {}", vector.len(), t.dim())));
        }
        t.insert(word, vector).map_err(|e| err(e.to_string()))?;
    }
    table.ok_or_else(|| FormatError::Text {
        path: path.into(),
        line: 0,
        detail: "no word vectors".into(),
    })
}

pub fn read_word_vectors(path: &Path) -> Result<WordVectorTable, FormatError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_word_vectors(&text, &path.display().to_string())
}

/// Text form with six decimals per component, words in table order.
pub fn format_word_vectors(table: &WordVectorTable) -> String {
    let mut out = String::new();
    for (word, v) in table.iter() {
        out.push_str(word);
        for x in v {
            out.push_str(&format!(" {x:.6}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgaf_round_trip_is_bit_identical() {
        let m = FeatureMatrix {
            rows: 2,
            cols: 3,
            data: vec![0.1, -2.5e-8, 3.0e7, f32::MIN_POSITIVE, -0.0, 1.0 / 3.0],
        };
        let back = FeatureMatrix::from_bytes(&m.to_bytes(), "m").unwrap();
        let bits = |m: &FeatureMatrix| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!((back.rows, back.cols), (2, 3));
    }

    #[test]
    fn sgaf_rejects_bad_headers() {
        let m = FeatureMatrix { rows: 1, cols: 2, data: vec![1.0, 2.0] };
        let mut bytes = m.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(FeatureMatrix::from_bytes(&bytes, "m"), Err(FormatError::Magic { .. })));
        let mut bytes = m.to_bytes();
        bytes[4] = 2;
        assert!(matches!(FeatureMatrix::from_bytes(&bytes, "m"), Err(FormatError::Version { found: 2, .. })));
        let bytes = m.to_bytes();
        assert!(matches!(FeatureMatrix::from_bytes(&bytes[..bytes.len() - 1], "m"), Err(FormatError::Binary { .. })));
    }

    #[test]
    fn empty_matrix_is_allowed() {
        let m = FeatureMatrix { rows: 0, cols: 4, data: vec![] };
        assert_eq!(FeatureMatrix::from_bytes(&m.to_bytes(), "m").unwrap(), m);
    }

    #[test]
    fn word_vector_width_error_names_line() {
        let err = parse_word_vectors("dog 1 2 3\n\ncat 1 2\n", "wv.txt").unwrap_err();
        assert_eq!(err.to_string(), "wv.txt:3: vector width 2 differs from 3");
        let err = parse_word_vectors("dog 1 x\n", "wv.txt").unwrap_err();
        assert!(err.to_string().starts_with("wv.txt:1:"), "{err}");
    }

    #[test]
    fn word_vectors_round_trip() {
        let t = parse_word_vectors("dog 0.5 -1.25\ncat 2 0\n", "wv").unwrap();
        let again = parse_word_vectors(&format_word_vectors(&t), "wv").unwrap();
        assert_eq!(t, again);
        assert_eq!(t.get("cat"), Some(&[2.0, 0.0][..]));
    }
}
