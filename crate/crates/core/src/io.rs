//! File formats: PFM float maps, 16-bit PGM masks and the JSON proposal
//! container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::Grid2;
use crate::proposals::{MultiScaleProposals, NoiseModel, SolverSettings};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {format} data: {message}")]
    Format { format: &'static str, message: String },
    #[error("{format} data ends early: expected {expected} bytes of samples, found {found}")]
    Truncated {
        format: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unsupported container schema {found:?} (expected {expected:?})")]
    Schema { found: String, expected: &'static str },
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn format_err(format: &'static str, message: impl Into<String>) -> IoError {
    IoError::Format {
        format,
        message: message.into(),
    }
}

/// Splits `n` whitespace-separated header tokens off the front of `data`
/// (PNM style, `#` comments allowed), consuming exactly one whitespace
/// byte after the last token.
fn header_tokens<'a>(data: &'a [u8], n: usize, format: &'static str) -> Result<(Vec<&'a str>, &'a [u8])> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < data.len() && (data[i].is_ascii_whitespace() || data[i] == b'#') {
            if data[i] == b'#' {
                while i < data.len() && data[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < data.len() && !data[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(format, "header ends early"));
        }
        let tok = std::str::from_utf8(&data[start..i]).map_err(|_| format_err(format, "header is not ASCII"))?;
        tokens.push(tok);
    }
    if i >= data.len() {
        return Err(format_err(format, "missing sample data"));
    }
    Ok((tokens, &data[i + 1..]))
}

fn parse_dim(tok: &str, format: &'static str) -> Result<usize> {
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| format_err(format, format!("bad dimension {tok:?}")))
}

/// Grey PFM (`Pf`), little-endian (scale −1), rows stored bottom to top.
/// Samples are stored as `f32`.
pub fn encode_pfm(img: &Grid2<f64>) -> Vec<u8> {
    let (rows, cols) = img.shape();
    let mut out = format!("Pf\n{cols} {rows}\n-1.0\n").into_bytes();
    out.reserve(rows * cols * 4);
    for r in (0..rows).rev() {
        for c in 0..cols {
            out.extend_from_slice(&(img.at(r, c) as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a grey PFM of either byte order.
pub fn decode_pfm(data: &[u8]) -> Result<Grid2<f64>> {
    const F: &str = "PFM";
    let (tok, body) = header_tokens(data, 4, F)?;
    match tok[0] {
        "Pf" => {}
        "PF" => return Err(format_err(F, "colour PFM is not supported")),
        other => return Err(format_err(F, format!("bad magic {other:?}"))),
    }
    let cols = parse_dim(tok[1], F)?;
    let rows = parse_dim(tok[2], F)?;
    let scale: f64 = tok[3]
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| format_err(F, format!("bad scale {:?}", tok[3])))?;
    let little = scale < 0.0;
    let expected = rows * cols * 4;
    if body.len() < expected {
        return Err(IoError::Truncated {
            format: F,
            expected,
            found: body.len(),
        });
    }
    let mut img = Grid2::zeros(rows, cols);
    for (k, chunk) in body[..expected].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (r, c) = (rows - 1 - k / cols, k % cols);
        img.set(r, c, v as f64);
    }
    Ok(img)
}

/// Binary PGM with 16-bit big-endian samples (maxval 65535).
pub fn encode_pgm16(img: &Grid2<u16>) -> Vec<u8> {
    let (rows, cols) = img.shape();
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    out.reserve(rows * cols * 2);
    for &v in img.as_slice() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Binary PGM with 8- or 16-bit samples.
pub fn decode_pgm(data: &[u8]) -> Result<Grid2<u16>> {
    const F: &str = "PGM";
    let (tok, body) = header_tokens(data, 4, F)?;
    if tok[0] != "P5" {
        return Err(format_err(F, format!("bad magic {:?}", tok[0])));
    }
    let cols = parse_dim(tok[1], F)?;
    let rows = parse_dim(tok[2], F)?;
    let maxval: u32 = tok[3]
        .parse()
        .ok()
        .filter(|&m| (1..=65535).contains(&m))
        .ok_or_else(|| format_err(F, format!("bad maxval {:?}", tok[3])))?;
    let width = if maxval > 255 { 2 } else { 1 };
    let expected = rows * cols * width;
    if body.len() < expected {
        return Err(IoError::Truncated {
            format: F,
            expected,
            found: body.len(),
        });
    }
    let data: Vec<u16> = if width == 2 {
        body[..expected].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        body[..expected].iter().map(|&b| b as u16).collect()
    };
    Ok(Grid2::from_vec(rows, cols, data))
}

pub fn mask_to_pgm(mask: &Grid2<bool>) -> Vec<u8> {
    encode_pgm16(&mask.map(|&m| if m { u16::MAX } else { 0 }))
}

/// Nonzero samples are "valid".
pub fn pgm_to_mask(data: &[u8]) -> Result<Grid2<bool>> {
    Ok(decode_pgm(data)?.map(|&v| v != 0))
}

pub fn read_pfm(path: &Path) -> Result<Grid2<f64>> {
    decode_pfm(&read_file(path)?)
}

pub fn write_pfm(path: &Path, img: &Grid2<f64>) -> Result<()> {
    write_file(path, &encode_pfm(img))
}

pub fn read_mask(path: &Path) -> Result<Grid2<bool>> {
    pgm_to_mask(&read_file(path)?)
}

pub fn write_mask(path: &Path, mask: &Grid2<bool>) -> Result<()> {
    write_file(path, &mask_to_pgm(mask))
}

pub const PROPOSALS_SCHEMA: &str = "quadshade/proposals/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    /// Name and version of the writer.
    pub generator: String,
    /// SHA-256 of the resolved run configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub light: [f64; 3],
    pub noise: NoiseModel,
    pub theta_samples: usize,
    pub solver: SolverSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalContainer {
    pub schema: String,
    pub header: ContainerHeader,
    pub proposals: MultiScaleProposals,
}

impl ProposalContainer {
    pub fn new(header: ContainerHeader, proposals: MultiScaleProposals) -> Self {
        Self {
            schema: PROPOSALS_SCHEMA.to_string(),
            header,
            proposals,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(data: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            schema: String,
        }
        let probe: Probe = serde_json::from_slice(data)?;
        if probe.schema != PROPOSALS_SCHEMA {
            return Err(IoError::Schema {
                found: probe.schema,
                expected: PROPOSALS_SCHEMA,
            });
        }
        Ok(serde_json::from_slice(data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch_model::QuadShape;
    use crate::proposals::{Proposal, ProposalSet, ScaleProposals, SkipReason, SkippedPatch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Grid2::from_fn(7, 11, |_, _| rng.random_range(-1e3f32..1e3) as f64);
        let back = decode_pfm(&encode_pfm(&img)).unwrap();
        assert_eq!(back, img);
        assert!(encode_pfm(&img).starts_with(b"Pf\n11 7\n-1.0\n"));
    }

    #[test]
    fn pfm_bottom_row_comes_first() {
        let img = Grid2::from_vec(2, 1, vec![1.0, 2.0]);
        let bytes = encode_pfm(&img);
        let body = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 2.0);
    }

    #[test]
    fn big_endian_pfm_is_accepted() {
        let mut data = b"Pf\n2 1\n1.0\n".to_vec();
        data.extend_from_slice(&1.5f32.to_be_bytes());
        data.extend_from_slice(&(-2.0f32).to_be_bytes());
        let img = decode_pfm(&data).unwrap();
        assert_eq!(img.as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn truncated_files_fail_cleanly() {
        let img = Grid2::from_fn(4, 4, |r, c| (r + c) as f64);
        let bytes = encode_pfm(&img);
        assert!(matches!(
            decode_pfm(&bytes[..bytes.len() - 3]),
            Err(IoError::Truncated { expected: 64, found: 61, .. })
        ));
        assert!(matches!(decode_pfm(b"Pf\n4"), Err(IoError::Format { .. })));
        assert!(matches!(decode_pfm(b"P6\n1 1\n-1\n0000"), Err(IoError::Format { .. })));
        let pgm = encode_pgm16(&Grid2::filled(3, 3, 7u16));
        assert!(matches!(decode_pgm(&pgm[..pgm.len() - 1]), Err(IoError::Truncated { .. })));
    }

    #[test]
    fn pgm_round_trips() {
        let img = Grid2::from_fn(5, 3, |r, c| (r * 1000 + c * 17) as u16);
        assert_eq!(decode_pgm(&encode_pgm16(&img)).unwrap(), img);
        let mask = Grid2::from_fn(4, 6, |r, c| (r + c) % 3 != 0);
        assert_eq!(pgm_to_mask(&mask_to_pgm(&mask)).unwrap(), mask);
        let eight = b"P5\n# comment\n2 1\n255\n\x00\xff";
        assert_eq!(decode_pgm(eight).unwrap().as_slice(), &[0, 255]);
    }

    fn sample_container() -> ProposalContainer {
        let set = ProposalSet {
            proposals: vec![Proposal {
                theta: 0.1 + 0.2,
                shape: QuadShape::new(1.0 / 3.0, -2e-17, 0.0, 7.0, f64::MIN_POSITIVE),
                residual_sse: 1e-300,
                cost: -115.08421,
            }],
            dummy_cost: None,
            origin: (2, 3),
            size: 5,
        };
        let header = ContainerHeader {
            generator: "test".into(),
            config_hash: "00".into(),
            config: serde_json::json!({"j": 1}),
            light: [0.5, 0.0, 0.8660254037844386],
            noise: NoiseModel::default(),
            theta_samples: 1,
            solver: SolverSettings::default(),
        };
        ProposalContainer::new(
            header,
            MultiScaleProposals {
                image_rows: 7,
                image_cols: 8,
                scales: vec![ScaleProposals {
                    size: 5,
                    sets: vec![set],
                    skipped: vec![SkippedPatch {
                        origin: (2, 2),
                        reason: SkipReason::LowCoverage,
                    }],
                }],
            },
        )
    }

    #[test]
    fn container_round_trip_is_exact() {
        let c = sample_container();
        let bytes = c.to_json().unwrap();
        let back = ProposalContainer::from_json(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), bytes);
    }

    #[test]
    fn container_schema_is_checked() {
        let mut c = sample_container();
        c.schema = "quadshade/proposals/v0".into();
        let bytes = serde_json::to_vec(&c).unwrap();
        assert!(matches!(ProposalContainer::from_json(&bytes), Err(IoError::Schema { .. })));
        assert!(matches!(ProposalContainer::from_json(b"{\"schema\": 1"), Err(IoError::Json(_))));
    }
}
