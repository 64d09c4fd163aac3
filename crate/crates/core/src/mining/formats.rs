//! `JMAP` map files and the patch manifest.
//!
//! Float maps: `"JMAP" | u32 H | u32 W | H·W little-endian f32`, row-major.
//! Masks: the same header followed by one byte per pixel, 0 or 1.
//!
//! The manifest is tab-separated with one patch per line, in pool order:
//!
//! ```text
//! concept_id image_id row col x0 y0 x1 y1 coverage score cell_max emb_offset
//! ```
//!
//! `emb_offset` is the 0-based row of the patch in the companion embedding
//! file. Lines starting with `#` are comments.

use std::fs;
use std::path::Path;

use super::grid::PixelRect;
use super::maps::{ScalarMap, SubjectMask};
use super::pipeline::PatchDescriptor;
use super::MiningError;

pub const JMAP_MAGIC: &[u8; 4] = b"JMAP";
const HEADER: usize = 12;

fn format_err(path: &Path, message: impl Into<String>) -> MiningError {
    MiningError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, MiningError> {
    fs::read(path).map_err(|source| MiningError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), MiningError> {
    fs::write(path, bytes).map_err(|source| MiningError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn header(h: usize, w: usize) -> Vec<u8> {
    let mut buf = JMAP_MAGIC.to_vec();
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf
}

fn parse_header(path: &Path, bytes: &[u8], elem: usize) -> Result<(usize, usize), MiningError> {
    if bytes.len() < HEADER || &bytes[..4] != JMAP_MAGIC {
        return Err(format_err(path, "missing JMAP header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = HEADER + h * w * elem;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("{} bytes, expected {expected} for {h}x{w}", bytes.len()),
        ));
    }
    Ok((h, w))
}

pub fn write_jmap(path: &Path, map: &ScalarMap) -> Result<(), MiningError> {
    let (h, w) = map.shape();
    let mut buf = header(h, w);
    for v in map.values() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_bytes(path, &buf)
}

pub fn read_jmap(path: &Path) -> Result<ScalarMap, MiningError> {
    let bytes = read_bytes(path)?;
    let (h, w) = parse_header(path, &bytes, 4)?;
    let values = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    ScalarMap::new(h, w, values).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &SubjectMask) -> Result<(), MiningError> {
    let (h, w) = mask.shape();
    let mut buf = header(h, w);
    buf.extend(mask.bits().iter().map(|b| u8::from(*b)));
    write_bytes(path, &buf)
}

pub fn read_mask(path: &Path) -> Result<SubjectMask, MiningError> {
    let bytes = read_bytes(path)?;
    let (h, w) = parse_header(path, &bytes, 1)?;
    let bits = bytes[HEADER..]
        .iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format_err(path, format!("mask byte {other}"))),
        })
        .collect::<Result<_, _>>()?;
    SubjectMask::new(h, w, bits).map_err(|e| format_err(path, e.to_string()))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub descriptor: PatchDescriptor,
    pub emb_offset: usize,
}

pub fn write_manifest(rows: &[ManifestRow]) -> String {
    let mut out = String::from(
        "# concept_id\timage_id\trow\tcol\tx0\ty0\tx1\ty1\tcoverage\tscore\tcell_max\temb_offset\n",
    );
    for r in rows {
        let d = &r.descriptor;
        let b = d.bbox;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            d.concept_id,
            d.image_id,
            d.row,
            d.col,
            b.x0,
            b.y0,
            b.x1,
            b.y1,
            d.coverage,
            d.score,
            d.cell_max,
            r.emb_offset
        ));
    }
    out
}

pub fn read_manifest(path: &Path, text: &str) -> Result<Vec<ManifestRow>, MiningError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| format_err(path, format!("line {}: {what}", i + 1));
        if f.len() != 12 {
            return Err(bad(&format!("{} fields, expected 12", f.len())));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(&format!("bad integer {s:?}")))
        };
        let real = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(&format!("bad number {s:?}")))
        };
        rows.push(ManifestRow {
            descriptor: PatchDescriptor {
                concept_id: f[0].to_string(),
                image_id: f[1].to_string(),
                row: int(f[2])?,
                col: int(f[3])?,
                bbox: PixelRect {
                    x0: int(f[4])?,
                    y0: int(f[5])?,
                    x1: int(f[6])?,
                    y1: int(f[7])?,
                },
                coverage: real(f[8])?,
                score: real(f[9])?,
                cell_max: real(f[10])?,
            },
            emb_offset: int(f[11])?,
        });
    }
    Ok(rows)
}
