//! On-disk dataset layout: `manifest.json` plus one binary file per split.
//!
//! Split files are little-endian: a 16-byte header (magic "IFCD", version
//! u32, example count u32, row length u32) followed by rows of
//! `[input .. , fidelity m, output ..]` as f64. Row length is
//! input_dim + 1 + d.

use crate::pdegen::{DatasetMeta, Example, FidelityDataset};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"IFCD";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("corrupt split file {path}: {reason}")]
    Corrupt { path: String, reason: String },
}

fn write_split(path: &Path, examples: &[Example], input_dim: usize, d: usize) -> Result<(), DatasetIoError> {
    let row_len = input_dim + 1 + d;
    let mut buf = Vec::with_capacity(16 + examples.len() * row_len * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(examples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(row_len as u32).to_le_bytes());
    for e in examples {
        debug_assert_eq!(e.x.len(), input_dim);
        debug_assert_eq!(e.y.len(), d);
        for v in &e.x {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&e.m.to_le_bytes());
        for v in &e.y {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_split(path: &Path, input_dim: usize, d: usize) -> Result<Vec<(Vec<f64>, f64, Vec<f64>)>, DatasetIoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |reason: &str| DatasetIoError::Corrupt {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(err("missing IFCD header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let row_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if row_len != input_dim + 1 + d {
        return Err(err(&format!("row length {row_len} does not match manifest ({})", input_dim + 1 + d)));
    }
    if bytes.len() != 16 + n * row_len * 8 {
        return Err(err("truncated payload"));
    }
    let mut rows = Vec::with_capacity(n);
    let mut off = 16;
    let next = |k: usize, off: &mut usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(k);
        for _ in 0..k {
            v.push(f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap()));
            *off += 8;
        }
        v
    };
    for _ in 0..n {
        let x = next(input_dim, &mut off);
        let m = next(1, &mut off)[0];
        let y = next(d, &mut off);
        rows.push((x, m, y));
    }
    Ok(rows)
}

/// Write manifest.json, train.bin and test.bin into `dir`.
pub fn save_dataset(ds: &FidelityDataset, dir: &Path) -> Result<(), DatasetIoError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&ds.meta)?)?;
    write_split(&dir.join("train.bin"), &ds.train, ds.meta.input_dim, ds.meta.d)?;
    write_split(&dir.join("test.bin"), &ds.test, ds.meta.input_dim, ds.meta.d)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`]. Native mesh sizes
/// are reconstructed from the manifest counts (train rows are grouped by
/// mesh, ascending; test rows sit at the highest mesh).
pub fn load_dataset(dir: &Path) -> Result<FidelityDataset, DatasetIoError> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let train_rows = read_split(&dir.join("train.bin"), meta.input_dim, meta.d)?;
    let test_rows = read_split(&dir.join("test.bin"), meta.input_dim, meta.d)?;

    let mut native: Vec<usize> = Vec::with_capacity(train_rows.len());
    for (&s, &c) in meta.mesh_sizes.iter().zip(&meta.counts) {
        native.extend(std::iter::repeat_n(s, c));
    }
    if native.len() != train_rows.len() {
        return Err(DatasetIoError::Corrupt {
            path: dir.join("train.bin").display().to_string(),
            reason: format!("{} rows but manifest counts sum to {}", train_rows.len(), native.len()),
        });
    }
    let s_max = *meta.mesh_sizes.last().unwrap();
    let train = train_rows
        .into_iter()
        .zip(native)
        .map(|((x, m, y), s)| Example { x, m, y, native_s: s })
        .collect();
    let test = test_rows
        .into_iter()
        .map(|(x, m, y)| Example { x, m, y, native_s: s_max })
        .collect();
    Ok(FidelityDataset { meta, train, test })
}
