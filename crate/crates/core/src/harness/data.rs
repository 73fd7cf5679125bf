//! Synthetic Gaussian clusters and on-disk dataset ingestion.
//!
//! A dataset directory holds either `manifest.tsv` (class id, label name,
//! file name per line) with one raw matrix per class, or a single `data.csv`
//! with one sample per row and the class id in the last column. Raw matrices
//! are an 8-byte header (rows u32, cols u32, little endian) followed by
//! `rows * cols` little-endian f32 values.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{ClassId, Dataset, Sample};
use crate::error::{Error, Result};

/// `num_classes` Gaussian clusters with unit-variance noise whose means lie
/// on a sphere of radius `separation`. Samples are grouped by class.
pub fn gen_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if separation.is_nan() || separation < 0.0 {
        return Err(Error::Config("separation must be non-negative".into()));
    }
    if dim == 0 {
        return Err(Error::Config("dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| normal()).collect();
        let n = v.iter().fold(0.0, |a, x| a + x * x).sqrt();
        let n = if n == 0.0 { 1.0 } else { n };
        v.iter_mut().for_each(|x| *x *= separation / n);
        means.push(v);
    }
    let mut samples = Vec::with_capacity(num_classes * samples_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            let x = mean.iter().map(|m| m + normal()).collect();
            samples.push(Sample {
                id: samples.len(),
                x,
                y: c as ClassId,
            });
        }
    }
    Dataset::new(samples)
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset",
        detail: format!("{}: {}", path.display(), detail.into()),
    }
}

/// Raw little-endian f32 matrix with a `(rows, cols)` u32 header.
pub fn read_raw_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(bad(path, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(8))
        .ok_or_else(|| bad(path, "header overflows"))?;
    if bytes.len() != expected {
        return Err(bad(path, format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len())));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad(path, "non-finite value"));
    }
    Ok(values.chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
}

pub fn write_raw_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(8 + rows.len() * cols * 4);
    out.extend((rows.len() as u32).to_le_bytes());
    out.extend((cols as u32).to_le_bytes());
    for r in rows {
        if r.len() != cols {
            return Err(Error::dim("write_raw_matrix", "ragged rows"));
        }
        for &v in r {
            out.extend((v as f32).to_le_bytes());
        }
    }
    crate::io::write_atomic(path, &out)
}

/// Load `manifest.tsv` + raw matrices, or `data.csv`, from `dir`. Sample
/// ids follow file order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("manifest.tsv");
    let csv = dir.join("data.csv");
    let mut samples = Vec::new();
    if manifest.exists() {
        let text = std::fs::read_to_string(&manifest)?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [class, _label, file] = fields.as_slice() else {
                return Err(bad(&manifest, format!("line {} needs 3 tab-separated fields", n + 1)));
            };
            let y: ClassId = class
                .trim()
                .parse()
                .map_err(|_| bad(&manifest, format!("line {}: bad class id {class:?}", n + 1)))?;
            for x in read_raw_matrix(&dir.join(file.trim()))? {
                samples.push(Sample { id: samples.len(), x, y });
            }
        }
    } else if csv.exists() {
        let text = std::fs::read_to_string(&csv)?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let last = fields.pop().filter(|_| !fields.is_empty());
            let parsed = last.and_then(|y| y.parse::<ClassId>().ok()).zip(
                fields.iter().map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite())).collect::<Option<Vec<f64>>>(),
            );
            match parsed {
                Some((y, x)) => samples.push(Sample { id: samples.len(), x, y }),
                // A header line is allowed at the top.
                None if n == 0 => continue,
                None => return Err(bad(&csv, format!("line {} is not numeric", n + 1))),
            }
        }
    } else {
        return Err(Error::Config(format!(
            "{} contains neither manifest.tsv nor data.csv",
            dir.display()
        )));
    }
    if samples.is_empty() {
        return Err(bad(dir, "no samples"));
    }
    Dataset::new(samples)
}

/// Write `data` in the manifest + raw-matrix layout.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (class, samples) in data.by_class() {
        let file = format!("class_{class}.f32");
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
        write_raw_matrix(&dir.join(&file), &rows)?;
        manifest.push_str(&format!("{class}\tclass_{class}\t{file}\n"));
    }
    crate::io::write_atomic(&dir.join("manifest.tsv"), manifest.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = gen_synthetic(3, 4, 5, 2.0, 9).unwrap();
        let b = gen_synthetic(3, 4, 5, 2.0, 9).unwrap();
        let c = gen_synthetic(3, 4, 5, 2.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_separation_means_shared_centre() {
        let d = gen_synthetic(4, 2000, 3, 0.0, 1).unwrap();
        for (_, s) in d.by_class() {
            for j in 0..3 {
                let m = s.iter().map(|s| s.x[j]).sum::<f64>() / s.len() as f64;
                assert!(m.abs() < 0.1);
            }
        }
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_synthetic(3, 5, 4, 1.0, 2).unwrap();
        save_dataset(dir.path(), &d).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in d.samples.iter().zip(&back.samples) {
            assert_eq!(a.y, b.y);
            for (x, y) in a.x.iter().zip(&b.x) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
    }

    #[test]
    fn csv_fallback_with_header() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data.csv"), "a,b,label\n1.0,2.0,3\n-1,0.5,1\n").unwrap();
        let d = load_dataset(dir.path()).unwrap();
        assert_eq!(d.samples[0].x, vec![1.0, 2.0]);
        assert_eq!(d.samples[1].y, 1);
        std::fs::write(dir.path().join("data.csv"), "1.0,2.0,3\nx,1,1\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn truncated_matrix_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        let mut bytes = vec![];
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(1f32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(read_raw_matrix(&p).is_err());
    }
}
