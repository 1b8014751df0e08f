//! Synthetic dataset generators and CSV ingestion.
//!
//! Generators are pure functions of their parameters and seed; labels are
//! balanced by construction.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::error::{Error, Result};
use crate::DataMatrix;

/// A feature matrix with integer labels (`-1` when unknown) and generation
/// metadata.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub x: DataMatrix,
    pub y: Vec<i64>,
    pub name: String,
    pub meta: serde_json::Value,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_classes(&self) -> usize {
        let mut values: Vec<i64> = self.y.iter().copied().filter(|&l| l >= 0).collect();
        values.sort_unstable();
        values.dedup();
        values.len()
    }
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + std * z
}

/// Five-arm pinwheel: per arm, a radially stretched Gaussian rotated by an
/// angle that grows with the radius.
///
/// For arm `k` with base angle `2 pi k / arms`: draw `u ~ N(1, radial_std^2)`
/// and `v ~ N(0, angular_std^2)`, then rotate the point `(u, v)` by
/// `base_k + rate * exp(u)`, the construction of Johnson et al.'s reference
/// generator.
pub fn gen_pinwheel(
    n_per_arm: usize,
    arms: usize,
    radial_std: f64,
    angular_std: f64,
    rate: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_arm == 0 || arms == 0 {
        return Err(Error::InvalidParameter("pinwheel needs positive counts".into()));
    }
    if radial_std < 0.0 || angular_std < 0.0 {
        return Err(Error::InvalidParameter("standard deviations must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_arm * arms;
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    let mut row = 0;
    for arm in 0..arms {
        let base = 2.0 * std::f64::consts::PI * arm as f64 / arms as f64;
        for _ in 0..n_per_arm {
            let u = normal(&mut rng, 1.0, radial_std);
            let v = normal(&mut rng, 0.0, angular_std);
            let angle = base + rate * u.exp();
            let (sin, cos) = angle.sin_cos();
            x[[row, 0]] = u * cos - v * sin;
            x[[row, 1]] = u * sin + v * cos;
            y.push(arm as i64);
            row += 1;
        }
    }
    Ok(LabeledDataset {
        x,
        y,
        name: "pinwheel".into(),
        meta: json!({
            "generator": "pinwheel",
            "n_per_arm": n_per_arm,
            "arms": arms,
            "radial_std": radial_std,
            "angular_std": angular_std,
            "rate": rate,
            "seed": seed,
        }),
    })
}

/// Default blob centers on the unit torus; the last one straddles the
/// corner so wrapping is actually exercised.
pub const TOROIDAL_CENTERS: [[f64; 2]; 4] = [[0.0, 0.5], [0.5, 0.0], [0.5, 0.5], [0.95, 0.95]];

/// Gaussian blobs at explicit centers on `[0,1)^2`, wrapped modulo 1.
pub fn gen_toroidal_at(
    centers: &[[f64; 2]],
    n_per_blob: usize,
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if centers.is_empty() || n_per_blob == 0 {
        return Err(Error::InvalidParameter("toroidal needs positive counts".into()));
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidParameter("sigma must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = centers.len() * n_per_blob;
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    let mut row = 0;
    for (blob, center) in centers.iter().enumerate() {
        for _ in 0..n_per_blob {
            for j in 0..2 {
                x[[row, j]] = normal(&mut rng, center[j], sigma).rem_euclid(1.0);
            }
            y.push(blob as i64);
            row += 1;
        }
    }
    Ok(LabeledDataset {
        x,
        y,
        name: "toroidal".into(),
        meta: json!({
            "generator": "toroidal",
            "centers": centers,
            "n_per_blob": n_per_blob,
            "sigma": sigma,
            "seed": seed,
        }),
    })
}

/// Gaussian blobs on the unit torus at the standard centers.
pub fn gen_toroidal(n_per_blob: usize, blobs: usize, sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if blobs == 0 || blobs > TOROIDAL_CENTERS.len() {
        return Err(Error::InvalidParameter(format!(
            "toroidal supports 1..={} blobs, got {blobs}",
            TOROIDAL_CENTERS.len()
        )));
    }
    gen_toroidal_at(&TOROIDAL_CENTERS[..blobs], n_per_blob, sigma, seed)
}

/// Two interleaving half circles with isotropic Gaussian noise.
pub fn gen_moons(n: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::InvalidParameter("moons needs at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = n / 2;
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for row in 0..n {
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let (px, py) = if row < n0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x[[row, 0]] = px + normal(&mut rng, 0.0, noise_std);
        x[[row, 1]] = py + normal(&mut rng, 0.0, noise_std);
        y.push(if row < n0 { 0 } else { 1 });
    }
    Ok(LabeledDataset {
        x,
        y,
        name: "moons".into(),
        meta: json!({
            "generator": "moons",
            "n": n,
            "noise_std": noise_std,
            "seed": seed,
        }),
    })
}

/// Two concentric circles; the inner radius is `radius_factor` times the
/// outer one.
pub fn gen_circles(n: usize, noise_std: f64, radius_factor: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::InvalidParameter("circles needs at least 2 samples".into()));
    }
    if !(0.0..1.0).contains(&radius_factor) {
        return Err(Error::InvalidParameter("radius_factor must be in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = n / 2;
    let mut x = Array2::zeros((n, 2));
    let mut y = Vec::with_capacity(n);
    for row in 0..n {
        let t = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let r = if row < n0 { 1.0 } else { radius_factor };
        x[[row, 0]] = r * t.cos() + normal(&mut rng, 0.0, noise_std);
        x[[row, 1]] = r * t.sin() + normal(&mut rng, 0.0, noise_std);
        y.push(if row < n0 { 0 } else { 1 });
    }
    Ok(LabeledDataset {
        x,
        y,
        name: "circles".into(),
        meta: json!({
            "generator": "circles",
            "n": n,
            "noise_std": noise_std,
            "radius_factor": radius_factor,
            "seed": seed,
        }),
    })
}

/// Load a rectangular numeric CSV (RFC-4180 subset, '.' decimal separator,
/// one header row). `label_column` is a zero-based column index holding
/// integer labels; without it all labels are `-1`.
pub fn load_csv(path: &Path, label_column: Option<usize>) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut width: Option<usize> = None;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: r + 1,
            column: 0,
            message: e.to_string(),
        })?;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRows {
                row: r + 1,
                expected,
                actual: record.len(),
            });
        }
        if let Some(lc) = label_column {
            if lc >= expected {
                return Err(Error::InvalidParameter(format!(
                    "label column {lc} out of range for {expected} columns"
                )));
            }
        }
        let mut row = Vec::with_capacity(expected);
        for (c, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: c + 1,
                message: format!("non-numeric cell {field:?}"),
            })?;
            if Some(c) == label_column {
                if value.fract() != 0.0 {
                    return Err(Error::Parse {
                        row: r + 1,
                        column: c + 1,
                        message: format!("label {value} is not an integer"),
                    });
                }
                labels.push(value as i64);
            } else {
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("csv file"));
    }
    let m = rows[0].len();
    let n = rows.len();
    let mut x = Array2::zeros((n, m));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let y = if label_column.is_some() {
        labels
    } else {
        vec![-1; n]
    };
    Ok(LabeledDataset {
        x,
        y,
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
        meta: json!({ "source": path.display().to_string() }),
    })
}

/// Write features (and labels, when any are known) as CSV with an
/// `x0,..,x{m-1}[,label]` header. Floats are written in shortest
/// round-trip form, so reading the file back is lossless.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let m = ds.dim();
    let with_labels = ds.y.iter().any(|&l| l >= 0);
    let mut header: Vec<String> = (0..m).map(|j| format!("x{j}")).collect();
    if with_labels {
        header.push("label".into());
    }
    writer.write_record(&header)?;
    for i in 0..ds.len() {
        let mut record: Vec<String> = (0..m).map(|j| format!("{}", ds.x[[i, j]])).collect();
        if with_labels {
            record.push(ds.y[i].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// CSV plus a `<stem>.meta.json` sidecar with the generation metadata.
pub fn save_with_metadata(ds: &LabeledDataset, csv_path: &Path) -> Result<std::path::PathBuf> {
    save_csv(ds, csv_path)?;
    let meta_path = csv_path.with_extension("meta.json");
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    std::fs::write(&meta_path, meta)?;
    Ok(meta_path)
}
