//! CSV rows, point dumps and PGM sample sheets.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slt_core::engine::Tensor;
use slt_core::metrics::MetricsReport;

use crate::config::ExperimentConfig;
use crate::HarnessError;

/// One metrics CSV row; field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub k_percent: f64,
    pub scope: String,
    pub init_scheme: String,
    pub channel_multiplier: f64,
    /// Training loss of the step that produced this row; empty before the first step.
    pub loss: Option<f64>,
    pub mmd2_eval: f64,
    pub fd: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub wallclock_s: f64,
    pub config_hash: String,
}

impl MetricsRow {
    pub fn new(config: &ExperimentConfig, hash: &str, step: u64, loss: Option<f64>, m: &MetricsReport, wallclock_s: f64) -> Self {
        Self {
            step,
            k_percent: config.policy.k_percent,
            scope: config.policy.scope.name().to_string(),
            init_scheme: config.init.name().to_string(),
            channel_multiplier: config.generator.channel_multiplier,
            loss,
            mmd2_eval: m.mmd2_eval,
            fd: m.fd,
            precision: m.precision,
            recall: m.recall,
            density: m.density,
            coverage: m.coverage,
            wallclock_s,
            config_hash: hash.to_string(),
        }
    }
}

pub fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

/// `x,y,...` rows for flat samples `[N, D]`.
pub fn write_points(path: &Path, samples: &Tensor<f64>) -> Result<(), HarnessError> {
    let (n, d) = samples.rows_cols();
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    w.write_record(&header)?;
    for i in 0..n {
        w.write_record(samples.row(i).iter().map(|v| format!("{v:.9e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Binary PGM (P5) sheet of `[N, 1, H, W]` images with values in `[−1, 1]`,
/// tiled row-major into a near-square grid with a one-pixel dark gutter.
pub fn pgm_sheet(images: &Tensor<f64>) -> Result<Vec<u8>, HarnessError> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(HarnessError::Config(format!("PGM sheets need [n, 1, h, w] images, got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let (sheet_w, sheet_h) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut pixels = vec![0u8; sheet_w * sheet_h];
    for (i, img) in images.data().chunks(h * w).enumerate() {
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let v = ((img[y * w + x].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                pixels[(oy + y) * sheet_w + ox + x] = v;
            }
        }
    }
    let mut out = format!("P5\n{sheet_w} {sheet_h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Write samples as a PGM sheet (images) or a points CSV (flat data).
/// Returns the file name used.
pub fn write_samples(dir: &Path, stem: &str, samples: &Tensor<f64>) -> Result<String, HarnessError> {
    fs::create_dir_all(dir)?;
    if samples.rank() == 4 {
        let name = format!("{stem}.pgm");
        let mut f = fs::File::create(dir.join(&name))?;
        f.write_all(&pgm_sheet(samples)?)?;
        Ok(name)
    } else {
        let name = format!("{stem}.csv");
        write_points(&dir.join(&name), samples)?;
        Ok(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_gutter() {
        let imgs = Tensor::new(&[2, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]).unwrap();
        let bytes = pgm_sheet(&imgs).unwrap();
        let header = b"P5\n7 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 28);
        assert_eq!(px[7 + 1], 255);
        assert_eq!(px[7 + 4], 0);
        assert_eq!(px[0], 0);
    }
}
