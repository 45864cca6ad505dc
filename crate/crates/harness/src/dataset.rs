//! Synthetic point distributions and IDX image files.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use slt_core::engine::Tensor;
use slt_core::rng;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianRing,
    Checkerboard,
    ImageIdx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Ring only.
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Ring radius; the checkerboard spans `[−scale, scale]²`.
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub idx_path: Option<PathBuf>,
    /// Map image bytes to `[−1, 1]` (otherwise `[0, 1]`).
    #[serde(default = "default_normalize")]
    pub normalize: bool,
}

fn default_modes() -> usize {
    8
}
fn default_scale() -> f64 {
    2.0
}
fn default_normalize() -> bool {
    true
}

impl DatasetSpec {
    pub fn ring(modes: usize, scale: f64) -> Self {
        Self {
            kind: DatasetKind::GaussianRing,
            modes,
            scale,
            idx_path: None,
            normalize: true,
        }
    }

    pub fn checkerboard(scale: f64) -> Self {
        Self {
            kind: DatasetKind::Checkerboard,
            ..Self::ring(default_modes(), scale)
        }
    }

    pub fn idx(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: DatasetKind::ImageIdx,
            idx_path: Some(path.into()),
            ..Self::ring(default_modes(), default_scale())
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("malformed IDX file at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A sampler over a dataset. Batches depend only on the RNG passed in.
#[derive(Debug, Clone)]
pub enum Dataset {
    Ring { modes: usize, scale: f64 },
    Checkerboard { scale: f64 },
    Images { images: Tensor<f64> },
}

impl Dataset {
    pub fn open(spec: &DatasetSpec) -> Result<Self, DataError> {
        if !(spec.scale > 0.0 && spec.scale.is_finite()) {
            return Err(DataError::Spec(format!("scale must be positive, got {}", spec.scale)));
        }
        match spec.kind {
            DatasetKind::GaussianRing => {
                if spec.modes < 2 {
                    return Err(DataError::Spec(format!("ring needs at least 2 modes, got {}", spec.modes)));
                }
                Ok(Dataset::Ring {
                    modes: spec.modes,
                    scale: spec.scale,
                })
            }
            DatasetKind::Checkerboard => Ok(Dataset::Checkerboard { scale: spec.scale }),
            DatasetKind::ImageIdx => {
                let path = spec
                    .idx_path
                    .as_ref()
                    .ok_or_else(|| DataError::Spec("image_idx needs idx_path".into()))?;
                let bytes = fs::read(path).map_err(|source| DataError::Io {
                    path: path.clone(),
                    source,
                })?;
                let raw = parse_idx(&bytes)?;
                let images = if spec.normalize {
                    raw.map(|b| b / 127.5 - 1.0)
                } else {
                    raw.map(|b| b / 255.0)
                };
                Ok(Dataset::Images { images })
            }
        }
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Dataset::Ring { .. } | Dataset::Checkerboard { .. } => vec![2],
            Dataset::Images { images } => images.shape()[1..].to_vec(),
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Dataset::Images { .. })
    }

    /// `count` samples stacked along the leading axis.
    pub fn sample(&self, rng: &mut impl Rng, count: usize) -> Tensor<f64> {
        let mut shape = vec![count];
        shape.extend(self.sample_shape());
        let data = match self {
            Dataset::Ring { modes, scale } => {
                let std = scale / 20.0;
                let mut d = Vec::with_capacity(2 * count);
                for _ in 0..count {
                    let mode = rng.random_range(0..*modes);
                    let angle = TAU * mode as f64 / *modes as f64;
                    let noise: Tensor<f64> = rng::standard_normal(rng, &[2]);
                    d.push(scale * angle.cos() + std * noise.data()[0]);
                    d.push(scale * angle.sin() + std * noise.data()[1]);
                }
                d
            }
            Dataset::Checkerboard { scale } => {
                let unit = scale / 2.0;
                let mut d = Vec::with_capacity(2 * count);
                for _ in 0..count {
                    // One of the 8 dark cells of a 4×4 board, then a uniform point inside it.
                    let cell = rng.random_range(0..8usize);
                    let row = cell / 2;
                    let col = 2 * (cell % 2) + row % 2;
                    let u: f64 = rng.random();
                    let v: f64 = rng.random();
                    d.push(unit * (col as f64 + u - 2.0));
                    d.push(unit * (row as f64 + v - 2.0));
                }
                d
            }
            Dataset::Images { images } => {
                let n = images.shape()[0];
                let mut d = Vec::with_capacity(count * images.len() / n);
                for _ in 0..count {
                    d.extend_from_slice(images.row(rng.random_range(0..n)));
                }
                d
            }
        };
        Tensor::new(&shape, data).expect("sample shape")
    }
}

const IDX_U8_3D: u32 = 0x0000_0803;
const IDX_U8_4D: u32 = 0x0000_0804;

/// Parse an unsigned-byte IDX file into `[N, C, H, W]` with values in `0..=255`.
///
/// Three-dimensional files (`N × H × W`) get a single channel.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor<f64>, DataError> {
    let err = |offset: usize, reason: String| DataError::Idx { offset, reason };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "file ends inside the magic number".into()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let rank = match magic {
        IDX_U8_3D => 3,
        IDX_U8_4D => 4,
        _ => return Err(err(0, format!("magic 0x{magic:08x} is not an unsigned-byte image file"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(err(bytes.len(), format!("file ends inside the {rank}-dimension header")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 4 * i;
        let d = u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
        if d == 0 {
            return Err(err(at, format!("dimension {i} is zero")));
        }
        dims.push(d);
    }
    let expected = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let body = bytes.len() - header;
    if expected != Some(body) {
        return Err(err(
            header + body.min(expected.unwrap_or(usize::MAX)),
            format!("dimensions {dims:?} need {expected:?} data bytes, found {body}"),
        ));
    }
    if rank == 3 {
        dims.insert(1, 1);
    }
    let data = bytes[header..].iter().map(|&b| b as f64).collect();
    Ok(Tensor::new(&dims, data).expect("checked length"))
}

/// Serialize `[N, H, W]` or `[N, C, H, W]` byte images in IDX layout.
pub fn write_idx(dims: &[usize], pixels: &[u8]) -> Vec<u8> {
    assert!(dims.len() == 3 || dims.len() == 4, "IDX images are 3- or 4-dimensional");
    assert_eq!(dims.iter().product::<usize>(), pixels.len(), "pixel count");
    let magic = if dims.len() == 3 { IDX_U8_3D } else { IDX_U8_4D };
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + pixels.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

/// Small synthetic image set: bright horizontal or vertical bars on a dark
/// 16×16 field, one or two bars per image.
pub fn synthetic_bars(count: usize, seed: u64) -> Vec<u8> {
    const SIDE: usize = 16;
    let mut r = rng::seeded(seed, 0);
    let mut pixels = vec![0u8; count * SIDE * SIDE];
    for img in pixels.chunks_mut(SIDE * SIDE) {
        let bars = r.random_range(1..=2);
        for _ in 0..bars {
            let vertical: bool = r.random();
            let pos = r.random_range(2..SIDE - 4);
            let width = r.random_range(2..=3);
            for a in pos..pos + width {
                for b in 0..SIDE {
                    let (y, x) = if vertical { (b, a) } else { (a, b) };
                    img[y * SIDE + x] = 255;
                }
            }
        }
    }
    write_idx(&[count, SIDE, SIDE], &pixels)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let pixels: Vec<u8> = (0..4 * 8 * 8).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = write_idx(&[4, 8, 8], &pixels);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[4, 1, 8, 8]);
        let back: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
        assert_eq!(write_idx(&[4, 8, 8], &back), bytes);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let mut bytes = write_idx(&[2, 2, 2], &[0; 8]);
        bytes.pop();
        match parse_idx(&bytes) {
            Err(DataError::Idx { offset, .. }) => assert_eq!(offset, 16 + 7),
            other => panic!("{other:?}"),
        }
        match parse_idx(&[0, 0, 8, 1, 0]) {
            Err(DataError::Idx { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_idx(&[0, 0, 8, 3, 0, 0]) {
            Err(DataError::Idx { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checkerboard_lands_on_dark_cells() {
        let d = Dataset::open(&DatasetSpec::checkerboard(2.0)).unwrap();
        let x = d.sample(&mut rng::seeded(1, 0), 2000);
        for p in x.data().chunks(2) {
            let (c, r) = ((p[0] + 2.0).floor() as i64, (p[1] + 2.0).floor() as i64);
            assert!((0..4).contains(&c) && (0..4).contains(&r));
            assert_eq!((c + r) % 2, 0, "point {p:?}");
        }
    }
}
