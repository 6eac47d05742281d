//! Point annotations, the dataset manifest, and prediction persistence.
//!
//! # Manifest format
//!
//! A manifest is a JSON Lines file: one JSON object per image, blank lines ignored.
//!
//! ```text
//! {"image_id": "scene_000", "image": "images/scene_000.png", "split": "train", "points": [[12.5, 40.25], [80.0, 3.0]]}
//! ```
//!
//! * `image_id` — unique within its split.
//! * `image` — path to the image, relative to the manifest's directory unless absolute.
//! * `split` — `train`, `val` or `test` (default `train`).
//! * `points` — `[row, col]` pairs in pixels; sub-pixel values are allowed. Every point must
//!   satisfy `0 <= row < height` and `0 <= col < width` of the image; points on the
//!   bottom/right edge are rejected.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groundtruth::{CrowdMask, DensityLevelMask, DensityMap, Grid};
use crate::scalar::Scalar;

/// Object centres `(row, col)` for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_id: String,
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotation {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Checks that every coordinate is finite and inside an `height x width` image.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for &(row, col) in &self.points {
            let inside = row.is_finite()
                && col.is_finite()
                && row >= 0.0
                && col >= 0.0
                && row < height as f64
                && col < width as f64;
            if !inside {
                return Err(Error::PointOutOfBounds {
                    image_id: self.image_id.clone(),
                    row,
                    col,
                    height,
                    width,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image_id: String,
    image: PathBuf,
    #[serde(default)]
    split: Split,
    points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Resolved image path.
    pub image_path: PathBuf,
    pub split: Split,
    pub annotation: PointAnnotation,
    pub height: usize,
    pub width: usize,
}

impl ManifestEntry {
    pub fn image_id(&self) -> &str {
        &self.annotation.image_id
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Reads and validates a manifest. Image files are opened only to read their dimensions.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let image_path = if record.image.is_absolute() { record.image.clone() } else { root.join(&record.image) };
        let (width, height) = image::image_dimensions(&image_path)
            .map_err(|source| Error::Image { path: image_path.clone(), source })?;
        let annotation = PointAnnotation { image_id: record.image_id, points: record.points };
        annotation.validate(height as usize, width as usize)?;
        if !seen.insert((record.split, annotation.image_id.clone())) {
            return Err(Error::DuplicateImage { image_id: annotation.image_id, split: record.split.to_string() });
        }
        entries.push(ManifestEntry {
            image_path,
            split: record.split,
            annotation,
            height: height as usize,
            width: width as usize,
        });
    }
    Ok(DatasetManifest { entries })
}

/// Writes a manifest; image paths under the manifest's directory are stored relative to it.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for e in &manifest.entries {
        let image = e.image_path.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| e.image_path.clone());
        let record = Record {
            image_id: e.annotation.image_id.clone(),
            image,
            split: e.split,
            points: e.annotation.points.clone(),
        };
        serde_json::to_writer(&mut out, &record).expect("record serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a 2-D array in NumPy `.npy` (format 1.0) little-endian C order.
pub fn write_npy<T: Scalar>(path: &Path, shape: &[usize], data: &[T]) -> Result<()> {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    let descr = match T::DTYPE {
        "f32" => "<f4",
        _ => "<f8",
    };
    let dims = shape.iter().map(|d| format!("{d},")).collect::<String>();
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': ({dims}), }}");
    // Magic (6) + version (2) + length (2) + header + newline, padded to 64 bytes.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + data.len() * T::BYTES);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for &v in data {
        v.write_le(&mut bytes);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `.npy` file of `<f4` or `<f8` values in C order.
pub fn read_npy<T: Scalar>(path: &Path) -> Result<(Vec<usize>, Vec<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Format { path: path.to_path_buf(), message: message.to_string() };
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("not an npy file"));
    }
    let (header_len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => (u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize, 12),
        _ => return Err(bad("unsupported npy version")),
    };
    let header = std::str::from_utf8(bytes.get(start..start + header_len).ok_or_else(|| bad("truncated header"))?)
        .map_err(|_| bad("header is not utf-8"))?;
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran order is not supported"));
    }
    let width = if header.contains("'<f4'") {
        4
    } else if header.contains("'<f8'") {
        8
    } else {
        return Err(bad("only little-endian float arrays are supported"));
    };
    let shape_src = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("missing shape"))?;
    let shape: Vec<usize> = shape_src
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape entry")))
        .collect::<Result<_>>()?;
    let numel: usize = shape.iter().product();
    let body = &bytes[start + header_len..];
    if body.len() != numel * width {
        return Err(bad("payload size does not match shape"));
    }
    let data = body
        .chunks(width)
        .map(|c| if width == 4 { T::of(f32::read_le(c) as f64) } else { T::of(f64::read_le(c)) })
        .collect();
    Ok((shape, data))
}

/// Reads a density map written by [`save_prediction`].
pub fn load_density<T: Scalar>(path: &Path) -> Result<DensityMap<T>> {
    let (shape, data) = read_npy(path)?;
    match shape[..] {
        [height, width] => Ok(Grid { height, width, data }),
        _ => Err(Error::Format { path: path.to_path_buf(), message: format!("expected 2-D array, got {shape:?}") }),
    }
}

/// Predicted auxiliary masks for one image.
#[derive(Clone, Debug)]
pub struct PredictedMasks {
    pub crowd: CrowdMask,
    pub levels: DensityLevelMask,
}

/// Maps `value / max` to an 8-bit grey level (all-zero maps stay black).
pub fn density_to_gray<T: Scalar>(density: &DensityMap<T>) -> image::GrayImage {
    let max = density.data.iter().fold(0.0f64, |m, v| m.max(v.to_f64_lossy()));
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let pixels = density
        .data
        .iter()
        .map(|v| (v.to_f64_lossy().max(0.0) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    image::GrayImage::from_raw(density.width as u32, density.height as u32, pixels).expect("buffer size")
}

pub fn crowd_to_gray(mask: &CrowdMask) -> image::GrayImage {
    let pixels = mask.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(mask.width as u32, mask.height as u32, pixels).expect("buffer size")
}

pub fn levels_to_gray(mask: &DensityLevelMask) -> image::GrayImage {
    let top = mask.num_classes() as f64;
    let pixels = mask.grid.data.iter().map(|&c| (c as f64 * 255.0 / top).round() as u8).collect();
    image::GrayImage::from_raw(mask.grid.width as u32, mask.grid.height as u32, pixels).expect("buffer size")
}

fn save_png(img: &image::GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Persists a density map losslessly as `<id>_density.npy` (32-bit floats) with an 8-bit
/// visualization, plus optional mask images. Returns the written paths.
pub fn save_prediction<T: Scalar>(
    image_id: &str,
    density: &DensityMap<T>,
    masks: Option<&PredictedMasks>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let npy = out_dir.join(format!("{image_id}_density.npy"));
    let as_f32: Vec<f32> = density.data.iter().map(|v| v.to_f64_lossy() as f32).collect();
    write_npy(&npy, &[density.height, density.width], &as_f32)?;
    written.push(npy);
    let vis = out_dir.join(format!("{image_id}_density.png"));
    save_png(&density_to_gray(density), &vis)?;
    written.push(vis);
    if let Some(m) = masks {
        let crowd = out_dir.join(format!("{image_id}_crowd.png"));
        save_png(&crowd_to_gray(&m.crowd), &crowd)?;
        written.push(crowd);
        let levels = out_dir.join(format!("{image_id}_levels.png"));
        save_png(&levels_to_gray(&m.levels), &levels)?;
        written.push(levels);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_image(dir: &Path, name: &str, w: u32, h: u32) {
        image::RgbImage::new(w, h).save(dir.join(name)).unwrap();
    }

    #[test]
    fn loads_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png", 20, 10);
        write_image(dir.path(), "b.png", 8, 8);
        let text = concat!(
            r#"{"image_id":"a","image":"a.png","points":[[1.5,2.0],[9.9,19.9]]}"#,
            "\n\n",
            r#"{"image_id":"b","image":"b.png","split":"val","points":[]}"#,
            "\n"
        );
        let path = dir.path().join("m.jsonl");
        fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!((m.entries[0].height, m.entries[0].width), (10, 20));
        assert_eq!(m.split(Split::Val).len(), 1);
        assert_eq!(m.entries[0].annotation.count(), 2);
    }

    #[test]
    fn point_on_right_edge_is_rejected_by_id() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png", 16, 16);
        let path = dir.path().join("m.jsonl");
        fs::write(&path, r#"{"image_id":"edge_case","image":"a.png","points":[[3.0,16.0]]}"#).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::PointOutOfBounds { .. }));
        assert!(err.to_string().contains("edge_case"));
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png", 4, 4);
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "{\"image_id\":\"a\",\"image\":\"a.png\",\"points\":[]}\n{not json\n").unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(load_manifest(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
    }

    #[test]
    fn duplicate_ids_within_split_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png", 4, 4);
        let line = r#"{"image_id":"a","image":"a.png","points":[]}"#;
        let path = dir.path().join("m.jsonl");
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::DuplicateImage { .. })));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_image(dir.path(), "a.png", 12, 6);
        let path = dir.path().join("m.jsonl");
        fs::write(&path, r#"{"image_id":"a","image":"a.png","split":"test","points":[[0.25,11.75]]}"#).unwrap();
        let m = load_manifest(&path).unwrap();
        let again = dir.path().join("again.jsonl");
        save_manifest(&m, &again).unwrap();
        assert_eq!(load_manifest(&again).unwrap(), m);
    }

    #[test]
    fn density_round_trip_preserves_sum() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data: Vec<f64> = (0..64 * 48).map(|_| rng.random::<f64>()).collect();
        let s: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v *= 57.3 / s);
        let d = Grid { height: 64, width: 48, data };
        let paths = save_prediction("img", &d, None, dir.path()).unwrap();
        let back: DensityMap<f64> = load_density(&paths[0]).unwrap();
        assert_eq!(back.shape(), (64, 48));
        assert!((back.sum() - 57.3).abs() < 1e-4);
        assert!(((back.sum() - d.sum()) / d.sum()).abs() < 1e-6);

        let zeros = Grid::filled(5, 5, 0.0f32);
        let paths = save_prediction("zero", &zeros, None, dir.path()).unwrap();
        assert_eq!(load_density::<f32>(&paths[0]).unwrap().sum(), 0.0);
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let d = Grid::filled(2, 2, 0.0f32);
        assert!(save_prediction("x", &d, None, &blocker.join("sub")).is_err());
    }

    proptest! {
        #[test]
        fn validation_accepts_exactly_in_bounds_points(
            row in -5.0f64..25.0, col in -5.0f64..25.0, h in 1usize..20, w in 1usize..20,
        ) {
            let a = PointAnnotation { image_id: "p".into(), points: vec![(row, col)] };
            let inside = row >= 0.0 && col >= 0.0 && row < h as f64 && col < w as f64;
            prop_assert_eq!(a.validate(h, w).is_ok(), inside);
        }
    }
}
