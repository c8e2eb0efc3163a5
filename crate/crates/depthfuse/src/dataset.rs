//! TUM-layout sequences, images, depth PNGs, trajectories and camera files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use depthfuse_core::evaluation::associate;
use depthfuse_core::image::{rgb_to_intensity, WORKING_HEIGHT, WORKING_WIDTH};
use depthfuse_core::{CameraIntrinsics, DepthMap, Image, IntensityImage, RigidPose};
use nalgebra::Vector3;

pub const DEFAULT_DEPTH_DIVISOR: f64 = 5000.0;
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("MissingFile: {0}")]
    MissingFile(PathBuf),
    #[error("MalformedLine: {path}:{line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("UnsupportedFormat: {0}")]
    UnsupportedFormat(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

impl DatasetError {
    /// Line number of a `MalformedLine` error.
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::MalformedLine { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub rgb_path: PathBuf,
    pub gt_depth_path: Option<PathBuf>,
    /// Camera-to-world ground truth.
    pub gt_pose: Option<RigidPose>,
}

impl FrameRecord {
    /// Identifier used to look up predictions: the rgb file stem.
    pub fn frame_id(&self) -> String {
        self.rgb_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_path_buf()),
        _ => DatasetError::Io(e),
    })
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64, DatasetError> {
    tok.parse::<f64>().map_err(|_| DatasetError::MalformedLine {
        path: path.to_path_buf(),
        line,
        reason: format!("not a number: {tok}"),
    })
}

/// Reads an association file (`t_rgb rgb_path [t_depth depth_path]`). The
/// first data line fixes the token count (2 or 4); any line deviating from
/// it is malformed. Ground truth comes from `root/groundtruth.txt` when present,
/// matched by nearest timestamp. Records are returned sorted by timestamp.
pub fn load_sequence(root: &Path, associations: &Path) -> Result<Vec<FrameRecord>, DatasetError> {
    let assoc_path = if associations.is_absolute() {
        associations.to_path_buf()
    } else {
        root.join(associations)
    };
    let text = read_text(&assoc_path)?;
    let mut expected = None;
    let mut records = Vec::new();
    for (n, line) in data_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let want = *expected.get_or_insert(toks.len());
        if toks.len() != want || !(want == 2 || want == 4) {
            return Err(DatasetError::MalformedLine {
                path: assoc_path.clone(),
                line: n,
                reason: format!(
                    "expected {} tokens, found {}",
                    if want == 2 || want == 4 { want } else { 4 },
                    toks.len()
                ),
            });
        }
        let timestamp = parse_f64(toks[0], &assoc_path, n)?;
        let gt_depth_path = (want == 4).then(|| root.join(toks[3]));
        if want == 4 {
            parse_f64(toks[2], &assoc_path, n)?;
        }
        records.push(FrameRecord {
            timestamp,
            rgb_path: root.join(toks[1]),
            gt_depth_path,
            gt_pose: None,
        });
    }
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    for w in records.windows(2) {
        if w[0].timestamp == w[1].timestamp {
            return Err(DatasetError::MalformedLine {
                path: assoc_path.clone(),
                line: 0,
                reason: format!("duplicate timestamp {}", w[0].timestamp),
            });
        }
    }
    let gt_path = root.join("groundtruth.txt");
    if gt_path.exists() {
        let gt = read_trajectory(&gt_path)?;
        let te: Vec<f64> = records.iter().map(|r| r.timestamp).collect();
        let tg: Vec<f64> = gt.iter().map(|g| g.0).collect();
        for (i, j) in associate(&te, &tg, ASSOCIATION_TOLERANCE) {
            records[i].gt_pose = Some(gt[j].1);
        }
    }
    Ok(records)
}

/// 8-bit RGB image as `(interleaved bytes, width, height)`.
pub fn load_rgb(path: &Path) -> Result<(Vec<u8>, usize, usize), DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| DatasetError::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok((rgb.into_raw(), w, h))
}

pub fn rgb_image(bytes: &[u8], width: usize, height: usize) -> Image<[u8; 3]> {
    Image::from_fn(width, height, |x, y| {
        let i = 3 * (y * width + x);
        [bytes[i], bytes[i + 1], bytes[i + 2]]
    })
}

/// Luminance at working resolution.
pub fn to_intensity(
    bytes: &[u8],
    width: usize,
    height: usize,
) -> Result<IntensityImage, DatasetError> {
    rgb_to_intensity(bytes, width, height, WORKING_WIDTH, WORKING_HEIGHT)
        .map_err(|e| DatasetError::UnsupportedFormat(e.to_string()))
}

pub fn load_intensity(path: &Path) -> Result<IntensityImage, DatasetError> {
    let (b, w, h) = load_rgb(path)?;
    to_intensity(&b, w, h)
}

pub fn save_rgb(path: &Path, img: &Image<[u8; 3]>) -> Result<(), DatasetError> {
    let raw: Vec<u8> = img.data().iter().flatten().copied().collect();
    image::save_buffer(
        path,
        &raw,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| DatasetError::UnsupportedFormat(e.to_string()))
}

/// 16-bit single-channel PNG to meters; raw 0 becomes 0.0 (invalid).
pub fn load_depth_png(path: &Path, divisor: f64) -> Result<DepthMap, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| DatasetError::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let image::DynamicImage::ImageLuma16(buf) = img else {
        return Err(DatasetError::UnsupportedFormat(format!(
            "{}: not a 16-bit grey PNG",
            path.display()
        )));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let data = buf
        .into_raw()
        .into_iter()
        .map(|r| if r == 0 { 0.0 } else { r as f64 / divisor })
        .collect();
    Image::from_vec(w, h, data).map_err(|e| DatasetError::UnsupportedFormat(e.to_string()))
}

/// Depth in meters to a 16-bit PNG; invalid or out-of-range pixels become 0.
pub fn save_depth_png(path: &Path, depth: &DepthMap, divisor: f64) -> Result<(), DatasetError> {
    let raw: Vec<u16> = depth
        .data()
        .iter()
        .map(|d| {
            let r = (d * divisor).round();
            if d.is_finite() && *d > 0.0 && r <= u16::MAX as f64 {
                r as u16
            } else {
                0
            }
        })
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        depth.width() as u32,
        depth.height() as u32,
        raw,
    )
    .expect("buffer matches dimensions");
    buf.save(path)
        .map_err(|e| DatasetError::UnsupportedFormat(e.to_string()))
}

/// Depth at working resolution (nearest neighbour).
pub fn load_depth_working(path: &Path, divisor: f64) -> Result<DepthMap, DatasetError> {
    let d = load_depth_png(path, divisor)?;
    Ok(
        if d.width() == WORKING_WIDTH && d.height() == WORKING_HEIGHT {
            d
        } else {
            d.resize_nearest(WORKING_WIDTH, WORKING_HEIGHT)
        },
    )
}

pub fn load_labels_png(path: &Path) -> Result<Image<u8>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| DatasetError::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let image::DynamicImage::ImageLuma8(buf) = img else {
        return Err(DatasetError::UnsupportedFormat(format!(
            "{}: not an 8-bit grey PNG",
            path.display()
        )));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    Image::from_vec(w, h, buf.into_raw())
        .map_err(|e| DatasetError::UnsupportedFormat(e.to_string()))
}

pub fn save_labels_png(path: &Path, labels: &Image<u8>) -> Result<(), DatasetError> {
    image::save_buffer(
        path,
        labels.data(),
        labels.width() as u32,
        labels.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| DatasetError::UnsupportedFormat(e.to_string()))
}

/// Row-major little-endian `f32` map: `u32 width, u32 height, data`.
pub fn save_f32_map(path: &Path, img: &Image<f64>) -> Result<(), DatasetError> {
    let mut out = Vec::with_capacity(8 + 4 * img.len());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    for v in img.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_f32_map(path: &Path) -> Result<Image<f64>, DatasetError> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_path_buf()),
        _ => DatasetError::Io(e),
    })?;
    let bad = || DatasetError::UnsupportedFormat(format!("{}: truncated f32 map", path.display()));
    if bytes.len() < 8 {
        return Err(bad());
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * w * h {
        return Err(bad());
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Image::from_vec(w, h, data).map_err(|_| bad())
}

fn fmt6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

/// One TUM trajectory line: `timestamp tx ty tz qx qy qz qw`.
pub fn trajectory_line(timestamp: f64, pose: &RigidPose) -> String {
    let t = pose.translation();
    let q = pose.quaternion();
    [timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
        .map(fmt6)
        .join(" ")
}

/// Writes camera-to-world poses in TUM format.
pub fn write_trajectory(path: &Path, poses: &[(f64, RigidPose)]) -> Result<(), DatasetError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for (t, p) in poses {
        writeln!(f, "{}", trajectory_line(*t, p))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, RigidPose)>, DatasetError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in data_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(DatasetError::MalformedLine {
                path: path.to_path_buf(),
                line: n,
                reason: format!("expected 8 tokens, found {}", toks.len()),
            });
        }
        let v: Vec<f64> = toks
            .iter()
            .map(|t| parse_f64(t, path, n))
            .collect::<Result<_, _>>()?;
        let qn = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if !(qn > 0.0) {
            return Err(DatasetError::MalformedLine {
                path: path.to_path_buf(),
                line: n,
                reason: "zero quaternion".into(),
            });
        }
        out.push((
            v[0],
            RigidPose::from_quaternion([v[4], v[5], v[6], v[7]], Vector3::new(v[1], v[2], v[3])),
        ));
    }
    Ok(out)
}

/// Camera file contents: native-resolution intrinsics and the provider's
/// training focal length (pixels at working resolution).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraConfig {
    pub intrinsics: CameraIntrinsics,
    pub f_train: Option<f64>,
}

impl CameraConfig {
    /// Intrinsics rescaled to the working resolution.
    pub fn working_intrinsics(&self) -> CameraIntrinsics {
        let k = self.intrinsics;
        if k.width == WORKING_WIDTH && k.height == WORKING_HEIGHT {
            k
        } else {
            k.resized(WORKING_WIDTH, WORKING_HEIGHT)
        }
    }

    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let mut s = format!(
            "fx={}\nfy={}\ncx={}\ncy={}\nwidth={}\nheight={}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        );
        if let Some(f) = self.f_train {
            s.push_str(&format!("f_train={f}\n"));
        }
        s
    }
}

/// Parses `key=value` lines with `#` comments.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>, DatasetError> {
    let mut out = Vec::new();
    for (n, line) in data_lines(text) {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(DatasetError::MalformedLine {
                path: path.to_path_buf(),
                line: n,
                reason: "expected key=value".into(),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn load_camera(path: &Path) -> Result<CameraConfig, DatasetError> {
    let text = read_text(path)?;
    let kv = parse_key_values(&text, path)?;
    let get =
        |key: &str| -> Result<f64, DatasetError> {
            let (_, v) = kv.iter().rev().find(|(k, _)| k == key).ok_or_else(|| {
                DatasetError::MalformedLine {
                    path: path.to_path_buf(),
                    line: 0,
                    reason: format!("missing key {key}"),
                }
            })?;
            parse_f64(v, path, 0)
        };
    let (w, h) = (get("width")?, get("height")?);
    let intrinsics = CameraIntrinsics::new(
        get("fx")?,
        get("fy")?,
        get("cx")?,
        get("cy")?,
        w as usize,
        h as usize,
    )
    .map_err(|e| DatasetError::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let f_train = if kv.iter().any(|(k, _)| k == "f_train") {
        Some(get("f_train")?)
    } else {
        None
    };
    Ok(CameraConfig {
        intrinsics,
        f_train,
    })
}
