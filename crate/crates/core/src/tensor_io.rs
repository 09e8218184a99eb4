//! On-disk formats shared by every stage of the toolkit.
//!
//! - Tensors: a minimal little-endian f32 container (`ATNT`).
//! - Masks: binary P5 PGM with maxval 255.
//! - Manifests: one tab-separated `key=value` record per line.
//!
//! All writers are byte-deterministic: the same value always produces the same
//! file.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::BoundingBox;

pub const TENSOR_MAGIC: [u8; 4] = *b"ATNT";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u8 = 0;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"ATNT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported tensor version {0}")]
    VersionMismatch(u32),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("truncated file: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload size mismatch: dims imply {expected} bytes, payload has {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("not a binary P5 PGM file")]
    NotP5,
    #[error("PGM maxval must be 255, got {0}")]
    BadMaxval(u32),
    #[error("malformed PGM header")]
    BadPgmHeader,
    #[error("invalid mask pixel value {value} at index {index}")]
    InvalidMask { index: usize, value: u8 },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("image decode failed for {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl TensorIoError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorIoError>;

/// A dense row-major f32 tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorIoError::InvalidShape(dims));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(TensorIoError::SizeMismatch {
                expected: n * 4,
                actual: data.len() * 4,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        assert!(!dims.is_empty() && n > 0, "invalid shape {dims:?}");
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    /// Build from f64 values, rounding to f32.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.push(DTYPE_F32_LE);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(TensorIoError::Truncated {
                    needed,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != TENSOR_MAGIC {
            return Err(TensorIoError::BadMagic { found: magic });
        }
        need(10)?;
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != TENSOR_VERSION {
            return Err(TensorIoError::VersionMismatch(version));
        }
        if bytes[8] != DTYPE_F32_LE {
            return Err(TensorIoError::UnsupportedDtype(bytes[8]));
        }
        let ndim = bytes[9] as usize;
        let header = 10 + 8 * ndim;
        need(header)?;
        let dims: Vec<usize> = bytes[10..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorIoError::InvalidShape(dims));
        }
        let expected = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorIoError::InvalidShape(dims.clone()))?;
        let payload = &bytes[header..];
        if payload.len() < expected {
            return Err(TensorIoError::Truncated {
                needed: header + expected,
                have: bytes.len(),
            });
        }
        if payload.len() != expected {
            return Err(TensorIoError::SizeMismatch {
                expected,
                actual: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| TensorIoError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TensorIoError::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

/// A binary mask stored as {0, 255} bytes, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl fmt::Debug for MaskImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MaskImage {}x{} ({} fg)",
            self.width,
            self.height,
            self.count_foreground()
        )
    }
}

impl MaskImage {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(TensorIoError::InvalidShape(vec![height, width]));
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0 && v != 255)
        {
            return Err(TensorIoError::InvalidMask { index, value });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn from_bools(width: usize, height: usize, fg: &[bool]) -> Self {
        assert_eq!(fg.len(), width * height);
        Self {
            width,
            height,
            values: fg.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] != 0
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v != 0).collect()
    }

    pub fn count_foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.values);
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 || &bytes[0..2] != b"P5" {
            return Err(TensorIoError::NotP5);
        }
        let mut pos = 2;
        let mut fields = [0u32; 3];
        for field in fields.iter_mut() {
            // whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(TensorIoError::BadPgmHeader),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(TensorIoError::BadPgmHeader);
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or(TensorIoError::BadPgmHeader)?;
        }
        // exactly one whitespace byte separates the header from the raster
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(TensorIoError::BadPgmHeader);
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(TensorIoError::BadMaxval(maxval));
        }
        let (width, height) = (width as usize, height as usize);
        let n = width * height;
        let raster = &bytes[pos..];
        if raster.len() < n {
            return Err(TensorIoError::Truncated {
                needed: pos + n,
                have: bytes.len(),
            });
        }
        Self::new(width, height, raster[..n].to_vec())
    }
}

pub fn write_mask(m: &MaskImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_pgm_bytes()).map_err(|e| TensorIoError::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TensorIoError::io(path, e))?;
    MaskImage::from_pgm_bytes(&bytes)
}

/// An RGB image with interleaved channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, idx: usize) -> [f32; 3] {
        [
            self.data[3 * idx],
            self.data[3 * idx + 1],
            self.data[3 * idx + 2],
        ]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.dims() {
            &[h, w, 3] => Ok(Self::new(w, h, t.data().to_vec())),
            d => Err(TensorIoError::InvalidShape(d.to_vec())),
        }
    }
}

/// Load an RGB image. PNG files go through the `image` crate; anything else
/// is read as an `H x W x 3` tensor.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return RgbImage::from_tensor(&read_tensor(path)?);
    }
    let img = image::open(path)
        .map_err(|e| TensorIoError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(RgbImage::new(w as usize, h as usize, data))
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| TensorIoError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub attn: PathBuf,
    pub gt_mask: Option<PathBuf>,
    pub gt_boxes: Option<Vec<BoundingBox>>,
    pub label: String,
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

    /// Parse manifest text. Relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            entries.push(parse_entry(line, line_no, base)?);
        }
        Ok(Self { entries })
    }

    /// Serialise with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| -> String {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("image={}\tattn={}", rel(&e.image), rel(&e.attn)));
            if let Some(m) = &e.gt_mask {
                out.push_str(&format!("\tgt_mask={}", rel(m)));
            }
            if let Some(boxes) = &e.gt_boxes {
                let s: Vec<String> = boxes
                    .iter()
                    .map(|b| format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1))
                    .collect();
                out.push_str(&format!("\tgt_boxes={}", s.join(";")));
            }
            out.push_str(&format!("\tlabel={}\n", e.label));
        }
        out
    }
}

fn parse_entry(line: &str, line_no: usize, base: &Path) -> Result<ManifestEntry> {
    let err = |message: String| TensorIoError::Manifest {
        line: line_no,
        message,
    };
    let (mut image, mut attn, mut gt_mask, mut gt_boxes, mut label) = (None, None, None, None, None);
    for field in line.split('\t').filter(|f| !f.is_empty()) {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("field {field:?} is not key=value")))?;
        match key.trim() {
            "image" => image = Some(base.join(value)),
            "attn" => attn = Some(base.join(value)),
            "gt_mask" => gt_mask = Some(base.join(value)),
            "gt_boxes" => gt_boxes = Some(parse_boxes(value).map_err(err)?),
            "label" => label = Some(value.to_string()),
            other => return Err(err(format!("unknown field {other:?}"))),
        }
    }
    Ok(ManifestEntry {
        image: image.ok_or_else(|| err("missing required field image".into()))?,
        attn: attn.ok_or_else(|| err("missing required field attn".into()))?,
        gt_mask,
        gt_boxes,
        label: label.ok_or_else(|| err("missing required field label".into()))?,
    })
}

fn parse_boxes(value: &str) -> std::result::Result<Vec<BoundingBox>, String> {
    value
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let c: Vec<usize> = s
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("bad box {s:?}: {e}"))?;
            match c[..] {
                [x0, y0, x1, y1] if x0 <= x1 && y0 <= y1 => Ok(BoundingBox { x0, y0, x1, y1 }),
                _ => Err(format!("bad box {s:?}")),
            }
        })
        .collect()
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TensorIoError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    DatasetManifest::parse(&text, base)
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = fs::File::create(path).map_err(|e| TensorIoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(m.to_text(base).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| TensorIoError::io(path, e))
}
