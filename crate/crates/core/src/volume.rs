//! Volumes, label maps and the `.vvolh`/`.vvol` on-disk format.
//!
//! A volume is stored as a JSON header (`name.vvolh`) next to a raw,
//! contiguous little-endian payload (`name.vvol`). Voxel `(z, y, x)` lives at
//! offset `((z * H) + y) * W + x`; axial slices are z-planes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BACKGROUND: u8 = 0;
pub const LUMEN: u8 = 1;
pub const WALL: u8 = 2;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },
    #[error("payload size mismatch for {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("slice index {z} out of range for depth {depth}")]
    SliceOutOfRange { z: usize, depth: usize },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch(Dims, Dims),
    #[error("expected a {expected} volume, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Grid size as (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 3]", from = "[usize; 3]")]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub const fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.w;
        let y = (idx / self.w) % self.h;
        let z = idx / (self.w * self.h);
        (z, y, x)
    }
}

impl From<[usize; 3]> for Dims {
    fn from(v: [usize; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        [d.d, d.h, d.w]
    }
}

/// Voxel spacing in millimetres as (sz, sy, sx).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const fn isotropic(mm: f64) -> Self {
        Self([mm, mm, mm])
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|s| s.is_finite() && *s > 0.0)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::isotropic(1.0)
    }
}

/// Dense row-major 2D array, used for axial slices and 2D masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![T::default(); h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w, "plane data length");
        Self { h, w, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.w + x] = v;
    }

    pub fn same_shape<U>(&self, other: &Plane<U>) -> bool {
        self.h == other.h && self.w == other.w
    }
}

impl Plane<u8> {
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub const fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "f32" => Ok(Dtype::F32),
            other => Err(VolumeError::UnknownDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Label,
}

/// Scalar payload of an image volume.
#[derive(Debug, Clone)]
pub enum VoxelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::F32(_) => Dtype::F32,
        }
    }

    #[inline]
    pub fn get_f32(&self, idx: usize) -> f32 {
        match self {
            VoxelData::U8(v) => v[idx] as f32,
            VoxelData::F32(v) => v[idx],
        }
    }
}

// Bitwise comparison so that NaN payloads still compare equal to themselves.
impl PartialEq for VoxelData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (VoxelData::U8(a), VoxelData::U8(b)) => a == b,
            (VoxelData::F32(a), VoxelData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Scalar 3D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: VoxelData,
    pub intensity_range: Option<(f64, f64)>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: Spacing, data: VoxelData) -> Result<Self> {
        let v = Self {
            dims,
            spacing,
            data,
            intensity_range: None,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn from_f32(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::F32(data))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(VolumeError::Invalid(format!(
                "dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self.data.len() != self.dims.len() {
            return Err(VolumeError::Invalid(format!(
                "data length {} != {}",
                self.data.len(),
                self.dims.len()
            )));
        }
        if !self.spacing.is_valid() {
            return Err(VolumeError::Invalid(format!(
                "spacing must be positive, got {:?}",
                self.spacing.0
            )));
        }
        Ok(())
    }

    /// Intensities as f32 regardless of storage type.
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::F32(v) => v.clone(),
        }
    }

    pub fn extract_slice(&self, z: usize) -> Result<Plane<f32>> {
        check_z(self.dims, z)?;
        let n = self.dims.plane_len();
        let start = z * n;
        let data = (start..start + n).map(|i| self.data.get_f32(i)).collect();
        Ok(Plane::from_vec(self.dims.h, self.dims.w, data))
    }
}

/// Voxel-wise class map {0 background, 1 lumen, 2 wall} with the list of
/// axial slices that carry labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<u8>,
    pub annotated_slices: Vec<usize>,
}

impl LabelVolume {
    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            data: vec![BACKGROUND; dims.len()],
            annotated_slices: Vec::new(),
        }
    }

    pub fn new(
        dims: Dims,
        spacing: Spacing,
        data: Vec<u8>,
        annotated_slices: Vec<usize>,
    ) -> Result<Self> {
        let v = Self {
            dims,
            spacing,
            data,
            annotated_slices,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(VolumeError::Invalid("dims must be positive".into()));
        }
        if self.data.len() != self.dims.len() {
            return Err(VolumeError::Invalid(format!(
                "data length {} != {}",
                self.data.len(),
                self.dims.len()
            )));
        }
        if !self.spacing.is_valid() {
            return Err(VolumeError::Invalid("spacing must be positive".into()));
        }
        if let Some(bad) = self.data.iter().find(|&&v| v > WALL) {
            return Err(VolumeError::Invalid(format!("label value {bad} not in {{0,1,2}}")));
        }
        if self.annotated_slices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(VolumeError::Invalid(
                "annotated_slices must be strictly increasing".into(),
            ));
        }
        if let Some(&z) = self.annotated_slices.last() {
            if z >= self.dims.d {
                return Err(VolumeError::SliceOutOfRange {
                    z,
                    depth: self.dims.d,
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn is_annotated(&self, z: usize) -> bool {
        self.annotated_slices.binary_search(&z).is_ok()
    }

    pub fn extract_slice(&self, z: usize) -> Result<Plane<u8>> {
        check_z(self.dims, z)?;
        let n = self.dims.plane_len();
        Ok(Plane::from_vec(
            self.dims.h,
            self.dims.w,
            self.data[z * n..(z + 1) * n].to_vec(),
        ))
    }

    pub fn slice_data(&self, z: usize) -> &[u8] {
        let n = self.dims.plane_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn insert_slice(&mut self, z: usize, plane: &Plane<u8>) -> Result<()> {
        check_z(self.dims, z)?;
        if plane.h != self.dims.h || plane.w != self.dims.w {
            return Err(VolumeError::Invalid(format!(
                "plane {}x{} does not fit volume {:?}",
                plane.h, plane.w, self.dims
            )));
        }
        let n = self.dims.plane_len();
        self.data[z * n..(z + 1) * n].copy_from_slice(&plane.data);
        Ok(())
    }

    /// Binary mask of one class as 0/1 bytes.
    pub fn class_mask(&self, class_id: u8) -> Vec<u8> {
        self.data.iter().map(|&v| u8::from(v == class_id)).collect()
    }

    pub fn same_grid(&self, other: &LabelVolume) -> Result<()> {
        if self.dims != other.dims {
            return Err(VolumeError::DimMismatch(self.dims, other.dims));
        }
        Ok(())
    }
}

fn check_z(dims: Dims, z: usize) -> Result<()> {
    if z >= dims.d {
        return Err(VolumeError::SliceOutOfRange { z, depth: dims.d });
    }
    Ok(())
}

/// JSON sidecar describing a payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing: Spacing,
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
    pub kind: VolumeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_slices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity_range: Option<(f64, f64)>,
}

/// Either kind of volume, as returned by [`read_volume`].
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Image(Volume3D),
    Label(LabelVolume),
}

impl AnyVolume {
    fn kind_name(&self) -> &'static str {
        match self {
            AnyVolume::Image(_) => "image",
            AnyVolume::Label(_) => "label",
        }
    }

    pub fn into_image(self) -> Result<Volume3D> {
        match self {
            AnyVolume::Image(v) => Ok(v),
            other => Err(VolumeError::WrongKind {
                expected: "image",
                found: other.kind_name(),
            }),
        }
    }

    pub fn into_label(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::Label(v) => Ok(v),
            other => Err(VolumeError::WrongKind {
                expected: "label",
                found: other.kind_name(),
            }),
        }
    }
}

impl From<Volume3D> for AnyVolume {
    fn from(v: Volume3D) -> Self {
        AnyVolume::Image(v)
    }
}

impl From<LabelVolume> for AnyVolume {
    fn from(v: LabelVolume) -> Self {
        AnyVolume::Label(v)
    }
}

/// Payload path paired with a header path (`x.vvolh` -> `x.vvol`).
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("vvol")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| VolumeError::Header {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let dtype = Dtype::parse(&header.dtype)?;
    let bad_header = |reason: String| VolumeError::Header {
        path: path.to_path_buf(),
        reason,
    };
    if header.byte_order != "little" {
        return Err(bad_header(format!("unsupported byte order `{}`", header.byte_order)));
    }
    if header.layout != "zyx" {
        return Err(bad_header(format!("unsupported layout `{}`", header.layout)));
    }

    let payload_file = payload_path(path);
    let bytes = fs::read(&payload_file).map_err(io_err(&payload_file))?;
    let expected = header.dims.len() * dtype.size();
    if bytes.len() != expected {
        return Err(VolumeError::SizeMismatch {
            path: payload_file,
            expected,
            found: bytes.len(),
        });
    }

    match header.kind {
        VolumeKind::Label => {
            if dtype != Dtype::U8 {
                return Err(bad_header("label volumes must be u8".into()));
            }
            let v = LabelVolume::new(
                header.dims,
                header.spacing,
                bytes,
                header.annotated_slices.unwrap_or_default(),
            )?;
            Ok(AnyVolume::Label(v))
        }
        VolumeKind::Image => {
            let data = match dtype {
                Dtype::U8 => VoxelData::U8(bytes),
                Dtype::F32 => VoxelData::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
            };
            let mut v = Volume3D::new(header.dims, header.spacing, data)?;
            v.intensity_range = header.intensity_range;
            Ok(AnyVolume::Image(v))
        }
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Volume3D> {
    read_volume(path)?.into_image()
}

pub fn read_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    read_volume(path)?.into_label()
}

pub fn header_of(v: &AnyVolume) -> VolumeHeader {
    match v {
        AnyVolume::Image(img) => VolumeHeader {
            dims: img.dims,
            spacing: img.spacing,
            dtype: dtype_tag(img.data.dtype()).into(),
            byte_order: "little".into(),
            layout: "zyx".into(),
            kind: VolumeKind::Image,
            annotated_slices: None,
            intensity_range: img.intensity_range,
        },
        AnyVolume::Label(lab) => VolumeHeader {
            dims: lab.dims,
            spacing: lab.spacing,
            dtype: "u8".into(),
            byte_order: "little".into(),
            layout: "zyx".into(),
            kind: VolumeKind::Label,
            annotated_slices: Some(lab.annotated_slices.clone()),
            intensity_range: None,
        },
    }
}

fn dtype_tag(d: Dtype) -> &'static str {
    match d {
        Dtype::U8 => "u8",
        Dtype::F32 => "f32",
    }
}

/// Raw little-endian payload bytes.
pub fn encode_payload(v: &AnyVolume) -> Vec<u8> {
    match v {
        AnyVolume::Label(lab) => lab.data.clone(),
        AnyVolume::Image(img) => match &img.data {
            VoxelData::U8(d) => d.clone(),
            VoxelData::F32(d) => d.iter().flat_map(|x| x.to_le_bytes()).collect(),
        },
    }
}

/// Writes `path` (the `.vvolh` header) and its `.vvol` payload.
pub fn write_volume(v: &AnyVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match v {
        AnyVolume::Image(img) => img.validate()?,
        AnyVolume::Label(lab) => lab.validate()?,
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let header = serde_json::to_string_pretty(&header_of(v)).expect("header serializes");
    fs::write(path, header).map_err(io_err(path))?;
    let payload_file = payload_path(path);
    fs::write(&payload_file, encode_payload(v)).map_err(io_err(&payload_file))?;
    Ok(())
}

pub fn write_image(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&AnyVolume::Image(v.clone()), path)
}

pub fn write_label(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&AnyVolume::Label(v.clone()), path)
}
