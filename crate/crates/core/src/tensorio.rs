//! On-disk formats: binary tensors, camera lists, per-scene dataset folders and
//! ASCII PLY point clouds.
//!
//! Tensor files are `"LSMT"`, a little-endian `u16` version (1), a `u8` dtype
//! (1 = f32, 2 = u8), a `u8` rank in `1..=8`, `rank` little-endian `u32` dims,
//! then the row-major payload.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{Camera, Intrinsics, Mat3, Pose, Vec3, VoxelGridSpec};

pub const MAGIC: &[u8; 4] = b"LSMT";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    U8 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorValues {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorValues {
    pub fn dtype(&self) -> DType {
        match self {
            TensorValues::F32(_) => DType::F32,
            TensorValues::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorValues::F32(v) => v.len(),
            TensorValues::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorValues::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorValues::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub values: TensorValues,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, values: TensorValues) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::invalid(format!("tensor rank must be 1..={MAX_RANK}, got {}", dims.len())));
        }
        if let Some(d) = dims.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(Error::invalid(format!("dimension {d} does not fit in u32")));
        }
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!("dims {dims:?} hold {n} values, got {}", values.len())));
        }
        Ok(Self { dims, values })
    }

    pub fn f32_from_f64(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(dims, TensorValues::F32(values.iter().map(|&x| x as f32).collect()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.values.dtype();
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + self.values.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.values {
            TensorValues::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorValues::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Parse a complete file image; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |field: &'static str, offset: usize, detail: String| Error::TensorFormat {
            path: path.to_path_buf(),
            field,
            offset: offset as u64,
            detail,
        };
        let take = |field: &'static str, offset: usize, len: usize| {
            bytes
                .get(offset..offset + len)
                .ok_or_else(|| bad(field, offset, format!("file ends after {} bytes", bytes.len())))
        };
        let magic = take("magic", 0, 4)?;
        if magic != MAGIC {
            return Err(bad("magic", 0, format!("expected \"LSMT\", found {magic:?}")));
        }
        let version = u16::from_le_bytes(take("version", 4, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad("version", 4, format!("unsupported version {version}")));
        }
        let dtype = match take("dtype", 6, 1)?[0] {
            1 => DType::F32,
            2 => DType::U8,
            d => return Err(bad("dtype", 6, format!("unknown code {d}"))),
        };
        let rank = take("rank", 7, 1)?[0] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad("rank", 7, format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for a in 0..rank {
            let off = 8 + 4 * a;
            dims.push(u32::from_le_bytes(take("dims", off, 4)?.try_into().unwrap()) as usize);
        }
        let start = 8 + 4 * rank;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| bad("dims", 8, format!("{dims:?} overflows the address space")))?;
        let payload = &bytes[start.min(bytes.len())..];
        if payload.len() != n {
            return Err(bad(
                "payload",
                start,
                format!("expected {n} bytes for dims {dims:?}, found {}", payload.len()),
            ));
        }
        let values = match dtype {
            DType::F32 => TensorValues::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorValues::U8(payload.to_vec()),
        };
        Ok(Self { dims, values })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(&bytes, path)
}

/// Read a tensor and check its dtype and dims.
pub fn read_tensor_expect(path: impl AsRef<Path>, dtype: DType, dims: Option<&[usize]>) -> Result<TensorFile> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    if t.values.dtype() != dtype {
        return Err(Error::invalid(format!(
            "{}: expected dtype {dtype:?}, found {:?}",
            path.display(),
            t.values.dtype()
        )));
    }
    if let Some(d) = dims {
        if t.dims != d {
            return Err(Error::shape(format!("{}: expected dims {d:?}, found {:?}", path.display(), t.dims)));
        }
    }
    Ok(t)
}

// ---------------------------------------------------------------- cameras

/// One line per camera: `fx fy cx cy width height r00 .. r22 t0 t1 t2`.
pub fn format_cameras(cams: &[Camera]) -> String {
    let mut s = String::new();
    for c in cams {
        let k = &c.intrinsics;
        let r = &c.pose.rotation;
        let t = &c.pose.translation;
        write!(s, "{} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                write!(s, " {}", r[(i, j)]).unwrap();
            }
        }
        writeln!(s, " {} {} {}", t.x, t.y, t.z).unwrap();
    }
    s
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |detail: String| Error::TextFormat {
            path: path.to_path_buf(),
            line: n + 1,
            detail,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 18 {
            return Err(bad(format!("expected 18 fields, found {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("field {}: {e}", i + 1)))
        };
        let size = |i: usize| -> Result<usize> {
            fields[i]
                .parse::<usize>()
                .map_err(|e| bad(format!("field {}: {e}", i + 1)))
        };
        let k = Intrinsics::new(num(0)?, num(1)?, num(2)?, num(3)?, size(4)?, size(5)?)
            .map_err(|e| bad(e.to_string()))?;
        let mut r = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r[(i, j)] = num(6 + 3 * i + j)?;
            }
        }
        let t = Vec3::new(num(15)?, num(16)?, num(17)?);
        let pose = Pose::new(r, t).map_err(|e| bad(e.to_string()))?;
        cams.push(Camera::new(k, pose));
    }
    Ok(cams)
}

pub fn write_cameras(path: impl AsRef<Path>, cams: &[Camera]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_cameras(cams)).map_err(|e| Error::io(path, e))
}

pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text, path)
}

// ---------------------------------------------------------------- point clouds

pub fn format_ply(points: &[[f64; 3]], colors: Option<&[[u8; 3]]>) -> Result<String> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::shape(format!("{} points but {} colors", points.len(), c.len())));
        }
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
        return Err(Error::invalid(format!(
            "point {i} has a non-finite coordinate {:?}",
            points[i]
        )));
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", points.len()).unwrap();
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        write!(s, "{} {} {}", p[0], p[1], p[2]).unwrap();
        if let Some(c) = colors {
            write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_ply(path: impl AsRef<Path>, points: &[[f64; 3]], colors: Option<&[[u8; 3]]>) -> Result<()> {
    let path = path.as_ref();
    let s = format_ply(points, colors)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Vertex coordinates of an ASCII PLY written by [`export_ply`].
pub fn read_ply_points(path: impl AsRef<Path>) -> Result<Vec<[f64; 3]>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, detail: String| Error::TextFormat {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    let mut count = None;
    for (n, line) in lines.by_ref() {
        if let Some(c) = line.strip_prefix("element vertex ") {
            count = Some(c.trim().parse::<usize>().map_err(|e| bad(n + 1, e.to_string()))?);
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| bad(1, "no vertex element".into()))?;
    let mut pts = Vec::with_capacity(count);
    for (n, line) in lines.take(count) {
        let f: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| bad(n + 1, e.to_string()))?;
        if f.len() != 3 {
            return Err(bad(n + 1, "vertex needs 3 coordinates".into()));
        }
        pts.push([f[0], f[1], f[2]]);
    }
    if pts.len() != count {
        return Err(bad(0, format!("header declares {count} vertices, found {}", pts.len())));
    }
    Ok(pts)
}

// ---------------------------------------------------------------- datasets

/// All files of one generated scene.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub images: Vec<FeatureMap>,
    pub depths: Vec<FeatureMap>,
    pub masks: Vec<Vec<u8>>,
    pub cameras: Vec<Camera>,
    pub occupancy: Vec<u8>,
    pub grid: VoxelGridSpec,
    /// Contents of `scene.json`.
    pub meta: serde_json::Value,
}

impl SceneData {
    pub fn num_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn occupancy_f64(&self) -> Vec<f64> {
        self.occupancy.iter().map(|&o| o as f64).collect()
    }

    /// Class label recorded by the generator, if any.
    pub fn family(&self) -> String {
        self.meta
            .get("family")
            .and_then(|f| f.as_str())
            .unwrap_or("unknown")
            .to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if self.images.len() != n || self.depths.len() != n || self.masks.len() != n {
            return Err(Error::shape(format!(
                "{} cameras, {} images, {} depths, {} masks",
                n,
                self.images.len(),
                self.depths.len(),
                self.masks.len()
            )));
        }
        if let Some(first) = self.images.first() {
            for (i, ((img, d), m)) in self.images.iter().zip(&self.depths).zip(&self.masks).enumerate() {
                let cam = &self.cameras[i].intrinsics;
                if img.height != first.height
                    || img.width != first.width
                    || img.channels != 3
                    || d.height != img.height
                    || d.width != img.width
                    || d.channels != 1
                    || m.len() != img.height * img.width
                    || cam.height != img.height
                    || cam.width != img.width
                {
                    return Err(Error::shape(format!("view {i} has inconsistent dimensions")));
                }
            }
        }
        if self.occupancy.len() != self.grid.num_voxels() {
            return Err(Error::shape("occupancy size does not match the grid"));
        }
        Ok(())
    }
}

fn view_path(dir: &Path, view: usize, kind: &str) -> PathBuf {
    dir.join(format!("view_{view:04}.{kind}.lsmt"))
}

pub fn write_scene(dir: impl AsRef<Path>, scene: &SceneData) -> Result<()> {
    let dir = dir.as_ref();
    scene.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, ((img, d), m)) in scene.images.iter().zip(&scene.depths).zip(&scene.masks).enumerate() {
        write_tensor(
            view_path(dir, i, "img"),
            &TensorFile::f32_from_f64(vec![img.height, img.width, 3], &img.data)?,
        )?;
        write_tensor(
            view_path(dir, i, "depth"),
            &TensorFile::f32_from_f64(vec![d.height, d.width], &d.data)?,
        )?;
        write_tensor(
            view_path(dir, i, "mask"),
            &TensorFile::new(vec![d.height, d.width], TensorValues::U8(m.clone()))?,
        )?;
    }
    write_cameras(dir.join("cameras.txt"), &scene.cameras)?;
    let v = scene.grid.resolution;
    write_tensor(
        dir.join("occupancy.lsmt"),
        &TensorFile::new(vec![v, v, v], TensorValues::U8(scene.occupancy.clone()))?,
    )?;
    let json = serde_json::to_string_pretty(&scene.meta)?;
    let p = dir.join("scene.json");
    fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))
}

fn grid_from_meta(meta: &serde_json::Value, resolution: usize) -> Result<VoxelGridSpec> {
    match meta.get("grid") {
        Some(g) => {
            let center: [f64; 3] = serde_json::from_value(g["center"].clone())?;
            let side = g["side"]
                .as_f64()
                .ok_or_else(|| Error::invalid("scene.json grid.side is not a number"))?;
            VoxelGridSpec::new(resolution, Vec3::from(center), side)
        }
        None => Ok(VoxelGridSpec::unit(resolution)),
    }
}

pub fn read_scene(dir: impl AsRef<Path>) -> Result<SceneData> {
    let dir = dir.as_ref();
    let cameras = read_cameras(dir.join("cameras.txt"))?;
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut masks = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let (h, w) = (cam.intrinsics.height, cam.intrinsics.width);
        let img = read_tensor_expect(view_path(dir, i, "img"), DType::F32, Some(&[h, w, 3]))?;
        images.push(FeatureMap::new(h, w, 3, img.values.to_f64())?);
        let d = read_tensor_expect(view_path(dir, i, "depth"), DType::F32, Some(&[h, w]))?;
        depths.push(FeatureMap::new(h, w, 1, d.values.to_f64())?);
        let m = read_tensor_expect(view_path(dir, i, "mask"), DType::U8, Some(&[h, w]))?;
        let TensorValues::U8(m) = m.values else { unreachable!() };
        masks.push(m);
    }
    let occ = read_tensor_expect(dir.join("occupancy.lsmt"), DType::U8, None)?;
    let v = occ.dims[0];
    if occ.dims != [v, v, v] {
        return Err(Error::shape(format!("occupancy dims {:?} are not cubic", occ.dims)));
    }
    let TensorValues::U8(occupancy) = occ.values else { unreachable!() };
    let p = dir.join("scene.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: serde_json::Value = serde_json::from_str(&text)?;
    let grid = grid_from_meta(&meta, v)?;
    let scene = SceneData {
        images,
        depths,
        masks,
        cameras,
        occupancy,
        grid,
        meta,
    };
    scene.validate()?;
    Ok(scene)
}

/// Scene folders (`scene_####`) of a dataset root, sorted by name.
pub fn list_scenes(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!("{} contains no scene_* folders", root.display())));
    }
    Ok(dirs)
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<SceneData>> {
    list_scenes(root)?.iter().map(read_scene).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let vals = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e7, f32::NAN, -7.0];
        let t = TensorFile::new(vec![2, 3], TensorValues::F32(vals.clone())).unwrap();
        let back = TensorFile::decode(&t.encode(), Path::new("x")).unwrap();
        let TensorValues::F32(b) = back.values else { panic!() };
        assert_eq!(back.dims, vec![2, 3]);
        assert_eq!(
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            vals.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn header_layout() {
        let t = TensorFile::new(vec![2], TensorValues::U8(vec![7, 9])).unwrap();
        assert_eq!(t.encode(), vec![b'L', b'S', b'M', b'T', 1, 0, 2, 1, 2, 0, 0, 0, 7, 9]);
    }

    #[test]
    fn bad_magic_names_field_and_offset() {
        let mut bytes = TensorFile::new(vec![1], TensorValues::U8(vec![0])).unwrap().encode();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = TensorFile::decode(&bytes, Path::new("f.lsmt")).unwrap_err().to_string();
        assert!(err.contains("bad magic at offset 0"), "{err}");
    }

    #[test]
    fn header_errors() {
        let good = TensorFile::new(vec![1], TensorValues::U8(vec![0])).unwrap().encode();
        let cases: [(usize, u8, &str); 3] = [
            (4, 2, "bad version at offset 4"),
            (6, 9, "bad dtype at offset 6"),
            (7, 0, "bad rank at offset 7"),
        ];
        for (off, val, msg) in cases {
            let mut b = good.clone();
            b[off] = val;
            let err = TensorFile::decode(&b, Path::new("f")).unwrap_err().to_string();
            assert!(err.contains(msg), "{err}");
        }
        let err = TensorFile::decode(&good[..good.len() - 1], Path::new("f")).unwrap_err().to_string();
        assert!(err.contains("bad payload at offset 12"), "{err}");
        let err = TensorFile::decode(&good[..3], Path::new("f")).unwrap_err().to_string();
        assert!(err.contains("bad magic at offset 0"), "{err}");
    }

    #[test]
    fn rank_zero_rejected() {
        assert!(TensorFile::new(vec![], TensorValues::U8(vec![])).is_err());
        assert!(TensorFile::new(vec![1; 9], TensorValues::U8(vec![0])).is_err());
        assert!(TensorFile::new(vec![2, 2], TensorValues::U8(vec![0; 3])).is_err());
    }

    #[test]
    fn ply_single_point_and_empty() {
        let s = format_ply(&[[0.0, 0.0, 0.0]], None).unwrap();
        assert!(s.contains("element vertex 1\n"));
        assert!(s.ends_with("end_header\n0 0 0\n"));
        let s = format_ply(&[], None).unwrap();
        assert!(s.contains("element vertex 0\n") && s.ends_with("end_header\n"));
    }

    #[test]
    fn ply_rejects_nan_with_index() {
        let err = format_ply(&[[0.0; 3], [1.0, 2.0, 3.0], [0.0, f64::NAN, 0.0], [f64::NAN; 3]], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("point 2"), "{err}");
    }

    #[test]
    fn cameras_round_trip() {
        let pose = Pose::look_at(Vec3::new(1.3, 0.4, -1.1), Vec3::zeros(), Vec3::y()).unwrap();
        let cam = Camera::new(Intrinsics::new(64.5, 63.0, 31.5, 30.25, 64, 62).unwrap(), pose);
        let text = format_cameras(&[cam, cam]);
        let back = parse_cameras(&text, Path::new("c")).unwrap();
        assert_eq!(back, vec![cam, cam]);
    }

    #[test]
    fn camera_parse_errors() {
        let p = Path::new("cameras.txt");
        let err = parse_cameras("1 2 3", p).unwrap_err().to_string();
        assert!(err.starts_with("cameras.txt:1:"), "{err}");
        let line = "10 10 5 5 10 10 1 0 0 0 1 0 0 0 2 0 0 0";
        assert!(parse_cameras(line, p).is_err());
        let line = "10 10 5 5 10 10 1 0 0 0 1 0 0 0 1 0 0 x";
        assert!(parse_cameras(line, p).is_err());
    }
}
