//! File formats: splat scenes, skinned meshes, pose sequences, cameras,
//! images, masks and run configuration.
//!
//! Every format carries a version and loaders reject versions they do not
//! know. All writes go through a temporary file and a rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Matrix3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::deform::DeformConfig;
use crate::editing::RecolorConfig;
use crate::error::{Error, Result};
use crate::geometry::sh_coeff_count;
use crate::image::{MaskImage, RgbImage};
use crate::lifecycle::{FitConfig, InpaintConfig, ReconstructConfig, Schedule, SeedConfig};
use crate::losses::LossWeights;
use crate::rasterizer::RasterConfig;
use crate::scene::{CategoryTable, Camera, GaussianSet, Joint, Layer, SkinnedMesh, IDENTITY_DIM};
use crate::skinning::Pose;

pub const SPLAT_VERSION: u32 = 1;
pub const MESH_VERSION: u32 = 1;
pub const POSES_VERSION: u32 = 1;
pub const CAMERA_VERSION: u32 = 1;

/// Writes `bytes` next to `path` and renames over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_version(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::VersionMismatch { found, expected });
    }
    Ok(())
}

// ---------------------------------------------------------------- splats

/// Property names of one record, in file order.
fn splat_properties(sh_degree: usize) -> Vec<(&'static str, String)> {
    let mut p = vec![("uint", "face_index".to_string())];
    for n in ["sigma", "beta", "gamma", "rot_w", "rot_x", "rot_y", "rot_z"] {
        p.push(("float", n.into()));
    }
    for k in 0..3 {
        p.push(("float", format!("log_scale_{k}")));
    }
    p.push(("float", "opacity_logit".into()));
    for k in 0..sh_coeff_count(sh_degree) {
        p.push(("float", format!("sh_{k}")));
    }
    for k in 0..IDENTITY_DIM {
        p.push(("float", format!("identity_{k}")));
    }
    p.push(("uchar", "layer".into()));
    p.push(("uchar", "frozen".into()));
    p
}

fn record_size(sh_degree: usize) -> usize {
    4 + 4 * (11 + sh_coeff_count(sh_degree) + IDENTITY_DIM) + 2
}

/// Binary little-endian PLY with every value stored as `f32`.
pub fn encode_splats(set: &GaussianSet, mesh_hash: &str) -> Vec<u8> {
    let mut out = String::new();
    out.push_str("ply\nformat binary_little_endian 1.0\n");
    out.push_str(&format!("comment avsplat_version {SPLAT_VERSION}\n"));
    out.push_str(&format!("comment sh_degree {}\n", set.sh_degree));
    out.push_str(&format!("comment mesh_hash {mesh_hash}\n"));
    out.push_str(&format!("element vertex {}\n", set.len()));
    for (ty, name) in splat_properties(set.sh_degree) {
        out.push_str(&format!("property {ty} {name}\n"));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    bytes.reserve(set.len() * record_size(set.sh_degree));
    let put = |b: &mut Vec<u8>, v: f64| b.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..set.len() {
        bytes.extend_from_slice(&set.face[i].to_le_bytes());
        for &v in set.offsets[i].iter().chain(&set.rotation[i]).chain(&set.log_scale[i]) {
            put(&mut bytes, v);
        }
        put(&mut bytes, set.opacity_logit[i]);
        for &v in set.sh_of(i).iter().chain(&set.identity[i]) {
            put(&mut bytes, v);
        }
        bytes.push(set.layer[i] as u8);
        bytes.push(set.frozen[i] as u8);
    }
    bytes
}

/// A decoded splat file: the Gaussians and the hash of their mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatFile {
    pub set: GaussianSet,
    pub mesh_hash: String,
}

pub fn decode_splats(bytes: &[u8]) -> Result<SplatFile> {
    let bad = |m: &str| Error::MalformedHeader(m.to_string());
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not text"))?;
    let body = &bytes[end + END.len()..];

    let mut lines = header.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format binary_little_endian 1.0") {
        return Err(bad("not a binary little-endian PLY file"));
    }
    let (mut version, mut degree, mut hash, mut count) = (None, None, None, None);
    let mut props = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["comment", "avsplat_version", v] => version = v.parse::<u32>().ok(),
            ["comment", "sh_degree", v] => degree = v.parse::<usize>().ok(),
            ["comment", "mesh_hash", v] => hash = Some(v.to_string()),
            ["comment", ..] => {}
            ["element", "vertex", n] => count = n.parse::<usize>().ok(),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            _ => return Err(Error::MalformedHeader(format!("unexpected header line {line:?}"))),
        }
    }
    check_version(version.ok_or_else(|| bad("missing avsplat_version"))?, SPLAT_VERSION)?;
    let degree = degree.filter(|&d| d <= 3).ok_or_else(|| bad("missing or unsupported sh_degree"))?;
    let hash = hash.ok_or_else(|| bad("missing mesh_hash"))?;
    let count = count.ok_or_else(|| bad("missing vertex count"))?;
    let expected = splat_properties(degree);
    if props.len() != expected.len() || props.iter().zip(&expected).any(|(a, b)| a.0 != b.0 || a.1 != b.1) {
        return Err(bad("property list does not match the splat schema"));
    }
    let size = record_size(degree);
    if Some(body.len()) != count.checked_mul(size) {
        return Err(Error::MalformedHeader(format!(
            "expected {count} records of {size} bytes, found {} bytes",
            body.len()
        )));
    }

    let stride = sh_coeff_count(degree);
    let mut set = GaussianSet::new(degree);
    for rec in body.chunks_exact(size) {
        let f = |k: usize| f32::from_le_bytes(rec[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as f64;
        set.face.push(u32::from_le_bytes(rec[..4].try_into().expect("4 bytes")));
        set.offsets.push([f(0), f(1), f(2)]);
        set.rotation.push([f(3), f(4), f(5), f(6)]);
        set.log_scale.push([f(7), f(8), f(9)]);
        set.opacity_logit.push(f(10));
        set.sh.extend((0..stride).map(|k| f(11 + k)));
        let mut id = [0.0; IDENTITY_DIM];
        for (k, v) in id.iter_mut().enumerate() {
            *v = f(11 + stride + k);
        }
        set.identity.push(id);
        let layer = Layer::from_u8(rec[size - 2]).ok_or_else(|| bad("unknown layer value"))?;
        set.layer.push(layer);
        set.frozen.push(match rec[size - 1] {
            0 => false,
            1 => true,
            _ => return Err(bad("frozen flag must be 0 or 1")),
        });
    }
    Ok(SplatFile { set, mesh_hash: hash })
}

pub fn save_scene(path: &Path, set: &GaussianSet, mesh: &SkinnedMesh) -> Result<()> {
    write_atomic(path, &encode_splats(set, &mesh.content_hash()))
}

/// Loads a scene and checks it was built on `mesh`.
pub fn load_scene(path: &Path, mesh: &SkinnedMesh) -> Result<GaussianSet> {
    let file = decode_splats(&read(path)?)?;
    let hash = mesh.content_hash();
    if file.mesh_hash != hash {
        return Err(Error::MeshHashMismatch {
            file: file.mesh_hash,
            mesh: hash,
        });
    }
    file.set.validate(mesh)?;
    Ok(file.set)
}

// ---------------------------------------------------------------- meshes

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidDoc {
    /// `[w, x, y, z]`, normalized on load.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl RigidDoc {
    pub fn to_isometry(&self) -> Result<Isometry3<f64>> {
        let [w, x, y, z] = self.rotation;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-12) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("degenerate rigid transform".into()));
        }
        Ok(Isometry3::from_parts(
            Translation3::from(Vector3::from(self.translation)),
            UnitQuaternion::from_quaternion(q),
        ))
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let q = iso.rotation.quaternion();
        Self {
            rotation: [q.w, q.i, q.j, q.k],
            translation: iso.translation.vector.into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    name: String,
    parent: Option<String>,
    bind: RigidDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshDoc {
    version: u32,
    vertices: Vec<[f64; 3]>,
    faces: Vec<[u32; 3]>,
    joints: Vec<JointDoc>,
    skin_weights: Vec<Vec<(u32, f64)>>,
    #[serde(default)]
    face_regions: BTreeMap<String, Vec<u32>>,
}

pub fn mesh_to_json(mesh: &SkinnedMesh) -> String {
    let doc = MeshDoc {
        version: MESH_VERSION,
        vertices: mesh.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
        faces: mesh.faces.clone(),
        joints: mesh
            .joints
            .iter()
            .map(|j| JointDoc {
                name: j.name.clone(),
                parent: j.parent.map(|p| mesh.joints[p].name.clone()),
                bind: RigidDoc::from_isometry(&j.bind),
            })
            .collect(),
        skin_weights: mesh.skin_weights.clone(),
        face_regions: mesh.face_regions.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("mesh serializes")
}

/// Parses a mesh document. Skin weights off by at most 1e-3 are
/// renormalized; larger errors are rejected.
pub fn mesh_from_json(text: &str) -> Result<SkinnedMesh> {
    let doc: MeshDoc = serde_json::from_str(text).map_err(|e| Error::InvalidMesh(e.to_string()))?;
    check_version(doc.version, MESH_VERSION)?;
    let mut joints: Vec<Joint> = Vec::with_capacity(doc.joints.len());
    for j in &doc.joints {
        let parent = match &j.parent {
            None => None,
            Some(p) => Some(
                joints
                    .iter()
                    .position(|k| &k.name == p)
                    .ok_or_else(|| Error::InvalidMesh(format!("joint {} names unknown or later parent {p}", j.name)))?,
            ),
        };
        if joints.iter().any(|k| k.name == j.name) {
            return Err(Error::InvalidMesh(format!("duplicate joint {}", j.name)));
        }
        joints.push(Joint {
            name: j.name.clone(),
            parent,
            bind: j.bind.to_isometry()?,
        });
    }
    let mut skin_weights = doc.skin_weights;
    for (v, row) in skin_weights.iter_mut().enumerate() {
        let sum: f64 = row.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidMesh(format!("skin weights of vertex {v} sum to {sum}")));
        }
        if (sum - 1.0).abs() > 1e-6 {
            for (_, w) in row.iter_mut() {
                *w /= sum;
            }
        }
    }
    let mesh = SkinnedMesh {
        vertices: doc.vertices.into_iter().map(Vector3::from).collect(),
        faces: doc.faces,
        joints,
        skin_weights,
        face_regions: doc.face_regions,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn save_mesh(path: &Path, mesh: &SkinnedMesh) -> Result<()> {
    write_atomic(path, mesh_to_json(mesh).as_bytes())
}

pub fn load_mesh(path: &Path) -> Result<SkinnedMesh> {
    mesh_from_json(&read_text(path)?).map_err(|e| match e {
        Error::InvalidMesh(m) => Error::parse(path, m),
        other => other,
    })
}

// ---------------------------------------------------------------- poses

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFrameDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<RigidDoc>,
    /// Joint-local transforms; joints not listed stay at rest.
    #[serde(default)]
    pub joints: BTreeMap<String, RigidDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSequenceDoc {
    pub version: u32,
    pub frames: Vec<PoseFrameDoc>,
}

/// Poses resolved against a mesh, with one time per frame in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub poses: Vec<Pose>,
    pub times: Vec<f64>,
}

impl PoseSequenceDoc {
    /// Without explicit times, frames are spread evenly over `[0, 1]`.
    pub fn resolve(&self, mesh: &SkinnedMesh) -> Result<PoseSequence> {
        let n = self.frames.len();
        let timed = self.frames.iter().filter(|f| f.time.is_some()).count();
        if timed != 0 && timed != n {
            return Err(Error::InvalidArgument("either every frame has a time or none does".into()));
        }
        let mut poses = Vec::with_capacity(n);
        let mut times = Vec::with_capacity(n);
        for (k, f) in self.frames.iter().enumerate() {
            let mut locals = vec![Isometry3::identity(); mesh.joints.len()];
            for (name, rigid) in &f.joints {
                let j = mesh
                    .joint_index(name)
                    .ok_or_else(|| Error::InvalidArgument(format!("frame {k}: unknown joint {name:?}")))?;
                locals[j] = rigid.to_isometry()?;
            }
            let root = f.root.as_ref().map(RigidDoc::to_isometry).transpose()?.unwrap_or_else(Isometry3::identity);
            poses.push(Pose::from_local(mesh, &locals, root)?);
            times.push(match f.time {
                Some(t) => t,
                None if n > 1 => k as f64 / (n - 1) as f64,
                None => 0.0,
            });
        }
        Ok(PoseSequence { poses, times })
    }
}

pub fn load_poses(path: &Path, mesh: &SkinnedMesh) -> Result<PoseSequence> {
    let doc: PoseSequenceDoc = serde_json::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e))?;
    check_version(doc.version, POSES_VERSION)?;
    doc.resolve(mesh)
}

pub fn save_poses(path: &Path, doc: &PoseSequenceDoc) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(doc).expect("poses serialize").as_bytes())
}

// ---------------------------------------------------------------- cameras

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraDoc {
    version: u32,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// World → camera rotation, row by row.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    near: f64,
}

pub fn camera_to_json(cam: &Camera) -> String {
    let r = &cam.rotation;
    let doc = CameraDoc {
        version: CAMERA_VERSION,
        width: cam.width,
        height: cam.height,
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
        translation: cam.translation.into(),
        near: cam.near,
    };
    serde_json::to_string_pretty(&doc).expect("camera serializes")
}

pub fn camera_from_json(text: &str) -> Result<Camera> {
    let d: CameraDoc = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    check_version(d.version, CAMERA_VERSION)?;
    let rotation = Matrix3::from_fn(|i, j| d.rotation[i][j]);
    if (rotation * rotation.transpose() - Matrix3::identity()).abs().max() > 1e-6 || rotation.determinant() < 0.0 {
        return Err(Error::InvalidArgument("camera rotation is not a rotation matrix".into()));
    }
    if d.width == 0 || d.height == 0 || !(d.fx > 0.0 && d.fy > 0.0 && d.near > 0.0) {
        return Err(Error::InvalidArgument("camera needs positive size, focal lengths and near plane".into()));
    }
    Ok(Camera {
        rotation,
        translation: Vector3::from(d.translation),
        fx: d.fx,
        fy: d.fy,
        cx: d.cx,
        cy: d.cy,
        width: d.width,
        height: d.height,
        near: d.near,
    })
}

pub fn save_camera(path: &Path, cam: &Camera) -> Result<()> {
    write_atomic(path, camera_to_json(cam).as_bytes())
}

pub fn load_camera(path: &Path) -> Result<Camera> {
    camera_from_json(&read_text(path)?).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::parse(path, m),
        other => other,
    })
}

// ---------------------------------------------------------------- images

fn decode_png(path: &Path, expand: bool) -> Result<(png::OutputInfo, Vec<u8>, Option<Vec<u8>>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(if expand {
        png::Transformations::EXPAND
    } else {
        png::Transformations::IDENTITY
    });
    let mut reader = decoder.read_info().map_err(|e| Error::parse(path, e))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedFormat(format!("{}: 16-bit images are not supported", path.display())));
    }
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::parse(path, e))?;
    Ok((info, buf, palette))
}

/// 8-bit PNG to linear values in `[0, 1]`, taken as stored (no gamma
/// decoding). Alpha is dropped.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let (info, buf, _) = decode_png(path, true)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::UnsupportedFormat("unexpanded palette".into())),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "{}: only 8-bit channels are supported",
            path.display()
        )));
    }
    let mut data = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..];
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            data.extend(rgb.iter().map(|&b| b as f64 / 255.0));
        }
    }
    RgbImage::from_data(w, h, data)
}

fn encode_png(width: usize, height: usize, color: png::ColorType, palette: Option<Vec<u8>>, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut w = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png header: {e}")))?;
        w.write_image_data(data)
            .map_err(|e| Error::InvalidArgument(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Rounds each channel to the nearest 8-bit level after clamping to
/// `[0, 1]`.
pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_atomic(path, &encode_png(img.width, img.height, png::ColorType::Rgb, None, &bytes)?)
}

/// Color plus coverage as an 8-bit RGBA PNG.
pub fn save_image_rgba(path: &Path, img: &RgbImage, alpha: &[f64]) -> Result<()> {
    if alpha.len() != img.pixel_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} alpha values for {} pixels",
            alpha.len(),
            img.pixel_count()
        )));
    }
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut bytes = Vec::with_capacity(4 * alpha.len());
    for (rgb, &a) in img.data.chunks_exact(3).zip(alpha) {
        bytes.extend(rgb.iter().map(|&v| q(v)));
        bytes.push(q(a));
    }
    write_atomic(path, &encode_png(img.width, img.height, png::ColorType::Rgba, None, &bytes)?)
}

/// Display colors for label maps.
pub const LABEL_PALETTE: [[u8; 3]; IDENTITY_DIM] = [
    [0, 0, 0],
    [128, 0, 0],
    [255, 0, 0],
    [0, 85, 0],
    [170, 0, 51],
    [255, 85, 0],
    [0, 0, 85],
    [0, 119, 221],
    [85, 85, 0],
    [0, 85, 85],
    [85, 51, 0],
    [52, 86, 128],
    [0, 128, 0],
    [0, 0, 255],
    [51, 170, 221],
];

/// Labels are read from palette indices, or from gray levels of an 8-bit
/// grayscale image.
pub fn load_mask(path: &Path) -> Result<MaskImage> {
    let (info, buf, _) = decode_png(path, false)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed, d) => d as usize,
        (png::ColorType::Grayscale, png::BitDepth::Eight) => 8,
        (c, d) => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: masks must be indexed or 8-bit grayscale, found {c:?} at {d:?}",
                path.display()
            )))
        }
    };
    let mut labels = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            let bit = x * bits;
            let byte = row[bit / 8];
            let v = (byte >> (8 - bits - bit % 8)) & ((1u16 << bits) - 1) as u8;
            if v as usize >= IDENTITY_DIM {
                return Err(Error::LabelOutOfRange {
                    label: v as u32,
                    x,
                    y,
                });
            }
            labels.push(v);
        }
    }
    MaskImage::from_labels(w, h, labels)
}

/// Writes an indexed PNG whose palette indices are the labels.
pub fn save_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    let palette: Vec<u8> = LABEL_PALETTE.iter().flatten().copied().collect();
    write_atomic(
        path,
        &encode_png(mask.width, mask.height, png::ColorType::Indexed, Some(palette), &mask.labels)?,
    )
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub mesh: Option<PathBuf>,
    pub views: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub init_splats: Option<PathBuf>,
}

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub sh_degree: usize,
    /// Body Gaussians per mesh face, 1 to 7.
    pub body_per_face: usize,
    pub loss: LossWeights,
    pub schedule: Schedule,
    pub raster: RasterConfig,
    pub inpaint: InpaintConfig,
    pub seeding: SeedConfig,
    pub deform: DeformConfig,
    pub recolor: RecolorConfig,
    /// Display names for the 15 categories, in index order.
    pub categories: Option<Vec<String>>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = ReconstructConfig::default();
        Self {
            seed: 0,
            sh_degree: r.sh_degree,
            body_per_face: r.body_per_face,
            loss: r.fit.weights,
            schedule: r.fit.schedule,
            raster: r.fit.raster,
            inpaint: r.inpaint,
            seeding: r.seeding,
            deform: DeformConfig::default(),
            recolor: RecolorConfig::default(),
            categories: None,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::parse(path, m),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > 3 {
            return Err(Error::InvalidConfig(format!("sh_degree {} exceeds 3", self.sh_degree)));
        }
        if !(1..=7).contains(&self.body_per_face) {
            return Err(Error::InvalidConfig("body_per_face must be between 1 and 7".into()));
        }
        self.category_table()?;
        self.reconstruct().fit.validate()
    }

    pub fn category_table(&self) -> Result<CategoryTable> {
        match &self.categories {
            None => Ok(CategoryTable::default()),
            Some(names) => CategoryTable::with_names(names.clone()),
        }
    }

    pub fn reconstruct(&self) -> ReconstructConfig {
        ReconstructConfig {
            sh_degree: self.sh_degree,
            body_per_face: self.body_per_face,
            inpaint: self.inpaint.clone(),
            seeding: self.seeding.clone(),
            fit: FitConfig {
                schedule: self.schedule.clone(),
                weights: self.loss.clone(),
                raster: self.raster.clone(),
            },
        }
    }
}
