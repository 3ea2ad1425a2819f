//! Corpus serialization: one directory per scene holding a versioned
//! manifest.json, OBJ meshes, PNG images and masks, and raw little-endian
//! tensor blobs. Every referenced file carries a SHA-256 checksum in the
//! manifest; reads verify before parsing. Writes are deterministic, so a
//! regenerated corpus is byte-identical.

use crate::geometry::{Box2D, Camera, InstancePose};
use crate::mesh::TriMesh;
use crate::sampling::mix_seed;
use crate::scenegen::primitives::Category;
use crate::scenegen::raster::{rasterize, DrawItem, ID_ROOM};
use crate::scenegen::rooms::RoomShell;
use crate::scenegen::scene::{
    generate_scene, OcclusionPair, SceneInstance, SceneRecord, SceneSpec, NEAR_PLANE, ROOM_ALBEDO,
};
use crate::{Error, Result};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

/// Version stamped into scene and corpus manifests.
pub const MANIFEST_VERSION: u32 = 1;
/// Registered dataset adapters.
pub const ADAPTERS: [&str; 2] = ["synthetic", "synthetic-noamodal"];

const TENSOR_MAGIC: &[u8; 4] = b"IPFT";
const DTYPE_F32: u16 = 1;

/// A checksummed reference to a file inside the scene directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

/// Room geometry block: the mesh lives in its own OBJ, scalars inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomBlock {
    pub mesh: FileRef,
    pub half_width: f64,
    pub half_height: f64,
    pub depth: f64,
    pub behind: f64,
    pub nonplanar_area: f64,
    pub has_alcove: bool,
}

/// Per-instance block: category, pose, and file references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceBlock {
    pub category: Category,
    pub pose: InstancePose<f64>,
    pub bbox: Box2D<f64>,
    pub mesh: FileRef,
    pub amodal: Option<FileRef>,
    pub modal: FileRef,
}

/// manifest.json schema for one scene directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: u32,
    pub id: String,
    pub seed: u64,
    pub provenance: String,
    pub camera: Camera<f64>,
    pub room: RoomBlock,
    pub image: FileRef,
    /// Composite z-buffer as an f32 tensor blob (diagnostic; not read back
    /// into records).
    pub depth: FileRef,
    pub instances: Vec<InstanceBlock>,
    pub occlusion: Vec<OcclusionPair>,
}

/// corpus.json schema at the corpus root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub name: String,
    pub base_seed: u64,
    pub provenance: String,
    pub spec: SceneSpec,
    /// Scene directory names, index order.
    pub scenes: Vec<String>,
    /// Named index lists into `scenes`.
    pub splits: BTreeMap<String, Vec<usize>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

// ---- tensor blobs ----------------------------------------------------

/// Encodes an f32 tensor (rank <= 4, dims < 65536) as a 16-byte header
/// (magic, dtype, rank, dims) plus little-endian payload.
pub fn encode_f32_tensor(data: &ArrayD<f32>) -> Result<Vec<u8>> {
    let shape = data.shape();
    if shape.len() > 4 {
        return Err(Error::malformed("tensor blob", "rank exceeds 4"));
    }
    if shape.iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::malformed("tensor blob", "dimension exceeds 65535"));
    }
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for k in 0..4 {
        let d = shape.get(k).copied().unwrap_or(0) as u16;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f32_tensor(bytes: &[u8]) -> Result<ArrayD<f32>> {
    if bytes.len() < 16 {
        return Err(Error::malformed("tensor blob", "shorter than the 16-byte header"));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::malformed("tensor blob", "bad magic"));
    }
    let dtype = u16::from_le_bytes([bytes[4], bytes[5]]);
    if dtype != DTYPE_F32 {
        return Err(Error::malformed("tensor blob", format!("unsupported dtype code {dtype}")));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if rank > 4 {
        return Err(Error::malformed("tensor blob", format!("rank {rank} exceeds 4")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|k| u16::from_le_bytes([bytes[8 + 2 * k], bytes[9 + 2 * k]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != 16 + 4 * n {
        return Err(Error::malformed(
            "tensor blob",
            format!("payload holds {} bytes, header implies {}", bytes.len() - 16, 4 * n),
        ));
    }
    let values: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values)
        .map_err(|e| Error::malformed("tensor blob", e.to_string()))
}

pub fn write_f32_tensor(path: &Path, data: &ArrayD<f32>) -> Result<()> {
    std::fs::write(path, encode_f32_tensor(data)?)?;
    Ok(())
}

pub fn read_f32_tensor(path: &Path) -> Result<ArrayD<f32>> {
    decode_f32_tensor(&std::fs::read(path)?)
}

// ---- images ----------------------------------------------------------

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_rgb_png(img: &Array3<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("rgb image needs 3 channels, got {c}")));
    }
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            rgb.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_u8(img[(0, y, x)]), to_u8(img[(1, y, x)]), to_u8(img[(2, y, x)])]),
            );
        }
    }
    let mut buf = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut buf), image::ImageFormat::Png)?;
    Ok(buf)
}

fn decode_rgb_png(bytes: &[u8]) -> Result<Array3<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_fn((3, h, w), |(ch, y, x)| {
        img.get_pixel(x as u32, y as u32).0[ch] as f32 / 255.0
    }))
}

fn encode_gray_png(mask: &Array2<f32>) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let mut gray = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            gray.put_pixel(x as u32, y as u32, image::Luma([to_u8(mask[(y, x)])]));
        }
    }
    let mut buf = Vec::new();
    gray.write_to(&mut Cursor::new(&mut buf), image::ImageFormat::Png)?;
    Ok(buf)
}

fn decode_gray_png(bytes: &[u8]) -> Result<Array2<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        if img.get_pixel(x as u32, y as u32).0[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

// ---- scene directories -------------------------------------------------

fn obj_bytes(mesh: &TriMesh<f64>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    mesh.write_obj(&mut buf)?;
    Ok(buf)
}

/// Writes one file and returns its manifest reference.
fn put(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileRef> {
    std::fs::write(dir.join(name), bytes)?;
    Ok(FileRef { path: name.to_string(), sha256: sha256_hex(bytes) })
}

/// Reads a referenced file and verifies its checksum before any parsing.
fn read_verified(dir: &Path, fref: &FileRef) -> Result<Vec<u8>> {
    let full = dir.join(&fref.path);
    let bytes = std::fs::read(&full)?;
    let actual = sha256_hex(&bytes);
    if actual != fref.sha256 {
        return Err(Error::Checksum {
            path: full.display().to_string(),
            expected: fref.sha256.clone(),
            actual,
        });
    }
    Ok(bytes)
}

/// Serializes a record into `dir` and returns the manifest it wrote.
pub fn write_scene(dir: &Path, record: &SceneRecord) -> Result<SceneManifest> {
    std::fs::create_dir_all(dir)?;
    let room_ref = put(dir, "room.obj", &obj_bytes(&record.room.mesh)?)?;
    let image_ref = put(dir, "image.png", &encode_rgb_png(&record.image)?)?;

    // Composite z-buffer, recomputed from the stored geometry.
    let posed: Vec<TriMesh<f64>> = record
        .instances
        .iter()
        .map(|i| i.mesh.map_vertices(|v| i.pose.canonical_to_camera(v)))
        .collect();
    let mut items = vec![DrawItem { mesh: &record.room.mesh, id: ID_ROOM, albedo: ROOM_ALBEDO }];
    for (i, m) in posed.iter().enumerate() {
        items.push(DrawItem { mesh: m, id: i as u32, albedo: [1.0; 3] });
    }
    let depth = rasterize(&record.camera, &items, NEAR_PLANE)
        .depth
        .mapv(|v| v as f32)
        .into_dyn();
    let depth_ref = put(dir, "depth.bin", &encode_f32_tensor(&depth)?)?;

    let mut instances = Vec::with_capacity(record.instances.len());
    for (i, inst) in record.instances.iter().enumerate() {
        let mesh_ref = put(dir, &format!("inst-{i:02}.obj"), &obj_bytes(&inst.mesh)?)?;
        let amodal_ref = match &inst.amodal {
            Some(mask) => {
                Some(put(dir, &format!("inst-{i:02}-amodal.png"), &encode_gray_png(mask)?)?)
            }
            None => None,
        };
        let modal_ref =
            put(dir, &format!("inst-{i:02}-modal.png"), &encode_gray_png(&inst.modal)?)?;
        instances.push(InstanceBlock {
            category: inst.category,
            pose: inst.pose.clone(),
            bbox: inst.bbox,
            mesh: mesh_ref,
            amodal: amodal_ref,
            modal: modal_ref,
        });
    }

    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        id: record.id.clone(),
        seed: record.seed,
        provenance: record.provenance.clone(),
        camera: record.camera.clone(),
        room: RoomBlock {
            mesh: room_ref,
            half_width: record.room.half_width,
            half_height: record.room.half_height,
            depth: record.room.depth,
            behind: record.room.behind,
            nonplanar_area: record.room.nonplanar_area,
            has_alcove: record.room.has_alcove,
        },
        image: image_ref,
        depth: depth_ref,
        instances,
        occlusion: record.occlusion.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Loads and checksum-verifies a scene directory.
pub fn read_scene(dir: &Path) -> Result<SceneRecord> {
    let manifest: SceneManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::ManifestVersion {
            found: manifest.version,
            supported: MANIFEST_VERSION,
        });
    }
    let room_mesh = TriMesh::<f64>::read_obj(Cursor::new(read_verified(dir, &manifest.room.mesh)?))?;
    let image = decode_rgb_png(&read_verified(dir, &manifest.image)?)?;
    // The depth blob is not carried in the record, but its integrity and
    // header are still checked.
    decode_f32_tensor(&read_verified(dir, &manifest.depth)?)?;

    let mut instances = Vec::with_capacity(manifest.instances.len());
    for block in &manifest.instances {
        let mesh = TriMesh::<f64>::read_obj(Cursor::new(read_verified(dir, &block.mesh)?))?;
        let amodal = match &block.amodal {
            Some(r) => Some(decode_gray_png(&read_verified(dir, r)?)?),
            None => None,
        };
        let modal = decode_gray_png(&read_verified(dir, &block.modal)?)?;
        instances.push(SceneInstance {
            mesh,
            pose: block.pose.clone(),
            category: block.category,
            bbox: block.bbox,
            amodal,
            modal,
        });
    }

    Ok(SceneRecord {
        id: manifest.id,
        room: RoomShell {
            mesh: room_mesh,
            half_width: manifest.room.half_width,
            half_height: manifest.room.half_height,
            depth: manifest.room.depth,
            behind: manifest.room.behind,
            nonplanar_area: manifest.room.nonplanar_area,
            has_alcove: manifest.room.has_alcove,
        },
        instances,
        camera: manifest.camera,
        image,
        seed: manifest.seed,
        provenance: manifest.provenance,
        occlusion: manifest.occlusion,
    })
}

// ---- corpora -----------------------------------------------------------

/// Handle to a corpus on disk. Scenes load lazily, one directory at a time.
#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    pub manifest: CorpusManifest,
    /// Set when opened through `adapter_ingest`; rewrites provenance and,
    /// for the no-amodal adapter, strips amodal masks on load.
    adapter: Option<String>,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Corpus> {
        let manifest: CorpusManifest =
            serde_json::from_slice(&std::fs::read(root.join("corpus.json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::ManifestVersion {
                found: manifest.version,
                supported: MANIFEST_VERSION,
            });
        }
        Ok(Corpus { root: root.to_path_buf(), manifest, adapter: None })
    }

    pub fn len(&self) -> usize {
        self.manifest.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.scenes.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// The provenance stamped into reports: the adapter id when ingested
    /// through one, otherwise the corpus's own tag.
    pub fn provenance(&self) -> &str {
        self.adapter.as_deref().unwrap_or(&self.manifest.provenance)
    }

    pub fn scene_dir(&self, index: usize) -> PathBuf {
        self.root.join(&self.manifest.scenes[index])
    }

    pub fn load_scene(&self, index: usize) -> Result<SceneRecord> {
        let mut record = read_scene(&self.scene_dir(index))?;
        if let Some(adapter) = &self.adapter {
            record.provenance = adapter.clone();
            if adapter == "synthetic-noamodal" {
                for inst in &mut record.instances {
                    inst.amodal = None;
                }
            }
        }
        Ok(record)
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.manifest
            .splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                let known: Vec<&str> = self.manifest.splits.keys().map(|s| s.as_str()).collect();
                Error::Config(format!("no split {name:?} (available: {})", known.join(", ")))
            })
    }

    /// Streams one split lazily; nothing beyond the current record is held.
    pub fn iter_split<'a>(
        &'a self,
        name: &str,
    ) -> Result<impl Iterator<Item = Result<SceneRecord>> + 'a> {
        let indices = self.split(name)?.to_vec();
        Ok(indices.into_iter().map(move |i| self.load_scene(i)))
    }
}

/// Generates `n` scenes under `root` with seeds `mix_seed(base_seed, i)`,
/// writing each to disk before the next is built so memory stays bounded.
/// The last `round(n * test_fraction)` scenes form the "test" split, the
/// rest "train".
pub fn generate_corpus(
    root: &Path,
    spec: &SceneSpec,
    base_seed: u64,
    n: usize,
    test_fraction: f64,
    name: &str,
) -> Result<Corpus> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config("test fraction outside [0, 1]".into()));
    }
    std::fs::create_dir_all(root)?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let mut record = generate_scene(mix_seed(base_seed, i as u64), spec)?;
        record.id = format!("scene-{i:06}");
        write_scene(&root.join(&record.id), &record)?;
        scenes.push(record.id);
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), (0..n - n_test).collect::<Vec<_>>());
    splits.insert("test".to_string(), (n - n_test..n).collect::<Vec<_>>());
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        name: name.to_string(),
        base_seed,
        provenance: "synthetic".to_string(),
        spec: spec.clone(),
        scenes,
        splits,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(root.join("corpus.json"), json)?;
    Corpus::open(root)
}

/// Writes in-memory records as a corpus (directory names = record ids,
/// single "all" split).
pub fn write_dataset(records: &[SceneRecord], root: &Path, name: &str) -> Result<Corpus> {
    std::fs::create_dir_all(root)?;
    let mut scenes = Vec::with_capacity(records.len());
    for record in records {
        if scenes.contains(&record.id) {
            return Err(Error::Config(format!("duplicate scene id {:?}", record.id)));
        }
        write_scene(&root.join(&record.id), record)?;
        scenes.push(record.id.clone());
    }
    let mut splits = BTreeMap::new();
    splits.insert("all".to_string(), (0..records.len()).collect::<Vec<_>>());
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        name: name.to_string(),
        base_seed: 0,
        provenance: records
            .first()
            .map(|r| r.provenance.clone())
            .unwrap_or_else(|| "synthetic".to_string()),
        spec: SceneSpec::default(),
        scenes,
        splits,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(root.join("corpus.json"), json)?;
    Corpus::open(root)
}

/// Alias for [`Corpus::open`], the read side of `write_dataset`.
pub fn read_dataset(root: &Path) -> Result<Corpus> {
    Corpus::open(root)
}

/// Opens a corpus through a named adapter. "synthetic" is the identity;
/// "synthetic-noamodal" mimics sources without amodal supervision by
/// stripping the masks, making consumers that need them fail fast.
pub fn adapter_ingest(root: &Path, format: &str) -> Result<Corpus> {
    if !ADAPTERS.contains(&format) {
        return Err(Error::UnknownAdapter(format!(
            "{format} (registered: {})",
            ADAPTERS.join(", ")
        )));
    }
    let mut corpus = Corpus::open(root)?;
    corpus.adapter = Some(format.to_string());
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use tempfile::tempdir;

    fn record(seed: u64) -> SceneRecord {
        generate_scene(seed, &SceneSpec::sphere_occludes_cube()).unwrap()
    }

    fn dir_snapshot(dir: &Path) -> Vec<(String, String)> {
        let mut files: Vec<(String, String)> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                let bytes = std::fs::read(e.path()).unwrap();
                (e.file_name().to_string_lossy().into_owned(), sha256_hex(&bytes))
            })
            .collect();
        files.sort();
        files
    }

    #[test]
    fn scene_round_trip_preserves_every_field() {
        let rec = record(21);
        let tmp = tempdir().unwrap();
        write_scene(tmp.path(), &rec).unwrap();
        let back = read_scene(tmp.path()).unwrap();
        assert_eq!(back.id, rec.id);
        assert_eq!(back.seed, rec.seed);
        assert_eq!(back.provenance, rec.provenance);
        assert_eq!(back.image, rec.image);
        assert_eq!(back.camera, rec.camera);
        assert_eq!(back.room.mesh.vertices, rec.room.mesh.vertices);
        assert_eq!(back.room.mesh.faces, rec.room.mesh.faces);
        assert_eq!(back.room.nonplanar_area, rec.room.nonplanar_area);
        assert_eq!(back.occlusion, rec.occlusion);
        assert_eq!(back.instances.len(), rec.instances.len());
        for (a, b) in back.instances.iter().zip(&rec.instances) {
            assert_eq!(a.category, b.category);
            assert_eq!(a.pose, b.pose);
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.mesh.vertices, b.mesh.vertices);
            assert_eq!(a.amodal, b.amodal);
            assert_eq!(a.modal, b.modal);
        }
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let rec = record(4);
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        write_scene(d1.path(), &rec).unwrap();
        let back = read_scene(d1.path()).unwrap();
        write_scene(d2.path(), &back).unwrap();
        assert_eq!(dir_snapshot(d1.path()), dir_snapshot(d2.path()));
    }

    #[test]
    fn truncated_tensor_blob_fails_with_a_named_checksum_error() {
        let rec = record(8);
        let tmp = tempdir().unwrap();
        write_scene(tmp.path(), &rec).unwrap();
        let path = tmp.path().join("depth.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match read_scene(tmp.path()) {
            Err(Error::Checksum { path, .. }) => assert!(path.ends_with("depth.bin")),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_version_mismatch_is_an_explicit_error() {
        let rec = record(2);
        let tmp = tempdir().unwrap();
        write_scene(tmp.path(), &rec).unwrap();
        let path = tmp.path().join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&path, text).unwrap();
        match read_scene(tmp.path()) {
            Err(Error::ManifestVersion { found: 99, supported: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn tensor_blob_round_trips_and_rejects_corruption() {
        let t = Array::from_shape_fn(IxDyn(&[2, 3, 4]), |ix| {
            (ix[0] * 100 + ix[1] * 10 + ix[2]) as f32 * 0.25 - 1.0
        });
        let bytes = encode_f32_tensor(&t).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 24);
        let back = decode_f32_tensor(&bytes).unwrap();
        assert_eq!(back, t);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_f32_tensor(&bad_magic), Err(Error::Malformed { .. })));
        let mut bad_dtype = bytes.clone();
        bad_dtype[4] = 7;
        assert!(matches!(decode_f32_tensor(&bad_dtype), Err(Error::Malformed { .. })));
        assert!(matches!(
            decode_f32_tensor(&bytes[..bytes.len() - 3]),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn corpus_generation_splits_and_reloads() {
        let tmp = tempdir().unwrap();
        let spec = SceneSpec::sphere_occludes_cube();
        let corpus = generate_corpus(tmp.path(), &spec, 99, 6, 0.34, "demo").unwrap();
        assert_eq!(corpus.len(), 6);
        assert_eq!(corpus.split("train").unwrap(), &[0, 1, 2, 3]);
        assert_eq!(corpus.split("test").unwrap(), &[4, 5]);
        assert!(corpus.split("missing").is_err());

        // Scene i carries the derived seed and renamed id.
        let rec = corpus.load_scene(2).unwrap();
        assert_eq!(rec.id, "scene-000002");
        let direct = generate_scene(mix_seed(99, 2), &spec).unwrap();
        assert_eq!(rec.image, direct.image);
        assert_eq!(rec.instances[0].pose, direct.instances[0].pose);

        let n: usize = corpus
            .iter_split("test")
            .unwrap()
            .map(|r| r.unwrap().instances.len())
            .sum();
        assert_eq!(n, 4);
    }

    #[test]
    fn regenerated_corpora_are_byte_identical() {
        let spec = SceneSpec::sphere_occludes_cube();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate_corpus(d1.path(), &spec, 7, 3, 0.3, "twin").unwrap();
        generate_corpus(d2.path(), &spec, 7, 3, 0.3, "twin").unwrap();
        assert_eq!(
            sha256_hex(&std::fs::read(d1.path().join("corpus.json")).unwrap()),
            sha256_hex(&std::fs::read(d2.path().join("corpus.json")).unwrap())
        );
        for scene in ["scene-000000", "scene-000001", "scene-000002"] {
            assert_eq!(
                dir_snapshot(&d1.path().join(scene)),
                dir_snapshot(&d2.path().join(scene)),
                "{scene} differs"
            );
        }
    }

    #[test]
    fn adapters_wrap_the_same_files() {
        let tmp = tempdir().unwrap();
        let spec = SceneSpec::sphere_occludes_cube();
        generate_corpus(tmp.path(), &spec, 31, 2, 0.5, "adapters").unwrap();

        let direct = Corpus::open(tmp.path()).unwrap().load_scene(0).unwrap();
        let same = adapter_ingest(tmp.path(), "synthetic").unwrap();
        assert_eq!(same.provenance(), "synthetic");
        let via = same.load_scene(0).unwrap();
        assert_eq!(via.image, direct.image);
        assert_eq!(via.instances[0].amodal, direct.instances[0].amodal);

        let stripped = adapter_ingest(tmp.path(), "synthetic-noamodal").unwrap();
        assert_eq!(stripped.provenance(), "synthetic-noamodal");
        let rec = stripped.load_scene(0).unwrap();
        assert_eq!(rec.provenance, "synthetic-noamodal");
        assert!(rec.instances.iter().all(|i| i.amodal.is_none()));
        assert_eq!(rec.instances[0].modal, direct.instances[0].modal);

        match adapter_ingest(tmp.path(), "mystery") {
            Err(Error::UnknownAdapter(msg)) => {
                assert!(msg.contains("synthetic") && msg.contains("synthetic-noamodal"));
            }
            other => panic!("expected unknown-adapter error, got {other:?}"),
        }
    }

    #[test]
    fn write_dataset_round_trips_in_memory_records() {
        let recs = vec![record(1), record(2)];
        let tmp = tempdir().unwrap();
        let corpus = write_dataset(&recs, tmp.path(), "mem").unwrap();
        assert_eq!(corpus.split("all").unwrap(), &[0, 1]);
        let back = read_dataset(tmp.path()).unwrap().load_scene(1).unwrap();
        assert_eq!(back.image, recs[1].image);
        assert_eq!(back.id, recs[1].id);
    }

    #[test]
    fn corpus_version_gate() {
        let tmp = tempdir().unwrap();
        generate_corpus(tmp.path(), &SceneSpec::background_rooms(), 5, 1, 0.0, "v").unwrap();
        let path = tmp.path().join("corpus.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 3");
        std::fs::write(&path, text).unwrap();
        match Corpus::open(tmp.path()) {
            Err(Error::ManifestVersion { found: 3, supported: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
