//! Datasets on disk, the synthetic shape generator and the missing-point
//! sampler used for robustness sweeps.
//!
//! A dataset is a manifest plus one PCS1 file per split. PCS1, little-endian:
//!
//! ```text
//! "PCS1" | version u32 = 1 | object count u32 | N u32 | C u32
//! per object: label u32 | N * C f32, row-major
//! ```
//!
//! The manifest is `key=value` text with keys `classes` (comma-separated
//! names), `train`, `test` (paths relative to the manifest), `n_points` and
//! `channels`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{parse_pairs, parse_value, render_pairs};
use crate::error::{Error, Result};
use crate::geometry::{fps, normalize, FpsStart, PointCloud};

pub const MAGIC: &[u8; 4] = b"PCS1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.4;

/// Serializes clouds that share point count and channel count.
pub fn encode_split(clouds: &[PointCloud]) -> Result<Vec<u8>> {
    let (n, c) = clouds.first().map_or((0, 0), |p| (p.len(), p.channels()));
    if let Some(bad) = clouds.iter().position(|p| p.len() != n || p.channels() != c) {
        return Err(Error::config(format!(
            "object {bad} has {}x{} values, expected {n}x{c}",
            clouds[bad].len(),
            clouds[bad].channels()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + clouds.len() * (4 + n * c * 4));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, clouds.len() as u32, n as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for cloud in clouds {
        out.extend_from_slice(&(cloud.label as u32).to_le_bytes());
        for &v in cloud.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses a PCS1 split. Values are returned as stored, without
/// normalization. Labels must be below `classes`.
pub fn decode_split(bytes: &[u8], classes: usize) -> Result<Vec<PointCloud>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, not a PCS1 file"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let count = read_u32(bytes, 8) as usize;
    let n = read_u32(bytes, 12) as usize;
    let c = read_u32(bytes, 16) as usize;
    if count > 0 && (n == 0 || c < 3) {
        return Err(format_err(12, format!("{n} points x {c} channels cannot hold xyz clouds")));
    }
    let sizes = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(4))
        .and_then(|r| Some((r, r.checked_mul(count)?.checked_add(HEADER_LEN)?)));
    let Some((record, expected)) = sizes else {
        return Err(format_err(8, "object sizes overflow"));
    };
    if bytes.len() < expected {
        let object = (bytes.len() - HEADER_LEN) / record;
        return Err(format_err(
            bytes.len(),
            format!("truncated in object {object} of {count} ({expected} bytes expected)"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after last object"));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let at = HEADER_LEN + i * record;
        let label = read_u32(bytes, at) as usize;
        if label >= classes {
            return Err(format_err(at, format!("label {label} out of range for {classes} classes")));
        }
        let values = bytes[at + 4..at + record]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push(PointCloud::new(values, c, label).map_err(|e| format_err(at + 4, e.to_string()))?);
    }
    Ok(out)
}

pub fn save_split(path: &Path, clouds: &[PointCloud]) -> Result<()> {
    std::fs::write(path, encode_split(clouds)?).map_err(|e| Error::io(path, e))
}

/// Reads a split and normalizes every cloud.
pub fn load_split(path: &Path, classes: usize) -> Result<Vec<PointCloud>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let clouds = decode_split(&bytes, classes).map_err(|e| e.context(path.display().to_string()))?;
    Ok(clouds.iter().map(normalize).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub train: PathBuf,
    pub test: PathBuf,
    pub n_points: usize,
    pub channels: usize,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> = parse_pairs(text)?;
        let mut req = |k: &str| {
            pairs
                .remove(k)
                .ok_or_else(|| Error::config(format!("manifest is missing `{k}`")))
        };
        let classes: Vec<String> = req("classes")?.split(',').map(|s| s.trim().to_string()).collect();
        if classes.iter().any(String::is_empty) {
            return Err(Error::config("manifest has an empty class name"));
        }
        let manifest = Manifest {
            classes,
            train: PathBuf::from(req("train")?),
            test: PathBuf::from(req("test")?),
            n_points: parse_value("n_points", &req("n_points")?)?,
            channels: parse_value("channels", &req("channels")?)?,
        };
        if let Some(k) = pairs.keys().next() {
            return Err(Error::config(format!("unknown manifest key `{k}`")));
        }
        Ok(manifest)
    }

    pub fn render(&self) -> String {
        render_pairs(&[
            ("classes".into(), self.classes.join(",")),
            ("train".into(), self.train.display().to_string()),
            ("test".into(), self.test.display().to_string()),
            ("n_points".into(), self.n_points.to_string()),
            ("channels".into(), self.channels.to_string()),
        ])
    }
}

/// Class names plus normalized train and test clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn channels(&self) -> usize {
        self.train.iter().chain(&self.test).next().map_or(3, PointCloud::channels)
    }

    pub fn n_points(&self) -> usize {
        self.train.iter().chain(&self.test).next().map_or(0, PointCloud::len)
    }

    /// Loads the manifest at `path` and both splits it references.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = Manifest::parse(&text).map_err(|e| e.context(path.display().to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let classes = manifest.classes.len();
        let train = load_split(&base.join(&manifest.train), classes)?;
        let test = load_split(&base.join(&manifest.test), classes)?;
        for (split, clouds) in [("train", &train), ("test", &test)] {
            if let Some(c) = clouds
                .iter()
                .find(|c| c.len() != manifest.n_points || c.channels() != manifest.channels)
            {
                return Err(Error::config(format!(
                    "{split} split holds {}x{} clouds, manifest says {}x{}",
                    c.len(),
                    c.channels(),
                    manifest.n_points,
                    manifest.channels
                ))
                .context(path.display().to_string()));
            }
        }
        Ok(Dataset {
            classes: manifest.classes,
            train,
            test,
        })
    }

    /// Writes `manifest.txt`, `train.pcs` and `test.pcs` into `dir` and
    /// returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_split(&dir.join("train.pcs"), &self.train)?;
        save_split(&dir.join("test.pcs"), &self.test)?;
        let manifest = Manifest {
            classes: self.classes.clone(),
            train: "train.pcs".into(),
            test: "test.pcs".into(),
            n_points: self.n_points(),
            channels: self.channels(),
        };
        let path = dir.join("manifest.txt");
        std::fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Torus => "torus",
        }
    }

    /// `n` points drawn uniformly from the surface in canonical pose: unit
    /// sphere, cube with half-edge 1, closed cylinder of radius 1 and
    /// height 2, torus with radii [`TORUS_MAJOR`] and [`TORUS_MINOR`].
    pub fn sample(self, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    fn sample_one(self, rng: &mut impl Rng) -> [f64; 3] {
        match self {
            Shape::Sphere => loop {
                let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-9 {
                    break v.map(|x| x / norm);
                }
            },
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let mut p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                p[axis] = if face % 2 == 0 { -1.0 } else { 1.0 };
                p
            }
            Shape::Cylinder => {
                // side area 4 pi, caps 2 pi together
                let theta = rng.random_range(0.0..2.0 * PI);
                if rng.random_bool(2.0 / 3.0) {
                    [theta.cos(), theta.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    let z = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            Shape::Torus => loop {
                let theta = rng.random_range(0.0..2.0 * PI);
                let phi = rng.random_range(0.0..2.0 * PI);
                let w = (TORUS_MAJOR + TORUS_MINOR * phi.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.random::<f64>() < w {
                    let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
                    break [ring * theta.cos(), ring * theta.sin(), TORUS_MINOR * phi.sin()];
                }
            },
        }
    }
}

/// Uniformly random rotation matrix from a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q = loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Balanced four-class dataset of sampled surfaces. Each object gets a
/// random rotation and scale and is then normalized. Of `per_class` objects
/// per class, the first two thirds go to the training split.
pub fn generate_synthetic(per_class: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    if n_points < 64 {
        return Err(Error::config(format!("synthetic clouds need at least 64 points, got {n_points}")));
    }
    if per_class < 3 {
        return Err(Error::config(format!("need at least 3 objects per class, got {per_class}")));
    }
    let n_train = per_class * 2 / 3;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, shape) in Shape::ALL.iter().enumerate() {
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((label as u64) << 32) | i as u64);
            let rot = random_rotation(&mut rng);
            let scale = rng.random_range(0.8..1.25);
            let points: Vec<[f64; 3]> = shape
                .sample(n_points, &mut rng)
                .into_iter()
                .map(|p| std::array::from_fn(|r| scale * (0..3).map(|c| rot[r][c] * p[c]).sum::<f64>()))
                .collect();
            let cloud = normalize(&PointCloud::from_xyz(&points, label)?);
            if i < n_train {
                train.push(cloud);
            } else {
                test.push(cloud);
            }
        }
    }
    Ok(Dataset {
        classes: Shape::ALL.iter().map(|s| s.name().to_string()).collect(),
        train,
        test,
    })
}

/// Keeps `keep` farthest-point-sampled points, simulating missing data.
/// Retained points stay in their original order, so `keep == N` returns the
/// cloud unchanged. For a fixed seed, smaller `keep` values select nested
/// subsets.
pub fn fps_drop(cloud: &PointCloud, keep: usize, seed: u64) -> Result<PointCloud> {
    if keep == 0 || keep > cloud.len() {
        return Err(Error::config(format!(
            "keep must be in 1..={}, got {keep}",
            cloud.len()
        )));
    }
    let mut idx = fps(cloud, keep, FpsStart::Seeded(seed))?;
    idx.sort_unstable();
    Ok(cloud.select(&idx))
}
