//! Point clouds and multi-scale patch division.
//!
//! Patch centers are picked by farthest-point sampling and each center is
//! grouped with its K nearest neighbors. Distances only ever use the xyz
//! channels; normals, when present, ride along as payload.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Below this radius a cloud is treated as a single repeated point.
const DEGENERATE_RADIUS: f64 = 1e-12;

/// One object: `n` points with `channels` values each (xyz, or xyz plus a
/// normal), stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    channels: usize,
    pub label: usize,
}

impl PointCloud {
    pub fn new(points: Vec<f64>, channels: usize, label: usize) -> Result<Self> {
        if channels != 3 && channels != 6 {
            return Err(Error::config(format!("point channels must be 3 or 6, got {channels}")));
        }
        if points.is_empty() || points.len() % channels != 0 {
            return Err(Error::config(format!(
                "{} values do not form a non-empty cloud of {channels}-channel points",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("point cloud contains non-finite coordinates"));
        }
        Ok(PointCloud {
            points,
            channels,
            label,
        })
    }

    /// Builds an xyz cloud from coordinate triples.
    pub fn from_xyz(points: &[[f64; 3]], label: usize) -> Result<Self> {
        Self::new(points.iter().flatten().copied().collect(), 3, label)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.channels..(i + 1) * self.channels]
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = self.point(i);
        [p[0], p[1], p[2]]
    }

    pub fn values(&self) -> &[f64] {
        &self.points
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }

    /// New cloud made of the given source rows, in order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut points = Vec::with_capacity(indices.len() * self.channels);
        for &i in indices {
            points.extend_from_slice(self.point(i));
        }
        PointCloud {
            points,
            channels: self.channels,
            label: self.label,
        }
    }

    pub fn squared_distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.xyz(a), self.xyz(b));
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
    }
}

/// Centers the xyz channels on their centroid and scales them so the
/// farthest point has norm 1. Normal channels are left untouched.
pub fn normalize(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for i in 0..cloud.len() {
        for (c, v) in centroid.iter_mut().zip(cloud.xyz(i)) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);

    let mut out = cloud.clone();
    let ch = out.channels;
    let mut radius: f64 = 0.0;
    for row in out.points.chunks_mut(ch) {
        for d in 0..3 {
            row[d] -= centroid[d];
        }
        radius = radius.max((row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt());
    }
    for row in out.points.chunks_mut(ch) {
        for v in &mut row[..3] {
            *v = if radius < DEGENERATE_RADIUS { 0.0 } else { *v / radius };
        }
    }
    out
}

/// How farthest-point sampling picks its first point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// Always start at this index (evaluation).
    Pinned(usize),
    /// Start at an index drawn from a generator seeded with this value
    /// (training).
    Seeded(u64),
}

impl FpsStart {
    pub fn resolve(self, n: usize) -> Result<usize> {
        match self {
            FpsStart::Pinned(i) if i < n => Ok(i),
            FpsStart::Pinned(i) => Err(Error::config(format!("fps start {i} out of range for {n} points"))),
            FpsStart::Seeded(seed) => Ok(ChaCha8Rng::seed_from_u64(seed).random_range(0..n)),
        }
    }
}

/// Greedy farthest-point sampling of `count` indices.
///
/// Each pick maximizes the squared xyz distance to the nearest already
/// chosen point; ties go to the lowest index and no index repeats.
pub fn fps(cloud: &PointCloud, count: usize, start: FpsStart) -> Result<Vec<usize>> {
    let n = cloud.len();
    if count == 0 || count > n {
        return Err(Error::config(format!("fps needs 1 <= count <= {n}, got {count}")));
    }
    let first = start.resolve(n)?;
    let mut chosen = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut picks = Vec::with_capacity(count);
    let mut current = first;
    loop {
        picks.push(current);
        chosen[current] = true;
        if picks.len() == count {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            let d = cloud.squared_distance(current, i);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !chosen[i] && best.is_none_or(|(_, bd)| nearest[i] > bd) {
                best = Some((i, nearest[i]));
            }
        }
        current = best.expect("count <= n leaves an unchosen point").0;
    }
    Ok(picks)
}

/// Indices of the `k` nearest points (squared xyz distance) to each center,
/// nearest first. Ties go to the lowest index, except that a center always
/// ranks itself first.
pub fn knn(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("knn needs 1 <= K <= {n}, got {k}")));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::config(format!("center index {bad} out of range for {n} points")));
    }
    let mut keyed: Vec<(f64, bool, usize)> = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(centers.len());
    for &c in centers {
        keyed.clear();
        keyed.extend((0..n).map(|i| (cloud.squared_distance(c, i), i != c, i)));
        let by_rank = |a: &(f64, bool, usize), b: &(f64, bool, usize)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if k < n {
            keyed.select_nth_unstable_by(k - 1, by_rank);
        }
        keyed[..k].sort_unstable_by(by_rank);
        out.push(keyed[..k].iter().map(|e| e.2).collect());
    }
    Ok(out)
}

/// One (patch size K, patch count S) entry of a multi-scale configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scale {
    pub k: usize,
    pub s: usize,
}

/// Patch scales ordered from small to large K; between one and four of
/// them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleConfig(Vec<Scale>);

impl ScaleConfig {
    pub fn new(scales: Vec<Scale>) -> Result<Self> {
        if scales.is_empty() || scales.len() > 4 {
            return Err(Error::config(format!("between 1 and 4 scales required, got {}", scales.len())));
        }
        if scales.iter().any(|s| s.k == 0 || s.s == 0) {
            return Err(Error::config("patch size and patch count must be positive"));
        }
        if scales.windows(2).any(|w| w[0].k > w[1].k) {
            return Err(Error::config("scales must be ordered by increasing patch size"));
        }
        Ok(ScaleConfig(scales))
    }

    /// Parses `K:S` pairs separated by commas, e.g. `16:16,32:8`.
    pub fn parse(text: &str) -> Result<Self> {
        let scales = text
            .split(',')
            .map(|pair| {
                let (k, s) = pair
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::config(format!("scale `{pair}` is not of the form K:S")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad number in scale `{pair}`")))
                };
                Ok(Scale { k: parse(k)?, s: parse(s)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales)
    }

    /// The four-scale layout used for 1024-point clouds.
    pub fn standard() -> Self {
        ScaleConfig(vec![
            Scale { k: 32, s: 64 },
            Scale { k: 64, s: 32 },
            Scale { k: 128, s: 16 },
            Scale { k: 256, s: 8 },
        ])
    }

    pub fn scales(&self) -> &[Scale] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of patches across scales.
    pub fn total_patches(&self) -> usize {
        self.0.iter().map(|s| s.s).sum()
    }

    pub fn max_k(&self) -> usize {
        self.0.iter().map(|s| s.k).max().unwrap_or(0)
    }

    pub fn check_points(&self, n: usize) -> Result<()> {
        for s in &self.0 {
            if s.k > n || s.s > n {
                return Err(Error::config(format!(
                    "scale K={} S={} does not fit a cloud of {n} points",
                    s.k, s.s
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for ScaleConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}:{}", s.k, s.s)?;
        }
        Ok(())
    }
}

/// Patches of one scale.
#[derive(Clone, Debug)]
pub struct ScalePatches {
    pub scale: Scale,
    pub center_indices: Vec<usize>,
    /// `S x K` source indices, nearest first.
    pub neighbor_indices: Vec<Vec<usize>>,
    /// `[S, C]`
    pub centers: Tensor,
    /// `[S, K, C]`
    pub patches: Tensor,
}

#[derive(Clone, Debug)]
pub struct PatchSet {
    pub scales: Vec<ScalePatches>,
}

impl PatchSet {
    /// Patch centers of every scale, in scale order, as `[S_total, 3]` xyz.
    pub fn center_xyz(&self) -> Tensor {
        let mut data = Vec::new();
        for sp in &self.scales {
            let c = sp.centers.shape()[1];
            for row in sp.centers.data().chunks(c) {
                data.extend_from_slice(&row[..3]);
            }
        }
        let rows = data.len() / 3;
        Tensor::from_parts(vec![rows, 3], data)
    }
}

/// Farthest-point centers plus K-nearest-neighbor grouping for every scale.
/// All scales share the same FPS start.
pub fn divide(cloud: &PointCloud, scales: &ScaleConfig, start: FpsStart) -> Result<PatchSet> {
    scales.check_points(cloud.len())?;
    let start = FpsStart::Pinned(start.resolve(cloud.len())?);
    let ch = cloud.channels();
    let mut out = Vec::with_capacity(scales.len());
    for &scale in scales.scales() {
        let center_indices = fps(cloud, scale.s, start)?;
        let neighbor_indices = knn(cloud, &center_indices, scale.k)?;
        let centers = cloud.select(&center_indices);
        let mut patch_data = Vec::with_capacity(scale.s * scale.k * ch);
        for row in &neighbor_indices {
            patch_data.extend_from_slice(cloud.select(row).values());
        }
        out.push(ScalePatches {
            scale,
            centers: Tensor::from_parts(vec![scale.s, ch], centers.values().to_vec()),
            patches: Tensor::from_parts(vec![scale.s, scale.k, ch], patch_data),
            center_indices,
            neighbor_indices,
        });
    }
    Ok(PatchSet { scales: out })
}
