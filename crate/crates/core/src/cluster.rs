//! Video-level representations, k-means, elbow selection and homogeneity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::tensor::{read_stf1, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoFeature {
    pub video_id: String,
    pub values: Vec<f32>,
}

/// Streaming max-pool of `α_ij · h_ij` over locations and frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePooler {
    pooled: Option<Vec<f32>>,
    frames: usize,
}

impl Default for FeaturePooler {
    fn default() -> Self {
        Self::new()
    }
}

impl FeaturePooler {
    pub fn new() -> Self {
        FeaturePooler {
            pooled: None,
            frames: 0,
        }
    }

    /// `hidden` is `locations × d_h`; `alpha` has one weight per location.
    pub fn push(&mut self, hidden: &Tensor, alpha: &AttentionMap) -> Result<()> {
        let (n, d) = match hidden.dims() {
            [n, d] => (*n, *d),
            other => return Err(Error::shape(format!("hidden state {other:?}, expected [locations, d_h]"))),
        };
        if alpha.alpha.len() != n {
            return Err(Error::shape(format!(
                "attention has {} locations, hidden state {n}",
                alpha.alpha.len()
            )));
        }
        let pooled = self.pooled.get_or_insert_with(|| vec![f32::NEG_INFINITY; d]);
        if pooled.len() != d {
            return Err(Error::shape("hidden size changed within a video"));
        }
        for (row, &a) in hidden.data().chunks_exact(d).zip(alpha.alpha.data()) {
            for (p, &h) in pooled.iter_mut().zip(row) {
                *p = p.max(a * h);
            }
        }
        self.frames += 1;
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> Option<&[f32]> {
        self.pooled.as_deref()
    }

    pub fn restore(&mut self, pooled: Option<Vec<f32>>, frames: usize) {
        self.pooled = pooled;
        self.frames = frames;
    }

    pub fn finish(self, video_id: impl Into<String>) -> Result<VideoFeature> {
        let values = self
            .pooled
            .ok_or_else(|| Error::validation("video_feature needs at least one frame"))?;
        Ok(VideoFeature {
            video_id: video_id.into(),
            values,
        })
    }
}

pub fn video_feature<'a, I>(video_id: &str, per_frame: I) -> Result<VideoFeature>
where
    I: IntoIterator<Item = (&'a Tensor, &'a AttentionMap)>,
{
    let mut pooler = FeaturePooler::new();
    for (h, a) in per_frame {
        pooler.push(h, a)?;
    }
    pooler.finish(video_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub k: usize,
    /// `k` rows of the feature dimension.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input feature, in input order.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusteringResult {
    pub fn by_id(&self, features: &[VideoFeature]) -> BTreeMap<String, usize> {
        features
            .iter()
            .zip(&self.assignments)
            .map(|(f, &c)| (f.video_id.clone(), c))
            .collect()
    }
}

pub const MAX_LLOYD_ITERATIONS: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn as_points(features: &[VideoFeature]) -> Result<Vec<Vec<f64>>> {
    let dim = features.first().map_or(0, |f| f.values.len());
    features
        .iter()
        .map(|f| {
            if f.values.len() != dim {
                return Err(Error::shape(format!(
                    "feature {} has dimension {}, expected {dim}",
                    f.video_id,
                    f.values.len()
                )));
            }
            if f.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("feature {} is not finite", f.video_id)));
            }
            Ok(f.values.iter().map(|&v| v as f64).collect())
        })
        .collect()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[idx].clone());
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing (at most `MAX_LLOYD_ITERATIONS`).
pub fn kmeans(features: &[VideoFeature], k: usize, seed: u64) -> Result<ClusteringResult> {
    if k == 0 || k > features.len() {
        return Err(Error::config(format!("k = {k} with {} features", features.len())));
    }
    let points = as_points(features)?;
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(&points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Empty clusters take the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                centroids[c] = points[far].clone();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let inertia: f64 = points.iter().zip(&next).map(|(p, &c)| sq_dist(p, &centroids[c])).sum();
        trace.push(inertia);
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum();
    Ok(ClusteringResult {
        k,
        centroids,
        assignments,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}

/// Inertia for every k in `k_range` (inclusive).
pub fn inertia_curve(features: &[VideoFeature], k_range: (usize, usize), seed: u64) -> Result<Vec<(usize, f64)>> {
    let (lo, hi) = k_range;
    if lo == 0 || hi < lo + 2 || hi > features.len() {
        return Err(Error::config(format!(
            "k range {lo}..={hi} needs at least three values within 1..={}",
            features.len()
        )));
    }
    (lo..=hi).map(|k| Ok((k, kmeans(features, k, seed)?.inertia))).collect()
}

/// k with the largest discrete second difference of the inertia curve,
/// interior points only; ties go to the smaller k.
pub fn elbow_from_curve(curve: &[(usize, f64)]) -> Result<usize> {
    if curve.len() < 3 {
        return Err(Error::config("elbow needs at least three k values"));
    }
    let mut best = (curve[1].0, f64::NEG_INFINITY);
    for w in curve.windows(3) {
        let second = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if second > best.1 {
            best = (w[1].0, second);
        }
    }
    Ok(best.0)
}

pub fn elbow_optimal_k(features: &[VideoFeature], k_range: (usize, usize), seed: u64) -> Result<usize> {
    elbow_from_curve(&inertia_curve(features, k_range, seed)?)
}

fn entropy(counts: impl Iterator<Item = usize>, total: usize) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// `1 − H(class | cluster) / H(class)`, or 1 when there is a single class.
pub fn homogeneity(assignments: &BTreeMap<String, usize>, labels: &BTreeMap<String, String>) -> Result<f64> {
    let a: BTreeSet<&String> = assignments.keys().collect();
    let b: BTreeSet<&String> = labels.keys().collect();
    if a != b {
        let missing: Vec<&str> = a.symmetric_difference(&b).map(|s| s.as_str()).collect();
        return Err(Error::validation(format!("video ids differ: {}", missing.join(", "))));
    }
    let n = labels.len();
    if n == 0 {
        return Ok(1.0);
    }
    let mut class_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, &str), usize> = BTreeMap::new();
    let mut cluster_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (id, label) in labels {
        let c = assignments[id];
        *class_counts.entry(label).or_default() += 1;
        *joint.entry((c, label)).or_default() += 1;
        *cluster_counts.entry(c).or_default() += 1;
    }
    let h_class = entropy(class_counts.values().copied(), n);
    if h_class == 0.0 {
        return Ok(1.0);
    }
    let h_cond: f64 = joint
        .iter()
        .map(|(&(c, _), &nck)| {
            let p = nck as f64 / n as f64;
            -p * (nck as f64 / cluster_counts[&c] as f64).ln()
        })
        .sum();
    Ok((1.0 - h_cond / h_class).clamp(0.0, 1.0))
}

/// Median of a nonempty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// How the number of clusters is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KChoice {
    Fixed(usize),
    /// Median elbow over the seeds, searched within the inclusive range.
    Elbow(usize, usize),
}

pub const DEFAULT_K_RANGE: (usize, usize) = (1, 8);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub elbow: Option<usize>,
    pub inertia: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub homogeneity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub k: usize,
    pub runs: Vec<SeedRun>,
    /// Lowest-inertia clustering at `k` over all seeds.
    pub best: ClusteringResult,
    pub median_homogeneity: Option<f64>,
}

/// Clusters `features` once per seed. With `labels`, every seed's
/// homogeneity is reported along with their median.
pub fn cluster_videos(
    features: &[VideoFeature],
    choice: KChoice,
    seeds: &[u64],
    labels: Option<&BTreeMap<String, String>>,
) -> Result<ClusterReport> {
    if seeds.is_empty() {
        return Err(Error::config("clustering needs at least one seed"));
    }
    let elbows: Vec<Option<usize>> = match choice {
        KChoice::Fixed(_) => vec![None; seeds.len()],
        KChoice::Elbow(lo, hi) => {
            let hi = hi.min(features.len());
            seeds
                .iter()
                .map(|&s| elbow_optimal_k(features, (lo, hi), s).map(Some))
                .collect::<Result<_>>()?
        }
    };
    let k = match choice {
        KChoice::Fixed(k) => k,
        KChoice::Elbow(..) => {
            let ks: Vec<f64> = elbows.iter().flatten().map(|&k| k as f64).collect();
            median(&ks).floor() as usize
        }
    };
    let mut runs = Vec::with_capacity(seeds.len());
    let mut best: Option<ClusteringResult> = None;
    for (&seed, elbow) in seeds.iter().zip(elbows) {
        let r = kmeans(features, k, seed)?;
        let homogeneity = labels.map(|l| homogeneity(&r.by_id(features), l)).transpose()?;
        runs.push(SeedRun {
            seed,
            elbow,
            inertia: r.inertia,
            homogeneity,
        });
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    let median_homogeneity = labels.map(|_| median(&runs.iter().filter_map(|r| r.homogeneity).collect::<Vec<_>>()));
    Ok(ClusterReport {
        k,
        runs,
        best: best.expect("at least one seed"),
        median_homogeneity,
    })
}

pub const FEATURE_SUFFIX: &str = ".feature.stf1";

/// Reads every `<video>.feature.stf1` in `dir`, ordered by video id.
pub fn load_features(dir: &Path) -> Result<Vec<VideoFeature>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::at_path(dir, e))? {
        let path = entry.map_err(|e| Error::at_path(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(id) = name.strip_suffix(FEATURE_SUFFIX) {
            paths.push((id.to_string(), path.clone()));
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::validation(format!("no *{FEATURE_SUFFIX} files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|(id, path)| {
            let file = File::open(&path).map_err(|e| Error::at_path(&path, e))?;
            let t = read_stf1(&mut BufReader::new(file))?
                .ok_or_else(|| Error::validation(format!("{}: empty feature file", path.display())))?;
            if t.rank() != 1 {
                return Err(Error::shape(format!("{}: feature dims {:?}", path.display(), t.dims())));
            }
            Ok(VideoFeature {
                video_id: id,
                values: t.into_data(),
            })
        })
        .collect()
}

/// One `{"video": id, "cluster": c}` line per feature.
pub fn write_assignments<W: Write>(w: &mut W, features: &[VideoFeature], result: &ClusteringResult) -> Result<()> {
    for (f, c) in features.iter().zip(&result.assignments) {
        let line = serde_json::json!({ "video": f.video_id, "cluster": c });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Centroids as one `k × d` tensor.
pub fn centroid_tensor(result: &ClusteringResult) -> Result<Tensor> {
    let d = result.centroids.first().map_or(0, |c| c.len());
    let data = result.centroids.iter().flatten().map(|&v| v as f32).collect();
    Tensor::new(vec![result.k, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[[f64; 2]], per: usize, seed: u64) -> (Vec<VideoFeature>, BTreeMap<String, String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut feats = Vec::new();
        let mut labels = BTreeMap::new();
        for (c, center) in centers.iter().enumerate() {
            for i in 0..per {
                let id = format!("v{c}_{i}");
                let values = center.iter().map(|m| (m + normal.sample(&mut rng)) as f32).collect();
                feats.push(VideoFeature { video_id: id.clone(), values });
                labels.insert(id, format!("class{c}"));
            }
        }
        (feats, labels)
    }

    #[test]
    fn identical_features_zero_inertia() {
        let feats: Vec<_> = (0..5)
            .map(|i| VideoFeature { video_id: i.to_string(), values: vec![1.0, 2.0] })
            .collect();
        assert_eq!(kmeans(&feats, 1, 0).unwrap().inertia, 0.0);
    }

    #[test]
    fn two_blobs_are_recovered() {
        let (feats, labels) = blobs(&[[0.0, 0.0], [20.0, 0.0]], 15, 3);
        let res = kmeans(&feats, 2, 7).unwrap();
        assert_eq!(homogeneity(&res.by_id(&feats), &labels).unwrap(), 1.0);
        assert!(res.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn elbow_on_three_blobs() {
        let (feats, _) = blobs(&[[0.0, 0.0], [30.0, 0.0], [10.0, 25.0]], 10, 5);
        assert_eq!(elbow_optimal_k(&feats, (1, 8), 1).unwrap(), 3);
    }

    #[test]
    fn k_larger_than_data_is_config_error() {
        let (feats, _) = blobs(&[[0.0, 0.0]], 2, 1);
        assert!(matches!(kmeans(&feats, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn homogeneity_cases() {
        let labels: BTreeMap<String, String> =
            [("a", "x"), ("b", "x"), ("c", "y"), ("d", "y")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let pure: BTreeMap<String, usize> = [("a", 0), ("b", 0), ("c", 1), ("d", 1)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let one: BTreeMap<String, usize> = labels.keys().map(|k| (k.clone(), 0)).collect();
        assert_eq!(homogeneity(&pure, &labels).unwrap(), 1.0);
        assert_eq!(homogeneity(&one, &labels).unwrap(), 0.0);
        let mut short = pure.clone();
        short.remove("a");
        assert!(homogeneity(&short, &labels).is_err());
    }
}
