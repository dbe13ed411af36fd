//! Bags, the synthetic MIL tasks, and the on-disk formats.
//!
//! Bag file (HKB1, little-endian):
//!
//! ```text
//! "HKB1" | version u16 = 1 | reserved u16 = 0 | N u64 | D u64 | N·D f32, row-major
//! ```
//!
//! Manifest: UTF-8, one `bag_path \t label \t bag_id` record per line, paths
//! relative to the manifest's directory, `#` lines ignored.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derived, SeededRng};
use crate::tensor::{dot, Matrix};

pub const BAG_MAGIC: [u8; 4] = *b"HKB1";
pub const BAG_VERSION: u16 = 1;
const BAG_HEADER_LEN: usize = 4 + 2 + 2 + 8 + 8;

/// One bag: an N×D instance matrix and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct BagFeatures {
    pub features: Matrix,
    pub label: usize,
    pub bag_id: String,
}

impl BagFeatures {
    pub fn num_instances(&self) -> usize {
        self.features.rows()
    }
}

pub fn encode_bag(features: &Matrix) -> Vec<u8> {
    let (n, d) = features.shape();
    let mut out = Vec::with_capacity(BAG_HEADER_LEN + 4 * n * d);
    out.extend_from_slice(&BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_bag(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, header needs {BAG_HEADER_LEN}", bytes.len())));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != BAG_MAGIC {
        return Err(Error::BadMagic {
            expected: BAG_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < BAG_HEADER_LEN {
        return Err(Error::Truncated(format!("{} bytes, header needs {BAG_HEADER_LEN}", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BAG_VERSION {
        return Err(Error::Version {
            expected: BAG_VERSION,
            found: version,
        });
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let d = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let payload = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .filter(|&b| b <= (isize::MAX as u64))
        .ok_or_else(|| Error::ShapeOverflow(format!("{n}x{d} float32 payload does not fit in memory")))?
        as usize;
    let body = &bytes[BAG_HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::Truncated(format!(
            "{n}x{d} needs {payload} payload bytes, found {}",
            body.len()
        )));
    }
    if body.len() > payload {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after {n}x{d} payload",
            body.len() - payload
        )));
    }
    if n == 0 || d == 0 {
        return Err(Error::Corrupt(format!("bag shape {n}x{d} is empty")));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(n as usize, d as usize, data)
}

pub fn write_bag(path: &Path, features: &Matrix) -> Result<()> {
    fs::write(path, encode_bag(features)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads an HKB1 file. The label is not stored in the file and is set to 0;
/// the bag id defaults to the file stem.
pub fn read_bag(path: &Path) -> Result<BagFeatures> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let features = decode_bag(&bytes)?;
    Ok(BagFeatures {
        features,
        label: 0,
        bag_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub bag_path: PathBuf,
    pub label: usize,
    pub bag_id: String,
}

pub fn parse_manifest(text: &str, base: &Path, source: &str, classes: usize) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest {
            path: source.to_string(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| err(format!("invalid label {:?}", fields[1])))?;
        if label >= classes {
            return Err(err(format!("label {label} out of range for {classes} classes")));
        }
        if fields[0].is_empty() {
            return Err(err("empty bag path".into()));
        }
        out.push(ManifestEntry {
            bag_path: base.join(fields[0]),
            label,
            bag_id: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path, classes: usize) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base, &path.display().to_string(), classes)
}

/// Reads a manifest and every bag it lists, in order.
pub fn load_manifest(path: &Path, classes: usize) -> Result<Vec<BagFeatures>> {
    read_manifest(path, classes)?
        .into_iter()
        .map(|e| {
            let bag = read_bag(&e.bag_path)?;
            Ok(BagFeatures {
                features: bag.features,
                label: e.label,
                bag_id: e.bag_id,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    /// Positive iff at least one signal instance is present.
    Witness,
    /// Positive iff both an A-type and a B-type instance are present.
    Cooccurrence,
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthTask::Witness => "witness",
            SynthTask::Cooccurrence => "cooccurrence",
        })
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "witness" => Ok(SynthTask::Witness),
            "cooccurrence" => Ok(SynthTask::Cooccurrence),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected witness or cooccurrence)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTaskConfig {
    pub task: SynthTask,
    pub dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Background mixture components; 1 means a single `N(0, I)`.
    pub n_clusters: usize,
    /// Signal cluster offset in units of the unit noise std.
    pub separation: f64,
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            task: SynthTask::Witness,
            dim: 32,
            n_min: 64,
            n_max: 256,
            n_clusters: 1,
            separation: 4.0,
            train_bags: 200,
            val_bags: 50,
            test_bags: 100,
            seed: 0,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("D must be at least 2, got {}", self.dim)));
        }
        if self.n_min < 2 || self.n_max < self.n_min {
            return Err(Error::Config(format!(
                "instance range [{}, {}] must satisfy 2 <= min <= max",
                self.n_min, self.n_max
            )));
        }
        if self.n_clusters == 0 {
            return Err(Error::Config("n_clusters must be at least 1".into()));
        }
        let signal_dirs = match self.task {
            SynthTask::Witness => 1,
            SynthTask::Cooccurrence => 2,
        };
        if signal_dirs + self.n_clusters - 1 > self.dim {
            return Err(Error::Config(format!(
                "D={} is too small for {} signal directions and {} background clusters",
                self.dim, signal_dirs, self.n_clusters
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!(
                "separation must be a non-negative number, got {}",
                self.separation
            )));
        }
        Ok(())
    }
}

/// A generated dataset plus the geometry needed by oracle classifiers.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train: Vec<BagFeatures>,
    pub val: Vec<BagFeatures>,
    pub test: Vec<BagFeatures>,
    /// Signal cluster means (one for witness, A then B for co-occurrence).
    pub signal_means: Vec<Vec<f64>>,
}

impl SynthDataset {
    pub fn splits(&self) -> [(&'static str, &[BagFeatures]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Unit vectors, mutually orthogonal (Gram–Schmidt on Gaussian draws).
fn orthonormal_directions(count: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let p = dot(&v, u);
            for (a, b) in v.iter_mut().zip(u) {
                *a -= p * b;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
    }
    out
}

struct Geometry {
    signal: Vec<Vec<f64>>,
    background: Vec<Vec<f64>>,
}

impl Geometry {
    fn new(cfg: &SynthTaskConfig, rng: &mut SeededRng) -> Self {
        let n_signal = match cfg.task {
            SynthTask::Witness => 1,
            SynthTask::Cooccurrence => 2,
        };
        let dirs = orthonormal_directions(n_signal + cfg.n_clusters - 1, cfg.dim, rng);
        let signal = dirs[..n_signal]
            .iter()
            .map(|u| u.iter().map(|v| v * cfg.separation).collect())
            .collect();
        // Extra background components sit off the signal axes, so the
        // projection onto each signal direction stays N(0, 1) for background.
        let mut background = vec![vec![0.0; cfg.dim]];
        background.extend(
            dirs[n_signal..]
                .iter()
                .map(|u| u.iter().map(|v| v * cfg.separation.max(1.0) * 0.75).collect()),
        );
        Self { signal, background }
    }

    fn draw(mean: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        mean.iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                // Stored as f32 on disk; keep memory and disk identical.
                (m + z) as f32 as f64
            })
            .collect()
    }

    fn background_bag(&self, n: usize, dim: usize, rng: &mut SeededRng) -> Matrix {
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let c = if self.background.len() == 1 {
                0
            } else {
                rng.gen_range(0..self.background.len())
            };
            data.extend(Self::draw(&self.background[c], rng));
        }
        Matrix::from_vec(n, dim, data).expect("sized above")
    }

    fn plant(&self, bag: &mut Matrix, positions: &[usize], mean: &[f64], rng: &mut SeededRng) {
        for &i in positions {
            let v = Self::draw(mean, rng);
            bag.row_mut(i).copy_from_slice(&v);
        }
    }
}

/// Witness count range: `m ∈ [1, max(1, ⌊0.05·N⌋)]`.
fn witness_count(n: usize, rng: &mut SeededRng) -> usize {
    let hi = (n / 20).max(1);
    rng.gen_range(1..=hi)
}

/// Per-type count for the co-occurrence task: `m ∈ [⌈0.05·N⌉, ⌈0.10·N⌉]`.
fn cooccurrence_count(n: usize, rng: &mut SeededRng) -> usize {
    let lo = n.div_ceil(20).max(1);
    let hi = n.div_ceil(10).max(lo);
    rng.gen_range(lo..=hi)
}

fn balanced_labels(count: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..count).map(|i| usize::from(i < count / 2)).collect();
    labels.shuffle(rng);
    labels
}

fn generate_split(
    cfg: &SynthTaskConfig,
    geo: &Geometry,
    split: &str,
    count: usize,
    rng: &mut SeededRng,
) -> Vec<BagFeatures> {
    let labels = balanced_labels(count, rng);
    let mut negatives_seen = 0usize;
    labels
        .into_iter()
        .enumerate()
        .map(|(idx, label)| {
            let n = rng.gen_range(cfg.n_min..=cfg.n_max);
            let mut features = geo.background_bag(n, cfg.dim, rng);
            match cfg.task {
                SynthTask::Witness => {
                    if label == 1 {
                        let m = witness_count(n, rng);
                        let pos = sample(rng, n, m).into_vec();
                        geo.plant(&mut features, &pos, &geo.signal[0], rng);
                    }
                }
                SynthTask::Cooccurrence => {
                    // Negatives cycle through A-only, B-only, neither.
                    let (has_a, has_b) = if label == 1 {
                        (true, true)
                    } else {
                        negatives_seen += 1;
                        match (negatives_seen - 1) % 3 {
                            0 => (true, false),
                            1 => (false, true),
                            _ => (false, false),
                        }
                    };
                    let m_a = if has_a { cooccurrence_count(n, rng) } else { 0 };
                    let m_b = if has_b { cooccurrence_count(n, rng) } else { 0 };
                    let pos = sample(rng, n, m_a + m_b).into_vec();
                    geo.plant(&mut features, &pos[..m_a], &geo.signal[0], rng);
                    geo.plant(&mut features, &pos[m_a..], &geo.signal[1], rng);
                }
            }
            BagFeatures {
                features,
                label,
                bag_id: format!("{split}_{idx:04}"),
            }
        })
        .collect()
}

fn generate(cfg: &SynthTaskConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut geo_rng = derived(cfg.seed, 0);
    let geo = Geometry::new(cfg, &mut geo_rng);
    let split = |name: &str, stream: u64, count: usize| {
        generate_split(cfg, &geo, name, count, &mut derived(cfg.seed, stream))
    };
    let train = split("train", 1, cfg.train_bags);
    let val = split("val", 2, cfg.val_bags);
    let test = split("test", 3, cfg.test_bags);
    Ok(SynthDataset {
        train,
        val,
        test,
        signal_means: geo.signal.clone(),
    })
}

/// Classic MIL: a bag is positive iff it contains at least one signal instance.
pub fn gen_witness(cfg: &SynthTaskConfig) -> Result<SynthDataset> {
    let mut cfg = cfg.clone();
    cfg.task = SynthTask::Witness;
    generate(&cfg)
}

/// A bag is positive iff it contains both A-type and B-type instances.
pub fn gen_cooccurrence(cfg: &SynthTaskConfig) -> Result<SynthDataset> {
    let mut cfg = cfg.clone();
    cfg.task = SynthTask::Cooccurrence;
    generate(&cfg)
}

pub fn gen_dataset(cfg: &SynthTaskConfig) -> Result<SynthDataset> {
    generate(cfg)
}

/// Writes `bags/<split>_<idx>.hkb` plus `<split>.tsv` manifests under `dir`.
/// Returns the bag count per split.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<Vec<(&'static str, usize)>> {
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(format!("creating {}", bag_dir.display()), e))?;
    let mut counts = Vec::new();
    for (name, bags) in ds.splits() {
        let mut manifest = String::from("# bag_path\tlabel\tbag_id\n");
        for bag in bags {
            let rel = format!("bags/{}.hkb", bag.bag_id);
            write_bag(&dir.join(&rel), &bag.features)?;
            manifest.push_str(&format!("{rel}\t{}\t{}\n", bag.label, bag.bag_id));
        }
        let path = dir.join(format!("{name}.tsv"));
        fs::write(&path, manifest).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        counts.push((name, bags.len()));
    }
    Ok(counts)
}

/// Log-likelihood ratio of a unit-variance cluster at `mean` against the
/// zero-mean background: `2 x·μ − ‖μ‖²` (nearest-centroid score).
pub fn centroid_score(x: &[f64], mean: &[f64]) -> f64 {
    2.0 * dot(x, mean) - dot(mean, mean)
}

/// Bag score of the known-centroid oracle: the best instance score per
/// signal cluster, then the minimum over clusters (so co-occurrence requires
/// every cluster to be present).
pub fn oracle_bag_score(bag: &Matrix, signal_means: &[Vec<f64>]) -> f64 {
    signal_means
        .iter()
        .map(|mu| {
            (0..bag.rows())
                .map(|i| centroid_score(bag.row(i), mu))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}
