//! Deterministic synthetic segmentation data with taxonomy-shaped features.
//!
//! Every node's feature mean is its parent's mean plus a Gaussian offset whose
//! scale depends on the node's level, so siblings sit closer together than
//! cousins. Label grids are Voronoi partitions of random sites; some cells are
//! true background, the rest carry leaves.
//!
//! Random streams are ChaCha8 keyed by the config seed: stream 0 draws the
//! class means, stream `1 + i` draws training scene `i` and stream
//! `2^32 + i` draws test scene `i`.
//!
//! # Dataset file layout (little endian)
//!
//! | bytes | content |
//! |------:|---------|
//! | 8 | magic `HTXDSET\0` |
//! | 4 | format version (`u32`, currently 1) |
//! | 8 | PRNG name, NUL padded (`chacha8`) |
//! | 8 | seed (`u64`) |
//! | 32 | SHA-256 of the generator config |
//! | 32 | SHA-256 of the canonical taxonomy text |
//! | 16 | sample count, height, width, feature dim (`u32` each) |
//!
//! followed, per sample, by `height·width·dim` `f64` features in row-major
//! pixel order and `height·width` `u32` labels (`0` = background, otherwise
//! the leaf's node id).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config;
use crate::error::{Error, Result};
use crate::taxonomy::{parse_taxonomy, NodeId, TaxonomyTree};

pub const MAGIC: &[u8; 8] = b"HTXDSET\0";
pub const FORMAT_VERSION: u32 = 1;
pub const PRNG_NAME: &str = "chacha8";
const TEST_STREAM: u64 = 1 << 32;
const MAX_SITE_ATTEMPTS: usize = 1000;

/// Label value of true-background pixels.
pub const BACKGROUND: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    /// Taxonomy file, relative to the config file.
    pub taxonomy: PathBuf,
    pub height: usize,
    pub width: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub d_in: usize,
    /// Mean dispersion per level, strictly decreasing.
    pub sigma_level: Vec<f64>,
    pub sigma_pix: f64,
    pub sites: usize,
    pub background_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthetic".into(),
            taxonomy: PathBuf::new(),
            height: 16,
            width: 16,
            train_samples: 48,
            test_samples: 24,
            d_in: 16,
            sigma_level: vec![2.0, 0.8, 0.5, 0.35, 0.25, 0.18],
            sigma_pix: 1.0,
            sites: 14,
            background_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Read a TOML config; the taxonomy path is resolved against its directory.
    pub fn load(path: &Path) -> Result<(Self, TaxonomyTree)> {
        let mut cfg: SynthConfig = config::read_toml(path)?;
        if cfg.taxonomy.as_os_str().is_empty() {
            return Err(Error::config("taxonomy", "missing taxonomy path"));
        }
        cfg.taxonomy = config::resolve(path, &cfg.taxonomy);
        let text = std::fs::read_to_string(&cfg.taxonomy)
            .map_err(|e| Error::config("taxonomy", format!("{}: {e}", cfg.taxonomy.display())))?;
        let tree = parse_taxonomy(&text)?;
        cfg.validate(&tree)?;
        Ok((cfg, tree))
    }

    pub fn validate(&self, tree: &TaxonomyTree) -> Result<()> {
        if self.height < 8 {
            return Err(Error::config("height", "must be at least 8"));
        }
        if self.width < 8 {
            return Err(Error::config("width", "must be at least 8"));
        }
        if self.d_in == 0 {
            return Err(Error::config("d_in", "must be positive"));
        }
        if self.train_samples == 0 {
            return Err(Error::config("train_samples", "must be positive"));
        }
        if self.test_samples == 0 {
            return Err(Error::config("test_samples", "must be positive"));
        }
        if self.sigma_level.len() < tree.depth() as usize {
            return Err(Error::config(
                "sigma_level",
                format!("needs one entry per level ({} levels)", tree.depth()),
            ));
        }
        if self.sigma_level.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("sigma_level", "entries must be positive"));
        }
        if self.sigma_level.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("sigma_level", "must be strictly decreasing with depth"));
        }
        if !(self.sigma_pix.is_finite() && self.sigma_pix >= 0.0) {
            return Err(Error::config("sigma_pix", "must be >= 0"));
        }
        if self.sites < 2 {
            return Err(Error::config("sites", "need at least 2 sites"));
        }
        if !(0.0..0.9).contains(&self.background_fraction) {
            return Err(Error::config("background_fraction", "must lie in [0, 0.9)"));
        }
        Ok(())
    }

    /// Hash of every setting that affects the generated bytes.
    pub fn content_hash(&self, tree: &TaxonomyTree) -> [u8; 32] {
        let mut canonical = self.clone();
        canonical.taxonomy = PathBuf::from(tree.content_hash());
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes()).into()
    }
}

/// Split of the generated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `height·width·d_in` values, pixel-major.
    pub features: Vec<f64>,
    /// `height·width` labels: [`BACKGROUND`] or a leaf node id.
    pub labels: Vec<u32>,
}

/// Class-conditional means sampled once from the seed.
#[derive(Debug, Clone)]
pub struct ClassGenerator {
    cfg: SynthConfig,
    tree: TaxonomyTree,
    leaves: Vec<NodeId>,
    /// Indexed by node id; entry 0 is the background mean.
    means: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

impl ClassGenerator {
    pub fn new(cfg: SynthConfig, tree: TaxonomyTree) -> Result<Self> {
        cfg.validate(&tree)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let max_id = tree.classes().iter().map(|id| id.0).max().unwrap_or(0) as usize;
        let mut means = vec![Vec::new(); max_id + 1];
        means[0] = gaussian(&mut rng, cfg.d_in, cfg.sigma_level[0]);
        // Parents before children: by level, then id.
        let mut order: Vec<NodeId> = tree.classes().to_vec();
        order.sort_by_key(|&id| (tree.node(id).expect("known").level, id));
        for id in order {
            let node = tree.node(id)?;
            let offset = gaussian(&mut rng, cfg.d_in, cfg.sigma_level[node.level as usize - 1]);
            let base = if node.parent == NodeId::ROOT {
                vec![0.0; cfg.d_in]
            } else {
                means[node.parent.0 as usize].clone()
            };
            means[id.0 as usize] = base.iter().zip(offset).map(|(a, b)| a + b).collect();
        }
        let leaves = tree.leaves();
        Ok(ClassGenerator {
            cfg,
            tree,
            leaves,
            means,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn tree(&self) -> &TaxonomyTree {
        &self.tree
    }

    /// Mean of a node, or of the background for [`BACKGROUND`].
    pub fn mean(&self, label: u32) -> &[f64] {
        &self.means[label as usize]
    }

    /// Scene `index` of `split`; a pure function of `(seed, split, index)`.
    pub fn generate_scene(&self, split: Split, index: u64) -> Result<Sample> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(match split {
            Split::Train => 1 + index,
            Split::Test => TEST_STREAM + index,
        });
        let (h, w) = (cfg.height, cfg.width);
        let target = cfg.background_fraction * (h * w) as f64;
        for _ in 0..MAX_SITE_ATTEMPTS {
            let sites: Vec<(f64, f64)> = (0..cfg.sites)
                .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
                .collect();
            let cell: Vec<usize> = (0..h * w)
                .map(|p| {
                    let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (i, &(sy, sx)) in sites.iter().enumerate() {
                        let d = (y - sy).powi(2) + (x - sx).powi(2);
                        if d < best_d {
                            best = i;
                            best_d = d;
                        }
                    }
                    best
                })
                .collect();
            let mut size = vec![0usize; cfg.sites];
            for &c in &cell {
                size[c] += 1;
            }
            let mut order: Vec<usize> = (0..cfg.sites).filter(|&c| size[c] > 0).collect();
            order.shuffle(&mut rng);
            let mut is_bg = vec![false; cfg.sites];
            let mut bg = 0usize;
            for &c in &order {
                let with = (bg + size[c]) as f64;
                if (with - target).abs() < (bg as f64 - target).abs() {
                    is_bg[c] = true;
                    bg += size[c];
                }
            }
            let frac = bg as f64 / (h * w) as f64;
            let fg_cells: Vec<usize> = order.iter().copied().filter(|&c| !is_bg[c]).collect();
            if (frac - cfg.background_fraction).abs() > 0.1 || fg_cells.is_empty() {
                continue;
            }
            let mut perm = self.leaves.clone();
            perm.shuffle(&mut rng);
            let mut cell_label = vec![BACKGROUND; cfg.sites];
            for (j, &c) in fg_cells.iter().enumerate() {
                cell_label[c] = perm[j % perm.len()].0;
            }
            let labels: Vec<u32> = cell.iter().map(|&c| cell_label[c]).collect();
            let mut features = Vec::with_capacity(h * w * cfg.d_in);
            for &label in &labels {
                let mean = self.mean(label);
                for &m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(m + cfg.sigma_pix * z);
                }
            }
            return Ok(Sample { features, labels });
        }
        Err(Error::config(
            "background_fraction",
            "no site layout reaches the requested background fraction",
        ))
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        let n = match split {
            Split::Train => self.cfg.train_samples,
            Split::Test => self.cfg.test_samples,
        };
        let samples = (0..n as u64)
            .map(|i| self.generate_scene(split, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            header: DatasetHeader {
                version: FORMAT_VERSION,
                prng: PRNG_NAME.to_string(),
                seed: self.cfg.seed,
                config_hash: self.cfg.content_hash(&self.tree),
                taxonomy_hash: Sha256::digest(self.tree.to_text().as_bytes()).into(),
                height: self.cfg.height,
                width: self.cfg.width,
                d_in: self.cfg.d_in,
            },
            samples,
        })
    }
}

/// Distances between leaf means, grouped by relationship.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalReport {
    /// Mean distance between leaves that share a parent.
    pub intra: f64,
    /// Mean distance between leaves under different top-level nodes.
    pub inter: f64,
}

impl SignalReport {
    pub fn ratio(&self) -> f64 {
        if self.inter == 0.0 {
            0.0
        } else {
            self.intra / self.inter
        }
    }
}

/// Check that sibling leaves are closer than leaves of different branches.
pub fn hierarchy_signal_check(gen: &ClassGenerator) -> Result<SignalReport> {
    let tree = gen.tree();
    let leaves = tree.leaves();
    let top = |id: NodeId| *tree.ancestors(id).expect("known").last().expect("non-empty");
    let dist = |a: NodeId, b: NodeId| {
        gen.mean(a.0)
            .iter()
            .zip(gen.mean(b.0))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for (i, &a) in leaves.iter().enumerate() {
        for &b in &leaves[i + 1..] {
            if tree.node(a)?.parent == tree.node(b)?.parent {
                intra += dist(a, b);
                n_intra += 1;
            } else if top(a) != top(b) {
                inter += dist(a, b);
                n_inter += 1;
            }
        }
    }
    let report = SignalReport {
        intra: if n_intra > 0 { intra / n_intra as f64 } else { 0.0 },
        inter: if n_inter > 0 { inter / n_inter as f64 } else { 0.0 },
    };
    if n_intra > 0 && n_inter > 0 && report.intra >= report.inter {
        return Err(Error::config(
            "sigma_level",
            format!(
                "sibling leaves ({:.3}) are not closer than other branches ({:.3}); increase the spread between levels",
                report.intra, report.inter
            ),
        ));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub prng: String,
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub taxonomy_hash: [u8; 32],
    pub height: usize,
    pub width: usize,
    pub d_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn pixels_per_sample(&self) -> usize {
        self.header.height * self.header.width
    }

    pub fn taxonomy_hash_hex(&self) -> String {
        hex::encode(self.header.taxonomy_hash)
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let h = &self.header;
        out.write_all(MAGIC)?;
        out.write_all(&h.version.to_le_bytes())?;
        let mut prng = [0u8; 8];
        prng[..h.prng.len().min(8)].copy_from_slice(&h.prng.as_bytes()[..h.prng.len().min(8)]);
        out.write_all(&prng)?;
        out.write_all(&h.seed.to_le_bytes())?;
        out.write_all(&h.config_hash)?;
        out.write_all(&h.taxonomy_hash)?;
        for v in [self.samples.len(), h.height, h.width, h.d_in] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::new();
        for s in &self.samples {
            buf.clear();
            for f in &s.features {
                buf.extend_from_slice(&f.to_le_bytes());
            }
            for l in &s.labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        let mut read = |n: usize| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            input.read_exact(&mut b).map_err(|_| bad("truncated dataset file"))?;
            Ok(b)
        };
        if read(8)? != MAGIC {
            return Err(bad("not a dataset file"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_of(&read(4)?);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let prng_raw = read(8)?;
        let prng = String::from_utf8_lossy(&prng_raw).trim_end_matches('\0').to_string();
        if prng != PRNG_NAME {
            return Err(Error::Format(format!("unknown generator `{prng}`")));
        }
        let seed = u64::from_le_bytes(read(8)?.try_into().expect("8 bytes"));
        let config_hash: [u8; 32] = read(32)?.try_into().expect("32 bytes");
        let taxonomy_hash: [u8; 32] = read(32)?.try_into().expect("32 bytes");
        let dims = read(16)?;
        let [n, height, width, d_in] = [0, 1, 2, 3].map(|i| u32_of(&dims[4 * i..4 * i + 4]) as usize);
        let pixels = height * width;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let raw = read(pixels * d_in * 8)?;
            let features = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let raw = read(pixels * 4)?;
            let labels = raw.chunks_exact(4).map(u32_of).collect();
            samples.push(Sample { features, labels });
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest).map_err(|_| bad("unreadable trailer"))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after the last sample"));
        }
        Ok(Dataset {
            header: DatasetHeader {
                version,
                prng,
                seed,
                config_hash,
                taxonomy_hash,
                height,
                width,
                d_in,
            },
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Fail unless every leaf of `tree` appears somewhere in the data.
    pub fn check_coverage(&self, leaves: &[NodeId]) -> Result<()> {
        for leaf in leaves {
            if !self.samples.iter().any(|s| s.labels.contains(&leaf.0)) {
                return Err(Error::Data(format!("leaf {leaf} never appears")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const REF9: &str = include_str!("../../../configs/ref9.tax");

    fn generator(mut cfg: SynthConfig) -> ClassGenerator {
        cfg.taxonomy = PathBuf::from("ref9.tax");
        ClassGenerator::new(cfg, parse_taxonomy(REF9).unwrap()).unwrap()
    }

    #[test]
    fn scenes_are_deterministic() {
        let g = generator(SynthConfig::default());
        assert_eq!(g.generate_scene(Split::Train, 3).unwrap(), g.generate_scene(Split::Train, 3).unwrap());
        assert_ne!(g.generate_scene(Split::Train, 3).unwrap(), g.generate_scene(Split::Test, 3).unwrap());
    }

    #[test]
    fn zero_noise_gives_class_means() {
        let g = generator(SynthConfig {
            sigma_pix: 0.0,
            ..SynthConfig::default()
        });
        let s = g.generate_scene(Split::Train, 0).unwrap();
        let d = g.config().d_in;
        for (p, &label) in s.labels.iter().enumerate() {
            assert_eq!(&s.features[p * d..(p + 1) * d], g.mean(label));
        }
    }

    #[test]
    fn background_fraction_and_coverage() {
        let g = generator(SynthConfig::default());
        let data = g.generate(Split::Train).unwrap();
        for s in &data.samples {
            let bg = s.labels.iter().filter(|&&l| l == BACKGROUND).count() as f64 / s.labels.len() as f64;
            assert!((bg - 0.2).abs() <= 0.1, "background fraction {bg}");
            // 14 sites and 9 leaves: every leaf appears in every scene.
        }
        data.check_coverage(&g.tree().leaves()).unwrap();
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let g = generator(SynthConfig {
            train_samples: 3,
            ..SynthConfig::default()
        });
        let data = g.generate(Split::Train).unwrap();
        let mut bytes = Vec::new();
        data.write_to(&mut bytes).unwrap();
        let back = Dataset::read_from(&bytes[..]).unwrap();
        assert_eq!(back, data);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
        assert!(matches!(Dataset::read_from(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let tree = parse_taxonomy(REF9).unwrap();
        let bad = SynthConfig {
            sigma_level: vec![1.0, 2.0],
            ..SynthConfig::default()
        };
        match bad.validate(&tree) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "sigma_level"),
            other => panic!("{other:?}"),
        }
        let small = SynthConfig {
            height: 4,
            ..SynthConfig::default()
        };
        assert!(small.validate(&tree).is_err());
    }

    #[test]
    fn signal_check_on_two_by_two() {
        let tree = parse_taxonomy("A ROOT\nB ROOT\na1 A\na2 A\nb1 B\nb2 B\n").unwrap();
        let cfg = SynthConfig {
            sigma_level: vec![4.0, 1.0],
            ..SynthConfig::default()
        };
        let g = ClassGenerator::new(cfg, tree).unwrap();
        let r = hierarchy_signal_check(&g).unwrap();
        assert!(r.ratio() < 1.0);

        let single = ClassGenerator::new(SynthConfig::default(), parse_taxonomy("x ROOT\n").unwrap()).unwrap();
        hierarchy_signal_check(&single).unwrap();
    }

    #[test]
    fn siblings_share_ancestor_offsets() {
        let g = generator(SynthConfig::default());
        let t = g.tree();
        let a = t.id_of("A").unwrap();
        for leaf in ["a1", "a2", "a3"] {
            let id = t.id_of(leaf).unwrap();
            let gap: f64 = g.mean(id.0).iter().zip(g.mean(a.0)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let top: f64 = g.mean(a.0).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(gap < top);
        }
    }

    /// Softmax regression on top-level branch labels; train on the training
    /// split, score on the test split.
    #[test]
    fn linear_probe_separates_branches() {
        let g = generator(SynthConfig::default());
        let t = g.tree().clone();
        let top: Vec<NodeId> = t.nodes_at_level(1);
        let branch = |label: u32| -> Option<usize> {
            if label == BACKGROUND {
                return None;
            }
            let root_child = *t.ancestors(NodeId(label)).unwrap().last().unwrap();
            top.iter().position(|&x| x == root_child)
        };
        let d = g.config().d_in;
        let collect = |data: &Dataset| -> Vec<(Vec<f64>, usize)> {
            let mut out = Vec::new();
            for s in &data.samples {
                for (p, &l) in s.labels.iter().enumerate() {
                    if let Some(b) = branch(l) {
                        out.push((s.features[p * d..(p + 1) * d].to_vec(), b));
                    }
                }
            }
            out
        };
        let train = collect(&g.generate(Split::Train).unwrap());
        let test = collect(&g.generate(Split::Test).unwrap());
        let k = top.len();
        let mut w = vec![vec![0.0; d + 1]; k];
        let logits = |w: &Vec<Vec<f64>>, x: &[f64]| -> Vec<f64> {
            w.iter().map(|row| row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
        };
        for _ in 0..30 {
            let mut grad = vec![vec![0.0; d + 1]; k];
            for (x, y) in &train {
                let z = logits(&w, x);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..k {
                    let p = e[c] / s - if c == *y { 1.0 } else { 0.0 };
                    for i in 0..d {
                        grad[c][i] += p * x[i];
                    }
                    grad[c][d] += p;
                }
            }
            let n = train.len() as f64;
            for c in 0..k {
                for i in 0..=d {
                    w[c][i] -= 0.1 * grad[c][i] / n;
                }
            }
        }
        let correct = test
            .iter()
            .filter(|(x, y)| {
                let z = logits(&w, x);
                let best = (0..k).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
                best == *y
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.95, "probe accuracy {acc}");
    }
}
