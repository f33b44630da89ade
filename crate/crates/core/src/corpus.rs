//! On-disk dataset formats and the synthetic paired corpus.
//!
//! Feature files: `SMFE` magic, u32 version, u32 K, u32 d, then K·d
//! little-endian f32 in row-major order. Manifests are JSON lines with keys
//! `image_id`, `features_path`, `tokens`, `tree`.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::referral::lexicon::{NOUNS, RELATIONS};
use crate::referral::{LabelTree, TreeNodeEntry};

pub const FEATURE_MAGIC: &[u8; 4] = b"SMFE";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURE_DIR: &str = "features";

/// K region vectors for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureSet {
    pub image_id: String,
    pub features: Arc<Array2<f32>>,
}

pub fn write_region_features(path: &Path, features: &Array2<f32>) -> Result<()> {
    let (k, d) = features.dim();
    if k == 0 || d == 0 {
        return Err(Error::Shape(format!("feature matrix must be non-empty, got {k}x{d}")));
    }
    if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite feature at row {}, col {}",
            bad / d,
            bad % d
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * k * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_region_features(path: &Path) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_region_features(&bytes).map_err(|(offset, message)| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    })
}

fn decode_region_features(bytes: &[u8]) -> std::result::Result<Array2<f32>, (u64, String)> {
    if bytes.len() < HEADER_LEN {
        return Err((bytes.len() as u64, format!("file shorter than the {HEADER_LEN}-byte header")));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err((0, "bad magic, expected SMFE".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err((4, format!("unsupported version {version}")));
    }
    let (k, d) = (word(8) as usize, word(12) as usize);
    if k == 0 {
        return Err((8, "region count K must be at least 1".into()));
    }
    if d == 0 {
        return Err((12, "feature dimension must be at least 1".into()));
    }
    let expected = HEADER_LEN + 4 * k * d;
    if bytes.len() < expected {
        return Err((bytes.len() as u64, format!("truncated: expected {expected} bytes for {k}x{d}")));
    }
    if bytes.len() > expected {
        return Err((expected as u64, "trailing bytes after feature data".into()));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(((HEADER_LEN + 4 * bad) as u64, "non-finite feature value".into()));
    }
    Ok(Array2::from_shape_vec((k, d), data).expect("length checked"))
}

/// One image-sentence pair with its referral tree.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub image_id: String,
    pub sentence: Vec<String>,
    pub referral_tree: LabelTree,
}

/// A loaded sample: the pair plus its region features.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pair: SamplePair,
    pub regions: RegionFeatureSet,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &[String]> {
        self.samples.iter().map(|s| s.pair.sentence.as_slice())
    }

    pub fn trees(&self) -> impl Iterator<Item = &LabelTree> {
        self.samples.iter().map(|s| &s.pair.referral_tree)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Feature dimension shared by every sample.
    pub fn region_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.regions.features.ncols())
    }
}

/// Serialized manifest line. `tree` may be absent before `build-trees` runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub image_id: String,
    pub features_path: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<Vec<TreeNodeEntry>>,
}

/// Parse manifest lines without touching feature files.
pub fn read_manifest_lines(path: &Path) -> Result<Vec<ManifestLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: ManifestLine = serde_json::from_str(raw).map_err(|e| Error::Load {
            line: i + 1,
            sample: "<unparsed>".into(),
            message: e.to_string(),
        })?;
        lines.push(line);
    }
    Ok(lines)
}

pub fn write_manifest_lines(path: &Path, lines: &[ManifestLine]) -> Result<()> {
    let mut out = Vec::new();
    for line in lines {
        serde_json::to_writer(&mut out, line)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load every sample; feature paths resolve relative to the manifest directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cache: HashMap<PathBuf, Arc<Array2<f32>>> = HashMap::new();
    let mut samples = Vec::new();
    let mut dim = None;
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let line: ManifestLine = serde_json::from_str(raw).map_err(|e| Error::Load {
            line: lineno,
            sample: "<unparsed>".into(),
            message: e.to_string(),
        })?;
        let fail = |message: String| Error::Load {
            line: lineno,
            sample: line.image_id.clone(),
            message,
        };
        if line.tokens.is_empty() {
            return Err(fail("empty token list".into()));
        }
        let entries = line.tree.as_ref().ok_or_else(|| fail("missing referral tree".into()))?;
        let tree = LabelTree::from_entries(entries).map_err(|e| fail(format!("malformed tree: {e}")))?;
        let fpath = root.join(&line.features_path);
        let features = match cache.get(&fpath) {
            Some(f) => Arc::clone(f),
            None => {
                if !fpath.exists() {
                    return Err(fail(format!("missing feature file {}", fpath.display())));
                }
                let f = Arc::new(read_region_features(&fpath).map_err(|e| fail(e.to_string()))?);
                cache.insert(fpath.clone(), Arc::clone(&f));
                f
            }
        };
        match dim {
            None => dim = Some(features.ncols()),
            Some(d) if d != features.ncols() => {
                return Err(fail(format!("feature dimension {} differs from {}", features.ncols(), d)))
            }
            _ => {}
        }
        samples.push(Sample {
            pair: SamplePair {
                image_id: line.image_id.clone(),
                sentence: line.tokens.clone(),
                referral_tree: tree,
            },
            regions: RegionFeatureSet {
                image_id: line.image_id.clone(),
                features,
            },
        });
    }
    Ok(Dataset { samples })
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    pub n_fragment_types: usize,
    pub n_relation_types: usize,
    pub regions_per_image: usize,
    pub d_region: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_pairs: 32,
            n_fragment_types: 10,
            n_relation_types: 5,
            regions_per_image: 8,
            d_region: 64,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_fragment_types < 4 {
            return err(format!("n_fragment_types must be >= 4, got {}", self.n_fragment_types));
        }
        if self.n_relation_types < 3 {
            return err(format!("n_relation_types must be >= 3, got {}", self.n_relation_types));
        }
        if self.n_fragment_types > NOUNS.len() {
            return err(format!("n_fragment_types is limited to {} by the grammar", NOUNS.len()));
        }
        if self.n_relation_types > RELATIONS.len() {
            return err(format!("n_relation_types is limited to {} by the grammar", RELATIONS.len()));
        }
        if self.regions_per_image < 4 {
            return err(format!(
                "regions_per_image must hold the 4 fragments, got {}",
                self.regions_per_image
            ));
        }
        if self.d_region == 0 {
            return err("d_region must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err(format!("noise_sigma must be a nonnegative real, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

pub fn fragment_name(t: usize) -> &'static str {
    NOUNS[t]
}

pub fn relation_name(t: usize) -> &'static str {
    RELATIONS[t].0
}

/// Generator ground truth for one sample, as type indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticTruth {
    pub fragments: [usize; 4],
    pub relations: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub prototypes: Array2<f32>,
    pub samples: Vec<Sample>,
    pub truth: Vec<SyntheticTruth>,
}

/// Draw the corpus in memory. A pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_region;
    let gauss = |rng: &mut ChaCha8Rng| -> f32 { rng.sample::<f64, _>(StandardNormal) as f32 };
    let prototypes = Array2::from_shape_fn((spec.n_fragment_types, d), |_| gauss(&mut rng));

    let mut samples = Vec::with_capacity(spec.n_pairs);
    let mut truth = Vec::with_capacity(spec.n_pairs);
    let width = spec.n_pairs.saturating_sub(1).to_string().len().max(5);
    for i in 0..spec.n_pairs {
        let mut frag_pool: Vec<usize> = (0..spec.n_fragment_types).collect();
        let (chosen, rest) = frag_pool.partial_shuffle(&mut rng, 4);
        let fragments: [usize; 4] = chosen.try_into().expect("4 fragments");
        let distractor_types = rest.to_vec();
        let mut rel_pool: Vec<usize> = (0..spec.n_relation_types).collect();
        let (chosen, _) = rel_pool.partial_shuffle(&mut rng, 3);
        let relations: [usize; 3] = chosen.try_into().expect("3 relations");

        let sigma = spec.noise_sigma as f32;
        let mut features = Array2::<f32>::zeros((spec.regions_per_image, d));
        for r in 0..spec.regions_per_image {
            let base: Option<usize> = if r < 4 {
                Some(fragments[r])
            } else if distractor_types.is_empty() {
                None
            } else {
                Some(distractor_types[rng.random_range(0..distractor_types.len())])
            };
            for c in 0..d {
                let center = match base {
                    Some(t) => prototypes[[t, c]],
                    None => gauss(&mut rng),
                };
                let noise = if sigma > 0.0 { sigma * gauss(&mut rng) } else { 0.0 };
                features[[r, c]] = center + noise;
            }
        }

        let [f1, f2, f3, f4] = fragments.map(fragment_name);
        let [r2, r4, r6] = relations.map(relation_name);
        let sentence: Vec<String> = [f1, r2, f2, r4, f3, r6, f4].iter().map(|s| s.to_string()).collect();
        let tree = LabelTree::from_labels(std::array::from_fn(|n| sentence[n].clone()));
        let image_id = format!("img{i:0width$}");
        samples.push(Sample {
            pair: SamplePair {
                image_id: image_id.clone(),
                sentence,
                referral_tree: tree,
            },
            regions: RegionFeatureSet {
                image_id,
                features: Arc::new(features),
            },
        });
        truth.push(SyntheticTruth { fragments, relations });
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        prototypes,
        samples,
        truth,
    })
}

/// Summary of a dataset written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub n_samples: usize,
}

/// Write samples as `manifest.jsonl` plus `features/<image_id>.smfe` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<DatasetManifest> {
    let fdir = dir.join(FEATURE_DIR);
    std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let mut written: HashMap<&str, ()> = HashMap::new();
    let mut lines = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("{FEATURE_DIR}/{}.smfe", s.regions.image_id);
        if written.insert(&s.regions.image_id, ()).is_none() {
            write_region_features(&dir.join(&rel), &s.regions.features)?;
        }
        lines.push(ManifestLine {
            image_id: s.pair.image_id.clone(),
            features_path: rel,
            tokens: s.pair.sentence.clone(),
            tree: Some(s.pair.referral_tree.to_entries()),
        });
    }
    let path = dir.join(MANIFEST_FILE);
    write_manifest_lines(&path, &lines)?;
    Ok(DatasetManifest {
        path,
        n_samples: samples.len(),
    })
}

/// Generate the synthetic corpus and write it under `dir`.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<DatasetManifest> {
    let corpus = generate_synthetic(spec)?;
    let manifest = write_dataset(dir, &corpus.samples)?;
    let spec_path = dir.join("synthetic_spec.json");
    let mut f = std::fs::File::create(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    writeln!(f, "{}", serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.smfe");
        let m = Array2::from_shape_vec((1, 1), vec![0.0f32]).unwrap();
        write_region_features(&p, &m).unwrap();
        assert_eq!(read_region_features(&p).unwrap(), m);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 20);
    }

    #[test]
    fn short_and_corrupt_files_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.smfe");
        std::fs::write(&p, b"SMFE\x01\x00").unwrap();
        match read_region_features(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        let m = Array2::<f32>::ones((2, 3));
        write_region_features(&p, &m).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_region_features(&p), Err(Error::Format { offset: 0, .. })));
        bytes[0] = b'S';
        bytes[4] = 2;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_region_features(&p), Err(Error::Format { offset: 4, .. })));
        bytes[4] = 1;
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_region_features(&p), Err(Error::Format { offset: 39, .. })));
    }

    #[test]
    fn non_finite_matrix_is_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_vec((1, 2), vec![1.0f32, f32::NAN]).unwrap();
        assert!(matches!(
            write_region_features(&dir.path().join("x"), &m),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn zero_noise_rows_equal_prototypes() {
        let spec = SyntheticSpec {
            n_pairs: 1,
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let f = &c.samples[0].regions.features;
        for (r, &t) in c.truth[0].fragments.iter().enumerate() {
            assert_eq!(f.row(r), c.prototypes.row(t));
        }
        // distractors come from non-sample prototypes
        for r in 4..spec.regions_per_image {
            let matches: Vec<usize> = (0..spec.n_fragment_types)
                .filter(|&t| f.row(r) == c.prototypes.row(t))
                .collect();
            assert_eq!(matches.len(), 1);
            assert!(!c.truth[0].fragments.contains(&matches[0]));
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        for spec in [
            SyntheticSpec { n_fragment_types: 3, ..Default::default() },
            SyntheticSpec { n_relation_types: 2, ..Default::default() },
            SyntheticSpec { regions_per_image: 3, ..Default::default() },
            SyntheticSpec { noise_sigma: -1.0, ..Default::default() },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn template_sentence_and_tree_match() {
        let c = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let s = &c.samples[3].pair;
        assert_eq!(s.sentence.len(), 7);
        for n in 1..=7 {
            assert_eq!(s.referral_tree.label(n), s.sentence[n - 1]);
        }
    }

    #[test]
    fn empty_manifest_loads_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }
}
