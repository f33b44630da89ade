//! Similarity scoring, recall@K, rSum and ranked retrieval.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::cosine_similarity;
use crate::real::Real;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Sentence id for the `k`-th caption of an image.
pub fn sentence_id(image_id: &str, k: usize) -> String {
    format!("{image_id}#{k}")
}

/// Image × sentence similarities with row and column ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub matrix: Array2<f64>,
    pub image_ids: Vec<String>,
    pub sentence_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(matrix: Array2<f64>, image_ids: Vec<String>, sentence_ids: Vec<String>) -> Result<Self> {
        if matrix.dim() != (image_ids.len(), sentence_ids.len()) {
            return Err(Error::Shape(format!(
                "{:?} matrix for {} images and {} sentences",
                matrix.dim(),
                image_ids.len(),
                sentence_ids.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite similarity".into()));
        }
        for ids in [&image_ids, &sentence_ids] {
            let mut seen = HashSet::new();
            if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
                return Err(Error::Input(format!("duplicate id `{dup}`")));
            }
        }
        Ok(Self {
            matrix,
            image_ids,
            sentence_ids,
        })
    }

    pub fn transpose(&self) -> Self {
        Self {
            matrix: self.matrix.t().to_owned(),
            image_ids: self.sentence_ids.clone(),
            sentence_ids: self.image_ids.clone(),
        }
    }

    fn view(&self, dir: Direction) -> (Array2<f64>, &[String]) {
        match dir {
            Direction::I2t => (self.matrix.clone(), &self.sentence_ids),
            Direction::T2i => (self.matrix.t().to_owned(), &self.image_ids),
        }
    }
}

/// `S[i, j] = cos(images_i, sentences_j)`.
pub fn score_all<F: Real>(
    images: &[Array1<F>],
    image_ids: Vec<String>,
    sentences: &[Array1<F>],
    sentence_ids: Vec<String>,
) -> Result<SimilarityMatrix> {
    let mut m = Array2::zeros((images.len(), sentences.len()));
    for (i, a) in images.iter().enumerate() {
        for (j, b) in sentences.iter().enumerate() {
            m[[i, j]] = cosine_similarity(a.view(), b.view())?;
        }
    }
    SimilarityMatrix::new(m, image_ids, sentence_ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    I2t,
    T2i,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Direction::I2t),
            "t2i" => Ok(Direction::T2i),
            other => Err(Error::Config(format!("direction must be i2t or t2i, got `{other}`"))),
        }
    }
}

/// Relevant candidate indices per query, in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub i2t: Vec<Vec<usize>>,
    pub t2i: Vec<Vec<usize>>,
}

impl GroundTruth {
    /// Image `i` matches sentence `i`.
    pub fn one_to_one(n: usize) -> Self {
        let diag: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        Self {
            i2t: diag.clone(),
            t2i: diag,
        }
    }

    /// Sentence `j` belongs to image `owners[j]`; supports several captions per image.
    pub fn from_owners(n_images: usize, owners: &[usize]) -> Result<Self> {
        let mut i2t = vec![Vec::new(); n_images];
        let mut t2i = Vec::with_capacity(owners.len());
        for (j, &i) in owners.iter().enumerate() {
            let slot = i2t
                .get_mut(i)
                .ok_or_else(|| Error::Input(format!("sentence {j} owned by unknown image {i}")))?;
            slot.push(j);
            t2i.push(vec![i]);
        }
        Ok(Self { i2t, t2i })
    }

    fn for_dir(&self, dir: Direction) -> &[Vec<usize>] {
        match dir {
            Direction::I2t => &self.i2t,
            Direction::T2i => &self.t2i,
        }
    }
}

/// `a` ranks before `b`: higher score first, then ascending id.
fn before(sa: f64, ida: &str, sb: f64, idb: &str) -> bool {
    sa > sb || (sa == sb && ida < idb)
}

/// 0-based rank of the best-placed relevant candidate.
fn best_rank(scores: ndarray::ArrayView1<f64>, ids: &[String], relevant: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for &r in relevant {
        if r >= scores.len() {
            return Err(Error::Input(format!("relevant index {r} out of range")));
        }
        if best.is_none_or(|b| before(scores[r], &ids[r], scores[b], &ids[b])) {
            best = Some(r);
        }
    }
    let b = best.ok_or_else(|| Error::Input("query without relevant candidates".into()))?;
    Ok((0..scores.len())
        .filter(|&c| before(scores[c], &ids[c], scores[b], &ids[b]))
        .count())
}

pub fn recall_at_k(sim: &SimilarityMatrix, k: usize, dir: Direction, gt: &GroundTruth) -> Result<f64> {
    let (m, ids) = sim.view(dir);
    if k == 0 || k > m.ncols() {
        return Err(Error::Config(format!("k = {k} but only {} candidates", m.ncols())));
    }
    let rel = gt.for_dir(dir);
    if rel.len() != m.nrows() {
        return Err(Error::Input(format!("{} ground-truth entries for {} queries", rel.len(), m.nrows())));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (q, relevant) in rel.iter().enumerate() {
        if best_rank(m.row(q), ids, relevant)? < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / m.nrows() as f64)
}

/// Report emitted by the `eval` command (recalls as fractions, rsum ×100).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    pub rsum: f64,
}

pub fn evaluate(sim: &SimilarityMatrix, gt: &GroundTruth) -> Result<RecallReport> {
    let r = |k, d| recall_at_k(sim, k, d, gt);
    let (r1_i2t, r5_i2t, r10_i2t) = (r(1, Direction::I2t)?, r(5, Direction::I2t)?, r(10, Direction::I2t)?);
    let (r1_t2i, r5_t2i, r10_t2i) = (r(1, Direction::T2i)?, r(5, Direction::T2i)?, r(10, Direction::T2i)?);
    Ok(RecallReport {
        r1_i2t,
        r5_i2t,
        r10_i2t,
        r1_t2i,
        r5_t2i,
        r10_t2i,
        rsum: 100.0 * (r1_i2t + r5_i2t + r10_i2t + r1_t2i + r5_t2i + r10_t2i),
    })
}

pub fn rsum(sim: &SimilarityMatrix, gt: &GroundTruth) -> Result<f64> {
    evaluate(sim, gt).map(|r| r.rsum)
}

/// Recall at each `k` that fits the candidate set: `(k, i2t, t2i)`.
pub fn recalls_up_to(sim: &SimilarityMatrix, gt: &GroundTruth, ks: &[usize]) -> Result<Vec<(usize, f64, f64)>> {
    let limit = sim.matrix.nrows().min(sim.matrix.ncols());
    ks.iter()
        .filter(|&&k| k >= 1 && k <= limit)
        .map(|&k| Ok((k, recall_at_k(sim, k, Direction::I2t, gt)?, recall_at_k(sim, k, Direction::T2i, gt)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Top-`topk` candidates for `query` (an image id for i2t, a sentence id for t2i).
pub fn retrieve(sim: &SimilarityMatrix, query: &str, dir: Direction, topk: usize) -> Result<Vec<Hit>> {
    let (m, ids) = sim.view(dir);
    let queries = match dir {
        Direction::I2t => &sim.image_ids,
        Direction::T2i => &sim.sentence_ids,
    };
    let q = queries
        .iter()
        .position(|id| id == query)
        .ok_or_else(|| Error::Input(format!("unknown query id `{query}`")))?;
    let row = m.row(q);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then_with(|| ids[a].cmp(&ids[b])));
    Ok(order
        .into_iter()
        .take(topk)
        .map(|c| Hit {
            id: ids[c].clone(),
            score: row[c],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:02}")).collect()
    }

    fn sim(m: Array2<f64>) -> SimilarityMatrix {
        let (r, c) = m.dim();
        SimilarityMatrix::new(m, ids("i", r), ids("s", c)).unwrap()
    }

    /// Full-sort oracle: sort every candidate, find the first relevant one.
    pub(crate) fn sort_oracle(m: &Array2<f64>, cand_ids: &[String], rel: &[Vec<usize>], k: usize) -> f64 {
        let mut hits = 0;
        for q in 0..m.nrows() {
            let mut order: Vec<usize> = (0..m.ncols()).collect();
            order.sort_by(|&a, &b| {
                m[[q, b]].partial_cmp(&m[[q, a]]).unwrap().then(cand_ids[a].cmp(&cand_ids[b]))
            });
            if order[..k].iter().any(|c| rel[q].contains(c)) {
                hits += 1;
            }
        }
        hits as f64 / m.nrows() as f64
    }

    #[test]
    fn perfect_diagonal() {
        let s = sim(Array2::eye(12));
        let gt = GroundTruth::one_to_one(12);
        for d in [Direction::I2t, Direction::T2i] {
            assert_eq!(recall_at_k(&s, 1, d, &gt).unwrap(), 1.0);
        }
        assert_eq!(rsum(&s, &gt).unwrap(), 600.0);
    }

    #[test]
    fn anti_diagonal_with_full_k() {
        let n = 6;
        let owners: Vec<usize> = (0..n).map(|j| n - 1 - j).collect();
        let gt = GroundTruth::from_owners(n, &owners).unwrap();
        let s = sim(Array2::eye(n));
        for d in [Direction::I2t, Direction::T2i] {
            assert_eq!(recall_at_k(&s, n, d, &gt).unwrap(), 1.0);
            assert_eq!(recall_at_k(&s, 1, d, &gt).unwrap(), 0.0);
        }
        assert!(matches!(recall_at_k(&s, n + 1, Direction::I2t, &gt), Err(Error::Config(_))));
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = GroundTruth::one_to_one(10);
        for _ in 0..100 {
            // coarse values so ties occur
            let m = Array2::from_shape_fn((10, 10), |_| (rng.random_range(0..6) as f64) / 5.0);
            let s = sim(m.clone());
            for k in [1, 5, 10] {
                assert_eq!(recall_at_k(&s, k, Direction::I2t, &gt).unwrap(), sort_oracle(&m, &s.sentence_ids, &gt.i2t, k));
                let mt = m.t().to_owned();
                assert_eq!(recall_at_k(&s, k, Direction::T2i, &gt).unwrap(), sort_oracle(&mt, &s.image_ids, &gt.t2i, k));
            }
        }
    }

    #[test]
    fn rsum_recomposes_and_recall_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Array2::from_shape_fn((12, 12), |_| rng.random_range(-1.0..1.0));
        let s = sim(m.clone());
        let gt = GroundTruth::one_to_one(12);
        let mut sum = 0.0;
        for d in [Direction::I2t, Direction::T2i] {
            let mut prev = 0.0;
            for k in 1..=12 {
                let r = recall_at_k(&s, k, d, &gt).unwrap();
                assert!(r >= prev);
                prev = r;
                if [1, 5, 10].contains(&k) {
                    sum += r;
                }
            }
        }
        assert!((rsum(&s, &gt).unwrap() - 100.0 * sum).abs() < 1e-12);
        // strictly increasing transform keeps every metric
        let t = sim(m.mapv(|v| (3.0 * v).exp() + 7.0));
        assert_eq!(evaluate(&s, &gt).unwrap(), evaluate(&t, &gt).unwrap());
    }

    #[test]
    fn multi_caption_ground_truth() {
        // two images, five captions each; image 1's captions sit at odd columns
        let owners: Vec<usize> = (0..10).map(|j| j % 2).collect();
        let gt = GroundTruth::from_owners(2, &owners).unwrap();
        let m = Array2::from_shape_fn((2, 10), |(i, j)| if j % 2 == i { 0.9 - 0.01 * j as f64 } else { 0.0 });
        let s = SimilarityMatrix::new(m, ids("i", 2), ids("s", 10)).unwrap();
        assert_eq!(recall_at_k(&s, 1, Direction::I2t, &gt).unwrap(), 1.0);
        assert_eq!(recall_at_k(&s, 1, Direction::T2i, &gt).unwrap(), 1.0);
    }

    #[test]
    fn score_all_cases() {
        let u = array![0.3, 0.4];
        let s = score_all(&[u.clone()], vec!["a".into()], &[u.clone()], vec!["a#0".into()]).unwrap();
        assert!((s.matrix[[0, 0]] - 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Array1<f64>> = (0..4).map(|_| Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0))).collect();
        let b: Vec<Array1<f64>> = (0..4).map(|_| Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0))).collect();
        let s = score_all(&a, ids("i", 4), &b, ids("s", 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let oracle = a[i].dot(&b[j]) / (a[i].dot(&a[i]).sqrt() * b[j].dot(&b[j]).sqrt());
                assert!((s.matrix[[i, j]] - oracle).abs() < 1e-12);
            }
        }
        let swapped = score_all(&b, ids("s", 4), &a, ids("i", 4)).unwrap();
        assert_eq!(swapped, s.transpose());
        assert!(SimilarityMatrix::new(Array2::zeros((2, 2)), vec!["x".into(), "x".into()], ids("s", 2)).is_err());
    }

    #[test]
    fn retrieval_orders_by_score_then_id() {
        let s = sim(array![[0.5]]);
        let hits = retrieve(&s, "i00", Direction::I2t, 1).unwrap();
        assert_eq!(hits, vec![Hit { id: "s00".into(), score: 0.5 }]);

        let s = sim(array![[0.1, 0.7, 0.7, 0.9], [0.0, 0.0, 0.0, 0.0]]);
        let got: Vec<String> = retrieve(&s, "i00", Direction::I2t, 4).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(got, ["s03", "s01", "s02", "s00"]);
        let tied: Vec<String> = retrieve(&s, "i01", Direction::I2t, 3).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(tied, ["s00", "s01", "s02"]);
        let t2i = retrieve(&s, "s03", Direction::T2i, 2).unwrap();
        assert_eq!(t2i[0].id, "i00");
        assert!(matches!(retrieve(&s, "nope", Direction::I2t, 1), Err(Error::Input(_))));
    }

    #[test]
    fn retrieval_equals_sorted_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Array2::from_shape_fn((3, 8), |_| rng.random_range(-1.0..1.0));
        let s = sim(m.clone());
        let hits = retrieve(&s, "i01", Direction::I2t, 8).unwrap();
        let mut row: Vec<f64> = m.row(1).to_vec();
        row.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(hits.iter().map(|h| h.score).collect::<Vec<_>>(), row);
    }
}
