//! Hard/easy communication contexts built over an object embedding.
//!
//! Objects are seeded by in-degree in the 2-nearest-neighbour graph. A hard
//! context pairs a seed with its nearest non-duplicate neighbours; an easy
//! context pairs it with the nearest objects lying beyond the median of all
//! pairwise distances.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Difficulty;
use crate::nn::Mat;
use crate::{par, util, Error, Result};

/// Object codes, stored sorted by object id so index order is id order.
#[derive(Clone, Debug)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    codes: Mat,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, codes: Mat) -> Result<Self> {
        if ids.len() != codes.rows() {
            return Err(Error::Invalid(format!("{} ids for {} codes", ids.len(), codes.rows())));
        }
        if !codes.all_finite() {
            return Err(Error::NonFinite("embedding codes".into()));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        if order.windows(2).any(|w| ids[w[0]] == ids[w[1]]) {
            return Err(Error::Invalid("duplicate object ids in embedding".into()));
        }
        let d = codes.cols();
        let mut data = Vec::with_capacity(codes.len());
        for &i in &order {
            data.extend_from_slice(codes.row(i));
        }
        let ids = order.iter().map(|&i| ids[i].clone()).collect();
        Ok(Self { ids, codes: Mat::from_vec(order.len(), d, data) })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|p| p.as_str().cmp(id)).ok()
    }

    pub fn code(&self, i: usize) -> &[f64] {
        self.codes.row(i)
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.code(a).iter().zip(self.code(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    /// All `n(n-1)/2` pairwise distances, unsorted.
    pub fn pairwise_distances(&self) -> Vec<f64> {
        let n = self.len();
        par::map_range(n, |i| ((i + 1)..n).map(|j| self.distance(i, j)).collect::<Vec<_>>())
            .into_iter()
            .flatten()
            .collect()
    }

    /// Reads a text matrix (`n d` header, then `n` rows) and a one-id-per-line file.
    pub fn load(matrix: &Path, ids: &Path) -> Result<Self> {
        let codes = util::read_matrix(matrix)?;
        let ids: Vec<String> =
            util::read_text(ids)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        Self::new(ids, codes)
    }

    pub fn save(&self, matrix: &Path, ids: &Path) -> Result<()> {
        util::write_matrix(matrix, &self.codes)?;
        let mut text = self.ids.join("\n");
        text.push('\n');
        util::write_text(ids, &text)
    }
}

/// Directed k-nearest-neighbour graph; `out[i]` lists the neighbours of node `i`, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub out: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.out.len()];
        for nbrs in &self.out {
            for &j in nbrs {
                deg[j] += 1;
            }
        }
        deg
    }
}

/// Other objects ordered by distance from `i`, ties by lower index.
fn ranked_neighbours(index: &EmbeddingIndex, i: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..index.len()).filter(|&j| j != i).map(|j| (j, index.distance(i, j))).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all
}

pub fn build_knn_graph(index: &EmbeddingIndex, k: usize) -> Result<KnnGraph> {
    if k >= index.len() {
        return Err(Error::Invalid(format!("k = {k} must be below the object count {}", index.len())));
    }
    let out = par::map_range(index.len(), |i| ranked_neighbours(index, i).into_iter().take(k).map(|(j, _)| j).collect());
    Ok(KnnGraph { out })
}

/// The `n` nodes with highest in-degree, ties by lower index.
pub fn select_seeds(graph: &KnnGraph, n: usize) -> Vec<usize> {
    let deg = graph.in_degrees();
    if n > deg.len() {
        log::warn!("requested {n} seeds but the graph has only {} nodes; using all", deg.len());
    }
    let mut order: Vec<usize> = (0..deg.len()).collect();
    order.sort_by(|&a, &b| deg[b].cmp(&deg[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Distance thresholds shared by every context built over one index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextParams {
    /// Distractors at or below this distance from the seed are treated as duplicates.
    pub duplicate_threshold: f64,
    /// Median of all pairwise distances in the collection.
    pub median: f64,
}

impl ContextParams {
    /// Median of all pairwise distances and, by default, their 1st percentile as the duplicate threshold.
    pub fn from_index(index: &EmbeddingIndex, duplicate_percentile: f64) -> Self {
        let d = index.pairwise_distances();
        Self { duplicate_threshold: percentile(&d, duplicate_percentile), median: percentile(&d, 0.5) }
    }
}

pub const DEFAULT_DUPLICATE_PERCENTILE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub seed_object: String,
    pub distractors: [String; 2],
    pub difficulty: Difficulty,
}

impl ContextSpec {
    pub fn context_id(&self) -> String {
        format!("{}-{}", self.difficulty, self.seed_object)
    }

    /// Seed first, then distractors.
    pub fn object_ids(&self) -> [String; 3] {
        [self.seed_object.clone(), self.distractors[0].clone(), self.distractors[1].clone()]
    }
}

pub fn make_context(index: &EmbeddingIndex, seed: usize, difficulty: Difficulty, params: &ContextParams) -> Result<ContextSpec> {
    let ranked = ranked_neighbours(index, seed);
    let nearest_above = |floor: f64, exclude: &[usize]| -> Vec<usize> {
        ranked.iter().filter(|&&(j, d)| d > floor && !exclude.contains(&j)).take(2).map(|&(j, _)| j).collect()
    };
    let hard = nearest_above(params.duplicate_threshold, &[]);
    let picked = match difficulty {
        Difficulty::Hard => hard,
        // An easy context never reuses a hard distractor of the same seed, so easy
        // distractors are always at least as far as hard ones.
        Difficulty::Easy => nearest_above(params.median.max(params.duplicate_threshold), &hard),
    };
    if picked.len() < 2 {
        return Err(Error::InsufficientDistractors { seed: index.id(seed).to_string(), found: picked.len() });
    }
    Ok(ContextSpec {
        seed_object: index.id(seed).to_string(),
        distractors: [index.id(picked[0]).to_string(), index.id(picked[1]).to_string()],
        difficulty,
    })
}

/// Builds a hard and an easy context for every seed. Seeds without enough
/// eligible distractors are reported and skipped.
pub fn build_contexts(index: &EmbeddingIndex, seeds: &[usize], params: &ContextParams) -> (Vec<ContextSpec>, Vec<Error>) {
    let results = par::map(seeds, |&s| {
        [Difficulty::Hard, Difficulty::Easy].map(|d| make_context(index, s, d, params))
    });
    let mut ok = Vec::new();
    let mut rejected = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(c) => ok.push(c),
            Err(e) => {
                log::warn!("context rejected: {e}");
                rejected.push(e);
            }
        }
    }
    (ok, rejected)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub context: ContextSpec,
    /// Position of the target within [`ContextSpec::object_ids`].
    pub target_index: usize,
    pub repeat: usize,
}

/// Every object of every context becomes the target `repeats` times.
pub fn counterbalance(contexts: &[ContextSpec], repeats: usize) -> Vec<AnnotationTask> {
    let mut tasks = Vec::with_capacity(contexts.len() * 3 * repeats);
    for c in contexts {
        for target_index in 0..3 {
            for repeat in 0..repeats {
                tasks.push(AnnotationTask { context: c.clone(), target_index, repeat });
            }
        }
    }
    tasks
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub context_id: String,
    pub object_ids: [String; 3],
    pub difficulty: Difficulty,
}

impl From<&ContextSpec> for ContextRecord {
    fn from(c: &ContextSpec) -> Self {
        Self { context_id: c.context_id(), object_ids: c.object_ids(), difficulty: c.difficulty }
    }
}

pub fn write_contexts(path: &Path, contexts: &[ContextSpec]) -> Result<()> {
    let records: Vec<ContextRecord> = contexts.iter().map(ContextRecord::from).collect();
    util::write_jsonl(path, &records)
}

pub fn read_contexts(path: &Path) -> Result<Vec<ContextRecord>> {
    util::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use proptest::prelude::*;

    fn line(points: &[(&str, f64)]) -> EmbeddingIndex {
        let ids = points.iter().map(|(i, _)| i.to_string()).collect();
        EmbeddingIndex::new(ids, Mat::from_vec(points.len(), 1, points.iter().map(|p| p.1).collect())).unwrap()
    }

    #[test]
    fn one_nearest_neighbour_on_a_line() {
        let idx = line(&[("A", 0.0), ("B", 1.0), ("C", 10.0)]);
        let g = build_knn_graph(&idx, 1).unwrap();
        assert_eq!(g.out, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn two_nearest_neighbours() {
        let idx = line(&[("p0", 0.0), ("p1", 1.0), ("p2", 2.0), ("p9", 9.0)]);
        let g = build_knn_graph(&idx, 2).unwrap();
        assert_eq!(g.out[0], vec![1, 2]);
        assert!(build_knn_graph(&idx, 4).is_err());
    }

    #[test]
    fn ties_go_to_lower_id() {
        let idx = line(&[("b", 1.0), ("a", -1.0), ("c", 0.0)]);
        let g = build_knn_graph(&idx, 1).unwrap();
        // index order is a, b, c; c is equidistant from a and b.
        assert_eq!(g.out[2], vec![0]);
    }

    #[test]
    fn non_finite_codes_are_rejected() {
        assert!(EmbeddingIndex::new(vec!["a".into()], Mat::row_vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn hub_is_the_top_seed() {
        let g = KnnGraph { out: vec![vec![3], vec![3], vec![3], vec![0]] };
        assert_eq!(select_seeds(&g, 1), vec![3]);
        assert_eq!(select_seeds(&g, 4).len(), 4);
        assert_eq!(select_seeds(&g, 10).len(), 4);
    }

    fn five_points() -> EmbeddingIndex {
        line(&[("S", 0.0), ("A", 0.9), ("B", 1.1), ("C", 5.0), ("D", 9.0)])
    }

    #[test]
    fn hard_context_takes_nearest() {
        let idx = five_points();
        let s = idx.position("S").unwrap();
        let c = make_context(&idx, s, Difficulty::Hard, &ContextParams { duplicate_threshold: 0.5, median: 3.0 }).unwrap();
        assert_eq!(c.distractors, ["A".to_string(), "B".into()]);
    }

    #[test]
    fn hard_context_skips_duplicates() {
        let idx = five_points();
        let s = idx.position("S").unwrap();
        let c = make_context(&idx, s, Difficulty::Hard, &ContextParams { duplicate_threshold: 1.0, median: 3.0 }).unwrap();
        assert_eq!(c.distractors, ["B".to_string(), "C".into()]);
    }

    #[test]
    fn easy_context_lies_beyond_median() {
        let idx = five_points();
        let s = idx.position("S").unwrap();
        let c = make_context(&idx, s, Difficulty::Easy, &ContextParams { duplicate_threshold: 0.5, median: 3.0 }).unwrap();
        assert_eq!(c.distractors, ["C".to_string(), "D".into()]);
        let far = ContextParams { duplicate_threshold: 0.5, median: 6.0 };
        assert!(matches!(make_context(&idx, s, Difficulty::Easy, &far), Err(Error::InsufficientDistractors { found: 1, .. })));
    }

    #[test]
    fn counterbalancing_counts() {
        let idx = five_points();
        let p = ContextParams { duplicate_threshold: 0.5, median: 3.0 };
        let c = make_context(&idx, 0, Difficulty::Hard, &p).unwrap();
        assert_eq!(counterbalance(std::slice::from_ref(&c), 4).len(), 12);
        assert!(counterbalance(&[], 4).is_empty());
        let two = counterbalance(&[c.clone(), c], 1);
        assert_eq!(two.len(), 6);
        for t in 0..3 {
            assert_eq!(two.iter().filter(|x| x.target_index == t).count(), 2);
        }
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.5);
        assert_eq!(percentile(&[5.0], 0.01), 5.0);
    }

    #[test]
    fn matrix_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = five_points();
        let (m, i) = (dir.path().join("codes.txt"), dir.path().join("ids.txt"));
        idx.save(&m, &i).unwrap();
        let back = EmbeddingIndex::load(&m, &i).unwrap();
        assert_eq!(back.ids(), idx.ids());
        assert_eq!(back.code(3), idx.code(3));
    }

    proptest! {
        #[test]
        fn hard_distractors_are_never_farther_than_easy(seed in 0u64..500) {
            let mut rng = util::rng(seed);
            let n = 30;
            let ids = (0..n).map(|i| format!("o{i:02}")).collect();
            let idx = EmbeddingIndex::new(ids, uniform(&mut rng, n, 4, 1.0)).unwrap();
            let p = ContextParams::from_index(&idx, DEFAULT_DUPLICATE_PERCENTILE);
            for s in 0..n {
                let hard = make_context(&idx, s, Difficulty::Hard, &p).unwrap();
                // Central objects may have fewer than two neighbours beyond the median.
                let Ok(easy) = make_context(&idx, s, Difficulty::Easy, &p) else { continue };
                let d = |id: &String| idx.distance(s, idx.position(id).unwrap());
                let max_hard = hard.distractors.iter().map(d).fold(0.0, f64::max);
                let min_easy = easy.distractors.iter().map(d).fold(f64::INFINITY, f64::min);
                prop_assert!(max_hard <= min_easy);
                for id in &hard.distractors {
                    prop_assert!(d(id) > p.duplicate_threshold);
                }
            }
        }
    }
}
