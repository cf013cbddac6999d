//! Immutable retrieval index, two-stage search (exhaustive CLS scan, then
//! MaxSim re-ranking of the head of the list) and Recall@K evaluation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, UNIT_TOL};
use crate::error::{check_dim, Error, Result};
use crate::similarity::{score_pair, Direction, ItemEmbedding, ScoringMode};

/// Default number of first-stage candidates passed to re-ranking.
pub const RERANK_DEPTH: usize = 64;

/// Cut-offs reported by [`evaluate`].
pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    dim: usize,
    items: Vec<ItemEmbedding>,
    by_id: HashMap<String, usize>,
    modes: Vec<ScoringMode>,
}

/// Builds an index sorted by item id.
///
/// `late_modes` declares which MaxSim modes the late matrices serve; when
/// it is empty any late matrices are dropped and the index is global-only.
pub fn build_index(mut items: Vec<ItemEmbedding>, late_modes: &[ScoringMode]) -> Result<RetrievalIndex> {
    if late_modes.contains(&ScoringMode::Global) {
        return Err(Error::UnsupportedMode("global is not a late mode".into()));
    }
    items.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = items.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::DuplicateId(w[0].id.clone()));
    }
    let dim = items.first().map_or(0, |i| i.cls.len());
    for item in &mut items {
        check_dim(dim, item.cls.len())?;
        let n = norm(&item.cls);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotNormalized(n));
        }
        if late_modes.is_empty() {
            item.late = None;
            continue;
        }
        let late = item
            .late
            .as_ref()
            .ok_or_else(|| Error::MissingLateMatrix(item.id.clone()))?;
        check_dim(dim, late.rows.dim())?;
        if late.mask.valid_count() == 0 {
            return Err(Error::EmptyMask);
        }
    }
    let by_id = items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
    let mut modes = vec![ScoringMode::Global];
    modes.extend(late_modes.iter().copied().filter(|m| m.is_late()));
    modes.dedup();
    Ok(RetrievalIndex { dim, items, by_id, modes })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[ScoringMode] {
        &self.modes
    }

    pub fn supports(&self, mode: ScoringMode) -> bool {
        self.modes.contains(&mode)
    }

    pub fn get(&self, id: &str) -> Option<&ItemEmbedding> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn items(&self) -> &[ItemEmbedding] {
        &self.items
    }
}

/// One query's ranking, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    #[serde(rename = "query")]
    pub query_id: String,
    pub ranking: Vec<(String, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranking.iter().map(|(id, _)| id.as_str())
    }
}

/// Descending score, then ascending id.
fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// First stage: exhaustive CLS scan, `top_k` best items.
pub fn search(index: &RetrievalIndex, query: &ItemEmbedding, mode: ScoringMode, top_k: usize) -> Result<RankedList> {
    if mode != ScoringMode::Global {
        return Err(Error::UnsupportedMode(format!("{mode} for first-stage search")));
    }
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    if !index.is_empty() {
        check_dim(index.dim, query.cls.len())?;
    }
    let mut scored: Vec<(String, f64)> = index
        .items
        .iter()
        .map(|it| (it.id.clone(), dot(&query.cls, &it.cls)))
        .collect();
    if top_k < scored.len() {
        scored.select_nth_unstable_by(top_k - 1, rank_order);
        scored.truncate(top_k);
    }
    scored.sort_by(rank_order);
    Ok(RankedList {
        query_id: query.id.clone(),
        ranking: scored,
    })
}

/// Second stage: rescores `candidates` with a MaxSim kernel and re-sorts
/// them. Scores are replaced, not fused.
pub fn rerank(
    index: &RetrievalIndex,
    query: &ItemEmbedding,
    candidates: &RankedList,
    mode: ScoringMode,
    direction: Direction,
) -> Result<RankedList> {
    if !mode.is_late() || !index.supports(mode) {
        return Err(Error::UnsupportedMode(format!("{mode} re-ranking on this index")));
    }
    let q = query
        .late
        .as_ref()
        .ok_or_else(|| Error::MissingLateMatrix(query.id.clone()))?
        .compact();
    let mut scored = candidates
        .ranking
        .iter()
        .map(|(id, _)| {
            let item = index.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            Ok((id.clone(), score_pair(&query.cls, Some(&q), item, mode, direction)?))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(rank_order);
    Ok(RankedList {
        query_id: query.id.clone(),
        ranking: scored,
    })
}

/// Global scan to `depth`, then re-ranking with `mode` (or no second
/// stage for `Global`).
pub fn two_stage(
    index: &RetrievalIndex,
    query: &ItemEmbedding,
    mode: ScoringMode,
    direction: Direction,
    depth: usize,
) -> Result<RankedList> {
    let first = search(index, query, ScoringMode::Global, depth)?;
    if mode == ScoringMode::Global {
        Ok(first)
    } else {
        rerank(index, query, &first, mode, direction)
    }
}

/// [`two_stage`] for many queries in parallel; output order follows input.
pub fn two_stage_batch(
    index: &RetrievalIndex,
    queries: &[ItemEmbedding],
    mode: ScoringMode,
    direction: Direction,
    depth: usize,
) -> Result<Vec<RankedList>> {
    queries
        .par_iter()
        .map(|q| two_stage(index, q, mode, direction, depth))
        .collect()
}

/// Relevant item ids per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels(HashMap<String, HashSet<String>>);

#[derive(Serialize, Deserialize)]
struct QrelLine {
    query: String,
    relevant: Vec<String>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, relevant: impl IntoIterator<Item = String>) {
        self.0.entry(query.into()).or_default().extend(relevant);
    }

    pub fn get(&self, query: &str) -> Option<&HashSet<String>> {
        self.0.get(query)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut q = Self::new();
        for line in parse_jsonl::<QrelLine>(text)? {
            q.insert(line.query, line.relevant);
        }
        Ok(q)
    }

    /// JSONL sorted by query id, relevant ids sorted.
    pub fn to_jsonl(&self) -> Result<String> {
        let sorted: BTreeMap<_, _> = self.0.iter().collect();
        let lines: Vec<QrelLine> = sorted
            .into_iter()
            .map(|(query, rel)| {
                let mut relevant: Vec<String> = rel.iter().cloned().collect();
                relevant.sort();
                QrelLine {
                    query: query.clone(),
                    relevant,
                }
            })
            .collect();
        to_jsonl(&lines)
    }
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    /// Recall at each cut-off in [`RECALL_CUTOFFS`].
    pub r_at: BTreeMap<usize, f64>,
    /// Mean of the reported recalls.
    pub mr: f64,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or(0.0)
    }
}

/// Recall@K: fraction of queries with at least one relevant item in the
/// top K. Fails if a ranked query has no qrels entry.
pub fn evaluate(results: &[RankedList], qrels: &Qrels) -> Result<EvalReport> {
    let mut hits = [0usize; RECALL_CUTOFFS.len()];
    for r in results {
        let relevant = qrels
            .get(&r.query_id)
            .ok_or_else(|| Error::MissingQrel(r.query_id.clone()))?;
        let first_hit = r.ids().position(|id| relevant.contains(id));
        if let Some(pos) = first_hit {
            for (h, &k) in hits.iter_mut().zip(&RECALL_CUTOFFS) {
                if pos < k {
                    *h += 1;
                }
            }
        }
    }
    let n = results.len();
    let r_at: BTreeMap<usize, f64> = RECALL_CUTOFFS
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, if n == 0 { 0.0 } else { h as f64 / n as f64 }))
        .collect();
    let mr = r_at.values().sum::<f64>() / r_at.len() as f64;
    Ok(EvalReport { queries: n, r_at, mr })
}

/// Mean of every recall across several reports (e.g. both directions).
pub fn mean_recall(reports: &[EvalReport]) -> f64 {
    let all: Vec<f64> = reports.iter().flat_map(|r| r.r_at.values().copied()).collect();
    if all.is_empty() {
        0.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{l2_normalize_rows, EmbeddingMatrix};
    use crate::similarity::{maxsim_i2t, LateMatrix, PaddingMask};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
        let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        l2_normalize_rows(&EmbeddingMatrix::new(dim, data).unwrap()).unwrap()
    }

    fn item(id: String, rng: &mut ChaCha8Rng, late_rows: usize, dim: usize) -> ItemEmbedding {
        ItemEmbedding {
            id,
            cls: unit_rows(1, dim, rng).into_vec(),
            late: Some(LateMatrix::unpadded(unit_rows(late_rows, dim, rng))),
        }
    }

    fn corpus(n: usize, seed: u64) -> Vec<ItemEmbedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| item(format!("item{i:04}"), &mut rng, 3, 8)).collect()
    }

    fn basis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn empty_index() {
        let idx = build_index(Vec::new(), &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = item("q".into(), &mut rng, 2, 4);
        assert!(search(&idx, &q, ScoringMode::Global, 5).unwrap().ranking.is_empty());
    }

    #[test]
    fn build_and_lookup() {
        let items = corpus(1000, 1);
        let idx = build_index(items.clone(), &[ScoringMode::BagWise]).unwrap();
        for it in &items {
            assert_eq!(idx.get(&it.id).unwrap(), it);
        }
        assert!(idx.items().windows(2).all(|w| w[0].id < w[1].id));
        assert_eq!(idx.modes(), &[ScoringMode::Global, ScoringMode::BagWise]);
    }

    #[test]
    fn build_errors() {
        let mut items = corpus(3, 2);
        items[2].id = items[0].id.clone();
        assert!(matches!(build_index(items, &[]), Err(Error::DuplicateId(_))));

        let mut items = corpus(3, 3);
        items[1].cls.push(0.0);
        assert!(matches!(build_index(items, &[]), Err(Error::DimMismatch { .. })));

        let mut items = corpus(2, 4);
        items[0].late = None;
        assert!(matches!(
            build_index(items.clone(), &[ScoringMode::TokenWise]),
            Err(Error::MissingLateMatrix(_))
        ));
        let global_only = build_index(items, &[]).unwrap();
        assert!(global_only.items().iter().all(|i| i.late.is_none()));
    }

    #[test]
    fn search_orthonormal_and_overflowing_k() {
        let items: Vec<ItemEmbedding> = (0..4)
            .map(|i| ItemEmbedding {
                id: format!("e{i}"),
                cls: basis(4, i),
                late: None,
            })
            .collect();
        let idx = build_index(items.clone(), &[]).unwrap();
        let hit = search(&idx, &items[2], ScoringMode::Global, 1).unwrap();
        assert_eq!(hit.ranking, vec![("e2".to_string(), 1.0)]);
        let all = search(&idx, &items[2], ScoringMode::Global, 100).unwrap();
        // Ties at 0.0 fall back to ascending id.
        assert_eq!(all.ids().collect::<Vec<_>>(), vec!["e2", "e0", "e1", "e3"]);
        assert!(matches!(
            search(&idx, &items[0], ScoringMode::BagWise, 3),
            Err(Error::UnsupportedMode(_))
        ));
        assert!(search(&idx, &items[0], ScoringMode::Global, 0).is_err());
    }

    #[test]
    fn search_matches_full_scan() {
        let idx = build_index(corpus(200, 5), &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let q = item("q".into(), &mut rng, 1, 8);
            let mut oracle: Vec<(String, f64)> = idx
                .items()
                .iter()
                .map(|it| (it.id.clone(), it.cls.iter().zip(&q.cls).map(|(a, b)| a * b).sum()))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let got = search(&idx, &q, ScoringMode::Global, 20).unwrap();
            let got_ids: Vec<&str> = got.ids().collect();
            let oracle_ids: Vec<&str> = oracle[..20].iter().map(|(id, _)| id.as_str()).collect();
            assert_eq!(got_ids, oracle_ids);
        }
    }

    #[test]
    fn rerank_single_candidate() {
        let items = corpus(5, 7);
        let idx = build_index(items.clone(), &[ScoringMode::BagWise]).unwrap();
        let q = &items[1];
        let cands = RankedList {
            query_id: q.id.clone(),
            ranking: vec![(items[3].id.clone(), 0.5)],
        };
        let out = rerank(&idx, q, &cands, ScoringMode::BagWise, Direction::I2t).unwrap();
        let l = items[3].late.as_ref().unwrap();
        let expected = maxsim_i2t(&q.late.as_ref().unwrap().rows, &l.rows, &l.mask).unwrap();
        assert_eq!(out.ranking, vec![(items[3].id.clone(), expected)]);
    }

    #[test]
    fn rerank_errors() {
        let items = corpus(4, 8);
        let idx = build_index(items.clone(), &[ScoringMode::BagWise]).unwrap();
        let cands = search(&idx, &items[0], ScoringMode::Global, 4).unwrap();
        assert!(matches!(
            rerank(&idx, &items[0], &cands, ScoringMode::TokenWise, Direction::I2t),
            Err(Error::UnsupportedMode(_))
        ));
        let mut bad = cands.clone();
        bad.ranking.push(("nope".into(), 0.0));
        assert!(matches!(
            rerank(&idx, &items[0], &bad, ScoringMode::BagWise, Direction::I2t),
            Err(Error::UnknownId(_))
        ));
        let global_only = build_index(items.clone(), &[]).unwrap();
        assert!(rerank(&global_only, &items[0], &cands, ScoringMode::BagWise, Direction::I2t).is_err());
    }

    #[test]
    fn planted_rerank_improves_rank() {
        // Query image: CLS e0, patches e2 and e3. Target text "t" has a
        // weaker CLS match than the distractor "d" but its bags match both
        // patches exactly.
        let dim = 4;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let query = ItemEmbedding {
            id: "q".into(),
            cls: basis(dim, 0),
            late: Some(LateMatrix::unpadded(
                EmbeddingMatrix::from_rows(dim, &[basis(dim, 2), basis(dim, 3)]).unwrap(),
            )),
        };
        let target = ItemEmbedding {
            id: "t".into(),
            cls: vec![s, s, 0.0, 0.0],
            late: Some(LateMatrix::unpadded(
                EmbeddingMatrix::from_rows(dim, &[basis(dim, 2), basis(dim, 3)]).unwrap(),
            )),
        };
        let distractor = ItemEmbedding {
            id: "d".into(),
            cls: vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0, 0.0],
            late: Some(LateMatrix::unpadded(
                EmbeddingMatrix::from_rows(dim, &[basis(dim, 2), basis(dim, 1)]).unwrap(),
            )),
        };
        let idx = build_index(vec![target, distractor], &[ScoringMode::BagWise]).unwrap();
        let first = search(&idx, &query, ScoringMode::Global, 64).unwrap();
        assert_eq!(first.ids().collect::<Vec<_>>(), vec!["d", "t"]);
        let second = rerank(&idx, &query, &first, ScoringMode::BagWise, Direction::I2t).unwrap();
        assert_eq!(second.ids().collect::<Vec<_>>(), vec!["t", "d"]);
        // Kernel oracle: t matches both patches (1.0), d only one (0.5).
        assert_eq!(second.ranking[0].1, 1.0);
        assert_eq!(second.ranking[1].1, 0.5);
    }

    #[test]
    fn padded_query_rows_are_ignored() {
        let items = corpus(6, 9);
        let idx = build_index(items.clone(), &[ScoringMode::BagWise]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base = item("q".into(), &mut rng, 3, 8);
        let mut padded = base.clone();
        let rows = base.late.as_ref().unwrap().rows.clone();
        let junk = unit_rows(1, 8, &mut rng);
        let mut all: Vec<Vec<f64>> = rows.iter_rows().map(|r| r.to_vec()).collect();
        all.push(junk.into_vec());
        padded.late = Some(
            LateMatrix::new(
                EmbeddingMatrix::from_rows(8, &all).unwrap(),
                PaddingMask::new(vec![true, true, true, false]),
            )
            .unwrap(),
        );
        let a = two_stage(&idx, &base, ScoringMode::BagWise, Direction::T2i, 6).unwrap();
        let b = two_stage(&idx, &padded, ScoringMode::BagWise, Direction::T2i, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_extremes_and_missing() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", ["a".to_string()]);
        qrels.insert("q2", ["b".to_string()]);
        let perfect = vec![
            RankedList { query_id: "q1".into(), ranking: vec![("a".into(), 1.0), ("b".into(), 0.0)] },
            RankedList { query_id: "q2".into(), ranking: vec![("b".into(), 1.0)] },
        ];
        let r = evaluate(&perfect, &qrels).unwrap();
        assert_eq!((r.recall(1), r.recall(5), r.recall(10), r.mr), (1.0, 1.0, 1.0, 1.0));

        let miss = vec![RankedList { query_id: "q1".into(), ranking: vec![("z".into(), 1.0)] }];
        let r = evaluate(&miss, &qrels).unwrap();
        assert_eq!((r.recall(1), r.recall(5), r.recall(10), r.mr), (0.0, 0.0, 0.0, 0.0));

        let orphan = vec![RankedList { query_id: "q9".into(), ranking: vec![] }];
        assert!(matches!(evaluate(&orphan, &qrels), Err(Error::MissingQrel(_))));
    }

    #[test]
    fn jsonl_formats() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", ["b".to_string(), "a".to_string()]);
        let text = qrels.to_jsonl().unwrap();
        assert_eq!(text, "{\"query\":\"q1\",\"relevant\":[\"a\",\"b\"]}\n");
        assert_eq!(Qrels::parse_jsonl(&text).unwrap(), qrels);

        let results = vec![RankedList { query_id: "q1".into(), ranking: vec![("a".into(), 0.5)] }];
        let text = to_jsonl(&results).unwrap();
        assert_eq!(text, "{\"query\":\"q1\",\"ranking\":[[\"a\",0.5]]}\n");
        assert_eq!(parse_jsonl::<RankedList>(&text).unwrap(), results);
    }

    proptest! {
        #[test]
        fn rerank_is_a_permutation(seed in any::<u64>(), depth in 1usize..20) {
            let items = corpus(15, seed);
            let idx = build_index(items, &[ScoringMode::TokenWise]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let q = item("q".into(), &mut rng, 4, 8);
            let first = search(&idx, &q, ScoringMode::Global, depth).unwrap();
            let second = rerank(&idx, &q, &first, ScoringMode::TokenWise, Direction::I2t).unwrap();
            let mut a: Vec<&str> = first.ids().collect();
            let mut b: Vec<&str> = second.ids().collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert!(second.ranking.windows(2).all(|w| w[0].1 >= w[1].1));
        }

        #[test]
        fn recall_is_monotone_in_k(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut qrels = Qrels::new();
            let mut results = Vec::new();
            for q in 0..20 {
                let qid = format!("q{q}");
                qrels.insert(qid.clone(), (0..rng.gen_range(1..3)).map(|_| format!("i{}", rng.gen_range(0..30))));
                let mut ids: Vec<usize> = (0..30).collect();
                for i in (1..30).rev() {
                    ids.swap(i, rng.gen_range(0..=i));
                }
                let ranking = ids.iter().take(rng.gen_range(0..15)).map(|i| (format!("i{i}"), 0.0)).collect();
                results.push(RankedList { query_id: qid, ranking });
            }
            let r = evaluate(&results, &qrels).unwrap();
            prop_assert!(r.recall(1) <= r.recall(5) && r.recall(5) <= r.recall(10) && r.recall(10) <= 1.0);
        }
    }
}
