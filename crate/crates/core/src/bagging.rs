//! The bagging layer: a lexicon trie over token-id sequences, greedy
//! longest-match segmentation into contiguous bags, and offset-based
//! sum pooling of token embeddings into bag embeddings.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize_rows, EmbeddingMatrix};
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Pre-tokenized lexicon entries (words, entities, phrases).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vocabulary {
    entries: Vec<Vec<TokenId>>,
}

impl Vocabulary {
    pub fn new(entries: Vec<Vec<TokenId>>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.is_empty() {
                return Err(Error::Format("empty vocabulary entry".into()));
            }
            if !seen.insert(e.as_slice()) {
                return Err(Error::DuplicateEntry(e.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Vec<TokenId>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses the text format: one entry per line, whitespace-separated
    /// token ids, `#` starts a comment line, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let seq = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<TokenId>().map_err(|_| {
                        Error::Format(format!("line {}: bad token id {t:?}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(seq);
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let line: Vec<String> = e.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<TokenId, usize>,
    terminal: bool,
}

/// Trie over vocabulary token sequences.
#[derive(Debug, Clone)]
pub struct BaggingHelper {
    nodes: Vec<TrieNode>,
    vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct HelperFile {
    format: String,
    version: u32,
    entries: Vec<Vec<TokenId>>,
}

const HELPER_FORMAT: &str = "bagwise-helper";

impl BaggingHelper {
    /// A helper with no entries: every token becomes its own bag.
    pub fn singletons() -> Self {
        Self {
            nodes: vec![TrieNode::default()],
            vocab: Vocabulary::default(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Exact membership of a full sequence.
    pub fn contains(&self, seq: &[TokenId]) -> bool {
        let mut node = 0;
        for t in seq {
            match self.nodes[node].children.get(t) {
                Some(&next) => node = next,
                None => return false,
            }
        }
        !seq.is_empty() && self.nodes[node].terminal
    }

    /// Length of the longest entry that is a prefix of `tokens`, if any.
    pub fn longest_match(&self, tokens: &[TokenId]) -> Option<usize> {
        let mut node = 0;
        let mut best = None;
        for (i, t) in tokens.iter().enumerate() {
            match self.nodes[node].children.get(t) {
                Some(&next) => node = next,
                None => break,
            }
            if self.nodes[node].terminal {
                best = Some(i + 1);
            }
        }
        best
    }

    /// Terminal depths reachable along `path`, for inspection.
    pub fn terminal_depths(&self, path: &[TokenId]) -> Vec<usize> {
        let mut node = 0;
        let mut depths = Vec::new();
        for (i, t) in path.iter().enumerate() {
            match self.nodes[node].children.get(t) {
                Some(&next) => node = next,
                None => break,
            }
            if self.nodes[node].terminal {
                depths.push(i + 1);
            }
        }
        depths
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&HelperFile {
            format: HELPER_FORMAT.into(),
            version: 1,
            entries: self.vocab.entries.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: HelperFile = serde_json::from_str(text)?;
        if file.format != HELPER_FORMAT || file.version != 1 {
            return Err(Error::Format(format!(
                "unsupported helper file {} v{}",
                file.format, file.version
            )));
        }
        let vocab = Vocabulary::new(file.entries)?;
        if vocab.is_empty() {
            return Ok(Self::singletons());
        }
        build_helper(&vocab)
    }
}

/// Compiles a non-empty vocabulary into a trie.
pub fn build_helper(vocab: &Vocabulary) -> Result<BaggingHelper> {
    if vocab.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let mut nodes = vec![TrieNode::default()];
    for entry in &vocab.entries {
        let mut node = 0;
        for &t in entry {
            node = match nodes[node].children.get(&t) {
                Some(&next) => next,
                None => {
                    nodes.push(TrieNode::default());
                    let id = nodes.len() - 1;
                    nodes[node].children.insert(t, id);
                    id
                }
            };
        }
        if nodes[node].terminal {
            return Err(Error::DuplicateEntry(entry.clone()));
        }
        nodes[node].terminal = true;
    }
    Ok(BaggingHelper {
        nodes,
        vocab: vocab.clone(),
    })
}

/// Contiguous bags over a token sequence, with EmbeddingBag-style offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagSegmentation {
    bags: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl BagSegmentation {
    /// Builds a segmentation from bag offsets over `len` tokens.
    pub fn from_offsets(offsets: Vec<usize>, len: usize) -> Result<Self> {
        if len == 0 {
            if offsets.is_empty() {
                return Ok(Self {
                    bags: Vec::new(),
                    offsets,
                });
            }
            return Err(Error::Format("offsets given for an empty sequence".into()));
        }
        if offsets.first() != Some(&0) {
            return Err(Error::Format("offsets must start at 0".into()));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) || offsets.last().is_some_and(|&o| o >= len) {
            return Err(Error::Format("offsets must be strictly increasing and < len".into()));
        }
        let bags = offsets
            .iter()
            .enumerate()
            .map(|(j, &start)| (start, offsets.get(j + 1).copied().unwrap_or(len)))
            .collect();
        Ok(Self { bags, offsets })
    }

    /// Every token in its own bag.
    pub fn singletons(len: usize) -> Self {
        Self {
            bags: (0..len).map(|i| (i, i + 1)).collect(),
            offsets: (0..len).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.bags.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn spans(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.bags.iter().map(|&(s, e)| s..e)
    }

    /// Number of tokens covered.
    pub fn token_count(&self) -> usize {
        self.bags.last().map_or(0, |&(_, e)| e)
    }
}

/// Greedy left-to-right longest-match segmentation. Tokens that start no
/// vocabulary match become singleton bags, so the result always covers the
/// whole input.
pub fn segment(tokens: &[TokenId], helper: &BaggingHelper) -> BagSegmentation {
    let mut bags = Vec::new();
    let mut offsets = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let len = helper.longest_match(&tokens[i..]).unwrap_or(1);
        bags.push((i, i + len));
        offsets.push(i);
        i += len;
    }
    BagSegmentation { bags, offsets }
}

/// Sums token rows per bag. With `renormalize`, bag rows are L2-normalized
/// afterwards.
pub fn aggregate_bags(
    token_embs: &EmbeddingMatrix,
    seg: &BagSegmentation,
    renormalize: bool,
) -> Result<EmbeddingMatrix> {
    let covered = seg.token_count();
    if covered != token_embs.rows() {
        return Err(Error::CoverageMismatch {
            covered,
            rows: token_embs.rows(),
        });
    }
    let dim = token_embs.dim();
    let mut data = vec![0.0; seg.k() * dim];
    for (span, out) in seg.spans().zip(data.chunks_exact_mut(dim)) {
        for r in span {
            for (o, v) in out.iter_mut().zip(token_embs.row(r)) {
                *o += v;
            }
        }
    }
    let bags = EmbeddingMatrix::new(dim, data)?;
    if renormalize {
        l2_normalize_rows(&bags)
    } else {
        Ok(bags)
    }
}

/// Splits off row 0 as the CLS bag and bags rows `1..` per `seg`, which
/// indexes the non-CLS tokens from 0.
pub fn bag_cls_passthrough(
    token_embs: &EmbeddingMatrix,
    seg: &BagSegmentation,
) -> Result<(Vec<f64>, EmbeddingMatrix)> {
    if token_embs.is_empty() {
        return Err(Error::CoverageMismatch {
            covered: seg.token_count() + 1,
            rows: 0,
        });
    }
    let cls = token_embs.row(0).to_vec();
    let rest = token_embs.slice_rows(1, token_embs.rows());
    let bags = aggregate_bags(&rest, seg, false)?;
    Ok((cls, bags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn helper(entries: &[&[TokenId]]) -> BaggingHelper {
        build_helper(&Vocabulary::new(entries.iter().map(|e| e.to_vec()).collect()).unwrap())
            .unwrap()
    }

    fn spans(seg: &BagSegmentation) -> Vec<(usize, usize)> {
        seg.spans().map(|r| (r.start, r.end)).collect()
    }

    #[test]
    fn trie_terminals_on_shared_branch() {
        let h = helper(&[&[7], &[7, 9]]);
        assert_eq!(h.terminal_depths(&[7, 9]), vec![1, 2]);
        assert!(h.contains(&[7]) && h.contains(&[7, 9]));
        assert!(!h.contains(&[9]) && !h.contains(&[7, 9, 1]) && !h.contains(&[]));
    }

    #[test]
    fn empty_and_duplicate_vocab() {
        assert!(matches!(
            build_helper(&Vocabulary::default()),
            Err(Error::EmptyVocabulary)
        ));
        assert!(matches!(
            Vocabulary::new(vec![vec![1, 2], vec![1, 2]]),
            Err(Error::DuplicateEntry(_))
        ));
    }

    #[test]
    fn membership_matches_hash_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut set = HashSet::new();
        while set.len() < 1000 {
            let len = rng.gen_range(1..5);
            set.insert((0..len).map(|_| rng.gen_range(0..12)).collect::<Vec<TokenId>>());
        }
        let h = build_helper(&Vocabulary::new(set.iter().cloned().collect()).unwrap()).unwrap();
        for _ in 0..10_000 {
            let len = rng.gen_range(1..6);
            let probe: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..12)).collect();
            assert_eq!(h.contains(&probe), set.contains(&probe));
        }
    }

    #[test]
    fn greedy_longest_segmentation() {
        let (a, b, c) = (1, 2, 3);
        let seg = segment(&[a, b, c], &helper(&[&[a, b]]));
        assert_eq!(spans(&seg), vec![(0, 2), (2, 3)]);
        assert_eq!(seg.offsets(), &[0, 2]);

        let seg = segment(&[a, b, c], &helper(&[&[a, b], &[a, b, c]]));
        assert_eq!(spans(&seg), vec![(0, 3)]);

        let seg = segment(&[4, 5, 6, 7], &helper(&[&[a, b]]));
        assert_eq!(seg.k(), 4);
        assert_eq!(seg, BagSegmentation::singletons(4));
    }

    #[test]
    fn greedy_pick_among_all_segmentations() {
        // Enumerate every segmentation of [A,B,C] whose multi-token bags are
        // vocabulary entries; the greedy result must be the one whose first
        // bag is longest, recursively.
        let tokens = [1, 2, 3];
        let vocab: HashSet<Vec<TokenId>> = [vec![1, 2]].into_iter().collect();
        let mut all = Vec::new();
        for mask in 0u32..4 {
            let mut cuts = vec![0];
            for (bit, pos) in [1usize, 2].iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    cuts.push(*pos);
                }
            }
            cuts.push(3);
            let bags: Vec<(usize, usize)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
            if bags
                .iter()
                .all(|&(s, e)| e - s == 1 || vocab.contains(&tokens[s..e]))
            {
                all.push(bags);
            }
        }
        all.sort_by(|x, y| {
            let lx: Vec<usize> = x.iter().map(|(s, e)| e - s).collect();
            let ly: Vec<usize> = y.iter().map(|(s, e)| e - s).collect();
            ly.cmp(&lx)
        });
        assert_eq!(all.len(), 2);
        assert_eq!(spans(&segment(&tokens, &helper(&[&[1, 2]]))), all[0]);
    }

    #[test]
    fn aggregate_singletons_is_identity() {
        let m = EmbeddingMatrix::new(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(
            aggregate_bags(&m, &BagSegmentation::singletons(3), false).unwrap(),
            m
        );
    }

    #[test]
    fn aggregate_cancellation_and_coverage() {
        let m = EmbeddingMatrix::new(2, vec![1.0, -2.0, -1.0, 2.0]).unwrap();
        let one_bag = BagSegmentation::from_offsets(vec![0], 2).unwrap();
        assert!(matches!(
            aggregate_bags(&m, &one_bag, true),
            Err(Error::ZeroRow(0))
        ));
        assert!(matches!(
            aggregate_bags(&m, &BagSegmentation::singletons(3), false),
            Err(Error::CoverageMismatch { covered: 3, rows: 2 })
        ));
    }

    #[test]
    fn aggregate_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = EmbeddingMatrix::new(4, data.clone()).unwrap();
        let seg = BagSegmentation::from_offsets(vec![0, 3], 6).unwrap();
        let got = aggregate_bags(&m, &seg, false).unwrap();
        for (bag, (lo, hi)) in [(0usize, 3usize), (3, 6)].iter().enumerate().map(|(j, r)| (j, *r)) {
            for c in 0..4 {
                let mut expected = 0.0;
                for r in lo..hi {
                    expected += data[r * 4 + c];
                }
                assert!((got.row(bag)[c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cls_passthrough() {
        let only_cls = EmbeddingMatrix::new(3, vec![1.0, 2.0, 3.0]).unwrap();
        let (cls, bags) = bag_cls_passthrough(&only_cls, &BagSegmentation::singletons(0)).unwrap();
        assert_eq!(cls, vec![1.0, 2.0, 3.0]);
        assert_eq!(bags.rows(), 0);

        let m = EmbeddingMatrix::new(2, vec![9.0, 8.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let seg = BagSegmentation::from_offsets(vec![0], 2).unwrap();
        let (cls, bags) = bag_cls_passthrough(&m, &seg).unwrap();
        assert_eq!(cls, m.row(0));
        assert_eq!(bags.as_slice(), &[3.0, 3.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..7 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = EmbeddingMatrix::new(3, data).unwrap();
        let seg = BagSegmentation::from_offsets(vec![0, 1, 4], 6).unwrap();
        let (_, bags) = bag_cls_passthrough(&m, &seg).unwrap();
        assert_eq!(bags, aggregate_bags(&m.slice_rows(1, 7), &seg, false).unwrap());
    }

    #[test]
    fn offsets_validation() {
        assert!(BagSegmentation::from_offsets(vec![1], 3).is_err());
        assert!(BagSegmentation::from_offsets(vec![0, 2, 2], 3).is_err());
        assert!(BagSegmentation::from_offsets(vec![0, 3], 3).is_err());
        assert_eq!(BagSegmentation::from_offsets(vec![], 0).unwrap().k(), 0);
    }

    #[test]
    fn vocab_text_and_helper_json() {
        let v = Vocabulary::parse("# entities\n1 2 3\n\n  7 9 \n4\n").unwrap();
        assert_eq!(v.entries(), &[vec![1, 2, 3], vec![7, 9], vec![4]]);
        assert!(Vocabulary::parse("1 x\n").is_err());
        let h = build_helper(&v).unwrap();
        let back = BaggingHelper::from_json(&h.to_json().unwrap()).unwrap();
        assert_eq!(back.vocabulary(), &v);
        assert!(back.contains(&[7, 9]));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Vec<TokenId>>, Vec<TokenId>)> {
        let vocab = prop::collection::hash_set(prop::collection::vec(0u32..6, 1..4), 0..10);
        let tokens = prop::collection::vec(0u32..6, 1..30);
        (vocab.prop_map(|s| s.into_iter().collect()), tokens)
    }

    proptest! {
        #[test]
        fn cover_bound_and_determinism((entries, tokens) in arb_case()) {
            let h = if entries.is_empty() {
                BaggingHelper::singletons()
            } else {
                build_helper(&Vocabulary::new(entries).unwrap()).unwrap()
            };
            let seg = segment(&tokens, &h);
            let flat: Vec<usize> = seg.spans().flatten().collect();
            prop_assert_eq!(flat, (0..tokens.len()).collect::<Vec<_>>());
            prop_assert!(seg.k() >= 1 && seg.k() <= tokens.len());
            prop_assert_eq!(seg.offsets()[0], 0);
            prop_assert!(seg.offsets().windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(&seg, &segment(&tokens, &h));
        }

        #[test]
        fn aggregate_is_linear(seed in any::<u64>(), alpha in -4.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = EmbeddingMatrix::new(3, data).unwrap();
            let seg = BagSegmentation::from_offsets(vec![0, 2, 5], 8).unwrap();
            let lhs = aggregate_bags(&m.scale(alpha), &seg, false).unwrap();
            let rhs = aggregate_bags(&m, &seg, false).unwrap().scale(alpha);
            for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
