//! Filtered link-prediction evaluation with pessimistic (bottom) tie
//! placement.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Triple, Vocab};
use crate::model::{score_matrix, AblationMask, ModelError, ParameterStore};

/// Queries scored per batch during evaluation.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("index {0} out of range for {1} candidates")]
    InvalidIndex(usize, usize),
    #[error("filter ids must be strictly increasing")]
    UnsortedFilter,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Known true tails for each `(head, relation)` key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterIndex {
    tails: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    /// An index that filters nothing (raw ranking).
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_triples<I: IntoIterator<Item = Triple>>(triples: I) -> Self {
        let mut tails: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in triples {
            tails.entry((t.head, t.relation)).or_default().push(t.tail);
        }
        for v in tails.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        FilterIndex { tails }
    }

    /// Sorted, distinct tails of `(h, r)`; empty if the key is unknown.
    pub fn tails(&self, h: usize, r: usize) -> &[usize] {
        self.tails.get(&(h, r)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.tails(t.head, t.relation).binary_search(&t.tail).is_ok()
    }

    /// Number of distinct `(h, r)` keys.
    pub fn len(&self) -> usize {
        self.tails.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tails.is_empty()
    }
}

/// Rank of `scores[true_idx]` among the candidates not in `filtered_out`,
/// with the true entity placed after every candidate of equal score.
///
/// `filtered_out` must be strictly increasing; `true_idx` is never removed
/// even if listed. A NaN true score ranks last.
pub fn bottom_rank(scores: &[f64], true_idx: usize, filtered_out: &[usize]) -> Result<usize, EvalError> {
    let n = scores.len();
    if true_idx >= n {
        return Err(EvalError::InvalidIndex(true_idx, n));
    }
    if filtered_out.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::UnsortedFilter);
    }
    if let Some(&last) = filtered_out.last() {
        if last >= n {
            return Err(EvalError::InvalidIndex(last, n));
        }
    }
    let s = scores[true_idx];
    if s.is_nan() {
        let removed = filtered_out.iter().filter(|&&j| j != true_idx).count();
        return Ok(n - removed);
    }
    // Counts true_idx itself through s >= s.
    let mut rank = scores.iter().filter(|&&x| x >= s).count();
    for &j in filtered_out {
        if j != true_idx && scores[j] >= s {
            rank -= 1;
        }
    }
    Ok(rank)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Tail,
    Head,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Tail => "tail",
            Direction::Head => "head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankRecord {
    pub triple: Triple,
    pub direction: Direction,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationMetrics {
    pub mrr: f64,
    /// Test triples with this relation (each ranked in both directions).
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    /// Number of ranked queries (two per triple).
    pub queries: usize,
    pub per_relation: BTreeMap<usize, RelationMetrics>,
}

impl MetricsReport {
    pub fn from_records(records: &[RankRecord]) -> Self {
        let n = records.len();
        let mut hits = [0usize; 3];
        // Rank histograms keep the float sums independent of record order.
        let mut all: BTreeMap<usize, usize> = BTreeMap::new();
        let mut rel: BTreeMap<usize, (BTreeMap<usize, usize>, usize, usize)> = BTreeMap::new();
        for rec in records {
            *all.entry(rec.rank).or_default() += 1;
            for (h, k) in hits.iter_mut().zip([1, 3, 10]) {
                if rec.rank <= k {
                    *h += 1;
                }
            }
            let e = rel.entry(rec.triple.relation).or_default();
            *e.0.entry(rec.rank).or_default() += 1;
            e.1 += 1;
            if rec.direction == Direction::Tail {
                e.2 += 1;
            }
        }
        let rr_total = |h: &BTreeMap<usize, usize>| h.iter().map(|(&r, &c)| c as f64 / r as f64).sum::<f64>();
        let rr_sum = rr_total(&all);
        let frac = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        MetricsReport {
            mrr: if n == 0 { 0.0 } else { rr_sum / n as f64 },
            hits1: frac(hits[0]),
            hits3: frac(hits[1]),
            hits10: frac(hits[2]),
            queries: n,
            per_relation: rel
                .into_iter()
                .map(|(r, (ranks, q, triples))| {
                    (
                        r,
                        RelationMetrics {
                            mrr: rr_total(&ranks) / q as f64,
                            count: triples,
                        },
                    )
                })
                .collect(),
        }
    }

    pub const CSV_HEADER: &'static str = "mrr,hits1,hits3,hits10,queries";

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(w, "{}", self.csv_fields())
    }

    pub fn csv_fields(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{}",
            self.mrr, self.hits1, self.hits3, self.hits10, self.queries
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8} {:>8} {:>8}", "MRR", "H@1", "H@3", "H@10", "queries")?;
        write!(
            f,
            "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}",
            self.mrr, self.hits1, self.hits3, self.hits10, self.queries
        )
    }
}

/// Ranks every triple of `split` in both directions. Head prediction uses
/// the reciprocal relation `r + num_relations`.
pub fn rank_split(
    split: &[Triple],
    store: &ParameterStore,
    filter: &FilterIndex,
    mask: AblationMask,
    num_relations: usize,
) -> Result<Vec<RankRecord>, EvalError> {
    let queries: Vec<(Triple, Direction, Triple)> = split
        .iter()
        .flat_map(|&t| {
            [
                (t, Direction::Tail, t),
                (t, Direction::Head, t.reciprocal(num_relations)),
            ]
        })
        .collect();
    let entities = store.combined_entities(mask);
    let kind = store.variant().groups().score;
    let width = store.layout().width;
    let mut records = Vec::with_capacity(queries.len());
    for batch in queries.chunks(EVAL_BATCH) {
        let hr: Vec<(usize, usize)> = batch.iter().map(|(_, _, q)| (q.head, q.relation)).collect();
        let heads = store.transformed_heads(&hr, mask)?;
        let scores = score_matrix(heads.view(), entities.view(), kind, width);
        let ranks: Vec<Result<usize, EvalError>> = batch
            .par_iter()
            .enumerate()
            .map(|(b, (_, _, q))| {
                let row = scores.row(b);
                let row = row.as_slice().expect("standard layout");
                bottom_rank(row, q.tail, filter.tails(q.head, q.relation))
            })
            .collect();
        for ((orig, dir, _), rank) in batch.iter().zip(ranks) {
            records.push(RankRecord {
                triple: *orig,
                direction: *dir,
                rank: rank?,
            });
        }
    }
    Ok(records)
}

/// MRR and Hits@{1,3,10} over both prediction directions of `split`.
pub fn evaluate(
    split: &[Triple],
    store: &ParameterStore,
    filter: &FilterIndex,
    mask: AblationMask,
    num_relations: usize,
) -> Result<MetricsReport, EvalError> {
    Ok(MetricsReport::from_records(&rank_split(
        split,
        store,
        filter,
        mask,
        num_relations,
    )?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationRow {
    pub name: String,
    pub mrr: f64,
    pub count: usize,
}

/// Per-relation rows, most frequent first (ties by relation id).
pub fn per_relation_table(report: &MetricsReport, vocab: &Vocab) -> Vec<RelationRow> {
    let mut rows: Vec<(usize, RelationMetrics)> = report.per_relation.iter().map(|(&r, &m)| (r, m)).collect();
    rows.sort_by(|a, b| b.1.count.cmp(&a.1.count).then(a.0.cmp(&b.0)));
    rows.into_iter()
        .map(|(r, m)| RelationRow {
            name: vocab.relation_name(r).to_owned(),
            mrr: m.mrr,
            count: m.count,
        })
        .collect()
}

pub fn write_per_relation_csv<W: Write>(rows: &[RelationRow], w: &mut W) -> io::Result<()> {
    writeln!(w, "relation,mrr,count")?;
    for row in rows {
        writeln!(w, "{},{:.6},{}", row.name, row.mrr, row.count)?;
    }
    Ok(())
}
