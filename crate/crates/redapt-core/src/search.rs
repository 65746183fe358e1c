//! Greedy backward selection over adaptor injection positions.
//!
//! The search state is a [`PositionConfig`]: the sorted set of layer indices
//! whose outputs get an adaptor block. One move either *removes* a position
//! or *replaces* one with a different layer from a restriction [`Bucket`].
//! Each round scores every neighbour (memoised, optionally in parallel) and
//! moves only on a strict quality improvement; among equally good
//! neighbours, lower FLOPs ratio wins, then lexicographic order. Ties with
//! the incumbent keep the incumbent, so a constant evaluator returns the
//! start configuration unchanged.
//!
//! Every evaluation and move is appended to a serialisable trace, one
//! record per event, for audit and for the JSONL file the CLI writes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::SCHEMA_VERSION;

/// Sorted, duplicate-free list of 0-based layer indices; a block is applied
/// to the *output* of each listed layer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PositionConfig(Vec<usize>);

impl PositionConfig {
    /// Sorts the input; duplicate positions are rejected.
    pub fn new(mut positions: Vec<usize>) -> Result<Self> {
        positions.sort_unstable();
        if positions.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(format!(
                "duplicate injection position in {positions:?}"
            )));
        }
        Ok(PositionConfig(positions))
    }

    pub fn empty() -> Self {
        PositionConfig(Vec::new())
    }

    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.0.binary_search(&position).is_ok()
    }

    /// All positions must index a layer in `0..layers`.
    pub fn validate_for(&self, layers: usize) -> Result<()> {
        if let Some(&p) = self.0.iter().find(|&&p| p >= layers) {
            return Err(Error::InvalidConfig(format!(
                "injection position {p} out of range for {layers} layers"
            )));
        }
        Ok(())
    }

    fn without_index(&self, index: usize) -> PositionConfig {
        let mut v = self.0.clone();
        v.remove(index);
        PositionConfig(v)
    }

    fn with_index_replaced(&self, index: usize, new_position: usize) -> Option<PositionConfig> {
        if self.contains(new_position) {
            return None;
        }
        let mut v = self.0.clone();
        v[index] = new_position;
        v.sort_unstable();
        Some(PositionConfig(v))
    }
}

impl fmt::Display for PositionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, "]")
    }
}

/// Inclusive range of layer indices that replacement moves may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: usize,
    pub hi: usize,
}

impl Bucket {
    /// Lower half of the stack: layers `0 ..= layers/2 - 1`.
    pub fn low_mid(layers: usize) -> Bucket {
        debug_assert!(layers >= 2);
        Bucket { lo: 0, hi: layers / 2 - 1 }
    }

    /// Upper half of the stack: layers `layers/2 ..= layers - 1`.
    pub fn mid_top(layers: usize) -> Bucket {
        debug_assert!(layers >= 2);
        Bucket { lo: layers / 2, hi: layers - 1 }
    }

    pub fn contains(&self, position: usize) -> bool {
        (self.lo..=self.hi).contains(&position)
    }

    pub fn members(&self) -> impl Iterator<Item = usize> {
        self.lo..=self.hi
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        self.hi < self.lo
    }
}

/// Single-edit moves from `config`: every remove-one variant plus every
/// replace-one-with-a-bucket-member variant. The result is sorted, has no
/// duplicates, and never contains `config` itself.
pub fn neighbors(config: &PositionConfig, bucket: &Bucket) -> Vec<PositionConfig> {
    let mut out: BTreeSet<PositionConfig> = BTreeSet::new();
    for i in 0..config.len() {
        out.insert(config.without_index(i));
        for candidate in bucket.members() {
            if let Some(replaced) = config.with_index_replaced(i, candidate) {
                out.insert(replaced);
            }
        }
    }
    out.remove(config);
    out.into_iter().collect()
}

/// Scores a position configuration; higher is better. Implementations must
/// be deterministic — the search memoises on that assumption.
pub trait QualityEvaluator: Sync {
    fn evaluate(&self, config: &PositionConfig) -> f64;
}

impl<F> QualityEvaluator for F
where
    F: Fn(&PositionConfig) -> f64 + Sync,
{
    fn evaluate(&self, config: &PositionConfig) -> f64 {
        self(config)
    }
}

/// What happened during one search event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    /// A configuration was scored for the first time.
    Evaluate,
    /// The search moved to a strictly better neighbour.
    Move,
    /// No neighbour strictly improved on the incumbent.
    Stop,
}

/// One line of the search trace (serialised as JSONL by the CLI).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_version: u32,
    pub round: usize,
    pub event: TraceEvent,
    pub config: PositionConfig,
    pub quality: f64,
    pub flops_ratio: f64,
}

/// Result of a full backward-selection run.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: PositionConfig,
    pub best_quality: f64,
    pub best_flops_ratio: f64,
    /// Distinct configurations scored (memoised hits excluded).
    pub evaluations: usize,
    /// Completed improvement rounds (number of accepted moves).
    pub rounds: usize,
    pub trace: Vec<TraceRecord>,
}

/// Greedy backward selection from `start`.
///
/// Each round scores all unseen neighbours of the incumbent (in parallel
/// when enabled; scores land in input order so the outcome is identical
/// either way) and picks the best by `(quality desc, flops_ratio asc,
/// lexicographic asc)`. The search moves only if that neighbour's quality
/// strictly exceeds the incumbent's, so the returned quality is always
/// `>=` the start's; `max_rounds` bounds the number of moves.
pub fn backward_select(
    start: &PositionConfig,
    bucket: &Bucket,
    evaluator: &dyn QualityEvaluator,
    flops_ratio: &(dyn Fn(&PositionConfig) -> f64 + Sync),
    max_rounds: usize,
) -> SearchOutcome {
    let mut memo: BTreeMap<PositionConfig, (f64, f64)> = BTreeMap::new();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut evaluations = 0usize;

    let score_batch = |configs: &[PositionConfig],
                           round: usize,
                           memo: &mut BTreeMap<PositionConfig, (f64, f64)>,
                           trace: &mut Vec<TraceRecord>,
                           evaluations: &mut usize| {
        let fresh: Vec<PositionConfig> = configs
            .iter()
            .filter(|c| !memo.contains_key(*c))
            .cloned()
            .collect();
        let scored = par::map_ordered(&fresh, |c| (evaluator.evaluate(c), flops_ratio(c)));
        for (config, (quality, ratio)) in fresh.into_iter().zip(scored) {
            trace.push(TraceRecord {
                schema_version: SCHEMA_VERSION,
                round,
                event: TraceEvent::Evaluate,
                config: config.clone(),
                quality,
                flops_ratio: ratio,
            });
            memo.insert(config, (quality, ratio));
            *evaluations += 1;
        }
    };

    score_batch(
        std::slice::from_ref(start),
        0,
        &mut memo,
        &mut trace,
        &mut evaluations,
    );
    let mut current = start.clone();
    let mut rounds = 0usize;

    for round in 1..=max_rounds {
        let candidates = neighbors(&current, bucket);
        score_batch(&candidates, round, &mut memo, &mut trace, &mut evaluations);

        let mut ranked: Vec<&PositionConfig> = candidates.iter().collect();
        ranked.sort_by(|a, b| {
            let (qa, fa) = memo[*a];
            let (qb, fb) = memo[*b];
            qb.total_cmp(&qa)
                .then(fa.total_cmp(&fb))
                .then_with(|| a.cmp(b))
        });

        let (cur_quality, _) = memo[&current];
        match ranked.first() {
            Some(best) if memo[*best].0 > cur_quality => {
                current = (*best).clone();
                let (q, f) = memo[&current];
                trace.push(TraceRecord {
                    schema_version: SCHEMA_VERSION,
                    round,
                    event: TraceEvent::Move,
                    config: current.clone(),
                    quality: q,
                    flops_ratio: f,
                });
                rounds = round;
            }
            _ => break,
        }
    }

    let (q, f) = memo[&current];
    trace.push(TraceRecord {
        schema_version: SCHEMA_VERSION,
        round: rounds,
        event: TraceEvent::Stop,
        config: current.clone(),
        quality: q,
        flops_ratio: f,
    });

    SearchOutcome {
        best: current,
        best_quality: q,
        best_flops_ratio: f,
        evaluations,
        rounds,
        trace,
    }
}

/// Serialise a trace as JSON Lines (one record per line).
pub fn trace_to_jsonl(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for record in trace {
        out.push_str(&serde_json::to_string(record).expect("trace records serialise"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(v: &[usize]) -> PositionConfig {
        PositionConfig::new(v.to_vec()).unwrap()
    }

    #[test]
    fn position_config_sorts_and_rejects_duplicates() {
        assert_eq!(cfg(&[19, 14, 18, 15]).positions(), &[14, 15, 18, 19]);
        assert!(PositionConfig::new(vec![3, 3]).is_err());
        assert!(cfg(&[2, 5]).validate_for(6).is_ok());
        assert!(cfg(&[2, 6]).validate_for(6).is_err());
    }

    #[test]
    fn buckets_split_a_24_layer_stack() {
        let low = Bucket::low_mid(24);
        let high = Bucket::mid_top(24);
        assert_eq!((low.lo, low.hi), (0, 11));
        assert_eq!((high.lo, high.hi), (12, 23));
        assert_eq!(low.len() + high.len(), 24);
        assert!(low.contains(11) && !low.contains(12));
        assert!(high.contains(12) && high.contains(23) && !high.contains(24));
    }

    #[test]
    fn neighbor_count_for_reference_start() {
        // 4 removals plus 4 * (12 - 4) replacements, all distinct.
        let n = neighbors(&cfg(&[14, 15, 18, 19]), &Bucket { lo: 12, hi: 23 });
        assert_eq!(n.len(), 36);
        assert!(n.iter().all(|c| c != &cfg(&[14, 15, 18, 19])));
        // Sorted and unique by construction.
        for w in n.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn neighbors_of_empty_config_is_empty() {
        assert!(neighbors(&PositionConfig::empty(), &Bucket { lo: 0, hi: 5 }).is_empty());
    }

    #[test]
    fn constant_evaluator_keeps_the_start() {
        let start = cfg(&[14, 15, 18, 19]);
        let outcome = backward_select(
            &start,
            &Bucket { lo: 12, hi: 23 },
            &|_: &PositionConfig| 1.0,
            &|c: &PositionConfig| 0.1 * c.len() as f64,
            8,
        );
        assert_eq!(outcome.best, start);
        assert_eq!(outcome.rounds, 0);
        // Start + all 36 neighbours scored exactly once.
        assert_eq!(outcome.evaluations, 37);
        assert!(matches!(outcome.trace.last().unwrap().event, TraceEvent::Stop));
    }

    #[test]
    fn memoisation_scores_each_config_once() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Counting(AtomicUsize);
        impl QualityEvaluator for Counting {
            fn evaluate(&self, config: &PositionConfig) -> f64 {
                self.0.fetch_add(1, Ordering::SeqCst);
                config.positions().iter().sum::<usize>() as f64
            }
        }
        let eval = Counting(AtomicUsize::new(0));
        let outcome = backward_select(
            &cfg(&[2, 3]),
            &Bucket { lo: 0, hi: 5 },
            &eval,
            &|_: &PositionConfig| 1.0,
            16,
        );
        assert_eq!(eval.0.load(Ordering::SeqCst), outcome.evaluations);
        // Re-encountered configs must not be scored again: the number of
        // evaluator calls equals the number of distinct configs in the trace.
        let distinct: std::collections::BTreeSet<_> = outcome
            .trace
            .iter()
            .filter(|r| r.event == TraceEvent::Evaluate)
            .map(|r| r.config.clone())
            .collect();
        assert_eq!(distinct.len(), outcome.evaluations);
        // Sum-of-positions is maximised by the top two bucket members.
        assert_eq!(outcome.best, cfg(&[4, 5]));
    }

    #[test]
    fn flops_tie_break_picks_cheaper_of_equal_improvements() {
        // From [0], both [4] and [5] improve quality equally; the lower
        // flops ratio (later position) must win the move.
        let quality = |c: &PositionConfig| {
            if c.positions().iter().any(|&p| p >= 4) { 1.0 } else { 0.0 }
        };
        let ratio =
            |c: &PositionConfig| 1.0 - 0.01 * c.positions().iter().sum::<usize>() as f64;
        let outcome = backward_select(&cfg(&[0]), &Bucket { lo: 0, hi: 5 }, &quality, &ratio, 8);
        assert_eq!(outcome.best, cfg(&[5]));
        assert_eq!(outcome.rounds, 1);
        let moves: Vec<_> = outcome
            .trace
            .iter()
            .filter(|r| r.event == TraceEvent::Move)
            .collect();
        assert_eq!(moves.len(), 1);
        assert_eq!(moves[0].config, cfg(&[5]));
    }

    #[test]
    fn trace_serialises_to_jsonl() {
        let outcome = backward_select(
            &cfg(&[1]),
            &Bucket { lo: 0, hi: 3 },
            &|c: &PositionConfig| c.positions().iter().sum::<usize>() as f64,
            &|_: &PositionConfig| 1.0,
            4,
        );
        let jsonl = trace_to_jsonl(&outcome.trace);
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), outcome.trace.len());
        for line in lines {
            let parsed: TraceRecord = serde_json::from_str(line).unwrap();
            assert_eq!(parsed.schema_version, SCHEMA_VERSION);
        }
    }
}
