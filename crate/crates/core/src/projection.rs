//! Scoreboard of scheduled queries and per-iteration KV/batch projections.
//!
//! Iterations are numbered globally. A query scheduled at iteration `s`
//! with predicted length `r` takes part in iterations `s..s + r`, and during
//! iteration `j` holds `ceil((j - s + prompt) / N)` KV blocks.
//!
//! Projections are relative to the scoreboard's current iteration `k`, the
//! next iteration to run: offset `d = 1` is iteration `k`, offset `d` is
//! iteration `k + d - 1`, and a query finishing after iteration `s + r - 1`
//! has completion offset `l = s + r - k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tokens per KV block.
pub const DEFAULT_TOKENS_PER_BLOCK: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreboardEntry {
    pub query_id: u64,
    /// Iteration at which the query was scheduled.
    pub sched_iter: u64,
    pub prompt_len: u32,
    /// Predicted generation length, conservative margin included.
    pub pred_gen: u32,
    /// Scheduled knowing its own deadline is unreachable; ignored by E2E checks.
    pub lost: bool,
}

impl ScoreboardEntry {
    /// Iteration after the last one this query is projected to run.
    pub fn end_iter(&self) -> u64 {
        self.sched_iter + self.pred_gen as u64
    }
}

/// KV blocks held by `entry` during absolute iteration `j`.
pub fn per_query_kv(entry: &ScoreboardEntry, j: u64, tokens_per_block: u32) -> u32 {
    assert!(tokens_per_block >= 1, "tokens per block must be >= 1");
    if j < entry.sched_iter || j >= entry.end_iter() {
        return 0;
    }
    let tokens = j - entry.sched_iter + entry.prompt_len as u64;
    tokens.div_ceil(tokens_per_block as u64) as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scoreboard {
    entries: BTreeMap<u64, ScoreboardEntry>,
    current_iter: u64,
    tokens_per_block: u32,
}

impl Scoreboard {
    pub fn new(tokens_per_block: u32) -> Result<Self> {
        if tokens_per_block == 0 {
            return Err(Error::InvalidArgument(
                "tokens per block must be >= 1".into(),
            ));
        }
        Ok(Self {
            entries: BTreeMap::new(),
            current_iter: 0,
            tokens_per_block,
        })
    }

    /// Scoreboard starting at iteration `k` (mostly for tests).
    pub fn at_iteration(tokens_per_block: u32, k: u64) -> Result<Self> {
        let mut sb = Self::new(tokens_per_block)?;
        sb.current_iter = k;
        Ok(sb)
    }

    pub fn current_iter(&self) -> u64 {
        self.current_iter
    }

    pub fn tokens_per_block(&self) -> u32 {
        self.tokens_per_block
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&ScoreboardEntry> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ScoreboardEntry> {
        self.entries.values()
    }

    pub fn has_lost(&self) -> bool {
        self.entries.values().any(|e| e.lost)
    }

    /// An entry for a query scheduled right now.
    pub fn candidate(&self, query_id: u64, prompt_len: u32, pred_gen: u32) -> ScoreboardEntry {
        ScoreboardEntry {
            query_id,
            sched_iter: self.current_iter,
            prompt_len: prompt_len.max(1),
            pred_gen: pred_gen.max(1),
            lost: false,
        }
    }

    pub fn insert(&mut self, entry: ScoreboardEntry) -> Result<()> {
        if self.entries.contains_key(&entry.query_id) {
            return Err(Error::DuplicateQuery(entry.query_id));
        }
        self.entries.insert(entry.query_id, entry);
        Ok(())
    }

    /// Excludes a query from deadline checks from now on.
    pub fn mark_lost(&mut self, id: u64) -> Result<()> {
        let e = self.entries.get_mut(&id).ok_or(Error::UnknownQuery(id))?;
        e.lost = true;
        Ok(())
    }

    pub fn remove(&mut self, id: u64) -> Result<ScoreboardEntry> {
        self.entries.remove(&id).ok_or(Error::UnknownQuery(id))
    }

    pub fn project(&self) -> ProjectionSet {
        project_entries(
            self.entries.values(),
            self.current_iter,
            self.tokens_per_block,
        )
    }

    /// Projection as if `candidate` were appended; the scoreboard is untouched.
    pub fn virtual_project(&self, candidate: &ScoreboardEntry) -> Result<ProjectionSet> {
        if self.entries.contains_key(&candidate.query_id) {
            return Err(Error::DuplicateQuery(candidate.query_id));
        }
        Ok(project_entries(
            self.entries.values().chain(std::iter::once(candidate)),
            self.current_iter,
            self.tokens_per_block,
        ))
    }

    /// Completes one iteration: `k += 1` and the finished queries are struck.
    pub fn advance(&mut self, completed: &[u64]) -> Result<()> {
        if let Some(&id) = completed.iter().find(|id| !self.entries.contains_key(id)) {
            return Err(Error::UnknownQuery(id));
        }
        for id in completed {
            self.entries.remove(id);
        }
        self.current_iter += 1;
        Ok(())
    }

    /// Ids whose projected window has ended although they are still running.
    pub fn overdue(&self) -> Vec<u64> {
        self.entries
            .values()
            .filter(|e| e.end_iter() <= self.current_iter)
            .map(|e| e.query_id)
            .collect()
    }

    /// Extends the prediction of a query that outlived it to the context
    /// limit `max_tokens - prompt_len`, and at least one more iteration.
    pub fn on_overrun(&mut self, id: u64, max_tokens: u32) -> Result<Overrun> {
        let k = self.current_iter;
        let e = self.entries.get_mut(&id).ok_or(Error::UnknownQuery(id))?;
        let generated = k.saturating_sub(e.sched_iter);
        let limit = max_tokens.saturating_sub(e.prompt_len).max(1);
        if e.pred_gen >= limit {
            return Ok(Overrun {
                entry: *e,
                at_limit: true,
            });
        }
        e.pred_gen = (limit as u64).max(generated + 1).min(u32::MAX as u64) as u32;
        Ok(Overrun {
            entry: *e,
            at_limit: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overrun {
    pub entry: ScoreboardEntry,
    /// The prediction already sat at the context limit and was left alone.
    pub at_limit: bool,
}

/// Projected batch size and KV blocks for offsets `1..=n`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProjectionSet {
    batch: Vec<u32>,
    kv: Vec<u32>,
}

impl ProjectionSet {
    pub fn from_vectors(batch: Vec<u32>, kv: Vec<u32>) -> Self {
        assert_eq!(batch.len(), kv.len());
        Self { batch, kv }
    }

    /// Horizon: offset of the last projected iteration.
    pub fn n(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    /// Batch sizes; element `d - 1` is offset `d`.
    pub fn batch(&self) -> &[u32] {
        &self.batch
    }

    pub fn kv(&self) -> &[u32] {
        &self.kv
    }

    pub fn max_kv(&self) -> u32 {
        self.kv.iter().copied().max().unwrap_or(0)
    }

    /// `d,batch,kv` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("d,batch,kv\n");
        for (i, (b, kv)) in self.batch.iter().zip(&self.kv).enumerate() {
            s.push_str(&format!("{},{b},{kv}\n", i + 1));
        }
        s
    }
}

/// Sums per-query windows with difference arrays: `O(n + sum(r / N))`.
pub fn project_entries<'a>(
    entries: impl Iterator<Item = &'a ScoreboardEntry> + Clone,
    k: u64,
    tokens_per_block: u32,
) -> ProjectionSet {
    let n = entries
        .clone()
        .map(|e| e.end_iter().saturating_sub(k))
        .max()
        .unwrap_or(0) as usize;
    let mut db = vec![0i64; n + 2];
    let mut dkv = vec![0i64; n + 2];
    let block = tokens_per_block as u64;
    for e in entries {
        if e.end_iter() <= k {
            continue;
        }
        let first = e.sched_iter.max(k);
        let last = e.end_iter() - 1;
        let d0 = (first - k + 1) as usize;
        let d1 = (last - k + 1) as usize;
        db[d0] += 1;
        db[d1 + 1] -= 1;
        // tokens held at offset d: t(d) = base + d
        let base = e.prompt_len as u64 + k - 1 - e.sched_iter;
        let t0 = base + d0 as u64;
        let t1 = base + d1 as u64;
        let b0 = t0.div_ceil(block);
        dkv[d0] += b0 as i64;
        dkv[d1 + 1] -= t1.div_ceil(block) as i64;
        // a new block starts at t = m * N + 1
        let mut m = b0;
        while m * block < t1 {
            let d = (m * block + 1 - base) as usize;
            dkv[d] += 1;
            m += 1;
        }
    }
    let mut batch = Vec::with_capacity(n);
    let mut kv = Vec::with_capacity(n);
    let (mut b, mut c) = (0i64, 0i64);
    for d in 1..=n {
        b += db[d];
        c += dkv[d];
        batch.push(b as u32);
        kv.push(c as u32);
    }
    ProjectionSet { batch, kv }
}
