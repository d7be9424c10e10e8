//! Byte-accounted KV-cache store with prefix reuse and score-based eviction.
//!
//! Each lineage (conversation or document) normally owns one entry that is
//! extended in place as the context grows. Eviction always removes the
//! entry with the lowest score, ties going to the older entry:
//!
//! - FIFO: `-(now - created_at)`
//! - LRU: `-(now - last_access)`
//! - LCS (least carbon savings): `(reused tokens x reuse count) / (size x age)`,
//!   with task-specific numerators for multi-turn chat and document QA.
//!
//! FIFO and LRU order never changes with the clock, so they live in an
//! ordered index. LCS scores of never-hit entries are exactly zero and are
//! indexed the same way. Entries with hits are kept sorted by
//! `numerator / size`; since every age is at most the oldest entry's age,
//! a scan in that order can stop as soon as the bound exceeds the best
//! score found.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::carbon::Terabytes;
use crate::workload::{Request, TaskKind, Truncation};

/// Lower bound on entry age, in seconds, so a just-inserted entry has a finite score.
pub const MIN_AGE_S: f64 = 1.0;
const BYTES_PER_GB: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("entry of {size} bytes does not fit in a cache of {capacity} bytes")]
    EntryTooLarge { size: u64, capacity: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Policy {
    Fifo,
    Lru,
    Lcs,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Fifo, Policy::Lru, Policy::Lcs];
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::Fifo => "FIFO",
            Policy::Lru => "LRU",
            Policy::Lcs => "LCS",
        })
    }
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "FIFO" => Ok(Policy::Fifo),
            "LRU" => Ok(Policy::Lru),
            "LCS" => Ok(Policy::Lcs),
            _ => Err(format!("unknown policy `{s}` (expected FIFO, LRU or LCS)")),
        }
    }
}

/// Which LCS numerator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// reused tokens x hits
    #[default]
    Generic,
    /// current turn x reused tokens
    MultiTurn,
    /// hits x reused document length
    DocComp,
}

impl From<TaskKind> for ScoreKind {
    fn from(t: TaskKind) -> Self {
        match t {
            TaskKind::MultiTurn => ScoreKind::MultiTurn,
            TaskKind::DocComp => ScoreKind::DocComp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub lineage_id: u64,
    pub prefix_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    /// Bytes.
    pub size: u64,
    pub tokens: u32,
    pub created_at: f64,
    pub last_access: f64,
    pub hit_count: u64,
    pub accumulated_hit_tokens: u64,
    pub cur_turn: u32,
    pub accumulated_doc_len: u64,
    /// Context tokens carried across the lineage's turns, whether served
    /// from cache or recomputed.
    pub accumulated_context_tokens: u64,
    #[serde(skip)]
    seq: u64,
}

impl CacheEntry {
    pub fn age(&self, now: f64) -> f64 {
        (now - self.created_at).max(MIN_AGE_S)
    }
}

/// Eviction score; lower is evicted first.
pub fn score(entry: &CacheEntry, now: f64, policy: Policy, kind: ScoreKind) -> f64 {
    match policy {
        Policy::Fifo => -(now - entry.created_at),
        Policy::Lru => -(now - entry.last_access),
        Policy::Lcs => {
            let numerator = lcs_numerator(entry, kind);
            if numerator == 0.0 {
                return 0.0;
            }
            numerator / ((entry.size as f64 / BYTES_PER_GB) * entry.age(now))
        }
    }
}

fn lcs_numerator(entry: &CacheEntry, kind: ScoreKind) -> f64 {
    match kind {
        ScoreKind::Generic => entry.accumulated_hit_tokens as f64 * entry.hit_count as f64,
        ScoreKind::MultiTurn => entry.cur_turn as f64 * entry.accumulated_context_tokens as f64,
        ScoreKind::DocComp => entry.hit_count as f64 * entry.accumulated_doc_len as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub hit_tokens: u64,
    pub input_tokens: u64,
    pub insertions: u64,
    pub rejected: u64,
    pub evictions: u64,
}

impl CacheStats {
    pub fn record(&mut self, input_tokens: u64, hit_tokens: u64) {
        self.lookups += 1;
        self.input_tokens += input_tokens;
        self.hit_tokens += hit_tokens;
        if hit_tokens > 0 {
            self.hits += 1;
        }
    }
}

/// Reused tokens over input tokens; `None` before any input is seen.
pub fn token_hit_rate(stats: &CacheStats) -> Option<f64> {
    (stats.input_tokens > 0).then(|| stats.hit_tokens as f64 / stats.input_tokens as f64)
}

/// JSON snapshot of a cache, entries sorted by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheDump {
    pub policy: Policy,
    pub score_kind: ScoreKind,
    pub capacity: u64,
    pub used: u64,
    pub entries: Vec<CacheEntry>,
    pub stats: CacheStats,
}

type OrderKey = (OrderedFloat<f64>, OrderedFloat<f64>, u64);

#[derive(Debug, Clone)]
pub struct CacheState {
    capacity: u64,
    used: u64,
    bytes_per_token: u64,
    context_window: u32,
    policy: Policy,
    score_kind: ScoreKind,
    entries: HashMap<u64, CacheEntry>,
    lineages: HashMap<u64, BTreeMap<u32, u64>>,
    order: BTreeSet<OrderKey>,
    /// LCS entries with a positive score: (numerator / size, seq).
    by_density: BTreeSet<(OrderedFloat<f64>, u64)>,
    /// LCS entries with a positive score: (created_at, seq).
    by_created: BTreeSet<(OrderedFloat<f64>, u64)>,
    next_seq: u64,
    stats: CacheStats,
}

impl CacheState {
    pub fn new(capacity_bytes: u64, bytes_per_token: u64, context_window: u32, policy: Policy, score_kind: ScoreKind) -> Self {
        assert!(bytes_per_token > 0, "bytes_per_token must be positive");
        Self {
            capacity: capacity_bytes,
            used: 0,
            bytes_per_token,
            context_window,
            policy,
            score_kind,
            entries: HashMap::new(),
            lineages: HashMap::new(),
            order: BTreeSet::new(),
            by_density: BTreeSet::new(),
            by_created: BTreeSet::new(),
            next_seq: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn with_capacity_tb(capacity_tb: u32, bytes_per_token: u64, context_window: u32, policy: Policy, kind: ScoreKind) -> Self {
        Self::new(
            Terabytes(capacity_tb as f64).to_bytes(),
            bytes_per_token,
            context_window,
            policy,
            kind,
        )
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = CacheStats::default();
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    pub fn get(&self, key: CacheKey) -> Option<&CacheEntry> {
        let seq = self.lineages.get(&key.lineage_id)?.get(&key.prefix_tokens)?;
        self.entries.get(seq)
    }

    pub fn score_of(&self, entry: &CacheEntry, now: f64) -> f64 {
        score(entry, now, self.policy, self.score_kind)
    }

    pub fn dump(&self) -> CacheDump {
        let mut entries: Vec<CacheEntry> = self.entries.values().cloned().collect();
        entries.sort_by_key(|e| e.key);
        CacheDump {
            policy: self.policy,
            score_kind: self.score_kind,
            capacity: self.capacity,
            used: self.used,
            entries,
            stats: self.stats,
        }
    }

    fn order_key(&self, e: &CacheEntry) -> Option<OrderKey> {
        match self.policy {
            Policy::Fifo => Some((OrderedFloat(e.created_at), OrderedFloat(e.created_at), e.seq)),
            Policy::Lru => Some((OrderedFloat(e.last_access), OrderedFloat(e.created_at), e.seq)),
            Policy::Lcs => (lcs_numerator(e, self.score_kind) == 0.0).then_some((OrderedFloat(0.0), OrderedFloat(e.created_at), e.seq)),
        }
    }

    fn density(&self, e: &CacheEntry) -> Option<OrderedFloat<f64>> {
        if self.policy != Policy::Lcs || lcs_numerator(e, self.score_kind) == 0.0 {
            return None;
        }
        // Score at age 1 s.
        Some(OrderedFloat(score(e, e.created_at + MIN_AGE_S, Policy::Lcs, self.score_kind)))
    }

    fn unindex(&mut self, seq: u64) {
        let Some(e) = self.entries.get(&seq) else { return };
        if let Some(k) = self.order_key(e) {
            self.order.remove(&k);
        }
        if let Some(d) = self.density(e) {
            let c = OrderedFloat(e.created_at);
            self.by_density.remove(&(d, seq));
            self.by_created.remove(&(c, seq));
        }
    }

    fn reindex(&mut self, seq: u64) {
        let Some(e) = self.entries.get(&seq) else { return };
        if let Some(k) = self.order_key(e) {
            self.order.insert(k);
        }
        if let Some(d) = self.density(e) {
            let c = OrderedFloat(e.created_at);
            self.by_density.insert((d, seq));
            self.by_created.insert((c, seq));
        }
    }

    /// Longest cached prefix of this request's context, in tokens.
    ///
    /// A hit refreshes the entry's recency and reuse counters; a miss
    /// leaves entries untouched. Both are counted in [`CacheStats`].
    pub fn lookup(&mut self, request: &Request, now: f64) -> u64 {
        let hit = self.find_prefix(request);
        let tokens = match hit {
            Some((seq, tokens)) => {
                self.unindex(seq);
                let e = self.entries.get_mut(&seq).expect("indexed entry");
                e.last_access = now;
                e.hit_count += 1;
                e.accumulated_hit_tokens += tokens as u64;
                e.cur_turn = request.turn_index;
                if request.kind == TaskKind::DocComp {
                    e.accumulated_doc_len += tokens as u64;
                }
                self.reindex(seq);
                tokens as u64
            }
            None => 0,
        };
        self.stats.record(request.input_tokens(), tokens);
        tokens
    }

    fn find_prefix(&self, request: &Request) -> Option<(u64, u32)> {
        let context = request.context_tokens;
        if context == 0 {
            return None;
        }
        let lineage = self.lineages.get(&request.lineage_id)?;
        match request.truncated {
            // The kept tail no longer starts at the cached prefix.
            Some(Truncation::Suffix) => None,
            Some(Truncation::Prefix) => lineage.iter().next_back().map(|(&t, &seq)| (seq, t.min(context))),
            None => lineage.range(..=context).next_back().map(|(&t, &seq)| (seq, t)),
        }
    }

    /// Store (or extend) the lineage's entry to cover everything this request
    /// leaves reusable, then evict lowest-score entries until the cache fits.
    /// The entry being written is never its own victim.
    pub fn insert(&mut self, request: &Request, now: f64) -> Result<Vec<CacheKey>, CacheError> {
        let tokens = request.cacheable_tokens(self.context_window);
        if tokens == 0 {
            return Ok(Vec::new());
        }
        let size = tokens as u64 * self.bytes_per_token;
        if size > self.capacity {
            self.stats.rejected += 1;
            return Err(CacheError::EntryTooLarge { size, capacity: self.capacity });
        }
        let lineage_id = request.lineage_id;
        let existing = self
            .lineages
            .get(&lineage_id)
            .and_then(|m| m.iter().next_back().map(|(&t, &s)| (t, s)));

        let seq = match existing {
            Some((old_tokens, seq)) if old_tokens == tokens => {
                self.unindex(seq);
                self.entries.get_mut(&seq).expect("indexed entry").last_access = now;
                self.reindex(seq);
                return Ok(Vec::new());
            }
            Some((old_tokens, seq)) => {
                if self.lineages[&lineage_id].contains_key(&tokens) {
                    // Another entry of this lineage already has exactly this length; drop it.
                    let dup = self.lineages[&lineage_id][&tokens];
                    self.remove(dup);
                }
                self.unindex(seq);
                let e = self.entries.get_mut(&seq).expect("indexed entry");
                self.used = self.used - e.size + size;
                e.size = size;
                e.tokens = tokens;
                e.key.prefix_tokens = tokens;
                e.last_access = now;
                e.cur_turn = e.cur_turn.max(request.turn_index);
                e.accumulated_context_tokens += request.context_tokens as u64;
                let m = self.lineages.get_mut(&lineage_id).expect("lineage");
                m.remove(&old_tokens);
                m.insert(tokens, seq);
                self.reindex(seq);
                seq
            }
            None => {
                let seq = self.next_seq;
                self.next_seq += 1;
                let entry = CacheEntry {
                    key: CacheKey { lineage_id, prefix_tokens: tokens },
                    size,
                    tokens,
                    created_at: now,
                    last_access: now,
                    hit_count: 0,
                    accumulated_hit_tokens: 0,
                    cur_turn: request.turn_index,
                    accumulated_doc_len: 0,
                    accumulated_context_tokens: request.context_tokens as u64,
                    seq,
                };
                self.used += size;
                self.entries.insert(seq, entry);
                self.lineages.entry(lineage_id).or_default().insert(tokens, seq);
                self.reindex(seq);
                seq
            }
        };
        self.stats.insertions += 1;
        Ok(self.evict_to_fit(now, Some(seq)))
    }

    /// Insert a raw entry of `tokens` tokens for `lineage_id` without touching
    /// other entries of that lineage. Fails if it would overflow the cache.
    pub fn put(&mut self, lineage_id: u64, tokens: u32, now: f64) -> Result<CacheKey, CacheError> {
        let size = tokens as u64 * self.bytes_per_token;
        if self.used + size > self.capacity {
            return Err(CacheError::EntryTooLarge { size, capacity: self.capacity - self.used });
        }
        if let Some(&old) = self.lineages.get(&lineage_id).and_then(|m| m.get(&tokens)) {
            self.remove(old);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let key = CacheKey { lineage_id, prefix_tokens: tokens };
        self.entries.insert(
            seq,
            CacheEntry {
                key,
                size,
                tokens,
                created_at: now,
                last_access: now,
                hit_count: 0,
                accumulated_hit_tokens: 0,
                cur_turn: 1,
                accumulated_doc_len: 0,
                accumulated_context_tokens: 0,
                seq,
            },
        );
        self.used += size;
        self.lineages.entry(lineage_id).or_default().insert(tokens, seq);
        self.reindex(seq);
        Ok(key)
    }

    fn remove(&mut self, seq: u64) -> Option<CacheEntry> {
        self.unindex(seq);
        let e = self.entries.remove(&seq)?;
        self.used -= e.size;
        if let Some(m) = self.lineages.get_mut(&e.key.lineage_id) {
            m.remove(&e.key.prefix_tokens);
            if m.is_empty() {
                self.lineages.remove(&e.key.lineage_id);
            }
        }
        Some(e)
    }

    /// The entry that would be evicted next at time `now`.
    pub fn victim(&self, now: f64, protect: Option<u64>) -> Option<&CacheEntry> {
        let indexed = self.order.iter().find(|k| Some(k.2) != protect).map(|k| k.2);
        if let Some(seq) = indexed {
            return self.entries.get(&seq);
        }
        if self.policy != Policy::Lcs {
            return None;
        }
        let oldest = self.by_created.first()?.0 .0;
        let max_age = (now - oldest).max(MIN_AGE_S);
        let mut best: Option<(&CacheEntry, f64)> = None;
        for &(d, seq) in &self.by_density {
            if let Some((_, s)) = best {
                // Lower bound on this and every later entry, with slack for rounding.
                if d.0 / max_age * (1.0 - 1e-12) > s {
                    break;
                }
            }
            if Some(seq) == protect {
                continue;
            }
            let e = &self.entries[&seq];
            let s = self.score_of(e, now);
            let better = match best {
                None => true,
                Some((b, bs)) => s
                    .total_cmp(&bs)
                    .then(e.created_at.total_cmp(&b.created_at))
                    .then(e.seq.cmp(&b.seq))
                    .is_lt(),
            };
            if better {
                best = Some((e, s));
            }
        }
        best.map(|(e, _)| e)
    }

    fn evict_to_fit(&mut self, now: f64, protect: Option<u64>) -> Vec<CacheKey> {
        let mut evicted = Vec::new();
        while self.used > self.capacity {
            let Some(seq) = self.victim(now, protect).map(|e| e.seq) else { break };
            let e = self.remove(seq).expect("victim exists");
            self.stats.evictions += 1;
            evicted.push(e.key);
        }
        evicted
    }

    /// Change capacity to a whole number of TB, evicting lowest-score entries if shrinking.
    pub fn resize(&mut self, new_capacity_tb: u32, now: f64) -> Vec<CacheKey> {
        self.resize_bytes(Terabytes(new_capacity_tb as f64).to_bytes(), now)
    }

    pub fn resize_bytes(&mut self, new_capacity: u64, now: f64) -> Vec<CacheKey> {
        self.capacity = new_capacity;
        self.evict_to_fit(now, None)
    }
}

/// Replay a request stream through a fresh cache and return the counters
/// gathered after the first `warmup` requests.
pub fn replay(
    requests: &[Request],
    capacity_bytes: u64,
    bytes_per_token: u64,
    context_window: u32,
    policy: Policy,
    kind: ScoreKind,
    warmup: usize,
) -> CacheStats {
    let mut cache = CacheState::new(capacity_bytes, bytes_per_token, context_window, policy, kind);
    for (i, r) in requests.iter().enumerate() {
        if i == warmup {
            cache.reset_stats();
        }
        cache.lookup(r, r.arrival);
        let _ = cache.insert(r, r.arrival);
    }
    if warmup >= requests.len() {
        cache.reset_stats();
    }
    cache.stats()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BPT: u64 = 1_000;

    fn req(lineage: u64, turn: u32, context: u32, new: u32, out: u32, kind: TaskKind) -> Request {
        Request {
            id: 0,
            arrival: 0.0,
            kind,
            lineage_id: lineage,
            turn_index: turn,
            context_tokens: context,
            new_tokens: new,
            output_tokens: out,
            truncated: None,
        }
    }

    fn doc(lineage: u64, len: u32) -> Request {
        req(lineage, 1, len, 10, 5, TaskKind::DocComp)
    }

    fn cache(capacity_tokens: u64, policy: Policy) -> CacheState {
        CacheState::new(capacity_tokens * BPT, BPT, 8_192, policy, ScoreKind::DocComp)
    }

    fn entry(tokens: u32, hits: u64, acc: u64, size: u64, created: f64) -> CacheEntry {
        CacheEntry {
            key: CacheKey { lineage_id: 0, prefix_tokens: tokens },
            size,
            tokens,
            created_at: created,
            last_access: created,
            hit_count: hits,
            accumulated_hit_tokens: acc,
            cur_turn: 1,
            accumulated_doc_len: acc,
            accumulated_context_tokens: acc,
            seq: 0,
        }
    }

    #[test]
    fn score_examples() {
        // #Token 1000, #Hit 2, Size 2 GB, Age 10 s -> 100
        let e = entry(1000, 2, 1000, 2_000_000_000, 0.0);
        assert_eq!(score(&e, 10.0, Policy::Lcs, ScoreKind::Generic), 100.0);
        let never = entry(1000, 0, 0, 2_000_000_000, 0.0);
        assert_eq!(score(&never, 10.0, Policy::Lcs, ScoreKind::Generic), 0.0);
        assert_eq!(score(&never, 10.0, Policy::Lcs, ScoreKind::DocComp), 0.0);
        // CurTurn 3, #AccuToken 1200, Size 4 GB, Age 100 s -> 9
        let mut m = entry(1200, 1, 1200, 4_000_000_000, 0.0);
        m.cur_turn = 3;
        assert_eq!(score(&m, 100.0, Policy::Lcs, ScoreKind::MultiTurn), 9.0);
        // Age floor
        assert_eq!(score(&e, 0.0, Policy::Lcs, ScoreKind::Generic), 1000.0);
    }

    #[test]
    fn fifo_and_lru_scores_prefer_old() {
        let mut a = entry(1, 0, 0, 1, 0.0);
        let mut b = entry(1, 0, 0, 1, 5.0);
        assert!(score(&a, 10.0, Policy::Fifo, ScoreKind::Generic) < score(&b, 10.0, Policy::Fifo, ScoreKind::Generic));
        a.last_access = 9.0;
        b.last_access = 6.0;
        assert!(score(&b, 10.0, Policy::Lru, ScoreKind::Generic) < score(&a, 10.0, Policy::Lru, ScoreKind::Generic));
    }

    #[test]
    fn lookup_examples() {
        let mut c = cache(10_000, Policy::Lru);
        assert_eq!(c.lookup(&doc(1, 800), 0.0), 0);

        c.put(1, 500, 0.0).unwrap();
        assert_eq!(c.lookup(&doc(1, 800), 1.0), 500);

        let mut c = cache(10_000, Policy::Lru);
        c.put(7, 300, 0.0).unwrap();
        c.put(7, 700, 0.0).unwrap();
        assert_eq!(c.lookup(&doc(7, 650), 1.0), 300);
        let e = c.get(CacheKey { lineage_id: 7, prefix_tokens: 300 }).unwrap();
        assert_eq!((e.hit_count, e.accumulated_hit_tokens, e.last_access), (1, 300, 1.0));
        let long = c.get(CacheKey { lineage_id: 7, prefix_tokens: 700 }).unwrap();
        assert_eq!(long.hit_count, 0);
    }

    #[test]
    fn miss_does_not_mutate() {
        let mut c = cache(10_000, Policy::Lcs);
        c.put(1, 500, 0.0).unwrap();
        let before = c.dump().entries;
        assert_eq!(c.lookup(&doc(1, 400), 3.0), 0);
        assert_eq!(c.lookup(&doc(2, 900), 3.0), 0);
        assert_eq!(c.dump().entries, before);
        assert_eq!(c.stats().lookups, 2);
    }

    #[test]
    fn suffix_truncated_context_misses() {
        let mut c = cache(10_000, Policy::Lru);
        c.put(1, 500, 0.0).unwrap();
        let mut r = doc(1, 800);
        r.truncated = Some(Truncation::Suffix);
        assert_eq!(c.lookup(&r, 1.0), 0);
        r.truncated = Some(Truncation::Prefix);
        assert_eq!(c.lookup(&r, 1.0), 500);
    }

    #[test]
    fn insert_into_empty_cache() {
        let mut c = cache(10_000, Policy::Lru);
        assert!(c.insert(&doc(1, 1000), 0.0).unwrap().is_empty());
        assert_eq!(c.used(), 1000 * BPT);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn lru_evicts_least_recent() {
        let mut c = cache(2_000, Policy::Lru);
        c.insert(&doc(1, 1000), 0.0).unwrap();
        c.insert(&doc(2, 1000), 1.0).unwrap();
        assert_eq!(c.lookup(&doc(1, 1000), 2.0), 1000);
        let evicted = c.insert(&doc(3, 1000), 3.0).unwrap();
        assert_eq!(evicted, vec![CacheKey { lineage_id: 2, prefix_tokens: 1000 }]);
    }

    #[test]
    fn fifo_evicts_oldest_even_if_recently_used() {
        let mut c = cache(2_000, Policy::Fifo);
        c.insert(&doc(1, 1000), 0.0).unwrap();
        c.insert(&doc(2, 1000), 1.0).unwrap();
        c.lookup(&doc(1, 1000), 2.0);
        let evicted = c.insert(&doc(3, 1000), 3.0).unwrap();
        assert_eq!(evicted, vec![CacheKey { lineage_id: 1, prefix_tokens: 1000 }]);
    }

    #[test]
    fn lcs_evicts_lowest_savings() {
        // Two equal-size documents, 1 GB each.
        let bpt = 1_000_000;
        let mut c = CacheState::new(2_000 * bpt, bpt, 8_192, Policy::Lcs, ScoreKind::DocComp);
        c.insert(&doc(1, 1000), 0.0).unwrap();
        c.insert(&doc(2, 1000), 0.0).unwrap();
        // A: 10 hits of 1000 tokens.
        for t in 0..10 {
            c.lookup(&doc(1, 1000), 1.0 + t as f64);
        }
        // B: one hit of 1000 tokens.
        c.lookup(&doc(2, 1000), 20.0);
        let now = 1000.0;
        let a = c.get(CacheKey { lineage_id: 1, prefix_tokens: 1000 }).unwrap();
        let b = c.get(CacheKey { lineage_id: 2, prefix_tokens: 1000 }).unwrap();
        // Hand computation: A = 10 * 10000 / (1 GB * 1000 s) = 100; B = 1 * 1000 / (1 * 1000) = 1.
        assert_eq!(c.score_of(a, now), 100.0);
        assert_eq!(c.score_of(b, now), 1.0);
        let evicted = c.insert(&doc(3, 1000), now).unwrap();
        assert_eq!(evicted, vec![CacheKey { lineage_id: 2, prefix_tokens: 1000 }]);
        assert!(c.get(CacheKey { lineage_id: 3, prefix_tokens: 1000 }).is_some());
    }

    #[test]
    fn oversized_insert_is_rejected() {
        let mut c = cache(500, Policy::Lru);
        let err = c.insert(&doc(1, 1000), 0.0).unwrap_err();
        assert_eq!(err, CacheError::EntryTooLarge { size: 1000 * BPT, capacity: 500 * BPT });
        assert_eq!(c.stats().rejected, 1);
        assert!(c.is_empty());
    }

    #[test]
    fn multiturn_entry_extends_in_place() {
        let mut c = CacheState::new(100_000 * BPT, BPT, 8_192, Policy::Lcs, ScoreKind::MultiTurn);
        let t1 = req(4, 1, 0, 100, 200, TaskKind::MultiTurn);
        assert_eq!(c.lookup(&t1, 0.0), 0);
        c.insert(&t1, 0.0).unwrap();
        let t2 = req(4, 2, 300, 50, 150, TaskKind::MultiTurn);
        assert_eq!(c.lookup(&t2, 10.0), 300);
        c.insert(&t2, 10.0).unwrap();
        assert_eq!(c.len(), 1);
        let e = c.get(CacheKey { lineage_id: 4, prefix_tokens: 500 }).unwrap();
        assert_eq!((e.created_at, e.hit_count, e.accumulated_hit_tokens, e.cur_turn), (0.0, 1, 300, 2));
        assert_eq!(e.accumulated_context_tokens, 300);
        assert_eq!(c.used(), 500 * BPT);
    }

    #[test]
    fn resize_examples() {
        let bpt = 300_000;
        let mut c = CacheState::with_capacity_tb(4, bpt, 8_192, Policy::Lcs, ScoreKind::DocComp);
        for d in 0..100 {
            c.insert(&doc(d, 5000), d as f64).unwrap();
        }
        assert!(c.resize(8, 200.0).is_empty());
        let used = c.used();
        assert!(c.resize_bytes(used, 200.0).is_empty());
        let evicted = c.resize(0, 300.0);
        assert_eq!(evicted.len(), 100);
        assert_eq!(c.used(), 0);
        assert!(c.is_empty());
    }

    #[test]
    fn token_hit_rate_examples() {
        assert_eq!(token_hit_rate(&CacheStats::default()), None);
        let mut s = CacheStats::default();
        s.record(500, 0);
        assert_eq!(token_hit_rate(&s), Some(0.0));
        let mut full = CacheStats::default();
        full.record(800, 800);
        assert_eq!(token_hit_rate(&full), Some(1.0));
        // hits (0, 500, 500) over inputs (500, 600, 700)
        s.record(600, 500);
        s.record(700, 500);
        assert!((token_hit_rate(&s).unwrap() - 1000.0 / 1800.0).abs() < 1e-15);
    }

    #[test]
    fn dump_is_sorted_json() {
        let mut c = cache(10_000, Policy::Lru);
        c.insert(&doc(9, 10), 0.0).unwrap();
        c.insert(&doc(3, 10), 0.0).unwrap();
        let d = c.dump();
        assert_eq!(d.entries[0].key.lineage_id, 3);
        let json = serde_json::to_string(&d).unwrap();
        let back: CacheDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back.used, d.used);
        assert_eq!(back.entries.len(), 2);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Access { lineage: u64, len: u32, dt: f64 },
        Shrink { tokens: u64, dt: f64 },
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (0u64..12, 1u32..400, 0.0f64..5.0).prop_map(|(lineage, len, dt)| Op::Access { lineage, len, dt }),
            1 => (0u64..2_000, 0.0f64..5.0).prop_map(|(tokens, dt)| Op::Shrink { tokens, dt }),
        ]
    }

    fn policy() -> impl Strategy<Value = Policy> {
        prop_oneof![Just(Policy::Fifo), Just(Policy::Lru), Just(Policy::Lcs)]
    }

    proptest! {
        #[test]
        fn occupancy_and_eviction_order(policy in policy(), ops in prop::collection::vec(op(), 1..80)) {
            let mut c = cache(1_500, policy);
            let mut now = 0.0;
            for op in ops {
                match op {
                    Op::Access { lineage, len, dt } => {
                        now += dt;
                        let r = doc(lineage, len);
                        c.lookup(&r, now);
                        let _ = c.insert(&r, now);
                    }
                    Op::Shrink { tokens, dt } => {
                        now += dt;
                        let before: Vec<CacheEntry> = c.entries().cloned().collect();
                        let evicted = c.resize_bytes(tokens * BPT, now);
                        let max_evicted = before
                            .iter()
                            .filter(|e| evicted.contains(&e.key))
                            .map(|e| c.score_of(e, now))
                            .fold(f64::NEG_INFINITY, f64::max);
                        for s in c.entries() {
                            prop_assert!(c.score_of(s, now) >= max_evicted);
                        }
                        c.resize_bytes(1_500 * BPT, now);
                    }
                }
                let sum: u64 = c.entries().map(|e| e.size).sum();
                prop_assert_eq!(c.used(), sum);
                prop_assert!(c.used() <= c.capacity());
                for e in c.entries() {
                    prop_assert_eq!(e.size, e.tokens as u64 * BPT);
                    prop_assert!(e.last_access >= e.created_at);
                }
            }
        }

        #[test]
        fn victim_matches_brute_force_min(policy in policy(), ops in prop::collection::vec((0u64..30, 1u32..300, 0.0f64..3.0, any::<bool>()), 1..60)) {
            let mut c = cache(1_000_000, policy);
            let mut now = 0.0;
            for (lineage, len, dt, touch) in ops {
                now += dt;
                let r = doc(lineage, len);
                if touch { c.lookup(&r, now); }
                let _ = c.insert(&r, now);
            }
            now += 1.0;
            if let Some(v) = c.victim(now, None) {
                let brute = c
                    .entries()
                    .min_by(|a, b| c.score_of(a, now).total_cmp(&c.score_of(b, now))
                        .then(a.created_at.total_cmp(&b.created_at))
                        .then(a.seq.cmp(&b.seq)))
                    .unwrap();
                prop_assert_eq!(v.key, brute.key);
            }
        }
    }

    #[test]
    fn identical_entries_lcs_never_evicts_more_than_lru() {
        for n in 1..20u64 {
            let mut lcs = cache(100_000, Policy::Lcs);
            let mut lru = cache(100_000, Policy::Lru);
            for d in 0..n {
                lcs.insert(&doc(d, 100), 0.0).unwrap();
                lru.insert(&doc(d, 100), 0.0).unwrap();
            }
            let target = (n / 2) * 100 * BPT;
            assert!(lcs.resize_bytes(target, 5.0).len() <= lru.resize_bytes(target, 5.0).len());
        }
    }
}
