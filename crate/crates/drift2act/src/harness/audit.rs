//! Uniform audit set over the certificate window.
//!
//! The window `W_t` holds indices whose labels have arrived. The audit set `A`
//! is kept a uniformly random subset of the auditable population `W_t \ E`,
//! where `E` collects indices that were picked for audit after the budget ran
//! out. New indices enter by reservoir replacement, so `|A|` is stable while
//! the budget lasts; top-up draws are uniform over the unaudited population.
//! Evicted members keep their labels.

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditPool {
    window_len: u64,
    /// Current window `[lo, hi]`; empty while `hi == 0`.
    lo: u64,
    hi: u64,
    members: Vec<u64>,
    in_audit: Vec<bool>,
    excluded: Vec<bool>,
    excluded_count: u64,
}

impl AuditPool {
    /// Pool for steps `1..=horizon` and windows of `window_len` indices.
    #[must_use]
    pub fn new(window_len: u64, horizon: u64) -> Self {
        let size = horizon as usize + 1;
        Self {
            window_len: window_len.max(1),
            lo: 1,
            hi: 0,
            members: Vec::new(),
            in_audit: vec![false; size],
            excluded: vec![false; size],
            excluded_count: 0,
        }
    }

    /// Inclusive window bounds, or `None` while it is empty.
    #[must_use]
    pub fn window(&self) -> Option<(u64, u64)> {
        (self.hi >= self.lo && self.hi > 0).then_some((self.lo, self.hi))
    }

    #[must_use]
    pub fn members(&self) -> &[u64] {
        &self.members
    }

    /// Window members still eligible for audit.
    #[must_use]
    pub fn population(&self) -> u64 {
        self.window().map_or(0, |(lo, hi)| hi - lo + 1 - self.excluded_count)
    }

    #[must_use]
    pub fn excluded(&self) -> u64 {
        self.excluded_count
    }

    /// Slides the window so it ends at `new_hi`; returns labels bought.
    ///
    /// `labeled` is indexed by step and records every purchased label.
    pub fn advance<R: Rng>(&mut self, new_hi: u64, labeled: &mut [bool], budget: u64, rng: &mut R) -> u64 {
        if new_hi == 0 || new_hi <= self.hi {
            return 0;
        }
        let new_lo = (new_hi + 1).saturating_sub(self.window_len).max(1);
        if self.hi > 0 {
            for i in self.lo..new_lo.min(self.hi + 1) {
                self.forget(i);
            }
        }
        let first_new = (self.hi + 1).max(new_lo);
        self.lo = new_lo;
        let mut spent = 0;
        for j in first_new..=new_hi {
            self.hi = j;
            let population = self.population();
            let size = self.members.len() as u64;
            if size == 0 || rng.random_range(0..population) >= size {
                continue;
            }
            let ji = j as usize;
            if !labeled[ji] {
                if spent >= budget {
                    self.excluded[ji] = true;
                    self.excluded_count += 1;
                    continue;
                }
                labeled[ji] = true;
                spent += 1;
            }
            let slot = rng.random_range(0..self.members.len());
            self.in_audit[self.members[slot] as usize] = false;
            self.members[slot] = j;
            self.in_audit[ji] = true;
        }
        self.hi = new_hi;
        spent
    }

    /// Adds up to `k` uniform draws from the unaudited population, stopping
    /// when an unlabeled draw would exceed `budget`; returns labels bought.
    pub fn draw<R: Rng>(&mut self, k: u64, labeled: &mut [bool], budget: u64, rng: &mut R) -> u64 {
        let Some((lo, hi)) = self.window() else { return 0 };
        if k == 0 {
            return 0;
        }
        let mut candidates: Vec<u64> = (lo..=hi)
            .filter(|&i| !self.in_audit[i as usize] && !self.excluded[i as usize])
            .collect();
        let take = (k as usize).min(candidates.len());
        let (chosen, _) = candidates.partial_shuffle(rng, take);
        let mut spent = 0;
        for &j in chosen.iter() {
            let ji = j as usize;
            if !labeled[ji] {
                if spent >= budget {
                    break;
                }
                labeled[ji] = true;
                spent += 1;
            }
            self.in_audit[ji] = true;
            self.members.push(j);
        }
        spent
    }

    fn forget(&mut self, i: u64) {
        let ii = i as usize;
        if self.in_audit[ii] {
            self.in_audit[ii] = false;
            self.members.retain(|&m| m != i);
        }
        if self.excluded[ii] {
            self.excluded[ii] = false;
            self.excluded_count -= 1;
        }
    }
}
