use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::IqRecord;
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// How records are divided between pools.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolSplit {
    /// Fraction of each emitter's records held out for testing.
    pub test_fraction: f64,
    /// Number of training records labeled up front (`a`).
    pub initial_labeled: usize,
}

/// Labeled, unlabeled and test pools.
///
/// Training records live in one arena addressed by stable ids; an id is
/// either labeled or unlabeled, never both. Test records are kept apart and
/// are never exposed to selection.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPools {
    records: Vec<IqRecord>,
    labeled: Vec<usize>,
    unlabeled: BTreeSet<usize>,
    test: Vec<IqRecord>,
}

impl DatasetPools {
    /// Builds pools from explicit parts. Records whose id is listed in
    /// `labeled` get their truth exposed; every other record is hidden.
    pub fn from_parts(records: Vec<IqRecord>, labeled: &[usize], test: Vec<IqRecord>) -> Result<Self> {
        let mut pools = Self {
            unlabeled: (0..records.len()).collect(),
            records: records.into_iter().map(IqRecord::unlabeled).collect(),
            labeled: Vec::new(),
            test,
        };
        pools.reveal_label(labeled)?;
        Ok(pools)
    }

    /// Stratified split: per emitter, a test share is held out, then initial
    /// labels are dealt round-robin across emitters.
    pub fn split(records: Vec<IqRecord>, split: &PoolSplit, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&split.test_fraction) {
            return Err(Error::config(format!("test fraction {} outside [0, 1)", split.test_fraction)));
        }
        let mut by_class: BTreeMap<usize, Vec<IqRecord>> = BTreeMap::new();
        for r in records {
            let truth = r
                .emitter_truth
                .ok_or_else(|| Error::config("splitting pools needs ground truth for every record"))?;
            by_class.entry(truth).or_default().push(r);
        }
        let mut rng = stream_rng(seed, stream::SPLIT, 0);
        let mut test = Vec::new();
        let mut train_by_class: Vec<Vec<IqRecord>> = Vec::new();
        for (_, mut group) in by_class {
            group.shuffle(&mut rng);
            let held = (group.len() as f64 * split.test_fraction).round() as usize;
            let rest = group.split_off(held);
            test.extend(group);
            train_by_class.push(rest);
        }
        let train_total: usize = train_by_class.iter().map(Vec::len).sum();
        if split.initial_labeled > train_total {
            return Err(Error::config(format!(
                "initial labeled count {} exceeds {train_total} training records",
                split.initial_labeled
            )));
        }
        // Deal initial labels round-robin so small budgets cover every class.
        let mut picked: Vec<IqRecord> = Vec::with_capacity(split.initial_labeled);
        let mut cursor = vec![0usize; train_by_class.len()];
        'deal: loop {
            let mut progressed = false;
            for (c, group) in train_by_class.iter().enumerate() {
                if picked.len() == split.initial_labeled {
                    break 'deal;
                }
                if cursor[c] < group.len() {
                    picked.push(group[cursor[c]].clone());
                    cursor[c] += 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        let mut arena: Vec<IqRecord> = picked;
        let labeled: Vec<usize> = (0..arena.len()).collect();
        let mut rest: Vec<IqRecord> = train_by_class
            .into_iter()
            .zip(cursor)
            .flat_map(|(g, c)| g.into_iter().skip(c))
            .collect();
        rest.shuffle(&mut rng);
        arena.extend(rest);
        // Shuffle arena ids so labeled records are not a prefix.
        let mut order: Vec<usize> = (0..arena.len()).collect();
        order.shuffle(&mut rng);
        let mut position = vec![0; arena.len()];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        let mut slots: Vec<Option<IqRecord>> = arena.into_iter().map(Some).collect();
        let records: Vec<IqRecord> = order.iter().map(|&old| slots[old].take().expect("permutation")).collect();
        let mut labeled: Vec<usize> = labeled.iter().map(|&old| position[old]).collect();
        labeled.sort_unstable();
        test.iter_mut().for_each(|r| r.label = r.emitter_truth);
        Self::from_parts(records, &labeled, test)
    }

    /// Moves the given arena ids from the unlabeled to the labeled pool,
    /// exposing their ground truth. Nothing changes if any id is invalid.
    pub fn reveal_label(&mut self, ids: &[usize]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &id in ids {
            if !seen.insert(id) {
                return Err(Error::selection(format!("duplicate id {id} in reveal request")));
            }
            if !self.unlabeled.contains(&id) {
                return Err(Error::selection(format!("id {id} is not in the unlabeled pool")));
            }
            if self.records[id].emitter_truth.is_none() {
                return Err(Error::selection(format!("id {id} has no ground truth to reveal")));
            }
        }
        for &id in ids {
            self.unlabeled.remove(&id);
            let r = &mut self.records[id];
            r.label = r.emitter_truth;
            self.labeled.push(id);
        }
        Ok(())
    }

    pub fn record(&self, id: usize) -> &IqRecord {
        &self.records[id]
    }

    /// Ids in the order they were labeled.
    pub fn labeled_ids(&self) -> &[usize] {
        &self.labeled
    }

    /// Unlabeled ids in ascending order.
    pub fn unlabeled_ids(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    pub fn labeled(&self) -> impl Iterator<Item = &IqRecord> {
        self.labeled.iter().map(|&i| &self.records[i])
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &IqRecord> {
        self.unlabeled.iter().map(|&i| &self.records[i])
    }

    pub fn test(&self) -> &[IqRecord] {
        &self.test
    }

    pub fn training_records(&self) -> &[IqRecord] {
        &self.records
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn num_classes(&self) -> usize {
        self.records
            .iter()
            .chain(&self.test)
            .filter_map(|r| r.emitter_truth)
            .max()
            .map_or(0, |m| m + 1)
    }
}
