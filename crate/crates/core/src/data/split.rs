//! Identity-disjoint train/test partitioning.
//!
//! Identities are shuffled with a seeded PRNG and the first `ceil(ratio * N)`
//! go to training. A morph is kept only when both constituents fall on the
//! same side; straddling morphs are discarded with a reason, and identities
//! left without any retained morph are dropped from the manifest.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::morph::IdentityPair;
use crate::error::{validation, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discarded {
    pub morph_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub train_morphs: Vec<String>,
    pub test_morphs: Vec<String>,
    pub discarded: Vec<Discarded>,
    pub seed: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Train,
    Test,
}

impl SplitManifest {
    pub fn side_of(&self, morph_id: &str) -> Option<Side> {
        if self.train_morphs.iter().any(|m| m == morph_id) {
            Some(Side::Train)
        } else if self.test_morphs.iter().any(|m| m == morph_id) {
            Some(Side::Test)
        } else {
            None
        }
    }

    /// Checks every manifest invariant against the corpus it was built from,
    /// returning one message per violation.
    pub fn violations<R: IdentityPair>(&self, corpus: &[R]) -> Vec<String> {
        let mut out = Vec::new();
        for id in self.train_ids.intersection(&self.test_ids) {
            out.push(format!("identity {id} on both sides"));
        }
        let lookup = |id: &str| corpus.iter().find(|r| r.morph_id() == id);
        let mut seen = HashSet::new();
        let mut used = BTreeSet::new();
        for (list, ids, name) in [
            (&self.train_morphs, &self.train_ids, "train"),
            (&self.test_morphs, &self.test_ids, "test"),
        ] {
            for m in list {
                if !seen.insert(m.as_str()) {
                    out.push(format!("morph {m} listed twice"));
                }
                match lookup(m) {
                    None => out.push(format!("{name} morph {m} not in corpus")),
                    Some(r) => {
                        for id in [r.id1(), r.id2()] {
                            if !ids.contains(id) {
                                out.push(format!("{name} morph {m} uses {id} outside {name} ids"));
                            }
                            used.insert(id.to_string());
                        }
                    }
                }
            }
        }
        for d in &self.discarded {
            if !seen.insert(d.morph_id.as_str()) {
                out.push(format!("morph {} listed twice", d.morph_id));
            }
        }
        if seen.len() != corpus.len() {
            out.push(format!("accounted for {} of {} morphs", seen.len(), corpus.len()));
        }
        for id in self.train_ids.iter().chain(&self.test_ids) {
            if !used.contains(id) {
                out.push(format!("identity {id} has no retained morph"));
            }
        }
        out
    }
}

/// Seeded identity partition: returns the training identities.
pub fn partition_identities(identities: &BTreeSet<String>, ratio: f64, seed: u64) -> Result<BTreeSet<String>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    let mut ids: Vec<&String> = identities.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((ratio * ids.len() as f64).ceil() as usize).min(ids.len());
    Ok(ids[..n_train].iter().map(|s| (*s).clone()).collect())
}

pub fn split_identity_disjoint<R: IdentityPair>(
    corpus: &[R],
    identities: &BTreeSet<String>,
    ratio: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let train = partition_identities(identities, ratio, seed)?;
    let mut manifest = assign_with_partition(corpus, identities, &train)?;
    manifest.seed = seed;
    manifest.ratio = ratio;
    Ok(manifest)
}

/// Applies the discard rule for an explicit training-identity set; every
/// other identity in `identities` is on the test side.
pub fn assign_with_partition<R: IdentityPair>(
    corpus: &[R],
    identities: &BTreeSet<String>,
    train: &BTreeSet<String>,
) -> Result<SplitManifest> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for r in corpus {
        if !seen.insert(r.morph_id()) {
            return Err(validation(format!("duplicate morph id {}", r.morph_id())));
        }
        if r.id1() == r.id2() {
            return Err(validation(format!("morph {} uses identity {} twice", r.morph_id(), r.id1())));
        }
        for id in [r.id1(), r.id2()] {
            if !identities.contains(id) {
                return Err(validation(format!("morph {} references unknown identity {id}", r.morph_id())));
            }
        }
    }

    let mut m = SplitManifest {
        train_ids: BTreeSet::new(),
        test_ids: BTreeSet::new(),
        train_morphs: Vec::new(),
        test_morphs: Vec::new(),
        discarded: Vec::new(),
        seed: 0,
        ratio: train.len() as f64 / identities.len() as f64,
    };
    for r in corpus {
        let (a, b) = (train.contains(r.id1()), train.contains(r.id2()));
        match (a, b) {
            (true, true) => {
                m.train_morphs.push(r.morph_id().to_string());
                m.train_ids.extend([r.id1().to_string(), r.id2().to_string()]);
            }
            (false, false) => {
                m.test_morphs.push(r.morph_id().to_string());
                m.test_ids.extend([r.id1().to_string(), r.id2().to_string()]);
            }
            _ => {
                let (tr, te) = if a { (r.id1(), r.id2()) } else { (r.id2(), r.id1()) };
                m.discarded.push(Discarded {
                    morph_id: r.morph_id().to_string(),
                    reason: format!("cross-partition: {tr} in train, {te} in test"),
                });
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct P(&'static str, &'static str, &'static str);
    impl IdentityPair for P {
        fn morph_id(&self) -> &str {
            self.0
        }
        fn id1(&self) -> &str {
            self.1
        }
        fn id2(&self) -> &str {
            self.2
        }
    }

    fn ids(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn forced_partition_applies_discard_rule() {
        let corpus = [P("AB", "A", "B"), P("CD", "C", "D"), P("AC", "A", "C")];
        let m = assign_with_partition(&corpus, &ids(&["A", "B", "C", "D"]), &ids(&["A", "B"])).unwrap();
        assert_eq!(m.train_morphs, vec!["AB"]);
        assert_eq!(m.test_morphs, vec!["CD"]);
        assert_eq!(m.discarded.len(), 1);
        assert_eq!(m.discarded[0].morph_id, "AC");
        assert!(m.violations(&corpus).is_empty());
    }

    #[test]
    fn two_identities_half_split_discards_the_only_morph() {
        let corpus = [P("AB", "A", "B")];
        let m = split_identity_disjoint(&corpus, &ids(&["A", "B"]), 0.5, 3).unwrap();
        // ceil(0.5 * 2) = 1 identity per side, so AB must straddle.
        assert!(m.train_morphs.is_empty() && m.test_morphs.is_empty());
        assert_eq!(m.discarded[0].morph_id, "AB");
        assert!(m.train_ids.is_empty() && m.test_ids.is_empty());
        assert!(m.violations(&corpus).is_empty());
    }

    #[test]
    fn empty_corpus_and_bad_ratio_fail() {
        let empty: [P; 0] = [];
        assert!(matches!(split_identity_disjoint(&empty, &ids(&["A"]), 0.6, 0), Err(Error::EmptyCorpus)));
        let corpus = [P("AB", "A", "B")];
        for r in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(split_identity_disjoint(&corpus, &ids(&["A", "B"]), r, 0), Err(Error::InvalidRatio(_))));
        }
    }

    #[test]
    fn unknown_identity_is_rejected() {
        let corpus = [P("AZ", "A", "Z")];
        assert!(split_identity_disjoint(&corpus, &ids(&["A", "B"]), 0.5, 0).is_err());
    }

    #[test]
    fn partition_is_deterministic_and_sized() {
        let all: BTreeSet<String> = (0..10).map(|i| format!("id{i}")).collect();
        let a = partition_identities(&all, 0.6, 42).unwrap();
        assert_eq!(a, partition_identities(&all, 0.6, 42).unwrap());
        assert_eq!(a.len(), 6);
    }
}
