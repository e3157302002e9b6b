//! Output assignment, genuine/imposter score construction and the
//! replication, fidelity and base-image bias analyses.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::biometric::{distance, similarity, Comparator, Embedding};
use crate::data::image::FaceImage;
use crate::data::morph::MorphRecord;
use crate::data::synthetic::Corpus;
use crate::error::{Error, Result};
use crate::evaluation::metrics::d_prime;
use crate::model::config::Mode;
use crate::scalar::{mean, Scalar};

/// Which output goes with which bona fide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment<T> {
    /// `out2` pairs with `bf1` and `out1` with `bf2`.
    pub swapped: bool,
    /// Both pairings scored the same; the identity pairing is kept.
    pub tie: bool,
    /// `S(bf1, out1) + S(bf2, out2)`.
    pub straight: T,
    /// `S(bf1, out2) + S(bf2, out1)`.
    pub crossed: T,
}

impl<T: Scalar> Assignment<T> {
    /// Orders `(out1, out2)` so the first pairs with `bf1`.
    pub fn order<'a, U>(&self, out1: &'a U, out2: &'a U) -> (&'a U, &'a U) {
        if self.swapped {
            (out2, out1)
        } else {
            (out1, out2)
        }
    }
}

pub fn assign_embeddings<T: Scalar>(
    out1: &Embedding<T>,
    out2: &Embedding<T>,
    bf1: &Embedding<T>,
    bf2: &Embedding<T>,
) -> Result<Assignment<T>> {
    let straight = similarity(bf1, out1)? + similarity(bf2, out2)?;
    let crossed = similarity(bf1, out2)? + similarity(bf2, out1)?;
    Ok(Assignment { swapped: crossed > straight, tie: straight == crossed, straight, crossed })
}

pub fn assign_outputs<T: Scalar>(
    out1: &FaceImage<T>,
    out2: &FaceImage<T>,
    bf1: &FaceImage<T>,
    bf2: &FaceImage<T>,
    comparator: &dyn Comparator<T>,
) -> Result<Assignment<T>> {
    assign_embeddings(&comparator.embed(out1)?, &comparator.embed(out2)?, &comparator.embed(bf1)?, &comparator.embed(bf2)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry<T> {
    pub image_id: String,
    pub identity_id: String,
    pub embedding: Embedding<T>,
}

/// Embedded bona fide gallery that imposters are drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct BonafideDb<T> {
    entries: Vec<DbEntry<T>>,
}

impl<T: Scalar> BonafideDb<T> {
    pub fn new(entries: Vec<DbEntry<T>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Protocol(format!("image {} appears twice in the gallery", e.image_id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn embed<'a>(images: impl IntoIterator<Item = &'a FaceImage<T>>, comparator: &dyn Comparator<T>) -> Result<Self> {
        let entries = images
            .into_iter()
            .map(|img| {
                Ok(DbEntry {
                    image_id: img.image_id.clone(),
                    identity_id: img.identity_id.clone(),
                    embedding: comparator.embed(img)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    /// The bona fides referenced by `morph_ids`.
    pub fn from_corpus(corpus: &Corpus<T>, morph_ids: &[String], comparator: &dyn Comparator<T>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for id in morph_ids {
            let m = corpus.morph(id)?;
            ids.insert(m.bf1_ref.as_str());
            ids.insert(m.bf2_ref.as_str());
        }
        let images = ids.into_iter().map(|id| corpus.bonafide(id)).collect::<Result<Vec<_>>>()?;
        Self::embed(images, comparator)
    }

    pub fn entries(&self) -> &[DbEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_identities(&self) -> usize {
        self.entries.iter().map(|e| e.identity_id.as_str()).collect::<BTreeSet<_>>().len()
    }

    pub fn get(&self, image_id: &str) -> Result<&Embedding<T>> {
        self.entries
            .iter()
            .find(|e| e.image_id == image_id)
            .map(|e| &e.embedding)
            .ok_or_else(|| Error::Protocol(format!("image {image_id} is not in the gallery")))
    }

    /// Similarity of `probe` to every gallery image not in `exclude`.
    pub fn scores_excluding(&self, probe: &Embedding<T>, exclude: &[&str]) -> Result<Vec<(String, T)>> {
        self.entries
            .iter()
            .filter(|e| !exclude.contains(&e.image_id.as_str()))
            .map(|e| Ok((e.image_id.clone(), similarity(probe, &e.embedding)?)))
            .collect()
    }
}

/// Best-scoring gallery image other than the ground truth. Ties go to the
/// first image in gallery order.
pub fn closest_excluding<T: Scalar>(probe: &Embedding<T>, db: &BonafideDb<T>, gt: &str) -> Result<(String, T)> {
    let mut best: Option<(String, T)> = None;
    for (id, s) in db.scores_excluding(probe, &[gt])? {
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((id, s));
        }
    }
    best.ok_or_else(|| Error::Protocol(format!("no imposter candidate besides {gt}")))
}

/// Third-best gallery image once ground truth and reference are removed.
pub fn third_highest_excluding<T: Scalar>(
    probe: &Embedding<T>,
    db: &BonafideDb<T>,
    gt: &str,
    reference: &str,
) -> Result<(String, T)> {
    let mut scored = db.scores_excluding(probe, &[gt, reference])?;
    if scored.len() < 3 {
        return Err(Error::Protocol(format!(
            "only {} gallery images remain after excluding {gt} and {reference}; need 3",
            scored.len()
        )));
    }
    // stable sort keeps gallery order among equal scores
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarity"));
    Ok(scored.swap_remove(2))
}

/// A genuine/imposter score list for one comparator. `genuine_ids` and
/// `imposter_ids` name the output each score belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet<T> {
    pub genuine: Vec<T>,
    pub imposter: Vec<T>,
    pub genuine_ids: Vec<String>,
    pub imposter_ids: Vec<String>,
    pub comparator: String,
    pub dataset: String,
    pub mode: Mode,
}

impl<T: Scalar> ScoreSet<T> {
    pub fn new(mode: Mode, comparator: &str, dataset: &str) -> Self {
        Self {
            genuine: Vec::new(),
            imposter: Vec::new(),
            genuine_ids: Vec::new(),
            imposter_ids: Vec::new(),
            comparator: comparator.to_string(),
            dataset: dataset.to_string(),
            mode,
        }
    }

    fn push(&mut self, output_id: &str, genuine: T, imposter: T) {
        self.genuine.push(genuine);
        self.genuine_ids.push(output_id.to_string());
        self.imposter.push(imposter);
        self.imposter_ids.push(output_id.to_string());
    }

    /// `kind,image_id,score,comparator` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,image_id,score,comparator\n");
        let rows = self
            .genuine
            .iter()
            .zip(&self.genuine_ids)
            .map(|r| ("genuine", r))
            .chain(self.imposter.iter().zip(&self.imposter_ids).map(|r| ("imposter", r)));
        for (kind, (score, id)) in rows {
            s.push_str(&format!("{kind},{id},{},{}\n", score.as_f64(), self.comparator));
        }
        s
    }
}

/// Embedded outputs of one reference-free demorphing run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFreeResult<T> {
    pub morph_id: String,
    pub out1: Embedding<T>,
    pub out2: Embedding<T>,
    pub bf1_id: String,
    pub bf2_id: String,
}

impl<T> ReferenceFreeResult<T> {
    pub fn output_ids(&self) -> (String, String) {
        (format!("{}_out1", self.morph_id), format!("{}_out2", self.morph_id))
    }
}

/// Embedded output of one differential run.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialResult<T> {
    pub morph_id: String,
    pub out: Embedding<T>,
    pub gt_id: String,
    pub reference_id: String,
}

/// Outputs of one record after assignment: `out1` goes with `bf1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assigned<'a, T> {
    pub assignment: Assignment<T>,
    pub out1: &'a Embedding<T>,
    pub out2: &'a Embedding<T>,
    pub out1_id: String,
    pub out2_id: String,
    pub bf1: &'a Embedding<T>,
    pub bf2: &'a Embedding<T>,
}

pub fn assign_result<'a, T: Scalar>(r: &'a ReferenceFreeResult<T>, db: &'a BonafideDb<T>) -> Result<Assigned<'a, T>> {
    let (bf1, bf2) = (db.get(&r.bf1_id)?, db.get(&r.bf2_id)?);
    let a = assign_embeddings(&r.out1, &r.out2, bf1, bf2)?;
    let (id1, id2) = r.output_ids();
    let (out1, out2) = a.order(&r.out1, &r.out2);
    let (out1_id, out2_id) = a.order(&id1, &id2);
    Ok(Assigned { assignment: a, out1, out2, out1_id: out1_id.clone(), out2_id: out2_id.clone(), bf1, bf2 })
}

/// One genuine score per output against its assigned ground truth, and one
/// imposter score: the closest gallery face other than that ground truth.
pub fn build_scores_reference_free<T: Scalar>(
    results: &[ReferenceFreeResult<T>],
    db: &BonafideDb<T>,
    comparator: &str,
    dataset: &str,
) -> Result<(ScoreSet<T>, Vec<Assignment<T>>)> {
    if db.n_identities() < 2 {
        return Err(Error::Protocol(format!("gallery holds {} identities; need at least 2", db.n_identities())));
    }
    let mut set = ScoreSet::new(Mode::ReferenceFree, comparator, dataset);
    let mut assignments = Vec::with_capacity(results.len());
    for r in results {
        let a = assign_result(r, db)?;
        for (out, out_id, gt, gt_id) in [(a.out1, &a.out1_id, a.bf1, &r.bf1_id), (a.out2, &a.out2_id, a.bf2, &r.bf2_id)] {
            let genuine = similarity(out, gt)?;
            let (_, imposter) = closest_excluding(out, db, gt_id)?;
            set.push(out_id, genuine, imposter);
        }
        assignments.push(a.assignment);
    }
    Ok((set, assignments))
}

/// Genuine score against the ground truth; imposter is the third-highest
/// similarity once ground truth and reference are excluded.
pub fn build_scores_differential<T: Scalar>(
    results: &[DifferentialResult<T>],
    db: &BonafideDb<T>,
    comparator: &str,
    dataset: &str,
) -> Result<ScoreSet<T>> {
    let mut set = ScoreSet::new(Mode::Differential, comparator, dataset);
    for r in results {
        let genuine = similarity(&r.out, db.get(&r.gt_id)?)?;
        let (_, imposter) = third_highest_excluding(&r.out, db, &r.gt_id, &r.reference_id)?;
        set.push(&format!("{}_out", r.morph_id), genuine, imposter);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceDistributions<T> {
    pub out1_out2: Vec<T>,
    pub bf1_out1: Vec<T>,
    pub bf2_out2: Vec<T>,
}

impl<T: Scalar> DistanceDistributions<T> {
    pub fn means(&self) -> (Option<T>, Option<T>, Option<T>) {
        (mean(&self.out1_out2), mean(&self.bf1_out1), mean(&self.bf2_out2))
    }
}

/// Cosine distances under the assigned pairing.
pub fn distance_distributions<T: Scalar>(
    results: &[ReferenceFreeResult<T>],
    db: &BonafideDb<T>,
) -> Result<DistanceDistributions<T>> {
    let mut d = DistanceDistributions { out1_out2: Vec::new(), bf1_out1: Vec::new(), bf2_out2: Vec::new() };
    for r in results {
        let a = assign_result(r, db)?;
        d.out1_out2.push(distance(a.out1, a.out2)?);
        d.bf1_out1.push(distance(a.bf1, a.out1)?);
        d.bf2_out2.push(distance(a.bf2, a.out2)?);
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityFlags {
    /// The two outputs are closer than `theta`: the model copied the morph.
    pub replication: bool,
    /// Some output is farther than `epsilon` from its ground truth.
    pub fidelity: bool,
}

/// Flags for one assigned record. Outputs should be far apart and each near
/// its own ground truth; the flags fire when that fails.
pub fn replication_and_fidelity_check<T: Scalar>(
    out1: &Embedding<T>,
    out2: &Embedding<T>,
    gt1: &Embedding<T>,
    gt2: &Embedding<T>,
    theta: T,
    epsilon: T,
) -> Result<QualityFlags> {
    Ok(QualityFlags {
        replication: distance(out1, out2)? < theta,
        fidelity: distance(out1, gt1)? > epsilon || distance(out2, gt2)? > epsilon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasResult<T> {
    pub comparator: String,
    pub n_morphs: usize,
    pub d_prime: T,
    pub mean_bf1: T,
    pub mean_bf2: T,
}

/// Separation between morph-to-base and morph-to-other similarities.
pub fn intrinsic_bias<T: Scalar>(
    morphs: &[&MorphRecord<T>],
    corpus: &Corpus<T>,
    comparator: &dyn Comparator<T>,
) -> Result<BiasResult<T>> {
    if morphs.len() < 2 {
        return Err(Error::Protocol(format!("intrinsic bias needs at least two morphs, got {}", morphs.len())));
    }
    let mut s1 = Vec::with_capacity(morphs.len());
    let mut s2 = Vec::with_capacity(morphs.len());
    for m in morphs {
        let e = comparator.embed(&m.morph)?;
        s1.push(similarity(&e, &comparator.embed(corpus.bonafide(&m.bf1_ref)?)?)?);
        s2.push(similarity(&e, &comparator.embed(corpus.bonafide(&m.bf2_ref)?)?)?);
    }
    Ok(BiasResult {
        comparator: comparator.name().to_string(),
        n_morphs: morphs.len(),
        d_prime: d_prime(&s1, &s2)?,
        mean_bf1: mean(&s1).expect("nonempty"),
        mean_bf2: mean(&s2).expect("nonempty"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding<f64> {
        Embedding { vector: v.to_vec(), comparator: "t".into() }
    }

    fn entry(id: &str, v: &[f64]) -> DbEntry<f64> {
        DbEntry { image_id: id.into(), identity_id: format!("p_{id}"), embedding: emb(v) }
    }

    #[test]
    fn assignment_cases() {
        let (b1, b2) = (emb(&[1.0, 0.0]), emb(&[0.0, 1.0]));
        let a = assign_embeddings(&b1, &b2, &b1, &b2).unwrap();
        assert!(!a.swapped && !a.tie);
        let a = assign_embeddings(&b2, &b1, &b1, &b2).unwrap();
        assert!(a.swapped && !a.tie);
        let o = emb(&[0.3, 0.8]);
        let a = assign_embeddings(&o, &o, &b1, &b2).unwrap();
        assert!(a.tie && !a.swapped);
    }

    #[test]
    fn single_other_face_is_the_imposter() {
        let db = BonafideDb::new(vec![entry("gt", &[1.0, 0.0]), entry("f", &[0.6, 0.8])]).unwrap();
        let out = emb(&[1.0, 0.0]);
        let (id, s) = closest_excluding(&out, &db, "gt").unwrap();
        assert_eq!(id, "f");
        assert!((s - 0.6).abs() < 1e-12);
        assert_eq!(similarity(&out, db.get("gt").unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn third_of_three_is_the_minimum() {
        let db = BonafideDb::new(vec![
            entry("gt", &[1.0, 0.0]),
            entry("ref", &[0.0, 1.0]),
            entry("a", &[0.9, 0.1]),
            entry("b", &[0.5, 0.5]),
            entry("c", &[0.1, 0.9]),
        ])
        .unwrap();
        let out = emb(&[1.0, 0.0]);
        let (id, _) = third_highest_excluding(&out, &db, "gt", "ref").unwrap();
        assert_eq!(id, "c");
        let small = BonafideDb::new(db.entries()[..4].to_vec()).unwrap();
        assert!(matches!(third_highest_excluding(&out, &small, "gt", "ref"), Err(Error::Protocol(_))));
    }

    #[test]
    fn gallery_of_one_identity_is_rejected() {
        let db = BonafideDb::new(vec![entry("gt", &[1.0, 0.0])]).unwrap();
        let r = ReferenceFreeResult {
            morph_id: "m".into(),
            out1: emb(&[1.0, 0.0]),
            out2: emb(&[1.0, 0.0]),
            bf1_id: "gt".into(),
            bf2_id: "gt".into(),
        };
        assert!(matches!(build_scores_reference_free(&[r], &db, "t", "d"), Err(Error::Protocol(_))));
    }

    #[test]
    fn flags_on_exact_outputs() {
        let (g1, g2) = (emb(&[1.0, 0.0]), emb(&[0.0, 1.0]));
        let f = replication_and_fidelity_check(&g1, &g2, &g1, &g2, 0.35, 1e-9).unwrap();
        assert!(!f.replication && !f.fidelity);
        let f = replication_and_fidelity_check(&g1, &g1, &g1, &g2, 1e-9, 0.35).unwrap();
        assert!(f.replication && f.fidelity);
    }

    #[test]
    fn score_csv_layout() {
        let mut s = ScoreSet::new(Mode::ReferenceFree, "toy", "d");
        s.push("m_out1", 0.5f64, 0.25);
        assert_eq!(s.to_csv(), "kind,image_id,score,comparator\ngenuine,m_out1,0.5,toy\nimposter,m_out1,0.25,toy\n");
    }
}
