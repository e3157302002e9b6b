//! JSON-Lines corpus manifests and their on-disk image layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::image::{load_png, preprocess, save_png};
use crate::data::morph::{GeneratorTag, IdentityPair, MorphRecord};
use crate::data::split::{Discarded, Side, SplitManifest};
use crate::data::synthetic::Corpus;
use crate::error::{validation, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Test,
    Discarded,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub morph: String,
    pub id1: String,
    pub id2: String,
    pub bf1: String,
    pub bf2: String,
    pub tag: String,
    pub split: SplitLabel,
}

fn stem(path: &str) -> &str {
    Path::new(path).file_stem().and_then(|s| s.to_str()).unwrap_or(path)
}

impl IdentityPair for ManifestEntry {
    fn morph_id(&self) -> &str {
        stem(&self.morph)
    }
    fn id1(&self) -> &str {
        &self.id1
    }
    fn id2(&self) -> &str {
        &self.id2
    }
}

impl ManifestEntry {
    pub fn bf1_id(&self) -> &str {
        stem(&self.bf1)
    }
    pub fn bf2_id(&self) -> &str {
        stem(&self.bf2)
    }
}

/// Sidecar written next to a manifest: the split parameters and the discard
/// reasons, which the JSON-Lines records themselves do not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub seed: u64,
    pub ratio: f64,
    pub n_train_morphs: usize,
    pub n_test_morphs: usize,
    pub n_discarded: usize,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub discarded: Vec<Discarded>,
    pub config_hash: String,
}

impl ManifestSummary {
    pub fn from_split(split: &SplitManifest, config_hash: &str) -> Self {
        Self {
            seed: split.seed,
            ratio: split.ratio,
            n_train_morphs: split.train_morphs.len(),
            n_test_morphs: split.test_morphs.len(),
            n_discarded: split.discarded.len(),
            train_ids: split.train_ids.clone(),
            test_ids: split.test_ids.clone(),
            discarded: split.discarded.clone(),
            config_hash: config_hash.to_string(),
        }
    }
}

pub fn summary_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("summary.json")
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open manifest {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| validation(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Relabels entries according to a split.
pub fn apply_split(entries: &[ManifestEntry], split: &SplitManifest) -> Vec<ManifestEntry> {
    let train: BTreeSet<&str> = split.train_morphs.iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = split.test_morphs.iter().map(String::as_str).collect();
    entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.split = if train.contains(e.morph_id()) {
                SplitLabel::Train
            } else if test.contains(e.morph_id()) {
                SplitLabel::Test
            } else {
                SplitLabel::Discarded
            };
            e
        })
        .collect()
}

/// Rebuilds the split recorded in a manifest's labels.
pub fn split_from_entries(entries: &[ManifestEntry], seed: u64, ratio: f64) -> SplitManifest {
    let mut m = SplitManifest {
        train_ids: BTreeSet::new(),
        test_ids: BTreeSet::new(),
        train_morphs: Vec::new(),
        test_morphs: Vec::new(),
        discarded: Vec::new(),
        seed,
        ratio,
    };
    for e in entries {
        let ids = [e.id1.clone(), e.id2.clone()];
        match e.split {
            SplitLabel::Train => {
                m.train_morphs.push(e.morph_id().to_string());
                m.train_ids.extend(ids);
            }
            SplitLabel::Test => {
                m.test_morphs.push(e.morph_id().to_string());
                m.test_ids.extend(ids);
            }
            SplitLabel::Discarded => m.discarded.push(Discarded {
                morph_id: e.morph_id().to_string(),
                reason: "labelled discarded in manifest".into(),
            }),
        }
    }
    m
}

/// Writes bona fides under `bf/` and morphs under `morphs/`, returning the
/// manifest entries (labels taken from `split`).
pub fn write_corpus<T: Scalar>(corpus: &Corpus<T>, dir: &Path, split: &SplitManifest) -> Result<Vec<ManifestEntry>> {
    for (id, img) in &corpus.bonafides {
        save_png(img, &dir.join("bf").join(format!("{id}.png")))?;
    }
    let mut entries = Vec::with_capacity(corpus.morphs.len());
    for m in &corpus.morphs {
        let rel = format!("morphs/{}.png", m.morph_id);
        save_png(&m.morph, &dir.join(&rel))?;
        let split_label = match split.side_of(&m.morph_id) {
            Some(Side::Train) => SplitLabel::Train,
            Some(Side::Test) => SplitLabel::Test,
            None => SplitLabel::Discarded,
        };
        entries.push(ManifestEntry {
            morph: rel,
            id1: m.id1.clone(),
            id2: m.id2.clone(),
            bf1: format!("bf/{}.png", m.bf1_ref),
            bf2: format!("bf/{}.png", m.bf2_ref),
            tag: m.generator_tag.as_str().to_string(),
            split: split_label,
        });
    }
    Ok(entries)
}

/// A corpus loaded from disk plus a report of every record that was skipped.
pub struct LoadedCorpus<T> {
    pub corpus: Corpus<T>,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<String>,
}

/// Loads and preprocesses every image a manifest references. Records whose
/// images cannot be decoded are skipped and reported, not fatal.
pub fn load_corpus<T: Scalar>(manifest: &Path, resolution: usize) -> Result<LoadedCorpus<T>> {
    let entries = read_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut bonafides = BTreeMap::new();
    let mut morphs = Vec::new();
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for e in entries {
        let load = |rel: &str, identity: &str| -> Result<_> {
            let raw = load_png::<T>(&root.join(rel), identity, stem(rel))
                .map_err(|err| Error::Skipped(format!("{rel}: {err}")))?;
            preprocess(&raw, resolution)
        };
        let loaded = (|| -> Result<_> {
            let bf1 = load(&e.bf1, &e.id1)?;
            let bf2 = load(&e.bf2, &e.id2)?;
            let morph = load(&e.morph, &format!("morph:{}", e.morph_id()))?;
            Ok((bf1, bf2, morph))
        })();
        match loaded {
            Ok((bf1, bf2, morph)) => {
                morphs.push(MorphRecord {
                    morph_id: e.morph_id().to_string(),
                    morph,
                    id1: e.id1.clone(),
                    id2: e.id2.clone(),
                    bf1_ref: bf1.image_id.clone(),
                    bf2_ref: bf2.image_id.clone(),
                    generator_tag: GeneratorTag::parse(&e.tag)?,
                });
                bonafides.insert(bf1.image_id.clone(), bf1);
                bonafides.insert(bf2.image_id.clone(), bf2);
                kept.push(e);
            }
            Err(Error::Skipped(reason)) => {
                log::warn!("skipping {}: {reason}", e.morph);
                skipped.push(format!("{}: {reason}", e.morph_id()));
            }
            Err(other) => return Err(other),
        }
    }
    Ok(LoadedCorpus { corpus: Corpus { bonafides, morphs }, entries: kept, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::split_identity_disjoint;
    use crate::data::synthetic::{synthesize_corpus, SyntheticCorpusConfig};

    #[test]
    fn manifest_line_has_exact_schema() {
        let e = ManifestEntry {
            morph: "morphs/a__b.png".into(),
            id1: "a".into(),
            id2: "b".into(),
            bf1: "bf/bf_a.png".into(),
            bf2: "bf/bf_b.png".into(),
            tag: "synthetic-blend".into(),
            split: SplitLabel::Test,
        };
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"morph":"morphs/a__b.png","id1":"a","id2":"b","bf1":"bf/bf_a.png","bf2":"bf/bf_b.png","tag":"synthetic-blend","split":"test"}"#
        );
        assert_eq!(e.morph_id(), "a__b");
        assert!(serde_json::from_str::<ManifestEntry>(r#"{"morph":"x"}"#).is_err());
    }

    #[test]
    fn corpus_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticCorpusConfig { n_identities: 6, n_morphs: 8, alpha: 0.5, size: 64, seed: 1 };
        let corpus: Corpus<f32> = synthesize_corpus(&cfg).unwrap();
        let split = split_identity_disjoint(&corpus.morphs, &corpus.identities(), 0.6, 4).unwrap();
        let entries = write_corpus(&corpus, dir.path(), &split).unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_manifest(&path, &entries).unwrap();
        let loaded = load_corpus::<f32>(&path, 64).unwrap();
        assert!(loaded.skipped.is_empty());
        assert_eq!(loaded.entries, entries);
        assert_eq!(loaded.corpus.morphs.len(), 8);
        let again = split_from_entries(&loaded.entries, split.seed, split.ratio);
        assert_eq!(again.train_morphs, split.train_morphs);
        assert_eq!(again.test_morphs, split.test_morphs);
        // 8-bit quantization only
        let a = &corpus.morphs[0].morph;
        let b = &loaded.corpus.morph(&corpus.morphs[0].morph_id).unwrap().morph;
        assert!(a.mean_abs_diff(b).unwrap() < 1.0 / 255.0);
    }

    #[test]
    fn unreadable_images_are_skipped_with_report() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let entry = ManifestEntry {
            morph: "broken.png".into(),
            id1: "a".into(),
            id2: "b".into(),
            bf1: "broken.png".into(),
            bf2: "broken.png".into(),
            tag: "landmark".into(),
            split: SplitLabel::Train,
        };
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &[entry]).unwrap();
        let loaded = load_corpus::<f32>(&path, 64).unwrap();
        assert_eq!(loaded.skipped.len(), 1);
        assert!(loaded.corpus.morphs.is_empty());
    }
}
