//! Subcommand implementations. Each returns a small JSON summary that the
//! binary prints on success.

use std::path::{Path, PathBuf};

use demorphlab_core::biometric::ComparatorRegistry;
use demorphlab_core::data::image::{load_png, preprocess, save_png};
use demorphlab_core::data::manifest::{
    apply_split, load_corpus, read_manifest, summary_path, write_corpus, write_manifest, ManifestEntry,
    ManifestSummary, SplitLabel,
};
use demorphlab_core::data::morph::IdentityPair;
use demorphlab_core::data::split::split_identity_disjoint;
use demorphlab_core::data::synthetic::{synthesize_corpus, Corpus, SyntheticCorpusConfig};
use demorphlab_core::evaluation::iqa::{read_iqa_response, write_iqa_request};
use demorphlab_core::evaluation::{
    bias_report, cross_dataset_eval, dataset_name, dropout_seed, evaluate, test_morph_ids, write_outputs,
    EvalContext, BIAS_REPORT_FILE,
};
use demorphlab_core::model::encoder::{encode_for_mode, ImageEncoder};
use demorphlab_core::model::{Demorphed, Mode};
use demorphlab_core::training::{self, checkpoint_path, Checkpoint, TrainingSet, LOSS_LOG_FILE};
use demorphlab_core::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::LoadedConfig;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

fn data_hash(cfg: &LoadedConfig) -> String {
    let v = serde_json::to_value(&cfg.config.data).expect("data block serializes");
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn default_manifest(cfg: &LoadedConfig) -> PathBuf {
    cfg.corpus_dir().join(MANIFEST_FILE)
}

fn default_checkpoint(cfg: &LoadedConfig) -> PathBuf {
    checkpoint_path(&cfg.run_dir(), cfg.config.train.epochs)
}

fn write_summary(manifest: &Path, summary: &ManifestSummary) -> Result<()> {
    std::fs::write(summary_path(manifest), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

/// Loads a checkpoint and refuses it unless it was built from this config's
/// model block (which pins mode and resolution).
pub fn load_checked(path: &Path, cfg: &LoadedConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let want = cfg.config.model_hash();
    if ck.config_hash() != want {
        return Err(Error::HashMismatch { checkpoint: ck.config_hash().to_string(), config: want });
    }
    Ok(ck)
}

fn encoder(cfg: &LoadedConfig) -> Result<Box<dyn ImageEncoder>> {
    cfg.config.model.encoder.build(cfg.config.model.generator.context_dim, &cfg.base)
}

fn registry(cfg: &LoadedConfig) -> Result<ComparatorRegistry<f64>> {
    ComparatorRegistry::from_specs(&cfg.config.eval.comparators, &cfg.base)
}

pub fn synth(
    cfg: &LoadedConfig,
    out: Option<&Path>,
    n_identities: Option<usize>,
    n_morphs: Option<usize>,
    alpha: Option<f64>,
) -> Result<Value> {
    let c = &cfg.config;
    let defaults = c.data.synth.as_ref();
    let pick = |flag: Option<usize>, field: Option<usize>, name: &str| {
        flag.or(field).ok_or_else(|| Error::Config(format!("synth needs {name} (flag or data.synth)")))
    };
    let synth_cfg = SyntheticCorpusConfig {
        n_identities: pick(n_identities, defaults.map(|d| d.n_identities), "n_identities")?,
        n_morphs: pick(n_morphs, defaults.map(|d| d.n_morphs), "n_morphs")?,
        alpha: alpha.or(defaults.map(|d| d.alpha)).unwrap_or(0.5),
        size: c.data.resolution,
        seed: c.data.seed,
    };
    if !(0.0..=1.0).contains(&synth_cfg.alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", synth_cfg.alpha)));
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.corpus_dir());
    let corpus: Corpus<f32> = synthesize_corpus(&synth_cfg)?;
    let split = split_identity_disjoint(&corpus.morphs, &corpus.identities(), c.data.split_ratio, c.data.seed)?;
    let entries = write_corpus(&corpus, &dir, &split)?;
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    write_summary(&manifest, &ManifestSummary::from_split(&split, &data_hash(cfg)))?;
    Ok(json!({
        "manifest": manifest,
        "identities": synth_cfg.n_identities,
        "morphs": entries.len(),
        "train_morphs": split.train_morphs.len(),
        "test_morphs": split.test_morphs.len(),
        "discarded": split.discarded.len(),
    }))
}

fn absolutize(root: &Path, rel: &str) -> String {
    let p = root.join(rel);
    p.canonicalize().unwrap_or(p).to_string_lossy().into_owned()
}

pub fn split(cfg: &LoadedConfig, out: Option<&Path>, manifest: Option<&Path>) -> Result<Value> {
    let src = manifest.map(Path::to_path_buf).unwrap_or_else(|| default_manifest(cfg));
    let entries = read_manifest(&src)?;
    let identities = entries.iter().flat_map(|e| [e.id1.clone(), e.id2.clone()]).collect();
    let split = split_identity_disjoint(&entries, &identities, cfg.config.data.split_ratio, cfg.config.data.seed)?;
    let mut labelled = apply_split(&entries, &split);
    let dest = match out {
        Some(dir) => {
            // image paths stay valid from the new location
            let root = src.parent().unwrap_or(Path::new("."));
            for e in &mut labelled {
                for p in [&mut e.morph, &mut e.bf1, &mut e.bf2] {
                    *p = absolutize(root, p);
                }
            }
            dir.join(MANIFEST_FILE)
        }
        None => src.clone(),
    };
    write_manifest(&dest, &labelled)?;
    write_summary(&dest, &ManifestSummary::from_split(&split, &data_hash(cfg)))?;
    let violations = split.violations(&entries);
    if !violations.is_empty() {
        return Err(Error::Validation(format!("split violates its invariants: {}", violations.join("; "))));
    }
    Ok(json!({
        "manifest": dest,
        "train_morphs": split.train_morphs.len(),
        "test_morphs": split.test_morphs.len(),
        "discarded": split.discarded.len(),
    }))
}

fn ids_with_label(entries: &[ManifestEntry], label: SplitLabel) -> Vec<String> {
    entries.iter().filter(|e| e.split == label).map(|e| e.morph_id().to_string()).collect()
}

pub fn train(cfg: &LoadedConfig, out: Option<&Path>, manifest: Option<&Path>, resume: Option<&Path>) -> Result<Value> {
    let c = &cfg.config;
    let manifest = manifest.map(Path::to_path_buf).unwrap_or_else(|| default_manifest(cfg));
    let loaded = load_corpus::<f32>(&manifest, c.model.generator.resolution)?;
    let ids = ids_with_label(&loaded.entries, SplitLabel::Train);
    let enc = encoder(cfg)?;
    let set = TrainingSet::build(&loaded.corpus, &ids, enc.as_ref(), &c.model.generator, c.train.seed)?;
    let run_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir());
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join(RUN_CONFIG_FILE), c.to_json())?;
    let (ck, rows) = match resume {
        Some(p) => training::resume(&load_checked(p, cfg)?, &c.train, &set, Some(&run_dir))?,
        None => training::train(&c.model.generator, &c.model.discriminator, &c.train, &set, Some(&run_dir))?,
    };
    let last = rows.last().map(|r| r.losses);
    Ok(json!({
        "run_dir": run_dir,
        "checkpoint": checkpoint_path(&run_dir, ck.header().epoch),
        "loss_log": run_dir.join(LOSS_LOG_FILE),
        "train_morphs": set.len(),
        "skipped": loaded.skipped,
        "config_hash": ck.config_hash(),
        "final_cross_road": last.map(|l| l.cross_road),
    }))
}

fn load_image(path: &Path, resolution: usize) -> Result<demorphlab_core::FaceImageF32> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let raw = load_png::<f32>(path, &stem, &stem)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    preprocess(&raw, resolution)
}

pub fn demorph(
    cfg: &LoadedConfig,
    out: Option<&Path>,
    checkpoint: Option<&Path>,
    morph: &Path,
    reference: Option<&Path>,
    seed: u64,
) -> Result<Value> {
    let ck = load_checked(&checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(cfg)), cfg)?;
    let generator = ck.generator()?;
    let r = generator.config().resolution;
    let m = load_image(morph, r)?;
    let reference = reference.map(|p| load_image(p, r)).transpose()?;
    let enc = encoder(cfg)?;
    let ctx = encode_for_mode(&m, reference.as_ref(), enc.as_ref(), generator.config())?;
    let result = generator.generate(&m, &ctx, reference.as_ref(), dropout_seed(seed, &m.image_id))?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir().join("demorph"));
    let written: Vec<PathBuf> = match &result {
        Demorphed::Pair(a, b) => vec![a, b],
        Demorphed::Single(o) => vec![o],
    }
    .into_iter()
    .map(|img| {
        let p = dir.join(format!("{}.png", img.image_id));
        save_png(img, &p).map(|_| p)
    })
    .collect::<Result<_>>()?;
    Ok(json!({ "outputs": written }))
}

pub fn eval(
    cfg: &LoadedConfig,
    out: Option<&Path>,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<Value> {
    let c = &cfg.config;
    let ck = load_checked(&checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(cfg)), cfg)?;
    let generator = ck.generator()?;
    let manifest = manifest.map(Path::to_path_buf).unwrap_or_else(|| default_manifest(cfg));
    let loaded = load_corpus::<f32>(&manifest, generator.config().resolution)?;
    let ids = test_morph_ids(&loaded.entries);
    if ids.is_empty() {
        return Err(Error::Protocol(format!("{} has no test morphs", manifest.display())));
    }
    let enc = encoder(cfg)?;
    let reg = registry(cfg)?;
    let ctx = EvalContext { dataset: &c.data.dataset, train_dataset: None, config_hash: ck.config_hash(), seed: c.train.seed };
    let (outputs, mut evaluation) = evaluate(&generator, &loaded.corpus, &ids, enc.as_ref(), &reg, &c.eval, &ctx)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir().join("eval"));
    if let Some(resp) = &c.eval.iqa_response {
        let request = write_outputs(&outputs, &loaded.corpus, &dir)?;
        write_iqa_request(&dir.join("iqa_request.json"), &request)?;
        if let Some(r) = read_iqa_response(&dir.join(resp))? {
            evaluation.report.iqa.fid = r.fid;
            evaluation.report.iqa.lpips = r.lpips;
        }
    }
    evaluation.write(&dir)?;
    Ok(json!({
        "report": dir.join(demorphlab_core::evaluation::REPORT_FILE),
        "mode": generator.config().mode,
        "records": ids.len(),
    }))
}

pub fn bias(cfg: &LoadedConfig, out: Option<&Path>, manifest: Option<&Path>) -> Result<Value> {
    let c = &cfg.config;
    let manifest = manifest.map(Path::to_path_buf).unwrap_or_else(|| default_manifest(cfg));
    let loaded = load_corpus::<f64>(&manifest, c.data.resolution)?;
    let ids: Vec<String> = loaded.corpus.morphs.iter().map(|m| m.morph_id.clone()).collect();
    let reg = ComparatorRegistry::<f64>::from_specs(&c.eval.comparators, &cfg.base)?;
    let report = bias_report(&loaded.corpus, &ids, &reg, &c.data.dataset)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir());
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(BIAS_REPORT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(json!({ "report": path, "morphs": ids.len() }))
}

pub fn xeval(cfg: &LoadedConfig, out: Option<&Path>, checkpoint: Option<&Path>, manifest: &Path) -> Result<Value> {
    let c = &cfg.config;
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(cfg));
    // surface a missing or foreign checkpoint before touching the corpus
    let ck = load_checked(&ck_path, cfg)?;
    if ck.header().generator.mode != Mode::ReferenceFree {
        return Err(Error::Config("cross-dataset evaluation needs a reference-free model".into()));
    }
    let enc = encoder(cfg)?;
    let reg = registry(cfg)?;
    let dataset = dataset_name(manifest);
    let evaluation =
        cross_dataset_eval(&ck_path, manifest, enc.as_ref(), &reg, &c.eval, c.train.seed, &c.data.dataset, &dataset)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir().join("xeval"));
    evaluation.write(&dir)?;
    Ok(json!({
        "report": dir.join(demorphlab_core::evaluation::REPORT_FILE),
        "train_dataset": c.data.dataset,
        "dataset": dataset,
    }))
}
