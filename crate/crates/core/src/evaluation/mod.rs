//! End-to-end scoring of a trained generator on a test split.

pub mod iqa;
pub mod metrics;
pub mod protocol;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::biometric::{distance, ComparatorRegistry, ComparatorSpec};
use crate::data::image::{save_png, FaceImage};
use crate::data::manifest::{load_corpus, SplitLabel};
use crate::data::morph::MorphRecord;
use crate::data::synthetic::Corpus;
use crate::data::transforms::apply_reference_transforms;
use crate::error::{Error, Result};
use crate::model::config::Mode;
use crate::model::encoder::{encode_for_mode, ImageEncoder};
use crate::model::generator::{Demorphed, Generator};
use crate::rng::derive_seed;
use crate::scalar::mean;
use crate::training::checkpoint::Checkpoint;
use crate::training::{reference_side, ReferenceSide};

pub use iqa::{iqa, psnr, ssim, IqaSummary};
pub use metrics::{d_prime, histogram, tmr_at_fmr, HistogramBin, TmrPoint};
pub use protocol::{
    assign_embeddings, assign_outputs, build_scores_differential, build_scores_reference_free, distance_distributions,
    intrinsic_bias, replication_and_fidelity_check, Assignment, BiasResult, BonafideDb, DifferentialResult,
    DistanceDistributions, QualityFlags, ReferenceFreeResult, ScoreSet,
};

pub const DEFAULT_FMR_LEVELS: [f64; 4] = [0.001, 0.01, 0.05, 0.10];
/// Default for both the replication and the fidelity distance thresholds.
pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.35;
pub const REPORT_FILE: &str = "eval_report.json";
pub const BIAS_REPORT_FILE: &str = "bias_report.json";

fn default_fmr_levels() -> Vec<f64> {
    DEFAULT_FMR_LEVELS.to_vec()
}
fn default_threshold() -> f64 {
    DEFAULT_QUALITY_THRESHOLD
}
fn default_true() -> bool {
    true
}
fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub comparators: Vec<ComparatorSpec>,
    #[serde(default = "default_fmr_levels")]
    pub fmr_levels: Vec<f64>,
    /// Replication fires when `distance(out1, out2) < theta`.
    #[serde(default = "default_threshold")]
    pub theta: f64,
    /// Fidelity fires when `distance(out_i, gt_i) > epsilon`.
    #[serde(default = "default_threshold")]
    pub epsilon: f64,
    /// Perturb differential references before demorphing.
    #[serde(default = "default_true")]
    pub reference_transforms: bool,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Where an external FID/LPIPS provider leaves its answer, relative to
    /// the output directory. When set, outputs and a request file are written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iqa_response: Option<String>,
}

impl EvalConfig {
    pub fn toy() -> Self {
        Self {
            comparators: vec![ComparatorSpec::toy("toy-frs")],
            fmr_levels: default_fmr_levels(),
            theta: DEFAULT_QUALITY_THRESHOLD,
            epsilon: DEFAULT_QUALITY_THRESHOLD,
            reference_transforms: true,
            histogram_bins: default_bins(),
            iqa_response: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.comparators.is_empty() {
            return Err(Error::Config("eval needs at least one comparator".into()));
        }
        if self.fmr_levels.is_empty() || self.fmr_levels.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("FMR levels must be a nonempty list in [0, 1]".into()));
        }
        for (name, v) in [("theta", self.theta), ("epsilon", self.epsilon)] {
            if !(0.0..=2.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be a cosine distance in [0, 2]")));
            }
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be positive".into()));
        }
        Ok(())
    }
}

/// Generator output for one test morph, with the bona fides it is judged against.
#[derive(Debug, Clone)]
pub struct DemorphOutput {
    pub morph_id: String,
    pub outputs: Demorphed<f32>,
    pub bf1_id: String,
    pub bf2_id: String,
    /// Differential only: the bona fide given as reference (before perturbation).
    pub reference_id: Option<String>,
}

impl DemorphOutput {
    /// Differential ground truth: whichever bona fide was not the reference.
    pub fn ground_truth_id(&self) -> Option<&str> {
        self.reference_id.as_deref().map(|r| if r == self.bf1_id { self.bf2_id.as_str() } else { self.bf1_id.as_str() })
    }
}

pub fn dropout_seed(seed: u64, morph_id: &str) -> u64 {
    derive_seed(seed, &format!("eval-dropout/{morph_id}"), 0)
}

/// Differential inputs for one morph: `(reference image id, perturbed reference)`.
pub fn differential_reference<'a>(
    corpus: &'a Corpus<f32>,
    record: &MorphRecord<f32>,
    seed: u64,
    transforms: bool,
) -> Result<(&'a str, FaceImage<f32>)> {
    let id = match reference_side(seed, &record.morph_id) {
        ReferenceSide::First => &record.bf1_ref,
        ReferenceSide::Second => &record.bf2_ref,
    };
    let (key, img) = corpus.bonafides.get_key_value(id).ok_or_else(|| Error::Protocol(format!("missing bona fide {id}")))?;
    let reference = if transforms {
        apply_reference_transforms(img, derive_seed(seed, &format!("reference-transform/{}", record.morph_id), 0))?
    } else {
        img.clone()
    };
    Ok((key.as_str(), reference))
}

/// Runs the generator on every listed morph. Dropout stays active and is
/// seeded per morph, so results do not depend on list order.
pub fn demorph_records(
    generator: &Generator,
    corpus: &Corpus<f32>,
    morph_ids: &[String],
    encoder: &dyn ImageEncoder,
    seed: u64,
    reference_transforms: bool,
) -> Result<Vec<DemorphOutput>> {
    let cfg = generator.config();
    morph_ids
        .iter()
        .map(|id| {
            let rec = corpus.morph(id)?;
            let reference = match cfg.mode {
                Mode::ReferenceFree => None,
                Mode::Differential => Some(differential_reference(corpus, rec, seed, reference_transforms)?),
            };
            let ref_img = reference.as_ref().map(|(_, img)| img);
            let ctx = encode_for_mode(&rec.morph, ref_img, encoder, cfg)?;
            let outputs = generator.generate(&rec.morph, &ctx, ref_img, dropout_seed(seed, id))?;
            Ok(DemorphOutput {
                morph_id: id.clone(),
                outputs,
                bf1_id: rec.bf1_ref.clone(),
                bf2_id: rec.bf2_ref.clone(),
                reference_id: reference.map(|(r, _)| r.to_string()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMeans {
    pub out1_out2: Option<f64>,
    pub bf1_out1: Option<f64>,
    pub bf2_out2: Option<f64>,
    /// Differential only: output to ground truth.
    pub gt_out: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationCounts {
    pub records: usize,
    pub ties: usize,
    pub swaps: usize,
    pub replication: usize,
    pub fidelity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DPrimeReport {
    /// `None` when infinite (zero spread, distinct means).
    pub value: Option<f64>,
    pub infinite: bool,
}

impl DPrimeReport {
    pub fn from_value(v: f64) -> Self {
        if v.is_infinite() {
            Self { value: None, infinite: true }
        } else {
            Self { value: Some(v), infinite: false }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorReport {
    pub n_genuine: usize,
    pub n_imposter: usize,
    /// Keyed by the FMR level as written in the config.
    pub tmr_at_fmr: BTreeMap<String, f64>,
    pub thresholds: BTreeMap<String, Option<f64>>,
    /// Genuine versus imposter separation.
    pub d_prime: DPrimeReport,
    pub distance_means: DistanceMeans,
    pub replication_flags: ReplicationCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub train_dataset: Option<String>,
    pub mode: Mode,
    pub config_hash: String,
    pub seed: u64,
    pub n_records: usize,
    pub fmr_levels: Vec<f64>,
    pub theta: f64,
    pub epsilon: f64,
    pub comparators: BTreeMap<String, ComparatorReport>,
    pub iqa: IqaSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedHistogram {
    pub comparator: String,
    pub distribution: String,
    pub bins: Vec<HistogramBin>,
}

impl NamedHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for b in &self.bins {
            s.push_str(&format!("{},{},{}\n", b.bin_left, b.bin_right, b.count));
        }
        s
    }

    pub fn file_name(&self) -> String {
        format!("hist_{}_{}.csv", self.comparator, self.distribution)
    }
}

/// Everything one evaluation produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<ScoreSet<f64>>,
    pub histograms: Vec<NamedHistogram>,
}

impl Evaluation {
    /// Writes the report, per-comparator score CSVs and histogram CSVs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&self.report)? + "\n")?;
        for s in &self.scores {
            std::fs::write(dir.join(format!("scores_{}.csv", s.comparator)), s.to_csv())?;
        }
        for h in &self.histograms {
            std::fs::write(dir.join(h.file_name()), h.to_csv())?;
        }
        Ok(())
    }
}

/// Labels and provenance attached to a report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext<'a> {
    pub dataset: &'a str,
    pub train_dataset: Option<&'a str>,
    pub config_hash: &'a str,
    pub seed: u64,
}

fn score_histograms(cmp: &str, set: &ScoreSet<f64>, bins: usize, out: &mut Vec<NamedHistogram>) {
    for (name, xs) in [("genuine", &set.genuine), ("imposter", &set.imposter)] {
        out.push(NamedHistogram { comparator: cmp.into(), distribution: name.into(), bins: histogram(xs, -1.0, 1.0, bins) });
    }
}

fn distance_histogram(cmp: &str, name: &str, xs: &[f64], bins: usize) -> NamedHistogram {
    NamedHistogram { comparator: cmp.into(), distribution: name.into(), bins: histogram(xs, 0.0, 2.0, bins) }
}

fn tmr_maps(set: &ScoreSet<f64>, levels: &[f64]) -> Result<(BTreeMap<String, f64>, BTreeMap<String, Option<f64>>)> {
    let pts = tmr_at_fmr(&set.genuine, &set.imposter, levels)?;
    Ok((
        pts.iter().map(|p| (p.fmr.to_string(), p.tmr)).collect(),
        pts.iter().map(|p| (p.fmr.to_string(), p.threshold)).collect(),
    ))
}

/// Scores demorphing outputs against the corpus bona fides with every
/// registered comparator.
pub fn evaluate_outputs(
    outputs: &[DemorphOutput],
    corpus: &Corpus<f32>,
    registry: &ComparatorRegistry<f64>,
    cfg: &EvalConfig,
    ctx: &EvalContext<'_>,
) -> Result<Evaluation> {
    cfg.validate()?;
    let mode = match outputs.first().map(|o| &o.outputs) {
        Some(Demorphed::Pair(..)) => Mode::ReferenceFree,
        Some(Demorphed::Single(_)) => Mode::Differential,
        None => return Err(Error::Protocol("no demorphing outputs to evaluate".into())),
    };
    let corpus64 = Corpus {
        bonafides: corpus.bonafides.iter().map(|(k, v)| (k.clone(), v.cast::<f64>())).collect(),
        morphs: Vec::new(),
    };
    let morph_ids: Vec<String> = outputs.iter().map(|o| o.morph_id.clone()).collect();
    let mut referenced = Corpus { bonafides: BTreeMap::new(), morphs: Vec::new() };
    for o in outputs {
        for id in [&o.bf1_id, &o.bf2_id] {
            referenced.bonafides.insert(id.clone(), corpus64.bonafide(id)?.clone());
        }
    }

    let mut comparators = BTreeMap::new();
    let mut scores = Vec::new();
    let mut histograms = Vec::new();
    for cmp in registry.iter() {
        let name = cmp.name().to_string();
        let db = BonafideDb::embed(referenced.bonafides.values(), cmp)?;
        let bins = cfg.histogram_bins;
        let (set, distance_means, flags) = match mode {
            Mode::ReferenceFree => {
                let results = outputs
                    .iter()
                    .map(|o| {
                        let Demorphed::Pair(a, b) = &o.outputs else {
                            return Err(Error::Protocol("mixed output kinds".into()));
                        };
                        Ok(ReferenceFreeResult {
                            morph_id: o.morph_id.clone(),
                            out1: cmp.embed(&a.cast())?,
                            out2: cmp.embed(&b.cast())?,
                            bf1_id: o.bf1_id.clone(),
                            bf2_id: o.bf2_id.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (set, assignments) = build_scores_reference_free(&results, &db, &name, ctx.dataset)?;
                let dists = distance_distributions(&results, &db)?;
                let mut flags = ReplicationCounts { records: results.len(), ..Default::default() };
                for (r, a) in results.iter().zip(&assignments) {
                    flags.ties += a.tie as usize;
                    flags.swaps += a.swapped as usize;
                    let (o1, o2) = a.order(&r.out1, &r.out2);
                    let q = replication_and_fidelity_check(o1, o2, db.get(&r.bf1_id)?, db.get(&r.bf2_id)?, cfg.theta, cfg.epsilon)?;
                    flags.replication += q.replication as usize;
                    flags.fidelity += q.fidelity as usize;
                }
                let (m12, m1, m2) = dists.means();
                for (n, xs) in [("out1_out2", &dists.out1_out2), ("bf1_out1", &dists.bf1_out1), ("bf2_out2", &dists.bf2_out2)] {
                    histograms.push(distance_histogram(&name, n, xs, bins));
                }
                (set, DistanceMeans { out1_out2: m12, bf1_out1: m1, bf2_out2: m2, gt_out: None }, flags)
            }
            Mode::Differential => {
                let results = outputs
                    .iter()
                    .map(|o| {
                        let (Demorphed::Single(out), Some(r), Some(gt)) = (&o.outputs, &o.reference_id, o.ground_truth_id()) else {
                            return Err(Error::Protocol("mixed output kinds".into()));
                        };
                        Ok(DifferentialResult {
                            morph_id: o.morph_id.clone(),
                            out: cmp.embed(&out.cast())?,
                            gt_id: gt.to_string(),
                            reference_id: r.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let set = build_scores_differential(&results, &db, &name, ctx.dataset)?;
                let dists =
                    results.iter().map(|r| distance(&r.out, db.get(&r.gt_id)?)).collect::<Result<Vec<f64>>>()?;
                let flags = ReplicationCounts {
                    records: results.len(),
                    fidelity: dists.iter().filter(|d| **d > cfg.epsilon).count(),
                    ..Default::default()
                };
                histograms.push(distance_histogram(&name, "gt_out", &dists, bins));
                (set, DistanceMeans { out1_out2: None, bf1_out1: None, bf2_out2: None, gt_out: mean(&dists) }, flags)
            }
        };
        let (tmr, thresholds) = tmr_maps(&set, &cfg.fmr_levels)?;
        let dp = if set.genuine.len() >= 2 { d_prime(&set.genuine, &set.imposter)? } else { f64::NAN };
        score_histograms(&name, &set, bins, &mut histograms);
        comparators.insert(
            name,
            ComparatorReport {
                n_genuine: set.genuine.len(),
                n_imposter: set.imposter.len(),
                tmr_at_fmr: tmr,
                thresholds,
                d_prime: if dp.is_nan() { DPrimeReport { value: None, infinite: false } } else { DPrimeReport::from_value(dp) },
                distance_means,
                replication_flags: flags,
            },
        );
        scores.push(set);
    }

    let mut pairs = Vec::new();
    for o in outputs {
        match &o.outputs {
            Demorphed::Pair(a, b) => {
                let (gt1, gt2) = (corpus.bonafide(&o.bf1_id)?, corpus.bonafide(&o.bf2_id)?);
                // image quality follows the pixel-space pairing used by the loss
                let straight = a.mean_abs_diff(gt1)? + b.mean_abs_diff(gt2)?;
                let crossed = a.mean_abs_diff(gt2)? + b.mean_abs_diff(gt1)?;
                if crossed < straight {
                    pairs.extend([(a, gt2), (b, gt1)]);
                } else {
                    pairs.extend([(a, gt1), (b, gt2)]);
                }
            }
            Demorphed::Single(out) => {
                let gt = o.ground_truth_id().ok_or_else(|| Error::Protocol("differential output without reference".into()))?;
                pairs.push((out, corpus.bonafide(gt)?));
            }
        }
    }
    let iqa = iqa(&pairs)?;

    let report = EvalReport {
        dataset: ctx.dataset.to_string(),
        train_dataset: ctx.train_dataset.map(str::to_string),
        mode,
        config_hash: ctx.config_hash.to_string(),
        seed: ctx.seed,
        n_records: morph_ids.len(),
        fmr_levels: cfg.fmr_levels.clone(),
        theta: cfg.theta,
        epsilon: cfg.epsilon,
        comparators,
        iqa,
    };
    Ok(Evaluation { report, scores, histograms })
}

/// Demorphs and scores in one call.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    generator: &Generator,
    corpus: &Corpus<f32>,
    morph_ids: &[String],
    encoder: &dyn ImageEncoder,
    registry: &ComparatorRegistry<f64>,
    cfg: &EvalConfig,
    ctx: &EvalContext<'_>,
) -> Result<(Vec<DemorphOutput>, Evaluation)> {
    let outputs = demorph_records(generator, corpus, morph_ids, encoder, ctx.seed, cfg.reference_transforms)?;
    let eval = evaluate_outputs(&outputs, corpus, registry, cfg, ctx)?;
    Ok((outputs, eval))
}

/// Saves outputs as PNGs under `dir` and returns the provider request that
/// pairs them with their ground truths.
pub fn write_outputs(outputs: &[DemorphOutput], corpus: &Corpus<f32>, dir: &Path) -> Result<iqa::IqaRequest> {
    let mut pairs = Vec::new();
    for o in outputs {
        let mut items: Vec<(&FaceImage<f32>, &str)> = Vec::new();
        match &o.outputs {
            Demorphed::Pair(a, b) => items.extend([(a, o.bf1_id.as_str()), (b, o.bf2_id.as_str())]),
            Demorphed::Single(out) => items.push((out, o.ground_truth_id().unwrap_or(&o.bf2_id))),
        }
        for (img, gt) in items {
            let out_rel = format!("outputs/{}.png", img.image_id);
            let gt_rel = format!("outputs/gt/{gt}.png");
            save_png(img, &dir.join(&out_rel))?;
            save_png(corpus.bonafide(gt)?, &dir.join(&gt_rel))?;
            pairs.push(iqa::IqaRequestPair { output: out_rel, ground_truth: gt_rel });
        }
    }
    Ok(iqa::IqaRequest { pairs })
}

/// Ids of the test-labelled morphs that survived loading.
pub fn test_morph_ids(entries: &[crate::data::manifest::ManifestEntry]) -> Vec<String> {
    use crate::data::morph::IdentityPair;
    entries.iter().filter(|e| e.split == SplitLabel::Test).map(|e| e.morph_id().to_string()).collect()
}

/// Dataset label for a manifest: its directory name.
pub fn dataset_name(manifest: &Path) -> String {
    manifest
        .canonicalize()
        .ok()
        .and_then(|p| p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dataset".into())
}

/// Reference-free evaluation of a checkpoint on another corpus's test split.
#[allow(clippy::too_many_arguments)]
pub fn cross_dataset_eval(
    checkpoint: &Path,
    foreign_manifest: &Path,
    encoder: &dyn ImageEncoder,
    registry: &ComparatorRegistry<f64>,
    cfg: &EvalConfig,
    seed: u64,
    train_dataset: &str,
    dataset: &str,
) -> Result<Evaluation> {
    let ck = Checkpoint::load(checkpoint)?;
    let generator = ck.generator()?;
    if generator.config().mode != Mode::ReferenceFree {
        return Err(Error::Config("cross-dataset evaluation needs a reference-free checkpoint".into()));
    }
    let loaded = load_corpus::<f32>(foreign_manifest, generator.config().resolution)?;
    let ids = test_morph_ids(&loaded.entries);
    if ids.is_empty() {
        return Err(Error::Protocol(format!("{} has no test morphs", foreign_manifest.display())));
    }
    let ctx = EvalContext { dataset, train_dataset: Some(train_dataset), config_hash: ck.config_hash(), seed };
    Ok(evaluate(&generator, &loaded.corpus, &ids, encoder, registry, cfg, &ctx)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEntry {
    pub n_morphs: usize,
    pub d_prime: DPrimeReport,
    pub mean_similarity_bf1: f64,
    pub mean_similarity_bf2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub dataset: String,
    pub comparators: BTreeMap<String, BiasEntry>,
}

/// Base-image bias of the listed morphs under every comparator.
pub fn bias_report<T: crate::Scalar>(
    corpus: &Corpus<T>,
    morph_ids: &[String],
    registry: &ComparatorRegistry<T>,
    dataset: &str,
) -> Result<BiasReport> {
    let morphs = morph_ids.iter().map(|id| corpus.morph(id)).collect::<Result<Vec<_>>>()?;
    let mut comparators = BTreeMap::new();
    for cmp in registry.iter() {
        let b = intrinsic_bias(&morphs, corpus, cmp)?;
        comparators.insert(
            b.comparator.clone(),
            BiasEntry {
                n_morphs: b.n_morphs,
                d_prime: DPrimeReport::from_value(b.d_prime.as_f64()),
                mean_similarity_bf1: b.mean_bf1.as_f64(),
                mean_similarity_bf2: b.mean_bf2.as_f64(),
            },
        );
    }
    Ok(BiasReport { dataset: dataset.to_string(), comparators })
}
