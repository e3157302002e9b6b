mod common;

use common::{fails, ok, s, write_config};
use demorphlab_core::model::Mode;
use serde_json::Value;

fn small(cfg: &mut demorphlab::RunConfig) {
    cfg.train.epochs = 2;
    cfg.train.checkpoint_every = 1;
    cfg.data.synth = Some(demorphlab::config::SynthBlock { n_identities: 10, n_morphs: 20, alpha: 0.5 });
}

#[test]
fn reference_free_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rf.json", Mode::ReferenceFree, 3, small);
    let c = s(&cfg);

    let synth = ok(&["synth", "--config", c]);
    assert_eq!(synth["morphs"], 20);
    let accounted = ["train_morphs", "test_morphs", "discarded"].iter().map(|k| synth[*k].as_u64().unwrap()).sum::<u64>();
    assert_eq!(accounted, 20);

    let resplit = ok(&["split", "--config", c, "--out", s(&dir.path().join("resplit"))]);
    assert_eq!(resplit["train_morphs"], synth["train_morphs"]);

    let train = ok(&["train", "--config", c]);
    let log = std::fs::read_to_string(train["loss_log"].as_str().unwrap()).unwrap();
    assert!(log.starts_with("epoch,step,adv_d,adv_g,cross_road,total_g\n"));
    assert!(dir.path().join("run/ckpt_epoch_1").exists());
    assert!(dir.path().join("run/run_config.json").exists());

    let eval = ok(&["eval", "--config", c]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(eval["report"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(report["mode"], "reference_free");
    assert_eq!(report["dataset"], "synthetic");
    let toy = &report["comparators"]["toy-frs"];
    assert_eq!(toy["n_genuine"].as_u64().unwrap(), 2 * report["n_records"].as_u64().unwrap());
    assert!(dir.path().join("run/eval/scores_toy-frs.csv").exists());
    assert!(dir.path().join("run/eval/hist_toy-frs_genuine.csv").exists());

    let bias = ok(&["bias", "--config", c]);
    assert_eq!(bias["morphs"], 20);

    let foreign = write_config(dir.path(), "other.json", Mode::ReferenceFree, 8, |cfg| {
        small(cfg);
        cfg.paths.corpus_dir = "foreign/frll".into();
    });
    ok(&["synth", "--config", s(&foreign)]);
    let x = ok(&["xeval", "--config", c, "--manifest", s(&dir.path().join("foreign/frll/manifest.jsonl"))]);
    assert_eq!(x["dataset"], "frll");

    let morph = std::fs::read_dir(dir.path().join("corpus/morphs")).unwrap().next().unwrap().unwrap().path();
    let d = ok(&["demorph", "--config", c, "--morph", s(&morph), "--out", s(&dir.path().join("single"))]);
    assert_eq!(d["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn differential_pipeline_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    // the third-highest imposter rule needs at least five test identities
    let cfg = write_config(dir.path(), "diff.json", Mode::Differential, 5, |cfg| {
        small(cfg);
        cfg.data.synth = Some(demorphlab::config::SynthBlock { n_identities: 20, n_morphs: 40, alpha: 0.5 });
    });
    let c = s(&cfg);
    ok(&["synth", "--config", c]);
    ok(&["train", "--config", c]);
    let full_log = std::fs::read_to_string(dir.path().join("run/loss_log.csv")).unwrap();

    // resume from epoch 1 into a second run dir reproduces epoch 2
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::copy(dir.path().join("run/loss_log.csv"), resumed.join("loss_log.csv")).unwrap();
    ok(&["train", "--config", c, "--out", s(&resumed), "--resume", s(&dir.path().join("run/ckpt_epoch_1"))]);
    assert_eq!(std::fs::read_to_string(resumed.join("loss_log.csv")).unwrap(), full_log);
    assert_eq!(
        std::fs::read(resumed.join("ckpt_epoch_2")).unwrap(),
        std::fs::read(dir.path().join("run/ckpt_epoch_2")).unwrap()
    );

    let eval = ok(&["eval", "--config", c]);
    assert_eq!(eval["mode"], "differential");

    // differential checkpoints cannot be used with a reference-free config
    let rf = write_config(dir.path(), "rf.json", Mode::ReferenceFree, 5, small);
    let (code, err) = fails(&["eval", "--config", s(&rf), "--checkpoint", s(&dir.path().join("run/ckpt_epoch_2"))]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "hash_mismatch"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ok.json", Mode::ReferenceFree, 0, small);
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["data"]["split_ratio"] = 1.5.into();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let (code, err) = fails(&["synth", "--config", s(&bad)]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "config"));
    assert!(err["message"].as_str().unwrap().contains("split_ratio"));

    let (code, err) = fails(&["synth", "--config", s(&dir.path().join("absent.json"))]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "config"));
}

#[test]
fn missing_inputs_are_reported_by_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", Mode::ReferenceFree, 0, small);
    let c = s(&cfg);
    let (code, err) = fails(&["eval", "--config", c]);
    assert_eq!((code, err["error"].as_str().unwrap()), (3, "checkpoint"));
    let (code, err) = fails(&["xeval", "--config", c, "--manifest", s(&dir.path().join("none.jsonl"))]);
    assert_eq!((code, err["error"].as_str().unwrap()), (3, "checkpoint"));
    // a manifest path that does not resolve is a configuration problem
    let (code, err) = fails(&["train", "--config", c]);
    assert_eq!((code, err["error"].as_str().unwrap()), (2, "config"));
}
