use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transderain::imagedata::synth::{add_rain_streaks, dead_leaves};
use transderain::imagedata::{gaussian_blur, save_image};
use transderain::metrics::MetricReport;
use transderain::toolcli::{
    analyze_niqe, analyze_tsne, derain_paths, derained_name, evaluate, load_config, prerequisites, train_stage, Corpus,
    PairedData, PipelineConfig, PipelineError, Provenance, OUTPUT_DIR_ENV,
};
use transderain::trainflow::{Stage, StageConfig, TeacherSet};

/// Writes `n` clear dead-leaves scenes and their streaked copies under
/// `root/clear` and `root/rainy` with matching file names.
fn toy_tree(root: &Path, n: usize, side: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(root.join("clear")).unwrap();
    fs::create_dir_all(root.join("rainy")).unwrap();
    for i in 0..n {
        let clear = dead_leaves(side, side, &mut rng);
        let rainy = add_rain_streaks(&clear, 12, &mut rng);
        save_image(&clear, root.join("clear").join(format!("{i:03}.png"))).unwrap();
        save_image(&rainy, root.join("rainy").join(format!("{i:03}.png"))).unwrap();
    }
}

fn toy_config(data: &Path, out: &Path, steps: u64) -> String {
    let d = data.display();
    let mut s = format!(
        r#"seed = 11
output_dir = "{out}"

[model]
depth = 1
base_channels = 8
downsampling = 4

[data.recognition]
rainy = "{d}/rainy"
clear = "{d}/clear"

[data.reconstruction]
clear = ["{d}/clear"]

[data.distillation]
rainy = ["{d}/rainy"]

[data.finetune]
input = "{d}/rainy"
gt = "{d}/clear"

[data.evaluation]
input = "{d}/rainy"
gt = "{d}/clear"
"#,
        out = out.display()
    );
    for stage in Stage::ALL {
        let (enc, dec) = if stage == Stage::Finetune { (1e-4, 1e-3) } else { (1e-3, 1e-3) };
        s.push_str(&format!(
            "\n[stages.{stage}]\nencoder_lr = {enc:e}\ndecoder_lr = {dec:e}\nbatch_size = 2\ncrop_size = 16\nmax_steps = {steps}\neval_interval = 2\n"
        ));
    }
    s
}

fn config_error(text: &str) -> (String, Option<usize>, String) {
    match PipelineConfig::from_toml_str(text) {
        Err(PipelineError::Config { key, line, message }) => (key, line, message),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn empty_config_resolves_stage_defaults() {
    let cfg = PipelineConfig::from_toml_str("").unwrap();
    for stage in Stage::ALL {
        let d = StageConfig::defaults(stage, 1);
        let s = cfg.stages.get(stage);
        assert_eq!(s.crop_size, Some(256));
        assert_eq!(s.encoder_lr, Some(d.encoder_lr));
        assert_eq!(s.decoder_lr, Some(d.decoder_lr));
        assert_eq!(s.batch_size, Some(d.batch_size));
        assert_eq!(s.max_steps, None);
    }
    assert_eq!(cfg.teachers(), TeacherSet::Both);
    assert!(!cfg.finetune_from_scratch());
    assert_eq!(cfg.output_dir, PathBuf::from("runs"));
}

#[test]
fn finetune_learning_rate_ordering_is_enforced_with_key_and_line() {
    let text = "seed = 1\n\n[stages.finetune]\nencoder_lr = 1e-3\ndecoder_lr = 1e-4\n";
    let (key, line, _) = config_error(text);
    assert_eq!(key, "stages.finetune.encoder_lr");
    assert_eq!(line, Some(4));
}

#[test]
fn unknown_key_reports_path_and_line() {
    let text = "seed = 1\n\n[stages.recog]\nbatch_size = 2\nlearning_rate = 0.1\n";
    let (key, line, message) = config_error(text);
    assert!(key.contains("stages.recog"), "{key}");
    assert!(line.is_some(), "no line for {message}");
    assert!(message.contains("learning_rate"), "{message}");
}

#[test]
fn bad_type_reports_exact_key_and_line() {
    let text = "[model]\ndepth = \"two\"\n";
    let (key, line, _) = config_error(text);
    assert_eq!(key, "model.depth");
    assert_eq!(line, Some(2));
}

#[test]
fn stage_specific_keys_are_rejected_elsewhere() {
    let (key, ..) = config_error("[stages.recog]\nteachers = \"recog\"\n");
    assert_eq!(key, "stages.recog.teachers");
    let (key, ..) = config_error("[stages.distill]\nfrom_scratch = true\n");
    assert_eq!(key, "stages.distill.from_scratch");
    let (key, line, _) = config_error("[inference]\ntiled = true\ntile = 30\noverlap = 8\n");
    assert_eq!(key, "inference.tile");
    assert_eq!(line, Some(3));
}

#[test]
fn resolved_echo_is_a_fixpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_toml_str(&toy_config(dir.path(), &dir.path().join("out"), 3)).unwrap();
    let echo = cfg.to_toml();
    let again = PipelineConfig::from_toml_str(&echo).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.to_toml(), echo);
}

#[test]
fn load_config_checks_paths_and_applies_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    fs::write(&path, toy_config(&dir.path().join("absent"), &dir.path().join("out"), 1)).unwrap();
    match load_config(&path) {
        Err(PipelineError::Config { key, .. }) => assert_eq!(key, "data.recognition.rainy"),
        other => panic!("{other:?}"),
    }

    toy_tree(dir.path(), 2, 16, 0);
    fs::write(&path, toy_config(dir.path(), &dir.path().join("out"), 1)).unwrap();
    assert_eq!(load_config(&path).unwrap().output_dir, dir.path().join("out"));
    std::env::set_var(OUTPUT_DIR_ENV, dir.path().join("elsewhere"));
    let cfg = load_config(&path);
    std::env::remove_var(OUTPUT_DIR_ENV);
    assert_eq!(cfg.unwrap().output_dir, dir.path().join("elsewhere"));
}

#[test]
fn missing_step_budget_names_the_key() {
    let cfg = PipelineConfig::from_toml_str("").unwrap();
    match cfg.stage_config(Stage::Recon) {
        Err(PipelineError::Config { key, .. }) => assert_eq!(key, "stages.recon.max_steps"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn exit_codes_are_stable() {
    let c = PipelineError::Config {
        key: "a.b".into(),
        line: Some(3),
        message: "bad".into(),
    };
    assert_eq!(c.exit_code(), 1);
    assert_eq!(c.to_string(), "configuration error at `a.b` (line 3): bad");
    assert_eq!(PipelineError::Missing(vec![]).exit_code(), 2);
    assert_eq!(PipelineError::Runtime("x".into()).exit_code(), 3);
}

#[test]
fn distill_without_teachers_names_both_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    toy_tree(dir.path(), 2, 16, 1);
    let out = dir.path().join("out");
    let cfg = PipelineConfig::from_toml_str(&toy_config(dir.path(), &out, 2)).unwrap();
    match train_stage(&cfg, Stage::Distill) {
        Err(PipelineError::Missing(paths)) => {
            assert_eq!(paths, vec![out.join("recog.best.ckpt"), out.join("recon.best.ckpt")]);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(prerequisites(&cfg, Stage::Finetune), vec![out.join("distill.best.ckpt")]);
}

#[test]
fn four_stage_toy_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    toy_tree(&dir.path().join("data"), 4, 24, 2);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let cfg = PipelineConfig::from_toml_str(&toy_config(&dir.path().join("data"), &out, 3)).unwrap();
        for stage in Stage::ALL {
            train_stage(&cfg, stage).unwrap();
        }
        let report = evaluate(
            &out.join("finetune.final.ckpt"),
            cfg.data.evaluation.as_ref().unwrap(),
            None,
            &out.join("report.tsv"),
        )
        .unwrap();
        (out, report)
    };
    let (a, ra) = run("a");
    let (b, rb) = run("b");
    for stage in Stage::ALL {
        for name in [stage.best_checkpoint_name(), stage.final_checkpoint_name()] {
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
        }
    }
    assert_eq!(fs::read(a.join("report.tsv")).unwrap(), fs::read(b.join("report.tsv")).unwrap());
    assert_eq!(ra.rows.len(), 8);
    ra.validate().unwrap();
    let parsed = MetricReport::from_tsv(&fs::read_to_string(b.join("report.tsv")).unwrap()).unwrap();
    assert_eq!(parsed.rows.len(), rb.rows.len());
}

#[test]
fn zero_step_budget_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    toy_tree(dir.path(), 2, 16, 3);
    let out = dir.path().join("out");
    let cfg = PipelineConfig::from_toml_str(&toy_config(dir.path(), &out, 0)).unwrap();
    let outcome = train_stage(&cfg, Stage::Recog).unwrap();
    assert_eq!(outcome.state.step, 0);
    assert!(out.join("recog.best.ckpt").is_file());
    assert!(out.join("recog.final.ckpt").is_file());
}

#[test]
fn evaluate_names_missing_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    toy_tree(dir.path(), 2, 16, 4);
    let out = dir.path().join("out");
    let cfg = PipelineConfig::from_toml_str(&toy_config(dir.path(), &out, 0)).unwrap();
    train_stage(&cfg, Stage::Recon).unwrap();
    let data = PairedData {
        input: dir.path().join("rainy"),
        gt: dir.path().join("nowhere"),
    };
    match evaluate(&out.join("recon.final.ckpt"), &data, None, &out.join("r.tsv")) {
        Err(e @ PipelineError::Config { .. }) => assert!(e.to_string().contains("nowhere"), "{e}"),
        other => panic!("{other:?}"),
    }
    match evaluate(&out.join("absent.ckpt"), &data, None, &out.join("r.tsv")) {
        Err(e) => assert_eq!(e.exit_code(), 2),
        Ok(_) => panic!("missing checkpoint accepted"),
    }
}

#[test]
fn derain_continues_past_corrupt_inputs() {
    let dir = tempfile::tempdir().unwrap();
    toy_tree(dir.path(), 3, 20, 5);
    let out = dir.path().join("out");
    let cfg = PipelineConfig::from_toml_str(&toy_config(dir.path(), &out, 0)).unwrap();
    train_stage(&cfg, Stage::Recon).unwrap();
    let ckpt = out.join("recon.final.ckpt");

    let summary = derain_paths(&ckpt, &dir.path().join("rainy"), &dir.path().join("d1"), None).unwrap();
    assert_eq!(summary.outputs.len(), 3);
    assert!(summary.failures.is_empty());

    fs::write(dir.path().join("rainy").join("001.png"), b"not a png").unwrap();
    let summary = derain_paths(&ckpt, &dir.path().join("rainy"), &dir.path().join("d2"), None).unwrap();
    assert_eq!(summary.outputs.len(), 2);
    assert_eq!(summary.failures.len(), 1);
    assert!(summary.failures[0].0.ends_with("001.png"));
    assert!(!dir.path().join("d2").join("001.png").exists());
    assert_eq!(
        derained_name(Path::new("x/photo.jpg"), Path::new("o")),
        PathBuf::from("o/photo.png")
    );
}

#[test]
fn tsne_of_two_single_image_corpora() {
    let dir = tempfile::tempdir().unwrap();
    toy_tree(dir.path(), 1, 32, 6);
    let corpora = [
        Corpus::load("clear", &dir.path().join("clear")).unwrap(),
        Corpus::load("rainy", &dir.path().join("rainy")).unwrap(),
    ];
    let (rows, _) = analyze_tsne(&corpora, 30.0, 300, 9, &dir.path().join("a")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0].group, rows[1].group);
    let tsv = fs::read(dir.path().join("a/tsne.tsv")).unwrap();
    analyze_tsne(&corpora, 30.0, 300, 9, &dir.path().join("b")).unwrap();
    assert_eq!(tsv, fs::read(dir.path().join("b/tsne.tsv")).unwrap());
    assert!(dir.path().join("a/tsne.png").is_file());
}

#[test]
fn niqe_scores_blurred_corpus_higher() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for sub in ["pristine", "sharp", "blurred"] {
        fs::create_dir_all(dir.path().join(sub)).unwrap();
    }
    for i in 0..12 {
        save_image(&dead_leaves(96, 96, &mut rng), dir.path().join(format!("pristine/{i:02}.png"))).unwrap();
    }
    for i in 0..6 {
        let img = dead_leaves(96, 96, &mut rng);
        save_image(&img, dir.path().join(format!("sharp/{i}.png"))).unwrap();
        save_image(&gaussian_blur(&img, 2.0, 6).unwrap(), dir.path().join(format!("blurred/{i}.png"))).unwrap();
    }
    let pristine = Corpus::load("pristine", &dir.path().join("pristine")).unwrap();
    let corpora = [
        Corpus::load("sharp", &dir.path().join("sharp")).unwrap(),
        Corpus::load("blurred", &dir.path().join("blurred")).unwrap(),
    ];
    let rows = analyze_niqe(&pristine, &corpora, 32, &dir.path().join("n")).unwrap();
    let mean = |name: &str| {
        let v: Vec<f64> = rows.iter().filter(|r| r.corpus == name).map(|r| r.score.unwrap()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean("blurred") > mean("sharp"), "{} vs {}", mean("blurred"), mean("sharp"));
    for f in ["niqe.tsv", "niqe_sharp.png", "niqe_blurred.png"] {
        assert!(dir.path().join("n").join(f).is_file(), "{f}");
    }
}

#[test]
fn provenance_records_config_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_toml_str("seed = 5").unwrap();
    let path = Provenance::new("train recog", Some(&cfg))
        .seed("tsne", 3)
        .arg("config", "c.toml")
        .write(dir.path(), "recog")
        .unwrap();
    assert_eq!(path, dir.path().join("recog.provenance.toml"));
    let text = fs::read_to_string(path).unwrap();
    assert!(text.contains("train recog"));
    assert!(text.contains("build"));
    assert!(text.contains("seed = 5"));
    assert!(text.contains("tsne = 3"));
}
