//! Integration tests driving the compiled binary end to end on real files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stereovol_core::eval::{MetricsReport, PredictionSet};
use stereovol_core::nutrition::NutrientProfile;
use stereovol_core::synthetic::{write_png_dataset, SyntheticSpec};
use stereovol_core::training::{RunManifest, TrainRow};
use stereovol_core::types::ManifestRecord;
use stereovol_core::vlm::{
    run_vlm_baseline, ChatTransport, RecordingTransport, RetryPolicy, VlmMode, VlmQuery,
};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stereovol"));
    // Keep subprocesses off any live endpoint the outer environment has.
    cmd.env_remove("STEREOVOL_VLM_ENDPOINT");
    cmd.env_remove("STEREOVOL_VLM_TOKEN");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn expect_exit(cmd: &mut Command, code: i32) -> String {
    let out = cmd.output().expect("binary runs");
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "stderr: {stderr}");
    stderr
}

fn small_dataset(dir: &Path) -> PathBuf {
    let spec = SyntheticSpec {
        items_per_class: 8,
        frames_per_item: 4,
        image_width: 16,
        image_height: 16,
        ..SyntheticSpec::default()
    };
    write_png_dataset(&spec, dir).expect("dataset written")
}

fn write_config(path: &Path, output_dir: &Path) {
    let text = format!(
        "image_encoder = \"test:16:0\"\n\
         text_encoder = \"test:16:0\"\n\
         epochs = 40\n\
         batch_size = 16\n\
         projection_dim = 32\n\
         standardize_volumes = true\n\
         log_level = \"quiet\"\n\
         output_dir = \"{}\"\n",
        output_dir.display()
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn end_to_end_on_disk_flow() {
    let dir = tempfile::tempdir().unwrap();
    let index = small_dataset(dir.path());
    let out_root = dir.path().join("out");
    let cfg = dir.path().join("run.toml");
    write_config(&cfg, &out_root);

    let ingest_dir = dir.path().join("ingest");
    run_ok(bin()
        .args(["ingest", "--index"])
        .arg(&index)
        .arg("--out")
        .arg(&ingest_dir)
        .arg("--config")
        .arg(&cfg));
    let train_manifest = ingest_dir.join("train.manifest.jsonl");
    let test_manifest = ingest_dir.join("test.manifest.jsonl");
    assert!(train_manifest.exists() && test_manifest.exists());
    assert!(ingest_dir.join("run.json").exists());

    // build-priors with no --out lands under the configured output_dir.
    run_ok(bin()
        .args(["build-priors", "--manifest"])
        .arg(&train_manifest)
        .arg("--config")
        .arg(&cfg));
    let priors = out_root.join("priors.json");
    assert!(priors.exists() && out_root.join("priors.run.json").exists());

    let train_dir = dir.path().join("train");
    run_ok(bin()
        .args(["train", "--train-manifest"])
        .arg(&train_manifest)
        .arg("--out")
        .arg(&train_dir)
        .arg("--config")
        .arg(&cfg));
    let checkpoint = train_dir.join("checkpoint.json");
    assert!(checkpoint.exists());
    assert!(train_dir.join("checkpoint.best.json").exists());
    let manifest = RunManifest::load(&train_dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.epoch_losses.len(), 40);
    assert!(manifest.epoch_losses[39].total < manifest.epoch_losses[0].total);

    let predictions = dir.path().join("predictions.jsonl");
    let mut predict_cmd = bin();
    predict_cmd
        .args(["predict", "--checkpoint"])
        .arg(&checkpoint)
        .arg("--manifest")
        .arg(&test_manifest)
        .arg("--priors")
        .arg(&priors)
        .arg("--out")
        .arg(&predictions)
        .arg("--config")
        .arg(&cfg);
    run_ok(&mut predict_cmd);
    let first_bytes = std::fs::read(&predictions).unwrap();

    // Identical invocation, identical bytes.
    run_ok(&mut predict_cmd);
    assert_eq!(std::fs::read(&predictions).unwrap(), first_bytes);

    let eval_dir = dir.path().join("eval");
    run_ok(bin()
        .args(["evaluate", "--predictions"])
        .arg(&predictions)
        .arg("--out")
        .arg(&eval_dir)
        .arg("--config")
        .arg(&cfg));
    let metrics = MetricsReport::load(&eval_dir.join("metrics.json")).unwrap();
    assert!(metrics.mape_percent < 40.0, "sanity bound, got {}", metrics.mape_percent);
    let cdf = std::fs::read_to_string(eval_dir.join("cdf.csv")).unwrap();
    assert!(cdf.starts_with("abs_error_ml,cumulative_fraction"));
    let kde = std::fs::read_to_string(eval_dir.join("kde.csv")).unwrap();
    assert!(kde.starts_with("percent_error,density"));
    assert_eq!(kde.lines().count(), 513, "header plus one line per grid point");

    // A doubled-error baseline makes the improvement row negative.
    let mut baseline = metrics.clone();
    baseline.mae_ml *= 2.0;
    baseline.mape_percent *= 2.0;
    let baseline_path = dir.path().join("baseline.json");
    baseline.save(&baseline_path).unwrap();
    let report_path = dir.path().join("report.txt");
    let out = run_ok(bin()
        .arg("report")
        .arg(&baseline_path)
        .arg(eval_dir.join("metrics.json"))
        .arg("--out")
        .arg(&report_path)
        .arg("--config")
        .arg(&cfg));
    let table = std::fs::read_to_string(&report_path).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), table);
    assert!(table.contains("baseline") && table.contains("metrics"));
    assert!(table.contains("improvement") && table.contains("-50.0%"), "table:\n{table}");

    // Nutrition: class labels double as food codes.
    let profiles: Vec<NutrientProfile> = ["apple", "bagel", "croissant", "dumpling", "eclair"]
        .iter()
        .map(|code| NutrientProfile {
            food_code: code.to_string(),
            energy_kcal: 100.0,
            protein_g: 2.0,
            carbohydrate_g: 20.0,
            fat_g: 1.0,
            reference_volume_ml: 100.0,
        })
        .collect();
    let db_path = dir.path().join("db.json");
    std::fs::write(&db_path, serde_json::to_string(&profiles).unwrap()).unwrap();
    let nutrition_path = dir.path().join("nutrition.json");
    run_ok(bin()
        .args(["nutrition", "--predictions"])
        .arg(&predictions)
        .arg("--db")
        .arg(&db_path)
        .arg("--out")
        .arg(&nutrition_path)
        .arg("--config")
        .arg(&cfg));
    let nutrition: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&nutrition_path).unwrap()).unwrap();
    assert_eq!(nutrition["rows"].as_array().unwrap().len(), metrics.n_items);
}

#[test]
fn exit_codes_follow_error_families() {
    let dir = tempfile::tempdir().unwrap();

    // Config family: unknown key fails before any work.
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "epochss = 5\n").unwrap();
    let stderr = expect_exit(
        bin().args(["train", "--train-manifest", "none.jsonl", "--config"]).arg(&bad_cfg),
        2,
    );
    assert!(stderr.starts_with("error[config]:"), "stderr: {stderr}");

    // Config family: nondeterministic mode is refused.
    let nondet_cfg = dir.path().join("nondet.toml");
    std::fs::write(&nondet_cfg, "deterministic = false\n").unwrap();
    expect_exit(
        bin().args(["train", "--train-manifest", "none.jsonl", "--config"]).arg(&nondet_cfg),
        2,
    );

    // Io family: missing input file.
    let stderr = expect_exit(
        bin().args(["evaluate", "--predictions", "missing.jsonl", "--out"]).arg(dir.path()),
        8,
    );
    assert!(stderr.starts_with("error[io]:"), "stderr: {stderr}");

    // Model family: checkpoint from an unsupported format version.
    let stale = dir.path().join("stale.json");
    let mut ckpt = test_checkpoint();
    ckpt.version = 999;
    ckpt.save(&stale).unwrap();
    let manifest_path = dir.path().join("m.jsonl");
    write_two_item_manifest(&manifest_path, dir.path());
    let priors_path = dir.path().join("p.json");
    std::fs::write(
        &priors_path,
        "{\"entries\":{\"apple\":100.0},\"source\":\"train-split\"}",
    )
    .unwrap();
    let stderr = expect_exit(
        bin()
            .args(["predict", "--checkpoint"])
            .arg(&stale)
            .arg("--manifest")
            .arg(&manifest_path)
            .arg("--priors")
            .arg(&priors_path)
            .arg("--out")
            .arg(dir.path().join("preds.jsonl")),
        4,
    );
    assert!(stderr.starts_with("error[model]:"), "stderr: {stderr}");

    // Data family: nutrient database lacks the predicted food code.
    let preds_path = dir.path().join("preds.jsonl");
    let preds = PredictionSet::new(vec![stereovol_core::eval::PredictionRow {
        item_id: "a".into(),
        class_label: "apple".into(),
        volume_est_ml: 100.0,
        volume_gt_ml: 110.0,
        predicted_class: None,
        prompt: None,
        clipped: false,
    }])
    .unwrap();
    preds.save_jsonl(&preds_path).unwrap();
    let db_path = dir.path().join("db.json");
    let other = vec![NutrientProfile {
        food_code: "banana".into(),
        energy_kcal: 1.0,
        protein_g: 1.0,
        carbohydrate_g: 1.0,
        fat_g: 1.0,
        reference_volume_ml: 100.0,
    }];
    std::fs::write(&db_path, serde_json::to_string(&other).unwrap()).unwrap();
    let stderr = expect_exit(
        bin()
            .args(["nutrition", "--predictions"])
            .arg(&preds_path)
            .arg("--db")
            .arg(&db_path)
            .arg("--out")
            .arg(dir.path().join("n.json")),
        3,
    );
    assert!(stderr.starts_with("error[data]:"), "stderr: {stderr}");

    // Client family: replaying against a tape with no matching fixture.
    let tape_path = dir.path().join("empty.tape.jsonl");
    stereovol_core::vlm::FixtureTape::new().save(&tape_path).unwrap();
    let stderr = expect_exit(
        bin()
            .args(["vlm-baseline", "--mode", "stereo", "--manifest"])
            .arg(&manifest_path)
            .arg("--replay")
            .arg(&tape_path)
            .arg("--out")
            .arg(dir.path().join("v.jsonl"))
            .args(["--max-attempts", "1"]),
        7,
    );
    assert!(stderr.starts_with("error[client]:"), "stderr: {stderr}");
}

fn test_checkpoint() -> stereovol_core::training::checkpoint::Checkpoint {
    use stereovol_core::model::{FeatureMask, FusionModelParams, ModelDims, VolumeScaler};
    let dims = ModelDims {
        image_dim: 4,
        image_count: 2,
        text_dim: 4,
        num_classes: 2,
        projection_dim: 4,
        classifier_hidden: None,
        regression_hidden: 2,
    };
    stereovol_core::training::checkpoint::Checkpoint {
        version: 1,
        config: stereovol_core::TrainConfig {
            image_count: 2,
            projection_dim: 4,
            ..stereovol_core::TrainConfig::default()
        },
        image_encoder: "test:4:0".into(),
        text_encoder: "test:4:0".into(),
        template: stereovol_core::priors::PromptTemplate::by_id(0).unwrap(),
        volume_decimals: 1,
        mask: FeatureMask::Full,
        class_names: vec!["apple".into(), "bagel".into()],
        scaler: VolumeScaler::identity(),
        params: FusionModelParams::init(&dims, 0).unwrap(),
    }
}

/// Two manifest rows pointing at tiny PNGs that exist on disk.
fn write_two_item_manifest(path: &Path, dir: &Path) -> Vec<ManifestRecord> {
    let mut records = Vec::new();
    for (k, class) in ["apple", "apple"].iter().enumerate() {
        let mut frame_paths = Vec::new();
        for side in 0..2 {
            let img = image::RgbImage::from_pixel(2, 2, image::Rgb([k as u8 * 90 + 40, 80, 120 + side * 30]));
            let p = dir.join(format!("frame-{k}-{side}.png"));
            img.save(&p).unwrap();
            frame_paths.push(p.display().to_string());
        }
        records.push(ManifestRecord {
            item_id: format!("item-{k}"),
            class_label: class.to_string(),
            left_image: frame_paths[0].clone(),
            right_image: frame_paths[1].clone(),
            volume_ml: 100.0 + k as f64 * 60.0,
            frame_left: 0,
            frame_right: 2,
        });
    }
    let text: String =
        records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(path, text).unwrap();
    records
}

struct Canned;

impl ChatTransport for Canned {
    fn complete(&self, query: &VlmQuery) -> stereovol_core::error::Result<String> {
        let volume = 150.0 + f64::from(query.cache_key().as_bytes()[0] % 50);
        Ok(format!("{{\"volume_ml\": {volume}, \"explanation\": \"recorded\"}}"))
    }

    fn describe(&self) -> String {
        "canned".into()
    }
}

#[test]
fn vlm_replay_reproduces_a_recorded_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = dir.path().join("test.manifest.jsonl");
    let records = write_two_item_manifest(&manifest_path, dir.path());

    // Record through the library against a canned transport; the binary
    // then replays the tape without any endpoint configured.
    let rows: Vec<TrainRow> =
        records.iter().map(|r| TrainRow::from(&r.to_sample())).collect();
    let canned = Canned;
    let recorder = RecordingTransport::new(&canned);
    let (recorded, _) =
        run_vlm_baseline(&rows, VlmMode::Stereo, &recorder, &RetryPolicy::default()).unwrap();
    let tape_path = dir.path().join("stereo.tape.jsonl");
    recorder.into_tape().save(&tape_path).unwrap();

    let out_path = dir.path().join("vlm.predictions.jsonl");
    let mut cmd = bin();
    cmd.args(["vlm-baseline", "--mode", "stereo", "--manifest"])
        .arg(&manifest_path)
        .arg("--replay")
        .arg(&tape_path)
        .arg("--out")
        .arg(&out_path);
    run_ok(&mut cmd);

    let replayed = PredictionSet::load_jsonl(&out_path).unwrap();
    assert_eq!(replayed.rows(), recorded.rows());
    let run_manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_path.with_extension("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(run_manifest["parsed"], 2);
    assert_eq!(run_manifest["missing"], 0);

    // Replaying twice gives identical bytes.
    let first = std::fs::read(&out_path).unwrap();
    run_ok(&mut cmd);
    assert_eq!(std::fs::read(&out_path).unwrap(), first);
}

#[test]
fn mesh_ground_truth_flows_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let mesh_path = dir.path().join("cube.obj");
    std::fs::write(
        &mesh_path,
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1\n\
         f 1 3 2\nf 1 4 3\nf 5 6 7\nf 5 7 8\nf 1 2 6\nf 1 6 5\nf 2 3 7\nf 2 7 6\n\
         f 3 4 8\nf 3 8 7\nf 4 1 5\nf 4 5 8\n",
    )
    .unwrap();
    let index_path = dir.path().join("sequences.jsonl");
    let record = serde_json::json!({
        "item_id": "cube-item",
        "class_label": "cube",
        "frames": ["a.png", "b.png", "c.png"],
        "mesh": mesh_path.display().to_string(),
    });
    std::fs::write(&index_path, format!("{record}\n")).unwrap();

    // A 1 cm^3 cube scaled by 10 per axis holds one liter.
    let cfg_path = dir.path().join("cfg.toml");
    std::fs::write(&cfg_path, "mesh_unit_scale_to_cm = 10.0\nlog_level = \"quiet\"\n").unwrap();
    let out_dir = dir.path().join("ingest");
    run_ok(bin()
        .args(["ingest", "--index"])
        .arg(&index_path)
        .arg("--out")
        .arg(&out_dir)
        .arg("--config")
        .arg(&cfg_path));

    let train = std::fs::read_to_string(out_dir.join("train.manifest.jsonl")).unwrap();
    let row: ManifestRecord = serde_json::from_str(train.lines().next().unwrap()).unwrap();
    assert!((row.volume_ml - 1000.0).abs() < 1e-9, "got {}", row.volume_ml);
}

#[test]
fn help_exits_zero_and_names_every_command() {
    let out = run_ok(bin().arg("--help"));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for name in
        ["ingest", "build-priors", "train", "predict", "evaluate", "report", "nutrition", "vlm-baseline"]
    {
        assert!(text.contains(name), "help lacks {name}:\n{text}");
    }
    run_ok(bin().args(["train", "--help"]));
}
