use std::path::Path;
use std::process::{Command, Output};

use idbench::degrade::AlignedFace;
use idbench::manifest::load_manifest;
use idbench::search::load_results;

fn idbench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idbench"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn simulate(dir: &Path, seed: u64) {
    std::fs::write(
        dir.join(format!("spec{seed}.json")),
        format!(
            r#"{{"identities": 40, "images_per_identity": 4, "dim": 32,
                "intra_class_concentration": 1.0, "degradation_shift": 0.3, "seed": {seed}}}"#
        ),
    )
    .unwrap();
    let out = idbench(dir, &["simulate", "--spec", &format!("spec{seed}.json"), "--out", &format!("sim{seed}")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn config(dir: &Path, name: &str, sim: &str, seed: u64, conditions: &str) {
    std::fs::write(
        dir.join(name),
        format!(
            r#"{{"manifest_path": "{sim}/manifest.csv", "matcher_name": "m",
                "embeddings_path": "{sim}/embeddings.oidemb", "demographics": ["CF"],
                "seed": {seed}, "conditions": [{conditions}], "gallery_policies": ["all"],
                "output_dir": "out_{name}"}}"#
        ),
    )
    .unwrap();
}

#[test]
fn run_metrics_and_diff() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 1);
    simulate(dir, 2);
    config(dir, "a.json", "sim1", 0, r#""sunglasses""#);
    config(dir, "b.json", "sim2", 0, r#""sunglasses""#);
    config(dir, "c.json", "sim1", 0, r#""blur""#);
    for c in ["a.json", "b.json", "c.json"] {
        let out = idbench(dir, &["run", "--config", c]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }

    let same = idbench(dir, &["diff", "out_a.json", "out_a.json"]);
    assert_eq!(same.status.code(), Some(0));

    let reseeded = idbench(dir, &["diff", "out_a.json", "out_b.json"]);
    assert_eq!(reseeded.status.code(), Some(1));
    let table = String::from_utf8_lossy(&reseeded.stdout);
    let nonzero = table
        .lines()
        .skip(1)
        .filter(|l| l.split(',').skip(1).any(|v| v.parse::<f64>().unwrap() != 0.0))
        .count();
    assert!(nonzero >= 2, "{table}");

    let mismatch = idbench(dir, &["diff", "out_a.json", "out_c.json"]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("grid mismatch"));

    let cells = dir.join("out_a.json/cells");
    let metrics = idbench(
        dir,
        &[
            "metrics",
            "--results",
            cells.join("m__CF__sunglasses__none/results.csv").to_str().unwrap(),
            "--baseline",
            cells.join("m__CF__original__none/results.csv").to_str().unwrap(),
        ],
    );
    assert_eq!(metrics.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&metrics.stdout).unwrap();
    assert!(report["wasserstein_shift"].as_f64().unwrap() > 0.0);

    // fpir table agrees with the negative diffs in each results file
    let fpir = std::fs::read_to_string(dir.join("out_a.json/tables/fpir.csv")).unwrap();
    for row in fpir.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        let results = load_results(cells.join(format!("m__CF__{}__{}/results.csv", f[0], f[1]))).unwrap();
        let negative = results.iter().filter(|r| r.diff.is_sign_negative()).count();
        assert_eq!(format!("{:.3}", 100.0 * negative as f64 / results.len() as f64), f[2]);
    }
}

#[test]
fn exit_codes_for_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir, 3);
    config(dir, "empty.json", "sim3", 0, "");
    assert_eq!(idbench(dir, &["run", "--config", "empty.json"]).status.code(), Some(2));
    assert_eq!(idbench(dir, &["run", "--config", "absent.json"]).status.code(), Some(1));

    let mut spec = r#"{"identities": 6, "images_per_identity": 3, "dim": 16,
        "intra_class_concentration": 1.0, "degradation_shift": 0.3, "seed": 1,
        "conditions": ["blur"]}"#
        .to_string();
    std::fs::write(dir.join("blur_only.json"), &spec).unwrap();
    assert!(idbench(dir, &["simulate", "--spec", "blur_only.json", "--out", "blur_only"]).status.success());
    config(dir, "cell.json", "blur_only", 0, r#""sunglasses""#);
    let out = idbench(dir, &["run", "--config", "cell.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m__CF__sunglasses__none"));

    spec = spec.replace("\"dim\": 16", "\"dim\": 4");
    std::fs::write(dir.join("bad_spec.json"), &spec).unwrap();
    assert_eq!(idbench(dir, &["simulate", "--spec", "bad_spec.json", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn degrade_corpus_from_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::create_dir(dir.join("faces")).unwrap();
    let mut manifest = String::from("image_id,subject_id,session_id,capture_order,demographic,condition,params,variant_of,source_path\n");
    let mut landmarks = String::from("image_id,left_eye_x,left_eye_y,right_eye_x,right_eye_y,nose_x,nose_y\n");
    for (i, id) in ["a1", "a2", "b1"].iter().enumerate() {
        let px: Vec<u8> = (0..48 * 48 * 3).map(|k| ((k * 31 + i * 7) % 256) as u8).collect();
        AlignedFace::new(48, 48, px, None).unwrap().save_png(dir.join(format!("faces/{id}.png"))).unwrap();
        manifest.push_str(&format!("{id},{},s{i},{},CF,original,,,{id}.png\n", &id[..1], i + 1));
        landmarks.push_str(&format!("{id},16,20,32,20,24,32\n"));
    }
    std::fs::write(dir.join("manifest.csv"), manifest).unwrap();
    std::fs::write(dir.join("landmarks.csv"), landmarks).unwrap();

    let args = |seed: &str, out: &str| {
        vec![
            "degrade", "--op", "sunglasses+blur", "--sigma", "2", "--seed", seed, "--in", "faces", "--out", out,
            "--manifest", "manifest.csv", "--landmarks", "landmarks.csv",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    for out in ["d1", "d2"] {
        let a = args("5", out);
        let o = idbench(dir, &a.iter().map(|s| s.as_str()).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let m = load_manifest(dir.join("d1/manifest.csv")).unwrap();
    assert_eq!(m.len(), 6);
    assert!(m.get("a1__sunglasses_blur").is_some());
    for id in ["a1", "a2", "b1"] {
        let f = format!("{id}__sunglasses_blur.png");
        assert_eq!(std::fs::read(dir.join("d1").join(&f)).unwrap(), std::fs::read(dir.join("d2").join(&f)).unwrap());
    }

    let no_sigma = idbench(
        dir,
        &["degrade", "--op", "blur", "--in", "faces", "--out", "d3", "--manifest", "manifest.csv"],
    );
    assert_eq!(no_sigma.status.code(), Some(2));
    let no_landmarks = idbench(
        dir,
        &["degrade", "--op", "sunglasses", "--in", "faces", "--out", "d4", "--manifest", "manifest.csv"],
    );
    assert_eq!(no_landmarks.status.code(), Some(2));
}
