use std::path::Path;
use std::process::{Command, Output};

use quadshade::io::{self, ProposalContainer};
use quadshade::reconstruct::auto_lambda;
use quadshade::Grid2;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadshade"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn synth(dir: &Path, seed: &str, size: &str) {
    ok(&["synth", "--seed", seed, "--size", size, "--out-dir", p(dir)]);
}

#[test]
fn synth_is_byte_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, "1", "128");
    synth(&b, "1", "128");
    for f in ["image.pfm", "depth_true.pfm", "mask.pgm", "scene.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs");
    }
    let img = io::read_pfm(&a.join("image.pfm")).unwrap();
    assert_eq!(img.shape(), (128, 128));
}

#[test]
fn negative_noise_names_the_field() {
    let t = tempfile::tempdir().unwrap();
    let (c, err) = code(&["synth", "--noise", "-0.1", "--out-dir", p(t.path())]);
    assert_eq!(c, 2);
    assert!(err.contains("noise_sigma"), "{err}");
}

#[test]
fn light_elevation_reaches_scene_file() {
    let t = tempfile::tempdir().unwrap();
    ok(&["synth", "--size", "32", "--light-elev", "60", "--out-dir", p(t.path())]);
    let scene = read_json(&t.path().join("scene.json"));
    let z = scene["light"][2].as_f64().unwrap();
    assert!((z - 60f64.to_radians().sin()).abs() < 1e-12);
    assert!((z - 0.8660).abs() < 1e-4);
}

#[test]
fn unknown_config_keys_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.json");
    std::fs::write(&cfg, r#"{"synth": {"size": 3}}"#).unwrap();
    let (c, _) = code(&["synth", "--config", p(&cfg), "--out-dir", p(t.path())]);
    assert_eq!(c, 2);
}

#[test]
fn infer_covers_every_interior_patch() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("s"), "2", "128");
    let out = t.path().join("p.json");
    ok(&[
        "infer",
        "--image",
        p(&t.path().join("s/image.pfm")),
        "--sizes",
        "5",
        "--J",
        "3",
        "--out",
        p(&out),
    ]);
    let c = ProposalContainer::from_json(&std::fs::read(&out).unwrap()).unwrap();
    let s = &c.proposals.scales[0];
    assert_eq!(s.sets.len() + s.skipped.len(), 124 * 124);
    assert_eq!(s.sets.len(), 124 * 124);
    assert!(s.sets.iter().all(|set| set.proposals.len() == 3));
}

#[test]
fn infer_output_ignores_worker_count_and_surfaces_defaults() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("s"), "3", "40");
    let image = t.path().join("s/image.pfm");
    let mask = t.path().join("s/mask.pgm");
    let mut outs = Vec::new();
    for w in ["1", "4", "8"] {
        let out = t.path().join(format!("p{w}.json"));
        ok(&[
            "infer", "--image", p(&image), "--mask", p(&mask), "--light-elev", "60", "--sizes", "5,9", "--J", "7",
            "--workers", w, "--out", p(&out),
        ]);
        outs.push(std::fs::read(&out).unwrap());
    }
    assert!(outs.iter().all(|o| *o == outs[0]));

    let resolved = read_json(&t.path().join("p1.config.json"));
    assert_eq!(resolved["noise"]["sigma_i"].as_f64(), Some(0.01));
    assert_eq!(resolved["workers"].as_u64(), Some(1));
    let c = ProposalContainer::from_json(&outs[0]).unwrap();
    assert_eq!(c.header.noise.sigma_i, 0.01);
    assert_eq!(c.header.config["noise"]["sigma_i"].as_f64(), Some(0.01));
    assert_eq!(c.header.solver.max_iters, 200);
}

#[test]
fn inconsistent_image_exits_4() {
    let t = tempfile::tempdir().unwrap();
    for (name, v) in [("dark", 0.0), ("bright", 2.0)] {
        let img = t.path().join(format!("{name}.pfm"));
        io::write_pfm(&img, &Grid2::filled(20, 20, v)).unwrap();
        let (c, err) = code(&["infer", "--image", p(&img), "--sizes", "5", "--J", "5", "--out", p(&t.path().join("o.json"))]);
        assert_eq!(c, 4, "{name}: {err}");
    }
}

#[test]
fn io_failures_exit_3() {
    let t = tempfile::tempdir().unwrap();
    let (c, _) = code(&["reconstruct", "--proposals", p(&t.path().join("missing.json")), "--out", p(t.path())]);
    assert_eq!(c, 3);
    let img = t.path().join("cut.pfm");
    let bytes = io::encode_pfm(&Grid2::filled(20, 20, 0.5));
    std::fs::write(&img, &bytes[..bytes.len() - 10]).unwrap();
    let (c, err) = code(&["infer", "--image", p(&img), "--out", p(&t.path().join("o.json"))]);
    assert_eq!(c, 3);
    assert!(err.contains("ends early"), "{err}");
}

#[test]
fn reconstruct_pipeline() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("s"), "4", "40");
    let props = t.path().join("p.json");
    ok(&[
        "infer", "--image", p(&t.path().join("s/image.pfm")), "--sizes", "5,9", "--J", "11", "--out", p(&props),
    ]);
    let mut depths = Vec::new();
    for w in ["1", "4"] {
        let out = t.path().join(format!("r{w}"));
        ok(&["reconstruct", "--proposals", p(&props), "--workers", w, "--out", p(&out)]);
        depths.push(std::fs::read(out.join("depth.pfm")).unwrap());
        assert_eq!(
            std::fs::read(out.join("labels.json")).unwrap(),
            std::fs::read(t.path().join("r1/labels.json")).unwrap()
        );
    }
    assert_eq!(depths[0], depths[1]);

    let out = t.path().join("r1");
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["converged"], Value::Bool(true));
    let trace = report["reconstruction"]["trace"].as_array().unwrap();
    assert!(trace.len() > 3);
    for w in trace.windows(2) {
        // annealing changes λ' = σ²λ every round, so compare within a (stage, σ) segment
        if w[0]["stage"] == w[1]["stage"] && w[0]["sigma"] == w[1]["sigma"] {
            let (a, b) = (w[0]["cost"].as_f64().unwrap(), w[1]["cost"].as_f64().unwrap());
            assert!(b <= a + 1e-9 * a.abs().max(1.0), "cost rose within {}: {a} -> {b}", w[0]["stage"]);
        }
    }

    let c = ProposalContainer::from_json(&std::fs::read(&props).unwrap()).unwrap();
    let lambda = auto_lambda(&c.proposals, None).unwrap();
    assert_eq!(report["lambda"].as_f64(), Some(lambda));
    assert_eq!(report["d_phi"].as_f64(), Some(10.0 / lambda));

    let labels = read_json(&out.join("labels.json"));
    assert_eq!(labels["patches"].as_array().unwrap().len(), c.proposals.patch_count());

    let eval = t.path().join("e.json");
    ok(&["eval", "--est", p(&out.join("depth.pfm")), "--truth", p(&t.path().join("s/depth_true.pfm")), "--out", p(&eval)]);
    let median = read_json(&eval)["quantiles"]["q50"].as_f64().unwrap();
    assert!(median < 15.0, "median error {median}");
}

#[test]
fn eval_examples() {
    let t = tempfile::tempdir().unwrap();
    let truth = Grid2::from_fn(16, 16, |r, c| ((r * r) as f64 * 0.05 - (c as f64 * 0.3).sin()));
    let shifted = truth.map(|v| v + 5.0);
    let mirrored = Grid2::from_fn(16, 16, |r, c| truth.at(r, 15 - c));
    let planar = Grid2::from_fn(16, 16, |_, c| 0.2 * c as f64);
    let flat = Grid2::filled(16, 16, 0.0);
    let write = |name: &str, g: &Grid2<f64>| {
        let path = t.path().join(name);
        io::write_pfm(&path, g).unwrap();
        path
    };
    let (tp, sp, mp, pp, fp) = (
        write("truth.pfm", &truth),
        write("shift.pfm", &shifted),
        write("mirror.pfm", &mirrored),
        write("planar.pfm", &planar),
        write("flat.pfm", &flat),
    );
    let report = |est: &Path, truth: &Path| {
        let out = t.path().join("r.json");
        let csv = t.path().join("r.csv");
        ok(&["eval", "--est", p(est), "--truth", p(truth), "--out", p(&out), "--csv", p(&csv), "--method", "m"]);
        let v = read_json(&out);
        assert_eq!(v["metadata"]["method"], "m");
        let rows = std::fs::read_to_string(&csv).unwrap().lines().count();
        assert_eq!(rows, 1 + 256);
        v
    };
    assert!(report(&sp, &tp)["quantiles"]["q75"].as_f64().unwrap() < 1e-4);
    assert!(report(&mp, &tp)["quantiles"]["q50"].as_f64().unwrap() > 1.0);
    let q = report(&fp, &pp)["quantiles"]["q50"].as_f64().unwrap();
    assert!((q - 0.2f64.atan().to_degrees()).abs() < 1e-4, "{q}");
    assert!((q - 11.31).abs() < 0.01);
}
