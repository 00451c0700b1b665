use std::fs;
use std::process::Command as Proc;

use graffiti_cli::{parse_with_env, Action, CliError, Command, EXIT_ASSERTION, EXIT_IO, EXIT_USAGE};
use graffiti_core::identity::ProjectionMode;
use graffiti_core::pipeline::Order;
use proptest::prelude::*;

fn parse(args: &[&str]) -> Result<Command, CliError> {
    parse_with_env(args.iter().copied(), None)
}

fn bin(args: &[&str], env_seed: Option<&str>) -> (i32, String, String) {
    let mut p = Proc::new(env!("CARGO_BIN_EXE_graffiti"));
    p.args(args).env_remove(graffiti_cli::SEED_ENV);
    if let Some(s) = env_seed {
        p.env(graffiti_cli::SEED_ENV, s);
    }
    let out = p.output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn ablate_order_flags() {
    let c = parse(&["ablate-order", "--faces", "100", "--seed", "7"]).unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.config.seed, 7);
    assert!(matches!(
        c.action,
        Action::AblateOrder {
            faces: 100,
            seeds: 3,
            timing: false,
            ..
        }
    ));
}

#[test]
fn defaults_accepted_and_window_checked() {
    let c = parse(&["render", "--steps", "100", "--window", "25"]).unwrap();
    assert_eq!((c.config.steps, c.config.composition_window), (100, 25));
    let e = parse(&["render", "--window", "200", "--steps", "100"]).unwrap_err();
    assert_eq!(e.exit_code(), EXIT_USAGE);
}

#[test]
fn unknown_flags_and_commands_are_usage_errors() {
    for args in [
        &["render", "--bogus", "1"][..],
        &["paint"],
        &["stylize", "--order", "xy"],
        &[],
    ] {
        assert_eq!(parse(args).unwrap_err().exit_code(), EXIT_USAGE, "{args:?}");
    }
    assert_eq!(parse(&["--help"]).unwrap_err().exit_code(), 0);
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(
        &path,
        r#"{"steps": 60, "composition_window": 15, "seed": 9, "projection": "Optimize"}"#,
    )
    .unwrap();
    let p = path.to_str().unwrap();
    let c = parse(&["render", "--config", p]).unwrap();
    assert_eq!((c.config.steps, c.config.composition_window, c.seed), (60, 15, 9));
    assert_eq!(c.config.projection, ProjectionMode::Optimize);
    let c = parse(&["render", "--config", p, "--window", "5", "--seed", "1"]).unwrap();
    assert_eq!((c.config.steps, c.config.composition_window, c.seed), (60, 5, 1));

    fs::write(&path, r#"{"stepz": 60}"#).unwrap();
    assert_eq!(parse(&["render", "--config", p]).unwrap_err().exit_code(), EXIT_USAGE);
    let missing = dir.path().join("none.json");
    assert_eq!(
        parse(&["render", "--config", missing.to_str().unwrap()])
            .unwrap_err()
            .exit_code(),
        EXIT_USAGE
    );
}

#[test]
fn env_seed_is_a_fallback() {
    let c = parse_with_env(["render"], Some("42")).unwrap();
    assert_eq!(c.seed, 42);
    let c = parse_with_env(["render", "--seed", "3"], Some("42")).unwrap();
    assert_eq!(c.seed, 3);
    assert!(parse_with_env(["render"], Some("x")).is_err());
    assert_eq!(parse(&["render"]).unwrap().seed, 0);
}

#[test]
fn header_round_trips() {
    let c = parse(&[
        "diffuse",
        "--prompt",
        "neon  wall 'tag'",
        "--seed",
        "5",
        "--lr",
        "0.1",
        "--diffusion",
        "true",
    ])
    .unwrap();
    let back = Command::from_header(&c.header()).unwrap();
    assert_eq!(back, c);
    let c = parse(&["stylize", "--order", "sp"]).unwrap();
    assert!(matches!(c.action, Action::Stylize { order: Order::SP, .. }));
    assert_eq!(Command::from_header(&c.header()).unwrap(), c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn header_round_trip_prop(
        seed in any::<u64>(),
        steps in 1usize..300,
        frac in 0.0f64..=1.0,
        guidance in 0.0f64..20.0,
        lambda in 0.0f64..=1.0,
        intensity in 0.0f64..=1.0,
        rank in 1usize..65,
        alpha in 0.01f64..200.0,
        jobs in 0usize..9,
        faces in 1usize..500,
        timing in any::<bool>(),
        prompt in "[a-z]{1,6}( [a-z'\"]{1,6}){0,3}",
    ) {
        let window = ((steps as f64) * frac) as usize;
        let args: Vec<String> = vec![
            "ablate-order".into(), "--faces".into(), faces.to_string(), "--prompt".into(), prompt,
            "--seed".into(), seed.to_string(), "--steps".into(), steps.to_string(),
            "--window".into(), window.to_string(), "--guidance".into(), guidance.to_string(),
            "--subject-guidance".into(), lambda.to_string(), "--intensity".into(), intensity.to_string(),
            "--rank".into(), rank.to_string(), "--alpha".into(), alpha.to_string(), "--jobs".into(), jobs.to_string(),
        ];
        let mut args = args;
        if timing {
            args.push("--timing".into());
        }
        let c = parse_with_env(args, None).unwrap();
        prop_assert_eq!(Command::from_header(&c.header()).unwrap(), c.clone());
        prop_assert_eq!(parse_with_env(c.to_args(), None).unwrap(), c);
    }
}

#[test]
fn ffc_of_identical_files_prints_one() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    fs::write(&a, "0.5, -1.25\n3e-2 7\n").unwrap();
    let (code, out, _) = bin(&["ffc", a.to_str().unwrap(), a.to_str().unwrap()], None);
    assert_eq!((code, out.trim()), (0, "1.000000"));
    let missing = dir.path().join("b.txt");
    assert_eq!(
        bin(&["ffc", a.to_str().unwrap(), missing.to_str().unwrap()], None).0,
        EXIT_IO
    );
    let zero = dir.path().join("z.txt");
    fs::write(&zero, "0 0 0 0").unwrap();
    assert_ne!(bin(&["ffc", a.to_str().unwrap(), zero.to_str().unwrap()], None).0, 0);
}

#[test]
fn diffuse_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let d = dir.path().join(name);
        let (code, out, err) = bin(
            &["diffuse", "--faces", "2", "--out-dir", d.to_str().unwrap()],
            Some("13"),
        );
        assert_eq!(code, 0, "{err}");
        assert!(out.starts_with("diffuse:") && out.lines().count() == 1);
        assert!(err.starts_with("# graffiti diffuse") && err.contains("--seed 13"));
        (
            fs::read(d.join("latents.csv")).unwrap(),
            fs::read(d.join("diffused_001.ppm")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn header_on_stderr_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("r");
    let (code, _, err) = bin(
        &[
            "render",
            "--faces",
            "2",
            "--image-size",
            "40",
            "--out-dir",
            d.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code, 0);
    let header = err.lines().next().unwrap().trim_start_matches("# ");
    let c = Command::from_header(header).unwrap();
    assert_eq!(c.config.image_size, 40);
    assert!(matches!(c.action, Action::Render { faces: 2 }));
    assert_eq!(fs::read(d.join("face_001.ppm")).unwrap()[..9], *b"P6\n40 40\n");
}

#[test]
fn unwritable_out_dir_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    assert_eq!(bin(&["render", "--out-dir", out.to_str().unwrap()], None).0, EXIT_IO);
}

#[test]
fn failed_assertion_exits_three() {
    // a four-face sweep is too small for the identity arm to pull ahead
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("a");
    let args = [
        "ablate-attention",
        "--faces",
        "4",
        "--seeds",
        "3",
        "--train-faces",
        "128",
        "--out-dir",
        d.to_str().unwrap(),
    ];
    let (code, _, err) = bin(&args, None);
    assert_eq!(code, EXIT_ASSERTION, "{err}");
    assert!(err.contains("assertion failed"));
}

#[test]
fn train_then_diffuse_with_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t");
    let (code, out, err) = bin(
        &[
            "train",
            "--faces",
            "16",
            "--train-steps",
            "50",
            "--out-dir",
            t.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("train:"));
    let losses = fs::read_to_string(t.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().filter(|l| l.starts_with("denoiser,")).count(), 50);
    let d = dir.path().join("d");
    let model = t.join("model.json");
    let adapters = t.join("adapters.csv");
    let args = [
        "diffuse",
        "--model",
        model.to_str().unwrap(),
        "--adapters",
        adapters.to_str().unwrap(),
        "--out-dir",
        d.to_str().unwrap(),
    ];
    assert_eq!(bin(&args, None).0, 0);
    fs::write(&adapters, "not adapters").unwrap();
    assert_eq!(bin(&args, None).0, EXIT_USAGE);
}

#[test]
fn attention_maps_are_row_stochastic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("m");
    let args = ["attn-map", "--train-steps", "50", "--out-dir", d.to_str().unwrap()];
    assert_eq!(bin(&args, None).0, 0);
    for arm in ["identity", "baseline"] {
        let text = fs::read_to_string(d.join(format!("attn_{arm}_000.csv"))).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 16);
        for r in rows {
            assert_eq!(r.len(), 16);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
