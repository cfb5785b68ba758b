use std::fs;
use std::path::Path;

use alternating_attention::cli::{
    collect_settings, dispatch, resolve_config, Cli, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE,
};
use clap::Parser;

#[rustfmt::skip]
const SMALL: &[&str] = &[
    "--set", "frames=2",
    "--set", "dim=8",
    "--set", "gate_hidden=8",
    "--set", "steps=3",
    "--set", "eval_batches=1",
    "--set", "bench_frames=2,3",
    "--set", "bench_patches=16",
    "--set", "bench_dim=8",
    "--set", "bench_heads=2",
    "--set", "reps=3",
    "--set", "equivalence_seeds=3",
];

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str], out_dir: &Path) -> Run {
    let out = out_dir.to_str().unwrap();
    let tail = ["--out", out];
    let argv = ["adattn"].iter().chain(args).chain(&tail).copied();
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = dispatch(argv, &mut o, &mut e);
    Run {
        code,
        stdout: String::from_utf8(o).unwrap(),
        stderr: String::from_utf8(e).unwrap(),
    }
}

fn small<'a>(command: &[&'a str]) -> Vec<&'a str> {
    command.iter().chain(SMALL).copied().collect()
}

#[test]
fn unknown_command_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["foo"], dir.path());
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("Usage"), "{}", r.stderr);
}

#[test]
fn equivalence_passes() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&small(&["equivalence"]), dir.path());
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(r.stdout.contains("status = pass"));
    let csv = fs::read_to_string(dir.path().join("equivalence.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn gradcheck_passes_on_its_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["gradcheck"], dir.path());
    assert_eq!(r.code, EXIT_OK, "{}{}", r.stdout, r.stderr);
    let worst: f64 = r
        .stdout
        .lines()
        .find_map(|l| l.strip_prefix("worst_rel_err = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst < 1e-4);
    let text = fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(text.contains("# frames = 3\n") && text.contains("# grid_w = 4\n"));
}

#[test]
fn oracles_refuse_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gradcheck", "equivalence"] {
        let r = run(&[cmd, "--precision", "f32"], dir.path());
        assert_eq!(r.code, EXIT_USAGE);
        assert!(r.stderr.starts_with("error: kind=config"), "{}", r.stderr);
    }
}

#[test]
fn malformed_config_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# toy\nframes = 2\nheads two\n").unwrap();
    let r = run(&["train-toy", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("line 3"), "{}", r.stderr);

    let r = run(&["train-toy", "--set", "colour=red"], dir.path());
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.stderr.contains("unknown key"));
}

#[test]
fn seed_and_precision_reach_every_header() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small(&["train-toy", "--seed", "42", "--precision", "f32"]);
    args.push("--set");
    args.push("lambda_reg=0");
    assert_eq!(run(&args, dir.path()).code, EXIT_OK);
    assert_eq!(
        run(&small(&["bench", "--seed", "42", "--precision", "f32"]), dir.path()).code,
        EXIT_OK
    );
    for file in ["train_toy.csv", "route_stats.txt", "bench.csv", "bench_long.csv"] {
        let text = fs::read_to_string(dir.path().join(file)).unwrap();
        assert!(text.contains("# seed = 42\n"), "{file}");
        assert!(text.contains("# precision = f32\n"), "{file}");
    }
}

#[test]
fn config_file_then_flags_then_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed = 3\nsteps = 9\nlr = 0.5\n").unwrap();
    let path = cfg.to_str().unwrap();
    let cli = Cli::try_parse_from([
        "adattn",
        "train-toy",
        "--config",
        path,
        "--seed",
        "4",
        "--set",
        "lr=0.25",
    ])
    .unwrap();
    let settings = collect_settings(&cli, Some("7".into())).unwrap();
    let resolved = resolve_config(&cli.command, &settings).unwrap();
    assert_eq!(
        (resolved.train.seed, resolved.train.steps, resolved.train.lr),
        (4, 9, 0.25)
    );

    let cli = Cli::try_parse_from(["adattn", "bench"]).unwrap();
    let resolved = resolve_config(&cli.command, &collect_settings(&cli, Some("11".into())).unwrap()).unwrap();
    assert_eq!((resolved.train.seed, resolved.bench.seed), (11, 11));
}

#[test]
fn route_stats_dump_writes_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&small(&["route-stats", "--dump"]), dir.path());
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let dump = fs::read_to_string(dir.path().join("dump.txt")).unwrap();
    assert!(dump.contains("block0.W0 ") && dump.contains("block1.xc "));
    assert!(r.stdout.contains("dump = dump.txt"));
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&small(&["equivalence", "--set", "equivalence_tol=0"]), dir.path());
    assert_eq!(r.code, EXIT_CHECK_FAILED, "{}", r.stdout);
    assert!(r.stdout.contains("status = FAIL"));
}

#[test]
fn out_of_range_step_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["gradcheck", "--set", "gradcheck_step=0.5"], dir.path());
    assert_eq!(r.code, EXIT_USAGE, "{}", r.stderr);
}
