use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use movingparts::data::synthetic::SyntheticSceneSpec;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_movingparts"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A short, small version of the two-body scene.
fn tiny_scene(dir: &Path) -> std::path::PathBuf {
    let mut spec = SyntheticSceneSpec::two_body();
    spec.frames = 4;
    spec.width = 16;
    spec.height = 16;
    let path = dir.join("tiny.toml");
    fs::write(&path, spec.to_toml()).unwrap();
    path
}

const TINY_TRAIN: &str = "preset = \"desk\"
total_iters = 6
rays_per_batch = 64
upsample_iters = [2, 4]
canonical_res_init = 8
canonical_res_final = 12
motion_res = 6
hidden = 8
occupancy_warmup = 3
occupancy_every = 2
occupancy_res = 8
occupancy_times = 2
log_every = 1
";

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(cli(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(cli(&["gen"]).status.code(), Some(2));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        cli(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]).status.code(),
        Some(2)
    );
    assert_eq!(
        cli(&["render", "--checkpoint", p(&missing), "--data", p(dir.path()), "--out", p(&dir.path().join("o"))])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cli(&["gen", "--scene-spec", p(&missing), "--out", p(&dir.path().join("o"))]).status.code(),
        Some(2)
    );
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    assert_eq!(
        cli(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&dir.path().join("o"))])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cli(&["train", "--set", "total_iters=-1", "--data", p(dir.path()), "--out", p(&dir.path().join("o"))])
            .status
            .code(),
        Some(2)
    );
    assert!(cli(&["--help"]).status.success());
}

#[test]
fn eval_of_the_dataset_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--scene-spec", p(&tiny_scene(dir.path())), "--out", p(&data)]);
    let seg = dir.path().join("seg");
    fs::create_dir(&seg).unwrap();
    for i in 0..4 {
        fs::copy(data.join(format!("masks/m_{i:03}.png")), seg.join(format!("seg_{i:03}.png"))).unwrap();
    }
    let out = dir.path().join("eval");
    ok(&["eval", "--renders", p(&data.join("train")), "--data", p(&data), "--segmentation", p(&seg), "--out", p(&out)]);
    let table = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(table.lines().last().unwrap(), "mean\t100.0000\t1.000000", "{table}");
    let miou = fs::read_to_string(out.join("miou.tsv")).unwrap();
    assert!(miou.lines().last().unwrap().starts_with("mean\t1.000000"), "{miou}");
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--scene-spec", p(&tiny_scene(dir.path())), "--out", p(&data), "--seed", "1"]);
    assert!(data.join("transforms_train.json").exists());
    assert!(data.join("masks/m_003.png").exists());
    assert!(data.join("trajectories/part_2.txt").exists());

    let cfg = dir.path().join("train.txt");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--seed", "3"]);
    let log = fs::read_to_string(run.join("log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 7, "{log}");
    assert!(log.starts_with("iter\tloss\t"));
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("seed = 3"));

    // Same seed, same trace.
    let again = dir.path().join("again");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&again), "--seed", "3"]);
    assert_eq!(fs::read_to_string(again.join("log.tsv")).unwrap(), log);

    let ckpt = run.join("model.ckpt");
    let renders = dir.path().join("renders");
    ok(&["render", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&renders)]);
    assert!(renders.join("r_003.png").exists());
    assert!(renders.join("depth_003.png").exists());

    let parts = dir.path().join("parts");
    ok(&["parts", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&parts), "--lattice", "16", "--n-times", "4"]);
    assert!(parts.join("parts.txt").exists());
    assert!(parts.join("merge_trace.tsv").exists());
    assert!(parts.join("seg_000.png").exists());

    let script = dir.path().join("empty.txt");
    fs::write(&script, "# nothing\n").unwrap();
    let edited = dir.path().join("edited");
    ok(&[
        "edit", "--checkpoint", p(&ckpt), "--parts", p(&parts), "--script", p(&script), "--data", p(&data), "--out",
        p(&edited),
    ]);
    for i in 0..4 {
        let name = format!("r_{i:03}.png");
        assert_eq!(fs::read(renders.join(&name)).unwrap(), fs::read(edited.join(&name)).unwrap(), "{name}");
    }

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "remove part=99\n").unwrap();
    let out = cli(&[
        "edit", "--checkpoint", p(&ckpt), "--parts", p(&parts), "--script", p(&bad), "--data", p(&data), "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let metrics = dir.path().join("metrics");
    ok(&[
        "eval", "--renders", p(&renders), "--data", p(&data), "--segmentation", p(&parts), "--per-frame", "--out",
        p(&metrics),
    ]);
    let table = fs::read_to_string(metrics.join("metrics.tsv")).unwrap();
    assert!(table.starts_with("frame\tpsnr\tssim\n"));
    assert!(table.lines().last().unwrap().starts_with("mean\t"));
    assert!(metrics.join("miou.tsv").exists());
}
