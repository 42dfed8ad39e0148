use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reconnet::datapipe::{read_pgm, write_pgm};
use reconnet::models::{Checkpoint, FirstStage};
use reconnet::synth::natural_image;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reconnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A directory with `count` synthetic PGMs of the given side.
fn image_dir(root: &Path, name: &str, count: u64, side: usize) -> PathBuf {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    for i in 0..count {
        write_pgm(
            &natural_image(side, side, 40 + i).unwrap(),
            &dir.join(format!("img{i}.pgm")),
        )
        .unwrap();
    }
    dir
}

fn dataset(root: &Path) -> PathBuf {
    let dir = image_dir(root, "train_imgs", 1, 61);
    let out = root.join("ds.rcd");
    let o = run(&[
        "make-dataset",
        "--images",
        s(&dir),
        "--out",
        s(&out),
        "--val-frac",
        "0.25",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn train(root: &Path, ds: &Path, name: &str, extra: &[&str]) -> (Output, PathBuf) {
    let out = root.join(name);
    let mut args = vec!["train", "--dataset", s(ds), "--out", s(&out), "--batch", "3"];
    args.extend_from_slice(extra);
    if !extra.contains(&"--iters") {
        args.extend_from_slice(&["--iters", "2"]);
    }
    (run(&args), out)
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&run(&[])), 64);
    assert_eq!(code(&run(&["make-dataset", "--images", "x"])), 64);
    assert_eq!(code(&run(&["bench", "--model", "m", "--repeats", "2"])), 64);
    assert_eq!(code(&run(&["eval", "--testdir", "t", "--out", "o"])), 64);
    assert_eq!(code(&run(&["reconstruct", "--bogus"])), 64);
    assert_eq!(
        code(&run(&[
            "train",
            "--variant",
            "nope",
            "--mr",
            "0.1",
            "--dataset",
            "d",
            "--out",
            "o"
        ])),
        64
    );
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn make_dataset_counts_and_input_errors() {
    let tmp = TempDir::new().unwrap();
    let dir = image_dir(tmp.path(), "one", 1, 256);
    let out = tmp.path().join("d.rcd");
    let o = run(&["make-dataset", "--images", s(&dir), "--out", s(&out), "--val-frac", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("256 patches"), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 validation"));

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(
        code(&run(&["make-dataset", "--images", s(&empty), "--out", s(&out)])),
        2
    );

    let bad = tmp.path().join("bad");
    fs::create_dir(&bad).unwrap();
    fs::write(bad.join("broken.pgm"), b"P2\n1 1\n255\n0\n").unwrap();
    let o = run(&["make-dataset", "--images", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("broken.pgm"), "{}", stderr(&o));

    let o = run(&[
        "make-dataset",
        "--images",
        s(&dir),
        "--out",
        s(&out),
        "--val-frac",
        "1.5",
    ]);
    assert_eq!(code(&o), 64);
}

#[test]
fn train_variants_shapes() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());

    let (o, p) = train(tmp.path(), &ds, "euc.ckpt", &["--variant", "euc", "--mr", "0.25"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = Checkpoint::load(&p).unwrap();
    assert_eq!((c.model.spec().n_units, c.model.m()), (2, 272));
    assert_eq!(c.metadata["variant"], "euc");
    assert_eq!(c.phi.as_ref().unwrap().m(), 272);
    let csv = fs::read_to_string(tmp.path().join("euc.ckpt.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let (o, p) = train(tmp.path(), &ds, "adv.ckpt", &["--variant", "euc-adv", "--mr", "0.04"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(Checkpoint::load(&p).unwrap().model.spec().n_units, 1);

    let (o, p) = train(
        tmp.path(),
        &ds,
        "circ.ckpt",
        &[
            "--variant",
            "euc",
            "--mr",
            "0.25",
            "--circulant",
            "13",
            "--fc-init",
            "random",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = Checkpoint::load(&p).unwrap();
    assert_eq!(c.model.spec().first_stage, FirstStage::CirculantBank { gamma: 13 });
    let first: usize = c
        .model
        .first_stage_ids()
        .iter()
        .map(|&id| c.model.params().value(id).len())
        .sum();
    assert_eq!(first, 14157);

    let (o, p) = train(
        tmp.path(),
        &ds,
        "learn.ckpt",
        &["--variant", "euc-learnphi", "--mr", "0.01"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = Checkpoint::load(&p).unwrap();
    assert_eq!(c.phi.unwrap().kind.to_string(), "learned");

    let (o, _) = train(
        tmp.path(),
        &ds,
        "x.ckpt",
        &["--variant", "euc-learnphi", "--mr", "0.01", "--fc-init", "phit"],
    );
    assert_eq!(code(&o), 64);
}

#[test]
fn divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let (o, _) = train(
        tmp.path(),
        &ds,
        "boom.ckpt",
        &[
            "--variant",
            "euc",
            "--mr",
            "0.1",
            "--fc-init",
            "phit",
            "--lr",
            "1e200",
            "--iters",
            "20",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("iteration"), "{}", stderr(&o));
}

#[test]
fn finetune_freezes_convolutions_and_rejects_circulant() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let (o, base) = train(
        tmp.path(),
        &ds,
        "base.ckpt",
        &["--variant", "euc", "--mr", "0.25", "--fc-init", "phit"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = tmp.path().join("ft.ckpt");
    let o = run(&[
        "finetune-fc",
        "--base",
        s(&base),
        "--mr",
        "0.10",
        "--dataset",
        s(&ds),
        "--out",
        s(&out),
        "--iters",
        "3",
        "--batch",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (b, f) = (Checkpoint::load(&base).unwrap(), Checkpoint::load(&out).unwrap());
    assert_eq!(f.model.m(), 109);
    for id in b.model.conv_ids() {
        let name = b.model.params().name(id);
        let t = f.model.params().value(f.model.params().find(name).unwrap());
        assert!(b.model.params().value(id).bitwise_eq(t), "{name}");
    }

    let (o, circ) = train(
        tmp.path(),
        &ds,
        "circ.ckpt",
        &["--variant", "euc", "--mr", "0.25", "--circulant", "2"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&[
        "finetune-fc",
        "--base",
        s(&circ),
        "--mr",
        "0.10",
        "--dataset",
        s(&ds),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn reconstruct_eval_bench_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(tmp.path());
    let (o, model) = train(
        tmp.path(),
        &ds,
        "m.ckpt",
        &["--variant", "euc", "--mr", "0.10", "--seed", "7"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (o, again) = train(
        tmp.path(),
        &ds,
        "m2.ckpt",
        &["--variant", "euc", "--mr", "0.10", "--seed", "7"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&model).unwrap(), fs::read(&again).unwrap());

    let test = image_dir(tmp.path(), "test", 2, 70);
    let input = test.join("img0.pgm");
    let (a, b) = (tmp.path().join("a.pgm"), tmp.path().join("b.pgm"));
    for out in [&a, &b] {
        let o = run(&[
            "reconstruct",
            "--model",
            s(&model),
            "--input",
            s(&input),
            "--output",
            s(out),
            "--sigma",
            "10",
            "--seed",
            "3",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("psnr"));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let rec = read_pgm(&a).unwrap();
    assert_eq!((rec.height(), rec.width()), (70, 70));
    let o = run(&[
        "reconstruct",
        "--model",
        s(&ds),
        "--input",
        s(&input),
        "--output",
        s(&a),
    ]);
    assert_eq!(code(&o), 2);

    let strip = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    let (c1, c2) = (tmp.path().join("r1.csv"), tmp.path().join("r2.csv"));
    for out in [&c1, &c2] {
        let o = run(&["eval", "--models", s(&model), "--testdir", s(&test), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let rows = strip(&c1);
    assert_eq!(rows.len(), 1 + 2 * 4);
    assert_eq!(rows[0], "image,mr,sigma,variant,psnr_db");
    assert_eq!(rows, strip(&c2));

    let o = run(&["bench", "--model", s(&model), "--side", "66", "--repeats", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("4 blocks"), "{}", stdout(&o));
}
