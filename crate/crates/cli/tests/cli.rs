use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fundus-seg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fundus-seg")
}

fn run_with_threads(args: &[&str], threads: usize) -> Output {
    bin().args(args).env("RAYON_NUM_THREADS", threads.to_string()).output().expect("spawn fundus-seg")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        stderr(&o)
    );
    o
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes() {
    let o = ok(run(&["gradcheck", "--seed", "1"]));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("network(bce)"));
    assert!(out.contains("all gradients within"));
}

#[test]
fn gen_fixtures_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for p in [&a, &b] {
        ok(run(&["gen-fixtures", "--out", s(p), "--count", "8", "--size", "32x32", "--seed", "7"]));
    }
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    assert!(ta.contains_key("manifest.csv") && ta.contains_key("images/007.ppm"));
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["gradcheck", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["gen-fixtures", "--out", "/tmp/x", "--size", "3"]).status.code(), Some(1));

    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, "").unwrap();
    let missing = d.path().join("nowhere").join("manifest.csv");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));

    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn help_documents_config_keys() {
    let o = ok(run(&["train", "--help"]));
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["seed", "batch_size", "patience", "lr", "augment", "input_width", "boost", "loc_penalty"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn non_finite_learning_rate_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let fx = d.path().join("fx");
    ok(run(&["gen-fixtures", "--out", s(&fx), "--count", "8", "--size", "16x16"]));
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, "lr = inf\n").unwrap();
    let o =
        run(&["train", "--config", s(&cfg), "--data", s(&fx.join("manifest.csv")), "--out", s(&d.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn full_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| d.path().join(n);
    ok(run(&["gen-fixtures", "--out", s(&p("fx")), "--count", "16", "--size", "32x24", "--seed", "3"]));
    let manifest = p("fx").join("manifest.csv");
    std::fs::write(p("run.cfg"), "# short run\nepochs_max = 3\nbatch_size = 3\nseed = 2\n").unwrap();
    ok(run(&["train", "--config", s(&p("run.cfg")), "--data", s(&manifest), "--out", s(&p("ens"))]));
    let ens = tree(&p("ens"));
    for f in ["config.txt", "ensemble.csv", "history.csv", "best_total.fseg", "final.fseg"] {
        assert!(ens.contains_key(f), "missing {f}");
    }
    assert!(String::from_utf8_lossy(&ens["config.txt"]).contains("epochs_max = 3"));

    ok(run(&[
        "calibrate",
        "--ensemble",
        s(&p("ens")),
        "--data",
        s(&manifest),
        "--out",
        s(&p("thresholds.csv")),
        "--curves",
        s(&p("curves.csv")),
    ]));
    let curves = std::fs::read_to_string(p("curves.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("class,threshold,sensitivity,ppv"));
    assert_eq!(curves.lines().count(), 1 + 5 * 99);
    assert_eq!(std::fs::read_to_string(p("thresholds.csv")).unwrap().lines().count(), 6);

    let image = p("fx").join("images").join("007.ppm");
    ok(run(&[
        "infer",
        "--ensemble",
        s(&p("ens")),
        "--image",
        s(&image),
        "--thresholds",
        s(&p("thresholds.csv")),
        "--out",
        s(&p("pred")),
        "--full-res",
        "64x48",
    ]));
    let pred = tree(&p("pred"));
    assert!(pred["007_od.pgm"].starts_with(b"P5\n64 48\n255\n"));
    assert_eq!(pred.len(), 6);
    assert!(String::from_utf8_lossy(&pred["centroid.csv"]).starts_with("image,x,y\n007,"));
    let shrink = run(&[
        "infer",
        "--ensemble",
        s(&p("ens")),
        "--image",
        s(&image),
        "--thresholds",
        s(&p("thresholds.csv")),
        "--out",
        s(&p("pred2")),
        "--full-res",
        "16x16",
    ]);
    assert_eq!(shrink.status.code(), Some(1));

    let eval = |threads: usize, tag: &str| {
        let (report, loc) = (p(&format!("report{tag}.csv")), p(&format!("loc{tag}.csv")));
        ok(run_with_threads(
            &[
                "eval",
                "--ensemble",
                s(&p("ens")),
                "--data",
                s(&manifest),
                "--thresholds",
                s(&p("thresholds.csv")),
                "--report",
                s(&report),
                "--loc",
                s(&loc),
            ],
            threads,
        ));
        (std::fs::read(report).unwrap(), std::fs::read(loc).unwrap())
    };
    let one = eval(1, "1");
    let four = eval(4, "4");
    assert_eq!(one, four);
    let report = String::from_utf8_lossy(&one.0);
    assert_eq!(report.lines().next(), Some("class,threshold,sensitivity,ppv,accuracy,jaccard,auc"));
    assert_eq!(report.lines().count(), 6);
    let loc = String::from_utf8_lossy(&one.1);
    assert_eq!(loc.lines().next(), Some("image,pred_x,pred_y,gt_x,gt_y,distance"));
    // two test images (indices 7 and 15)
    assert_eq!(loc.lines().count(), 3);
}
