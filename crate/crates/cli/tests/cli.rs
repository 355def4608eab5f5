use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsf")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

fn gen(dir: &Path, task: &str, n: &str, size: &str) {
    let o = gsf(&[
        "gen",
        "--task",
        task,
        "--n",
        n,
        "--out",
        dir.to_str().unwrap(),
        "--size",
        size,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a, "direction4", "8", "4x8x8");
    gen(&b, "direction4", "8", "4x8x8");
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8 + 4 + 3);
    for name in names {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
    assert_eq!(fs::read_to_string(a.join("task")).unwrap().trim(), "direction4");
}

#[test]
fn exit_codes_follow_error_kinds() {
    assert_eq!(gsf(&["--help"]).status.code(), Some(0));
    assert_eq!(
        gsf(&["gen", "--task", "nope", "--n", "2", "--out", "x"]).status.code(),
        Some(1)
    );
    assert_eq!(gsf(&["count"]).status.code(), Some(1));
    assert_eq!(
        gsf(&["count", "--manifest", "resnet50", "--fraction", "0.001"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(gsf(&["bench", "--shape", "1x1x4x6x6"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = gsf(&["train", "--data", missing.to_str().unwrap(), "--out", "w"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn count_reports_the_resnet50_overhead() {
    let o = gsf(&["count", "--manifest", "resnet50"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let total: Vec<&str> = field(&out, "total").split('\t').filter(|s| !s.is_empty()).collect();
    assert_eq!(total, ["102528", "7552", "353782784"]);
    assert_eq!(out.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 16);

    let o = gsf(&["count", "--manifest", "bninception", "--fraction", "1"]);
    let pct: f64 = field(&stdout(&o), "param_overhead_pct").parse().unwrap();
    assert!((pct - 0.48).abs() <= 0.1, "{pct}");

    let o = gsf(&["--pretty", "count", "--arch", "bottleneck_toy"]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains('\t'));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "order2", "8", "4x8x8");
    let w = dir.path().join("w.gsfw");
    let (data, w) = (data.to_str().unwrap(), w.to_str().unwrap());
    let o = gsf(&["train", "--data", data, "--width", "8", "--epochs", "2", "--out", w]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);
    assert_eq!(fs::read_to_string(format!("{w}.log")).unwrap(), stdout(&o));
    assert!(fs::read_to_string(format!("{w}.arch")).unwrap().contains("width=8"));

    let first = gsf(&["eval", "--data", data, "--weights", w]);
    assert!(first.status.success());
    let text = stdout(&first);
    let top1: f64 = field(&text, "top1").parse().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(field(&text, "clips"), "4");
    assert_eq!(field(&text, "protocol"), "efficiency");
    assert_eq!(stdout(&gsf(&["eval", "--data", data, "--weights", w])), text);

    let o = gsf(&["eval", "--data", data, "--weights", w, "--protocol", "accuracy"]);
    assert_eq!(field(&stdout(&o), "protocol"), "accuracy");
}

#[test]
fn tsn_mode_accuracy_ignores_frame_shuffling() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "direction4", "16", "6x8x8");
    let w = dir.path().join("tsn");
    let (data, w) = (data.to_str().unwrap(), w.to_str().unwrap());
    let o = gsf(&[
        "train", "--data", data, "--gsf", "off", "--width", "8", "--epochs", "2", "--out", w,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let plain = stdout(&gsf(&["eval", "--data", data, "--weights", w]));
    for seed in ["1", "2"] {
        let shuffled = stdout(&gsf(&[
            "--seed",
            seed,
            "eval",
            "--data",
            data,
            "--weights",
            w,
            "--shuffle-frames",
        ]));
        assert_eq!(field(&plain, "top1"), field(&shuffled, "top1"));
    }
    let o = gsf(&["train", "--data", data, "--gsf", "off", "--gate", "learned", "--out", w]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_lists_every_stage() {
    let o = gsf(&["bench", "--shape", "1x8x4x6x6", "--iters", "2"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 8);
    for stage in ["gate computing", "shifting", "fusion", "total"] {
        let us: f64 = field(&out, stage).parse().unwrap();
        assert!(us >= 0.0);
    }
}

#[test]
fn selftest_passes() {
    let o = gsf(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.contains("\tPASS\t")));
}
