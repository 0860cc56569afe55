use std::path::Path;

use gkd_cli::run_with;

struct Outcome {
    code: i32,
    out: String,
    err: String,
}

fn gkd(args: &[&str]) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("gkd").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    Outcome {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace()
        .find_map(|w| w.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

fn gen(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    let o = gkd(&[
        "gen-data",
        "--out",
        s(&p),
        "--train",
        "4",
        "--val",
        "2",
        "--test",
        "8",
        "--seed",
        seed,
    ]);
    assert_eq!(o.code, 0, "{}", o.err);
    p
}

#[test]
fn usage_errors_exit_one_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.gkdd", "1");
    let out = dir.path().join("m.gkdm");
    let train = |extra: &[(&str, &str)]| {
        let mut args = vec![
            ("--arch", "lstm"),
            ("--width", "1/4"),
            ("--input", "upper_body"),
            ("--data", s(&data)),
            ("--epochs", "1"),
            ("--batch", "4"),
            ("--lr", "0.001"),
            ("--seed", "0"),
            ("--out", s(&out)),
        ];
        for &(k, v) in extra {
            args.iter_mut().find(|(a, _)| *a == k).unwrap().1 = v;
        }
        let mut argv = vec!["train"];
        argv.extend(args.iter().flat_map(|(k, v)| [*k, *v]));
        gkd(&argv)
    };
    for (flag, bad) in [
        ("--width", "1/3"),
        ("--arch", "resnet"),
        ("--input", "face"),
        ("--epochs", "0"),
        ("--batch", "0"),
        ("--lr", "-1"),
    ] {
        let o = train(&[(flag, bad)]);
        assert_eq!(o.code, 1, "{flag}={bad}: {}", o.err);
        assert!(o.err.contains(flag), "{flag}: {}", o.err);
    }
    assert!(!out.exists());

    let o = gkd(&[
        "gen-data", "--out", "x.gkdd", "--train", "4", "--val", "1", "--test", "1",
    ]);
    assert_eq!(o.code, 1);
    assert!(o.err.contains("--seed"), "{}", o.err);
    let o = gkd(&["inspect", "--model", "m.gkdm", "--bogus"]);
    assert_eq!(o.code, 1);
    assert!(o.err.contains("--bogus"), "{}", o.err);
    let o = gkd(&[
        "gen-data", "--out", "x.gkdd", "--train", "0", "--val", "1", "--test", "1", "--seed", "1",
    ]);
    assert_eq!(o.code, 1);
    assert!(o.err.contains("--train"), "{}", o.err);
    assert_eq!(gkd(&["frobnicate"]).code, 1);
    assert_eq!(gkd(&["--help"]).code, 0);
}

#[test]
fn file_errors_exit_two_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.gkdd", "2");
    let missing = dir.path().join("missing.gkdm");
    let o = gkd(&["eval", "--model", s(&missing), "--data", s(&data)]);
    assert_eq!(o.code, 2);
    assert!(o.err.contains("missing.gkdm"), "{}", o.err);

    // a dataset is not a model
    let o = gkd(&["inspect", "--model", s(&data)]);
    assert_eq!(o.code, 2);
    assert!(o.err.contains("d.gkdd"), "{}", o.err);

    let truncated = dir.path().join("cut.gkdd");
    let bytes = std::fs::read(&data).unwrap();
    std::fs::write(&truncated, &bytes[..bytes.len() / 3]).unwrap();
    let o = gkd(&[
        "train",
        "--arch",
        "lstm",
        "--width",
        "1/4",
        "--input",
        "hand",
        "--data",
        s(&truncated),
        "--epochs",
        "1",
        "--batch",
        "2",
        "--lr",
        "0.001",
        "--seed",
        "0",
        "--out",
        s(&dir.path().join("m.gkdm")),
    ]);
    assert_eq!(o.code, 2);
    assert!(o.err.contains("cut.gkdd"), "{}", o.err);
}

#[test]
fn gen_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(gen(dir.path(), "a.gkdd", "5")).unwrap();
    let b = std::fs::read(gen(dir.path(), "b.gkdd", "5")).unwrap();
    let c = std::fs::read(gen(dir.path(), "c.gkdd", "6")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "d.gkdd", "3");
    let data_bytes = std::fs::read(&data).unwrap();
    let teacher = d.join("teacher.gkdm");
    let history = d.join("history.csv");
    let o = gkd(&[
        "train",
        "--arch",
        "cnn3d",
        "--width",
        "1",
        "--input",
        "upper_body",
        "--data",
        s(&data),
        "--epochs",
        "1",
        "--batch",
        "4",
        "--lr",
        "0.0001",
        "--seed",
        "0",
        "--out",
        s(&teacher),
        "--history",
        s(&history),
        "--classes",
        "20",
    ]);
    assert_eq!(o.code, 0, "{}", o.err);
    assert!(o.out.contains("epoch=1 train_loss="), "{}", o.out);
    let csv = std::fs::read_to_string(&history).unwrap();
    assert!(
        csv.starts_with("epoch,train_loss,train_accuracy,val_accuracy\n1,"),
        "{csv}"
    );

    let o = gkd(&["inspect", "--model", s(&teacher)]);
    assert_eq!(o.code, 0, "{}", o.err);
    assert_eq!(field(&o.out, "param_count"), "18823284");
    assert!(o.out.contains("conv1.weight"));
    let file_bytes: u64 = field(&o.out, "file_bytes").parse().unwrap();
    assert_eq!(file_bytes, std::fs::metadata(&teacher).unwrap().len());

    let teacher_bytes = std::fs::read(&teacher).unwrap();
    let student = d.join("student.gkdm");
    let o = gkd(&[
        "distill",
        "--teacher",
        s(&teacher),
        "--arch",
        "joint",
        "--width",
        "1/4",
        "--temperature",
        "2",
        "--alpha",
        "0.5",
        "--data",
        s(&data),
        "--out",
        s(&student),
        "--epochs",
        "1",
        "--batch",
        "4",
    ]);
    assert_eq!(o.code, 0, "{}", o.err);

    let half = d.join("student_half.gkdm");
    let o = gkd(&["compress", "--model", s(&student), "--half", "--out", s(&half)]);
    assert_eq!(o.code, 0, "{}", o.err);
    assert!(o.out.contains("(0.5000x)"), "{}", o.out);

    let o = gkd(&["eval", "--model", s(&half), "--data", s(&data)]);
    assert_eq!(o.code, 0, "{}", o.err);
    let acc: f64 = field(&o.out, "accuracy").parse().unwrap();
    assert!((0.0..=100.0).contains(&acc));
    assert_eq!(field(&o.out, "samples"), "8");
    let rows: Vec<&str> = o.out.lines().skip(3).collect();
    assert_eq!(rows.len(), 20);
    let counted: usize = rows
        .iter()
        .flat_map(|r| r.split_whitespace().skip(1))
        .map(|n| n.parse::<usize>().unwrap())
        .sum();
    assert_eq!(counted, 8);

    // no command rewrites its inputs
    assert_eq!(std::fs::read(&data).unwrap(), data_bytes);
    assert_eq!(std::fs::read(&teacher).unwrap(), teacher_bytes);
}
