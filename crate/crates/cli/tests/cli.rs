use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mmt-probe"));
    c.env("MMT_PROBE_LOG", "quiet");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn mask_noun3_reproduces_the_table_row() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    std::fs::write(&input, "a man in a red suit performing motorcycle stunts\n").unwrap();
    let out = ok(&["mask", "--input", p(&input), "--task", "noun", "--k", "3"]);
    assert_eq!(
        out,
        "a man in a red [MASK_N] performing [MASK_N] [MASK_NS]\n"
    );
    let out = ok(&["mask", "--input", p(&input), "--task", "color"]);
    assert_eq!(
        out,
        "a man in a [MASK_C] suit performing motorcycle stunts\n"
    );
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["mask", "--bogus"]).status.code(), Some(2));
    for sub in [
        "mask",
        "train",
        "evaluate",
        "gradcheck",
        "dump-attn",
        "avg-ckpt",
    ] {
        let o = run(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"));
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key `model.width`"));
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "mask",
        "--input",
        p(&dir.path().join("missing")),
        "--task",
        "color",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let bad = dir.path().join("bad.mmtf");
    std::fs::write(&bad, b"XXXXnot a feature file").unwrap();
    let o = run(&["avg-ckpt", "--out", p(&dir.path().join("o")), p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_relaxed_is_at_least_restrict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("src"), "a man in a green shirt\na red dog\n").unwrap();
    std::fs::write(
        d.join("ref"),
        "ein mann in einem grünen hemd\nein roter hund\n",
    )
    .unwrap();
    std::fs::write(
        d.join("hyp"),
        "ein mann in einem grünes hemd\nein roter hund\n",
    )
    .unwrap();
    ok(&[
        "mask",
        "--input",
        p(&d.join("src")),
        "--task",
        "color",
        "--refs",
        p(&d.join("ref")),
        "--sidecar",
        p(&d.join("side.tsv")),
    ]);
    let acc = |c: &str| -> f64 {
        let out = ok(&[
            "evaluate",
            "--hyp",
            p(&d.join("hyp")),
            "--ref",
            p(&d.join("ref")),
            "--sidecar",
            p(&d.join("side.tsv")),
            "--criterion",
            c,
        ]);
        let line = out
            .lines()
            .find(|l| l.starts_with("probe.accuracy="))
            .unwrap();
        line["probe.accuracy=".len()..].parse().unwrap()
    };
    let (r, x) = (acc("restrict"), acc("relaxed"));
    assert_eq!((r, x), (0.5, 1.0));
    let out = ok(&[
        "probe",
        "--hyp",
        p(&d.join("hyp")),
        "--sidecar",
        p(&d.join("side.tsv")),
        "--name",
        "color",
    ]);
    assert!(out.contains("probe.color.restrict=0.500000"));
    assert!(out.contains("probe.color.relaxed=1.000000"));
}

#[test]
fn gradcheck_single_seed_passes() {
    let out = ok(&["gradcheck", "--seeds", "1"]);
    assert!(out.contains("failed=0"), "{out}");
    assert!(out.contains("model/selective_attention"));
}

/// Generates, masks, plants, trains, decodes and scores in a fresh directory.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let d = |name: &str| dir.join(name);
    ok(&[
        "gen-corpus",
        "--pairs",
        "40",
        "--seed",
        "5",
        "--out",
        p(&d("data")),
    ]);
    let masked = ok(&[
        "mask",
        "--input",
        p(&d("data/corpus.src")),
        "--refs",
        p(&d("data/corpus.tgt")),
        "--lexicon",
        p(&d("data/lexicon.tsv")),
        "--task",
        "noun2",
        "--sidecar",
        p(&d("side.tsv")),
    ]);
    std::fs::write(d("masked.src"), masked).unwrap();
    ok(&[
        "gen-features",
        "--sidecar",
        p(&d("side.tsv")),
        "--src",
        p(&d("masked.src")),
        "--lexicon",
        p(&d("data/lexicon.tsv")),
        "--regime",
        "12:16:cls",
        "--seed",
        "5",
        "--out",
        p(&d("feats.mmtf")),
    ]);
    let cfg = "[paths]\nsrc = masked.src\ntgt = data/corpus.tgt\nvalid_src = masked.src\nvalid_tgt = data/corpus.tgt\nfeatures = feats.mmtf\nout_dir = run\n\
               [model]\nenc_layers = 1\ndec_layers = 1\nd_model = 16\nd_ffn = 32\nheads = 2\nfusion_mode = selective_attention\n\
               [optim]\nmax_steps = 12\nbatch_tokens = 200\nwarmup = 4\npeak_lr = 1e-3\nvalid_every = 4\naverage_last = 2\n\
               [decode]\nmax_out_len = 20\n";
    std::fs::write(d("exp.cfg"), cfg).unwrap();
    ok(&["train", "--config", p(&d("exp.cfg")), "--seed", "5"]);
    let model = d("run/model.mmtc");
    let hyps = ok(&[
        "translate",
        "--model",
        p(&model),
        "--src",
        p(&d("masked.src")),
        "--features",
        p(&d("feats.mmtf")),
    ]);
    std::fs::write(d("hyp.txt"), &hyps).unwrap();
    let probe = ok(&[
        "probe",
        "--hyp",
        p(&d("hyp.txt")),
        "--sidecar",
        p(&d("side.tsv")),
    ]);
    let cong = ok(&[
        "congruence",
        "--model",
        p(&model),
        "--src",
        p(&d("masked.src")),
        "--features",
        p(&d("feats.mmtf")),
        "--ref",
        p(&d("data/corpus.tgt")),
        "--seed",
        "5",
    ]);
    assert!(cong.contains("bleu.delta="), "{cong}");
    ok(&[
        "dump-attn",
        "--model",
        p(&model),
        "--src",
        p(&d("masked.src")),
        "--features",
        p(&d("feats.mmtf")),
        "--line",
        "3",
        "--out",
        p(&d("attn.csv")),
    ]);
    let mut ckpts: Vec<_> = std::fs::read_dir(d("run/checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    ckpts.sort();
    assert_eq!(ckpts.len(), 3);
    let mut args = vec!["avg-ckpt", "--out"];
    let avg = d("avg.mmtc");
    args.push(p(&avg));
    args.extend(ckpts.iter().map(|c| p(c)));
    ok(&args);

    let read = |n: &str| std::fs::read(d(n)).unwrap();
    let attn = String::from_utf8(read("attn.csv")).unwrap();
    let rows: Vec<&str> = attn.lines().collect();
    assert!(!rows.is_empty());
    for r in &rows {
        let s: f64 = r.split(',').map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert_eq!(r.split(',').count(), 12);
    }
    vec![
        ("hyp".into(), hyps.into_bytes()),
        ("probe".into(), probe.into_bytes()),
        ("congruence".into(), cong.into_bytes()),
        ("model".into(), read("run/model.mmtc")),
        ("log".into(), read("run/train_log.tsv")),
        ("feats".into(), read("feats.mmtf")),
        ("attn".into(), read("attn.csv")),
        ("avg".into(), read("avg.mmtc")),
    ]
}

#[test]
fn seeded_pipeline_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    for ((name, x), (_, y)) in ra.iter().zip(&rb) {
        assert!(x == y, "{name} differs between runs");
    }
}
