use std::path::PathBuf;
use std::process::{Command, Output};

use bsa_core::analysis::synth::random_inputs;
use bsa_core::dense_attention;
use bsa_core::format::{read_mask, read_tensor, write_tensor};

fn run(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsa"))
        .args(args)
        .output()
        .unwrap()
}

fn bsa<S: AsRef<str>>(args: &[S]) -> String {
    let args: Vec<String> = args.iter().map(|a| a.as_ref().to_owned()).collect();
    let out = run(&args);
    assert!(
        out.status.success(),
        "bsa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Scratch(tempfile::TempDir);

impl Scratch {
    fn new() -> Self {
        Self(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_owned()
    }

    fn write_inputs(&self, heads: usize, tokens: usize, d: usize) {
        let inp = random_inputs(heads, tokens, d, 3);
        write_tensor(self.path("q.bsat"), inp.q()).unwrap();
        write_tensor(self.path("k.bsat"), inp.k()).unwrap();
        write_tensor(self.path("v.bsat"), inp.v()).unwrap();
    }

    fn qkv(&self) -> Vec<String> {
        [
            "--q",
            &self.p("q.bsat"),
            "--k",
            &self.p("k.bsat"),
            "--v",
            &self.p("v.bsat"),
        ]
        .map(str::to_owned)
        .to_vec()
    }
}

fn cat(parts: &[&[&str]]) -> Vec<String> {
    parts
        .iter()
        .flat_map(|p| p.iter().map(|s| s.to_string()))
        .collect()
}

#[test]
fn dense_and_full_sparse_agree() {
    let dir = Scratch::new();
    dir.write_inputs(2, 2 * 69, 32);
    let layout = [
        "--frames",
        "2",
        "--specials-per-frame",
        "5",
        "--block-q",
        "32",
        "--block-k",
        "16",
    ];
    let qkv = dir.qkv();
    let qkv: Vec<&str> = qkv.iter().map(String::as_str).collect();

    bsa(&cat(&[
        &["attend", "--mode", "dense"],
        &qkv,
        &["--out", &dir.p("dense.bsat")],
    ]));
    let stats = bsa(&cat(&[
        &[
            "mask",
            "--q",
            &dir.p("q.bsat"),
            "--k",
            &dir.p("k.bsat"),
            "--tau",
            "1",
            "--rho",
            "0",
        ],
        &["--out", &dir.p("m.bsm"), "--stats"],
        &layout,
    ]));
    assert_eq!(stats, "head,achieved_sparsity\n0,0\n1,0\n");

    bsa(&cat(&[
        &["attend", "--mode", "sparse"],
        &qkv,
        &[
            "--mask",
            &dir.p("m.bsm"),
            "--out",
            &dir.p("sparse.bsat"),
            "--report",
            &dir.p("r.csv"),
        ],
        &layout,
    ]));
    let dense = read_tensor(dir.path("dense.bsat")).unwrap();
    let sparse = read_tensor(dir.path("sparse.bsat")).unwrap();
    assert!(dense.max_abs_diff(&sparse).unwrap() <= 1e-5);

    let report = std::fs::read_to_string(dir.path("r.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next(),
        Some("head,achieved_sparsity,sparse_flops,theoretical_speedup,wall_ms")
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    let flops = (4 * 138 * 138 * 32).to_string();
    assert_eq!(&first[..4], ["0", "0", flops.as_str(), "1"]);
    assert_eq!(lines.count(), 1);
}

#[test]
fn sparse_without_mask_file_predicts_one() {
    let dir = Scratch::new();
    dir.write_inputs(1, 256, 16);
    let qkv = dir.qkv();
    let qkv: Vec<&str> = qkv.iter().map(String::as_str).collect();
    bsa(&cat(&[
        &["attend", "--mode", "sparse", "--tau", "0", "--rho", "0.5"],
        &qkv,
        &["--out", &dir.p("o.bsat")],
    ]));
    assert_eq!(
        read_tensor(dir.path("o.bsat")).unwrap().shape(),
        [1, 256, 16]
    );
}

#[test]
fn mask_file_and_stats_match_requested_ratio() {
    let dir = Scratch::new();
    dir.write_inputs(1, 512, 16);
    let stats = bsa(&[
        "mask",
        "--q",
        &dir.p("q.bsat"),
        "--k",
        &dir.p("k.bsat"),
        "--tau",
        "0",
        "--rho",
        "0.75",
        "--out",
        &dir.p("m.bsm"),
        "--stats",
    ]);
    assert_eq!(stats, "head,achieved_sparsity\n0,0.75\n");
    let mask = read_mask(dir.path("m.bsm")).unwrap();
    assert_eq!(mask.geometry().nk_blocks, 8);
    assert_eq!(mask.row_count(0, 0), 2);
}

#[test]
fn map_then_analyze_and_correspond() {
    let dir = Scratch::new();
    dir.write_inputs(2, 2 * 18, 8);
    let qkv = dir.qkv();
    let qkv: Vec<&str> = qkv.iter().map(String::as_str).collect();
    bsa(&cat(&[
        &["attend", "--mode", "map"],
        &qkv,
        &["--out", &dir.p("map.bsat")],
    ]));
    assert_eq!(
        read_tensor(dir.path("map.bsat")).unwrap().shape(),
        [2, 36, 36]
    );

    let layout = [
        "--frames",
        "2",
        "--specials-per-frame",
        "2",
        "--grid",
        "4x4",
    ];
    bsa(&cat(&[
        &[
            "analyze",
            "--map",
            &dir.p("map.bsat"),
            "--csv",
            &dir.p("stats.csv"),
        ],
        &layout,
    ]));
    let text = std::fs::read_to_string(dir.path("stats.csv")).unwrap();
    assert!(text.starts_with("layer,quadrant,entries,mean_avg,mean_std,max_avg,max_std\n"));
    assert_eq!(text.lines().count(), 5);

    let text = bsa(&cat(&[
        &[
            "correspond",
            "--map",
            &dir.p("map.bsat"),
            "--k",
            "5",
            "--cross-view-only",
        ],
        &layout,
    ]));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn layerdrop_outputs() {
    assert_eq!(
        bsa(&["layerdrop", "--mode", "mid", "--n", "2", "--layers", "24"]),
        "11,12\n"
    );
    let table = bsa(&["layerdrop", "--table", "--layers", "3"]);
    assert_eq!(table.lines().count(), 1 + 4 * 4);

    let dir = Scratch::new();
    std::fs::write(dir.path("metrics.csv"), "mode,n_skipped,auc\nback,2,0.5\n").unwrap();
    assert_eq!(
        bsa(&[
            "layerdrop",
            "--layers",
            "24",
            "--join",
            &dir.p("metrics.csv")
        ]),
        "mode,n_skipped,auc,skipped_layers\nback,2,0.5,22;23\n"
    );
}

#[test]
fn synth_writes_all_artifacts_deterministically() {
    let dir = Scratch::new();
    let generate = |name: &str| {
        bsa(&[
            "synth",
            "--frames",
            "2",
            "--patches",
            "64",
            "--matches",
            "8",
            "--c",
            "8",
            "--seed",
            "1",
            "--head-dim",
            "16",
            "--block-q",
            "32",
            "--block-k",
            "16",
            "--out-prefix",
            &dir.p(name),
        ]);
        ["q.bsat", "k.bsat", "v.bsat", "matches.csv", "blocks.csv"]
            .map(|suffix| std::fs::read(dir.path(&format!("{name}_{suffix}"))).unwrap())
    };
    let a = generate("a");
    assert_eq!(a, generate("b"));
    assert_eq!(String::from_utf8(a[3].clone()).unwrap().lines().count(), 9);
    assert_eq!(
        read_tensor(dir.path("a_q.bsat")).unwrap().shape(),
        [1, 128, 16]
    );
}

#[test]
fn bench_csv_shape() {
    let text = bsa(&[
        "bench",
        "--sizes",
        "256,512",
        "--tau",
        "0",
        "--rho",
        "0.5",
        "--repeats",
        "3",
        "--head-dim",
        "16",
        "--threads",
        "1",
    ]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "N,dense_ms,sparse_ms,achieved_sparsity,speedup");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("256,"));
    assert!(lines[1].contains(",0.5,"));
}

#[test]
fn dense_output_matches_library() {
    let dir = Scratch::new();
    dir.write_inputs(1, 40, 8);
    let qkv = dir.qkv();
    let qkv: Vec<&str> = qkv.iter().map(String::as_str).collect();
    bsa(&cat(&[
        &["attend", "--mode", "dense"],
        &qkv,
        &["--out", &dir.p("o.bsat")],
    ]));
    let inp = random_inputs(1, 40, 8, 3);
    assert_eq!(
        read_tensor(dir.path("o.bsat")).unwrap(),
        dense_attention(&inp).unwrap()
    );
}

#[test]
fn bad_inputs_fail_with_the_file_name() {
    let dir = Scratch::new();
    std::fs::write(dir.path("bad.bsat"), b"nope").unwrap();
    let bad = dir.p("bad.bsat");
    let out = run(&cat(&[&[
        "attend",
        "--mode",
        "dense",
        "--q",
        &bad,
        "--k",
        &bad,
        "--v",
        &bad,
        "--out",
        &dir.p("o"),
    ]]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.bsat"));
}

#[test]
fn layout_mismatch_is_reported() {
    let dir = Scratch::new();
    dir.write_inputs(1, 30, 8);
    let out = run(&cat(&[&[
        "mask",
        "--q",
        &dir.p("q.bsat"),
        "--k",
        &dir.p("k.bsat"),
        "--tau",
        "0.5",
        "--rho",
        "0.5",
        "--frames",
        "4",
        "--out",
        &dir.p("m.bsm"),
    ]]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("4 frames"));
}
