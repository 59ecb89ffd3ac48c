use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use domainness::format::load_map;
use domainness::fusion::Report;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_domainness");
const SMALL: [&str; 4] = ["--side", "128", "--crop", "100"];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("DOMAINNESS_EXTRACTOR")
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "{args:?} failed:\n{stderr}");
    stderr
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn synth(dir: &Path) -> (String, String) {
    let d = dir.join("data");
    ok(&["synth", "--out", d.to_str().unwrap(), "--per-domain", "10", "--side", "128", "--seed", "3"]);
    (d.join("P.json").display().to_string(), d.join("Q.json").display().to_string())
}

fn pipeline(src: &str, tgt: &str, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["pipeline", "--src", src, "--tgt", tgt, "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args)
}

fn reused_line(stderr: &str) -> Option<&str> {
    stderr.lines().find_map(|l| l.split("reused cached stages: ").nth(1))
}

fn same_file(a: &Path, b: &Path) {
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{} vs {}", a.display(), b.display());
}

fn same_maps(a: &Path, b: &Path) {
    for side in ["src", "tgt"] {
        for i in 0..10 {
            let f = format!("maps/{side}/{i:04}.dmap");
            same_file(&a.join(&f), &b.join(&f));
        }
    }
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["pipeline", "--no-such-flag"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["synth", "--out", "/tmp/x", "--shift", "sideways"]), 1);
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.json");
    let m = missing.to_str().unwrap();
    assert_eq!(code(&["pipeline", "--src", m, "--tgt", m, "--out", tmp.path().to_str().unwrap()]), 2);
    let (src, tgt) = synth(tmp.path());
    let out = tmp.path().join("bad");
    let o = out.to_str().unwrap();
    assert_eq!(code(&["pipeline", "--src", &src, "--tgt", &tgt, "--out", o, "--fill", "red"]), 1);
    assert_eq!(code(&["pipeline", "--src", &src, "--tgt", &tgt, "--out", o, "--side", "128"]), 1);
    assert_eq!(code(&["--extractor", "exit 0", "train-domain", "--src", &src, "--tgt", &tgt, "--out", o]), 3);
}

#[test]
fn pipeline_outputs_caching_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let (src, tgt) = synth(tmp.path());
    let a = tmp.path().join("a");

    let first = pipeline(&src, &tgt, &a, &["--jobs", "1"]);
    assert_eq!(reused_line(&first), None);
    for f in [
        "analysis.json",
        "report.json",
        "predictions.csv",
        "predictions_adapted.csv",
        "models/domain.lmod",
        "models/domain.json",
        "models/global.lmod",
        "maps/src/index.json",
        "maps/tgt/0009.dmap",
        "levels/src/levels.dfea",
        "levels/tgt/global.dfea",
        "levels/tgt/levels.json",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    for pair in ["LL", "LM", "LH", "ML", "MM", "MH", "HL", "HM", "HH"] {
        assert!(a.join(format!("models/levels/{pair}.lmod")).is_file());
        assert!(a.join(format!("models/adapted/{pair}.lmod")).is_file());
        assert!(a.join(format!("models/transforms/{pair}.atfm")).is_file());
    }
    let report: Report = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "G", "G-FT", "L-L level", "L-H level", "L-M level", "M-M level", "M-L level", "M-H level",
            "H-H level", "H-L level", "H-M level", "G + DL", "G + adapted-DL"
        ]
    );
    assert_eq!(report.adapted_levels.len(), 9);
    assert_eq!(report.pair, "P->Q");
    let csv = fs::read_to_string(a.join("predictions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);

    // untouched rerun: every stage comes from the cache, bytes identical
    let saved = fs::read(a.join("report.json")).unwrap();
    let again = pipeline(&src, &tgt, &a, &[]);
    assert_eq!(
        reused_line(&again),
        Some("domain, maps/src, maps/tgt, levels/src#0, levels/tgt#0, evaluate")
    );
    assert_eq!(fs::read(a.join("report.json")).unwrap(), saved);

    // a later-stage setting only invalidates that stage
    let eps = pipeline(&src, &tgt, &a, &["--eps", "0.01"]);
    assert_eq!(reused_line(&eps), Some("domain, maps/src, maps/tgt, levels/src#0, levels/tgt#0"));
    pipeline(&src, &tgt, &a, &[]);
    assert_eq!(fs::read(a.join("report.json")).unwrap(), saved);

    let forced = pipeline(&src, &tgt, &a, &["--force"]);
    assert_eq!(reused_line(&forced), None);
    assert_eq!(fs::read(a.join("report.json")).unwrap(), saved);

    // thread count does not matter
    let b = tmp.path().join("b");
    pipeline(&src, &tgt, &b, &["--jobs", "4"]);
    same_maps(&a, &b);
    for f in ["report.json", "analysis.json", "levels/src/levels.dfea", "levels/tgt/levels.dfea"] {
        same_file(&a.join(f), &b.join(f));
    }

    // the reference FEX0 server yields the same maps and table
    let c = tmp.path().join("c");
    let server = format!("exec '{BIN}' serve-builtin");
    pipeline(&src, &tgt, &c, &["--extractor", &server]);
    same_maps(&a, &c);
    same_file(&a.join("report.json"), &c.join("report.json"));
}

#[test]
fn stage_commands_reproduce_the_pipeline() {
    let tmp = TempDir::new().unwrap();
    let (src, tgt) = synth(tmp.path());
    let whole = tmp.path().join("whole");
    pipeline(&src, &tgt, &whole, &[]);

    let s = tmp.path().join("step");
    let p = |rel: &str| s.join(rel).display().to_string();
    let with_side = |mut v: Vec<String>| {
        v.extend(["--side".to_string(), "128".to_string()]);
        v
    };
    let steps: Vec<Vec<String>> = vec![
        vec!["train-domain".into(), "--src".into(), src.clone(), "--tgt".into(), tgt.clone(), "--out".into(), p("domain.lmod")],
        vec!["map".into(), "--model".into(), p("domain.lmod"), "--manifest".into(), src.clone(), "--out".into(), p("maps/src"), "--heatmap".into()],
        vec!["map".into(), "--model".into(), p("domain.lmod"), "--manifest".into(), tgt.clone(), "--out".into(), p("maps/tgt")],
        vec!["levels".into(), "--manifest".into(), src.clone(), "--maps".into(), p("maps/src"), "--out".into(), p("levels/src"), "--role".into(), "src".into()],
        vec!["levels".into(), "--manifest".into(), tgt.clone(), "--maps".into(), p("maps/tgt"), "--out".into(), p("levels/tgt"), "--role".into(), "tgt".into()],
    ];
    for step in steps {
        let args = with_side(step);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let analysis = p("analysis.json");
    ok(&[
        "analyze", "--manifest", &src, "--maps", &p("maps/src"), "--manifest", &tgt, "--maps", &p("maps/tgt"),
        "--side", "128", "--crop", "100", "--out", &analysis,
    ]);
    ok(&["evaluate", "--src", &p("levels/src"), "--tgt", &p("levels/tgt"), "--out", &p("eval"), "--pair", "P->Q"]);

    same_file(&whole.join("models/domain.lmod"), &s.join("domain.lmod"));
    same_maps(&whole, &s);
    same_file(&whole.join("analysis.json"), &s.join("analysis.json"));
    same_file(&whole.join("levels/tgt/levels.dfea"), &s.join("levels/tgt/levels.dfea"));
    same_file(&whole.join("report.json"), &s.join("eval/report.json"));
    assert!(s.join("maps/src/0000.heat.png").is_file());
    assert!(!s.join("maps/src/0000.overlay.png").exists());

    // single classifiers and transforms from the stage commands
    let lmod = p("gl.lmod");
    ok(&["train-object", "--levels", &p("levels/src"), "--level", "G", "--out", &lmod]);
    same_file(&whole.join("models/global.lmod"), Path::new(&lmod));
    let atfm = p("hh.atfm");
    ok(&["adapt", "--src", &p("levels/src"), "--tgt", &p("levels/tgt"), "--src-level", "H", "--tgt-level", "H", "--out", &atfm]);
    same_file(&whole.join("models/transforms/HH.atfm"), Path::new(&atfm));
    let adapted = p("hh.lmod");
    ok(&["train-object", "--levels", &p("levels/src"), "--level", "H", "--transform", &atfm, "--out", &adapted]);
    same_file(&whole.join("models/adapted/HH.lmod"), Path::new(&adapted));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let tmp = TempDir::new().unwrap();
    let (src, tgt) = synth(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"side": 96, "crop": 64}"#).unwrap();
    let c = cfg.to_str().unwrap();
    let p = |rel: &str| tmp.path().join(rel).display().to_string();

    ok(&["train-domain", "--src", &src, "--tgt", &tgt, "--out", &p("d.lmod"), "--config", c]);
    ok(&["map", "--model", &p("d.lmod"), "--manifest", &src, "--out", &p("m96"), "--config", c]);
    ok(&["map", "--model", &p("d.lmod"), "--manifest", &src, "--out", &p("m64"), "--config", c, "--side", "64"]);
    ok(&["map", "--model", &p("d.lmod"), "--manifest", &src, "--out", &p("m256"), "--side", "256"]);
    for (dir, side) in [("m96", 96), ("m64", 64), ("m256", 256)] {
        let map = load_map(tmp.path().join(dir).join("0000.dmap")).unwrap();
        assert_eq!((map.height(), map.width()), (side, side), "{dir}");
    }

    // crop 100 from the flag no longer fits the side 96 from the file
    let o = p("run");
    assert_eq!(code(&["pipeline", "--src", &src, "--tgt", &tgt, "--out", &o, "--config", c, "--crop", "100"]), 1);
    fs::write(&cfg, r#"{"side": 96, "colour": "blue"}"#).unwrap();
    assert_eq!(code(&["pipeline", "--src", &src, "--tgt", &tgt, "--out", &o, "--config", c]), 2);
}
