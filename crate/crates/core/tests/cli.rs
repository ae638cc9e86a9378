use std::path::Path;
use std::process::{Command, Output};

fn asmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asmem")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["--seed", "5", "--output", p(dir), "synth", "--prefix", "128", "--clusters", "4", "--per-cluster", "8"];
    args.extend_from_slice(extra);
    let o = asmem(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn build(traces: &str, bank: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--seed", "5", "--output", p(bank), "build", "--traces", traces, "--k", "4"];
    args.extend_from_slice(extra);
    asmem(&args)
}

fn inspect(bank: &Path) -> String {
    let o = asmem(&["inspect", "--bank", p(bank)]);
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o)
}

#[test]
fn usage_exit_codes() {
    assert_eq!(asmem(&["--help"]).status.code(), Some(0));
    assert_eq!(asmem(&[]).status.code(), Some(2));
    assert_eq!(asmem(&["build", "--bogus"]).status.code(), Some(2));
    assert_eq!(asmem(&["inspect", "--bank", "/nonexistent/bank.asmt"]).status.code(), Some(2));
}

#[test]
fn synth_rejects_uneven_chunks() {
    let tmp = tempfile::tempdir().unwrap();
    let o = asmem(&["--output", p(tmp.path()), "synth", "--prefix", "100", "--chunks", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("chunks must divide prefix"), "{}", stderr(&o));
}

#[test]
fn build_inspect_query_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, &[]);
    let traces = dir.join("traces.asmt");
    let bank = dir.join("bank.asmt");
    let o = build(p(&traces), &bank, &["--whiten", "--hier-nl1", "2", "--top-m", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let info = inspect(&bank);
    for line in ["k=4", "whitening=true", "key_mode=pre_rope", "n_l1=2,2,2,2", "layers=2", "slots_per_layer=2"] {
        assert!(info.lines().any(|l| l == line), "missing {line} in\n{info}");
    }

    let o = asmem(&["query", "--bank", p(&bank), "--oracle", p(&dir.join("oracle.asmt")), "--hier"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some("token,layer,group,entry,similarity,error"));
    assert_eq!(csv.lines().count(), 1 + 32 * 2 * 2);
    assert!(stderr(&o).contains("median_error="));

    let o = asmem(&["verify", "--bank", p(&bank), "--traces", p(&traces)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report = stdout(&o);
    assert!(report.lines().count() >= 10);
    assert!(report.lines().all(|l| l.starts_with("PASS ")), "{report}");
    assert!(report.contains("bank_reproducible"));
}

#[test]
fn chunked_build_matches_monolithic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, &["--chunks", "4"]);
    let chunks: Vec<String> = (0..4).map(|i| p(&dir.join(format!("traces.chunk{i}.asmt"))).to_string()).collect();
    let chunk_list = chunks.join(",");
    let mono = dir.join("mono.asmt");
    let chunked = dir.join("chunked.asmt");
    assert!(build(p(&dir.join("traces.asmt")), &mono, &[]).status.success());
    let o = build(&chunk_list, &chunked, &["--chunked"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(build(&chunk_list, &dir.join("x.asmt"), &[]).status.code(), Some(2));

    let o = asmem(&[
        "verify",
        "--bank",
        p(&chunked),
        "--traces",
        &chunk_list,
        "--monolithic",
        p(&dir.join("traces.asmt")),
        "--reference-bank",
        p(&mono),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS reference_bank_match"));
    assert!(stdout(&o).contains("PASS input_chunked_states"));
}

#[test]
fn failing_check_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, &[]);
    let traces = dir.join("traces.asmt");
    let a = dir.join("a.asmt");
    let b = dir.join("b.asmt");
    assert!(build(p(&traces), &a, &[]).status.success());
    assert!(build(p(&traces), &b, &["--whiten"]).status.success());
    let o = asmem(&["verify", "--bank", p(&a), "--reference-bank", p(&b)]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL reference_bank_match"));
}

#[test]
fn identical_banks_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, &[]);
    let traces = dir.join("traces.asmt");
    let mut banks = Vec::new();
    for (i, threads) in ["1", "4", "4"].iter().enumerate() {
        let out = dir.join(format!("bank{i}.asmt"));
        let o = build(p(&traces), &out, &["--threads", threads, "--whiten", "--hier-nl1", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
        banks.push(std::fs::read(out).unwrap());
    }
    assert!(banks.windows(2).all(|w| w[0] == w[1]));

    let again = tmp.path().join("again");
    synth(&again, &[]);
    assert_eq!(std::fs::read(again.join("traces.asmt")).unwrap(), std::fs::read(&traces).unwrap());
}

#[test]
fn config_file_fills_unset_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, &[]);
    let traces = dir.join("traces.asmt");
    let cfg = dir.join("build.cfg");
    std::fs::write(&cfg, "# build settings\niters = 7\nwhiten = true\nhier_nl1 = 2\nper-cluster = 9\n").unwrap();
    let bank = dir.join("bank.asmt");
    let o = asmem(&["--config", p(&cfg), "--output", p(&bank), "build", "--traces", p(&traces), "--k", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let info = inspect(&bank);
    assert!(info.lines().any(|l| l == "k=3"));
    assert!(info.lines().any(|l| l == "whitening=true"));
    assert!(info.lines().any(|l| l == "n_l1=2,2,2,2"));

    std::fs::write(&cfg, "k = 5\n").unwrap();
    let o = asmem(&["--config", p(&cfg), "--output", p(&bank), "build", "--traces", p(&traces), "--k", "3"]);
    assert!(o.status.success());
    assert!(inspect(&bank).lines().any(|l| l == "k=3"));
    let o = asmem(&["--config", p(&cfg), "--output", p(&bank), "build", "--traces", p(&traces)]);
    assert!(o.status.success());
    assert!(inspect(&bank).lines().any(|l| l == "k=5"));

    std::fs::write(&cfg, "no_such_flag = 1\n").unwrap();
    let o = asmem(&["--config", p(&cfg), "--output", p(&bank), "build", "--traces", p(&traces)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_one_row_per_configuration() {
    let o = asmem(&["bench", "--k", "256,1024", "--trials", "1", "--queries", "4", "--dim", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,K,n_l1,top_m,ops_mean,ns_per_token_mean,trials,seed");
    assert_eq!(lines.len(), 7);
    let flat_ops: f64 = lines.iter().find(|l| l.starts_with("flat,256,")).unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(flat_ops, 256.0);
    assert!(lines[1..].iter().any(|l| l.starts_with("hier,1024,32,16,")));
}
