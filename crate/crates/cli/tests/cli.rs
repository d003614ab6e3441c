use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DEFAULT: &str = include_str!("../configs/default.toml");

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tiled-attn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn invalid_configs_exit_nonzero_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        DEFAULT.replace("[pipeline]", "[pipeline]\nbogus = 1"),
        DEFAULT.replace("schema_version = 1", "schema_version = 7"),
        DEFAULT.replace(
            "[layout]",
            "[layout]\nmaps = { m16n8k16 = \"absent.json\" }",
        ),
        DEFAULT.replacen("\"npu_default\"", "\"absent.toml\"", 1),
        DEFAULT.replace("b_kv2 = 128", "b_kv2 = 96"),
        DEFAULT.replace("h1 = 5120", "h1 = 5000"),
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = write_config(tmp.path(), text);
        let out = tmp.path().join(format!("out{i}"));
        for sub in ["pipeline-sim", "layout-check", "bench"] {
            let o = run(&[sub, "--config", cfg.to_str().unwrap()], &out);
            assert_eq!(o.status.code(), Some(2), "case {i} {sub}");
            assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
            assert!(!out.exists(), "case {i} {sub} left output behind");
        }
    }
    let out = tmp.path().join("missing");
    let o = run(&["mask-demo", "--config", "/no/such/config.toml"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn failed_assertion_exits_one_and_keeps_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = DEFAULT.replace("m8n8k4_f32acc = false", "m8n8k4_f32acc = true");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    let o = run(&["layout-check", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("[FAIL] m8n8k4_f32acc compatibility verdict"));
    assert!(out.join("layout_check.json").is_file());
}

#[test]
fn offload_plan_json_accounts_for_every_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["offload-plan"], tmp.path());
    assert!(o.status.success());
    let text = std::fs::read_to_string(tmp.path().join("offload_plan.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let (l_gpu, l_cpu) = (
        v["plan"]["l_gpu"].as_u64().unwrap(),
        v["plan"]["l_cpu"].as_u64().unwrap(),
    );
    assert_eq!(l_gpu + l_cpu, v["model"]["layers"].as_u64().unwrap());
    assert_eq!(v["plan"]["feasible"], serde_json::Value::Bool(true));
    let csv = std::fs::read_to_string(tmp.path().join("offload_latency.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "Seq_length,Upload,GPU_Calc,Total,CPU_Calc,Off_Upload,Total,GPU_Calc"
    );
}

#[test]
fn bench_writes_one_csv_per_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--seed", "3"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let expected = [
        (
            "bench_attn.csv",
            "case,batch,seq,heads,head_dim,causal,b_q,b_kv1,b_kv2,mask_size,wide_err,narrow_err",
        ),
        (
            "bench_skip.csv",
            "seq,block,n_blocks,empty,full,partial,empty_fraction",
        ),
        (
            "bench_tiling.csv",
            "seq,unified_makespan_s,two_level_makespan_s,reduction_pct,unified_syncs,two_level_syncs",
        ),
        (
            "bench_allreduce.csv",
            "seq,baseline_makespan_s,tiled_makespan_s,speedup,first_block_rows",
        ),
        (
            "bench_offload.csv",
            "Seq_length,Upload,GPU_Calc,Total,CPU_Calc,Off_Upload,Total,GPU_Calc",
        ),
        (
            "bench_layout.csv",
            "instr,partitions,compatible,exchanges_needed,c_tiles",
        ),
    ];
    let mut names: Vec<String> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut want: Vec<&str> = expected.iter().map(|(n, _)| *n).collect();
    want.sort();
    assert_eq!(names, want);
    for (name, header) in expected {
        let text = std::fs::read_to_string(tmp.path().join(name)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{name}");
        assert!(text.lines().count() > 1, "{name} has no rows");
    }
}

#[test]
fn seeds_change_random_experiments() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&["attn-check", "--seed", "1"], &a).status.success());
    assert!(run(&["attn-check", "--seed", "2"], &b).status.success());
    let read = |d: &Path| std::fs::read(d.join("attn_check.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
}

#[test]
fn profile_flag_accepts_files_and_builtins() {
    let tmp = tempfile::tempdir().unwrap();
    let fast_link = tmp.path().join("fast.toml");
    let base = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/profiles/npu_default.toml"),
    )
    .unwrap();
    std::fs::write(
        &fast_link,
        base.replace("interconnect_bw = 1.0e9", "interconnect_bw = inf"),
    )
    .unwrap();
    let out = tmp.path().join("inf");
    let o = run(
        &["allreduce-sim", "--profile", fast_link.to_str().unwrap()],
        &out,
    );
    assert!(o.status.success());
    let csv = std::fs::read_to_string(out.join("allreduce.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(3), Some("1.0000"), "{line}");
    }

    let out = tmp.path().join("builtin");
    assert!(run(&["allreduce-sim", "--profile", "v100_like"], &out)
        .status
        .success());
    // Its smaller on-chip buffers cannot hold the default pipeline tiles.
    let o = run(&["pipeline-sim", "--profile", "v100_like"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible tiling"));
    let o = run(&["pipeline-sim", "--profile", "no_such_profile"], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn custom_fragment_map_paths_resolve_against_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let maps = tmp.path().join("maps");
    std::fs::create_dir(&maps).unwrap();
    std::fs::copy(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/fragments/m16n8k16.json"),
        maps.join("mine.json"),
    )
    .unwrap();
    let text = DEFAULT.replace(
        "[layout]",
        "[layout]\nmaps = { m16n8k16 = \"maps/mine.json\" }",
    );
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    let o = run(&["layout-check", "--config", cfg.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json = std::fs::read_to_string(out.join("layout_check.json")).unwrap();
    assert!(json.contains("maps/mine.json"));
}

#[test]
fn zero_workers_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_tiled-attn"))
        .args(["mask-demo", "--out"])
        .arg(&out)
        .env("TILED_ATTN_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}
