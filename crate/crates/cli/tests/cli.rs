use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use xdora_core::dataset::{save_embeddings, EmbeddingDims, EmbeddingRecord, EmbeddingSet, Task};
use xdora_core::fusion::load_model;
use xdora_core::math::Rng;
use xdora_core::retrieval::load_index;

const DIMS: EmbeddingDims = EmbeddingDims { d_v: 8, seq_len: 4, d_t: 16 };

fn xdora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdora"))
        .args(args)
        .env_remove("XDORA_LVLM_ENDPOINT")
        .output()
        .expect("spawn xdora")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert_eq!(out.status.code(), Some(0), "stderr:\n{}", stderr(out));
}

/// `n` records per class; class `c` is shifted along axis `c` in both
/// modalities. Captions name the class so a mock service can answer.
fn toy_set(num_classes: usize, n: usize, seed: u64) -> EmbeddingSet {
    let names = if num_classes == 2 { Task::Task1.class_names() } else { Task::Task2.class_names() };
    let mut rng = Rng::new(seed);
    let mut set = EmbeddingSet::new(DIMS);
    for i in 0..num_classes * n {
        let y = i % num_classes;
        let mut image: Vec<f32> = (0..DIMS.d_v).map(|_| (0.3 * rng.normal()) as f32).collect();
        image[y] += 2.0;
        let mut tokens: Vec<f32> = (0..DIMS.seq_len * DIMS.d_t).map(|_| (0.3 * rng.normal()) as f32).collect();
        tokens[y] += 2.0;
        let mut mask = vec![true; DIMS.seq_len];
        mask[DIMS.seq_len - 1] = i % 3 != 0;
        set.records.push(EmbeddingRecord {
            id: format!("m{seed}-{i}"),
            label: Some(y),
            image_embedding: image,
            token_embeddings: tokens,
            attention_mask: mask,
            caption: Some(format!("meme {i} aimed at {}", names[y])),
        });
    }
    set
}

fn write_set(dir: &Path, name: &str, set: &EmbeddingSet) -> PathBuf {
    let path = dir.join(name);
    save_embeddings(&path, set).unwrap();
    path
}

fn train_args<'a>(train: &'a str, valid: &'a str, task: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--train",
        train,
        "--valid",
        valid,
        "--task",
        task,
        "--out",
        out,
        "--heads",
        "2",
        "--hidden-dim",
        "8",
        "--lr",
        "0.01",
        "--batch-size",
        "8",
        "--epochs",
        "6",
    ]
}

#[test]
fn remap_five_line_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    let labels = ["Political", "Gender", "Religious", "Others", "Non-aggression"];
    let text: String =
        labels.iter().enumerate().map(|(i, l)| format!("{{\"id\":\"r{i}\",\"source_label\":\"{l}\"}}\n")).collect();
    std::fs::write(&manifest, text).unwrap();
    let out = dir.path().join("r.jsonl");
    assert_ok(&xdora(&["remap", "--manifest", p(&manifest), "--out", p(&out)]));

    let rows: Vec<serde_json::Value> =
        std::fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 5);
    let mapped: Vec<_> = rows.iter().filter(|r| r["discarded"] == false).collect();
    assert_eq!(mapped.len(), 4);
    assert_eq!(rows[3]["id"], "r3");
    assert_eq!(rows[3]["discarded"], true);
    let t2: Vec<_> = rows.iter().map(|r| r["task2_label"].clone()).collect();
    assert_eq!(t2, [2.into(), 0.into(), 1.into(), serde_json::Value::Null, serde_json::Value::Null]);
    assert_eq!(rows[4]["task1_label"], 0);
}

#[test]
fn train_smoke_task2() {
    let dir = tempfile::tempdir().unwrap();
    let train = write_set(dir.path(), "t.xdem", &toy_set(4, 12, 1));
    let valid = write_set(dir.path(), "v.xdem", &toy_set(4, 4, 2));
    let model = dir.path().join("model.xdmw");
    let log = dir.path().join("train.log");
    let mut args = train_args(p(&train), p(&valid), "task2", p(&model));
    args.extend(["--log", p(&log)]);
    let out = xdora(&args);
    assert_ok(&out);
    let loaded = load_model(&model).unwrap();
    assert_eq!(loaded.config.num_classes, 4);
    assert_eq!(loaded.config.d_t, 16);
    assert!(!std::fs::read_to_string(&log).unwrap().is_empty());
    let first = stderr(&out).lines().next().unwrap().to_string();
    let config: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(config["event"], "config");
    assert_eq!(config["config"]["command"]["train"]["seed"], 42);
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = xdora(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    let out = xdora(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_is_data_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.xdmw");
    let valid = write_set(dir.path(), "v.xdem", &toy_set(2, 3, 2));
    let out = xdora(&train_args(p(&dir.path().join("absent.xdem")), p(&valid), "task1", p(&model)));
    assert_eq!(out.status.code(), Some(2));
    assert!(!model.exists());

    // A 4-class file under the 2-class task fails inside training.
    let train = write_set(dir.path(), "t.xdem", &toy_set(4, 3, 1));
    let out = xdora(&train_args(p(&train), p(&valid), "task1", p(&model)));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(!model.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn bad_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_set(dir.path(), "d.xdem", &toy_set(2, 10, 1));
    let out = xdora(&["split", "--data", p(&data), "--out-dir", p(dir.path()), "--fractions", "0.5,0.5"]);
    assert_eq!(out.status.code(), Some(1));
    let out =
        xdora(&["fuse", "--model", p(&data), "--index", p(&data), "--data", p(&data), "--out", "x", "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_set(dir.path(), "all.xdem", &toy_set(4, 10, 3));
    let mut outputs = Vec::new();
    for run in 0..2 {
        let sub = dir.path().join(format!("run{run}"));
        std::fs::create_dir(&sub).unwrap();
        assert_ok(&xdora(&["split", "--data", p(&data), "--out-dir", p(&sub), "--seed", "7"]));
        let model = sub.join("model.xdmw");
        let (train, valid) = (sub.join("train.xdem"), sub.join("valid.xdem"));
        let mut args = train_args(p(&train), p(&valid), "task2", p(&model));
        let jobs = if run == 0 { "1" } else { "3" };
        args.extend(["--seed", "9", "--jobs", jobs]);
        assert_ok(&xdora(&args));
        let preds = sub.join("p.jsonl");
        assert_ok(&xdora(&["predict", "--model", p(&model), "--data", p(&sub.join("test.xdem")), "--out", p(&preds)]));
        let files = ["train.xdem", "valid.xdem", "test.xdem", "model.xdmw", "p.jsonl"];
        outputs.push(files.map(|f| std::fs::read(sub.join(f)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = write_set(d, "all.xdem", &toy_set(4, 15, 4));
    assert_ok(&xdora(&["split", "--data", p(&data), "--out-dir", p(d)]));
    let (train, valid, test) = (d.join("train.xdem"), d.join("valid.xdem"), d.join("test.xdem"));
    let model = d.join("model.xdmw");
    assert_ok(&xdora(&train_args(p(&train), p(&valid), "task2", p(&model))));

    let index = d.join("train.xdzi");
    assert_ok(&xdora(&["index-build", "--model", p(&model), "--data", p(&train), "--out", p(&index)]));
    assert_eq!(load_index(&index).unwrap().len(), 48);
    let dump = d.join("test.xdzi");
    assert_ok(&xdora(&["embed-fused", "--model", p(&model), "--data", p(&test), "--out", p(&dump)]));
    assert_eq!(load_index(&dump).unwrap().len(), 6);

    let knn = d.join("knn.jsonl");
    assert_ok(&xdora(&[
        "knn",
        "--index",
        p(&index),
        "--model",
        p(&model),
        "--data",
        p(&test),
        "--out",
        p(&knn),
        "--k",
        "3",
        "--per-class",
        "false",
    ]));
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&knn).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["neighbors"].as_array().unwrap().len(), 3);

    let grid = d.join("grid.json");
    assert_ok(&xdora(&[
        "grid-alpha",
        "--model",
        p(&model),
        "--index",
        p(&index),
        "--valid",
        p(&valid),
        "--out",
        p(&grid),
    ]));
    let grid: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&grid).unwrap()).unwrap();
    assert_eq!(grid["table"].as_array().unwrap().len(), 5);
    let alpha = grid["best_alpha"].as_f64().unwrap().to_string();

    let fused = d.join("fused.jsonl");
    assert_ok(&xdora(&[
        "fuse",
        "--model",
        p(&model),
        "--index",
        p(&index),
        "--data",
        p(&test),
        "--out",
        p(&fused),
        "--alpha",
        &alpha,
    ]));
    let report = d.join("report.json");
    let table = d.join("report.txt");
    let out =
        xdora(&["evaluate", "--predictions", p(&fused), "--task", "task2", "--out", p(&report), "--table", p(&table)]);
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(report["macro_f1"].as_f64().unwrap() > 0.5, "{report}");
    assert_eq!(report["ci"]["iterations"], 1000);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), std::fs::read_to_string(&table).unwrap());
}

/// Answers every request with the class named at the end of the query
/// caption; the first `failures` requests get a 500.
fn spawn_mock(failures: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let served = Arc::new(AtomicUsize::new(0));
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let served = Arc::clone(&served);
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                loop {
                    let mut len = 0;
                    let mut line = String::new();
                    let mut saw_request = false;
                    loop {
                        line.clear();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            break;
                        }
                        saw_request = true;
                        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                            len = v.trim().parse().unwrap();
                        }
                        if line == "\r\n" {
                            break;
                        }
                    }
                    if !saw_request {
                        break;
                    }
                    let mut body = vec![0; len];
                    reader.read_exact(&mut body).unwrap();
                    let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                    let (status, reply) = if served.fetch_add(1, Ordering::SeqCst) < failures {
                        ("500 Internal Server Error", "{\"error\":\"busy\"}".to_string())
                    } else {
                        let prompt = req["prompt"].as_str().unwrap();
                        let query = prompt.lines().last().unwrap().trim_end_matches(" → Label:");
                        let name = query.rsplit(' ').next().unwrap();
                        ("200 OK", serde_json::json!({ "text": format!("The label is {name}.") }).to_string())
                    };
                    let resp = format!(
                        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{reply}",
                        reply.len()
                    );
                    stream.write_all(resp.as_bytes()).unwrap();
                }
            });
        }
    });
    format!("http://{addr}/classify")
}

#[test]
fn prompt_build_and_lvlm_classify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = write_set(d, "train.xdem", &toy_set(4, 8, 5));
    let valid = write_set(d, "valid.xdem", &toy_set(4, 3, 6));
    let queries = write_set(d, "q.xdem", &toy_set(4, 2, 7));
    let model = d.join("model.xdmw");
    assert_ok(&xdora(&train_args(p(&train), p(&valid), "task2", p(&model))));
    let index = d.join("train.xdzi");
    assert_ok(&xdora(&["index-build", "--model", p(&model), "--data", p(&train), "--out", p(&index)]));

    let prompts = d.join("prompts.jsonl");
    assert_ok(&xdora(&[
        "prompt-build",
        "--task",
        "task2",
        "--mode",
        "rag",
        "--queries",
        p(&queries),
        "--train",
        p(&train),
        "--model",
        p(&model),
        "--index",
        p(&index),
        "--k",
        "2",
        "--out",
        p(&prompts),
    ]));
    let rows: Vec<serde_json::Value> =
        std::fs::read_to_string(&prompts).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0]["prompt"]["exemplars"].as_array().unwrap().len(), 8);

    let out_path = d.join("lvlm.jsonl");
    let endpoint = spawn_mock(1);
    let out = xdora(&[
        "lvlm-classify",
        "--prompts",
        p(&prompts),
        "--out",
        p(&out_path),
        "--endpoint",
        &endpoint,
        "--backoff-ms",
        "1",
        "--concurrency",
        "2",
    ]);
    assert_ok(&out);
    let report = d.join("report.json");
    assert_ok(&xdora(&[
        "evaluate",
        "--predictions",
        p(&out_path),
        "--task",
        "task2",
        "--out",
        p(&report),
        "--bootstrap",
        "0",
    ]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["macro_f1"], 1.0);
}

#[test]
fn unreachable_service_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let queries = write_set(dir.path(), "q.xdem", &toy_set(2, 1, 1));
    let prompts = dir.path().join("prompts.jsonl");
    assert_ok(&xdora(&[
        "prompt-build",
        "--task",
        "task1",
        "--mode",
        "zero-shot",
        "--queries",
        p(&queries),
        "--out",
        p(&prompts),
    ]));
    // Bind then drop to get a port with nothing listening.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out_path = dir.path().join("lvlm.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_xdora"))
        .args(["lvlm-classify", "--prompts", p(&prompts), "--out", p(&out_path), "--retries", "1", "--backoff-ms", "1"])
        .env("XDORA_LVLM_ENDPOINT", format!("http://127.0.0.1:{port}/"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(!out_path.exists());
}
