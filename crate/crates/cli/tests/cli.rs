//! End-to-end tests that drive the compiled binary the way a user
//! would: write a config file, run subcommands, and check the artifacts
//! on disk, the JSON on stdout, the progress lines on stderr, and the
//! process exit codes. Where it matters, results are compared
//! bit-for-bit against the library called directly.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use ensemblegen_core::completion::{CompletionConfig, LatentField};
use ensemblegen_core::constraint::{config_for_realization, LcTrainPlan};
use ensemblegen_core::cvae::{save_checkpoint, train_cvae, CvaeConfig};
use ensemblegen_core::ensemble::{
    generate_synthetic, normalize, NormMode, OrderingPolicy, SyntheticConfig, CACHE_DIR_ENV,
};
use ensemblegen_core::pipeline::{run_pipeline, CellConfig, PipelineSettings};
use ensemblegen_core::rng::derive_stream;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ensemblegen"));
    // Keep ambient cache configuration from leaking into the tests.
    cmd.env_remove(CACHE_DIR_ENV);
    cmd
}

/// Run the binary, require success, and parse the single JSON document
/// it prints to stdout.
fn run_ok(args: &[&str]) -> Value {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "command {args:?} wrote invalid JSON to stdout: {e}\nstdout: {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

/// Run the binary expecting failure; return (exit code, stderr).
fn run_err(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().expect("binary runs");
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn stderr_of(args: &[&str]) -> (Output, String) {
    let out = bin().args(args).output().expect("binary runs");
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    (out, err)
}

/// Small but complete run description: a 3-member ensemble on a 4x4
/// grid with 8 monthly steps, and model sizes to match.
fn base_config(out_dir: &Path) -> Value {
    json!({
        "data": {"synthetic": {
            "n_realizations": 3,
            "grid_side": 4,
            "n_timesteps": 8,
            "seed": 19,
            "spatial_corr_len": 1.0
        }},
        "cvae": {"t_len": 8, "d_z": 2, "hidden_widths": [6], "epochs": 10, "batch_size": 4},
        "plan": {"anchor_fraction": 0.2},
        "completion": {"k_neighbors": 3, "opt_steps": 5, "gp_max_pairs": 64},
        "eval": {"alpha": 0.8, "n_probes": 8},
        "seed": 19,
        "output_dir": out_dir.to_str().unwrap()
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

/// The same run description expressed as library types, for tests that
/// replay the binary's work in-process.
fn tiny_synthetic() -> SyntheticConfig {
    SyntheticConfig {
        n_realizations: 3,
        grid_side: 4,
        n_timesteps: 8,
        seed: 19,
        spatial_corr_len: 1.0,
        ..SyntheticConfig::default()
    }
}

fn tiny_cvae() -> CvaeConfig {
    CvaeConfig {
        t_len: 8,
        d_z: 2,
        hidden_widths: vec![6],
        epochs: 10,
        batch_size: 4,
        ..CvaeConfig::default()
    }
}

fn tiny_settings() -> PipelineSettings {
    PipelineSettings {
        cvae: tiny_cvae(),
        plan: LcTrainPlan { anchor_fraction: 0.2, ..LcTrainPlan::default() },
        completion: CompletionConfig {
            k_neighbors: 3,
            opt_steps: 5,
            gp_max_pairs: 64,
            ..CompletionConfig::default()
        },
        n_probes: 8,
        emit_noise: false,
    }
}

#[test]
fn gen_data_writes_deterministic_datasets() {
    let dir = TempDir::new().unwrap();
    let out1 = dir.path().join("out1");
    let cfg = write_config(dir.path(), &base_config(&out1));
    let cfg_s = cfg.to_str().unwrap();

    let doc = run_ok(&["gen-data", "--config", cfg_s]);
    assert_eq!(doc["n_realizations"], 3);
    assert_eq!(doc["n_locations"], 16);
    assert_eq!(doc["n_timesteps"], 8);
    assert_eq!(doc["start_year"], 1979);
    let sha = doc["file_sha256"].as_str().unwrap().to_string();
    assert_eq!(sha.len(), 64);
    assert!(out1.join("data.ensb").exists());
    assert!(out1.join("gen-data_manifest.json").exists());

    // Same generator config into a different directory: identical bytes.
    let out2 = dir.path().join("out2");
    let set = format!("output_dir={}", out2.to_str().unwrap());
    let doc2 = run_ok(&["gen-data", "--config", cfg_s, "--set", &set]);
    assert_eq!(doc2["file_sha256"].as_str().unwrap(), sha);
    // The run is stamped by its config, which differs here (output_dir).
    assert_ne!(doc["config_hash"], doc2["config_hash"]);

    // A single-member ensemble is a valid dataset.
    let out3 = dir.path().join("out3");
    let set_dir = format!("output_dir={}", out3.to_str().unwrap());
    let doc3 = run_ok(&[
        "gen-data",
        "--config",
        cfg_s,
        "--set",
        &set_dir,
        "--set",
        "data.synthetic.n_realizations=1",
    ]);
    assert_eq!(doc3["n_realizations"], 1);

    // The dataset file must stay inside the output directory.
    let (code, err) = run_err(&["gen-data", "--config", cfg_s, "--out", "../escape.ensb"]);
    assert_eq!(code, 2, "stderr: {err}");
    let (code, err) = run_err(&["gen-data", "--config", cfg_s, "--out", "/tmp/abs.ensb"]);
    assert_eq!(code, 2, "stderr: {err}");
}

#[test]
fn dataset_cache_reuses_and_repairs_entries() {
    let dir = TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    let out1 = dir.path().join("out1");
    let cfg = write_config(dir.path(), &base_config(&out1));
    let cfg_s = cfg.to_str().unwrap();

    let run_cached = |extra: &[&str]| {
        let mut cmd = bin();
        cmd.env(CACHE_DIR_ENV, &cache);
        cmd.args(["gen-data", "--config", cfg_s]);
        cmd.args(extra);
        let out = cmd.output().expect("binary runs");
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
        (doc, String::from_utf8_lossy(&out.stderr).into_owned())
    };

    let (doc1, _) = run_cached(&[]);
    let sha = doc1["file_sha256"].as_str().unwrap().to_string();
    let entries: Vec<_> = fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "one cache entry expected, got {entries:?}");
    let entry = entries[0].clone();
    let name = entry.file_name().unwrap().to_str().unwrap().to_string();
    assert!(
        name.starts_with("synthetic-") && name.ends_with(".ensb"),
        "unexpected cache entry name {name}"
    );

    // Second run loads from the cache and produces identical bytes.
    let out2 = dir.path().join("out2");
    let set2 = format!("output_dir={}", out2.to_str().unwrap());
    let (doc2, _) = run_cached(&["--set", &set2]);
    assert_eq!(doc2["file_sha256"].as_str().unwrap(), sha);

    // A corrupt cache entry is regenerated, not trusted.
    fs::write(&entry, b"garbage").unwrap();
    let out3 = dir.path().join("out3");
    let set3 = format!("output_dir={}", out3.to_str().unwrap());
    let (doc3, err3) = run_cached(&["--set", &set3]);
    assert_eq!(doc3["file_sha256"].as_str().unwrap(), sha);
    assert!(err3.contains("regenerated"), "stderr should warn about the bad entry: {err3}");
    // After the repair run the entry is a loadable dataset again.
    let doc = run_ok(&["inspect", "--data", entry.to_str().unwrap()]);
    assert_eq!(doc["kind"], "ensemble");
    assert_eq!(doc["n_realizations"], 3);
}

#[test]
fn training_with_zero_constraint_weight_matches_plain_fits() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &base_config(&out));
    let cfg_s = cfg.to_str().unwrap();

    let doc = run_ok(&["train", "--config", cfg_s, "--lambda", "0"]);
    assert!(out.join("anchor_set.json").exists());
    assert!(out.join("train_manifest.json").exists());

    // With the constraint weight at zero every member trains exactly
    // like an unconstrained fit; reproduce those fits directly with the
    // library and require byte-identical checkpoints.
    let raw = generate_synthetic(&tiny_synthetic()).unwrap();
    let (norm, _) = normalize(&raw, &[0, 1], NormMode::ZScore).unwrap();
    let base = CvaeConfig { seed: derive_stream(19, "train"), ..tiny_cvae() };
    let all: Vec<usize> = (0..16).collect();
    for r in [0usize, 1] {
        let cfg_r = config_for_realization(&base, r);
        let (xs, ys) = norm.training_pairs(r, &all).unwrap();
        let fit = train_cvae(&xs, &ys, &cfg_r, r).unwrap();
        let reference = dir.path().join(format!("ref_r{r}.lccv"));
        save_checkpoint(&fit.model, &reference).unwrap();
        assert_eq!(
            fs::read(&reference).unwrap(),
            fs::read(out.join(format!("model_r{r}.lccv"))).unwrap(),
            "checkpoint for realization {r} differs from a plain library fit"
        );
    }

    // Loss traces: one line per (realization, minibatch step) — 10
    // epochs of 16 samples in batches of 4 gives 40 steps — losses
    // finite and improving over the run.
    let traces = fs::read_to_string(out.join("loss_traces.csv")).unwrap();
    let mut per_r: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut lines = traces.lines();
    assert_eq!(lines.next().unwrap(), "realization,step,loss");
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "bad trace line: {line}");
        let r: usize = fields[0].parse().unwrap();
        let loss: f64 = fields[2].parse().unwrap();
        assert!(loss.is_finite(), "non-finite loss in {line}");
        per_r.entry(r).or_default().push(loss);
    }
    assert_eq!(per_r.len(), 2);
    for (r, trace) in &per_r {
        assert_eq!(trace.len(), 40, "realization {r} should log every step");
        // Minibatch losses are noisy; compare the average of the first
        // ten steps against the last ten.
        let head: f64 = trace[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = trace[30..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "training loss for realization {r} did not improve: head {head}, tail {tail}"
        );
        let reported = doc["final_losses"][r.to_string()].as_f64().unwrap();
        assert_eq!(reported, *trace.last().unwrap());
    }

    // The worker count changes scheduling only, never the numbers.
    let out2 = dir.path().join("out2");
    let set = format!("output_dir={}", out2.to_str().unwrap());
    run_ok(&["train", "--config", cfg_s, "--lambda", "0", "--workers", "2", "--set", &set]);
    for r in [0usize, 1] {
        let name = format!("model_r{r}.lccv");
        assert_eq!(
            fs::read(out.join(&name)).unwrap(),
            fs::read(out2.join(&name)).unwrap(),
            "worker count changed checkpoint bytes for realization {r}"
        );
    }
}

#[test]
fn completion_artifacts_round_trip_and_match_library_pipeline() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &base_config(&out));
    let cfg_s = cfg.to_str().unwrap();

    run_ok(&["train", "--config", cfg_s]);
    let doc = run_ok(&["complete", "--config", cfg_s, "--alpha", "1.0"]);
    assert_eq!(doc["held_out"], 2);
    assert_eq!(doc["observed_locations"], 16);
    assert_eq!(doc["hidden_locations"], 0);

    // Replay the same run entirely in-process. The checkpoint round
    // trip and the split into train + complete must not change a bit.
    let raw = generate_synthetic(&tiny_synthetic()).unwrap();
    let cell = CellConfig {
        train_realizations: vec![0, 1],
        held_out: 2,
        alpha: 1.0,
        policy: OrderingPolicy::SeededRandom,
        seed: 19,
        config_hash: "in-process".into(),
    };
    let expected = run_pipeline(&raw, &cell, &tiny_settings()).unwrap();

    // generated.csv: realization column fixed at 0, values exact.
    let text = fs::read_to_string(out.join("generated.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "realization,lat,lon,month_index,value");
    let coord_ids: HashMap<(u64, u64), usize> = raw
        .coords()
        .iter()
        .enumerate()
        .map(|(l, &(lat, lon))| ((lat.to_bits(), lon.to_bits()), l))
        .collect();
    let mut n_rows = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], "0", "exported realization id should be 0: {line}");
        let lat: f64 = fields[1].parse().unwrap();
        let lon: f64 = fields[2].parse().unwrap();
        let t: usize = fields[3].parse().unwrap();
        let v: f64 = fields[4].parse().unwrap();
        let l = coord_ids[&(lat.to_bits(), lon.to_bits())];
        let want = expected.generated[&l][t];
        assert_eq!(v.to_bits(), want.to_bits(), "value mismatch at location {l}, step {t}");
        n_rows += 1;
    }
    assert_eq!(n_rows, 16 * 8, "one row per location and month");

    // Latent field: full coverage means encoder posteriors everywhere,
    // with zero completion variance, and the CSV round-trips exactly.
    let field = LatentField::load_csv(&out.join("latent_field.csv")).unwrap();
    assert_eq!(field.d_z, 2);
    assert_eq!(field.len(), 16);
    for (l, (mean, var)) in &field.entries {
        assert!(var.iter().all(|&v| v == 0.0), "location {l} should have zero variance");
        let (want_mean, _) = &expected.completed.field.entries[l];
        for (a, b) in mean.iter().zip(want_mean) {
            assert_eq!(a.to_bits(), b.to_bits(), "latent mean mismatch at location {l}");
        }
    }

    // Report and manifest agree on the stamped config hash.
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out.join("complete_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(report["config_hash"], manifest["config_hash"]);
    assert_eq!(report["config_hash"], doc["config_hash"]);
    assert_eq!(doc["mse_aggregate"].as_f64().unwrap(), report["mse"]["aggregate"].as_f64().unwrap());

    // Inspection summaries for every artifact kind.
    let ck = run_ok(&["inspect", "--checkpoint", out.join("model_r0.lccv").to_str().unwrap()]);
    assert_eq!(ck["kind"], "checkpoint");
    assert_eq!(ck["realization_id"], 0);
    assert_eq!(ck["audit_ok"], true);
    let rp = run_ok(&["inspect", "--report", out.join("report.json").to_str().unwrap()]);
    assert_eq!(rp["alpha"].as_f64().unwrap(), 1.0);
    assert_eq!(rp["held_out_realization"], 2);
    assert_eq!(rp["n_train_realizations"], 2);
    let lf = run_ok(&["inspect", "--latent-field", out.join("latent_field.csv").to_str().unwrap()]);
    assert_eq!(lf["n_locations"], 16);
    assert_eq!(lf["d_z"], 2);

    // The exported series re-import as a one-member dataset.
    let reimported = out.join("reimported.ensb");
    let ri = run_ok(&[
        "import-csv",
        "--input",
        out.join("generated.csv").to_str().unwrap(),
        "--out",
        reimported.to_str().unwrap(),
    ]);
    assert_eq!(ri["n_realizations"], 1);
    assert_eq!(ri["n_locations"], 16);
    assert_eq!(ri["n_timesteps"], 8);
}

#[test]
fn completion_fills_hidden_locations_from_checkpoints_dir() {
    let dir = TempDir::new().unwrap();
    let train_out = dir.path().join("trained");
    let cfg = write_config(dir.path(), &base_config(&train_out));
    let cfg_s = cfg.to_str().unwrap();
    run_ok(&["train", "--config", cfg_s]);

    // Complete into a different directory, reading the trained models
    // via --checkpoints.
    let eval_out = dir.path().join("eval");
    let set = format!("output_dir={}", eval_out.to_str().unwrap());
    let args = [
        "complete",
        "--config",
        cfg_s,
        "--alpha",
        "0.7",
        "--set",
        &set,
        "--checkpoints",
        train_out.to_str().unwrap(),
    ];
    let (out, err) = stderr_of(&args);
    assert!(out.status.success(), "stderr: {err}");
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["observed_locations"], 12);
    assert_eq!(doc["hidden_locations"], 4);
    let mse = doc["mse_aggregate"].as_f64().unwrap();
    assert!(mse.is_finite() && mse > 0.0, "aggregate error should be a positive number: {mse}");
    assert!(err.contains("phase=complete"), "progress lines expected on stderr: {err}");
    assert!(err.contains("phase=train_held_out"), "held-out fit should be traced: {err}");
    assert!(eval_out.join("report.json").exists());
    assert!(eval_out.join("latent_field.csv").exists());
    // A latent field over all 16 locations even though only 12 were seen.
    let field = LatentField::load_csv(&eval_out.join("latent_field.csv")).unwrap();
    assert_eq!(field.len(), 16);
}

#[test]
fn completion_rejects_too_few_observed_locations() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &base_config(&out));
    let cfg_s = cfg.to_str().unwrap();
    run_ok(&["train", "--config", cfg_s]);

    // ceil(0.18 * 16) = 3 observed locations cannot even hold the 4
    // anchors that must stay observed.
    let (code, err) = run_err(&["complete", "--config", cfg_s, "--alpha", "0.18"]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("anchors cannot fit"), "error should blame the anchor budget: {err}");

    // With the coverage budget at 4 the anchors fit, but 4 observed
    // locations cannot provide k = 8 distinct neighbors.
    let (code, err) = run_err(&[
        "complete",
        "--config",
        cfg_s,
        "--alpha",
        "0.25",
        "--set",
        "completion.k_neighbors=8",
    ]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("k=8"), "error should name the neighbor count: {err}");
}

#[test]
fn completion_requires_existing_matching_checkpoints() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &base_config(&out));
    let cfg_s = cfg.to_str().unwrap();

    // Nothing trained yet.
    let (code, err) = run_err(&["complete", "--config", cfg_s]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("run train first"), "stderr: {err}");

    // Train, then ask for a completion under a different model shape:
    // the checkpoint audit must refuse to mix them.
    run_ok(&["train", "--config", cfg_s]);
    let (code, err) =
        run_err(&["complete", "--config", cfg_s, "--set", "cvae.epochs=4"]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("different configuration"), "stderr: {err}");
}

#[test]
fn ablation_summary_is_deterministic_and_worker_invariant() {
    let dir = TempDir::new().unwrap();
    let out1 = dir.path().join("out1");
    let mut cfg = base_config(&out1);
    cfg["ablation"] = json!({"r_train_values": [1, 2], "alphas": [0.7], "seeds": [11]});
    let cfg_path = write_config(dir.path(), &cfg);
    let cfg_s = cfg_path.to_str().unwrap();

    let doc = run_ok(&["ablate", "--config", cfg_s]);
    assert_eq!(doc["cells"], 2);
    assert_eq!(doc["failed_cells"], 0);
    assert!(doc["knee"].as_array().map_or(false, |a| !a.is_empty()));

    let summary = fs::read_to_string(out1.join("ablation_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "r_train,alpha,policy,seed,mse,frag_score,mean_nbr_dist,runtime_s");
    assert!(lines[1].starts_with("1,0.7,seeded_random,11,"), "got: {}", lines[1]);
    assert!(lines[2].starts_with("2,0.7,seeded_random,11,"), "got: {}", lines[2]);

    // Wall-clock times legitimately differ between runs; everything
    // before that last column must not.
    fn mask_runtime(csv: &str) -> Vec<String> {
        csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
    }

    let out2 = dir.path().join("out2");
    let set2 = format!("output_dir={}", out2.to_str().unwrap());
    run_ok(&["ablate", "--config", cfg_s, "--set", &set2]);
    let rerun = fs::read_to_string(out2.join("ablation_summary.csv")).unwrap();
    assert_eq!(mask_runtime(&summary), mask_runtime(&rerun), "rerun changed the summary");

    let out3 = dir.path().join("out3");
    let set3 = format!("output_dir={}", out3.to_str().unwrap());
    run_ok(&["ablate", "--config", cfg_s, "--set", &set3, "--workers", "2"]);
    let threaded = fs::read_to_string(out3.join("ablation_summary.csv")).unwrap();
    assert_eq!(mask_runtime(&summary), mask_runtime(&threaded), "workers changed the summary");
}

#[test]
fn import_csv_round_trips_flat_files() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("tiny.csv");
    fs::write(
        &input,
        "realization,lat,lon,month_index,value\n\
         0,10.0,20.0,0,1.5\n\
         0,10.0,20.0,1,2.5\n\
         0,30.0,40.0,0,3.5\n\
         0,30.0,40.0,1,4.5\n",
    )
    .unwrap();
    let out = dir.path().join("converted/tiny.ensb");
    let doc = run_ok(&[
        "import-csv",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--start-year",
        "2001",
    ]);
    assert_eq!(doc["n_realizations"], 1);
    assert_eq!(doc["n_locations"], 2);
    assert_eq!(doc["n_timesteps"], 2);
    assert_eq!(doc["start_year"], 2001);
    let inspected = run_ok(&["inspect", "--data", out.to_str().unwrap()]);
    assert_eq!(inspected["kind"], "ensemble");
    assert_eq!(inspected["n_locations"], 2);

    // Wrong column names are a data error.
    let bad_header = dir.path().join("bad_header.csv");
    fs::write(&bad_header, "realization,lat,lon,month,value\n0,1.0,2.0,0,1.0\n").unwrap();
    let (code, err) = run_err(&[
        "import-csv",
        "--input",
        bad_header.to_str().unwrap(),
        "--out",
        dir.path().join("x.ensb").to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "stderr: {err}");
    assert!(err.contains("header"), "stderr: {err}");

    // A hole in the grid is a data error that names the missing cell.
    let sparse = dir.path().join("sparse.csv");
    fs::write(
        &sparse,
        "realization,lat,lon,month_index,value\n\
         0,10.0,20.0,0,1.5\n\
         0,10.0,20.0,1,2.5\n\
         0,30.0,40.0,0,3.5\n",
    )
    .unwrap();
    let (code, err) = run_err(&[
        "import-csv",
        "--input",
        sparse.to_str().unwrap(),
        "--out",
        dir.path().join("y.ensb").to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "stderr: {err}");
    assert!(err.contains("missing cell"), "stderr: {err}");
}

#[test]
fn usage_and_data_errors_use_distinct_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");

    // Missing config file.
    let (code, err) = run_err(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("not found"), "stderr: {err}");

    // Unknown key in the config document.
    let mut cfg = base_config(&out);
    cfg["cvaeX"] = json!({});
    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
    let (code, err) = run_err(&["train", "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("cvaeX"), "the bad key should be named: {err}");

    // Malformed and mistyped --set overrides.
    let good_cfg = write_config(dir.path(), &base_config(&out));
    let good = good_cfg.to_str().unwrap();
    let (code, err) = run_err(&["train", "--config", good, "--set", "cvae.epochs"]);
    assert_eq!(code, 2, "stderr: {err}");
    let (code, err) = run_err(&["train", "--config", good, "--set", "cvae.epocs=5"]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("epocs"), "the typo should be named: {err}");

    // A configured dataset file that does not exist is a usage error;
    // one that exists but cannot be parsed is a data error.
    let mut cfg = base_config(&out);
    cfg["data"] = json!({"ensb": {"path": dir.path().join("missing.ensb").to_str().unwrap()}});
    let missing_cfg = dir.path().join("missing_data.json");
    fs::write(&missing_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
    let (code, err) = run_err(&["train", "--config", missing_cfg.to_str().unwrap()]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("missing.ensb"), "stderr: {err}");

    let corrupt = dir.path().join("corrupt.ensb");
    fs::write(&corrupt, b"not a dataset").unwrap();
    let mut cfg = base_config(&out);
    cfg["data"] = json!({"ensb": {"path": corrupt.to_str().unwrap()}});
    let corrupt_cfg = dir.path().join("corrupt_data.json");
    fs::write(&corrupt_cfg, serde_json::to_string(&cfg).unwrap()).unwrap();
    let (code, err) = run_err(&["train", "--config", corrupt_cfg.to_str().unwrap()]);
    assert_eq!(code, 3, "stderr: {err}");

    // Inspect wants exactly one artifact.
    let (code, err) = run_err(&["inspect"]);
    assert_eq!(code, 2, "stderr: {err}");
    let (code, err) = run_err(&[
        "inspect",
        "--data",
        "a.ensb",
        "--report",
        "b.json",
    ]);
    assert_eq!(code, 2, "stderr: {err}");

    // Inspecting a corrupt artifact is a data error.
    let (code, err) = run_err(&["inspect", "--data", corrupt.to_str().unwrap()]);
    assert_eq!(code, 3, "stderr: {err}");

    // Zero workers is a usage error before any work happens.
    let (code, err) = run_err(&["train", "--config", good, "--workers", "0"]);
    assert_eq!(code, 2, "stderr: {err}");
}
