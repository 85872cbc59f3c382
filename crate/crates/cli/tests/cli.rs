use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gmlp::checkpoint;
use gmlp::layers::SpatialMode;
use gmlp::models::{build_model, count_macs, count_params, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gmlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmlp"))
        .args(args)
        .env_remove("GMLP_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = gmlp(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", stderr(&o));
    stdout(&o)
}

/// `component -> (params, macs, flops)` from `analyze --format csv`.
fn analyze_csv(config: &str, seq_len: &str) -> Vec<(String, u64, u64, u64)> {
    ok(&["analyze", "--config", config, "--seq-len", seq_len, "--format", "csv"])
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_reports_published_sizes() {
    for (name, n, millions) in [
        ("gmlp-ti", "196", 5.9),
        ("gmlp-s", "196", 19.5),
        ("gmlp-b", "196", 73.4),
        ("gmlp-base", "512", 130.0),
        ("amlp-base", "512", 109.0),
        ("gmlp-large", "512", 365.0),
        ("amlp-large", "512", 316.0),
        ("gmlp-xlarge", "512", 941.0),
    ] {
        let rows = analyze_csv(name, n);
        let total = rows.last().unwrap();
        assert_eq!(total.0, "total");
        let rel = (total.1 as f64 - millions * 1e6).abs() / (millions * 1e6);
        assert!(rel <= 0.03, "{name}: {} params", total.1);
    }
}

#[test]
fn analyze_totals_are_the_models_counts_and_sum_of_lines() {
    let rows = analyze_csv("micro", "16");
    let (body, total) = rows.split_at(rows.len() - 1);
    let total = &total[0];
    let cfg = ModelConfig::micro();
    assert_eq!(total.1, count_params(&cfg).total);
    assert_eq!(total.2, count_macs(&cfg, 16).total);
    assert_eq!(total.1, body.iter().map(|r| r.1).sum::<u64>());
    assert_eq!(total.2, body.iter().map(|r| r.2).sum::<u64>());
    assert!(rows.iter().all(|r| r.3 == 2 * r.2));

    let table = ok(&["analyze", "--config", "micro"]);
    assert!(table.contains(&format!("{}", total.1)));
}

#[test]
fn analyze_seq_len_changes_spatial_cost() {
    let a = analyze_csv("micro", "16");
    let b = analyze_csv("micro", "32");
    let get = |rows: &[(String, u64, u64, u64)], c: &str| rows.iter().find(|r| r.0 == c).unwrap().clone();
    assert_eq!(get(&a, "block.sgu.spatial").1, 2 * (16 * 16 + 16));
    assert_eq!(get(&b, "block.sgu.spatial").1, 2 * (32 * 32 + 32));
    assert_eq!(get(&b, "block.sgu.spatial").2, 4 * get(&a, "block.sgu.spatial").2);
}

#[test]
fn analyze_accepts_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::micro();
    cfg.spatial_mode = SpatialMode::Toeplitz;
    let p = dir.path().join("c.json");
    fs::write(&p, cfg.to_json()).unwrap();
    let rows = analyze_csv(path(&p), "16");
    assert_eq!(rows.last().unwrap().1, count_params(&cfg).total);
    assert_eq!(rows.iter().find(|r| r.0 == "block.sgu.spatial").unwrap().1, 2 * (31 + 16));
}

#[test]
fn unknown_preset_lists_the_presets() {
    let o = gmlp(&["analyze", "--config", "gmlp-huge"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("gmlp-huge") && e.contains("gmlp-ti") && e.contains("amlp-large"), "{e}");
}

#[test]
fn gradcheck_exit_status_follows_the_suite() {
    let out = ok(&["gradcheck", "--scope", "op"]);
    assert!(out.contains("checks passed") && !out.contains("FAIL"));
    let out = ok(&["gradcheck", "--scope", "block", "--seed", "7"]);
    assert!(out.contains("gmlp_block_multiplicative_split") && out.contains("amlp_block"));

    let o = gmlp(&["gradcheck", "--scope", "block", "--corrupt-adjoint", "layer_norm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    let o = gmlp(&["gradcheck", "--corrupt-adjoint", "nonsense"]);
    assert!(!o.status.success());
}

#[test]
fn seed_flag_wins_over_environment() {
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_gmlp"));
        c.args(["gradcheck", "--scope", "op"]).env_remove("GMLP_SEED");
        if let Some(e) = env {
            c.env("GMLP_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        let o = c.output().unwrap();
        stdout(&o).lines().last().unwrap().to_string()
    };
    assert!(run(None, None).ends_with("seed 0)"));
    assert!(run(Some("4"), None).ends_with("seed 4)"));
    assert!(run(Some("4"), Some("9")).ends_with("seed 9)"));
}

fn train(dir: &Path, seed: &str, steps: &str) -> String {
    ok(&["train", "--steps", steps, "--seed", seed, "--out", path(dir)])
}

fn final_loss(out: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix("final eval loss: "))
        .unwrap()
        .to_string()
}

#[test]
fn train_is_deterministic_and_checkpoint_reloads_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let out_a = train(&a, "11", "150");
    let out_b = train(&b, "11", "150");
    train(&c, "12", "150");
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "metrics.csv"), read(&b, "metrics.csv"));
    assert_eq!(read(&a, "model.ckpt"), read(&b, "model.ckpt"));
    assert_ne!(read(&a, "metrics.csv"), read(&c, "metrics.csv"));
    assert_eq!(final_loss(&out_a), final_loss(&out_b));

    let metrics = String::from_utf8(read(&a, "metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,lr,train_loss,eval_loss,toeplitzness_mean\n"));
    assert_eq!(metrics.lines().count(), 151);

    let eval = ok(&["eval", "--checkpoint", path(&a.join("model.ckpt")), "--seed", "11"]);
    assert_eq!(eval.trim(), format!("eval loss: {}", final_loss(&out_a)));

    let cfg = ModelConfig::from_json(&String::from_utf8(read(&a, "config.json")).unwrap()).unwrap();
    assert_eq!(cfg, ModelConfig::micro());
}

#[test]
fn train_in_single_precision_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["train", "--steps", "30", "--dtype", "f32", "--seed", "2", "--out", path(tmp.path())]);
    let ck = checkpoint::decode(&fs::read(tmp.path().join("model.ckpt")).unwrap()).unwrap();
    assert!(ck.tensors.values().all(|t| t.dtype() == gmlp::DType::F32));
    let eval = ok(&["eval", "--checkpoint", path(&tmp.path().join("model.ckpt")), "--seed", "2"]);
    assert_eq!(eval.trim(), format!("eval loss: {}", final_loss(&out)));
}

#[test]
fn divergence_exits_nonzero_and_keeps_partial_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gmlp(&["train", "--steps", "20", "--lr", "1e300", "--out", path(tmp.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("diverged at step"), "{}", stderr(&o));
    let metrics = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,"));
    assert!(!tmp.path().join("model.ckpt").exists());
}

#[test]
fn train_rejects_vision_configs_and_bad_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!gmlp(&["train", "--config", "gmlp-ti", "--steps", "1", "--out", path(tmp.path())]).status.success());
    assert!(!gmlp(&["train", "--task", "copy_shift_0", "--steps", "1", "--out", path(tmp.path())]).status.success());
}

fn ablate_rows(out: &str) -> Vec<(String, f64)> {
    out.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn ablation_emits_one_row_per_variant_and_is_reproducible() {
    let args = ["ablate", "--steps", "300", "--seed", "1", "--format", "csv"];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let rows = ablate_rows(&a);
    let labels: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(
        labels,
        [
            "linear",
            "additive",
            "multiplicative",
            "multiplicative_split",
            "mixer_token_mlp",
            "multiplicative_split (frozen W)"
        ]
    );
    let bound = 16f64.ln();
    let control = rows.last().unwrap().1;
    assert!((control / bound - 1.0).abs() <= 0.03, "control {control}");
    assert!(rows[..5].iter().all(|r| r.1.is_finite() && r.1 < control));
}

#[test]
fn ablation_rejects_unknown_variants() {
    let o = gmlp(&["ablate", "--variants", "linear,cubic", "--steps", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cubic"));
}

fn write_run(dir: &Path, cfg: &ModelConfig, seed: u64) {
    let (store, _) = build_model::<f64, _>(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("model.ckpt"), checkpoint::encode(&store)).unwrap();
    fs::write(dir.join("config.json"), cfg.to_json()).unwrap();
}

fn read_matrix(p: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn dumped_toeplitz_rows_are_shifts_of_row_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::micro();
    cfg.spatial_mode = SpatialMode::Toeplitz;
    write_run(tmp.path(), &cfg, 4);
    let out = tmp.path().join("filters");
    ok(&["dump-filters", "--checkpoint", path(&tmp.path().join("model.ckpt")), "--out", path(&out)]);
    for b in 0..2 {
        let w = read_matrix(&out.join(format!("block{b}_W.csv")));
        assert_eq!(w.len(), 16);
        for k in 0..16 {
            for j in k..16 {
                assert_eq!(w[k][j].to_bits(), w[0][j - k].to_bits());
            }
        }
        let rows = fs::read_to_string(out.join(format!("block{b}_rows.csv"))).unwrap();
        assert!(rows.starts_with("token,row_0,row_8,row_15\n"));
        assert_eq!(rows.lines().count(), 17);
    }
}

#[test]
fn dumped_w_csv_reloads_within_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::micro();
    write_run(tmp.path(), &cfg, 8);
    let out = tmp.path().join("f");
    ok(&["dump-filters", "--checkpoint", path(&tmp.path().join("model.ckpt")), "--out", path(&out), "--rows", "3"]);
    let ck = checkpoint::decode(&fs::read(tmp.path().join("model.ckpt")).unwrap()).unwrap();
    let w = ck.tensors["blocks.1.sgu.spatial.weight"].to_dtype::<f64>();
    let back = read_matrix(&out.join("block1_W.csv"));
    for i in 0..16 {
        for j in 0..16 {
            assert!((back[i][j] - w.get2(i, j)).abs() <= 1e-6);
        }
    }
}

#[test]
fn pgm_images_have_patch_grid_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::micro();
    cfg.num_layers = 1;
    cfg.d_model = 4;
    cfg.d_ffn = 8;
    cfg.seq_len = 196;
    write_run(tmp.path(), &cfg, 1);
    let out = tmp.path().join("img");
    ok(&[
        "dump-filters",
        "--checkpoint",
        path(&tmp.path().join("model.ckpt")),
        "--out",
        path(&out),
        "--format",
        "pgm",
        "--rows",
        "0,97",
    ]);
    for r in [0, 97] {
        let img = fs::read(out.join(format!("block0_row{r}.pgm"))).unwrap();
        let header = b"P5\n14 14\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 196);
        assert!(img[header.len()..].contains(&0) && img[header.len()..].contains(&255));
    }

    // 16 tokens form a 4x4 grid; 10 do not
    cfg.seq_len = 10;
    write_run(tmp.path(), &cfg, 1);
    let o = gmlp(&["dump-filters", "--checkpoint", path(&tmp.path().join("model.ckpt")), "--out", path(&out), "--format", "pgm"]);
    assert!(!o.status.success());
}

#[test]
fn amlp_checkpoints_export_attention_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::micro();
    cfg.tiny_attn = Some(8);
    write_run(tmp.path(), &cfg, 2);
    let out = tmp.path().join("a");
    ok(&["dump-filters", "--checkpoint", path(&tmp.path().join("model.ckpt")), "--out", path(&out), "--format", "pgm", "--rows", "0"]);
    let m = read_matrix(&out.join("attention_max.csv"));
    assert_eq!((m.len(), m[0].len()), (16, 16));
    for row in &m {
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        // max over layers of stochastic rows sums to at least one
        assert!(row.iter().sum::<f64>() >= 1.0 - 1e-12);
    }
    let img = fs::read(out.join("attention_max.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n16 16\n255\n"));
}

#[test]
fn missing_spatial_tensor_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::micro();
    let (full, _) = build_model::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut store = gmlp::models::ParamStore::default();
    for (name, p) in full.iter().filter(|(n, _)| *n != "blocks.1.sgu.spatial.weight") {
        store.insert(name, p.clone()).unwrap();
    }
    fs::write(tmp.path().join("model.ckpt"), checkpoint::encode(&store)).unwrap();
    fs::write(tmp.path().join("config.json"), cfg.to_json()).unwrap();
    let o = gmlp(&["dump-filters", "--checkpoint", path(&tmp.path().join("model.ckpt")), "--out", path(&tmp.path().join("o"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("blocks.1.sgu.spatial.weight"), "{}", stderr(&o));

    let o = gmlp(&["dump-filters", "--checkpoint", path(&tmp.path().join("absent.ckpt")), "--config", "micro", "--out", "x"]);
    assert!(!o.status.success());
}

fn fit(text: &str) -> Output {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("points.csv");
    fs::write(&p, text).unwrap();
    gmlp(&["fit-scaling", "--points", path(&p), "--samples", "5"])
}

fn field(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn fit_scaling_recovers_exact_power_laws() {
    let mut text = String::from("params,metric\n");
    for x in [1e6, 3e6, 1e7, 5e7, 2e8] {
        text.push_str(&format!("{x},{}\n", 42.0 * f64::powf(x, -0.37)));
    }
    let o = fit(&text);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!((field(&out, "alpha") - 0.37).abs() <= 1e-9);
    assert!((field(&out, "a") - 42.0).abs() / 42.0 <= 1e-9);
    assert!(field(&out, "residual") < 1e-20);
    assert!(out.contains("x,y_fit"));
}

#[test]
fn fit_scaling_on_published_perplexities() {
    let o = fit("# params,perplexity\n59e6,5.25\n102e6,4.35\n187e6,3.79\n357e6,3.43\n");
    let out = stdout(&o);
    assert!((field(&out, "alpha") - 0.2339975930465543).abs() <= 1e-9);
    assert!((field(&out, "residual") - 0.003123563968598631).abs() <= 1e-9);
}

#[test]
fn fit_scaling_rejects_bad_input_with_line_numbers() {
    let o = fit("x,y\n1,2\n\n3,oops\n");
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
    let o = fit("1,2\n2,-1\n");
    assert!(stderr(&o).contains("line 2"));
    let o = fit("5,7\n");
    assert!(!o.status.success());
    assert!(stderr(&o).contains("two points"));
}
