//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Needs the MNIST and FashionMNIST IDX files under `data/` (or
//! `MORPHSCOPE_DATA_DIR`) and the committed checkpoints under `fixtures/`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;
use serde_json::{json, Value};
use tower::ServiceExt;

use morphscope_core::checkpoint::{train_classifier, train_vae, VaeCheckpoint};
use morphscope_core::classifier::ClassifierTrainConfig;
use morphscope_core::data::{make_dataset, DatasetName, Split};
use morphscope_core::latent::{kl_divergence, EncoderOutput, LatentVector};
use morphscope_core::neighborhood::{perturb_1d, perturb_grid, Exploration, LatentIndex, NeighborhoodSpec};
use morphscope_core::nn::{Parameters, Tensor};
use morphscope_core::vae::{Vae, VaeArch, VaeNet, VaeTrainConfig};
use morphscope_core::workbench::{vae_path, Workbench, WorkbenchConfig};
use morphscope_service::{router, AppState, ServiceConfig};

type Outcome = Result<String, String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_dir() -> PathBuf {
    std::env::var_os("MORPHSCOPE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data"))
}

fn checkpoint_dir() -> PathBuf {
    workspace().join("fixtures/checkpoints")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const ACCURACY: [(DatasetName, f64, f64); 2] = [(DatasetName::Mnist, 0.92, 0.85), (DatasetName::FashionMnist, 0.88, 0.78)];

/// Full training with default settings, plus the 10k-item, 3-epoch smoke run.
fn classifier_accuracy() -> Outcome {
    let mut report = Vec::new();
    let mut failures = Vec::new();
    for (name, full_min, smoke_min) in ACCURACY {
        let train = make_dataset(data_dir(), name, Split::Train).map_err(e2s)?;
        let test = make_dataset(data_dir(), name, Split::Test).map_err(e2s)?;
        let config = ClassifierTrainConfig::default();
        let full = train_classifier(&train, &test, &config, None).map_err(e2s)?.test_accuracy;
        let smoke_config = ClassifierTrainConfig { epochs: 3, ..config };
        let smoke = train_classifier(&train.head(10_000), &test, &smoke_config, None)
            .map_err(e2s)?
            .test_accuracy;
        report.push(format!("{name} full {full:.4} (>= {full_min}), smoke {smoke:.4} (>= {smoke_min})"));
        if full < full_min || smoke < smoke_min {
            failures.push(name.to_string());
        }
    }
    let text = report.join("; ");
    if failures.is_empty() {
        Ok(text)
    } else {
        Err(text)
    }
}

/// 10k items, 5 epochs; reconstruction BCE on 100 held-out test images vs. the untrained model.
fn vae_sanity() -> Outcome {
    let mut report = Vec::new();
    let mut ok = true;
    for name in DatasetName::ALL {
        let train = make_dataset(data_dir(), name, Split::Train).map_err(e2s)?.head(10_000);
        let held_out = make_dataset(data_dir(), name, Split::Test).map_err(e2s)?.head(100);
        let config = VaeTrainConfig {
            epochs: 5,
            ..VaeTrainConfig::for_dataset(name)
        };
        let untrained = Vae::new(VaeArch::new(config.latent_dim), config.seed);
        let trained = train_vae(&train, &config).map_err(e2s)?;
        let before = untrained.mean_reconstruction_error(held_out.images());
        let after = trained.vae.mean_reconstruction_error(held_out.images());
        let ratio = after / before;
        ok &= ratio < 0.5;
        report.push(format!("{name} BCE {after:.1} vs untrained {before:.1} (ratio {ratio:.3} < 0.5)"));
    }
    let text = report.join("; ");
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

/// Central differences on 300 randomly sampled parameters of a small f64 VAE.
fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut vae = VaeNet::<f64>::new(
        VaeArch {
            latent_dim: 3,
            channels: [2, 3, 2],
        },
        11,
    );
    for t in vae.tensors_mut() {
        if t.shape.len() == 1 {
            *t = Tensor::uniform(&t.shape, 0.1, &mut rng);
        }
    }
    let n = 2;
    let x: Vec<f64> = (0..n * 784).map(|_| rng.random::<f64>()).collect();
    let eps: Vec<f64> = (0..n * 3).map(|_| rng.sample(StandardNormal)).collect();
    let mut grad = vae.zeros_like();
    vae.loss_and_grad(&x, &eps, n, 1.0, &mut grad);

    let sizes: Vec<usize> = vae.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-6;
    let samples = 300;
    let (mut within, mut nonzero) = (0, 0);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let analytic = grad.tensors()[ti].data[flat];
        let orig = vae.tensors_mut()[ti].data[flat];
        vae.tensors_mut()[ti].data[flat] = orig + h;
        let up = vae.loss(&x, &eps, n).total();
        vae.tensors_mut()[ti].data[flat] = orig - h;
        let down = vae.loss(&x, &eps, n).total();
        vae.tensors_mut()[ti].data[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / scale;
        if scale > 1e-8 {
            nonzero += 1;
        }
        worst = worst.max(rel);
        if rel <= 1e-4 {
            within += 1;
        }
    }
    let frac = within as f64 / samples as f64;
    let text = format!(
        "{within}/{samples} sampled parameters within 1e-4 relative error ({nonzero} with non-zero gradient, worst {worst:.2e})"
    );
    if frac >= 0.95 {
        Ok(text)
    } else {
        Err(text)
    }
}

fn kl_properties() -> Outcome {
    let zero = EncoderOutput {
        mean: LatentVector::zeros(10),
        log_variance: LatentVector::zeros(10),
    };
    let at_zero = kl_divergence(&zero);
    ensure(at_zero.abs() <= 1e-9, || format!("KL(0, 0) = {at_zero}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut min = f64::INFINITY;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=32);
        let mut draw = |range: f64| LatentVector::new((0..d).map(|_| rng.random_range(-range..range)).collect()).unwrap();
        let enc = EncoderOutput {
            mean: draw(10.0),
            log_variance: draw(10.0),
        };
        let kl = kl_divergence(&enc);
        min = min.min(kl);
        ensure(kl >= 0.0, || format!("negative KL {kl} for {enc:?}"))?;
    }
    Ok(format!("KL(0,0) = {at_zero:e}; minimum over 10000 random inputs {min:.3e}"))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// Symmetry, center equality, scale equivariance and counts for 1000 random specs.
fn neighborhood_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..1000 {
        let d = if rng.random::<bool>() { 10 } else { 20 };
        let z = LatentVector::new((0..d).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let step = rng.random_range(0.01..5.0);
        let fail = |what: &str| format!("case {case}: {what} (d={d}, step={step})");
        if case % 2 == 0 {
            let dim = rng.random_range(0..d);
            let count = rng.random_range(1..=10);
            let path = perturb_1d(&z, dim, step, count).map_err(e2s)?;
            let doubled = perturb_1d(&z, dim, 2.0 * step, count).map_err(e2s)?;
            ensure(path.len() == 2 * count + 1, || fail("path length"))?;
            ensure(path[count] == z, || fail("center differs from z"))?;
            for k in 1..=count {
                for j in 0..d {
                    let (zj, plus, minus) = (z.values()[j], path[count + k].values()[j], path[count - k].values()[j]);
                    ensure(close(plus + minus, 2.0 * zj), || fail("asymmetric path"))?;
                    ensure(close(doubled[count + k].values()[j] - zj, 2.0 * (plus - zj)), || fail("not scale-equivariant"))?;
                }
            }
        } else {
            let a = rng.random_range(0..d);
            let b = (a + rng.random_range(1..d)) % d;
            let rows = 2 * rng.random_range(0..6) + 1;
            let cols = 2 * rng.random_range(0..6) + 1;
            let grid = perturb_grid(&z, a, b, step, rows, cols).map_err(e2s)?;
            let doubled = perturb_grid(&z, a, b, 2.0 * step, rows, cols).map_err(e2s)?;
            ensure(grid.len() == rows * cols, || fail("grid count"))?;
            let center = (rows / 2) * cols + cols / 2;
            ensure(grid[center] == z, || fail("center cell differs from z"))?;
            for (cell, (g, g2)) in grid.iter().zip(&doubled).enumerate() {
                let (r, c) = ((cell / cols) as f64 - (rows / 2) as f64, (cell % cols) as f64 - (cols / 2) as f64);
                for j in 0..d {
                    let zj = z.values()[j];
                    let expected = if j == a { zj + r * step } else if j == b { zj + c * step } else { zj };
                    ensure(close(g.values()[j], expected), || fail("grid offset"))?;
                    ensure(close(g2.values()[j] - zj, 2.0 * (g.values()[j] - zj)), || fail("grid not scale-equivariant"))?;
                }
            }
        }
    }
    Ok("1000 random path/grid specs".into())
}

/// Every member of the class, full L1 sum in axis order, strict improvement only.
fn exhaustive_nearest(latents: &[LatentVector], labels: &[u8], z: &LatentVector, class: usize) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in latents.iter().enumerate() {
        if labels[i] as usize != class {
            continue;
        }
        let mut dist = 0.0;
        for (a, b) in v.values().iter().zip(z.values()) {
            dist += (a - b).abs();
        }
        if best.is_none_or(|(_, d)| dist < d) {
            best = Some((i, dist));
        }
    }
    best
}

fn nearest_oracle() -> Outcome {
    let vae = VaeCheckpoint::load(vae_path(&checkpoint_dir(), DatasetName::Mnist)).map_err(e2s)?.vae;
    let split = make_dataset(data_dir(), DatasetName::Mnist, Split::Test).map_err(e2s)?;
    let latents: Vec<LatentVector> = vae.encode_batch(split.images()).into_iter().map(|e| e.mean).collect();
    let index = LatentIndex::from_latents(DatasetName::Mnist, Split::Test, split.labels(), latents.clone()).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut self_hits = 0;
    for q in 0..50 {
        let source = rng.random_range(0..split.len());
        let z = if q % 2 == 0 {
            latents[source].clone()
        } else {
            LatentVector::new(latents[source].values().iter().map(|v| v + rng.random_range(-0.5..0.5)).collect()).unwrap()
        };
        let class = rng.random_range(0..10);
        let got = index.nearest_in_class(&z, class).map_err(e2s)?;
        let (want, dist) = exhaustive_nearest(&latents, split.labels(), &z, class).ok_or("empty class")?;
        ensure(got.dataset_index == want && got.distance.to_bits() == dist.to_bits(), || {
            format!("query {q}: index {} d={} vs exhaustive {want} d={dist}", got.dataset_index, got.distance)
        })?;
        self_hits += usize::from(want == source);
    }
    Ok(format!("50/50 queries over {} items match ({self_hits} returned the query's own item)", split.len()))
}

#[derive(Deserialize)]
struct FixturePoi {
    dataset: DatasetName,
    dataset_index: usize,
    true_label: usize,
    predicted_label: usize,
}

fn fixtures() -> Result<Vec<FixturePoi>, String> {
    let path = workspace().join("fixtures/fixtures.json");
    let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(e2s)
}

/// Labels at the two ends of the morph path and the number of boundary edges on it.
fn morph_ends(bench: &Workbench, index: usize) -> Result<(usize, usize, usize, Vec<usize>), String> {
    let poi = bench.point_of_interest(index).map_err(e2s)?;
    let Exploration::Morph(path) = bench
        .explain(&poi, &NeighborhoodSpec::Morph { num_neighbors: 8 })
        .map_err(e2s)?
    else {
        return Err("morph spec did not produce a morph path".into());
    };
    let labels = path.waypoints.labels.clone();
    Ok((labels[0], *labels.last().unwrap(), path.waypoints.boundary_edges.len(), labels))
}

fn boundary_crossing() -> Outcome {
    let config = WorkbenchConfig::new(data_dir(), checkpoint_dir());
    let mut report = Vec::new();
    let mut ok = true;
    for fx in fixtures()? {
        let bench = Workbench::open(&config, fx.dataset).map_err(e2s)?;
        let names = fx.dataset.class_names();
        let poi = bench.point_of_interest(fx.dataset_index).map_err(e2s)?;
        ensure(
            (poi.true_label, poi.predicted_label) == (fx.true_label, fx.predicted_label),
            || format!("{} #{}: labels {}->{}, expected {}->{}", fx.dataset, fx.dataset_index, poi.true_label, poi.predicted_label, fx.true_label, fx.predicted_label),
        )?;
        let (first, last, edges, labels) = morph_ends(&bench, fx.dataset_index)?;
        let pass = first == fx.true_label && last == fx.predicted_label && edges >= 1;
        ok &= pass;

        // Same check over every test misprediction with this label pair, for context.
        let candidates: Vec<usize> = bench
            .mispredictions(usize::MAX)
            .into_iter()
            .filter(|m| (m.true_label, m.predicted_label) == (fx.true_label, fx.predicted_label))
            .map(|m| m.dataset_index)
            .collect();
        let mut crossing = 0;
        for &i in &candidates {
            let (f, l, e, _) = morph_ends(&bench, i)?;
            crossing += usize::from(f == fx.true_label && l == fx.predicted_label && e >= 1);
        }
        report.push(format!(
            "{} #{}: {} -> {} along {:?}, {edges} boundary edge(s) [{} of {} {}->{} test mispredictions cross]",
            fx.dataset,
            fx.dataset_index,
            names[first],
            names[last],
            labels,
            crossing,
            candidates.len(),
            names[fx.true_label],
            names[fx.predicted_label]
        ));
    }
    ensure(report.len() == 2, || format!("expected 2 fixtures, found {}", report.len()))?;
    let text = report.join("; ");
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

async fn call(state: &AppState, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(v) => builder.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let response = router(state.clone()).oneshot(request).await.unwrap();
    let status = response.status();
    (status, response.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_ok(state: &AppState, method: Method, uri: &str, body: Option<Value>) -> Result<Vec<u8>, String> {
    let (status, bytes) = call(state, method.clone(), uri, body).await;
    ensure(status.is_success(), || format!("{method} {uri}: {status} {}", String::from_utf8_lossy(&bytes)))?;
    Ok(bytes)
}

fn history_len(bytes: &[u8]) -> usize {
    serde_json::from_slice::<Value>(bytes).unwrap()["history"].as_array().unwrap().len()
}

async fn service_contract_async() -> Outcome {
    let state_dir = tempfile::tempdir().map_err(e2s)?;
    let config = ServiceConfig {
        workbench: WorkbenchConfig::new(data_dir(), checkpoint_dir()),
        state_dir: state_dir.path().to_path_buf(),
    };
    let fx = fixtures()?.into_iter().find(|f| f.dataset == DatasetName::Mnist).ok_or("no MNIST fixture")?;
    let specs = [
        json!({"kind": "path_1d", "dim": 3, "step_length": 1.0}),
        json!({"kind": "grid_2d", "dims": [0, 1], "step_length": 0.5}),
        json!({"kind": "grid_2d", "dims": [0, 1], "step_length": 2.0}),
        json!({"kind": "morph", "num_neighbors": 8}),
    ];

    let state = AppState::new(config.clone()).map_err(e2s)?;
    call_ok(&state, Method::GET, "/healthz", None).await?;
    call_ok(&state, Method::GET, "/datasets", None).await?;
    let created: Value = serde_json::from_slice(&call_ok(&state, Method::POST, "/sessions", Some(json!({"dataset": "mnist"}))).await?).unwrap();
    let id = created["id"].as_str().unwrap().to_string();
    let fashion: Value = serde_json::from_slice(&call_ok(&state, Method::POST, "/sessions", Some(json!({"dataset": "fashion_mnist"}))).await?).unwrap();
    let fid = fashion["id"].as_str().unwrap();
    let fpoi: Value = serde_json::from_slice(&call_ok(&state, Method::PUT, &format!("/sessions/{fid}/poi"), Some(json!({"dataset_index": 0}))).await?).unwrap();
    ensure(fpoi["latent"].as_array().unwrap().len() == 20, || "fashion session not bound to d=20".into())?;

    call_ok(&state, Method::GET, &format!("/sessions/{id}/mispredictions?limit=10"), None).await?;
    let poi: Value = serde_json::from_slice(
        &call_ok(&state, Method::PUT, &format!("/sessions/{id}/poi"), Some(json!({"dataset_index": fx.dataset_index}))).await?,
    )
    .unwrap();
    ensure(poi["true_label"] == 4 && poi["predicted_label"] == 9, || format!("poi labels {poi:?}"))?;

    let explain = format!("/sessions/{id}/explain");
    let session_uri = format!("/sessions/{id}");
    let mut payloads = Vec::new();
    let mut expected_len = 0;
    for spec in &specs {
        let a = call_ok(&state, Method::POST, &explain, Some(spec.clone())).await?;
        let b = call_ok(&state, Method::POST, &explain, Some(spec.clone())).await?;
        ensure(a == b, || format!("repeated explain {spec} differs"))?;
        expected_len += 2;
        let len = history_len(&call_ok(&state, Method::GET, &session_uri, None).await?);
        ensure(len == expected_len, || format!("history length {len}, expected {expected_len}"))?;
        payloads.push(a);
    }
    let morph: Value = serde_json::from_slice(payloads.last().unwrap()).unwrap();
    let labels = morph["neighborhood"]["labels"].as_array().unwrap();
    ensure(labels.len() == 17 && labels[0] == 4 && labels[16] == 9, || format!("morph labels {labels:?}"))?;
    drop(state);

    let restarted = AppState::new(config).map_err(e2s)?;
    let session: Value = serde_json::from_slice(&call_ok(&restarted, Method::GET, &session_uri, None).await?).unwrap();
    let kinds: Vec<&str> = session["history"].as_array().unwrap().iter().map(|h| h["spec"]["kind"].as_str().unwrap()).collect();
    ensure(kinds == ["path_1d", "path_1d", "grid_2d", "grid_2d", "grid_2d", "grid_2d", "morph", "morph"], || format!("history after restart {kinds:?}"))?;
    for (spec, before) in specs.iter().zip(&payloads) {
        let after = call_ok(&restarted, Method::POST, &explain, Some(spec.clone())).await?;
        ensure(&after == before, || format!("explain {spec} differs after restart"))?;
    }
    let len = history_len(&call_ok(&restarted, Method::GET, &session_uri, None).await?);
    ensure(len == 12, || format!("history length {len} after restart, expected 12"))?;
    Ok(format!(
        "4 specs repeated bit-identically ({} bytes total), history 8 -> restart -> 12, payloads identical across restart",
        payloads.iter().map(Vec::len).sum::<usize>()
    ))
}

fn service_contract() -> Outcome {
    tokio::runtime::Runtime::new().map_err(e2s)?.block_on(service_contract_async())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("classifier accuracy", classifier_accuracy),
        ("VAE sanity", vae_sanity),
        ("loss gradient check", gradient_check),
        ("KL properties", kl_properties),
        ("neighborhood identities", neighborhood_identities),
        ("nearest-in-class oracle", nearest_oracle),
        ("boundary crossing", boundary_crossing),
        ("service contract", service_contract),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
