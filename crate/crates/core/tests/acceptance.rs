//! Acceptance suite: one PASS/FAIL line per criterion.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poseidon::bench::{Bench, Placement};
use poseidon::coordinator::{InformationBook, TrainConfig};
use poseidon::engine::data::make_synthetic_dataset;
use poseidon::engine::oracle::{train_oracle, OracleConfig, OracleUpdate};
use poseidon::engine::{backward, forward, Network};
use poseidon::kvstore::bsp_sim::{run_bsp_fuzz, BspFuzzConfig};
use poseidon::planner::{best_scheme, ps_cost, sfb_cost, NodeRole};
use poseidon::runtime::{train_local, RunOptions};
use poseidon::sfb::reconstruct;
use poseidon::syncer::timeline::{LayerCompute, Timeline};
use poseidon::syncer::SyncMode;
use poseidon::transport::sim::SimConfig;
use poseidon::{ClusterConfig, LayerSpec, ModelSpec, Scheme};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// `max |a - b| / max |b|`.
fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn flat64(p: &[Vec<f32>]) -> Vec<f64> {
    p.iter().flatten().map(|&x| x as f64).collect()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_cost_model() -> Outcome {
    let (m, n, k, p1, p2) = (4096u64, 4096, 32, 8, 8);
    let got = [
        ps_cost(m, n, p1, p2, NodeRole::WorkerOnly),
        ps_cost(m, n, p1, p2, NodeRole::ServerAndWorker),
        sfb_cost(m, n, k, p1),
    ];
    let formula = [2 * m * n, 2 * m * n * (p1 + p2 - 2) / p2, 2 * k * (p1 - 1) * (m + n)];
    let published = [33_554_432u64, 58_720_256, 3_670_016];
    check(
        got == published && formula == published,
        format!("got {got:?}, expected {published:?}"),
    )
}

fn c2_scheme_selection() -> Outcome {
    let vgg = ModelSpec::new(vec![LayerSpec::fully_connected(0, "fc", 4096, 4096)], 32).unwrap();
    let a = best_scheme(&vgg.layers[0], &vgg, &ClusterConfig::colocated(8, 8));
    let goog = ModelSpec::new(vec![LayerSpec::fully_connected(0, "fc", 1000, 1024)], 128).unwrap();
    let b = best_scheme(&goog.layers[0], &goog, &ClusterConfig::colocated(16, 16));
    check(
        a == Scheme::Sfb && b == Scheme::Ps,
        format!("4096x4096 K=32 P=8: {a:?}; 1024x1000 K=128 P=16: {b:?}"),
    )
}

fn c3_oracle_equivalence() -> Outcome {
    let model = ModelSpec::new(
        vec![
            LayerSpec::fully_connected(0, "fc1", 32, 16),
            LayerSpec::fully_connected(1, "fc2", 4, 32),
        ],
        8,
    )
    .unwrap();
    let net = Network::from_model(&model).unwrap();
    let modes = [
        SyncMode::Ps,
        SyncMode::Sfb,
        SyncMode::Hybrid,
        SyncMode::Adam,
        SyncMode::SequentialPs,
    ];
    let iterations = 50;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut runs = 0;
    for seed in 0..3u64 {
        for p1 in [1usize, 2, 4] {
            let cluster = ClusterConfig::colocated(p1, p1.min(2));
            let train = TrainConfig::new(
                SyncMode::Ps,
                0.1,
                seed,
                iterations,
                "synthetic:256:16:4".parse().unwrap(),
            );
            let data = make_synthetic_dataset(train.data_seed, 256, 16, 4);
            let cfg = OracleConfig {
                workers: p1,
                batch: model.batch_size,
                lr: train.lr,
                seed,
                iterations,
                update: OracleUpdate::Exact,
                record_history: true,
            };
            let oracle = train_oracle(&net, &data, &cfg).unwrap();
            for mode in modes {
                let book = InformationBook::build(
                    model.clone(),
                    cluster.clone(),
                    TrainConfig { mode, ..train.clone() },
                    None,
                )
                .unwrap();
                let opts = RunOptions {
                    record_history: true,
                    ..RunOptions::default()
                };
                let run = match train_local(&book, &opts) {
                    Ok(r) => r,
                    Err(e) => {
                        failures.push(format!("{mode} P1={p1} seed={seed}: {e}"));
                        continue;
                    }
                };
                runs += 1;
                for w in run.workers() {
                    for (t, (got, want)) in w.history.iter().zip(&oracle.history).enumerate() {
                        let (g, o) = (flat64(got), flat64(want));
                        let err = rel_inf(&g, &o);
                        worst = worst.max(err);
                        let bad = if p1 == 1 { got != want } else { err > 1e-5 };
                        if bad {
                            failures.push(format!(
                                "{mode} P1={p1} seed={seed} worker {} iter {t}: {err:.3e}",
                                w.worker
                            ));
                            break;
                        }
                    }
                    if w.history.len() != iterations {
                        failures.push(format!(
                            "{mode} P1={p1} seed={seed}: {} iterations recorded",
                            w.history.len()
                        ));
                    }
                }
            }
        }
    }
    let detail = format!("{runs} runs, worst relative error {worst:.2e}, P1=1 bitwise");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

/// Dense f64 backprop: per layer `sum_k (onehot - p)-style deltas times inputs`.
fn dense_gradients(dims: &[(usize, usize)], w: &[Vec<f64>], x: &[f64], y: &[usize]) -> Vec<Vec<f64>> {
    let k = y.len();
    let mut acts = vec![x.to_vec()];
    for (l, &(m, n)) in dims.iter().enumerate() {
        let a = &acts[l];
        let mut z = vec![0.0; k * m];
        for s in 0..k {
            for i in 0..m {
                z[s * m + i] = (0..n).map(|j| w[l][i * n + j] * a[s * n + j]).sum();
            }
        }
        if l + 1 < dims.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    let c = dims.last().unwrap().0;
    let mut delta = vec![0.0; k * c];
    for s in 0..k {
        let row = &acts[dims.len()][s * c..(s + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for i in 0..c {
            let p = (row[i] - max).exp() / sum;
            delta[s * c + i] = if i == y[s] { 1.0 - p } else { -p };
        }
    }
    let mut grads = vec![Vec::new(); dims.len()];
    for l in (0..dims.len()).rev() {
        let (m, n) = dims[l];
        let a = &acts[l];
        let mut g = vec![0.0; m * n];
        for s in 0..k {
            for i in 0..m {
                for j in 0..n {
                    g[i * n + j] += delta[s * m + i] * a[s * n + j];
                }
            }
        }
        grads[l] = g;
        if l > 0 {
            let mut below = vec![0.0; k * n];
            for s in 0..k {
                for j in 0..n {
                    let v: f64 = (0..m).map(|i| w[l][i * n + j] * delta[s * m + i]).sum();
                    below[s * n + j] = if a[s * n + j] > 0.0 { v } else { 0.0 };
                }
            }
            delta = below;
        }
    }
    grads
}

fn c4_sf_reconstruction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for cfg in 0..100 {
        let layers = rng.random_range(1..4);
        let mut widths = vec![rng.random_range(1..48)];
        for _ in 0..layers {
            widths.push(rng.random_range(2..48));
        }
        let dims: Vec<(usize, usize)> = (0..layers).map(|l| (widths[l + 1], widths[l])).collect();
        let k = rng.random_range(1..33);
        let net = Network::new(dims.clone()).unwrap();
        let w32: Vec<Vec<f32>> = net.init_weights(cfg);
        let x32: Vec<f32> = (0..k * widths[0]).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let y: Vec<usize> = (0..k).map(|_| rng.random_range(0..widths[layers])).collect();
        let w64: Vec<Vec<f64>> = w32.iter().map(|l| l.iter().map(|&v| v as f64).collect()).collect();
        let x64: Vec<f64> = x32.iter().map(|&v| v as f64).collect();
        let dense = dense_gradients(&dims, &w64, &x64, &y);
        let fwd = forward(&net, &w32, &x32, &y).unwrap();
        let mut err = None;
        backward(&net, &w32, &fwd, |g| {
            let rebuilt = reconstruct(&g.to_sf_batch(0, 0)).unwrap();
            let r: Vec<f64> = rebuilt.iter().map(|&v| v as f64).collect();
            let e = rel_inf(&r, &dense[g.layer]);
            if e > 1e-5 && err.is_none() {
                err = Some(format!("config {cfg} layer {}: {e:.3e}", g.layer));
            }
            worst = worst.max(e);
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(format!("100 configs, worst relative error {worst:.2e}"))
}

fn c5_finite_differences() -> Outcome {
    let net = Network::new(vec![(64, 784), (10, 64)]).unwrap();
    let mut w: Vec<Vec<f64>> = net.init_weights(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 8;
    let x: Vec<f64> = (0..k * 784).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<usize> = (0..k).map(|_| rng.random_range(0..10)).collect();
    let fwd = forward(&net, &w, &x, &y).unwrap();
    let mut analytic = vec![Vec::new(); 2];
    backward(&net, &w, &fwd, |g| analytic[g.layer] = g.grad);
    let h = 1e-3;
    let mut details = Vec::new();
    let mut ok = true;
    for l in 0..2 {
        let mut fd = Vec::new();
        let mut an = Vec::new();
        for _ in 0..20 {
            let i = rng.random_range(0..w[l].len());
            let orig = w[l][i];
            w[l][i] = orig + h;
            let up = forward(&net, &w, &x, &y).unwrap().loss;
            w[l][i] = orig - h;
            let down = forward(&net, &w, &x, &y).unwrap().loss;
            w[l][i] = orig;
            fd.push((up - down) / (2.0 * h));
            // The engine's gradient is the negated per-sample sum.
            an.push(-analytic[l][i] / k as f64);
        }
        let e = rel_inf(&fd, &an);
        ok &= e <= 1e-4;
        details.push(format!("layer {l}: {e:.2e}"));
    }
    check(ok, format!("784-64-10, 20 probes per layer, {}", details.join(", ")))
}

fn c6_wfbp_overlap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut strict = 0;
    let mut failures = Vec::new();
    for cfg in 0..50 {
        let l = rng.random_range(1..5);
        let mut dims = vec![rng.random_range(8..512)];
        for _ in 0..l {
            dims.push(rng.random_range(8..512));
        }
        let layers = (0..l)
            .map(|i| LayerSpec::fully_connected(i, format!("l{i}"), dims[i + 1], dims[i]))
            .collect();
        let model = ModelSpec::new(layers, rng.random_range(1..64)).unwrap();
        let p1 = [2, 4, 8][rng.random_range(0..3)];
        let cluster = ClusterConfig::colocated(p1, 1);
        let compute: Vec<LayerCompute> = (0..l)
            .map(|_| LayerCompute {
                forward: rng.random_range(1e-4..5e-3),
                backward: rng.random_range(1e-4..1e-2),
            })
            .collect();
        let sim = SimConfig::with_bandwidth(10f64.powf(rng.random_range(7.0..10.0)));
        let wfbp = Timeline::new(&model, &cluster, SyncMode::Ps, compute.clone())
            .run(sim, 1)
            .makespan;
        let seq = Timeline::new(&model, &cluster, SyncMode::SequentialPs, compute)
            .run(sim, 1)
            .makespan;
        let eps = 1e-9 * seq;
        if wfbp > seq + eps {
            failures.push(format!("config {cfg}: wfbp {wfbp} > sequential {seq}"));
        } else if l >= 2 {
            if wfbp < seq - eps {
                strict += 1;
            } else {
                failures.push(format!("config {cfg}: L={l} but wfbp {wfbp} == sequential {seq}"));
            }
        }
    }

    // Upper layers small and cheap to sync, bottom layer compute-heavy.
    let model = ModelSpec::new(
        vec![
            LayerSpec::fully_connected(0, "bottom", 256, 512),
            LayerSpec::fully_connected(1, "mid", 128, 256),
            LayerSpec::fully_connected(2, "top", 10, 128),
        ],
        32,
    )
    .unwrap();
    let cluster = ClusterConfig::colocated(4, 1);
    let compute = vec![
        LayerCompute {
            forward: 0.02,
            backward: 0.05,
        },
        LayerCompute {
            forward: 0.002,
            backward: 0.004,
        },
        LayerCompute {
            forward: 0.001,
            backward: 0.002,
        },
    ];
    let sim = SimConfig::with_bandwidth(1e9);
    let tl = Timeline::new(&model, &cluster, SyncMode::Ps, compute);
    let upper: f64 = (1..3).map(|l| tl.isolated_sync_time(l, sim)).sum();
    let bound = tl.compute_per_iteration() + tl.isolated_sync_time(0, sim);
    let makespan = tl.run(sim, 1).makespan;
    let heavy_ok = upper <= 0.05 && makespan <= bound * (1.0 + 1e-9);
    if !heavy_ok {
        failures.push(format!(
            "fc-heavy: makespan {makespan} vs bound {bound}, upper comm {upper}"
        ));
    }
    let detail = format!("50 single-shard configs, {strict} strict; fc-heavy makespan {makespan:.6} <= {bound:.6}");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

/// Same family with the servers sharded over every node. Printed only.
fn c6_sharded_note() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut less, mut equal, mut more) = (0, 0, 0);
    for _ in 0..50 {
        let l = rng.random_range(1..5);
        let mut dims = vec![rng.random_range(8..512)];
        for _ in 0..l {
            dims.push(rng.random_range(8..512));
        }
        let layers = (0..l)
            .map(|i| LayerSpec::fully_connected(i, format!("l{i}"), dims[i + 1], dims[i]))
            .collect();
        let model = ModelSpec::new(layers, rng.random_range(1..64)).unwrap();
        let p1 = [2, 4, 8][rng.random_range(0..3)];
        let cluster = ClusterConfig::colocated(p1, p1);
        let compute: Vec<LayerCompute> = (0..l)
            .map(|_| LayerCompute {
                forward: rng.random_range(1e-4..5e-3),
                backward: rng.random_range(1e-4..1e-2),
            })
            .collect();
        let sim = SimConfig::with_bandwidth(10f64.powf(rng.random_range(7.0..10.0)));
        let wfbp = Timeline::new(&model, &cluster, SyncMode::Ps, compute.clone())
            .run(sim, 1)
            .makespan;
        let seq = Timeline::new(&model, &cluster, SyncMode::SequentialPs, compute)
            .run(sim, 1)
            .makespan;
        let eps = 1e-9 * seq;
        if wfbp < seq - eps {
            less += 1;
        } else if wfbp > seq + eps {
            more += 1;
        } else {
            equal += 1;
        }
    }
    format!("with P2=P1 shards: wfbp faster {less}, equal {equal}, slower {more}")
}

fn c7_load_balance() -> Outcome {
    let bench = Bench::load(configs().join("scenarios/loadbal-fc4096.json")).map_err(|e| e.to_string())?;
    let s = &bench.scenario;
    if s.cluster_sizes[0] != 8 || s.servers != Some(8) || bench.model.batch_size != 32 {
        return Err("scenario is not P1=P2=8, K=32".into());
    }
    let runs = poseidon::bench::run_load_balance(&bench);
    let get = |m: SyncMode| runs.iter().find(|r| r.mode == m).ok_or(format!("{m} missing"));

    let ps = get(SyncMode::Ps)?;
    let sb = &ps.report.server_bytes;
    let spread = sb.iter().max().unwrap() - sb.iter().min().unwrap();
    let a = spread <= ps.chunk_traffic;

    let adam = get(SyncMode::Adam)?;
    let t = &adam.report.traffic;
    let mut totals: Vec<u64> = (0..adam.report.layout.num_nodes()).map(|n| t.total(n)).collect();
    let egress = adam
        .report
        .layout
        .server_nodes
        .iter()
        .map(|&n| t.bytes_out[n])
        .max()
        .unwrap();
    totals.sort_unstable();
    let mid = totals.len() / 2;
    let median = if totals.len().is_multiple_of(2) {
        (totals[mid - 1] + totals[mid]) as f64 / 2.0
    } else {
        totals[mid] as f64
    };
    let b = egress as f64 >= 2.0 * median;

    let hy = get(SyncMode::Hybrid)?;
    let wb = &hy.report.worker_bytes;
    let (lo, hi) = (*wb.iter().min().unwrap() as f64, *wb.iter().max().unwrap() as f64);
    let c = hi <= lo * 1.01;

    check(
        a && b && c,
        format!(
            "(a) server spread {spread} <= one chunk {}: {a}; (b) adam egress {egress} vs median {median}: {:.2}x; (c) hybrid workers {lo}..{hi}: {c}",
            ps.chunk_traffic,
            egress as f64 / median
        ),
    )
}

fn c8_bandwidth_ordering() -> Outcome {
    let mut bench = Bench::load(configs().join("scenarios/scaling-vgg19.json")).map_err(|e| e.to_string())?;
    let lowest = bench
        .scenario
        .bandwidths_mbps
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let s = &mut bench.scenario;
    s.cluster_sizes = vec![1, 16];
    s.bandwidths_mbps = vec![Some(lowest), None];
    s.modes = vec![SyncMode::Hybrid, SyncMode::Ps, SyncMode::SequentialPs];
    let k = bench.model.batch_size;
    let ips = |mode, bw| bench.replay(mode, 16, Placement::Colocated, bw).samples_per_sec(16, k);
    let (h, p, q) = (
        ips(SyncMode::Hybrid, Some(lowest)),
        ips(SyncMode::Ps, Some(lowest)),
        ips(SyncMode::SequentialPs, Some(lowest)),
    );
    let ordered = h > p && p > q;
    let mut linear = true;
    let mut speedups = Vec::new();
    for mode in [SyncMode::Hybrid, SyncMode::Ps, SyncMode::SequentialPs] {
        let one = bench.replay(mode, 1, Placement::Colocated, None).samples_per_sec(1, k);
        let sp = ips(mode, None) / one;
        linear &= (sp - 16.0).abs() <= 0.05 * 16.0;
        speedups.push(format!("{mode} {sp:.3}"));
    }
    check(
        ordered && linear,
        format!(
            "at {lowest} Mbit/s P1=16: hybrid {h:.1} > ps {p:.1} > sequential-ps {q:.1}: {ordered}; unlimited speedups {}",
            speedups.join(", ")
        ),
    )
}

fn c9_one_bit() -> Outcome {
    let data = make_synthetic_dataset(11, 800, 16, 4);
    let net = Network::new(vec![(32, 16), (4, 32)]).unwrap();
    let (budget, window, target) = (600, 10, 0.1f32);
    let reach = |losses: &[f32]| {
        (window..=losses.len())
            .find(|&i| losses[i - window..i].iter().sum::<f32>() / window as f32 <= target)
            .unwrap_or(budget + 1)
    };
    let mut slower_or_equal = 0;
    let mut violations = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let cfg = |update| OracleConfig {
            workers: 4,
            batch: 8,
            lr: 0.1,
            seed,
            iterations: budget,
            update,
            record_history: false,
        };
        let exact = train_oracle(&net, &data, &cfg(OracleUpdate::Exact)).map_err(|e| e.to_string())?;
        let onebit = train_oracle(&net, &data, &cfg(OracleUpdate::OneBit)).map_err(|e| e.to_string())?;
        let (e, o) = (reach(&exact.losses), reach(&onebit.losses));
        if o >= e {
            slower_or_equal += 1;
        }
        violations += onebit.telescoping_violations;
        pairs.push(format!("{e}/{o}"));
    }
    check(
        slower_or_equal >= 4 && violations == 0,
        format!(
            "iterations to loss {target} (exact/1-bit): {}; {slower_or_equal}/5 seeds 1-bit >= exact; identity violations {violations}",
            pairs.join(" ")
        ),
    )
}

fn c10_bsp_fuzz() -> Outcome {
    let mut reference: Option<Vec<f32>> = None;
    let mut worst: f64 = 0.0;
    for trial in 0..200u64 {
        let report = run_bsp_fuzz(&BspFuzzConfig {
            order_seed: trial,
            ..BspFuzzConfig::default()
        });
        if !report.is_clean() {
            return Err(format!(
                "trial {trial}: premature {}, mismatches {}, duplicates {}/{} rejected, errors {:?}",
                report.premature_broadcasts,
                report.value_mismatches,
                report.duplicates_rejected,
                report.duplicates_sent,
                report.errors
            ));
        }
        match &reference {
            None => reference = Some(report.final_params),
            Some(r) => {
                let a: Vec<f64> = report.final_params.iter().map(|&v| v as f64).collect();
                let b: Vec<f64> = r.iter().map(|&v| v as f64).collect();
                worst = worst.max(rel_inf(&a, &b));
            }
        }
    }
    check(
        worst <= 1e-6,
        format!("200 trials clean, worst final-parameter difference {worst:.2e}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("cost model", c1_cost_model),
        ("scheme selection", c2_scheme_selection),
        ("distributed equals oracle", c3_oracle_equivalence),
        ("sf reconstruction", c4_sf_reconstruction),
        ("gradient check", c5_finite_differences),
        ("wfbp overlap", c6_wfbp_overlap),
        ("load balance", c7_load_balance),
        ("bandwidth ordering", c8_bandwidth_ordering),
        ("1-bit baseline", c9_one_bit),
        ("bsp safety", c10_bsp_fuzz),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS criterion {} ({name}) [{secs:.2}s]: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {} ({name}) [{secs:.2}s]: {d}", i + 1);
            }
        }
        if i == 5 {
            println!("     note: {}", c6_sharded_note());
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
