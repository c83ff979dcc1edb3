//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! `cargo test -p tokenroute-core --test acceptance`

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tokenroute::bench::{sweep, OracleParams, OracleSlm, OracleTask, SweepConfig, SweepOutcome, DEFAULT_GRID};
use tokenroute::clock::{Clock, CostModel, ModeledClock, MonotonicClock};
use tokenroute::engine::{ByteTokenizer, ModelConfig, ModelWeights, TinyTransformer};
use tokenroute::orchestrator::{GenerateOptions, Orchestrator};
use tokenroute::router::RouterModel;
use tokenroute::server::{InProcessTransport, LlmBackend, ScriptedOracle, Server, ServingConfig, Timing};
use tokenroute::trainer::{self, shortcut_label, Dataset, PreferenceLabel, TrainConfig, TrainingExample};
use tokenroute::wire::{parse_request, parse_response, serialize_request, serialize_response, History, MetaData, RoutingRequest, SlmState};
use tokenroute::{GenerationConfig, HiddenState, KvPolicy, Mode, Route, TokenId};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const GOLDEN_FIGURE: &str = include_str!("golden/request_figure.json");
const GOLDEN_CANONICAL: &str = include_str!("golden/request_canonical.json");
const GOLDEN_RESPONSE: &str = include_str!("golden/response_cell.json");

fn wire_fidelity() -> Outcome {
    let req = parse_request(GOLDEN_FIGURE.as_bytes()).map_err(|e| e.to_string())?;
    ensure!(req.context == "The mitochondria is the powerhouse of the", "context {:?}", req.context);
    ensure!(req.current_token == "cell", "current_token {:?}", req.current_token);
    ensure!(req.token_index == 15, "token_index {}", req.token_index);
    ensure!(req.routing_threshold == 0.7, "routing_threshold {}", req.routing_threshold);
    let d = &req.history.previous_decisions;
    ensure!(
        d.len() == 2 && d[0].token == "mitochondria" && d[0].route == Route::Slm && d[1].token == "powerhouse" && d[1].route == Route::Llm,
        "history {d:?}"
    );
    ensure!(req.meta_data.session_id == "session123" && req.meta_data.request_id == "req456", "meta {:?}", req.meta_data);
    req.validate().map_err(|e| e.to_string())?;

    let canonical = serialize_request(&req).map_err(|e| e.to_string())?;
    ensure!(canonical == GOLDEN_CANONICAL.as_bytes(), "canonical bytes differ:\n{}", String::from_utf8_lossy(&canonical));
    let again = serialize_request(&parse_request(&canonical).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure!(again == canonical, "canonical form is not a fixed point");

    // The scripted large model answers this context with "cell".
    let server = Server::new(
        LlmBackend::ScriptedOracle(ScriptedOracle::new([(req.context.as_str(), "cell")])),
        ServingConfig { llm_burst: 4, timing: Timing::Modeled, ..ServingConfig::default() },
    )
    .map_err(|e| e.to_string())?;
    let reply = server.serve_bytes(&canonical).map_err(|e| e.to_string())?;
    ensure!(reply == GOLDEN_RESPONSE.as_bytes(), "response bytes differ:\n{}", String::from_utf8_lossy(&reply));
    let resp = parse_response(&reply).map_err(|e| e.to_string())?;
    ensure!(serialize_response(&resp).map_err(|e| e.to_string())? == reply, "response not canonical");
    let last = resp.updated_history.previous_decisions.last().unwrap();
    ensure!(last.token == "cell" && last.route == Route::Llm, "history gained {last:?}");
    Ok(format!("{} canonical bytes, fixed point, response history gains cell->LLM", canonical.len()))
}

fn shortcut_table() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut tally = [0usize; 3];
    for i in 0..1000 {
        let (s, l, t) = (rng.random_range(0..4u32), rng.random_range(0..4u32), rng.random_range(0..4u32));
        let got = shortcut_label(TokenId(s), TokenId(l), TokenId(t));
        // Recount: which models reproduced the reference token.
        let right: Vec<&str> = [("slm", s), ("llm", l)].iter().filter(|(_, p)| *p == t).map(|(n, _)| *n).collect();
        let want = match right.first() {
            Some(&"slm") => PreferenceLabel::PreferSlm,
            Some(_) => PreferenceLabel::PreferLlm,
            None => PreferenceLabel::NeedsRollout,
        };
        ensure!(got == want, "row {i}: ({s},{l},{t}) labelled {got:?}, expected {want:?}");
        tally[match want {
            PreferenceLabel::PreferSlm => 0,
            PreferenceLabel::PreferLlm => 1,
            PreferenceLabel::NeedsRollout => 2,
        }] += 1;
    }
    ensure!(tally.iter().all(|&c| c > 0), "table does not cover all cases: {tally:?}");
    Ok(format!("1000 rows, slm/llm/rollout = {}/{}/{}", tally[0], tally[1], tally[2]))
}

fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for class in [true, false] {
        let sign = if class { 1.0 } else { -1.0 };
        for _ in 0..500 {
            // Centres two standard deviations either side of the boundary.
            xs.push(dir.iter().map(|v| { let z: f64 = StandardNormal.sample(&mut rng); sign * 2.0 * v / norm + z }).collect());
            ys.push(class);
        }
    }
    (xs, ys)
}

/// Nearest-centroid classifier, written independently of the trainer.
fn centroid_accuracy(xs: &[Vec<f64>], ys: &[bool]) -> f64 {
    let d = xs[0].len();
    let mean = |c: bool| {
        let rows: Vec<&Vec<f64>> = xs.iter().zip(ys).filter(|(_, &y)| y == c).map(|(x, _)| x).collect();
        (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect::<Vec<_>>()
    };
    let (a, b) = (mean(true), mean(false));
    let dist = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    xs.iter().zip(ys).filter(|(x, &y)| (dist(x, &a) < dist(x, &b)) == y).count() as f64 / xs.len() as f64
}

fn router_training() -> Outcome {
    let (xs, ys) = blobs(8);
    let separable = centroid_accuracy(&xs, &ys);
    ensure!(separable >= 0.95, "reference classifier only reaches {separable}");
    let examples = xs
        .iter()
        .zip(&ys)
        .enumerate()
        .map(|(i, (x, &y))| TrainingExample {
            hidden: HiddenState::new(x.clone()).unwrap(),
            label: if y { PreferenceLabel::PreferSlm } else { PreferenceLabel::PreferLlm },
            context_len: 1,
            sequence: i,
            position: 0,
        })
        .collect();
    let dataset = Dataset { examples };
    let (model, report) = trainer::train(&dataset, &TrainConfig { seed: 3, ..TrainConfig::default() }).map_err(|e| e.to_string())?;
    ensure!(report.train_accuracy >= 0.95, "training accuracy {}", report.train_accuracy);

    // Central differences at a fresh initialisation and at the trained point.
    let refs: Vec<&[f64]> = xs.iter().step_by(16).map(|x| x.as_slice()).collect();
    let targets: Vec<f64> = ys.iter().step_by(16).map(|&y| if y { 1.0 } else { 0.0 }).collect();
    let mut worst: f64 = 0.0;
    for start in [RouterModel::init(&[8, 4, 1], 17).unwrap(), model] {
        let (_, grad) = trainer::loss_and_gradient(&start, &refs, &targets, 1e-3).map_err(|e| e.to_string())?;
        let params = start.params();
        for k in 0..params.len() {
            let h = 1e-6;
            let mut probe = start.clone();
            let mut p = params.clone();
            p[k] += h;
            probe.set_params(&p).unwrap();
            let up = trainer::loss(&probe, &refs, &targets, 1e-3).unwrap();
            p[k] -= 2.0 * h;
            probe.set_params(&p).unwrap();
            let down = trainer::loss(&probe, &refs, &targets, 1e-3).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    ensure!(worst <= 1e-4, "gradient relative error {worst:e}");
    Ok(format!(
        "reference acc {separable:.3}, router acc {:.3}, loss {:.3}->{:.3}, max grad rel err {worst:.1e}",
        report.train_accuracy, report.initial_loss, report.final_loss
    ))
}

fn trained_oracle_router(params: OracleParams) -> RouterModel {
    let train_task = OracleTask::new(OracleParams { seed: params.seed + 1000, ..params });
    let (router, _) = trainer::train(&train_task.training_dataset(), &TrainConfig { epochs: 40, ..TrainConfig::default() }).unwrap();
    router
}

fn oracle_setup(params: OracleParams, timing: Timing) -> (OracleTask, Orchestrator<OracleSlm, InProcessTransport>) {
    let task = OracleTask::new(params);
    let server = Server::new(LlmBackend::ScriptedOracle(task.llm()), ServingConfig { timing, ..ServingConfig::default() }).unwrap();
    let orch = Orchestrator::new(task.slm(), trained_oracle_router(params), InProcessTransport::new(Arc::new(server)));
    (task, orch)
}

fn long_answer_params() -> OracleParams {
    OracleParams { items: 20, answer_len: 100, corruption: 0.3, seed: 7, ..OracleParams::default() }
}

fn grid_sweep(kv: KvPolicy, timing: Timing, clock: &(dyn Fn() -> Box<dyn Clock> + Sync)) -> SweepOutcome {
    let (task, orch) = oracle_setup(long_answer_params(), timing);
    let cfg = SweepConfig {
        thresholds: DEFAULT_GRID.to_vec(),
        template: GenerationConfig { mode: Mode::Joint, max_tokens: 100, kv_policy: kv, ..GenerationConfig::default() },
        parallel: true,
    };
    sweep(&orch, task.task(), &cfg, clock).unwrap()
}

fn modeled() -> Box<dyn Clock> {
    Box::new(ModeledClock::new(CostModel::default()))
}

fn threshold_monotonicity(modeled_sweep: &SweepOutcome) -> Outcome {
    let rows = &modeled_sweep.rows;
    let counts: Vec<usize> = modeled_sweep.runs.iter().map(|r| r.iter().map(|i| i.metrics.unwrap().routing_number).sum()).collect();
    for w in 0..rows.len() - 1 {
        ensure!(counts[w] <= counts[w + 1], "routing count drops between {} and {}: {counts:?}", rows[w].threshold, rows[w + 1].threshold);
        ensure!(rows[w].routed_ratio <= rows[w + 1].routed_ratio, "routed ratio drops at {}", rows[w + 1].threshold);
    }
    for r in &modeled_sweep.runs {
        ensure!(r.iter().all(|i| i.output.len() == 100 && i.error.is_none()), "an item did not produce 100 tokens");
    }
    let ratios: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.routed_ratio)).collect();
    Ok(format!("routing counts {counts:?}, routed ratio [{}]", ratios.join(", ")))
}

fn kv_policy_equivalence() -> Outcome {
    let slm = TinyTransformer::new(ModelWeights::random(ModelConfig::reference(1)).unwrap());
    let llm = TinyTransformer::new(ModelWeights::random(ModelConfig::reference(2)).unwrap());
    let server = Server::new(LlmBackend::ReferenceEngine { engine: llm, kv_cache: true }, ServingConfig { timing: Timing::Modeled, ..ServingConfig::default() }).unwrap();
    let router = RouterModel::init(&RouterModel::default_dims(64), 4).unwrap();
    let orch = Orchestrator::new(slm, router, InProcessTransport::new(Arc::new(server)))
        .with_options(GenerateOptions { capture_logits: true, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut routed = 0;
    let mut worst: f64 = 0.0;
    for p in 0..50 {
        let len = rng.random_range(1..40);
        let prompt: String = (0..len).map(|_| rng.random_range(b' '..=b'~') as char).collect();
        let base = GenerationConfig { mode: Mode::Joint, threshold: 0.5, max_tokens: 12, ..GenerationConfig::default() };
        let a = orch.generate(&prompt, &base, &ModeledClock::default()).map_err(|e| e.to_string())?;
        let b = orch
            .generate(&prompt, &GenerationConfig { kv_policy: KvPolicy::RePrefillOnRoute, ..base }, &ModeledClock::default())
            .map_err(|e| e.to_string())?;
        ensure!(a.error.is_none() && b.error.is_none(), "prompt {p}: {:?} {:?}", a.error, b.error);
        ensure!(a.token_ids() == b.token_ids(), "prompt {p}: token sequences differ");
        ensure!(
            a.tokens.iter().map(|t| t.source).eq(b.tokens.iter().map(|t| t.source)),
            "prompt {p}: provenance differs"
        );
        for (x, y) in a.logits.as_ref().unwrap().iter().zip(b.logits.as_ref().unwrap()) {
            for (u, v) in x.iter().zip(y) {
                worst = worst.max((u - v).abs());
            }
        }
        routed += a.routed_tokens();
    }
    ensure!(worst <= 1e-5, "logit gap {worst:e}");
    ensure!(routed > 0, "no token was routed, the comparison is vacuous");
    Ok(format!("50 prompts, {routed} routed tokens, max logit gap {worst:.1e}"))
}

fn quality_gain() -> Outcome {
    let params = OracleParams { items: 200, answer_len: 3, corruption: 0.5, seed: 11, ..OracleParams::default() };
    let (task, orch) = oracle_setup(params, Timing::Modeled);
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let joint = SweepConfig { thresholds: grid, template: GenerationConfig { mode: Mode::Joint, ..GenerationConfig::default() }, parallel: true };
    let out = sweep(&orch, task.task(), &joint, &modeled).unwrap();
    let small = SweepConfig {
        thresholds: vec![0.0],
        template: GenerationConfig { mode: Mode::SmallOnly, ..GenerationConfig::default() },
        parallel: true,
    };
    let base = sweep(&orch, task.task(), &small, &modeled).unwrap().rows[0].accuracy.unwrap();
    ensure!(base > 0.0, "small-only accuracy is zero, relative gain undefined");
    let mut best: Option<(f64, f64, f64)> = None;
    for r in &out.rows {
        let gain = r.accuracy.unwrap() / base - 1.0;
        if r.routed_ratio <= 0.20 && best.is_none_or(|(_, g, _)| gain > g) {
            best = Some((r.threshold, gain, r.routed_ratio));
        }
    }
    let (tau, gain, ratio) = best.ok_or("no threshold keeps routed ratio at or below 0.20")?;
    ensure!(gain >= 0.5, "best gain {:.1}% at tau {tau:.2} (ratio {ratio:.3})", gain * 100.0);
    Ok(format!("small-only acc {base:.3}; tau {tau:.2}: routed {:.1}%, gain {:.0}%", ratio * 100.0, gain * 100.0))
}

fn latency_structure(modeled_sweep: &SweepOutcome, measured_sweep: &SweepOutcome) -> Outcome {
    let per_call = 0.9 + 0.170;
    let mut worst_comm: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    for (label, s) in [("modeled", modeled_sweep), ("measured", measured_sweep)] {
        for r in &s.rows {
            let m = &r.metrics;
            let expected = m.routing_number * per_call;
            let err = if expected == 0.0 { m.comm_llm_s } else { (m.comm_llm_s - expected).abs() / expected };
            ensure!(err <= 0.15, "{label} tau {}: comm {:.3}s vs {:.3}s", r.threshold, m.comm_llm_s, expected);
            worst_comm = worst_comm.max(err);
            if label == "modeled" {
                let share = m.residual_s() / m.overall_s;
                ensure!(m.residual_s() >= -1e-9 && share <= 0.02, "tau {}: residual {:.2}% of overall", r.threshold, share * 100.0);
                worst_residual = worst_residual.max(share);
            }
        }
    }
    Ok(format!("max comm deviation {:.2}%, max residual {:.2}% of overall", worst_comm * 100.0, worst_residual * 100.0))
}

fn tbt_growth(modeled_sweep: &SweepOutcome) -> Outcome {
    let mut pts: Vec<(f64, f64)> = modeled_sweep.rows.iter().map(|r| (r.metrics.routing_number, r.metrics.tbt_slm_s)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for w in pts.windows(2) {
        ensure!(w[0].1 <= w[1].1 + 1e-12, "TBT falls from {:.3}s to {:.3}s as routing number goes {:.1} -> {:.1}", w[0].1, w[1].1, w[0].0, w[1].0);
    }
    let s: Vec<String> = pts.iter().map(|(n, t)| format!("{n:.1}:{t:.3}s")).collect();
    Ok(format!("routing number:TBT {}", s.join(" ")))
}

fn server_properties() -> Outcome {
    let engine = || TinyTransformer::new(ModelWeights::random(ModelConfig::reference(2)).unwrap());
    let cfg = ServingConfig { timing: Timing::Modeled, ..ServingConfig::instant() };
    let warm = Server::new(LlmBackend::ReferenceEngine { engine: engine(), kv_cache: true }, cfg.clone()).unwrap();
    let request = |ctx: &str, session: &str, id: String| RoutingRequest {
        context: ctx.to_string(),
        current_token: "?".into(),
        token_index: 0,
        routing_threshold: 0.5,
        slm_state: SlmState::default(),
        history: History::default(),
        meta_data: MetaData { session_id: session.into(), request_id: id },
    };

    // Cold: a brand-new server per request. Warm: one long-lived session.
    let mut ctx = String::from("Edge devices");
    for step in 0..12 {
        let w = warm.serve(&request(&ctx, "warm", format!("r{step}"))).map_err(|e| e.to_string())?;
        let cold_server = Server::new(LlmBackend::ReferenceEngine { engine: engine(), kv_cache: true }, cfg.clone()).unwrap();
        let c = cold_server.serve(&request(&ctx, "cold", format!("r{step}"))).map_err(|e| e.to_string())?;
        ensure!(w.tokens == c.tokens, "step {step}: warm and cold sessions disagree");
        ctx.push_str(&w.tokens[0].text);
        ctx.push(['a', ' ', 'e'][step % 3]);
        if step == 6 {
            ensure!(warm.session_gc(-1.0) == 1, "gc did not evict the idle session");
        }
    }

    // Replay of an identical (session_id, request_id).
    let body = serialize_request(&request("Replay me", "idem", "once".into())).unwrap();
    let first = warm.serve_bytes(&body).map_err(|e| e.to_string())?;
    let runs = warm.backend_runs();
    let second = warm.serve_bytes(&body).map_err(|e| e.to_string())?;
    ensure!(first == second, "replayed response differs");
    ensure!(warm.backend_runs() == runs, "replay re-ran the backend");

    // 16 concurrent sessions vs their serial replay.
    let shared = Arc::new(Server::new(LlmBackend::ReferenceEngine { engine: engine(), kv_cache: true }, cfg.clone()).unwrap());
    let script = |s: usize| -> Vec<char> {
        let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
        (0..8).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
    };
    let run_session = |server: &Server, s: usize| -> Result<String, String> {
        let mut ctx = format!("session {s}: ");
        for (i, c) in script(s).into_iter().enumerate() {
            let r = server.serve(&request(&ctx, &format!("fuzz{s}"), format!("q{i}"))).map_err(|e| e.to_string())?;
            ctx.push_str(&r.tokens[0].text);
            ctx.push(c);
        }
        Ok(ctx)
    };
    let parallel: Vec<Result<String, String>> = std::thread::scope(|sc| {
        let handles: Vec<_> = (0..16).map(|s| {
            let shared = &shared;
            sc.spawn(move || run_session(shared, s))
        }).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (s, got) in parallel.into_iter().enumerate() {
        let got = got?;
        let serial = Server::new(LlmBackend::ReferenceEngine { engine: engine(), kv_cache: true }, cfg.clone()).unwrap();
        let want = run_session(&serial, s)?;
        ensure!(got == want, "session {s} transcript differs from its serial replay");
        let stored = shared.session_context(&format!("fuzz{s}")).unwrap();
        ensure!(ByteTokenizer.decode(&stored).starts_with(&format!("session {s}: ")), "session {s} context mixed up");
    }
    Ok("cold == warm over 12 steps (with an eviction), replay byte-identical, 16 concurrent sessions match serial".into())
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] {name} ({:.1}s): {detail}", t.elapsed().as_secs_f64());
        results.push((name, outcome));
    };

    run("wire fidelity", &mut wire_fidelity);
    run("shortcut labeling truth table", &mut shortcut_table);
    run("router training", &mut router_training);
    let modeled_sweep = grid_sweep(KvPolicy::RePrefillOnRoute, Timing::Modeled, &modeled);
    let measured_sweep = grid_sweep(KvPolicy::RePrefillOnRoute, Timing::Measured, &|| Box::new(MonotonicClock::new(false)));
    run("threshold monotonicity", &mut || threshold_monotonicity(&modeled_sweep));
    run("kv-policy equivalence", &mut kv_policy_equivalence);
    run("quality gain", &mut quality_gain);
    run("latency structure", &mut || latency_structure(&modeled_sweep, &measured_sweep));
    run("tbt growth", &mut || tbt_growth(&modeled_sweep));
    run("server properties", &mut server_properties);

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed in {:.1}s", results.len() - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
