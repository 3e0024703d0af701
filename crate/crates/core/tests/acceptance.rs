//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 5 to 9 share one five-seed run of `configs/desk.toml`.

use layra::adapters::{attach, merge_adapters, AdapterSpec};
use layra::arithmetic::{apply, delta, instruct, merge, series};
use layra::corpora::Vocabulary;
use layra::eval::{learning_retention, EvalRow};
use layra::experiment::{run_pipeline, ExperimentConfig, Outcome, Workspace};
use layra::model::{forward, init_model, loss, loss_and_gradients, Checkpoint, Component, ModelConfig, ParamId, TokenBatch};
use layra::store::{checkpoint_from_bytes, checkpoint_to_bytes};
use layra::tensor::{Tape, Tensor, Var};
use layra::trainer::{train, CorpusBatches, MethodSpec, TrainRunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&p);
    p
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

const H: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error over every input entry of `Σ w ⊙ op(inputs)`,
/// and the number of entries checked.
fn op_error(inputs: Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> Var) -> (f64, usize) {
    let run = |xs: &[Tensor], w: Option<&Tensor>| -> (f64, Tape, Vec<Var>, Var, Vec<usize>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = op(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let w = w.cloned().unwrap_or_else(|| rand_t(&shape, 99));
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv).unwrap();
        let s = tape.sum(prod).unwrap();
        (tape.value(s).data()[0], tape, vars, s, shape)
    };
    let shape = run(&inputs, None).4;
    let w = rand_t(&shape, 99);
    let (_, tape, vars, s, _) = run(&inputs, Some(&w));
    let grads = tape.backward(s).unwrap();
    let (mut worst, mut n) = (0.0f64, 0);
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]).unwrap();
        for j in 0..x.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let num = (run(&plus, Some(&w)).0 - run(&minus, Some(&w)).0) / (2.0 * H);
            worst = worst.max(rel_err(g.data()[j], num));
            n += 1;
        }
    }
    (worst, n)
}

fn gradients() -> Check {
    let start = Instant::now();
    let (b, s, d) = (2, 4, 8);
    let ops: Vec<(&str, (f64, usize))> = vec![
        ("matmul", op_error(vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1]).unwrap())),
        ("matmul_nt", op_error(vec![rand_t(&[3, 4], 3), rand_t(&[5, 4], 4)], |t, v| t.matmul_nt(v[0], v[1]).unwrap())),
        ("add", op_error(vec![rand_t(&[2, 3], 5), rand_t(&[2, 3], 6)], |t, v| t.add(v[0], v[1]).unwrap())),
        ("mul", op_error(vec![rand_t(&[2, 3], 7), rand_t(&[2, 3], 8)], |t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", op_error(vec![rand_t(&[2, 3], 9)], |t, v| t.scale(v[0], -1.7).unwrap())),
        ("silu", op_error(vec![rand_t(&[2, 3], 10)], |t, v| t.silu(v[0]).unwrap())),
        ("rmsnorm", op_error(vec![rand_t(&[3, 6], 11), rand_t(&[6], 12)], |t, v| t.rmsnorm(v[0], v[1]).unwrap())),
        ("rope", op_error(vec![rand_t(&[6, 8], 13)], |t, v| t.rope(v[0], 2, 3).unwrap())),
        (
            "attention",
            op_error(vec![rand_t(&[b * s, d], 14), rand_t(&[b * s, d], 15), rand_t(&[b * s, d], 16)], |t, v| {
                t.causal_attention(v[0], v[1], v[2], 2, s).unwrap()
            }),
        ),
        ("embedding", op_error(vec![rand_t(&[5, 3], 17)], |t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap())),
        (
            "cross_entropy",
            op_error(vec![rand_t(&[4, 6], 18)], |t, v| t.softmax_cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)]).unwrap()),
        ),
    ];

    let model = init_model(ModelConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 11,
        max_seq_len: 16,
        seed: 21,
    })
    .unwrap();
    let batch = TokenBatch::padded(&[vec![1, 4, 2, 9, 3], vec![7, 7, 0]], 0);
    let targets = vec![Some(4), Some(2), Some(9), Some(3), Some(10), Some(7), Some(0), Some(5), None, None];
    let (_, grads) = loss_and_gradients(&model, &batch, &targets).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids = model.config().param_ids();
    let (mut model_worst, mut sampled) = (0.0f64, 0);
    while sampled < 40 {
        let id = ids[rng.gen_range(0..ids.len())];
        let j = rng.gen_range(0..model.get(id).len());
        let mut plus = model.clone();
        plus.values_mut(id)[j] += H;
        let mut minus = model.clone();
        minus.values_mut(id)[j] -= H;
        let num = (loss(&plus, &batch, &targets).unwrap() - loss(&minus, &batch, &targets).unwrap()) / (2.0 * H);
        model_worst = model_worst.max(rel_err(grads[&id].data()[j], num));
        sampled += 1;
    }

    let op_worst = ops.iter().map(|(_, (e, _))| *e).fold(0.0, f64::max);
    let entries: usize = ops.iter().map(|(_, (_, n))| n).sum();
    let bad: Vec<&str> = ops.iter().filter(|(_, (e, _))| *e >= 1e-4).map(|(n, _)| *n).collect();
    let elapsed = start.elapsed();
    ensure(
        bad.is_empty() && model_worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{} ops, {entries} entries, worst rel {op_worst:.1e}; model {sampled} params, worst rel {model_worst:.1e}; {:.1}s{}",
            ops.len(),
            elapsed.as_secs_f64(),
            if bad.is_empty() { String::new() } else { format!("; failing {bad:?}") }
        ),
    )
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::load(&config_path("desk.toml")).unwrap()
}

fn desk_model(seed: u64) -> Checkpoint {
    let mut cfg = desk_config().model_config(Vocabulary::standard().len());
    cfg.seed = seed;
    init_model(cfg).unwrap()
}

fn layer_ids(layers: &[usize], comps: &[Component]) -> BTreeSet<ParamId> {
    layers.iter().flat_map(|&l| comps.iter().map(move |&c| ParamId::layer(l, c))).collect()
}

fn freeze_integrity() -> Check {
    let base = desk_model(3);
    let n = base.config().n_layers;
    let tokens: Vec<u32> = {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..20_000).map(|_| rng.gen_range(4..base.config().vocab_size as u32)).collect()
    };
    let run = TrainRunConfig {
        steps: 20,
        batch_size: 4,
        seq_len: 32,
        lr: 1e-3,
        warmup_steps: 2,
        min_lr_ratio: 0.1,
        grad_clip: 1.0,
        weight_decay: 0.01,
        seed: 6,
        corpora: vec![],
        mixing_weights: vec![],
    };
    let tables: BTreeSet<ParamId> = [ParamId::Embedding, ParamId::Head].into();
    let edges = [0, 1, 7];
    let all: Vec<usize> = (0..n).collect();
    let cases = [
        ("layra", MethodSpec::layra(n, 2, 1), layer_ids(&edges, Component::LINEAR).union(&tables).copied().collect::<BTreeSet<_>>()),
        ("layer-selective full", MethodSpec::layer_selective_full_cpt(n, 2, 1), layer_ids(&edges, Component::ALL).union(&tables).copied().collect()),
        ("lora", MethodSpec::lora_cpt(n), layer_ids(&all, Component::LINEAR)),
    ];
    let mut details = Vec::new();
    let mut ok = true;
    for (name, method, allowed) in cases {
        let mut src = CorpusBatches::new(&[("x", &tokens)], &[1.0], 4, 32, 6).unwrap();
        let phi = train(&base, &method, &run, &mut src).unwrap().0;
        let changed: BTreeSet<ParamId> = phi.changed_params(&base).into_iter().collect();
        let frozen_equal = base.params().iter().filter(|(id, _)| !allowed.contains(id)).all(|(id, t)| t.bits_eq(phi.get(*id)));
        let outside = changed.difference(&allowed).count();
        ok &= frozen_equal && outside == 0 && !changed.is_empty();
        details.push(format!("{name}: {} changed, {} frozen bitwise equal", changed.len(), base.params().len() - allowed.len()));
    }
    ensure(ok, details.join("; "))
}

fn merge_equivalence() -> Check {
    let base = desk_model(8);
    let cfg = base.config().clone();
    let mut adapted = attach(&base, &AdapterSpec::layer_selective(cfg.n_layers, 2, 1), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for l in [0, 1, 7] {
        for &c in Component::LINEAR {
            let pair = adapted.adapter_mut(l, c).unwrap();
            pair.b = Tensor::randn(pair.b.shape(), 0.2, &mut rng);
        }
    }
    let merged = merge_adapters(&adapted).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(1..=cfg.max_seq_len);
        let seq: Vec<u32> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        worst = worst.max(forward(&merged, &seq).unwrap().max_abs_diff(&adapted.forward(&seq).unwrap()));
    }
    ensure(worst < 1e-8, format!("100 sequences, max abs logit diff {worst:.2e}"))
}

fn random_ckpt(seed: u64) -> Checkpoint {
    let mut c = desk_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in c.config().param_ids() {
        for v in c.values_mut(id) {
            *v = rng.gen_range(-1.0..1.0) * 2f64.powi(rng.gen_range(-8..3));
        }
    }
    c
}

fn bits_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.params().iter().all(|(id, t)| t.bits_eq(b.get(*id)))
}

fn values(c: &Checkpoint) -> impl Iterator<Item = f64> + '_ {
    c.params().values().flat_map(|t| t.data().iter().copied())
}

fn arithmetic_identities() -> Check {
    let mut ok = true;
    let mut comp_worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 20;
    for t in 0..trials {
        let (theta, phi, target) = (random_ckpt(3 * t), random_ckpt(3 * t + 1), random_ckpt(3 * t + 2));
        let d = delta(&phi, &theta).unwrap();
        ok &= bits_equal(&apply(&theta, &d, 1.0).unwrap(), &phi);
        ok &= bits_equal(&apply(&target, &d, 0.0).unwrap(), &target);
        ok &= bits_equal(&series(&target, &phi, &theta, 0.0).unwrap(), &target);
        ok &= bits_equal(&instruct(&target, &phi, &theta, 0.0).unwrap(), &target);
        ok &= bits_equal(&merge(&phi, &theta, 1.0).unwrap(), &phi);
        ok &= bits_equal(&merge(&phi, &theta, 0.0).unwrap(), &theta);
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let twice = apply(&apply(&theta, &d, a).unwrap(), &d, b).unwrap();
        let once = apply(&theta, &d, a + b).unwrap();
        comp_worst = values(&twice).zip(values(&once)).map(|(x, y)| (x - y).abs()).fold(comp_worst, f64::max);
    }
    let constant = |v: f64| {
        let mut c = desk_model(0);
        for id in c.config().param_ids() {
            c.values_mut(id).fill(v);
        }
        c
    };
    let it = instruct(&constant(10.0), &constant(4.0), &constant(2.0), 0.7).unwrap();
    let scalar = values(&it).all(|v| v == 11.4);
    ensure(
        ok && comp_worst <= 1e-12 && scalar,
        format!(
            "{trials} random triples: identities {}, composition max err {comp_worst:.1e}, 10 + 0.7(4 - 2) = 11.4 {}",
            if ok { "bitwise" } else { "BROKEN" },
            if scalar { "exactly" } else { "NOT exact" }
        ),
    )
}

fn store_integrity() -> Check {
    let small = |seed: u64| {
        let mut c = init_model(ModelConfig {
            n_layers: 1 + (seed % 3) as usize,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 17,
            max_seq_len: 8,
            seed,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in c.config().param_ids() {
            for v in c.values_mut(id) {
                *v = loop {
                    let x = f64::from_bits(rng.gen());
                    if x.is_finite() {
                        break x;
                    }
                };
            }
        }
        c.provenance.insert("seed".into(), seed.to_string());
        c
    };
    let mut round_trips = 0;
    for s in 0..1000 {
        let c = small(s);
        let bytes = checkpoint_to_bytes(&c).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        if bits_equal(&c, &back) && back.provenance == c.provenance && checkpoint_to_bytes(&back).unwrap() == bytes {
            round_trips += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut detected = 0;
    for s in 0..100 {
        let mut bytes = checkpoint_to_bytes(&small(5000 + s)).unwrap();
        let i = rng.gen_range(0..bytes.len());
        bytes[i] ^= rng.gen_range(1..=255u8);
        if checkpoint_from_bytes(&bytes).is_err() {
            detected += 1;
        }
    }
    ensure(
        round_trips == 1000 && detected == 100,
        format!("{round_trips}/1000 round trips bitwise, {detected}/100 corruptions detected"),
    )
}

/// Every file below `root` except training logs, which record wall time.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".log.jsonl") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Check {
    let cfg = ExperimentConfig::load(&config_path("smoke.toml")).unwrap();
    let (a, b) = (scratch("smoke-a"), scratch("smoke-b"));
    let ra = run_pipeline(&cfg, &Workspace::new(&a), &mut |_| {}).unwrap();
    let rb = run_pipeline(&cfg, &Workspace::new(&b), &mut |_| {}).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    let csvs = ta.keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|p| ta.get(*p) != tb.get(*p))
        .map(|p| p.display().to_string())
        .collect();
    ensure(
        ra.hashes == rb.hashes && differing.is_empty(),
        format!(
            "two smoke pipelines: {} checkpoint hashes, {} files ({csvs} CSVs) compared{}",
            ra.hashes.len(),
            ta.len(),
            if differing.is_empty() { String::new() } else { format!("; differ: {differing:?}") }
        ),
    )
}

struct Desk {
    out: Outcome,
    slowest: (String, Duration),
}

fn run_desk() -> Desk {
    let cfg = desk_config();
    let root = scratch("desk");
    let mut last = Instant::now();
    let mut slowest = (String::new(), Duration::ZERO);
    let out = run_pipeline(&cfg, &Workspace::new(&root), &mut |m| {
        let dt = last.elapsed();
        last = Instant::now();
        eprintln!("[{:>6.1}s] {m}", dt.as_secs_f64());
        let is_run = (m.starts_with("seed ") || m.starts_with("shared ")) && m.contains(" loss ");
        if is_run && dt > slowest.1 {
            slowest = (m.split(':').next().unwrap_or(m).to_string(), dt);
        }
    })
    .unwrap();
    Desk { out, slowest }
}

fn rows_for<'a>(rows: &'a [EvalRow], ckpt: &str, langs: &[&str]) -> Vec<EvalRow> {
    rows.iter().filter(|r| r.checkpoint == ckpt && langs.contains(&r.language.as_str())).cloned().collect()
}

fn value(rows: &[EvalRow], ckpt: &str, lang: &str, metric: &str) -> f64 {
    rows.iter()
        .find(|r| r.checkpoint == ckpt && r.language == lang && r.metric == metric)
        .unwrap_or_else(|| panic!("no {metric} row for {ckpt} on {lang}"))
        .value
}

const METHODS: [&str; 4] = ["full_swa", "lora_swa", "lsf_swa", "layra_swa"];

fn ordering(desk: &Desk) -> Check {
    let langs = ["anc", "rom", "hin", "swa"];
    let (mut full_most, mut layra_least) = (0, 0);
    let (mut full_gain, mut layra_gain) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for (seed, rows) in &desk.out.rows {
        let before = rows_for(rows, "base", &langs);
        let mut drops = BTreeMap::new();
        for m in METHODS {
            let lr = learning_retention(&before, &rows_for(rows, m, &langs), &["swa"], "cloze").unwrap();
            drops.insert(m, -lr.mean_retention);
            match m {
                "full_swa" => full_gain += lr.mean_learning,
                "layra_swa" => layra_gain += lr.mean_learning,
                _ => {}
            }
        }
        let max = drops.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = drops.values().cloned().fold(f64::INFINITY, f64::min);
        full_most += (drops["full_swa"] == max) as usize;
        layra_least += (drops["layra_swa"] == min) as usize;
        per_seed.push(format!(
            "s{seed} drops {}",
            METHODS.iter().map(|m| format!("{:.3}", drops[m])).collect::<Vec<_>>().join("/")
        ));
    }
    let n = desk.out.rows.len() as f64;
    let ratio = (layra_gain / n) / (full_gain / n);
    let budget = desk.slowest.1 <= Duration::from_secs(600);
    ensure(
        full_most >= 4 && layra_least >= 4 && ratio >= 0.5 && budget,
        format!(
            "full largest drop {full_most}/5, layra smallest {layra_least}/5, layra/full gain {ratio:.2}, slowest run {} {:.0}s; {} (full/lora/lsf/layra)",
            desk.slowest.0,
            desk.slowest.1.as_secs_f64(),
            per_seed.join(", ")
        ),
    )
}

fn gain(rows: &[EvalRow], ckpt: &str, lang: &str) -> f64 {
    value(rows, ckpt, lang, "cloze") - value(rows, "base", lang, "cloze")
}

fn script_effect(desk: &Desk) -> Check {
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for (seed, rows) in &desk.out.rows {
        let (urd, swa) = (gain(rows, "layra_urd", "urd"), gain(rows, "layra_swa", "swa"));
        wins += (urd < swa) as usize;
        per_seed.push(format!("s{seed} urd {urd:+.3} swa {swa:+.3}"));
    }
    ensure(wins >= 4, format!("urd gain below swa in {wins}/5 seeds; {}", per_seed.join(", ")))
}

fn merge_vs_single(desk: &Desk) -> Check {
    let mut within = 0;
    let mut per_seed = Vec::new();
    for (seed, rows) in &desk.out.rows {
        let m = |l: &str| value(rows, "merge_glg_swa", l, "cloze");
        let (dg, ds) = (m("glg") - value(rows, "layra_glg", "glg", "cloze"), m("swa") - value(rows, "layra_swa", "swa", "cloze"));
        within += (dg.abs() <= 0.05 && ds.abs() <= 0.05) as usize;
        per_seed.push(format!("s{seed} glg {dg:+.3} swa {ds:+.3}"));
    }
    ensure(within >= 4, format!("merge within 5 points on both in {within}/5 seeds; {}", per_seed.join(", ")))
}

fn series_trend(desk: &Desk) -> Check {
    let points = ["series_0", "series_05", "series_1"];
    let mut inversions = 0;
    let mut per_seed = Vec::new();
    for (seed, rows) in &desk.out.rows {
        let acc = |l: &str| points.map(|p| value(rows, p, l, "cloze"));
        let (glg, swa) = (acc("glg"), acc("swa"));
        inversions += swa.windows(2).filter(|w| w[1] < w[0]).count();
        inversions += glg.windows(2).filter(|w| w[1] > w[0]).count();
        per_seed.push(format!(
            "s{seed} glg {:.3}/{:.3}/{:.3} swa {:.3}/{:.3}/{:.3}",
            glg[0], glg[1], glg[2], swa[0], swa[1], swa[2]
        ));
    }
    ensure(inversions <= 1, format!("{inversions} inversions at lambda' 0/0.5/1; {}", per_seed.join(", ")))
}

fn instruction_transfer(desk: &Desk) -> Check {
    let first = desk.out.rows.values().next().unwrap();
    let gate = ["anc", "rom", "hin"].iter().map(|l| value(first, "it", l, "instruction")).sum::<f64>() / 3.0;
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for (seed, rows) in &desk.out.rows {
        let (it, moved) = (value(rows, "it", "swa", "instruction"), value(rows, "it_swa", "swa", "instruction"));
        wins += (moved > it) as usize;
        per_seed.push(format!("s{seed} {it:.3} -> {moved:.3}"));
    }
    ensure(
        gate > 0.9 && wins >= 4,
        format!("anchor exact match {gate:.3}; swa improved in {wins}/5 seeds; {}", per_seed.join(", ")),
    )
}

fn main() -> ExitCode {
    let mut results: BTreeMap<usize, (&str, Check)> = BTreeMap::new();
    let mut record = |n: usize, what: &'static str, f: &mut dyn FnMut() -> Check| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        eprintln!("criterion {n} done: {}", if r.is_ok() { "PASS" } else { "FAIL" });
        results.insert(n, (what, r));
    };
    record(1, "gradient correctness", &mut gradients);
    record(2, "freeze integrity", &mut freeze_integrity);
    record(3, "lora merge equivalence", &mut merge_equivalence);
    record(4, "arithmetic identities", &mut arithmetic_identities);
    record(10, "store integrity", &mut store_integrity);
    record(11, "determinism", &mut determinism);

    let desk = catch_unwind(run_desk).map_err(|_| "desk pipeline failed".to_string());
    let with_desk = |f: fn(&Desk) -> Check| {
        let desk = &desk;
        move || desk.as_ref().map_err(Clone::clone).and_then(f)
    };
    record(5, "forgetting order", &mut with_desk(ordering));
    record(6, "script effect", &mut with_desk(script_effect));
    record(7, "merge vs single-language", &mut with_desk(merge_vs_single));
    record(8, "series scale trend", &mut with_desk(series_trend));
    record(9, "instruction transfer", &mut with_desk(instruction_transfer));

    let mut failed = 0;
    for (n, (what, r)) in &results {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += r.is_err() as usize;
        println!("criterion {n:>2} {tag} {what}: {detail}");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} criteria failed", results.len());
        ExitCode::FAILURE
    }
}
