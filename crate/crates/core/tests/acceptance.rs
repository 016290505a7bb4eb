//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use protoverb::corpus::{
    default_pattern, expand_multilabel, gen_synthetic, Instance, Overlap, Split, SynthSpec,
    Template,
};
use protoverb::diagnostics::{analyze, avg_cos_distance, topk_neighbors};
use protoverb::encoder::{EncoderParams, TokenId};
use protoverb::hierarchy::{SenseHierarchy, SensePath};
use protoverb::linalg::{dot, norm, Matrix};
use protoverb::losses::{loss_ins_ins, loss_ins_pro, loss_pro_pro, total_loss, Batch, LossToggles};
use protoverb::metrics::{evaluate_vectors, macro_f1, per_class_f1, predict};
use protoverb::prototypes::PrototypeSet;
use protoverb::trainer::{evaluate_split, fit, prepare_features, FitOutcome, TrainConfig};
use protoverb::xlingual::{
    align, alignment_loss, AlignmentConfig, ClassCorrespondence, TemplateRegistry, UpdateMode,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    ensure(elapsed < Duration::from_secs(limit_secs), || {
        format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn random_batch(
    rng: &mut rand_chacha::ChaCha8Rng,
    h: &SenseHierarchy,
    n: usize,
    dim: usize,
) -> (Vec<Vec<f64>>, Vec<SensePath>) {
    let vecs = (0..n).map(|_| gaussian(rng, dim)).collect();
    let paths = (0..n).map(|_| random_path(rng, h)).collect();
    (vecs, paths)
}

fn c1_loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..40 {
        let mut rng = rng(1000 + seed);
        let h = random_hierarchy(&mut rng);
        let dim = rng.random_range(2..=6);
        let n = rng.random_range(2..=8);
        let tau = [0.1, 0.5, 1.0][seed as usize % 3];
        let ps = random_prototypes(&mut rng, &h, dim);
        let (vecs, paths) = random_batch(&mut rng, &h, n, dim);
        let b = Batch::new(vecs.clone(), paths.clone(), tau).map_err(|e| e.to_string())?;
        let got = [
            loss_ins_ins(&b).unwrap().0,
            loss_ins_pro(&b, &ps, &h).unwrap().0,
            loss_pro_pro(&ps, &h, tau).unwrap().0,
        ];
        let want = [
            oracle_ins_ins(&h, &vecs, &paths, tau),
            oracle_ins_pro(&h, &ps, &vecs, &paths, tau),
            oracle_pro_pro(&h, &ps, tau),
        ];
        for (term, (g, w)) in ["ins_ins", "ins_pro", "pro_pro"]
            .iter()
            .zip(got.iter().zip(want))
        {
            let d = (g - w).abs();
            worst = worst.max(d);
            ensure(d <= 1e-9, || {
                format!("seed {seed}: {term} {g} vs oracle {w}")
            })?;
        }
    }
    within(start.elapsed(), 10)?;
    Ok(format!("40 seeds, max deviation {worst:.2e}"))
}

/// Total objective as a function of token-table and projection parameters.
fn end_to_end_loss(
    enc: &EncoderParams,
    tokens: &[Vec<TokenId>],
    paths: &[SensePath],
    ps: &PrototypeSet,
    h: &SenseHierarchy,
    tau: f64,
) -> f64 {
    let vecs = tokens.iter().map(|t| enc.encode(t).unwrap().1 .0).collect();
    let b = Batch::new(vecs, paths.to_vec(), tau).unwrap();
    total_loss(&b, ps, h, LossToggles::default()).unwrap().total
}

fn c2_gradient_checks() -> Outcome {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut checked = 0usize;
    for seed in 0..20 {
        let mut rng = rng(2000 + seed);
        let h = random_hierarchy(&mut rng);
        let (buckets, d_h, d_p) = (32, 4, 3);
        let n = rng.random_range(2..=6);
        let tau = 0.5;
        let ps = random_prototypes(&mut rng, &h, d_p);
        let enc = EncoderParams::init(buckets, d_h, d_p, seed);
        let tokens: Vec<Vec<TokenId>> = (0..n)
            .map(|_| {
                (0..rng.random_range(1..=4))
                    .map(|_| rng.random_range(0..buckets as u32))
                    .collect()
            })
            .collect();
        let paths: Vec<SensePath> = (0..n).map(|_| random_path(&mut rng, &h)).collect();
        let vecs: Vec<Vec<f64>> = tokens.iter().map(|t| enc.encode(t).unwrap().1 .0).collect();
        let b = Batch::new(vecs.clone(), paths.clone(), tau).unwrap();
        let out = total_loss(&b, &ps, &h, LossToggles::default()).unwrap();
        let at = |vs: Vec<Vec<f64>>, p: &PrototypeSet| {
            total_loss(
                &Batch::new(vs, paths.clone(), tau).unwrap(),
                p,
                &h,
                LossToggles::default(),
            )
            .unwrap()
            .total
        };
        let mut check = |what: String, fd: f64, a: f64| {
            checked += 1;
            ensure(grad_close(fd, a, TOL), || {
                format!("seed {seed}: {what}: fd {fd:e} vs analytic {a:e}")
            })
        };

        for i in 0..n {
            for k in 0..d_p {
                let mut plus = vecs.clone();
                plus[i][k] += STEP;
                let mut minus = vecs.clone();
                minus[i][k] -= STEP;
                let fd = (at(plus, &ps) - at(minus, &ps)) / (2.0 * STEP);
                check(format!("v[{i}][{k}]"), fd, out.grad_vecs[i][k])?;
            }
        }
        for l in 1..=ps.depth() {
            let rows = ps.level(l).unwrap().rows();
            for r in 0..rows {
                for k in 0..d_p {
                    let mut plus = ps.clone();
                    let x = plus.level(l).unwrap().get(r, k);
                    plus.level_mut(l).unwrap().set(r, k, x + STEP);
                    let mut minus = ps.clone();
                    minus.level_mut(l).unwrap().set(r, k, x - STEP);
                    let fd = (at(vecs.clone(), &plus) - at(vecs.clone(), &minus)) / (2.0 * STEP);
                    check(
                        format!("C{l}[{r}][{k}]"),
                        fd,
                        out.grad_prototypes[l - 1].get(r, k),
                    )?;
                }
            }
        }

        let mut proj = Matrix::zeros(d_p, d_h);
        let mut rows: BTreeMap<TokenId, Vec<f64>> = BTreeMap::new();
        for (t, g) in tokens.iter().zip(&out.grad_vecs) {
            let eg = enc.encode_backward(t, g).unwrap();
            for (a, x) in proj.as_mut_slice().iter_mut().zip(eg.projection.as_slice()) {
                *a += x;
            }
            for (id, r) in eg.rows {
                let acc = rows.entry(id).or_insert_with(|| vec![0.0; d_h]);
                for (a, x) in acc.iter_mut().zip(r) {
                    *a += x;
                }
            }
        }
        for idx in 0..d_p * d_h {
            let mut plus = enc.clone();
            plus.projection.as_mut_slice()[idx] += STEP;
            let mut minus = enc.clone();
            minus.projection.as_mut_slice()[idx] -= STEP;
            let fd = (end_to_end_loss(&plus, &tokens, &paths, &ps, &h, tau)
                - end_to_end_loss(&minus, &tokens, &paths, &ps, &h, tau))
                / (2.0 * STEP);
            check(format!("W[{idx}]"), fd, proj.as_slice()[idx])?;
        }
        for (&id, g) in &rows {
            for (k, &gk) in g.iter().enumerate() {
                let idx = id as usize * d_h + k;
                let mut plus = enc.clone();
                plus.token_table.as_mut_slice()[idx] += STEP;
                let mut minus = enc.clone();
                minus.token_table.as_mut_slice()[idx] -= STEP;
                let fd = (end_to_end_loss(&plus, &tokens, &paths, &ps, &h, tau)
                    - end_to_end_loss(&minus, &tokens, &paths, &ps, &h, tau))
                    / (2.0 * STEP);
                check(format!("E[{id}][{k}]"), fd, gk)?;
            }
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!("20 configurations, {checked} partial derivatives"))
}

fn c3_cosine_invariants() -> Outcome {
    let mut worst_drift: f64 = 0.0;
    let mut worst_dot: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = rng(3000 + seed);
        let h = random_hierarchy(&mut rng);
        let dim = rng.random_range(2..=6);
        let n = rng.random_range(2..=8);
        let ps = random_prototypes(&mut rng, &h, dim);
        let (vecs, paths) = random_batch(&mut rng, &h, n, dim);
        let losses = |vs: &[Vec<f64>], p: &PrototypeSet| -> Vec<f64> {
            let b = Batch::new(vs.to_vec(), paths.clone(), 0.1).unwrap();
            let mut out = vec![
                loss_ins_ins(&b).unwrap().0,
                loss_ins_pro(&b, p, &h).unwrap().0,
                loss_pro_pro(p, &h, 0.1).unwrap().0,
            ];
            for v in vs {
                for l in 1..=h.depth() {
                    out.extend(predict(v, p, &h, l).unwrap().probs);
                }
            }
            out
        };
        let base = losses(&vecs, &ps);
        let mut compare = |scaled: Vec<f64>, what: &str| {
            for (a, b) in base.iter().zip(&scaled) {
                let d = (a - b).abs();
                worst_drift = worst_drift.max(d);
                if d > 1e-9 {
                    return Err(format!("seed {seed}: rescaling {what} drifts by {d:e}"));
                }
            }
            Ok(())
        };
        for i in 0..n {
            let mut vs = vecs.clone();
            let s = rng.random_range(0.05..20.0);
            vs[i].iter_mut().for_each(|x| *x *= s);
            compare(losses(&vs, &ps), &format!("v{i}"))?;
        }
        for l in 1..=ps.depth() {
            for r in 0..ps.level(l).unwrap().rows() {
                let mut p = ps.clone();
                let s = rng.random_range(0.05..20.0);
                p.level_mut(l)
                    .unwrap()
                    .row_mut(r)
                    .iter_mut()
                    .for_each(|x| *x *= s);
                compare(losses(&vecs, &p), &format!("C{l}[{r}]"))?;
            }
        }

        let b = Batch::new(vecs.clone(), paths.clone(), 0.1).unwrap();
        let (_, gi) = loss_ins_ins(&b).unwrap();
        let (_, gv, gc) = loss_ins_pro(&b, &ps, &h).unwrap();
        let (_, gp) = loss_pro_pro(&ps, &h, 0.1).unwrap();
        let mut ortho = |g: &[f64], v: &[f64], what: &str| {
            let lhs = dot(g, v).abs();
            let bound = 1e-8 * norm(g) * norm(v);
            if norm(g) > 0.0 {
                worst_dot = worst_dot.max(lhs / (norm(g) * norm(v)));
            }
            ensure(lhs <= bound, || {
                format!("seed {seed}: {what}: |g·v| = {lhs:e} > {bound:e}")
            })
        };
        for i in 0..n {
            ortho(&gi[i], &vecs[i], "ins_ins grad")?;
            ortho(&gv[i], &vecs[i], "ins_pro grad")?;
        }
        for l in 0..ps.depth() {
            for (r, row) in ps.levels()[l].iter_rows().enumerate() {
                ortho(gc[l].row(r), row, "ins_pro prototype grad")?;
                ortho(gp[l].row(r), row, "pro_pro prototype grad")?;
            }
        }
    }
    Ok(format!(
        "max drift {worst_drift:.1e}, max normalized |g·v| {worst_dot:.1e}"
    ))
}

fn c4_prediction_contract() -> Outcome {
    let mut rng = rng(4000);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let h = random_hierarchy(&mut rng);
        let dim = rng.random_range(2..=8);
        let ps = random_prototypes(&mut rng, &h, dim);
        let level = rng.random_range(1..=h.depth());
        let v = gaussian(&mut rng, dim);
        let p = predict(&v, &ps, &h, level).map_err(|e| e.to_string())?;
        let sum: f64 = p.probs.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        ensure((sum - 1.0).abs() <= 1e-9, || {
            format!("case {case}: probabilities sum to {sum}")
        })?;
        let protos = ps.level(level).unwrap();
        let sims: Vec<f64> = protos.iter_rows().map(|c| cos(&v, c)).collect();
        let raw = (0..sims.len()).fold(0, |best, j| if sims[j] > sims[best] { j } else { best });
        ensure(p.argmax == raw, || {
            format!(
                "case {case}: argmax {} vs raw-similarity argmax {raw}",
                p.argmax
            )
        })?;
        for (a, b) in p.probs.iter().zip(oracle_probs(&v, protos)) {
            ensure((a - b).abs() <= 1e-12, || {
                format!("case {case}: prob {a} vs oracle {b}")
            })?;
        }
    }
    Ok(format!("1000 cases, max |Σp − 1| {worst:.1e}"))
}

fn english() -> TemplateRegistry {
    let mut reg = TemplateRegistry::new();
    reg.register(Template::new("en", default_pattern()).unwrap())
        .unwrap();
    reg
}

fn split(corpus: &[Instance], s: Split) -> Vec<Instance> {
    corpus.iter().filter(|i| i.split == s).cloned().collect()
}

fn scores(
    out: &FitOutcome,
    corpus: &[Instance],
    h: &SenseHierarchy,
    reg: &TemplateRegistry,
    cfg: &TrainConfig,
    s: Split,
    level: usize,
) -> (f64, f64) {
    let part = split(corpus, s);
    let f = prepare_features(&part, reg, h, cfg.label_info, &out.model.tokenizer, None).unwrap();
    let r = evaluate_split(&out.model, &f, &part, h, level).unwrap();
    (r.accuracy, r.macro_f1)
}

struct Trained {
    h: SenseHierarchy,
    out: FitOutcome,
}

fn c5_end_to_end(slot: &mut Option<Trained>) -> Outcome {
    let (h, corpus) = gen_synthetic(&SynthSpec::default(), 42).map_err(|e| e.to_string())?;
    let reg = english();
    let cfg = TrainConfig::synthetic();
    ensure(cfg.max_epochs <= 10, || "more than 10 epochs".into())?;
    let start = Instant::now();
    let out = fit(&cfg, &corpus, &h, &reg, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (acc1, _) = scores(&out, &corpus, &h, &reg, &cfg, Split::Test, 1);
    let (acc2, _) = scores(&out, &corpus, &h, &reg, &cfg, Split::Test, 2);
    let epochs = out.history.len();
    *slot = Some(Trained { h, out });
    ensure(acc1 >= 0.95, || {
        format!("test level-1 accuracy {acc1:.4} < 0.95")
    })?;
    ensure(acc2 >= 0.90, || {
        format!("test level-2 accuracy {acc2:.4} < 0.90")
    })?;
    within(elapsed, 120)?;
    Ok(format!(
        "test acc L1 {acc1:.4}, L2 {acc2:.4}; {epochs} epochs in {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn c6_hierarchy_geometry(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("criterion 5 did not produce a model")?;
    let ps = &t.out.model.prototypes;
    let (l1, l2) = (ps.level(1).unwrap(), ps.level(2).unwrap());
    let mut min_margin = f64::INFINITY;
    for &id in t.h.nodes_at_level(2).unwrap() {
        let n = t.h.node(id).unwrap();
        let parent = t.h.node(n.parent.unwrap()).unwrap().position;
        let c = l2.row(n.position);
        let to_parent = cos(c, l1.row(parent));
        let others: Vec<f64> = (0..l1.rows())
            .filter(|&j| j != parent)
            .map(|j| cos(c, l1.row(j)))
            .collect();
        let mean = others.iter().sum::<f64>() / others.len() as f64;
        min_margin = min_margin.min(to_parent - mean);
        ensure(to_parent > mean, || {
            format!(
                "{}: cos to parent {to_parent:.4} <= mean to others {mean:.4}",
                n.name
            )
        })?;
    }
    Ok(format!("smallest parent margin {min_margin:.4}"))
}

fn c7_ablations() -> Outcome {
    let (h, corpus) = gen_synthetic(&SynthSpec::default(), 42).map_err(|e| e.to_string())?;
    let reg = english();
    let base = TrainConfig::synthetic();
    let variants = [
        ("full", base.clone()),
        (
            "w/o ins_ins",
            TrainConfig {
                ins_ins: false,
                ..base.clone()
            },
        ),
        (
            "w/o pro_pro",
            TrainConfig {
                pro_pro: false,
                ..base.clone()
            },
        ),
        (
            "w/o ins_ins & pro_pro",
            TrainConfig {
                ins_ins: false,
                pro_pro: false,
                ..base.clone()
            },
        ),
        (
            "w/o label information",
            TrainConfig {
                label_info: false,
                ..base.clone()
            },
        ),
    ];
    let mut f1s = Vec::new();
    for (name, cfg) in &variants {
        let out = fit(cfg, &corpus, &h, &reg, None).map_err(|e| format!("{name}: {e}"))?;
        for r in &out.history {
            ensure(cfg.ins_ins || r.ins_ins == 0.0, || {
                format!("{name}: epoch {} ins_ins = {}", r.epoch, r.ins_ins)
            })?;
            ensure(cfg.pro_pro || r.pro_pro == 0.0, || {
                format!("{name}: epoch {} pro_pro = {}", r.epoch, r.pro_pro)
            })?;
        }
        f1s.push((*name, scores(&out, &corpus, &h, &reg, cfg, Split::Dev, 2).1));
    }
    let full = f1s[0].1;
    for &(name, f1) in &f1s[1..4] {
        ensure(full >= f1, || {
            format!("full model dev L2 macro-F1 {full:.4} < {name} {f1:.4}")
        })?;
    }
    Ok(f1s
        .iter()
        .map(|(n, f)| format!("{n} {f:.4}"))
        .collect::<Vec<_>>()
        .join(", "))
}

fn c8_multi_gold() -> Outcome {
    let h = SenseHierarchy::parse("1\tA\t\n1\tB\t\n1\tC\t\n").unwrap();
    let ps = PrototypeSet::from_levels(vec![Matrix::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ])])
    .unwrap();
    let inst = Instance {
        id: "ab".into(),
        arg1: "x".into(),
        arg2: "y".into(),
        sense_paths: vec![
            SensePath::resolve(&h, "A").unwrap(),
            SensePath::resolve(&h, "B").unwrap(),
        ],
        language: "en".into(),
        split: Split::Test,
    };
    for (v, want) in [
        ([1.0, 0.1, 0.0], 1.0),
        ([0.1, 1.0, 0.0], 1.0),
        ([0.0, 0.1, 1.0], 0.0),
    ] {
        let r = evaluate_vectors(&[v.to_vec()], std::slice::from_ref(&inst), &ps, &h, 1).unwrap();
        ensure(r.accuracy == want, || {
            format!("prediction {v:?}: accuracy {} != {want}", r.accuracy)
        })?;
    }

    let (sh, mut corpus) = gen_synthetic(&SynthSpec::default(), 42).unwrap();
    let mut rng = rng(8000);
    let leaves: Vec<SensePath> = sh
        .nodes_at_level(2)
        .unwrap()
        .iter()
        .map(|&n| sh.lineage(n).unwrap())
        .collect();
    for inst in corpus.iter_mut() {
        if !rng.random_bool(0.2) {
            continue;
        }
        let extra = leaves.choose(&mut rng).unwrap().clone();
        if !inst.sense_paths.contains(&extra) {
            inst.sense_paths.push(extra);
        }
    }
    let train = split(&corpus, Split::Train);
    let expected: usize = train.iter().map(|i| i.sense_paths.len()).sum();
    let ex = expand_multilabel(&train);
    ensure(ex.len() == expected, || {
        format!("{} examples, expected {expected}", ex.len())
    })?;
    for e in &ex {
        ensure(train[e.source].sense_paths.contains(&e.path), || {
            "example path not among its instance's senses".into()
        })?;
    }
    Ok(format!(
        "either gold scores correct; {expected} examples from {} instances",
        train.len()
    ))
}

fn c9_metrics() -> Outcome {
    let hand = vec![vec![3, 1], vec![2, 4]];
    let got = macro_f1(&hand).unwrap();
    let oracle = oracle_f1(&hand).iter().sum::<f64>() / 2.0;
    ensure((got - 0.6970).abs() <= 1e-4, || {
        format!("hand matrix macro-F1 {got:.6}")
    })?;
    ensure((got - oracle).abs() <= 1e-12, || {
        format!("{got} vs oracle {oracle}")
    })?;
    let mut rng = rng(9000);
    for _ in 0..50 {
        let m = rng.random_range(1..=12);
        let diag: Vec<Vec<u64>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| if i == j { rng.random_range(1..50) } else { 0 })
                    .collect()
            })
            .collect();
        ensure(macro_f1(&diag).unwrap() == 1.0, || {
            format!("diagonal {diag:?} is not exactly 1")
        })?;
        let conf: Vec<Vec<u64>> = (0..m)
            .map(|_| (0..m).map(|_| rng.random_range(0..6)).collect())
            .collect();
        for (a, b) in per_class_f1(&conf).unwrap().iter().zip(oracle_f1(&conf)) {
            ensure((a - b).abs() <= 1e-12, || {
                format!("per-class F1 {a} vs oracle {b}")
            })?;
        }
    }
    let empty = vec![vec![2, 0, 1], vec![0, 0, 0], vec![1, 0, 3]];
    let f = per_class_f1(&empty).unwrap();
    ensure(f[1] == 0.0, || format!("empty class F1 {}", f[1]))?;
    Ok(format!("hand matrix {got:.4}"))
}

fn c10_diagnostics() -> Outcome {
    let mut rng = rng(10_000);
    for case in 0..30 {
        let h = random_hierarchy(&mut rng);
        let dim = rng.random_range(2..=6);
        let ps = random_prototypes(&mut rng, &h, dim);
        let n = rng.random_range(1..=25);
        let insts: Vec<Instance> = (0..n)
            .map(|i| Instance {
                id: i.to_string(),
                arg1: "a".into(),
                arg2: "b".into(),
                sense_paths: vec![h
                    .lineage(
                        h.nodes_at_level(2).unwrap()[rng.random_range(0..h.level_size(2).unwrap())],
                    )
                    .unwrap()],
                language: "en".into(),
                split: Split::Test,
            })
            .collect();
        let vecs: Vec<Vec<f64>> = (0..n).map(|_| gaussian(&mut rng, dim)).collect();
        let k = rng.random_range(1..=15);
        for (level, hist) in
            [1, 2].map(|l| (l, topk_neighbors(&ps, &vecs, &insts, &h, l, k).unwrap()))
        {
            for row in hist {
                let s: f64 = row.iter().sum();
                ensure((s - k.min(n) as f64).abs() <= 1e-9, || {
                    format!("case {case} level {level}: histogram mass {s} != min({k}, {n})")
                })?;
            }
        }
        // Instances placed exactly on (rescaled copies of) their class prototype.
        let on_proto: Vec<Vec<f64>> = insts
            .iter()
            .map(|i| {
                let row = h.node(i.sense_paths[0].0[1]).unwrap().position;
                ps.level(2)
                    .unwrap()
                    .row(row)
                    .iter()
                    .map(|x| x * 3.0)
                    .collect()
            })
            .collect();
        for d in avg_cos_distance(&ps, &on_proto, &insts, &h, 2)
            .unwrap()
            .into_iter()
            .flatten()
        {
            ensure(d.abs() <= 1e-12, || {
                format!("case {case}: distance {d} on coincident vectors")
            })?;
        }
    }

    let (lender, borrower) = (0, 2);
    let spec = SynthSpec {
        instances_per_leaf: 100,
        overlap: Some(Overlap {
            lender,
            borrower,
            rate: 0.5,
        }),
        ..SynthSpec::default()
    };
    let (h, corpus) = gen_synthetic(&spec, 42).map_err(|e| e.to_string())?;
    let reg = english();
    let cfg = TrainConfig::synthetic();
    let out = fit(&cfg, &corpus, &h, &reg, None).map_err(|e| e.to_string())?;
    let test = split(&corpus, Split::Test);
    let f = prepare_features(&test, &reg, &h, cfg.label_info, &out.model.tokenizer, None).unwrap();
    let vecs = out.model.embed_all(&f).unwrap();
    let rep = analyze(&out.model.prototypes, &vecs, &test, &h, 2, 10).map_err(|e| e.to_string())?;
    let share = rep.neighbor_dist[lender][borrower] / 10.0;
    ensure(share >= 0.2, || {
        format!(
            "{} holds {:.0}% of {}'s top-10 mass",
            rep.class_names[borrower],
            share * 100.0,
            rep.class_names[lender]
        )
    })?;
    Ok(format!(
        "histograms sum to min(k, n); {} carries {:.0}% of {}'s top-10",
        rep.class_names[borrower],
        share * 100.0,
        rep.class_names[lender]
    ))
}

fn c11_alignment() -> Outcome {
    let mut rng = rng(11_000);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let m = rng.random_range(2..=6);
        let dim = rng.random_range(2..=8);
        let src = Matrix::from_rows(&(0..m).map(|_| gaussian(&mut rng, dim)).collect::<Vec<_>>());
        let tgt = Matrix::from_rows(&(0..m).map(|_| gaussian(&mut rng, dim)).collect::<Vec<_>>());
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let corr = ClassCorrespondence::new(1, perm.clone()).unwrap();
        let tau = [0.1, 0.3, 1.0][case % 3];
        let got = alignment_loss(
            &PrototypeSet::from_levels(vec![src.clone()]).unwrap(),
            &PrototypeSet::from_levels(vec![tgt.clone()]).unwrap(),
            &corr,
            tau,
        )
        .unwrap()
        .value;
        let want = oracle_alignment(&src, &tgt, &perm, tau);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, || {
            format!("case {case}: {got} vs oracle {want}")
        })?;
    }

    // Four classes; the target language lists them in another order and its
    // prototypes start on the wrong source classes.
    let names = ["Comparison", "Contingency", "Expansion", "Temporal"];
    let order = [2, 0, 3, 1];
    let src_h = SenseHierarchy::parse(
        &names
            .iter()
            .map(|n| format!("1\t{n}\t\n"))
            .collect::<String>(),
    )
    .unwrap();
    let tgt_h = SenseHierarchy::parse(
        &order
            .iter()
            .map(|&i| format!("1\t{}\t\n", names[i]))
            .collect::<String>(),
    )
    .unwrap();
    let corr = ClassCorrespondence::by_name(&src_h, &tgt_h, 1).map_err(|e| e.to_string())?;
    let dim = 8;
    let s_rows: Vec<Vec<f64>> = (0..4).map(|_| gaussian(&mut rng, dim)).collect();
    let mut t_rows = vec![Vec::new(); 4];
    for c in 0..4 {
        let wrong = &s_rows[(c + 1) % 4];
        t_rows[corr.target_of[c]] = wrong
            .iter()
            .map(|x| x + 0.1 * gaussian(&mut rng, 1)[0])
            .collect();
    }
    let src = PrototypeSet::from_levels(vec![Matrix::from_rows(&s_rows)]).unwrap();
    let tgt = PrototypeSet::from_levels(vec![Matrix::from_rows(&t_rows)]).unwrap();
    let cfg = AlignmentConfig {
        steps: 500,
        ..AlignmentConfig::default()
    };
    let out = align(&src, &tgt, &corr, &cfg).map_err(|e| e.to_string())?;
    ensure(out.source == src, || {
        "target_only changed the source prototypes".into()
    })?;
    let (s, t) = (out.source.level(1).unwrap(), out.target.level(1).unwrap());
    let mut margin = f64::INFINITY;
    for c in 0..4 {
        let own = cos(s.row(c), t.row(corr.target_of[c]));
        for d in (0..4).filter(|&d| d != c) {
            let other = cos(s.row(c), t.row(corr.target_of[d]));
            margin = margin.min(own - other);
            ensure(own > other, || {
                format!(
                    "{}: sim to own {own:.4} <= sim to {} {other:.4}",
                    names[c], names[d]
                )
            })?;
        }
    }
    let both = align(
        &src,
        &tgt,
        &corr,
        &AlignmentConfig {
            update_mode: UpdateMode::Both,
            ..cfg
        },
    )
    .unwrap();
    ensure(both.source != src, || {
        "both mode left the source unchanged".into()
    })?;
    Ok(format!(
        "oracle deviation {worst:.1e}; smallest post-alignment margin {margin:.4}"
    ))
}

fn run_cli(root: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_protoverb"))
        .args(args)
        .current_dir(root)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`protoverb {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn without_duration(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    v.as_object_mut().unwrap().remove("duration_secs");
    v
}

fn c12_reproducibility() -> Outcome {
    let commands: [&[&str]; 5] = [
        &["gen-synth", "--seed", "42", "--out", "syn"],
        &[
            "train",
            "--preset",
            "synthetic",
            "--max-epochs",
            "3",
            "--patience",
            "2",
            "--corpus",
            "syn/corpus.jsonl",
            "--hierarchy",
            "syn/hierarchy.tsv",
            "--templates",
            "syn/templates",
            "--out",
            "ck",
        ],
        &[
            "eval",
            "--checkpoint",
            "ck",
            "--corpus",
            "syn/corpus.jsonl",
            "--level",
            "1",
            "--level",
            "2",
            "--out",
            "ev",
        ],
        &[
            "analyze",
            "--checkpoint",
            "ck",
            "--corpus",
            "syn/corpus.jsonl",
            "--out",
            "an",
        ],
        &[
            "align",
            "--source",
            "ck",
            "--target",
            "ck",
            "--steps",
            "20",
            "--update-mode",
            "both",
            "--out",
            "al",
        ],
    ];
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut compared = 0;
    for cmd in commands {
        for r in &roots {
            run_cli(r.path(), cmd)?;
        }
        let out_dir = cmd.last().unwrap();
        let (a, b) = (roots[0].path().join(out_dir), roots[1].path().join(out_dir));
        let files = files_under(&a);
        ensure(files == files_under(&b), || {
            format!("{}: different file sets", cmd[0])
        })?;
        for f in files {
            let (x, y) = (
                std::fs::read(a.join(&f)).unwrap(),
                std::fs::read(b.join(&f)).unwrap(),
            );
            let same = if f.ends_with("manifest.json") {
                without_duration(&x) == without_duration(&y)
            } else {
                x == y
            };
            ensure(same, || {
                format!("{}: {} differs between runs", cmd[0], f.display())
            })?;
            compared += 1;
        }
    }
    Ok(format!(
        "5 commands, {compared} files identical across runs"
    ))
}

fn main() {
    let mut trained = None;
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let r = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag}  {name}: {detail}");
        results.push((n, name, r));
    };
    run(1, "loss oracle equivalence", &mut c1_loss_oracles);
    run(2, "gradient checks", &mut c2_gradient_checks);
    run(3, "cosine-geometry invariants", &mut c3_cosine_invariants);
    run(4, "prediction contract", &mut c4_prediction_contract);
    run(5, "synthetic end-to-end learning", &mut || {
        c5_end_to_end(&mut trained)
    });
    run(6, "hierarchy geometry", &mut || {
        c6_hierarchy_geometry(trained.as_ref())
    });
    run(7, "ablation machinery", &mut c7_ablations);
    run(8, "multi-gold protocol", &mut c8_multi_gold);
    run(9, "metric correctness", &mut c9_metrics);
    run(10, "diagnostics", &mut c10_diagnostics);
    run(11, "cross-lingual alignment", &mut c11_alignment);
    run(12, "reproducibility", &mut c12_reproducibility);
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
