//! Acceptance suite. Prints one line per criterion.
//!
//! Contract criteria decide the exit status. The desk-scale trend checks
//! (marked `trend`) are printed with their verdict but only decide the exit
//! status when `ACCEPTANCE_STRICT=1`. Positional arguments select criteria by
//! id, e.g. `cargo test -p clipiod --test acceptance -- 1 2 6`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clipiod::dataset::{generate_synthetic, SyntheticConfig};
use clipiod::detector::{
    classify_cosine, detection_loss, DetectorConfig, DetectorState, RoiTarget, TargetLabel,
};
use clipiod::evaluation::{iou, nms, voc07_ap, ApReport, BBox, DetectionResult, GtBox};
use clipiod::miner::{identify, PseudoBox, PseudoStore};
use clipiod::oracle::{EmbeddingVector, StubOracle};
use clipiod::runner::{
    ablate_with, make_oracle, run_experiment, ExperimentData, RunConfig, RunError, StageScores, ABLATION_ROWS,
};
use clipiod::text_space::{accumulate_similarity, finalize_mapping, MappingAccumulator, TextEmbeddingBank};
use clipiod::trainer::Toggles;

struct Outcome {
    id: &'static str,
    trend: bool,
    title: &'static str,
    pass: Option<bool>,
    detail: String,
    elapsed: Duration,
}

fn report(o: &Outcome) {
    let verdict = match o.pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "SKIP",
    };
    let kind = if o.trend { "trend" } else { "" };
    println!("[{verdict}] {:<3} {:<5} {:<38} {:>8.2}s  {}", o.id, kind, o.title, o.elapsed.as_secs_f64(), o.detail);
}

fn timed(id: &'static str, title: &'static str, limit: Option<f64>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (mut pass, mut detail) = f();
    let elapsed = t.elapsed();
    if let Some(l) = limit {
        if elapsed.as_secs_f64() >= l {
            pass = false;
            detail.push_str(&format!("; over the {l:.0}s budget"));
        }
    }
    Outcome { id, trend: false, title, pass: Some(pass), detail, elapsed }
}

// ---------------------------------------------------------------- criterion 1

/// Integer box on a 0..=16 grid, non-degenerate.
fn grid_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.gen_range(0..15);
    let y1 = rng.gen_range(0..15);
    let x2 = rng.gen_range(x1 + 1..=16);
    let y2 = rng.gen_range(y1 + 1..=16);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

fn cells(b: &BBox) -> Vec<(i64, i64)> {
    let mut v = Vec::new();
    for x in b.x1 as i64..b.x2 as i64 {
        for y in b.y1 as i64..b.y2 as i64 {
            v.push((x, y));
        }
    }
    v
}

/// IoU by counting the unit cells each box covers.
fn brute_iou(a: &BBox, b: &BBox) -> f64 {
    let ca = cells(a);
    let cb = cells(b);
    let inter = ca.iter().filter(|c| cb.contains(c)).count();
    let union = ca.len() + cb.len() - inter;
    inter as f64 / union as f64
}

/// Repeatedly take the best remaining box and strike everything it suppresses.
fn brute_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && brute_iou(&boxes[i], &boxes[best]) <= thr);
    }
    keep
}

/// 11-point AP straight from the definition: interpolated precision at each
/// recall level is the best precision over every cut of the ranked list that
/// reaches that recall.
fn brute_ap(dets: &[DetectionResult], gts: &[GtBox], thr: f64) -> f64 {
    let npos = gts.iter().filter(|g| !g.difficult).count();
    if npos == 0 {
        return 0.0;
    }
    let mut ranked: Vec<usize> = (0..dets.len()).collect();
    ranked.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    // true positive or false positive per counted detection
    let mut marks: Vec<bool> = Vec::new();
    for &d in &ranked {
        let mut best = None;
        let mut best_ov = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            if gt.image_id != dets[d].image_id {
                continue;
            }
            let ov = brute_iou(&dets[d].bbox, &gt.bbox);
            if ov > best_ov {
                best_ov = ov;
                best = Some(g);
            }
        }
        match best {
            Some(g) if best_ov > thr => {
                if gts[g].difficult {
                    continue;
                }
                marks.push(!used[g]);
                used[g] = true;
            }
            _ => marks.push(false),
        }
    }
    let mut total = 0.0;
    for level in 0..=10 {
        let t = level as f64 / 10.0;
        let mut best: f64 = 0.0;
        for cut in 1..=marks.len() {
            let tp = marks[..cut].iter().filter(|m| **m).count();
            if tp as f64 / npos as f64 >= t {
                best = best.max(tp as f64 / cut as f64);
            }
        }
        total += best;
    }
    total / 11.0
}

fn criterion_1() -> Outcome {
    timed("1", "geometry and metric oracles", Some(10.0), || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst_ap: f64 = 0.0;
        let mut mismatches = 0;
        for _ in 0..200 {
            let n = rng.gen_range(1..=10);
            let boxes: Vec<BBox> = (0..n).map(|_| grid_box(&mut rng)).collect();
            // coarse scores so ties occur
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
            for a in &boxes {
                for b in &boxes {
                    if iou(a, b).unwrap() != brute_iou(a, b) {
                        mismatches += 1;
                    }
                }
            }
            let thr = [0.0, 0.3, 0.5, 0.7][rng.gen_range(0..4)];
            if nms(&boxes, &scores, thr) != brute_nms(&boxes, &scores, thr) {
                mismatches += 1;
            }

            let classes = rng.gen_range(1..=3);
            for c in 0..classes {
                let images = ["a", "b"];
                let gts: Vec<GtBox> = (0..rng.gen_range(0..=5))
                    .map(|_| GtBox {
                        image_id: images[rng.gen_range(0..2)].into(),
                        bbox: grid_box(&mut rng),
                        difficult: rng.gen_bool(0.15),
                    })
                    .collect();
                let dets: Vec<DetectionResult> = (0..rng.gen_range(0..=10))
                    .map(|_| DetectionResult {
                        image_id: images[rng.gen_range(0..2)].into(),
                        label: format!("c{c}"),
                        score: rng.gen_range(0..8) as f64 / 7.0,
                        bbox: grid_box(&mut rng),
                    })
                    .collect();
                let got = voc07_ap(&dets, &gts, 0.5);
                worst_ap = worst_ap.max((got - brute_ap(&dets, &gts, 0.5)).abs());
            }
        }
        (mismatches == 0 && worst_ap <= 1e-9, format!("iou/nms mismatches {mismatches}, max AP error {worst_ap:.1e}"))
    })
}

// ---------------------------------------------------------------- criterion 2

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).unwrap().0
}

fn criterion_2() -> Outcome {
    timed("2", "cosine head scale and gradients", Some(60.0), || {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let cfg = DetectorConfig { roi_dim: 6, ..DetectorConfig::default() };
        let mut state = DetectorState::new(cfg, d, 3);
        state.logit_scale = 5.0;
        let bank = TextEmbeddingBank {
            names: vec!["a".into(), "b".into(), "c".into()],
            extra_names: vec![],
            rows: (0..3).map(|_| random_unit(&mut rng, d)).collect(),
        };

        let mut flips = 0;
        for _ in 0..1000 {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k = rng.gen_range(0.01..100.0);
            let p = classify_cosine(&EmbeddingVector { values: v.clone(), unit_norm: false }, &bank, &state).unwrap();
            let q = classify_cosine(
                &EmbeddingVector { values: v.iter().map(|x| x * k).collect(), unit_norm: false },
                &bank,
                &state,
            )
            .unwrap();
            if argmax(&p) != argmax(&q) {
                flips += 1;
            }
        }

        let feats: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<RoiTarget> = ["a", "", "c", "b", ""]
            .iter()
            .map(|n| RoiTarget {
                label: if n.is_empty() { TargetLabel::Background } else { TargetLabel::Named(n.to_string()) },
                regression: None,
            })
            .collect();
        let loss = |s: &DetectorState| detection_loss(&feats, &targets, &bank, s).unwrap().0.total();
        let (_, grad) = detection_loss(&feats, &targets, &bank, &state).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let rel = |num: f64, ana: f64| (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
        for i in 0..state.projection.w.len() {
            let mut p = state.clone();
            p.projection.w[i] += h;
            let mut m = state.clone();
            m.projection.w[i] -= h;
            worst = worst.max(rel((loss(&p) - loss(&m)) / (2.0 * h), grad.projection.w[i]));
        }
        for i in 0..state.projection.b.len() {
            let mut p = state.clone();
            p.projection.b[i] += h;
            let mut m = state.clone();
            m.projection.b[i] -= h;
            worst = worst.max(rel((loss(&p) - loss(&m)) / (2.0 * h), grad.projection.b[i]));
        }
        for i in 0..d {
            let mut p = state.clone();
            p.background_embedding[i] += h;
            let mut m = state.clone();
            m.background_embedding[i] -= h;
            worst = worst.max(rel((loss(&p) - loss(&m)) / (2.0 * h), grad.background[i]));
        }
        (flips == 0 && worst < 1e-3, format!("argmax flips {flips}/1000, max relative gradient error {worst:.1e}"))
    })
}

// ---------------------------------------------------------------- criterion 3

/// Best permutation by enumeration; among equal totals the lexicographically
/// smallest column vector.
fn brute_assignment(m: &[Vec<f64>]) -> Vec<usize> {
    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }
    let mut all = perms(m.len());
    all.sort();
    let total = |p: &[usize]| p.iter().enumerate().map(|(r, &c)| m[r][c]).sum::<f64>();
    let best = all.iter().map(|p| total(p)).fold(f64::NEG_INFINITY, f64::max);
    all.into_iter().find(|p| total(p) >= best - 1e-12).unwrap()
}

/// Accumulator whose mean matrix equals `m`: broad rows are unit axes and
/// each observation carries the matrix row in its first five coordinates.
fn accumulator_for(m: &[Vec<f64>]) -> MappingAccumulator {
    let n: Vec<String> = (0..5).map(|i| format!("novel{i}")).collect();
    let b: Vec<String> = (0..5).map(|i| format!("broad{i}")).collect();
    let bank = TextEmbeddingBank {
        names: b.clone(),
        extra_names: vec![],
        rows: (0..5).map(|i| (0..6).map(|k| if k == i { 1.0 } else { 0.0 }).collect()).collect(),
    };
    let mut acc = MappingAccumulator::new(&n, &b);
    for (name, row) in n.iter().zip(m) {
        let sq: f64 = row.iter().map(|x| x * x).sum();
        let mut v = row.clone();
        v.push((1.0 - sq).sqrt());
        accumulate_similarity(&mut acc, name, &EmbeddingVector { values: v, unit_norm: true }, &bank).unwrap();
    }
    acc
}

fn criterion_3() -> Outcome {
    timed("3", "mapping equals exhaustive bijection", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut cases: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.25; 5]; 5]];
        // ties between two optimal assignments
        cases.push(vec![
            vec![0.3, 0.3, 0.0, 0.0, 0.0],
            vec![0.3, 0.3, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.4, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.1, 0.2],
            vec![0.0, 0.0, 0.0, 0.2, 0.1],
        ]);
        while cases.len() < 100 {
            // quantized so some random cases tie as well
            cases.push((0..5).map(|_| (0..5).map(|_| rng.gen_range(-4..=4) as f64 / 10.0).collect()).collect());
        }
        let mut wrong = 0;
        for m in &cases {
            let acc = accumulator_for(m);
            let mapping = finalize_mapping(&acc, 1).unwrap();
            let got: Vec<usize> = mapping
                .pairs
                .iter()
                .map(|(_, b)| b.trim_start_matches("broad").parse::<usize>().unwrap())
                .collect();
            if got != brute_assignment(m) || !mapping.is_bijective() {
                wrong += 1;
            }
        }
        (wrong == 0, format!("{wrong}/{} cases differ", cases.len()))
    })
}

// ---------------------------------------------------------------- criterion 4

fn nms_invariant_holds(store: &PseudoStore) -> bool {
    store.iter().all(|(_, list)| {
        list.iter().enumerate().all(|(i, a)| {
            list[i + 1..].iter().all(|b| a.label != b.label || a.bbox.iou(&b.bbox) <= store.nms_iou)
        })
    })
}

fn criterion_4() -> Outcome {
    timed("4", "pseudo-store contract", Some(10.0), || {
        let cfg = RunConfig::synthetic("/unused", "/unused");
        let oracle = StubOracle::new(&cfg.oracle);
        let miner = clipiod::miner::MinerConfig { tr: 0.15, ..cfg.miner.clone() };
        let label_space: Vec<String> = ["square", "triangle", "circle"].map(String::from).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let images: Vec<image::RgbImage> = (0..4)
            .map(|_| image::RgbImage::from_fn(64, 64, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()])))
            .collect();
        let rand_box = |rng: &mut ChaCha8Rng| {
            let x1 = rng.gen_range(0.0..48.0);
            let y1 = rng.gen_range(0.0..48.0);
            BBox::new(x1, y1, x1 + rng.gen_range(6.0..16.0), y1 + rng.gen_range(6.0..16.0))
        };
        let mut store = PseudoStore::new(0.5);
        let (mut identified, mut committed) = (0, 0);
        let mut ok = true;
        for op in 0..500u64 {
            let img = rng.gen_range(0..images.len());
            let id = format!("img{img}");
            let boxes: Vec<PseudoBox> = if rng.gen_bool(0.3) {
                let subset: Vec<BBox> = (0..rng.gen_range(1..4)).map(|_| rand_box(&mut rng)).collect();
                identified += 1;
                identify(&subset, &images[img], &cfg.broad_names, &label_space, &oracle, &cfg.oracle, &cfg.template, &miner, op)
                    .unwrap()
            } else {
                (0..rng.gen_range(0..4))
                    .map(|_| PseudoBox {
                        bbox: rand_box(&mut rng),
                        label: cfg.broad_names[rng.gen_range(0..cfg.broad_names.len())].clone(),
                        score: rng.gen_range(0..10) as f64 / 10.0,
                        source_iteration: op,
                    })
                    .collect()
            };
            committed += boxes.len();
            store.commit(&id, boxes.clone());
            ok &= nms_invariant_holds(&store);
            let before = store.clone();
            store.commit(&id, boxes);
            ok &= store == before;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.tsv");
        store.persist(&path).unwrap();
        let back = PseudoStore::load(&path).unwrap();
        let round = back.to_text().unwrap() == store.to_text().unwrap() && back.len() == store.len();
        (
            ok && round,
            format!(
                "{identified} identify calls, {committed} boxes committed, {} kept; invariant and idempotence {}, round trip {}",
                store.iter().map(|(_, v)| v.len()).sum::<usize>(),
                if ok { "hold" } else { "broken" },
                if round { "exact" } else { "differs" }
            ),
        )
    })
}

// ---------------------------------------------------------------- runs

struct Runs {
    data: BTreeMap<u64, ExperimentData>,
    cache: BTreeMap<(u64, String), (ApReport, ApReport, Duration)>,
}

impl Runs {
    fn config(seed: u64, toggles: Toggles) -> RunConfig {
        let mut cfg = RunConfig::synthetic("/unused", "/unused");
        cfg.seed = seed;
        cfg.toggles = toggles;
        cfg.normalize();
        cfg
    }

    fn data(&mut self, seed: u64) -> Result<&ExperimentData, RunError> {
        if !self.data.contains_key(&seed) {
            let cfg = Self::config(seed, Toggles::FULL);
            let syn = SyntheticConfig { seed, ..cfg.synthetic.clone().expect("synthetic config") };
            let ds = generate_synthetic(&syn)?;
            self.data.insert(seed, ExperimentData::from_views(ds.trainval, ds.test, &cfg)?);
        }
        Ok(&self.data[&seed])
    }

    fn fresh(&mut self, seed: u64, toggles: Toggles) -> Result<(ApReport, ApReport, Duration), RunError> {
        let cfg = Self::config(seed, toggles);
        let oracle = make_oracle(&cfg)?;
        let data = self.data(seed)?;
        let t = Instant::now();
        let out = run_experiment(&cfg, data, oracle.as_ref())?;
        Ok((out.report_t1, out.report_t2, t.elapsed()))
    }

    fn get(&mut self, seed: u64, toggles: Toggles) -> Result<(ApReport, ApReport, Duration), RunError> {
        let key = (seed, toggles.label());
        if let Some(r) = self.cache.get(&key) {
            return Ok(r.clone());
        }
        let r = self.fresh(seed, toggles)?;
        self.cache.insert(key, r.clone());
        Ok(r)
    }
}

const SEEDS: [u64; 3] = [7, 8, 9];

fn failed_run(id: &'static str, title: &'static str, e: RunError) -> Outcome {
    Outcome { id, trend: false, title, pass: Some(false), detail: format!("run failed: {} {e}", e.tag()), elapsed: Duration::ZERO }
}

fn criterion_5(runs: &mut Runs) -> Outcome {
    let title = "two runs give identical reports";
    let t = Instant::now();
    let first = match runs.get(SEEDS[0], Toggles::FULL) {
        Ok(r) => r,
        Err(e) => return failed_run("5", title, e),
    };
    let second = match runs.fresh(SEEDS[0], Toggles::FULL) {
        Ok(r) => r,
        Err(e) => return failed_run("5", title, e),
    };
    let same = |a: &ApReport, b: &ApReport| a.to_jsonl() == b.to_jsonl() && a.to_table() == b.to_table() && a == b;
    let pass = same(&first.0, &second.0) && same(&first.1, &second.1);
    Outcome {
        id: "5",
        trend: false,
        title,
        pass: Some(pass),
        detail: format!("seed {}, T1 and T2 reports {}", SEEDS[0], if pass { "byte-identical" } else { "differ" }),
        elapsed: t.elapsed(),
    }
}

fn criterion_6(runs: &mut Runs) -> Vec<Outcome> {
    let mut full = Vec::new();
    let mut none = Vec::new();
    let mut compute = Duration::ZERO;
    for seed in SEEDS {
        for (toggles, into) in [(Toggles::FULL, &mut full), (Toggles::NONE, &mut none)] {
            match runs.get(seed, toggles) {
                Ok((t1, t2, d)) => {
                    compute += d;
                    into.push((StageScores::of(&t1), StageScores::of(&t2)));
                }
                Err(e) => return vec![failed_run("6", "method direction", e)],
            }
        }
    }
    let mean = |v: &[(StageScores, StageScores)], f: fn(&(StageScores, StageScores)) -> f64| {
        v.iter().map(f).sum::<f64>() / v.len() as f64
    };
    let list = |v: &[(StageScores, StageScores)], f: fn(&(StageScores, StageScores)) -> f64| {
        v.iter().map(|x| format!("{:.1}", f(x))).collect::<Vec<_>>().join("/")
    };
    let within_budget = compute.as_secs_f64() < 600.0;
    let budget = format!("; 6 runs took {:.0}s of 600s", compute.as_secs_f64());

    let a_pass = full.iter().all(|r| r.0.novel > 0.0) && none.iter().all(|r| r.0.novel == 0.0);
    let a = Outcome {
        id: "6a",
        trend: false,
        title: "T1 novel mAP from mining and text",
        pass: Some(a_pass && within_budget),
        detail: format!("full {} vs all off {}{budget}", list(&full, |r| r.0.novel), list(&none, |r| r.0.novel)),
        elapsed: compute,
    };
    let (fn_, nn) = (mean(&full, |r| r.1.novel), mean(&none, |r| r.1.novel));
    let b = Outcome {
        id: "6b",
        trend: true,
        title: "T2 novel gain over distill-only",
        pass: Some(fn_ - nn >= 5.0 && within_budget),
        detail: format!(
            "mean {fn_:.2} vs {nn:.2} (gain {:+.2}, need >= +5); per seed {} vs {}",
            fn_ - nn,
            list(&full, |r| r.1.novel),
            list(&none, |r| r.1.novel)
        ),
        elapsed: Duration::ZERO,
    };
    let (fb, nb) = (mean(&full, |r| r.1.base), mean(&none, |r| r.1.base));
    let c = Outcome {
        id: "6c",
        trend: true,
        title: "T2 base kept vs distill-only",
        pass: Some((fb - nb).abs() <= 3.0 && within_budget),
        detail: format!(
            "mean {fb:.2} vs {nb:.2} (diff {:+.2}, need within 3); per seed {} vs {}",
            fb - nb,
            list(&full, |r| r.1.base),
            list(&none, |r| r.1.base)
        ),
        elapsed: Duration::ZERO,
    };
    vec![a, b, c]
}

fn criterion_7(runs: &mut Runs) -> Vec<Outcome> {
    let title = "ablation table shape";
    let t = Instant::now();
    let seed = SEEDS[0];
    let base = Runs::config(seed, Toggles::FULL);
    let vary: Vec<String> = ["text", "broad", "image"].map(String::from).to_vec();
    let cell = std::cell::RefCell::new(&mut *runs);
    // ablate_with wants a Sync closure; one thread drives it, so the cache is
    // reached through a mutex.
    let lock = std::sync::Mutex::new(cell);
    let exec = |c: &RunConfig| -> Result<(ApReport, ApReport), RunError> {
        let guard = lock.lock().expect("runs lock");
        let mut runs = guard.borrow_mut();
        let (a, b, _) = runs.get(c.seed, c.toggles)?;
        Ok((a, b))
    };
    let table = match ablate_with(&base, &vary, 1, &exec) {
        Ok(t) => t,
        Err(e) => return vec![failed_run("7", title, e)],
    };
    let shape = table.rows.len() == 4
        && table.rows.iter().zip(ABLATION_ROWS).all(|(r, t)| r.toggles == t)
        && table.to_csv().lines().skip(1).all(|l| l.split(',').count() == 9)
        && table.to_table().lines().count() == 6;
    let text_only = Toggles { text: true, broad: false, image: false };
    let full = table.row(Toggles::FULL).map(|r| r.t2.novel).unwrap_or(f64::NAN);
    let text = table.row(text_only).map(|r| r.t2.novel).unwrap_or(f64::NAN);
    vec![
        Outcome {
            id: "7a",
            trend: false,
            title,
            pass: Some(shape),
            detail: format!("4 rows x T1,T2 x base,novel,all {}", if shape { "present" } else { "malformed" }),
            elapsed: t.elapsed(),
        },
        Outcome {
            id: "7b",
            trend: true,
            title: "full row beats text-only on T2 novel",
            pass: Some(full > text),
            detail: format!("seed {seed} T2 novel full {full:.2} vs text-only {text:.2}"),
            elapsed: Duration::ZERO,
        },
    ]
}

fn main() -> ExitCode {
    // the default libtest flags are accepted and ignored
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| f == id);
    let t = Instant::now();
    let mut outcomes = Vec::new();
    let push = |o: Outcome, outcomes: &mut Vec<Outcome>| {
        report(&o);
        outcomes.push(o);
    };
    if wanted("1") {
        push(criterion_1(), &mut outcomes);
    }
    if wanted("2") {
        push(criterion_2(), &mut outcomes);
    }
    if wanted("3") {
        push(criterion_3(), &mut outcomes);
    }
    if wanted("4") {
        push(criterion_4(), &mut outcomes);
    }
    let mut runs = Runs { data: BTreeMap::new(), cache: BTreeMap::new() };
    if wanted("5") {
        push(criterion_5(&mut runs), &mut outcomes);
    }
    if wanted("6") {
        for o in criterion_6(&mut runs) {
            push(o, &mut outcomes);
        }
    }
    if wanted("7") {
        for o in criterion_7(&mut runs) {
            push(o, &mut outcomes);
        }
    }
    if wanted("8") {
        push(
            Outcome {
                id: "8",
                trend: false,
                title: "full-scale VOC reproduction",
                pass: None,
                detail: "needs a GPU, VOC2007 and the clip feature; see scripts/reproduce_voc.sh".into(),
                elapsed: Duration::ZERO,
            },
            &mut outcomes,
        );
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| o.pass == Some(false)).collect();
    let blocking = failed.iter().filter(|o| strict || !o.trend).count();
    println!(
        "acceptance: {} passed, {} failed ({} trend), {} skipped in {:.0}s",
        outcomes.iter().filter(|o| o.pass == Some(true)).count(),
        failed.len(),
        failed.iter().filter(|o| o.trend).count(),
        outcomes.iter().filter(|o| o.pass.is_none()).count(),
        t.elapsed().as_secs_f64()
    );
    if blocking == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
