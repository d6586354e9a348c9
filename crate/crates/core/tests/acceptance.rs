//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dhd::augment::{deformation_suite, TransformGroup};
use dhd::codes::{cosine, hamming, hamming_from_cosine, quantize, BinaryCode};
use dhd::experiment::{
    bit_statistics, deformed_map, hamming_shift, load_data, retrieval_map, run_encode, run_eval,
    run_gen_data, run_train, train_model, ExperimentConfig, Splits, Variant,
};
use dhd::losses::{
    bceq_loss, hp_loss, normalize_multilabel, proxy_bceq_loss, proxy_predictions, sdh_loss,
    LossWeights, ProxyBank,
};
use dhd::model::{EncoderConfig, HashModel};
use dhd::retrieval::{build_index, evaluate, RetrievalIndex};
use dhd::trainer::{batch_objective, TrainView, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type R<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Step of the fourth-order central difference used throughout.
const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;
/// Inputs this close to a kink are redrawn: ReLU and the sign label at 0, and
/// the likelihood clamp just inside ±1.
const KINK_MARGIN: f64 = 1e-3;

fn clear_of_kinks(h: f64) -> bool {
    h.abs() > KINK_MARGIN && 1.0 - h.abs() > KINK_MARGIN
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn desk_config() -> R<ExperimentConfig> {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    Ok(ExperimentConfig::load(&p)?)
}

fn random_signs(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..k)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

fn random_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` given `f` at offsets `[-2h, -h, h, 2h]`.
fn stencil(at: impl Fn(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            stencil(|d| {
                let mut p = x.to_vec();
                p[i] += d;
                f(&p)
            })
        })
        .collect()
}

fn max_rel(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------

fn identity_criterion() -> R<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for k in [8usize, 16, 32, 64] {
        for _ in 0..10_000 {
            let a = random_signs(k, &mut rng);
            let b = random_signs(k, &mut rng);
            let h = f64::from(hamming(&quantize(&a)?, &quantize(&b)?)?);
            let via_cos = k as f64 / 2.0 * (1.0 - cosine(&a, &b)?);
            worst = worst
                .max((h - via_cos).abs())
                .max((h - hamming_from_cosine(cosine(&a, &b)?, k)).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst < 1e-9 && secs < 1.0,
        format!("max |hamming - K/2(1-cos)| = {worst:.2e} over 4x10^4 pairs in {secs:.3}s"),
    ))
}

// ---------------------------------------------------------------------------

fn sdh_instances(rng: &mut ChaCha8Rng) -> R<f64> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=64);
        let h_t = random_vec(k, -1.0, 1.0, rng);
        let h_s = random_vec(k, -1.0, 1.0, rng);
        let (_, g) = sdh_loss(&h_t, &h_s)?;
        let fd = central_diff(|x| sdh_loss(&h_t, x).unwrap().0, &h_s);
        worst = worst.max(max_rel(&g.student, &fd));
    }
    Ok(worst)
}

fn hp_instances(rng: &mut ChaCha8Rng) -> R<f64> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = rng.random_range(2..=20);
        let mut y: Vec<u8> = (0..c).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let first = rng.random_range(0..c);
        y[first] = 1;
        let y = normalize_multilabel(&y)?;
        let pred = random_vec(c, -1.0, 1.0, rng);
        let tau = rng.random_range(0.1..1.0);
        let (_, g) = hp_loss(&y, &pred, tau)?;
        let fd = central_diff(|x| hp_loss(&y, x, tau).unwrap().0, &pred);
        worst = worst.max(max_rel(&g, &fd));
    }
    Ok(worst)
}

fn bceq_instances(rng: &mut ChaCha8Rng) -> R<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut redrawn = 0;
    for _ in 0..100 {
        let k = rng.random_range(2..=64);
        let h = loop {
            let h = random_vec(k, -1.0, 1.0, rng);
            if h.iter().all(|v| clear_of_kinks(*v)) {
                break h;
            }
            redrawn += 1;
        };
        let sigma = rng.random_range(0.4..1.0);
        let (_, g) = bceq_loss(&h, sigma)?;
        let fd = central_diff(|x| bceq_loss(x, sigma).unwrap().0, &h);
        worst = worst.max(max_rel(&g, &fd));
    }
    Ok((worst, redrawn))
}

/// Objective with the teacher codes of the SdH term held fixed at `frozen`.
fn frozen_objective(
    model: &HashModel,
    proxies: &ProxyBank,
    views: &[TrainView],
    frozen: &[Vec<f64>],
    w: &LossWeights,
) -> f64 {
    let n = views.len() as f64;
    let mut total = 0.0;
    for (v, t) in views.iter().zip(frozen) {
        let h_t = model.encode(&v.teacher).unwrap();
        let preds = proxy_predictions(proxies, &h_t).unwrap();
        let hp = hp_loss(&v.label, &preds, w.tau).unwrap().0;
        let bceq = bceq_loss(&h_t, w.sigma).unwrap().0;
        let h_s = model.encode(v.student.as_ref().unwrap()).unwrap();
        let sdh = sdh_loss(t, &h_s).unwrap().0;
        total += (hp + w.lambda1 * sdh + w.lambda2 * bceq) / n;
    }
    total + w.lambda2 * proxy_bceq_loss(proxies, w.sigma).unwrap().0
}

fn near_kink(model: &HashModel, proxies: &ProxyBank, views: &[TrainView]) -> bool {
    let first = &model.layers()[0];
    let pre_act_near_zero = |x: &[f64]| {
        first
            .weight
            .chunks_exact(first.in_dim)
            .zip(&first.bias)
            .any(|(row, b)| {
                (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b).abs() < KINK_MARGIN
            })
    };
    views.iter().any(|v| {
        pre_act_near_zero(&v.teacher)
            || pre_act_near_zero(v.student.as_ref().unwrap())
            || !model
                .encode(&v.teacher)
                .unwrap()
                .iter()
                .all(|h| clear_of_kinks(*h))
    }) || !proxies.as_slice().iter().all(|p| clear_of_kinks(*p))
}

fn model_instances(rng: &mut ChaCha8Rng) -> R<(f64, usize)> {
    let w = LossWeights::default();
    let (dim, k, classes) = (6, 8, 3);
    let config = EncoderConfig {
        input_dim: dim,
        hidden_dims: vec![16],
        code_length: k,
    };
    let mut worst = 0.0f64;
    let mut redrawn = 0;
    for _ in 0..100 {
        let (model, proxies, views) = loop {
            let model = HashModel::new(config.clone(), rng)?;
            let proxies = ProxyBank::random(classes, k, rng);
            let views: Vec<TrainView> = (0..2)
                .map(|_| {
                    let mut y = vec![0u8; classes];
                    y[rng.random_range(0..classes)] = 1;
                    TrainView {
                        teacher: random_vec(dim, -2.0, 2.0, rng),
                        student: Some(random_vec(dim, -2.0, 2.0, rng)),
                        label: normalize_multilabel(&y).unwrap(),
                    }
                })
                .collect();
            if !near_kink(&model, &proxies, &views) {
                break (model, proxies, views);
            }
            redrawn += 1;
        };
        let frozen: Vec<Vec<f64>> = views
            .iter()
            .map(|v| model.encode(&v.teacher).unwrap())
            .collect();
        let (bundle, grads) = batch_objective(&model, &proxies, &views, &w)?;
        let at_origin = frozen_objective(&model, &proxies, &views, &frozen, &w);
        worst = worst.max((bundle.total - at_origin).abs());

        for t in 0..grads.model.tensors.len() {
            for i in 0..grads.model.tensors[t].len() {
                let orig = model.tensors()[t][i];
                let fd = stencil(|d| {
                    let mut moved = model.clone();
                    moved.tensors_mut()[t][i] = orig + d;
                    frozen_objective(&moved, &proxies, &views, &frozen, &w)
                });
                worst = worst.max(rel_err(grads.model.tensors[t][i], fd));
            }
        }
        for i in 0..grads.proxies.len() {
            let orig = proxies.as_slice()[i];
            let fd = stencil(|d| {
                let mut moved = proxies.clone();
                moved.as_mut_slice()[i] = orig + d;
                frozen_objective(&model, &moved, &views, &frozen, &w)
            });
            worst = worst.max(rel_err(grads.proxies[i], fd));
        }
    }
    Ok((worst, redrawn))
}

fn gradient_criterion() -> R<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let sdh = sdh_instances(&mut rng)?;
    let hp = hp_instances(&mut rng)?;
    let (bceq, bceq_redrawn) = bceq_instances(&mut rng)?;
    let (model, model_redrawn) = model_instances(&mut rng)?;
    let secs = start.elapsed().as_secs_f64();
    let pass = [sdh, hp, bceq, model].iter().all(|e| *e < FD_TOL) && secs < 30.0;
    Ok(verdict(
        pass,
        format!(
            "max rel err sdh {sdh:.1e}, hp {hp:.1e}, bceq {bceq:.1e}, model+loss {model:.1e} \
             (100 each; {bceq_redrawn}+{model_redrawn} kink redraws) in {secs:.1}s"
        ),
    ))
}

// ---------------------------------------------------------------------------

fn naive_hamming(a: &[f64], b: &[f64]) -> u32 {
    let mut d = 0;
    for i in 0..a.len() {
        if (a[i] >= 0.0) != (b[i] >= 0.0) {
            d += 1;
        }
    }
    d
}

fn random_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    (0..n)
        .map(|_| {
            let mut l: Vec<u8> = (0..classes)
                .map(|_| u8::from(rng.random_bool(0.15)))
                .collect();
            if rng.random_bool(0.8) {
                l[rng.random_range(0..classes)] = 1;
            }
            l
        })
        .collect()
}

struct BruteReport {
    map: f64,
    precision: Vec<f64>,
    recall: Vec<f64>,
    p_at: Vec<f64>,
}

/// Straightforward evaluator: full sort per query, explicit loops per radius.
fn brute_evaluate(
    db: &[Vec<f64>],
    db_labels: &[Vec<u8>],
    queries: &[Vec<f64>],
    q_labels: &[Vec<u8>],
    m: usize,
    ranks: &[usize],
) -> BruteReport {
    let k = db[0].len();
    let relevant = |a: &[u8], b: &[u8]| a.iter().zip(b).any(|(x, y)| *x == 1 && *y == 1);
    let mut ap_sum = 0.0;
    let mut p_sum = vec![0.0; k + 1];
    let mut p_count = vec![0usize; k + 1];
    let mut r_sum = vec![0.0; k + 1];
    let mut r_count = vec![0usize; k + 1];
    let mut p_at = vec![0.0; ranks.len()];
    for (q, ql) in queries.iter().zip(q_labels) {
        let mut items: Vec<(u32, usize)> = db
            .iter()
            .enumerate()
            .map(|(i, d)| (naive_hamming(q, d), i))
            .collect();
        items.sort();
        let rel: Vec<bool> = items
            .iter()
            .map(|(_, i)| relevant(ql, &db_labels[*i]))
            .collect();

        let (mut hits, mut acc) = (0.0, 0.0);
        for (pos, r) in rel.iter().take(m).enumerate() {
            if *r {
                hits += 1.0;
                acc += hits / (pos + 1) as f64;
            }
        }
        ap_sum += if hits > 0.0 { acc / hits } else { 0.0 };

        let total_rel = rel.iter().filter(|r| **r).count();
        for radius in 0..=k {
            let inside: Vec<bool> = items
                .iter()
                .zip(&rel)
                .filter(|((d, _), _)| *d as usize <= radius)
                .map(|(_, r)| *r)
                .collect();
            let got = inside.iter().filter(|r| **r).count();
            if !inside.is_empty() {
                p_sum[radius] += got as f64 / inside.len() as f64;
                p_count[radius] += 1;
            }
            if total_rel > 0 {
                r_sum[radius] += got as f64 / total_rel as f64;
                r_count[radius] += 1;
            }
        }
        for (j, &r) in ranks.iter().enumerate() {
            let n = r.min(rel.len());
            if n > 0 {
                p_at[j] += rel[..n].iter().filter(|x| **x).count() as f64 / n as f64;
            }
        }
    }
    let nq = queries.len() as f64;
    let avg = |s: &[f64], c: &[usize]| -> Vec<f64> {
        s.iter()
            .zip(c)
            .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
            .collect()
    };
    BruteReport {
        map: ap_sum / nq,
        precision: avg(&p_sum, &p_count),
        recall: avg(&r_sum, &r_count),
        p_at: p_at.iter().map(|v| v / nq).collect(),
    }
}

fn oracle_criterion() -> R<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);

    let mut packed_mismatch = 0;
    for _ in 0..10_000 {
        let k = rng.random_range(1..=128);
        let a = random_vec(k, -1.0, 1.0, &mut rng);
        let b = random_vec(k, -1.0, 1.0, &mut rng);
        if hamming(&quantize(&a)?, &quantize(&b)?)? != naive_hamming(&a, &b) {
            packed_mismatch += 1;
        }
    }

    let mut rank_mismatch = 0;
    let k = 16;
    let db: Vec<Vec<f64>> = (0..100).map(|_| random_signs(k, &mut rng)).collect();
    let index = build_index(
        db.iter().map(|c| BinaryCode::from_signs(c)).collect(),
        vec![vec![1u8]; db.len()],
    )?;
    for _ in 0..100 {
        let q = random_signs(k, &mut rng);
        let got = index.rank(&BinaryCode::from_signs(&q), db.len())?;
        let mut want: Vec<(u32, usize)> = db
            .iter()
            .enumerate()
            .map(|(i, d)| (naive_hamming(&q, d), i))
            .collect();
        want.sort();
        let want: Vec<(usize, u32)> = want.into_iter().map(|(d, i)| (i, d)).collect();
        if got != want {
            rank_mismatch += 1;
        }
    }

    let mut worst = 0.0f64;
    let ranks = [1usize, 5, 20, 100, 200, 500];
    for _ in 0..20 {
        let k = [8usize, 12, 16, 32][rng.random_range(0..4)];
        let classes = rng.random_range(3..8);
        let db: Vec<Vec<f64>> = (0..200).map(|_| random_signs(k, &mut rng)).collect();
        let qs: Vec<Vec<f64>> = (0..50).map(|_| random_signs(k, &mut rng)).collect();
        let db_labels = random_labels(200, classes, &mut rng);
        let q_labels = random_labels(50, classes, &mut rng);
        let m = rng.random_range(1..=200);
        let index: RetrievalIndex = build_index(
            db.iter().map(|c| BinaryCode::from_signs(c)).collect(),
            db_labels.clone(),
        )?;
        let q_codes: Vec<BinaryCode> = qs.iter().map(|c| BinaryCode::from_signs(c)).collect();
        let got = evaluate(&index, &q_codes, &q_labels, m, &ranks)?;
        let want = brute_evaluate(&db, &db_labels, &qs, &q_labels, m, &ranks);
        worst = worst.max((got.map_at_m - want.map).abs());
        for (pt, (p, r)) in got
            .pr_curve
            .iter()
            .zip(want.precision.iter().zip(&want.recall))
        {
            worst = worst
                .max((pt.precision - p).abs())
                .max((pt.recall - r).abs());
        }
        for ((_, a), b) in got.p_at_top.iter().zip(&want.p_at) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(verdict(
        packed_mismatch == 0 && rank_mismatch == 0 && worst < 1e-12,
        format!(
            "packed vs naive {packed_mismatch}/10^4 mismatches, rank vs sort {rank_mismatch}/100, \
             evaluator max diff {worst:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------------------

fn with_output(cfg: &ExperimentConfig, dir: &Path) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.output_dir = dir.to_path_buf();
    c
}

fn run_pipeline(cfg: &ExperimentConfig) -> R<f64> {
    run_gen_data(cfg)?;
    run_train(cfg, false)?;
    run_encode(cfg)?;
    Ok(run_eval(cfg)?.map_at_m)
}

/// mAP@m when every item is replaced by its nearest training-class mean and
/// items predicted in the query's class are ranked first.
fn nearest_centroid_map(splits: &Splits, m: usize) -> f64 {
    let dim = splits.input_dim();
    let mut sums = vec![vec![0.0; dim]; splits.n_classes];
    let mut counts = vec![0usize; splits.n_classes];
    for s in &splits.train {
        let c = s.label.iter().position(|v| *v == 1).unwrap();
        counts[c] += 1;
        for (a, x) in sums[c].iter_mut().zip(&s.features) {
            *a += x;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, n)| s.iter().map(|v| v / *n as f64).collect())
        .collect();
    let classify = |x: &[f64]| -> usize {
        let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..means.len())
            .min_by(|a, b| dist(&means[*a]).total_cmp(&dist(&means[*b])))
            .unwrap()
    };
    let db_pred: Vec<usize> = splits
        .database
        .iter()
        .map(|s| classify(&s.features))
        .collect();
    let mut ap_sum = 0.0;
    for q in &splits.query {
        let qp = classify(&q.features);
        let mut order: Vec<(u8, usize)> = db_pred
            .iter()
            .enumerate()
            .map(|(i, p)| (u8::from(*p != qp), i))
            .collect();
        order.sort();
        let (mut hits, mut acc) = (0.0, 0.0);
        for (pos, (_, i)) in order.iter().take(m).enumerate() {
            if q.label
                .iter()
                .zip(&splits.database[*i].label)
                .any(|(a, b)| *a == 1 && *b == 1)
            {
                hits += 1.0;
                acc += hits / (pos + 1) as f64;
            }
        }
        ap_sum += if hits > 0.0 { acc / hits } else { 0.0 };
    }
    ap_sum / splits.query.len() as f64
}

fn end_to_end_criterion(cfg: &ExperimentConfig, out: &Path) -> R<Verdict> {
    let splits = load_data(cfg)?;
    let oracle = nearest_centroid_map(&splits, cfg.eval.m);
    if oracle < 0.99 {
        return Ok(verdict(
            false,
            format!("nearest-centroid oracle mAP@100 {oracle:.4} < 0.99"),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let start = Instant::now();
    let map = pool.install(|| run_pipeline(&with_output(cfg, out)))?;
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        map >= 0.95,
        format!("mAP@100 {map:.4} (oracle {oracle:.4}), single-threaded pipeline {secs:.1}s"),
    ))
}

fn artifact_files(root: &Path) -> R<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.file_name().unwrap().to_string_lossy();
            // The frozen config records the output path; timings are wall clock.
            if name == "resolved_config.toml" || name == "train_timing.csv" {
                continue;
            }
            out.insert(p.strip_prefix(root)?.to_path_buf(), std::fs::read(&p)?);
        }
    }
    Ok(out)
}

fn determinism_criterion(
    cfg: &ExperimentConfig,
    single_threaded: &Path,
    scratch: &Path,
) -> R<Verdict> {
    let a = scratch.join("a");
    let b = scratch.join("b");
    run_pipeline(&with_output(cfg, &a))?;
    run_pipeline(&with_output(cfg, &b))?;
    let fa = artifact_files(&a)?;
    let fb = artifact_files(&b)?;
    let fs = artifact_files(single_threaded)?;
    let required = [
        "codes/database.dhdc",
        "codes/query.dhdc",
        "eval/report.json",
        "train_metrics.csv",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|r| !fa.contains_key(Path::new(r)))
        .collect();
    let same = fa == fb;
    let same_across_threads = fa == fs;
    Ok(verdict(
        missing.is_empty() && same && same_across_threads,
        format!(
            "{} files compared; repeat run identical: {same}; identical to single-threaded run: \
             {same_across_threads}{}",
            fa.len(),
            if missing.is_empty() {
                String::new()
            } else {
                format!("; missing {missing:?}")
            }
        ),
    ))
}

// ---------------------------------------------------------------------------

struct Trained {
    sdh: Vec<Trainer>,
    strong: Vec<Trainer>,
    no_bceq: Vec<Trainer>,
}

fn train_variants(cfg: &ExperimentConfig, splits: &Splits) -> R<Trained> {
    let base = cfg.train_config(splits.input_dim(), splits.n_classes);
    let jobs: Vec<(Variant, u64)> = [Variant::HpSdhBceq, Variant::HpStrong, Variant::HpSdh]
        .iter()
        .flat_map(|v| SEEDS.iter().map(move |s| (*v, *s)))
        .collect();
    let mut trained = jobs
        .par_iter()
        .map(|(v, s)| {
            let mut tc = v.apply(&base);
            tc.seed = *s;
            train_model(tc, &splits.train).map(|t| (*v, t))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut take = |v: Variant| -> Vec<Trainer> {
        let (keep, rest): (Vec<_>, Vec<_>) = trained.drain(..).partition(|(x, _)| *x == v);
        trained = rest;
        keep.into_iter().map(|(_, t)| t).collect()
    };
    Ok(Trained {
        sdh: take(Variant::HpSdhBceq),
        strong: take(Variant::HpStrong),
        no_bceq: take(Variant::HpSdh),
    })
}

fn mean_over(models: &[Trainer], f: impl Fn(&Trainer) -> R<f64> + Sync + Send) -> R<f64> {
    let vals = models.par_iter().map(f).collect::<R<Vec<f64>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn sdh_map_criterion(t: &Trained, splits: &Splits, m: usize) -> R<Verdict> {
    let map = |tr: &Trainer| {
        Ok(retrieval_map(
            &tr.model,
            &splits.database,
            &splits.query,
            m,
        )?)
    };
    let with = mean_over(&t.sdh, map)?;
    let without = mean_over(&t.strong, map)?;
    Ok(verdict(
        with > without,
        format!("mAP@100 with SdH {with:.5} vs single strong view {without:.5}"),
    ))
}

fn shift_criterion(t: &Trained, cfg: &ExperimentConfig, splits: &Splits) -> R<Verdict> {
    let family = TransformGroup::new(cfg.train.transforms.clone(), 1.0)?;
    let mut rows = Vec::new();
    let mut pass = true;
    for s in [0.2, 0.4, 0.6, 0.8, 1.0] {
        let g = family.with_scale(s);
        let shift = |tr: &Trainer| Ok(hamming_shift(&tr.model, &splits.query, &g, cfg.seed)?);
        let with = mean_over(&t.sdh, shift)?;
        let without = mean_over(&t.strong, shift)?;
        pass &= with < without;
        rows.push(format!("{s}: {with:.3}/{without:.3}"));
    }
    Ok(verdict(
        pass,
        format!("shift SdH/no-SdH {}", rows.join(", ")),
    ))
}

fn deformation_criterion(t: &Trained, cfg: &ExperimentConfig, splits: &Splits) -> R<Verdict> {
    let mut rows = Vec::new();
    let mut pass = true;
    for (name, g) in deformation_suite() {
        let map = |tr: &Trainer| {
            Ok(deformed_map(
                &tr.model,
                &splits.database,
                &splits.query,
                &g,
                cfg.eval.m,
                cfg.seed,
            )?)
        };
        let with = mean_over(&t.sdh, map)?;
        let without = mean_over(&t.strong, map)?;
        pass &= with >= without;
        rows.push(format!("{name} {with:.4}/{without:.4}"));
    }
    Ok(verdict(pass, format!("mAP SdH/no-SdH {}", rows.join(", "))))
}

fn bit_criterion(t: &Trained, splits: &Splits) -> R<Verdict> {
    let feats: Vec<Vec<f64>> = splits.database.iter().map(|s| s.features.clone()).collect();
    let stats = |models: &[Trainer]| -> R<(f64, f64)> {
        let entropy = mean_over(models, |tr| {
            Ok(bit_statistics(&tr.encode(&feats)?)?.mean_bit_entropy)
        })?;
        let saturated = mean_over(models, |tr| {
            Ok(bit_statistics(&tr.encode(&feats)?)?.saturated_fraction)
        })?;
        Ok((entropy, saturated))
    };
    let (e_with, s_with) = stats(&t.sdh)?;
    let (e_without, s_without) = stats(&t.no_bceq)?;
    Ok(verdict(
        e_with > e_without && s_with > s_without,
        format!(
            "bit entropy with/without bce-Q {e_with:.4}/{e_without:.4}, \
             |h|>0.9 fraction {s_with:.4}/{s_without:.4}"
        ),
    ))
}

// ---------------------------------------------------------------------------

fn report(id: usize, name: &str, v: R<Verdict>) -> bool {
    let (pass, detail) = match v {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "[{}] {id} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() {
    let mut passed = Vec::new();
    passed.push(report(1, "hamming/cosine identity", identity_criterion()));
    passed.push(report(2, "gradient suite", gradient_criterion()));
    passed.push(report(3, "oracle equivalence", oracle_criterion()));

    let cfg = match desk_config() {
        Ok(c) => c,
        Err(e) => {
            println!("[FAIL] cannot load desk config: {e}");
            std::process::exit(1);
        }
    };
    let scratch = tempfile::tempdir().expect("temporary directory");
    let single = scratch.path().join("single");
    passed.push(report(
        4,
        "end-to-end retrieval",
        end_to_end_criterion(&cfg, &single),
    ));

    let trained = (|| -> R<(Splits, Trained)> {
        let splits = load_data(&cfg)?;
        let t = train_variants(&cfg, &splits)?;
        Ok((splits, t))
    })();
    match &trained {
        Ok((splits, t)) => {
            passed.push(report(
                5,
                "SdH improves mAP",
                sdh_map_criterion(t, splits, cfg.eval.m),
            ));
            passed.push(report(
                6,
                "SdH lowers Hamming shift",
                shift_criterion(t, &cfg, splits),
            ));
            passed.push(report(
                7,
                "SdH robust to held-out deformations",
                deformation_criterion(t, &cfg, splits),
            ));
            passed.push(report(
                8,
                "bce-Q balances and binarizes bits",
                bit_criterion(t, splits),
            ));
        }
        Err(e) => {
            for id in 5..=8 {
                println!("[FAIL] {id}: training failed: {e}");
                passed.push(false);
            }
        }
    }

    passed.push(report(
        9,
        "determinism",
        determinism_criterion(&cfg, &single, scratch.path()),
    ));

    let n_pass = passed.iter().filter(|p| **p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
