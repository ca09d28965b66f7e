//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if a hard criterion fails. The complementarity study is soft:
//! its measured gap is reported either way.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use pmm::analysis::{pairwise_iou, stage_masks};
use pmm::attribution::{attribution_gradient, GradCamMap, LogitHead};
use pmm::config::{BackboneKind, ModelConfig, Precision};
use pmm::datapipe::{Batch, ImageStore, Role};
use pmm::eval::{evaluate, DescriptorMatrix, EvalSummary, ItemMeta};
use pmm::featmix::{block_ranking, hard_mix, BlockGrid, BlockMask, MixKind, MixStrategy, SourcePolicy};
use pmm::losses::{id_loss, triplet_loss, LossConfig};
use pmm::model::{Mode, PmmModel};
use pmm::optim::Adam;
use pmm::trainer::{open_store, progressive_forward, replay_forward, trace_loss, train_iteration, StageSchedule, Trainer, RESULTS_FILE};
use pmm::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{bits, snapshot, write_dataset};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn tensor(v: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng) -> BlockGrid {
    let (bh, bw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (rows, cols) = (rng.gen_range(1..=8), rng.gen_range(1..=6));
    BlockGrid::new(bh * rows, bw * cols, bh, bw).unwrap()
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, grid: &BlockGrid, integer: bool) -> GradCamMap {
    let values = (0..n * grid.cells())
        .map(|_| if integer { rng.gen_range(0..3) as f64 } else { rng.gen_range(0.0..1.0) })
        .collect();
    GradCamMap::from_values(values, (n, grid.height, grid.width), vec![0; n], 0).unwrap()
}

// 1
fn mask_arithmetic() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let grid = random_grid(&mut rng);
        let k = rng.gen_range(1..=grid.num_blocks());
        let n = rng.gen_range(1..=3);
        let g = random_map(&mut rng, n, &grid, case % 2 == 0);
        let mask = block_ranking(&g, &grid, k).unwrap();
        for s in 0..n {
            let cells = mask.sample(s);
            let zeros = cells.iter().filter(|&&v| v == 0).count();
            if zeros != k * grid.block_h * grid.block_w {
                return outcome(false, format!("case {case}: {zeros} zeros for K={k}"));
            }
            for b in 0..grid.num_blocks() {
                let vals: Vec<u8> = grid.cells_of(b).map(|c| cells[c]).collect();
                if vals.iter().any(|&v| v != vals[0]) {
                    return outcome(false, format!("case {case}: block {b} partially suppressed"));
                }
            }
        }
    }
    let t = start.elapsed();
    outcome(t < Duration::from_secs(5), format!("1000 cases in {:.3}s (limit 5s)", t.as_secs_f64()))
}

// 2
fn mix_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let grid = random_grid(&mut rng);
        let (n, c) = (rng.gen_range(1..=4), rng.gen_range(1..=8));
        let dims = [n, c, grid.height, grid.width];
        let len = dims.iter().product();
        let mut draw = || tensor((0..len).map(|_| rng.gen_range(-1e3..1e3)).collect(), &dims);
        let (fa, fb) = (draw(), draw());
        let keep_all = BlockMask::from_blocks(grid, vec![vec![]; n]).unwrap();
        let drop_all = BlockMask::from_blocks(grid, vec![(0..grid.num_blocks()).collect(); n]).unwrap();
        let random = BlockMask::from_blocks(
            grid,
            (0..n).map(|_| (0..grid.num_blocks()).filter(|_| rng.gen_bool(0.5)).collect()).collect(),
        )
        .unwrap();
        let ok = bits(&hard_mix(&fa, &fb, &keep_all).unwrap()) == bits(&fa)
            && bits(&hard_mix(&fa, &fb, &drop_all).unwrap()) == bits(&fb)
            && bits(&hard_mix(&fa, &fa, &random).unwrap()) == bits(&fa);
        if !ok {
            return outcome(false, format!("identity broken on case {case}"));
        }
    }
    outcome(true, "all-ones, all-zeros and self-mix exact on 100 tensors")
}

/// Sums every block with explicit loops, sorts all of them by (sum desc,
/// index asc) and keeps the first K.
fn ranking_oracle(values: &[f64], grid: &BlockGrid, k: usize) -> Vec<usize> {
    let cols = grid.width / grid.block_w;
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for b in 0..grid.num_blocks() {
        let (r, c) = (b / cols, b % cols);
        let mut s = 0.0;
        for y in r * grid.block_h..(r + 1) * grid.block_h {
            for x in c * grid.block_w..(c + 1) * grid.block_w {
                s += values[y * grid.width + x];
            }
        }
        scored.push((s, b));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, b)| b).collect()
}

// 3
fn ranking_oracle_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ties = 0;
    for case in 0..500 {
        let grid = random_grid(&mut rng);
        let k = rng.gen_range(1..=grid.num_blocks());
        let g = random_map(&mut rng, 1, &grid, case % 2 == 0);
        let values = g.per_sample().unwrap().remove(0);
        let want = ranking_oracle(&values, &grid, k);
        let mask = block_ranking(&g, &grid, k).unwrap();
        if mask.blocks[0] != want {
            return outcome(false, format!("case {case}: {:?} vs oracle {want:?}", mask.blocks[0]));
        }
        let oracle_mask = BlockMask::from_blocks(grid, vec![want]).unwrap();
        if oracle_mask.values != mask.values {
            return outcome(false, format!("case {case}: masks differ"));
        }
        if case % 2 == 0 {
            ties += 1;
        }
    }
    outcome(true, format!("500 maps exact, {ties} with integer-valued (tied) sums"))
}

// 4
fn grad_cam_gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        backbone: BackboneKind::Toy,
        embed_dim: 8,
        stages: 3,
        normalize_embeddings: false,
        pretrained: None,
        precision: Precision::F64,
    };
    let model = PmmModel::build(&cfg, 5, (3, 2), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 2;
    let images = tensor((0..n * 3 * 96 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(), &[n, 3, 96, 32]);
    let f = model.backbone_forward(&images, Mode::Eval).unwrap();
    let dims = f.dims().to_vec();
    let base: Vec<f64> = f.flatten_all().unwrap().to_vec1().unwrap();
    let h = 1e-3;
    let (mut checked, mut good, mut kinks) = (0usize, 0usize, 0usize);
    let mut worst = 0.0f64;
    for t in 0..model.num_stages() {
        let head = &model.heads[t];
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let out = model.stage_forward(t, &f, Mode::Eval).unwrap();
        let grad: Vec<f64> = attribution_gradient(head, &out, &targets).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let score = |v: Vec<f64>| -> f64 {
            let logits: Vec<Vec<f64>> = head.logits(&tensor(v, &dims), Mode::Eval).unwrap().to_vec2().unwrap();
            targets.iter().enumerate().map(|(i, &c)| logits[i][c]).sum()
        };
        for (i, &a) in grad.iter().enumerate() {
            if a.abs() <= 1e-6 {
                continue;
            }
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let centre = score(base.clone());
            let (up, down) = (score(plus), score(minus));
            let fd = (up - down) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            checked += 1;
            if rel <= 1e-3 {
                good += 1;
            } else {
                // one-sided slopes disagree: the head is not differentiable here
                let (right, left) = ((up - centre) / h, (centre - down) / h);
                if (right - left).abs() > 1e-3 * right.abs().max(left.abs()) {
                    kinks += 1;
                }
            }
            worst = worst.max(rel);
        }
    }
    let frac = good as f64 / checked.max(1) as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        checked > 0 && frac >= 0.99 && secs < 60.0,
        format!(
            "{good}/{checked} entries within 1e-3 ({:.2}%); {kinks} of {} misses sit on a kink (one-sided slopes differ); worst {worst:.2e}, {secs:.1}s",
            100.0 * frac,
            checked - good
        ),
    )
}

fn random_batch(rng: &mut ChaCha8Rng) -> Batch {
    let labels = vec![0, 0, 1, 1, 2, 2, 3, 3];
    let n = labels.len();
    Batch {
        images: tensor((0..n * 3 * 96 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(), &[n, 3, 96, 32]),
        labels,
        cam_ids: vec![1; n],
    }
}

// 5
fn detachment_isolation() -> Outcome {
    let cfg = ModelConfig {
        backbone: BackboneKind::Toy,
        embed_dim: 16,
        stages: 3,
        normalize_embeddings: false,
        pretrained: None,
        precision: Precision::F64,
    };
    let schedule = StageSchedule::uniform(
        MixStrategy {
            kind: MixKind::AHardMix,
            k: 1,
            cutout_random: false,
            cutmix_alpha: 1.0,
        },
        3,
        SourcePolicy::Progressive,
    );
    let loss_cfg = LossConfig::default();
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(5));
    let lr = 1e-3;

    // (a) the real iteration against an update driven by attribution-free grads
    let trained = PmmModel::build(&cfg, 4, (3, 2), 5).unwrap();
    let mut opt_a = Adam::new(5e-4);
    let mut rng_a = ChaCha8Rng::seed_from_u64(50);
    let report = train_iteration(&trained, &mut opt_a, &batch, &schedule, &loss_cfg, lr, (0, 0), &mut rng_a)
        .unwrap()
        .unwrap();

    let reference = PmmModel::build(&cfg, 4, (3, 2), 5).unwrap();
    let mut opt_b = Adam::new(5e-4);
    let mut rng_b = ChaCha8Rng::seed_from_u64(50);
    let trace = progressive_forward(&reference, &batch.images, &batch.labels, &schedule, &mut rng_b).unwrap();
    let outputs = replay_forward(&reference, &batch.images, &trace.mixes, schedule.source_policy).unwrap();
    let clean = trace_loss(&outputs, &trace.mixes, &batch.labels, &loss_cfg).unwrap();
    let grads = clean.total.backward().unwrap();
    opt_b.step(&reference.store, &grads, lr).unwrap();
    let part_a = report.backward_passes == 3 && snapshot(&trained) == snapshot(&reference);

    // (b) stage-II loss against stage-I classifier weights
    let model = PmmModel::build(&cfg, 4, (3, 2), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let trace = progressive_forward(&model, &batch.images, &batch.labels, &schedule, &mut rng).unwrap();
    let out = &trace.outputs[1];
    let loss = (id_loss(&out.logits, &batch.labels, 0.1).unwrap() + triplet_loss(&out.embedding, &batch.labels, 1.2).unwrap()).unwrap();
    let grads = loss.backward().unwrap();
    let mut leaked = 0.0;
    for name in ["stage1.classifier.weight", "stage1.classifier.bias", "stage1.reduction.weight"] {
        let var = model.store.get(name).unwrap();
        if let Some(g) = grads.get(var.as_tensor()) {
            leaked += g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        }
    }
    outcome(
        part_a && leaked == 0.0,
        format!(
            "(a) parameters after train_iteration {} attribution-free update, {} backward passes; (b) stage-I gradient mass {leaked}",
            if part_a { "bit-identical to" } else { "DIFFER from" },
            report.backward_passes
        ),
    )
}

fn triplet_oracle(e: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().max(1e-12).sqrt();
    let n = e.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut best = f64::NEG_INFINITY;
        for p in 0..n {
            for q in 0..n {
                if p != a && labels[p] == labels[a] && labels[q] != labels[a] {
                    best = best.max(d(&e[a], &e[p]) - d(&e[a], &e[q]));
                }
            }
        }
        total += (best + margin).max(0.0);
    }
    total / n as f64
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Smoothed cross-entropy references evaluated with 50-digit arithmetic.
const CE_REFERENCE: [(&[f64], usize, f64, f64); 7] = [
    (&[2.0, 1.0, 0.0], 0, 0.1, 0.507_605_964_444_380_3),
    (&[3.869, 4.723, 7.079, 3.838, 6.757, -7.536, -0.55], 1, 0.25, 3.529_036_453_871_473_659_3),
    (&[6.414, -6.189, -0.495], 0, 0.1, 0.651_401_616_182_666_672_11),
    (&[1.183, -7.79, -4.532], 1, 0.0, 8.976_417_092_863_453_945),
    (
        &[-5.446, 4.754, -5.78, 1.879, -5.973, -7.972, 5.942, -4.649, -4.552, 7.719, 5.959],
        4,
        0.1,
        13.501_885_475_192_178_531,
    ),
    (&[0.628, 2.845, -4.724, 7.056, 3.05], 3, 0.1, 0.562_573_777_483_126_378_43),
    (&[-2.221, -5.345, -5.669], 0, 0.1, 0.292_122_019_891_737_825_56),
];

// 6
fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_triplet = 0.0f64;
    for _ in 0..100 {
        let (p, k, d) = (rng.gen_range(2..=5), rng.gen_range(2..=4), rng.gen_range(2..=16));
        let labels: Vec<usize> = (0..p).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let e: Vec<Vec<f64>> = (0..p * k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let margin = rng.gen_range(0.1..1.5);
        let got = scalar(&triplet_loss(&tensor(e.concat(), &[p * k, d]), &labels, margin).unwrap());
        worst_triplet = worst_triplet.max((got - triplet_oracle(&e, &labels, margin)).abs());
    }
    let mut worst_ce = 0.0f64;
    for (logits, y, eps, want) in CE_REFERENCE {
        let got = scalar(&id_loss(&tensor(logits.to_vec(), &[1, logits.len()]), &[y], eps).unwrap());
        worst_ce = worst_ce.max((got - want).abs() / want);
    }
    let mut worst_uniform = 0.0f64;
    for c in [2usize, 7, 100, 751] {
        for eps in [0.0, 0.1, 0.5] {
            let got = scalar(&id_loss(&tensor(vec![0.37; 3 * c], &[3, c]), &[0, c / 2, c - 1], eps).unwrap());
            worst_uniform = worst_uniform.max((got - (c as f64).ln()).abs());
        }
    }
    outcome(
        worst_triplet <= 1e-10 && worst_ce <= 1e-12 && worst_uniform <= 1e-12,
        format!(
            "triplet max err {worst_triplet:.1e} (atol 1e-10), CE max rel err {worst_ce:.1e}, uniform |L - ln C| max {worst_uniform:.1e}"
        ),
    )
}

/// Filters the gallery first, then ranks by squared distance with index
/// tie-break and reads CMC and AP off the relevance list.
fn retrieval_oracle(q: &[Vec<f64>], qm: &[ItemMeta], g: &[Vec<f64>], gm: &[ItemMeta]) -> (Vec<f64>, f64, usize) {
    let mut cmc = vec![0.0; g.len()];
    let mut aps = Vec::new();
    for (qi, qv) in q.iter().enumerate() {
        let mut valid: Vec<(f64, usize)> = (0..g.len())
            .filter(|&j| gm[j].pid != -1 && !(gm[j].pid == qm[qi].pid && gm[j].cam_id == qm[qi].cam_id))
            .map(|j| (qv.iter().zip(&g[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
            .collect();
        valid.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = valid.iter().map(|&(_, j)| gm[j].pid == qm[qi].pid).collect();
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            continue;
        }
        let first = rel.iter().position(|&r| r).unwrap();
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
        let mut hits = 0;
        let mut sum = 0.0;
        for (k, &r) in rel.iter().enumerate() {
            if r {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        aps.push(sum / total as f64);
    }
    let m = aps.len();
    if m == 0 {
        return (cmc, 0.0, 0);
    }
    (cmc.into_iter().map(|c| c / m as f64).collect(), aps.iter().sum::<f64>() / m as f64, m)
}

// 7
fn retrieval_oracle_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut excluded = 0;
    for case in 0..100 {
        let (nq, ng, d) = (rng.gen_range(1..=8), rng.gen_range(1..=20), rng.gen_range(1..=4));
        let ids = rng.gen_range(1..=4);
        let meta = |rng: &mut ChaCha8Rng, junk: bool| ItemMeta {
            pid: if junk && rng.gen_bool(0.15) { -1 } else { rng.gen_range(0..ids) },
            cam_id: rng.gen_range(1..=3),
        };
        let qm: Vec<ItemMeta> = (0..nq).map(|_| meta(&mut rng, false)).collect();
        let gm: Vec<ItemMeta> = (0..ng).map(|_| meta(&mut rng, true)).collect();
        // small integer coordinates: exact distances and frequent ties
        let mut vecs = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2..=2) as f64).collect()).collect() };
        let (q, g) = (vecs(nq), vecs(ng));
        excluded += gm.iter().filter(|m| m.pid == -1).count();
        let got = evaluate(
            &DescriptorMatrix::new(nq, d, q.concat()).unwrap(),
            &qm,
            &DescriptorMatrix::new(ng, d, g.concat()).unwrap(),
            &gm,
        )
        .unwrap();
        let (cmc, map, m) = retrieval_oracle(&q, &qm, &g, &gm);
        if got.num_queries != m || got.num_queries + got.num_dropped != nq {
            return outcome(false, format!("case {case}: {} queries evaluated, oracle {m}", got.num_queries));
        }
        if m > 0 && (got.cmc != cmc || got.map.to_bits() != map.to_bits()) {
            return outcome(false, format!("case {case}: mAP {} vs oracle {map}", got.map));
        }
    }
    outcome(true, format!("CMC and mAP exact on 100 instances ({excluded} junk gallery items)"))
}

/// One synthetic run, all sharing the same dataset.
struct Run {
    kind: MixKind,
    seed: u64,
    summary: EvalSummary,
    elapsed: Duration,
    results_json: Option<serde_json::Value>,
    first_losses: Vec<f64>,
    stage12_iou: f64,
}

fn train_run(base: &Config, store: &ImageStore, out: &Path, kind: MixKind, seed: u64) -> Run {
    let mut config = base.clone();
    config.mix.kind = kind;
    config.seed = seed;
    config.output_dir = out.join(format!("{}_seed{seed}", kind.as_str()));
    let start = Instant::now();
    let mut trainer = Trainer::with_store(config, store.clone()).unwrap();
    let fit = trainer.fit().unwrap();
    let elapsed = start.elapsed();
    let results_json = std::fs::read_to_string(trainer.output_dir().join(RESULTS_FILE))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let mut test_split = store.index().indices(Role::Query);
    test_split.extend(store.index().indices(Role::Gallery));
    let masks = stage_masks(&trainer.model, store, &test_split, base.mix.k, base.eval.batch_size).unwrap();
    let stage12_iou = pairwise_iou(&masks)[0][1];
    let run = Run {
        kind,
        seed,
        summary: fit.final_eval.unwrap(),
        elapsed,
        results_json,
        first_losses: fit.epochs.iter().take(5).map(|e| e.mean_loss).collect(),
        stage12_iou,
    };
    eprintln!(
        "  trained {:<16} seed {seed}: rank1 {:.3} mAP {:.3} stage I/II IoU {:.3} in {:.0}s",
        kind.as_str(),
        run.summary.rank1,
        run.summary.map,
        run.stage12_iou,
        elapsed.as_secs_f64()
    );
    run
}

struct Study {
    runs: Vec<Run>,
    cores: usize,
}

impl Study {
    fn get(&self, kind: MixKind, seed: u64) -> &Run {
        self.runs.iter().find(|r| r.kind == kind && r.seed == seed).unwrap()
    }
}

fn synthetic_study(dir: &Path) -> Study {
    let mut base = Config::preset("synthetic").unwrap();
    base.dataset.root = dir.join("data");
    write_dataset(&base);
    let store = open_store(&base).unwrap();
    let seed = base.seed;
    let mut plan = vec![(MixKind::AHardMix, seed), (MixKind::None, seed)];
    for s in [seed + 1, seed + 2] {
        plan.push((MixKind::AHardMix, s));
        plan.push((MixKind::None, s));
    }
    for kind in [MixKind::Cutout, MixKind::CutmixFeature, MixKind::ACutmixFeature] {
        plan.push((kind, seed));
    }
    let runs = plan
        .into_iter()
        .map(|(kind, s)| train_run(&base, &store, &dir.join("runs"), kind, s))
        .collect();
    Study {
        runs,
        cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

// 8
fn synthetic_end_to_end(study: &Study) -> Outcome {
    let run = study.get(MixKind::AHardMix, 0);
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    let l = &run.first_losses;
    let falling = l.len() == 5 && l[4] < l[0];
    outcome(
        run.summary.rank1 >= 0.90 && minutes <= 15.0,
        format!(
            "rank1 {:.3} (>= 0.90), mAP {:.3}, {minutes:.1} min on {} core(s); first-epoch losses {} [{}]",
            run.summary.rank1,
            run.summary.map,
            study.cores,
            if falling { "fall" } else { "do not fall" },
            l.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// 9
fn progressive_complementarity(study: &Study) -> Outcome {
    let seeds = [0u64, 1, 2];
    let mean = |kind| seeds.iter().map(|&s| study.get(kind, s).stage12_iou).sum::<f64>() / seeds.len() as f64;
    let (mixed, plain) = (mean(MixKind::AHardMix), mean(MixKind::None));
    let gap = if plain > 0.0 { (plain - mixed) / plain } else { 0.0 };
    let per_seed: Vec<String> = seeds
        .iter()
        .map(|&s| format!("{:.3}/{:.3}", study.get(MixKind::AHardMix, s).stage12_iou, study.get(MixKind::None, s).stage12_iou))
        .collect();
    outcome(
        gap >= 0.20,
        format!(
            "mean stage I/II IoU a_hard_mix {mixed:.3} vs none {plain:.3}: relative gap {:.1}% (target >= 20%); per seed mix/none {}",
            100.0 * gap,
            per_seed.join(", ")
        ),
    )
}

// 10
fn ablation_parity(study: &Study) -> Outcome {
    let kinds = [MixKind::AHardMix, MixKind::Cutout, MixKind::CutmixFeature, MixKind::ACutmixFeature];
    let mut table = BTreeMap::new();
    let mut ok = true;
    for kind in kinds {
        let run = study.get(kind, 0);
        let complete = run.results_json.as_ref().is_some_and(|j| {
            ["rank1", "rank5", "rank10", "mAP"]
                .iter()
                .all(|k| j.get(k).and_then(|v| v.as_f64()).is_some_and(f64::is_finite))
        });
        ok &= complete;
        table.insert(kind.as_str(), format!("{:.3}/{:.3}", run.summary.rank1, run.summary.map));
    }
    let detail = table.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join(", ");
    outcome(ok, format!("rank1/mAP: {detail}"))
}

fn main() {
    // numeric arguments select criteria, e.g. `cargo test --test acceptance -- 4 5`
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut hard_failures = 0;
    let mut report = |id: usize, name: &str, soft: bool, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let o = run();
        let status = match (o.passed, soft) {
            (true, _) => "PASS",
            (false, true) => "SOFT-FAIL",
            (false, false) => {
                hard_failures += 1;
                "FAIL"
            }
        };
        println!(
            "[{status}] criterion {id:>2} {name}: {} ({:.1}s)",
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };
    report(1, "mask arithmetic", false, &mut mask_arithmetic);
    report(2, "mix identities", false, &mut mix_identities);
    report(3, "ranking oracle", false, &mut ranking_oracle_agreement);
    report(4, "grad-cam gradient check", false, &mut grad_cam_gradient_check);
    report(5, "detachment and isolation", false, &mut detachment_isolation);
    report(6, "loss oracles", false, &mut loss_oracles);
    report(7, "retrieval oracle", false, &mut retrieval_oracle_agreement);

    if [8, 9, 10].into_iter().any(wanted) {
        eprintln!("training the synthetic study (9 runs)...");
        let dir = tempfile::tempdir().unwrap();
        let study = synthetic_study(dir.path());
        report(8, "synthetic end-to-end", false, &mut || synthetic_end_to_end(&study));
        report(9, "progressive complementarity (soft)", true, &mut || progressive_complementarity(&study));
        report(10, "ablation harness parity", false, &mut || ablation_parity(&study));
    }

    if hard_failures > 0 {
        println!("{hard_failures} criterion(s) failed");
        std::process::exit(1);
    }
}
