//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs sequentially (the runtime budgets assume a single busy core).

use std::f64::consts::LN_2;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sei_al::harness::{self, ExperimentConfig, Prepared};
use sei_al::model::{load_checkpoint, save_checkpoint, Block, Mode, ModelConfig, NetworkParams};
use sei_al::numerics::{grad_check, AdamConfig, Conv1dSpec, Graph, Tensor, Var};
use sei_al::rng::{stream, stream_rng};
use sei_al::selection::{bald_from_passes, kcenter_greedy, select_bald, Strategy};
use sei_al::signal::{generate_records, load_iq_file, save_iq_file, ChannelConfig, IqRecord, SimulationConfig};
use sei_al::training::{
    contrastive_loss, contrastive_term, cross_entropy_loss, joint_loss, pretrain_stage1, train_stage2, KeyQueue,
    LossWeights, TrainConfig,
};

const GRAD_TOL: f64 = 1e-4;
const GRAD_POINTS: u64 = 20;
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;
const SEEDS: u64 = 5;

/// Result of one criterion: pass flag plus a one-line summary.
struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, random sign.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, 0.05, 1.0, r);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn unit_rows(rows: usize, dim: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(&[rows, dim], -1.0, 1.0, r);
    for i in 0..rows {
        let row = &mut t.data_mut()[i * dim..(i + 1) * dim];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

type OpCheck = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

fn op<F>(f: F, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static) -> OpCheck
where
    F: Fn(&mut Graph, &[Var]) -> sei_al::Result<Var> + Clone + 'static,
{
    Box::new(move |r| {
        let point = inputs(r);
        grad_check(f.clone(), &point, GRAD_TOL).unwrap().max_rel_error
    })
}

fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        (
            "conv1d",
            op(
                |g, v| g.conv1d(v[0], v[1], Conv1dSpec { stride: 1, padding: 1 }),
                |r| vec![uniform(&[2, 3, 10], -1.0, 1.0, r), uniform(&[4, 3, 3], -1.0, 1.0, r)],
            ),
        ),
        (
            "conv1d_strided",
            op(
                |g, v| g.conv1d(v[0], v[1], Conv1dSpec { stride: 2, padding: 0 }),
                |r| vec![uniform(&[2, 2, 11], -1.0, 1.0, r), uniform(&[3, 2, 5], -1.0, 1.0, r)],
            ),
        ),
        (
            "dense",
            op(
                |g, v| g.dense(v[0], v[1], v[2]),
                |r| {
                    vec![
                        uniform(&[3, 5], -1.0, 1.0, r),
                        uniform(&[4, 5], -1.0, 1.0, r),
                        uniform(&[4], -1.0, 1.0, r),
                    ]
                },
            ),
        ),
        ("relu", op(|g, v| Ok(g.relu(v[0])), |r| vec![away_from_zero(&[3, 6], r)])),
        (
            "maxpool1d",
            op(
                |g, v| g.maxpool1d(v[0], 2, 2),
                |r| {
                    // A shuffled ladder keeps every window's maximum unique.
                    let n = 2 * 3 * 8;
                    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
                    for i in (1..n).rev() {
                        vals.swap(i, r.random_range(0..=i));
                    }
                    vec![Tensor::new(vec![2, 3, 8], vals).unwrap()]
                },
            ),
        ),
        (
            "batchnorm_train",
            op(
                |g, v| Ok(g.batchnorm_train(v[0], v[1], v[2])?.0),
                |r| {
                    vec![
                        uniform(&[4, 3, 5], -1.0, 1.0, r),
                        uniform(&[3], 0.5, 1.5, r),
                        uniform(&[3], -0.5, 0.5, r),
                    ]
                },
            ),
        ),
        (
            "batchnorm_eval",
            op(
                |g, v| g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.2, 2.0]),
                |r| {
                    vec![
                        uniform(&[2, 3, 4], -1.0, 1.0, r),
                        uniform(&[3], 0.5, 1.5, r),
                        uniform(&[3], -0.5, 0.5, r),
                    ]
                },
            ),
        ),
        ("global_avg_pool", op(|g, v| g.global_avg_pool(v[0]), |r| vec![uniform(&[2, 3, 5], -1.0, 1.0, r)])),
        (
            "dropout",
            op(
                |g, v| g.dropout(v[0], 0.5, true, &mut rng(17)),
                |r| vec![uniform(&[3, 6], -1.0, 1.0, r)],
            ),
        ),
        ("softmax", op(|g, v| g.softmax(v[0]), |r| vec![uniform(&[3, 4], -2.0, 2.0, r)])),
        ("l2_normalize", op(|g, v| g.l2_normalize(v[0]), |r| vec![uniform(&[3, 4], -1.0, 1.0, r)])),
        (
            "info_nce",
            Box::new(|r| {
                let pos = unit_rows(3, 4, r);
                let neg = unit_rows(5, 4, r);
                let point = vec![uniform(&[3, 4], -1.0, 1.0, r)];
                grad_check(
                    |g, v| {
                        let q = g.l2_normalize(v[0])?;
                        g.info_nce(q, &pos, Some(&neg), 0.2)
                    },
                    &point,
                    GRAD_TOL,
                )
                .unwrap()
                .max_rel_error
            }),
        ),
        (
            "cross_entropy",
            Box::new(|r| {
                let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
                let point = vec![uniform(&[3, 4], -2.0, 2.0, r)];
                grad_check(
                    |g, v| {
                        let p = g.softmax(v[0])?;
                        g.cross_entropy(p, &labels)
                    },
                    &point,
                    GRAD_TOL,
                )
                .unwrap()
                .max_rel_error
            }),
        ),
        (
            "linear",
            Box::new(|r| {
                let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
                let point = vec![uniform(&[3, 2], -1.0, 1.0, r), uniform(&[3, 2], -1.0, 1.0, r)];
                grad_check(|g, v| g.linear(&[(v[0], a), (v[1], b)]), &point, GRAD_TOL)
                    .unwrap()
                    .max_rel_error
            }),
        ),
    ]
}

fn composed_config() -> ModelConfig {
    ModelConfig {
        proj_hidden: 6,
        embed_dim: 5,
        pred_hidden: 6,
        classifier_hidden: vec![6, 5],
        ..ModelConfig::new(3, 64).with_conv_channels(vec![2, 3, 4])
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Path {
    Contrastive,
    CrossEntropy,
    Joint(f64),
}

struct ComposedPoint {
    params: NetworkParams,
    tilde: Tensor,
    bar: Tensor,
    k_tilde: Tensor,
    k_bar: Tensor,
    queue: KeyQueue,
    labels: Vec<usize>,
}

impl ComposedPoint {
    fn draw(r: &mut ChaCha8Rng) -> Self {
        let cfg = composed_config();
        let mut params = NetworkParams::new(cfg.clone(), r).unwrap();
        // Zero biases put dead ReLU rows exactly on a kink; move off it.
        for mlp in [&mut params.query_projection, &mut params.predictor, &mut params.classifier] {
            for layer in &mut mlp.layers {
                layer.bias = uniform(layer.bias.shape(), -0.1, 0.1, r);
            }
        }
        let b = 3;
        let mut queue = KeyQueue::new(6).unwrap();
        queue
            .enqueue(&unit_rows(6, cfg.embed_dim, r), &unit_rows(6, cfg.embed_dim, r))
            .unwrap();
        Self {
            tilde: uniform(&[b, 2, 64], -1.0, 1.0, r),
            bar: uniform(&[b, 2, 64], -1.0, 1.0, r),
            k_tilde: unit_rows(b, cfg.embed_dim, r),
            k_bar: unit_rows(b, cfg.embed_dim, r),
            labels: (0..b).map(|_| r.random_range(0..cfg.num_classes)).collect(),
            params,
            queue,
        }
    }

    /// Loss of the training-step composition, plus its gradient per block.
    fn loss(&self, params: &NetworkParams, path: Path, want_grads: bool) -> (f64, Vec<Vec<Tensor>>) {
        let mut g = Graph::new();
        let bound = params.bind_query(&mut g);
        let with_ce = path != Path::Contrastive;
        let with_cl = path != Path::CrossEntropy;
        let tilde = params
            .query_forward(&mut g, &bound, &self.tilde, Mode::Train, with_cl, with_ce, &mut rng(3))
            .unwrap();
        let cl = with_cl.then(|| {
            let bar = params
                .query_forward(&mut g, &bound, &self.bar, Mode::Train, true, false, &mut rng(4))
                .unwrap();
            contrastive_term(
                &mut g,
                tilde.q.unwrap(),
                bar.q.unwrap(),
                &self.k_tilde,
                &self.k_bar,
                &self.queue,
                0.2,
            )
            .unwrap()
        });
        let ce = with_ce.then(|| g.cross_entropy(tilde.probs.unwrap(), &self.labels).unwrap());
        let root = match (path, ce, cl) {
            (Path::Contrastive, _, Some(cl)) => cl,
            (Path::CrossEntropy, Some(ce), _) => ce,
            (Path::Joint(alpha), Some(ce), Some(cl)) => g.linear(&[(ce, 1.0 - alpha), (cl, alpha)]).unwrap(),
            _ => unreachable!(),
        };
        let value = g.value(root).data()[0];
        if !want_grads {
            return (value, Vec::new());
        }
        let grads = g.backward(root).unwrap();
        let per_block = BLOCKS
            .iter()
            .map(|&b| {
                let like = block_params(params, b);
                bound
                    .vars(b)
                    .iter()
                    .zip(like)
                    .map(|(&v, t)| grads.get_or_zeros(v, t))
                    .collect()
            })
            .collect();
        (value, per_block)
    }
}

const BLOCKS: [Block; 4] = [Block::Encoder, Block::Projection, Block::Predictor, Block::Classifier];

fn block_params(p: &NetworkParams, b: Block) -> Vec<&Tensor> {
    match b {
        Block::Encoder => p.query_encoder.params(),
        Block::Projection => p.query_projection.params(),
        Block::Predictor => p.predictor.params(),
        Block::Classifier => p.classifier.params(),
    }
}

fn block_params_mut(p: &mut NetworkParams, b: Block) -> Vec<&mut Tensor> {
    match b {
        Block::Encoder => p.query_encoder.params_mut(),
        Block::Projection => p.query_projection.params_mut(),
        Block::Predictor => p.predictor.params_mut(),
        Block::Classifier => p.classifier.params_mut(),
    }
}

/// Central differences over every trainable scalar of the query branch.
///
/// Returns `None` when a coordinate's one-sided slopes disagree, meaning an
/// activation pattern (ReLU sign, max-pool argmax) flips inside the step and
/// the point is not smooth.
fn composed_error(point: &ComposedPoint, path: Path) -> Option<f64> {
    let (f0, analytic) = point.loss(&point.params, path, true);
    let mut probe = point.params.clone();
    let mut worst: f64 = 0.0;
    for (bi, &block) in BLOCKS.iter().enumerate() {
        for ti in 0..analytic[bi].len() {
            for j in 0..analytic[bi][ti].len() {
                let orig = block_params(&probe, block)[ti].data()[j];
                block_params_mut(&mut probe, block)[ti].data_mut()[j] = orig + FD_STEP;
                let (up, _) = point.loss(&probe, path, false);
                block_params_mut(&mut probe, block)[ti].data_mut()[j] = orig - FD_STEP;
                let (down, _) = point.loss(&probe, path, false);
                block_params_mut(&mut probe, block)[ti].data_mut()[j] = orig;
                let (left, right) = ((f0 - down) / FD_STEP, (up - f0) / FD_STEP);
                if (right - left).abs() > (1e-3 * left.abs().max(right.abs())).max(1e-4) {
                    return None;
                }
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic[bi][ti].data()[j];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR));
            }
        }
    }
    Some(worst)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, check) in op_checks() {
        for point in 0..GRAD_POINTS {
            let err = check(&mut rng(1000 + point));
            worst = worst.max(err);
            checked += 1;
            if err >= GRAD_TOL {
                failures.push(format!("{name}@{point}={err:.1e}"));
            }
        }
    }
    let paths = [
        ("contrastive_path", Path::Contrastive),
        ("cross_entropy_path", Path::CrossEntropy),
        ("joint_path", Path::Joint(0.3)),
    ];
    let mut smooth = 0;
    let mut draws = 0;
    while smooth < GRAD_POINTS && draws < 10 * GRAD_POINTS {
        let p = ComposedPoint::draw(&mut rng(2000 + draws));
        draws += 1;
        let errs: Option<Vec<f64>> = paths.iter().map(|&(_, path)| composed_error(&p, path)).collect();
        let Some(errs) = errs else { continue };
        for ((name, _), err) in paths.iter().zip(errs) {
            worst = worst.max(err);
            checked += 1;
            if err >= GRAD_TOL {
                failures.push(format!("{name}@{}={err:.1e}", draws - 1));
            }
        }
        smooth += 1;
    }
    if smooth < GRAD_POINTS {
        failures.push(format!("only {smooth} smooth composed points in {draws} draws"));
    }
    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(60);
    Outcome::new(
        failures.is_empty() && in_time,
        format!(
            "{checked} op/point checks ({} draws for {GRAD_POINTS} smooth composed points), max rel err \
             {worst:.2e} (< {GRAD_TOL:.0e}), {:.1}s (< 60s){}",
            draws,
            elapsed.as_secs_f64(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Loss identities

fn criterion_loss_identities() -> Outcome {
    let mut r = rng(2);
    let mut errs = Vec::new();

    let q = unit_rows(1, 8, &mut r);
    let empty = KeyQueue::new(16).unwrap();
    errs.push(("empty queue", contrastive_loss(&q, &q, &q, &q, &empty, 0.2).unwrap().abs()));

    for v in [1usize, 16, 512] {
        let mut queue = KeyQueue::new(v).unwrap();
        let u = unit_rows(1, 128, &mut r);
        let copies = Tensor::from_rows(&vec![u.row(0); v]).unwrap();
        queue.enqueue(&copies, &copies).unwrap();
        let batch = Tensor::from_rows(&[u.row(0); 4]).unwrap();
        let loss = contrastive_loss(&batch, &batch, &batch, &batch, &queue, 0.2).unwrap();
        errs.push(("all-equal", (loss - 2.0 * ((v + 1) as f64).ln()).abs()));
    }

    for m in [2usize, 4, 10] {
        let probs = Tensor::filled(&[5, m], 1.0 / m as f64);
        let labels: Vec<usize> = (0..5).map(|i| i % m).collect();
        errs.push(("uniform CE", (cross_entropy_loss(&probs, &labels).unwrap() - (m as f64).ln()).abs()));
    }

    for _ in 0..100 {
        let (ce, cl) = (r.random_range(0.0..10.0), r.random_range(0.0..10.0));
        let j0 = joint_loss(ce, cl, 0.0).unwrap();
        let j1 = joint_loss(ce, cl, 1.0).unwrap();
        let alpha = r.random_range(0.0..=1.0);
        let j = joint_loss(ce, cl, alpha).unwrap();
        errs.push(("joint linear", (j - (j0 + alpha * (j1 - j0))).abs()));
        errs.push(("joint oracle", (j - ((1.0 - alpha) * ce + alpha * cl)).abs()));
    }

    let worst = errs.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Outcome::new(
        worst.1 <= 1e-9,
        format!("{} identities, max abs err {:.2e} ({}) (<= 1e-9)", errs.len(), worst.1, worst.0),
    )
}

// ---------------------------------------------------------------------------
// 3. Queue and momentum

fn branch_distance(p: &NetworkParams) -> f64 {
    let cols = p.collections();
    let find = |name: &str| cols.iter().find(|(n, _)| *n == name).unwrap().1.clone();
    let mut sq = 0.0;
    for (q, k) in [("query_encoder", "key_encoder"), ("query_projection", "key_projection")] {
        for ((_, a), (_, b)) in find(q).iter().zip(find(k).iter()) {
            sq += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
    }
    sq.sqrt()
}

fn query_checksum(p: &NetworkParams) -> u64 {
    let mut all: Vec<&Tensor> = p.query_encoder.params();
    all.extend(p.query_projection.params());
    all.extend(p.predictor.params());
    all.extend(p.classifier.params());
    NetworkParams::checksum(&all)
}

fn small_records(m: usize, per: usize, len: usize, seed: u64) -> Vec<IqRecord> {
    generate_records(&SimulationConfig::new(m, per, len, ChannelConfig::flat(10.0)), seed)
        .unwrap()
        .0
}

fn criterion_queue_momentum() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // FIFO: key i is the unit vector at angle i; after every enqueue the
    // stored sequence must be the newest min(total, V) keys, oldest first.
    let depth = 7;
    let mut queue = KeyQueue::new(depth).unwrap();
    let mut r = rng(3);
    let mut next = 0usize;
    let key = |i: usize| [(i as f64).cos(), (i as f64).sin()];
    let mut fifo_ok = true;
    for _ in 0..40 {
        let n = r.random_range(1..=4);
        let rows: Vec<[f64; 2]> = (next..next + n).map(key).collect();
        let bar_rows: Vec<[f64; 2]> = (next..next + n).map(|i| key(i + 1000)).collect();
        queue
            .enqueue(&Tensor::from_rows(&rows).unwrap(), &Tensor::from_rows(&bar_rows).unwrap())
            .unwrap();
        next += n;
        let first = next.saturating_sub(depth);
        let want: Vec<[f64; 2]> = (first..next).map(key).collect();
        let want_bar: Vec<[f64; 2]> = (first..next).map(|i| key(i + 1000)).collect();
        fifo_ok &= queue.tilde_keys().unwrap() == Tensor::from_rows(&want).unwrap();
        fifo_ok &= queue.bar_keys().unwrap() == Tensor::from_rows(&want_bar).unwrap();
        fifo_ok &= queue.len() == depth.min(next);
    }
    pass &= fifo_ok;
    notes.push(format!("FIFO {}", if fifo_ok { "exact" } else { "WRONG" }));

    // Momentum: with the query fixed, ||key - query|| shrinks by m per step.
    let mut p = NetworkParams::new(ModelConfig::new(4, 64).with_conv_channels(vec![4, 6, 8]), &mut rng(30)).unwrap();
    for t in p.query_encoder.params_mut().into_iter().chain(p.query_projection.params_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
    }
    for b in &mut p.query_encoder.blocks {
        b.running_mean.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
        b.running_var.data_mut().iter_mut().for_each(|v| *v += r.random_range(0.0..0.5));
    }
    let d0 = branch_distance(&p);
    let mut worst: f64 = 0.0;
    for n in 1..=100 {
        p.momentum_update(0.99).unwrap();
        worst = worst.max((branch_distance(&p) / d0 - 0.99f64.powi(n)).abs());
    }
    pass &= worst <= 1e-9 && d0 > 0.0;
    notes.push(format!("momentum decay err {worst:.2e} over 100 steps (<= 1e-9)"));

    // The optimizer never touches the key branch.
    let mut p = NetworkParams::new(ModelConfig::new(4, 64).with_conv_channels(vec![4, 6, 8]), &mut rng(31)).unwrap();
    let key_before = p.key_checksum();
    let query_before = query_checksum(&p);
    let mut g = Graph::new();
    let bound = p.bind_query(&mut g);
    let x = uniform(&[4, 2, 64], -1.0, 1.0, &mut r);
    let out = p
        .query_forward(&mut g, &bound, &x, Mode::Train, true, true, &mut rng(5))
        .unwrap();
    let ce = g.cross_entropy(out.probs.unwrap(), &[0, 1, 2, 3]).unwrap();
    let qsum = g.project(out.q.unwrap(), &Tensor::filled(&[4, p.config.embed_dim], 0.1)).unwrap();
    let root = g.linear(&[(ce, 1.0), (qsum, 1.0)]).unwrap();
    let grads = g.backward(root).unwrap();
    p.apply_gradients(&bound, &grads, &BLOCKS, &AdamConfig::with_lr(1e-2)).unwrap();
    let step_ok = p.key_checksum() == key_before && query_checksum(&p) != query_before;

    let records = small_records(4, 4, 64, 8);
    let refs: Vec<&IqRecord> = records.iter().collect();
    let frozen = TrainConfig {
        epochs: 3,
        batch_size: 8,
        momentum: 1.0,
        ..TrainConfig::default()
    };
    let key_before = p.key_checksum();
    let mut queue = KeyQueue::new(32).unwrap();
    pretrain_stage1(&mut p, &refs, &mut queue, &frozen, &mut rng(6)).unwrap();
    train_stage2(&mut p, &refs, &mut queue, &frozen, &mut rng(7)).unwrap();
    let train_ok = p.key_checksum() == key_before && query_checksum(&p) != query_before;
    pass &= step_ok && train_ok;
    notes.push(format!(
        "key checksum invariant under adam_step: {step_ok}, under training with m=1: {train_ok}"
    ));

    Outcome::new(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 4. Selector oracles

fn normalized(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Recomputes every candidate's distance to the full chosen set at each step.
fn brute_force_kcenter(candidates: &[Vec<f64>], centers: &[Vec<f64>], k: usize) -> Vec<usize> {
    let cand = normalized(candidates);
    let mut chosen = normalized(centers);
    let mut picked = Vec::new();
    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in cand.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|s| 1.0 - c.iter().zip(s).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        let (_, i) = best.unwrap();
        picked.push(i);
        chosen.push(cand[i].clone());
    }
    picked
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn criterion_selectors() -> Outcome {
    let mut r = rng(4);
    let mut kc_match = 0;
    let mut scale_match = 0;
    let instances = 100;
    for _ in 0..instances {
        let dim = r.random_range(2..=6);
        let k = r.random_range(1..=8);
        let n = r.random_range(k..=20);
        let c = r.random_range(1..=5);
        let gen = |count: usize, r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..count)
                .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let cands = gen(n, &mut r);
        let centers = gen(c, &mut r);
        let got = kcenter_greedy(&to_tensor(&cands), &to_tensor(&centers), k).unwrap().indices;
        if got == brute_force_kcenter(&cands, &centers, k) {
            kc_match += 1;
        }
        let s = [1e-3, 0.37, 7.0, 1e4][r.random_range(0..4)];
        let scale = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> { rows.iter().map(|v| v.iter().map(|x| x * s).collect()).collect() };
        let scaled = kcenter_greedy(&to_tensor(&scale(&cands)), &to_tensor(&scale(&centers)), k)
            .unwrap()
            .indices;
        if scaled == got {
            scale_match += 1;
        }
    }

    let mut topk_match = 0;
    for _ in 0..instances {
        let n = r.random_range(1..=30);
        let k = r.random_range(1..=n);
        // Coarse values force ties.
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 * 0.1).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(k);
        if select_bald(&scores, k).unwrap().indices == order {
            topk_match += 1;
        }
    }

    let mut bald_ok = 0;
    let mut bald_total = 0;
    for _ in 0..instances {
        let m = r.random_range(2..=6);
        let t = r.random_range(2..=8);
        let n = r.random_range(1..=10);
        let passes: Vec<Tensor> = (0..t)
            .map(|_| {
                let mut rows = Vec::new();
                for _ in 0..n {
                    let row: Vec<f64> = match r.random_range(0..3) {
                        0 => vec![1.0 / m as f64; m],
                        1 => {
                            let mut one = vec![0.0; m];
                            one[r.random_range(0..m)] = 1.0;
                            one
                        }
                        _ => {
                            let w: Vec<f64> = (0..m).map(|_| r.random_range(0.0..1.0f64).powi(4)).collect();
                            let s: f64 = w.iter().sum();
                            w.iter().map(|v| v / s).collect()
                        }
                    };
                    rows.push(row);
                }
                to_tensor(&rows)
            })
            .collect();
        for s in bald_from_passes(&passes).unwrap() {
            bald_total += 1;
            if (0.0..=(m as f64).ln()).contains(&s) {
                bald_ok += 1;
            }
        }
    }
    // Two confident passes that disagree reach the two-class maximum.
    let flip = bald_from_passes(&[to_tensor(&[vec![1.0, 0.0]]), to_tensor(&[vec![0.0, 1.0]])]).unwrap();
    let max_ok = (flip[0] - LN_2).abs() < 1e-12;

    let pass = kc_match == instances
        && scale_match == instances
        && topk_match == instances
        && bald_ok == bald_total
        && max_ok;
    Outcome::new(
        pass,
        format!(
            "K-center = brute force {kc_match}/{instances}, scale-invariant {scale_match}/{instances}; \
             BALD top-K = sort {topk_match}/{instances}; BALD in [0, ln M] {bald_ok}/{bald_total}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Overfit

fn criterion_overfit() -> Outcome {
    let start = Instant::now();
    let records = small_records(4, 8, 256, 5);
    let refs: Vec<&IqRecord> = records.iter().collect();
    let mut params = NetworkParams::new(ModelConfig::new(4, 256), &mut rng(50)).unwrap();
    let mut queue = KeyQueue::new(512).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        weights: LossWeights::new(0.1, 0.2).unwrap(),
        ..TrainConfig::default()
    };
    let metrics = train_stage2(&mut params, &refs, &mut queue, &cfg, &mut rng(51)).unwrap();
    let elapsed = start.elapsed();
    let reached = metrics
        .iter()
        .find(|m| m.train_accuracy.is_some_and(|a| a >= 0.99))
        .map(|m| m.epoch);
    let best = metrics.iter().filter_map(|m| m.train_accuracy).fold(0.0, f64::max);
    let in_time = elapsed < Duration::from_secs(120);
    Outcome::new(
        reached.is_some() && in_time,
        format!(
            "32 records, M=4, L=256: train acc >= 0.99 at epoch {} (best {best:.3}), {:.1}s (< 120s)",
            reached.map_or("never".to_string(), |e| e.to_string()),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Pretraining efficacy

fn desk_channels() -> Vec<usize> {
    vec![8, 16, 32]
}

fn criterion_pretraining() -> Outcome {
    let records: Vec<IqRecord> = small_records(4, 64, 256, 6).into_iter().map(IqRecord::unlabeled).collect();
    let refs: Vec<&IqRecord> = records.iter().collect();
    let mut params = NetworkParams::new(
        ModelConfig::new(4, 256).with_conv_channels(desk_channels()),
        &mut rng(60),
    )
    .unwrap();
    let mut queue = KeyQueue::new(512).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let history = pretrain_stage1(&mut params, &refs, &mut queue, &cfg, &mut rng(61)).unwrap();
    let first = history[0].contrastive;
    let last = history[history.len() - 1].contrastive;
    let peak = history.iter().map(|m| m.contrastive).fold(0.0, f64::max);
    let ratio = last / first;
    Outcome::new(
        ratio <= 0.5,
        format!(
            "256 records, 50 epochs: L_CL epoch 1 {first:.3}, epoch 50 {last:.3}, ratio {ratio:.3} (<= 0.5); \
             peak {peak:.3}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7 and 8. Desk-scale active learning and the alpha sweep

fn desk_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed: Some(seed),
        num_emitters: 4,
        length: 256,
        snr_db: 10.0,
        initial_labeled: 16,
        budget: 16,
        rounds: 4,
        stage1_epochs: 50,
        stage2_epochs: 30,
        conv_channels: desk_channels(),
        save_checkpoints: false,
        out_dir: None,
        ..ExperimentConfig::default()
    }
}

fn final_accuracy(config: &ExperimentConfig, prepared: &Prepared) -> f64 {
    let outcome = harness::run_rounds(config, prepared.clone()).unwrap();
    outcome.reports.last().unwrap().test_accuracy
}

struct DeskResults {
    kcenter: Vec<f64>,
    random: Vec<f64>,
    bald: Vec<f64>,
    baseline: Vec<f64>,
    alpha_one: Vec<f64>,
    classifier_untouched: Vec<bool>,
    al_time: Duration,
}

fn desk_runs() -> DeskResults {
    let mut res = DeskResults {
        kcenter: Vec::new(),
        random: Vec::new(),
        bald: Vec::new(),
        baseline: Vec::new(),
        alpha_one: Vec::new(),
        classifier_untouched: Vec::new(),
        al_time: Duration::ZERO,
    };
    for seed in 0..SEEDS {
        let cfg = desk_config(seed);
        let start = Instant::now();
        let prepared = harness::prepare(&cfg).unwrap();
        res.kcenter.push(final_accuracy(&cfg, &prepared));
        let random = ExperimentConfig {
            strategy: Strategy::Random,
            ..cfg.clone()
        };
        res.random.push(final_accuracy(&random, &prepared));
        let bald = ExperimentConfig {
            strategy: Strategy::Bald,
            ..cfg.clone()
        };
        res.bald.push(final_accuracy(&bald, &prepared));
        let baseline = harness::run_baseline_cnn(&cfg).unwrap();
        res.baseline.push(baseline.reports.last().unwrap().test_accuracy);
        res.al_time += start.elapsed();

        let alpha_one = ExperimentConfig { alpha: 1.0, ..cfg.clone() };
        let outcome = harness::run_rounds(&alpha_one, prepared.clone()).unwrap();
        res.alpha_one.push(outcome.reports.last().unwrap().test_accuracy);
        let init = NetworkParams::new(
            cfg.model_config(cfg.num_emitters, cfg.length),
            &mut stream_rng(seed, stream::INIT, 0),
        )
        .unwrap();
        let classifier = |p: &NetworkParams| NetworkParams::checksum(&p.classifier.params());
        res.classifier_untouched
            .push(classifier(&outcome.params) == classifier(&init) && outcome.params.classifier == init.classifier);
    }
    res
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
}

fn criterion_active_learning(res: &DeskResults) -> Outcome {
    let (kc, rnd, bald, base) = (mean(&res.kcenter), mean(&res.random), mean(&res.bald), mean(&res.baseline));
    let in_time = res.al_time < Duration::from_secs(600);
    Outcome::new(
        kc >= rnd && kc >= base && in_time,
        format!(
            "{SEEDS} seeds, final mean acc: kcenter {kc:.3} >= random {rnd:.3}, full pipeline {kc:.3} >= \
             baseline_cnn {base:.3}; bald {bald:.3} (reported only); {:.0}s (< 600s)\n      \
             per seed kcenter [{}] random [{}] bald [{}] baseline [{}]",
            res.al_time.as_secs_f64(),
            fmt_list(&res.kcenter),
            fmt_list(&res.random),
            fmt_list(&res.bald),
            fmt_list(&res.baseline)
        ),
    )
}

fn criterion_alpha_sweep(res: &DeskResults) -> Outcome {
    let chance = 1.0 / 4.0;
    let (a1, a01) = (mean(&res.alpha_one), mean(&res.kcenter));
    let untouched = res.classifier_untouched.iter().all(|&u| u);
    Outcome::new(
        untouched && a1 <= chance + 0.15 && a01 - a1 >= 0.20,
        format!(
            "alpha=1 classifier unchanged from init: {untouched}; mean acc alpha=1 {a1:.3} (<= {:.2}), \
             alpha=0.1 {a01:.3} (gap {:.3} >= 0.20); alpha=1 per seed [{}]",
            chance + 0.15,
            a01 - a1,
            fmt_list(&res.alpha_one)
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Determinism and I/O

fn tiny_config(seed: u64, strategy: Strategy) -> ExperimentConfig {
    ExperimentConfig {
        seed: Some(seed),
        num_emitters: 3,
        per_emitter: 12,
        length: 64,
        initial_labeled: 6,
        rounds: 2,
        budget: 4,
        strategy,
        stage1_epochs: 1,
        stage2_epochs: 2,
        batch_size: 8,
        queue_depth: 16,
        mc_passes: 3,
        conv_channels: vec![4, 4, 8],
        save_checkpoints: false,
        out_dir: None,
        ..ExperimentConfig::default()
    }
}

fn criterion_determinism_io() -> Outcome {
    let mut notes = Vec::new();

    let mut same = true;
    for strategy in [Strategy::KCenter, Strategy::Bald, Strategy::Random] {
        let cfg = tiny_config(9, strategy);
        let run = || -> Vec<_> {
            harness::run_experiment(&cfg)
                .unwrap()
                .reports
                .iter()
                .map(|r| r.without_timing())
                .collect()
        };
        let (a, b) = (run(), run());
        same &= a == b && a.iter().map(|r| r.test_accuracy.to_bits()).eq(b.iter().map(|r| r.test_accuracy.to_bits()));
    }
    notes.push(format!("repeat runs bit-identical: {same}"));

    let dir = tempfile::tempdir().unwrap();
    let records = small_records(3, 5, 128, 90);
    let iq_path = dir.path().join("data.iq");
    save_iq_file(&iq_path, &records, 1.0e6).unwrap();
    let back = load_iq_file(&iq_path).unwrap();
    let bits = |rs: &[IqRecord]| -> Vec<(u64, u64)> {
        rs.iter()
            .flat_map(|r| r.samples.iter().map(|s| (s.re.to_bits(), s.im.to_bits())))
            .collect()
    };
    let iq_ok = back.sample_rate.to_bits() == 1.0e6f64.to_bits()
        && bits(&back.records) == bits(&records)
        && back.records.iter().map(|r| r.label).eq(records.iter().map(|r| r.label));
    notes.push(format!("I/Q round trip bit-exact: {iq_ok}"));

    let cfg = ModelConfig::new(3, 64).with_conv_channels(vec![4, 4, 8]);
    let params = NetworkParams::new(cfg.clone(), &mut rng(91)).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &params, 91, "test").unwrap();
    let reload_ok = load_checkpoint(&ckpt, Some(&cfg)).is_ok_and(|(p, _)| p.collections() == params.collections());
    let other = cfg.clone().with_conv_channels(vec![4, 4, 16]);
    let refuse_expected = load_checkpoint(&ckpt, Some(&other)).is_err();
    let bytes = std::fs::read(&ckpt).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    let tampered = text.replacen("\"num_classes\":3", "\"num_classes\":5", 1);
    let tampered_path = dir.path().join("tampered.ckpt");
    let header_changed = tampered != text;
    let mut tampered_bytes = bytes.clone();
    if header_changed {
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        let new_header = tampered.split('\n').next().unwrap().as_bytes().to_vec();
        tampered_bytes = [new_header, bytes[header_end..].to_vec()].concat();
    }
    std::fs::write(&tampered_path, tampered_bytes).unwrap();
    let refuse_header = header_changed && load_checkpoint(&tampered_path, None).is_err();
    let ckpt_ok = reload_ok && refuse_expected && refuse_header;
    notes.push(format!(
        "checkpoint reload exact: {reload_ok}, refuses other architecture: {refuse_expected}, refuses edited header: {refuse_header}"
    ));

    Outcome::new(same && iq_ok && ckpt_ok, notes.join("; "))
}

// ---------------------------------------------------------------------------

fn run(name: &str, f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("{name} panicked: {msg}"))
        }
    }
}

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.strip_prefix("criterion").and_then(|n| n.parse().ok()))
        .collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    if wanted(1) {
        record(1, "gradient suite", run("gradients", criterion_gradients));
    }
    if wanted(2) {
        record(2, "loss identities", run("losses", criterion_loss_identities));
    }
    if wanted(3) {
        record(3, "queue and momentum", run("queue", criterion_queue_momentum));
    }
    if wanted(4) {
        record(4, "selector oracles", run("selectors", criterion_selectors));
    }
    if wanted(5) {
        record(5, "overfit check", run("overfit", criterion_overfit));
    }
    if wanted(6) {
        record(6, "pretraining efficacy", run("pretraining", criterion_pretraining));
    }
    if wanted(7) || wanted(8) {
        match catch_unwind(desk_runs) {
            Ok(res) => {
                if wanted(7) {
                    record(7, "directional AL benefit", criterion_active_learning(&res));
                }
                if wanted(8) {
                    record(8, "alpha sweep", criterion_alpha_sweep(&res));
                }
            }
            Err(_) => {
                record(7, "directional AL benefit", Outcome::new(false, "desk-scale runs panicked"));
                record(8, "alpha sweep", Outcome::new(false, "desk-scale runs panicked"));
            }
        }
    }
    if wanted(9) {
        record(9, "determinism and I/O", run("determinism", criterion_determinism_io));
    }

    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed: {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
