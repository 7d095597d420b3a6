//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p tmsnet-workbench --test acceptance`.
//! Trains two C=8 networks on 32^3 phantoms and takes roughly a quarter of
//! an hour on one core.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tms_autograd::{Adam, AdamConfig, Tape, Tensor, Var};
use tmsnet_core::corruption::{CorruptionSpec, Views};
use tmsnet_core::model::{Census, ModelConfig, TmsNet, Variant, BRANCHES};
use tmsnet_core::qc::{default_grid, qc_experiment, summarize, QcRow};
use tmsnet_core::quality::{dice, jaccard, otsu_threshold, pearson_r, roc_auc, DEFAULT_TAU};
use tmsnet_core::trainer::{train_phase, Phase, SliceDataset};
use tmsnet_core::wavelet::{haar_decompose, haar_reconstruct, wavelet_pool, wavelet_unpool, SubbandVars};
use tmsnet_core::{Mask3D, ViewAxis, Volume3D};
use tmsnet_workbench::dataset::{load_split, make_dataset, Split};
use tmsnet_workbench::experiment::{evaluate, mean, mean_dice_under, train_config, train_from_dir, TrainSpec};

const SIZE: usize = 32;
const CHANNELS: usize = 8;
const EPOCHS: usize = 12;
const SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {tag}  {name}: {}", o.detail);
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` away from every point in `kinks`.
fn off_kinks(t: Tensor<f64>, kinks: &[f64], gap: f64) -> Tensor<f64> {
    t.map(|v| {
        let mut v = v;
        while kinks.iter().any(|k| (v - k).abs() < gap) {
            v += gap;
        }
        v
    })
}

fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

type Graph = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Scalar loss `sum(weights * f(inputs))` with fixed random weights.
fn weighted_loss(inputs: &[Tensor<f64>], f: &Graph, grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), grads).unwrap()).collect();
    let out = f(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(random_tensor(&shape, -1.0, 1.0, &mut rng)).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.value(loss).item().unwrap();
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).unwrap();
    (value, vars.iter().map(|&v| g.wrt(v).unwrap().clone()).collect())
}

/// Worst normalized error between analytic and central-difference
/// gradients over every input of `f`.
fn gradcheck(inputs: &[Tensor<f64>], f: &Graph) -> f64 {
    let h = 1e-6;
    let (_, analytic) = weighted_loss(inputs, f, true);
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let numeric: Vec<f64> = (0..inputs[k].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                (weighted_loss(&plus, f, false).0 - weighted_loss(&minus, f, false).0) / (2.0 * h)
            })
            .collect();
        worst = worst.max(norm_rel_err(a.data(), &numeric));
    }
    worst
}

fn criterion_wavelet() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut max_err, mut max_energy): (f32, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..5), 2 * rng.gen_range(1..17), 2 * rng.gen_range(1..17)];
        let n = shape.iter().product();
        let x = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let s = haar_decompose(&x).unwrap();
        let y = haar_reconstruct(&s).unwrap();
        max_err = max_err.max(x.max_abs_diff(&y).unwrap());
        let e_in: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let e_out: f64 = s.bands().iter().flat_map(|b| b.data()).map(|&v| (v as f64).powi(2)).sum();
        max_energy = max_energy.max((e_out - e_in).abs() / e_in);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        max_err < 1e-6 && max_energy < 1e-5 && secs < 5.0,
        format!("max abs err {max_err:.2e}, energy rel err {max_energy:.2e}, {secs:.2} s"),
    )
}

fn op_checks() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut r = |shape: &[usize]| random_tensor(shape, -1.0, 1.0, &mut rng);
    let (a, b) = (r(&[2, 3, 4]), r(&[2, 3, 4]));
    let (x, w, bias) = (r(&[2, 3, 6, 6]), r(&[4, 3, 3, 3]), r(&[4]));
    let (xs, ws) = (r(&[1, 2, 6, 6]), r(&[3, 2, 2, 2]));
    let img = r(&[2, 3, 8, 8]);
    let bands = [r(&[2, 3, 4, 4]), r(&[2, 3, 4, 4]), r(&[2, 3, 4, 4]), r(&[2, 3, 4, 4])];
    let kinked = off_kinks(a.clone(), &[0.0], 0.05);
    let clamped = off_kinks(a.clone(), &[-0.5, 0.5], 0.05);
    let probs = random_tensor(&[2, 1, 4, 4], 0.05, 0.95, &mut ChaCha8Rng::seed_from_u64(3));
    let target = random_tensor(&[2, 1, 4, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).map(|v| v.round());
    let pair = [a.clone(), b.clone()];
    let mut out: Vec<(&'static str, f64)> = vec![
        ("add", gradcheck(&pair, &|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", gradcheck(&pair, &|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", gradcheck(&pair, &|t, v| t.mul(v[0], v[1]).unwrap())),
        ("mul_scalar", gradcheck(&[a.clone()], &|t, v| t.mul_scalar(v[0], -1.7).unwrap())),
        ("add_scalar", gradcheck(&[a.clone()], &|t, v| t.add_scalar(v[0], 0.3).unwrap())),
        ("relu", gradcheck(&[kinked], &|t, v| t.relu(v[0]).unwrap())),
        ("sigmoid", gradcheck(&[a.clone()], &|t, v| t.sigmoid(v[0]).unwrap())),
        ("clamp", gradcheck(&[clamped], &|t, v| t.clamp(v[0], -0.5, 0.5).unwrap())),
        ("concat", gradcheck(&pair, &|t, v| t.concat(&[v[0], v[1]], 1).unwrap())),
        ("narrow", gradcheck(&[a.clone()], &|t, v| t.narrow(v[0], 2, 1, 2).unwrap())),
        ("sum", gradcheck(&[a.clone()], &|t, v| t.sum(v[0]).unwrap())),
        ("mean", gradcheck(&[a.clone()], &|t, v| t.mean(v[0]).unwrap())),
        (
            "bce_loss",
            gradcheck(&[probs], &move |t, v| t.bce_loss(v[0], &target).unwrap()),
        ),
        (
            "conv2d 3x3 pad 1",
            gradcheck(&[x, w, bias], &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()),
        ),
        (
            "conv2d 2x2 stride 2",
            gradcheck(&[xs, ws], &|t, v| t.conv2d(v[0], v[1], None, 2, 0).unwrap()),
        ),
        (
            "wavelet pool",
            gradcheck(&[img], &|t, v| {
                let s = wavelet_pool(t, v[0]).unwrap();
                t.concat(&[s.ll, s.lh, s.hl, s.hh], 1).unwrap()
            }),
        ),
        (
            "wavelet unpool",
            gradcheck(&bands, &|t, v| {
                let s = SubbandVars {
                    ll: v[0],
                    lh: v[1],
                    hl: v[2],
                    hh: v[3],
                };
                wavelet_unpool(t, &s).unwrap()
            }),
        ),
    ];
    out.sort_by(|p, q| q.1.total_cmp(&p.1));
    out
}

fn net_loss(net: &TmsNet<f64>, view: ViewAxis, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let mut tape = Tape::without_param_grads();
    let v = tape.input(x.clone(), false).unwrap();
    let p = net.forward(&mut tape, view, v).unwrap();
    let l = tape.bce_loss(p, y).unwrap();
    tape.value(l).item().unwrap()
}

/// Input gradient in full and two sampled entries of every parameter tensor
/// on the path.
fn network_check() -> (f64, f64) {
    let mut net = TmsNet::<f64>::new(ModelConfig {
        channels: 2,
        variant: Variant::Shared,
        standard_view: ViewAxis::Axial,
        seed: 7,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in net.store().ids().collect::<Vec<_>>() {
        let p = net.store_mut().get_mut(id);
        if p.name.ends_with("bias") {
            p.value.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        }
    }
    let x = random_tensor(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
    let y = random_tensor(&[1, 1, 16, 16], 0.0, 1.0, &mut rng).map(|v| v.round());
    let view = ViewAxis::Sagittal;
    let mut tape = Tape::new();
    let xv = tape.input(x.clone(), true).unwrap();
    let p = net.forward(&mut tape, view, xv).unwrap();
    let l = tape.bce_loss(p, &y).unwrap();
    let grads = tape.backward(l).unwrap();
    let h = 1e-5;
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            (net_loss(&net, view, &xp, &y) - net_loss(&net, view, &xm, &y)) / (2.0 * h)
        })
        .collect();
    let input_err = norm_rel_err(grads.wrt(xv).unwrap().data(), &numeric);

    let mut ids = net.encoder(view).params().to_vec();
    ids.extend(net.decoder_params(view));
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for id in ids {
        let g = grads.param(id).unwrap().clone();
        for _ in 0..2 {
            let k = rng.gen_range(0..g.len());
            let orig = net.store().get(id).value.data()[k];
            net.store_mut().get_mut(id).value.data_mut()[k] = orig + h;
            let lp = net_loss(&net, view, &x, &y);
            net.store_mut().get_mut(id).value.data_mut()[k] = orig - h;
            let lm = net_loss(&net, view, &x, &y);
            net.store_mut().get_mut(id).value.data_mut()[k] = orig;
            analytic.push(g.data()[k]);
            numeric.push((lp - lm) / (2.0 * h));
        }
    }
    (input_err, norm_rel_err(&analytic, &numeric))
}

fn criterion_autodiff() -> Outcome {
    let start = Instant::now();
    let ops = op_checks();
    let (input_err, param_err) = network_check();
    let secs = start.elapsed().as_secs_f64();
    let worst_op = ops[0];
    let pass = worst_op.1 < 1e-4 && input_err < 1e-4 && param_err < 1e-4 && secs < 120.0;
    outcome(
        pass,
        format!(
            "{} op kernels, worst {} {:.2e}; network input {input_err:.2e}, parameters {param_err:.2e}; {secs:.1} s",
            ops.len(),
            worst_op.0,
            worst_op.1
        ),
    )
}

fn criterion_census() -> Outcome {
    let mut problems = Vec::new();
    for variant in [Variant::Shared, Variant::Independent3] {
        let net = TmsNet::<f32>::new(ModelConfig {
            channels: CHANNELS,
            variant,
            standard_view: ViewAxis::Axial,
            seed: 0,
        })
        .unwrap();
        let expect = Census {
            residual: 5,
            wavelet_analysis: 3,
            pool: 4,
        };
        if net.encoders().iter().any(|e| e.census() != expect) {
            problems.push(format!("{variant} encoder census"));
        }
        for view in ViewAxis::ALL {
            let d = net.decoder(view);
            if d.branches.len() != 5 {
                problems.push(format!("{view} decoder has {} branches", d.branches.len()));
            }
            for b in 1..BRANCHES {
                for (k, r) in d.branch_residuals(b).iter().enumerate() {
                    if r.params() != d.shared[b - 1 - k].params() {
                        problems.push(format!("{view} branch {b} level {} not shared", b - 1 - k));
                    }
                }
            }
        }
    }
    let detail = if problems.is_empty() {
        "5 residual, 3 wavelet analysis, 4 pooling per encoder; 5 branches per decoder; shared levels alias".to_string()
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

fn snapshot(net: &TmsNet<f32>) -> Vec<(String, Vec<u32>)> {
    net.store()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn criterion_freezing(train: &[(Volume3D, Mask3D)]) -> Outcome {
    let data = SliceDataset::from_volumes(train).unwrap();
    let cfg = train_config(SIZE, 1, SEED);
    let mut moved = Vec::new();
    let mut updated = 0;
    for variant in [Variant::Shared, Variant::Independent3] {
        let mut net = TmsNet::new(ModelConfig {
            channels: CHANNELS,
            variant,
            standard_view: ViewAxis::Axial,
            seed: SEED,
        })
        .unwrap();
        let mut adam = Adam::new(AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        for phase in Phase::ALL {
            let ids = match phase {
                Phase::Encoder => net.encoder_params(),
                Phase::Decoder(v) => net.decoder_params(v).to_vec(),
            };
            let trainable: HashSet<String> = ids.iter().map(|&id| net.store().get(id).name.clone()).collect();
            let before = snapshot(&net);
            train_phase(&mut net, &mut adam, &data, phase, &cfg, cfg.lr, &mut rng).unwrap();
            for ((name, b), (_, a)) in before.iter().zip(&snapshot(&net)) {
                if trainable.contains(name) {
                    updated += usize::from(a != b);
                } else if a != b {
                    moved.push(format!("{variant}/{phase:?}: {name}"));
                }
            }
        }
    }
    let detail = if moved.is_empty() {
        format!("frozen tensors bit-exact in all 4 phases, both variants; {updated} trainable tensors updated")
    } else {
        format!("frozen tensors moved: {}", moved.join(", "))
    };
    outcome(moved.is_empty() && updated > 0, detail)
}

fn mean_dice_where(rows: &[QcRow], method: &str, views: &str, magnitude: f64) -> f64 {
    mean(
        rows.iter()
            .filter(|r| r.method == method && r.views == views && (r.eps_or_sigma - magnitude).abs() < 1e-12)
            .map(|r| r.dice),
    )
}

fn non_increasing(values: &[f64], tol: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + tol)
}

fn fmt_seq(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" > ")
}

fn criterion_degradation(rows: &[QcRow]) -> Outcome {
    let clean = mean_dice_where(rows, "clean", "none", 0.0);
    let mut fgsm = vec![clean];
    fgsm.extend([0.01, 0.02, 0.03].map(|e| mean_dice_where(rows, "fgsm", "three", e)));
    let mut rician = vec![clean];
    rician.extend([0.05, 0.15, 0.25].map(|s| mean_dice_where(rows, "rician", "none", s)));
    let volumes = rows.iter().map(|r| &r.volume_id).collect::<HashSet<_>>().len();
    outcome(
        non_increasing(&fgsm, 0.02) && non_increasing(&rician, 0.02) && volumes >= 8,
        format!("{volumes} volumes; FGSM {}; Rician {}", fmt_seq(&fgsm), fmt_seq(&rician)),
    )
}

fn criterion_single_view(rows: &[QcRow]) -> Outcome {
    let single = mean_dice_where(rows, "fgsm", "single", 0.03);
    let three = mean_dice_where(rows, "fgsm", "three", 0.03);
    outcome(single > three, format!("single-view {single:.4} vs three-view {three:.4}"))
}

/// Two-sided Student t tail for integer `df` from the finite trigonometric
/// series.
fn t_two_sided_p(t: f64, df: usize) -> f64 {
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let (s, c) = (theta.sin(), theta.cos());
    let a = if df % 2 == 1 {
        let mut sum = 0.0;
        if df > 1 {
            let mut term = c;
            sum = term;
            let mut k = 1;
            while 2 * k + 1 < df {
                term *= (2 * k) as f64 / (2 * k + 1) as f64 * c * c;
                sum += term;
                k += 1;
            }
        }
        2.0 / PI * (theta + s * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1;
        while 2 * k < df {
            term *= (2 * k - 1) as f64 / (2 * k) as f64 * c * c;
            sum += term;
            k += 1;
        }
        s * sum
    };
    1.0 - a
}

fn criterion_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = [0.0f64; 5];
    let mut otsu_mismatch = 0;
    for _ in 0..50 {
        let dims = [rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..7)];
        let n: usize = dims.iter().product();
        let p = rng.gen_range(0.0..1.0);
        let bits = |rng: &mut ChaCha8Rng| (0..n).map(|_| u8::from(rng.gen_bool(p))).collect::<Vec<_>>();
        let (ba, bb) = (bits(&mut rng), bits(&mut rng));
        let inter = ba.iter().zip(&bb).filter(|(x, y)| **x == 1 && **y == 1).count() as f64;
        let union = ba.iter().zip(&bb).filter(|(x, y)| **x == 1 || **y == 1).count() as f64;
        let total = (ba.iter().chain(&bb).filter(|&&x| x == 1).count()) as f64;
        let d_oracle = if total == 0.0 { 1.0 } else { 2.0 * inter / total };
        let j_oracle = if union == 0.0 { 1.0 } else { inter / union };
        let (ma, mb) = (
            Mask3D::new(dims, [1.0; 3], ba).unwrap(),
            Mask3D::new(dims, [1.0; 3], bb).unwrap(),
        );
        worst[0] = worst[0].max((dice(&ma, &mb).unwrap() - d_oracle).abs());
        worst[1] = worst[1].max((jaccard(&ma, &mb).unwrap() - j_oracle).abs());

        // Otsu: exhaustive search over the 256 bin-centre thresholds
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let centre = if rng.gen_bool(0.4) { 0.75 } else { 0.25 };
                (centre + rng.gen_range(-0.2..0.2f32)).clamp(0.0, 1.0)
            })
            .collect();
        let bin = |v: f32| ((v as f64 * 256.0).floor() as i64).clamp(0, 255) as usize;
        let centre = |b: usize| (b as f64 + 0.5) / 256.0;
        let mut best: Option<(f64, usize)> = None;
        for k in 0..255 {
            let lo: Vec<f64> = data.iter().filter(|&&v| bin(v) <= k).map(|&v| centre(bin(v))).collect();
            let hi: Vec<f64> = data.iter().filter(|&&v| bin(v) > k).map(|&v| centre(bin(v))).collect();
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
            let obj = lo.len() as f64 * hi.len() as f64 * (m0 - m1).powi(2) / (n * n) as f64;
            if best.map_or(true, |(b, _)| obj > b + 1e-15) {
                best = Some((obj, k));
            }
        }
        let r = otsu_threshold(&Volume3D::new(dims, [1.0; 3], data).unwrap());
        match best {
            Some((_, k)) => {
                worst[2] = worst[2].max((r.threshold - (k + 1) as f64 / 256.0).abs());
                otsu_mismatch += usize::from(r.degenerate || r.bin != k);
            }
            None => otsu_mismatch += usize::from(!r.degenerate),
        }

        // AUC: fraction of correctly ordered (positive, negative) pairs
        let m = rng.gen_range(4..40);
        let mut labels: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| (rng.gen_range(0..10) as f64 + if l { 2.0 } else { 0.0 }) / 12.0)
            .collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        worst[3] = worst[3].max((roc_auc(&scores, &labels).unwrap() - wins / pairs).abs());

        // Pearson: mean product of z-scores, p from the t distribution
        let k = rng.gen_range(3..60);
        let slope = rng.gen_range(-2.0..2.0);
        let x: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| slope * v + rng.gen_range(-0.5..0.5)).collect();
        let z = |v: &[f64]| {
            let mu = v.iter().sum::<f64>() / k as f64;
            let sd = (v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / k as f64).sqrt();
            v.iter().map(|a| (a - mu) / sd).collect::<Vec<_>>()
        };
        let r_oracle = z(&x).iter().zip(z(&y)).map(|(a, b)| a * b).sum::<f64>() / k as f64;
        let df = k - 2;
        let t = r_oracle * (df as f64 / (1.0 - r_oracle * r_oracle)).sqrt();
        let (r, pv) = pearson_r(&x, &y).unwrap();
        worst[4] = worst[4]
            .max((r - r_oracle).abs())
            .max((pv - t_two_sided_p(t, df)).abs());
    }
    let names = ["dice", "jaccard", "otsu", "roc_auc", "pearson"];
    let pass = worst.iter().all(|&e| e <= 1e-10) && otsu_mismatch == 0;
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("50 instances each, max abs diff: {detail}; otsu bin mismatches {otsu_mismatch}"))
}

fn tmsnet(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_tmsnet"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

/// Data generation, training, evaluation and the QC grid through the
/// command line; returns every CSV produced.
fn pipeline_csvs(dir: &Path) -> Option<Vec<(String, Vec<u8>)>> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, ckpt) = (dir.join("data"), dir.join("ckpt"));
    let (eval, qc, summary) = (dir.join("eval.csv"), dir.join("qc.csv"), dir.join("summary.json"));
    let steps: [Vec<String>; 4] = [
        vec!["gen-data".into(), "--out".into(), s(&data), "--train".into(), "2".into(), "--val".into(), "1".into(),
             "--test".into(), "2".into(), "--seed".into(), "5".into(), "--size".into(), SIZE.to_string()],
        vec!["train".into(), "--data".into(), s(&data), "--out".into(), s(&ckpt), "--channels".into(), "2".into(),
             "--epochs".into(), "1".into(), "--seed".into(), "5".into()],
        vec!["evaluate".into(), "--ckpt".into(), s(&ckpt), "--data".into(), s(&data), "--out".into(), s(&eval)],
        vec!["qc".into(), "--ckpt".into(), s(&ckpt), "--data".into(), s(&data), "--out".into(), s(&qc),
             "--summary".into(), s(&summary)],
    ];
    for step in &steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        if !tmsnet(&args) {
            return None;
        }
    }
    let files = [ckpt.join("train_log.csv"), eval, qc];
    files
        .iter()
        .map(|p| Some((p.file_name()?.to_string_lossy().into_owned(), std::fs::read(p).ok()?)))
        .collect()
}

fn criterion_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (pipeline_csvs(a.path()), pipeline_csvs(b.path())) {
        (Some(x), Some(y)) => {
            let names: Vec<&str> = x.iter().map(|(n, _)| n.as_str()).collect();
            let differ: Vec<&str> = x.iter().zip(&y).filter(|(p, q)| p.1 != q.1).map(|(p, _)| p.0.as_str()).collect();
            let detail = if differ.is_empty() {
                format!("{} byte-identical across two runs", names.join(", "))
            } else {
                format!("differ: {}", differ.join(", "))
            };
            outcome(differ.is_empty(), detail)
        }
        _ => outcome(false, "pipeline run failed"),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, o: Outcome| {
        report(n, name, &o);
        results.push((n, name, o));
    };
    println!("acceptance: {SIZE}^3 phantoms, C={CHANNELS}, {EPOCHS} epochs, seed {SEED}");

    run(1, "wavelet exactness", criterion_wavelet());
    run(2, "autodiff correctness", criterion_autodiff());
    run(3, "architecture census", criterion_census());
    run(11, "metric oracles", criterion_metric_oracles());

    let dir = tempfile::tempdir().unwrap();
    make_dataset(24, 2, 8, SEED, SIZE, dir.path()).unwrap();
    let train: Vec<(Volume3D, Mask3D)> = load_split(dir.path(), Split::Train)
        .unwrap()
        .into_iter()
        .map(|c| (c.volume, c.mask))
        .collect();
    let test = load_split(dir.path(), Split::Test).unwrap();
    run(4, "phase freezing", criterion_freezing(&train[..4]));

    let spec = |variant| TrainSpec {
        variant,
        channels: CHANNELS,
        epochs: EPOCHS,
        seed: SEED,
        standard_view: ViewAxis::Axial,
    };
    let start = Instant::now();
    let (shared, _) = train_from_dir(dir.path(), &spec(Variant::Shared), None).unwrap();
    let rows = evaluate(&shared, &test).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mean_dice = mean(rows.iter().map(|r| r.dice));
    run(
        5,
        "phantom segmentation",
        outcome(
            mean_dice >= 0.85 && secs < 1800.0 && test.len() == 8,
            format!(
                "mean aggregated Dice {mean_dice:.4} on {} held-out volumes after {EPOCHS} epochs on {}; {secs:.0} s",
                test.len(),
                train.len()
            ),
        ),
    );

    let qc_rows = qc_experiment(&shared, &test, &default_grid(SEED), DEFAULT_TAU).unwrap();
    run(6, "degradation monotonicity", criterion_degradation(&qc_rows));
    run(7, "single-view robustness", criterion_single_view(&qc_rows));

    let (independent, _) = train_from_dir(dir.path(), &spec(Variant::Independent3), None).unwrap();
    let fgsm = CorruptionSpec::fgsm(0.02, Views::Three);
    let d_shared = mean_dice_under(&shared, &test, Some(&fgsm)).unwrap();
    let d_indep = mean_dice_under(&independent, &test, Some(&fgsm)).unwrap();
    run(
        8,
        "ablation ordering",
        outcome(
            d_shared >= d_indep,
            format!("three-view FGSM 0.02 over {} volumes: shared {d_shared:.4}, independent3 {d_indep:.4}", test.len()),
        ),
    );

    let s = summarize(&qc_rows).unwrap();
    let (r, p) = (s.r.unwrap_or(f64::NAN), s.p.unwrap_or(f64::NAN));
    run(
        9,
        "qc correlation",
        outcome(r >= 0.7 && p < 0.01, format!("r = {r:.4}, p = {p:.2e} over {} rows", s.n)),
    );
    let auc = s.auc.unwrap_or(f64::NAN);
    run(
        10,
        "qc classification",
        outcome(
            auc >= 0.85 && s.mae <= 0.2,
            format!("AUC = {auc:.4} ({} of {} rows high quality), MAE = {:.4}", s.high_quality, s.n, s.mae),
        ),
    );
    run(12, "determinism", criterion_determinism());

    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for (n, name, o) in &results {
        report(*n, name, o);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
