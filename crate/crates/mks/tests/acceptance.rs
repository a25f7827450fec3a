//! End-to-end acceptance run: one `criterion N: PASS|FAIL` line per
//! criterion, each with the measured quantities and wall time. Exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mks::artifacts::metrics_csv;
use mks::cli::{erf_map, ErfModule};
use mks::config::RunConfig;
use mks::format::{self, AnyTensor};
use mks_core::attention::{
    ChannelAttention, ChannelAttentionConfig, KernelSchedule, SpatialAttention, SpatialAttentionConfig,
};
use mks_core::backbone::{count_flops, BackboneConfig, Model, Variant};
use mks_core::checks;
use mks_core::data::Clutter;
use mks_core::metrics::{class_ap, ScoredPrediction};
use mks_core::nn::{Conv2d, Linear, Module};
use mks_core::ops::{conv2d_forward, mul_broadcast, ConvSpec, Mode};
use mks_core::reference;
use mks_core::rng::SplitMix64;
use mks_core::train::{ablation_run, train, TrainConfig};
use mks_core::{Shape, Tensor};

type Outcome = Result<String, String>;
/// `(number, check, time budget in seconds)`.
type Criterion = (u32, fn() -> Outcome, u64);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(outcome: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    let secs = elapsed.as_secs_f64();
    match outcome {
        Ok(d) if elapsed <= budget => Ok(format!("{d}; {secs:.1}s")),
        Ok(d) => Err(format!("{d}; {secs:.1}s exceeds {}s", budget.as_secs())),
        Err(d) => Err(format!("{d}; {secs:.1}s")),
    }
}

fn uniform(shape: Shape, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

fn conv_oracle() -> Outcome {
    let mut rng = SplitMix64::new(0xacc1);
    let pick = |rng: &mut SplitMix64, lo: u64, hi: u64| (lo + rng.below(hi - lo + 1)) as usize;
    let mut worst = 0.0f64;
    for i in 0..200 {
        let spec = match i % 4 {
            0 => ConvSpec::dense(pick(&mut rng, 1, 4), pick(&mut rng, 1, 4), 2 * pick(&mut rng, 0, 2) + 1),
            1 => {
                let (k, d) = (2 * pick(&mut rng, 1, 3) + 1, pick(&mut rng, 1, 3));
                ConvSpec::depthwise(pick(&mut rng, 1, 5), k, d, (k - 1) * d / 2)
            }
            2 => ConvSpec::dense(pick(&mut rng, 1, 3), pick(&mut rng, 1, 3), 3).with_dilation(pick(&mut rng, 2, 3)),
            _ => {
                let g = pick(&mut rng, 1, 2);
                ConvSpec::dense(g * pick(&mut rng, 1, 3), g * pick(&mut rng, 1, 3), pick(&mut rng, 1, 4))
                    .with_groups(g)
                    .with_padding(pick(&mut rng, 0, 2))
                    .with_stride(pick(&mut rng, 1, 3))
            }
        };
        let (sh, sw) = spec.span();
        let h = sh.saturating_sub(2 * spec.padding).max(1) + rng.below(8) as usize;
        let w = sw.saturating_sub(2 * spec.padding).max(1) + rng.below(8) as usize;
        let x = uniform(Shape::new(1 + rng.below(2) as usize, spec.in_channels, h, w), &mut rng);
        let weight = uniform(spec.weight_shape(), &mut rng);
        let bias = uniform(Shape::vector(1, spec.out_channels), &mut rng);
        let fast = conv2d_forward(&x, &weight, Some(&bias), &spec).map_err(|e| e.to_string())?;
        let slow = reference::conv2d(&x, &weight, Some(&bias), &spec);
        let diff = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff / slow.max_abs().max(f64::MIN_POSITIVE));
    }
    check(
        worst < 1e-12,
        format!("200 instances, worst relative error {worst:.1e} (< 1e-12)"),
    )
}

fn gradcheck_all() -> Outcome {
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    let units = checks::units();
    for unit in units {
        let r = unit.run(0.0).map_err(|e| format!("{}: {e}", unit.name))?;
        worst = worst.max(r.max_rel_error);
        if !r.passed || r.tolerance > 1e-5 {
            failed.push(r.name);
        }
    }
    check(
        failed.is_empty(),
        format!(
            "{}/{} units, worst relative error {worst:.1e} (< 1e-5); failed {failed:?}",
            units.len() - failed.len(),
            units.len()
        ),
    )
}

fn schedule() -> Outcome {
    let mut rng = SplitMix64::new(0xacc3);
    let mut cases = 0;
    for s in 1..=6usize {
        for max in (5..=21usize).step_by(2) {
            let sched = KernelSchedule::new(s, max).map_err(|e| e.to_string())?;
            for (i, b) in sched.entries().iter().enumerate() {
                let k = (5 + 2 * i).min(max);
                if (b.size, b.dilation, b.padding) != (k, i + 1, (k - 1) * (i + 1) / 2) {
                    return Err(format!("S={s} max={max} branch {i}: {b:?}"));
                }
                let spec = b.depthwise(2);
                let (h, w) = (3 + rng.below(9) as usize, 2 + rng.below(9) as usize);
                let x = uniform(Shape::new(1, 2, h, w), &mut rng);
                let weight = uniform(spec.weight_shape(), &mut rng);
                let y = conv2d_forward(&x, &weight, None, &spec).map_err(|e| e.to_string())?;
                if y.shape() != x.shape() {
                    return Err(format!("S={s} max={max} branch {i}: {} -> {}", x.shape(), y.shape()));
                }
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} branches over S 1-6, max 5-21: closed forms hold, size preserved"
    ))
}

fn attention() -> Outcome {
    let mut rng = SplitMix64::new(0xacc4);
    let err = |e: mks_core::Error| e.to_string();
    let (c, s, h, w) = (6, 3, 8, 7);
    let mut sa = SpatialAttention::<f64>::new(SpatialAttentionConfig::new(c, s, 9), &mut rng).map_err(err)?;
    let x = Tensor::from_fn(Shape::new(2, c, h, w), |_| rng.normal());
    let features = sa.extract(&x, Mode::Train).map_err(err)?;
    let (parts, t) = sa.transform(&features).map_err(err)?;
    let sig = sa.attention(&t).map_err(err)?;
    let sig_ok = sig.shape() == Shape::new(2, s, h, w) && sig.data().iter().all(|&v| v > 0.0 && v < 1.0);

    let mut one_hot_ok = true;
    for pick in 0..s {
        let mut hot = Tensor::zeros(Shape::new(2, s, h, w));
        for b in 0..2 {
            hot.plane_mut(b, pick).fill(1.0);
        }
        let fused = sa.fuse(&x, &parts, &hot).map_err(err)?;
        let single = mul_broadcast(&x, &sa.out_conv.infer(&parts[pick]).map_err(err)?).map_err(err)?;
        one_hot_ok &= fused == single;
    }

    let mut ca = ChannelAttention::<f64>::new(ChannelAttentionConfig::new(8, 4), &mut rng).map_err(err)?;
    let xc = Tensor::from_fn(Shape::new(2, 8, 5, 6), |_| {
        let v = rng.uniform_range(0.2, 2.0);
        if rng.below(2) == 0 {
            v
        } else {
            -v
        }
    });
    let y = ca.forward(&xc, Mode::Eval).map_err(err)?;
    let mut spread = 0.0f64;
    for b in 0..2 {
        for ch in 0..8 {
            let r: Vec<f64> = y.plane(b, ch).iter().zip(xc.plane(b, ch)).map(|(o, i)| o / i).collect();
            spread = spread.max(r.iter().map(|v| (v - r[0]).abs() / r[0].abs()).fold(0.0, f64::max));
        }
    }
    let ratio_ok = spread <= 1e-12;
    check(
        sig_ok && one_hot_ok && ratio_ok,
        format!("Sig in (0,1) with shape (B,S,H,W): {sig_ok}; one-hot selects one branch: {one_hot_ok}; CA ratio spread {spread:.1e}"),
    )
}

fn ap() -> Outcome {
    let mut rng = SplitMix64::new(0xacc5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 1 + rng.below(40) as usize;
        let p_pos = rng.uniform();
        let mut preds: Vec<ScoredPrediction> = (0..n)
            .map(|i| {
                ScoredPrediction::new(
                    (i as f64 + rng.uniform_range(0.0, 0.5)) / n as f64,
                    rng.uniform() < p_pos,
                )
            })
            .collect();
        rng.shuffle(&mut preds);
        let positives = preds.iter().filter(|p| p.is_positive).count().max(1) + rng.below(4) as usize;
        let fast = class_ap(0, &preds, positives).map_err(|e| e.to_string())?.ap;
        worst = worst.max((fast - reference::average_precision(&preds, positives)).abs());
    }
    let hand = [
        ScoredPrediction::new(0.9, true),
        ScoredPrediction::new(0.8, false),
        ScoredPrediction::new(0.7, true),
    ];
    let hand = format!("{:.6}", class_ap(0, &hand, 2).map_err(|e| e.to_string())?.ap);
    check(
        worst <= 1e-12 && hand == "0.833333",
        format!("1000 sets, worst difference {worst:.1e} (<= 1e-12); hand example {hand}"),
    )
}

fn ablation() -> Outcome {
    let config = TrainConfig::ablation();
    let report = ablation_run(&config, &[0, 1, 2], &mut |v, seed, out| {
        println!("    {:<11} seed {seed} final ap {:.4}", v.name(), out.final_ap());
    })
    .map_err(|e| e.to_string())?;
    let m = |v| report.mean_ap(v);
    let (base, sa, ca, full) = (
        m(Variant::Base),
        m(Variant::BaseSa),
        m(Variant::BaseCa),
        m(Variant::BaseSaCa),
    );
    let ok = full > sa && sa > base && ca > base && full - base >= 0.03;
    check(
        ok,
        format!(
            "mean AP Base {base:.4}, +SA {sa:.4}, +CA {ca:.4}, +SA+CA {full:.4}; Full-Base {:+.4} (>= 0.03)",
            full - base
        ),
    )
}

fn erf() -> Outcome {
    let mut cfg = RunConfig::default();
    let stage = &mut cfg.train.model.stages[0];
    (stage.branches, stage.max_size) = (2, 7);
    let err = |e: mks::Error| e.to_string();
    let block = erf_map(&cfg, ErfModule::Block).map_err(err)?;
    let sa_only = erf_map(&cfg, ErfModule::Sa).map_err(err)?;
    let conv = erf_map(&cfg, ErfModule::Conv3).map_err(err)?;
    let (bw, cw) = (block.support_width(), conv.support_width());
    let (br, cr) = (block.radius95(), conv.radius95());
    check(
        bw >= 13 && cw == 3 && br > cr,
        format!(
            "support width block {bw} (SA only {}) vs 3x3 conv {cw}; 95% radius {br:.3} vs {cr:.3}",
            sa_only.support_width()
        ),
    )
}

fn flops() -> Outcome {
    let mut rng = SplitMix64::new(0xacc8);
    let err = |e: mks_core::Error| e.to_string();
    let fixtures = [
        (ConvSpec::dense(3, 8, 3), Shape::new(1, 3, 32, 32), 2 * 8 * 27 * 1024),
        (
            ConvSpec::depthwise(16, 7, 2, 6),
            Shape::new(1, 16, 16, 16),
            2 * 16 * 49 * 256,
        ),
        (ConvSpec::pointwise(16, 32), Shape::new(1, 16, 8, 8), 2 * 16 * 32 * 64),
        (
            ConvSpec::dense(8, 16, 3).with_stride(2),
            Shape::new(1, 8, 16, 16),
            2 * 16 * 72 * 64,
        ),
    ];
    let mut fixtures_ok = 0;
    for (spec, input, hand) in fixtures {
        let mut conv = Conv2d::<f64>::new(spec, true, &mut rng).map_err(err)?;
        conv.forward(&Tensor::zeros(input), Mode::Eval).map_err(err)?;
        fixtures_ok += usize::from(2 * spec.macs(input).map_err(err)? == hand && 2 * conv.macs() == hand);
    }
    let mut fc = Linear::<f64>::new(64, 16, &mut rng).map_err(err)?;
    fc.forward(&Tensor::zeros(Shape::vector(1, 64)), Mode::Eval)
        .map_err(err)?;
    fixtures_ok += usize::from(2 * fc.macs() == 2 * 64 * 16);

    let config = BackboneConfig::tiny();
    let mut model = Model::<f32>::seeded(config.clone(), 1).map_err(err)?;
    model.reset_macs();
    model
        .forward(&Tensor::full(Shape::new(1, 3, 64, 64), 0.5f32), Mode::Eval)
        .map_err(err)?;
    let (counted, closed) = (2 * model.macs(), count_flops(&config, 64, 64).map_err(err)?);

    let input = Shape::new(1, 32, 16, 16);
    let dense = 2 * ConvSpec::dense(32, 32, 13).macs(input).map_err(err)?;
    let dilated = 2 * ConvSpec::depthwise(32, 7, 2, 6).macs(input).map_err(err)?;
    check(
        fixtures_ok == 5 && counted == closed && dilated < dense,
        format!("{fixtures_ok}/5 fixtures exact; tiny backbone counted {counted} vs count_flops {closed}; depthwise k7 d2 {dilated} < dense 13x13 {dense}"),
    )
}

fn serialization() -> Outcome {
    let err = |e: mks::Error| e.to_string();
    let core = |e: mks_core::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let model = Model::<f32>::seeded(BackboneConfig::tiny(), 9).map_err(core)?;
    let path = dir.path().join("w.mksw");
    format::save_weights(&path, &model).map_err(err)?;
    let mut other = Model::<f32>::seeded(BackboneConfig::tiny(), 10).map_err(core)?;
    format::load_model(&mut other, format::load_weights(&path).map_err(err)?).map_err(err)?;
    let weights_ok = model
        .state_dict()
        .iter()
        .zip(other.state_dict())
        .all(|((na, a), (nb, b))| {
            na == &nb
                && a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });

    let mut rng = SplitMix64::new(0xacc9);
    let t = Tensor::from_fn(Shape::new(2, 3, 5, 4), |_| f64::from_bits(rng.next_u64()));
    let tpath = dir.path().join("t.mkst");
    format::save_tensor(&tpath, &AnyTensor::F64(t.clone())).map_err(err)?;
    let back: Tensor<f64> = format::load_tensor(&tpath)
        .map_err(err)?
        .into_typed()
        .ok_or("dtype changed")?;
    let tensor_ok = back.shape() == t.shape()
        && back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut small = TrainConfig {
        model: mks::config::smoke_model(),
        height: 32,
        width: 32,
        train_samples: 64,
        val_samples: 16,
        epochs: 2,
        clutter: Clutter::default(),
        ..TrainConfig::default()
    };
    small.model.variant = Variant::BaseSaCa;
    let a = metrics_csv(&train(&small, Variant::BaseSaCa, 5).map_err(core)?.history);
    let b = metrics_csv(&train(&small, Variant::BaseSaCa, 5).map_err(core)?.history);
    let csv_ok = a.as_bytes() == b.as_bytes();
    check(
        weights_ok && tensor_ok && csv_ok,
        format!("weight file bit-identical: {weights_ok}; tensor bit-identical: {tensor_ok}; metrics CSVs byte-identical: {csv_ok}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (1, conv_oracle, 60),
        (2, gradcheck_all, 300),
        (3, schedule, 60),
        (4, attention, 60),
        (5, ap, 60),
        (6, ablation, 45 * 60),
        (7, erf, 60),
        (8, flops, 60),
        (9, serialization, 300),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, run, budget) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = within(run(), start.elapsed(), Duration::from_secs(budget));
        match outcome {
            Ok(d) => println!("criterion {n}: PASS {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
